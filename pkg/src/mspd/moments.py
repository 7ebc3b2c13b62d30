"""Analytic first and second moments of MSPDs through the resolvent.

All time integrals share one uniform grid per query and use the trapezoid
rule, so every reported number carries an ``O(h^2)`` discretization error.
The grid is chosen so that every requested horizon is a node; the default
step is ``max(horizon)/4096``.

Notation used in comments: ``m(t) = E[lambda_t]``, ``F`` is the time profile
and ``c`` the modulator of the excitation entries, ``P`` and ``b`` the same
for the payoff kernel.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import marks as mk
from .errors import GridMismatch, NotSeparable, ValidationError
from .kernels import (DKernel, GridMatrix, Separable, _entrywise, cumulative_integral, grid_size,
                      mean_kernel, resolvent, trapezoid_convolution)
from .simulator import ScenarioSpec, StressScenario

DEFAULT_NODES = 4096
RESIDUAL_THRESHOLD = 1e-6


# ---------------------------------------------------------------------------
# grid and engine


def choose_step(times: Sequence[float], step: float | None = None, max_tries: int = 100_000) -> float:
    """Largest step ``<= step`` (default ``max(times)/4096``) making every time a grid node."""
    times = [float(t) for t in times if t > 0]
    if not times:
        raise ValueError("need a positive horizon")
    top = max(times)
    h0 = top / DEFAULT_NODES if step is None else float(step)
    n0 = max(1, math.ceil(top / h0 - 1e-9))
    for n in range(n0, n0 + max_tries):
        h = top / n
        if all(abs(t / h - round(t / h)) <= 1e-9 * max(1.0, t / h) for t in times):
            return h
    raise GridMismatch(f"no uniform grid near step {h0} has all of {times} as nodes")


class MomentEngine:
    """Mean kernel, resolvent and expected intensity of a spec on ``[0, horizon]``."""

    def __init__(self, spec: ScenarioSpec, horizon: float, step: float):
        n = grid_size(step, horizon)
        self.spec = spec
        self.step = step
        self.n = n
        self.times = step * np.arange(n + 1)
        self.phi = mean_kernel(spec.excitation, spec.marks, step, horizon)
        self.psi = resolvent(self.phi, spec.branching)
        self.residual = self.psi.meta["residual"]
        self.F = spec.excitation.profile_grid(self.times)
        self.mu = spec.baseline_grid(self.times)
        self.m = self.mu + trapezoid_convolution(self.psi.values, self.mu, step)

    def zeta_bar(self, zeta: DKernel) -> np.ndarray:
        return mean_kernel(zeta, self.spec.marks, self.step, self.n * self.step).values

    def descendant_weights(self, zeta: DKernel) -> np.ndarray:
        """``q[tau, i, m, k] = ((zeta-bar + zeta-bar * Psi)^{im} * F^{mk})(tau)``.

        The expected payoff generated by the descendants of one point of
        component k with mark y added at lag ``tau`` before the horizon is
        ``sum_m q[tau, i, m, k] c^{mk}(y)``.
        """
        zb = self.zeta_bar(zeta)
        xi = zb + trapezoid_convolution(zb, self.psi.values, self.step)
        return trapezoid_convolution(xi, self.F, self.step, op=_entrywise)


_ENGINES: dict = {}
_MAX_ENGINES = 64


def engine(spec: ScenarioSpec, horizon: float, step: float) -> MomentEngine:
    """Shared engine for the parts of ``spec`` the resolvent depends on."""
    key = (spec.baseline, spec.excitation, spec.marks, float(horizon), float(step))
    eng = _ENGINES.get(key)
    if eng is None:
        if len(_ENGINES) >= _MAX_ENGINES:
            _ENGINES.pop(next(iter(_ENGINES)))
        eng = _ENGINES[key] = MomentEngine(spec, horizon, step)
    return eng


def _lag_engine(spec: ScenarioSpec, lag: float, step: float) -> MomentEngine:
    n = max(1, math.ceil(lag / step - 1e-9))
    return engine(spec, lag, lag / n)


# ---------------------------------------------------------------------------
# first moments


def expect_intensity(spec: ScenarioSpec, step: float | None = None,
                     horizon: float | None = None) -> GridMatrix:
    """``E[lambda_t] = mu(t) + int_0^t Psi(t-w) mu(w) dw`` on the grid, shape ``(n+1, d)``."""
    T = spec.horizon if horizon is None else horizon
    eng = engine(spec, T, choose_step([T], step))
    return GridMatrix(eng.step, eng.m.copy(), {"residual": eng.residual})


def _expect_on(eng: MomentEngine, zeta: DKernel) -> np.ndarray:
    zb = eng.zeta_bar(zeta)
    integrand = np.einsum("nik,nk->ni", zb[::-1], eng.m)
    return np.trapezoid(integrand, dx=eng.step, axis=0)


def expect_mspd(spec: ScenarioSpec, zeta: DKernel, T_eval: float | None = None,
                step: float | None = None) -> np.ndarray:
    """``E[Z_T] = int_0^T zeta-bar(T-v) E[lambda_v] dv`` for every component."""
    T = spec.horizon if T_eval is None else T_eval
    _check_dim(spec, zeta)
    return _expect_on(engine(spec, T, choose_step([T], step)), zeta)


def shift_response(spec: ScenarioSpec, zeta: DKernel, k: int, y: float, lag: float,
                   step: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Direct payoff and propagated contagion of one point ``(k, y)`` added ``lag`` before T.

    Returns ``(zeta^{., k}(lag, y), int_0^lag zeta-bar(lag - r) (g + Psi * g)(r) dr)`` with
    ``g(r) = phi^{., k}(r, y)``.
    """
    d = spec.d
    direct = np.array([zeta.value(i, k, lag, y) for i in range(d)])
    if lag <= 0:
        return direct, np.zeros(d)
    h = choose_step([spec.horizon], step) if step is None else step
    eng = _lag_engine(spec, lag, h)
    g = np.zeros((eng.n + 1, d))
    for a in range(d):
        e = spec.excitation.entry(a, k)
        if e is not None:
            g[:, a] = eng.F[:, a, k] * e.modulator.scalar(y)
    u = g + trapezoid_convolution(eng.psi.values, g, eng.step)
    zb = eng.zeta_bar(zeta)
    prop = np.trapezoid(np.einsum("nib,nb->ni", zb[::-1], u), dx=eng.step, axis=0)
    return direct, prop


def expect_shifted(spec: ScenarioSpec, zeta: DKernel, T_eval: float | None,
                   stress: StressScenario, step: float | None = None) -> np.ndarray:
    """``E[Z_T o eps^+]`` for the injected points of ``stress``."""
    T = spec.horizon if T_eval is None else T_eval
    stress.check(spec, T)
    h = choose_step([T], step)
    total = expect_mspd(spec, zeta, T, h)
    for k, t, y in stress.points:
        direct, prop = shift_response(spec, zeta, k, y, T - t, h)
        total = total + direct + prop
    return total


def expect_intensity_shifted(spec: ScenarioSpec, T_eval: float, stress: StressScenario,
                             step: float | None = None) -> np.ndarray:
    """``E[lambda_T o eps^+]``: mean intensity plus each injected point's direct and propagated excitation."""
    h = choose_step([T_eval], step)
    eng = engine(spec, T_eval, h)
    total = eng.m[-1].copy()
    phi = spec.excitation
    for k, t, y in stress.points:
        lag = T_eval - t
        if lag <= 0:
            continue
        total += np.array([phi.value(i, k, lag, y) for i in range(spec.d)])
        le = _lag_engine(spec, lag, h)
        g = np.zeros((le.n + 1, spec.d))
        for a in range(spec.d):
            e = phi.entry(a, k)
            if e is not None:
                g[:, a] = le.F[:, a, k] * e.modulator.scalar(y)
        total += trapezoid_convolution(le.psi.values, g, le.step)[-1]
    return total


# ---------------------------------------------------------------------------
# second moments


@dataclass(frozen=True, eq=False)
class RhoTerm:
    """One summand ``a(t) f(y)`` of ``rho(k, t, y)``.

    ``values`` is either a callable of time (for instance a time profile) or
    an array sampled on the grid of the query.
    """

    values: object
    modulator: object = mk.Constant(1.0)


@dataclass(eq=False)
class GammaDescriptor:
    """``E[Gamma]`` and the per-component terms of ``rho``; ``rho[k]`` is a list of RhoTerm."""

    base_mean: float
    rho: Sequence = field(default_factory=tuple)


def _term_values(term: RhoTerm, times: np.ndarray) -> np.ndarray:
    if callable(term.values):
        return np.asarray(term.values(times), dtype=float) * np.ones_like(times)
    vals = np.asarray(term.values, dtype=float)
    if vals.shape != times.shape:
        raise GridMismatch(f"rho term has {vals.shape[0]} nodes, grid has {times.shape[0]}")
    return vals


def _correlation_terms(spec: ScenarioSpec, zeta: DKernel, i: int, T: float,
                       rho: Sequence, step: float) -> tuple[float, float]:
    """The two correction terms ``E[Z^{zeta rho}_T]`` and the propagated ``(phi rho)`` term."""
    eng = engine(spec, T, step)
    d, h, times, laws = spec.d, eng.step, eng.times, spec.marks
    phi = spec.excitation
    lag = times[::-1]
    t1 = []
    g = np.zeros((eng.n + 1, d, d))  # g[t, a, k]
    for k in range(d):
        for term in (rho[k] if k < len(rho) else ()):
            a_t = _term_values(term, times) * eng.m[:, k]
            z = zeta.entry(i, k)
            if z is not None:
                w = mk.expect_product(laws[k], z.modulator, term.modulator)
                if w:
                    t1.append(w * np.trapezoid(z.profile(lag) * a_t, dx=h))
            for a in range(d):
                e = phi.entry(a, k)
                if e is not None:
                    w = mk.expect_product(laws[k], e.modulator, term.modulator)
                    if w:
                        g[:, a, k] += w * a_t
    A = trapezoid_convolution(eng.F, g, h, op=lambda x, y: (x * y).sum(axis=-1))
    B = A + trapezoid_convolution(eng.psi.values, A, h)
    zb = eng.zeta_bar(zeta)
    t2 = float(np.trapezoid(np.einsum("nb,nb->n", zb[::-1, i, :], B), dx=h))
    return math.fsum(t1), t2


def correlation_general(spec: ScenarioSpec, zeta: DKernel, i: int, ell: int, T_eval: float,
                        gamma: GammaDescriptor, step: float | None = None) -> float:
    """``E[Z^i_T Gamma^ell]`` for a functional described by ``gamma``.

    ``ell`` only labels the functional; its structure is carried by
    ``gamma.rho``.  The caller is responsible for ``Gamma`` satisfying the
    affine shift identity the formula relies on.
    """
    _check_dim(spec, zeta)
    h = choose_step([T_eval], step)
    mean = expect_mspd(spec, zeta, T_eval, h)[i]
    t1, t2 = _correlation_terms(spec, zeta, i, T_eval, gamma.rho, h)
    return mean * gamma.base_mean + t1 + t2


def _rho_of_mspd(spec: ScenarioSpec, zeta: DKernel, ell: int, S: float, T: float, step: float) -> list:
    """Per-component RhoTerms of ``Gamma = Z^ell_S`` on the grid ``[0, T]``."""
    eng = engine(spec, S, step)
    q = eng.descendant_weights(zeta)
    nT = grid_size(step, T)
    idx = eng.n - np.arange(nT + 1)          # lag S - t for t on [0, T]
    lag = eng.times[idx]
    rho = []
    for k in range(spec.d):
        terms = []
        z = zeta.entry(ell, k)
        if z is not None:
            terms.append(RhoTerm(z.profile(lag), z.modulator))
        for n in range(spec.d):
            e = spec.excitation.entry(n, k)
            if e is not None:
                terms.append(RhoTerm(q[idx, ell, n, k], e.modulator))
        rho.append(terms)
    return rho


def covariance(specZ: ScenarioSpec, zetaZ: DKernel, specZt: ScenarioSpec, zetaZt: DKernel,
               i: int, ell: int, T: float, S: float, step: float | None = None) -> float:
    """``Cov(Z^i_T, Ztilde^ell_S)`` for two MSPDs driven by the same Poisson measure.

    The formula needs ``Ztilde`` to shift affinely under added points, which
    holds when both processes share the driving configuration; the two specs
    must have the same dimension and mark laws.  ``T > S`` is handled by
    swapping the arguments.
    """
    if T > S:
        return covariance(specZt, zetaZt, specZ, zetaZ, ell, i, S, T, step)
    if specZ.d != specZt.d or specZ.marks != specZt.marks:
        raise ValidationError("both processes must share the dimension and the mark laws")
    _check_dim(specZ, zetaZ)
    _check_dim(specZt, zetaZt)
    h = choose_step([T, S], step)
    rho = _rho_of_mspd(specZt, zetaZt, ell, S, T, h)
    t1, t2 = _correlation_terms(specZ, zetaZ, i, T, rho, h)
    return t1 + t2


def mark_correlation(spec: ScenarioSpec, i: int, ell: int) -> np.ndarray:
    """``c^k = E[B^{ik} B^{ell k}] / (E[B^{ik}] E[B^{ell k}])``; 1 where a mean vanishes."""
    out = np.ones(spec.d)
    for k in range(spec.d):
        a, b = spec.excitation.entry(i, k), spec.excitation.entry(ell, k)
        if a is None or b is None:
            continue
        ma, mb = a.mean(spec.marks[k]), b.mean(spec.marks[k])
        if ma > 0 and mb > 0:
            out[k] = mk.expect_product(spec.marks[k], a.modulator, b.modulator) / (ma * mb)
    return out


def _mark_tensor(spec: ScenarioSpec) -> np.ndarray:
    """``C[k, b, n] = E[B^{bk} B^{nk}] / (E[B^{bk}] E[B^{nk}])`` (1 where a mean vanishes)."""
    d = spec.d
    C = np.ones((d, d, d))
    for k in range(d):
        for b in range(d):
            for n in range(b, d):
                C[k, b, n] = C[k, n, b] = _ratio(spec, b, n, k)
    return C


def _ratio(spec, b, n, k) -> float:
    eb, en = spec.excitation.entry(b, k), spec.excitation.entry(n, k)
    if eb is None or en is None:
        return 1.0
    mb, mn = eb.mean(spec.marks[k]), en.mean(spec.marks[k])
    if mb <= 0 or mn <= 0:
        return 1.0
    return mk.expect_product(spec.marks[k], eb.modulator, en.modulator) / (mb * mn)


def column_ratios(spec: ScenarioSpec, tol: float = 1e-12) -> tuple[np.ndarray, bool]:
    """Per-column ratio ``c^k`` shared by all active row pairs, and whether every column is uniform.

    Indirect paths ``k -> b -> i`` carry the ratio of column k, so the
    one-ratio-per-column form is exact only when ``C[k, b, n]`` does not
    depend on the active rows b, n.
    """
    C = _mark_tensor(spec)
    active = spec.branching > 0
    c = np.ones(spec.d)
    uniform = True
    for k in range(spec.d):
        vals = [C[k, b, n] for b in range(spec.d) for n in range(spec.d) if active[b, k] and active[n, k]]
        if vals:
            c[k] = vals[0]
            if max(vals) - min(vals) > tol * max(vals):
                uniform = False
    return c, uniform


def separable_branch(spec: ScenarioSpec, tol: float = 1e-12) -> str:
    """Which closed form applies: ``simplified`` (all ratios 1), ``vector`` (one ratio per k) or ``tensor``."""
    c, uniform = column_ratios(spec, tol)
    if not uniform:
        return "tensor"
    return "simplified" if np.all(np.abs(c - 1.0) <= tol) else "vector"


def covariance_counting_separable(spec: ScenarioSpec, i: int, ell: int, T: float, S: float,
                                  step: float | None = None, branch: str = "auto") -> float:
    """``Cov(H^i_T, H^ell_S)`` from the single-integral closed form for separable excitation.

    ``branch`` selects the mark-correlation treatment:

    * ``simplified``: all modulator ratios equal 1 (deterministic modulators);
    * ``vector``: one ratio ``c^k`` per column, the form with the mark-correlation vector;
    * ``tensor``: the general form with ``C[k, b, n]`` for every pair of rows b, n;
    * ``auto``: the cheapest form that is exact for ``spec``.
    """
    for _, _, e in spec.excitation.nonzero():
        if not isinstance(e, Separable):
            raise NotSeparable(f"excitation entry {e!r} is not separable")
    if T > S:
        return covariance_counting_separable(spec, ell, i, S, T, step, branch)
    if branch == "auto":
        branch = separable_branch(spec)
    d = spec.d
    h = choose_step([T, S], step)
    eng = engine(spec, S, h)
    nT = grid_size(h, T)
    iS = eng.n - np.arange(nT + 1)
    iT = nT - np.arange(nT + 1)
    m = eng.m[: nT + 1]
    R = cumulative_integral(eng.psi.values, h)
    RiT, RlS = R[iT, i, :], R[iS, ell, :]        # (u, k)
    eye_i, eye_l = np.eye(d)[i], np.eye(d)[ell]
    if branch in ("simplified", "vector"):
        c, uniform = column_ratios(spec)
        if not uniform:
            raise ValueError(f"{branch} branch requires one mark-correlation ratio per column")
        if branch == "simplified" and np.any(np.abs(c - 1.0) > 1e-12):
            raise ValueError("simplified branch requires unit mark-correlation ratios")
    if branch == "simplified":
        integrand = (m * (eye_i + RiT) * (eye_l + RlS)).sum(axis=1)
    elif branch == "vector":
        integrand = (m * (eye_i * (eye_l + RlS) + RiT * (eye_l + c * RlS))).sum(axis=1)
    elif branch == "tensor":
        C = _mark_tensor(spec)
        V = trapezoid_convolution(eng.psi.values, eng.phi.values, h, op=_entrywise)
        for a in range(d):
            V[:, a, a, :] += eng.phi.values[:, a, :]
        W = cumulative_integral(V, h)
        WiT, WlS = W[iT, i], W[iS, ell]          # (u, b, k)
        quad = np.einsum("ubk,unk,kbn->uk", WiT, WlS, C)
        integrand = (m * (eye_i * (eye_l + RlS) + WiT.sum(axis=1) * eye_l + quad)).sum(axis=1)
    else:
        raise ValueError(f"unknown branch {branch!r}")
    return float(np.trapezoid(integrand, dx=h))


def wald_check(spec: ScenarioSpec, i: int, T: float | None = None,
               step: float | None = None) -> tuple[float, float]:
    """``(E[L^i_T], E[Y^i] E[H^i_T])`` from the analytic engine."""
    T = spec.horizon if T is None else T
    lhs = expect_mspd(spec, DKernel.loss(spec.d), T, step)[i]
    rhs = mk.mean(spec.marks[i]) * expect_mspd(spec, DKernel.counting(spec.d), T, step)[i]
    return float(lhs), float(rhs)


def _check_dim(spec: ScenarioSpec, zeta: DKernel) -> None:
    if zeta.d != spec.d:
        raise ValidationError(f"payoff kernel has dimension {zeta.d}, spec has {spec.d}")


# ---------------------------------------------------------------------------
# reports


@dataclass
class MomentReport:
    rows: list
    step: float
    residual: float
    threshold: float = RESIDUAL_THRESHOLD

    @property
    def degraded(self) -> bool:
        return not self.residual <= self.threshold

    def add(self, quantity: str, value: float, i=None, ell=None, T=None, S=None) -> None:
        self.rows.append((quantity, i, ell, T, S, float(value)))

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "i", "ell", "T", "S", "value", "step", "residual"])
        fmt = lambda x: "" if x is None else (str(x + 1) if isinstance(x, int) else format(x, ".17g"))
        for q, i, ell, T, S, v in self.rows:
            w.writerow([q, fmt(i), fmt(ell), fmt(T), fmt(S), format(v, ".17g"),
                        format(self.step, ".17g"), format(self.residual, ".17g")])


def moment_report(spec: ScenarioSpec, T: float | None = None, step: float | None = None) -> MomentReport:
    """Means of intensity, counts, losses and payoff plus the count covariance matrix at T."""
    T = spec.horizon if T is None else T
    h = choose_step([T], step)
    eng = engine(spec, T, h)
    rep = MomentReport([], h, eng.residual)
    d = spec.d
    counts = _expect_on(eng, DKernel.counting(d))
    losses = _expect_on(eng, DKernel.loss(d))
    payoff = _expect_on(eng, spec.payoff)
    for i in range(d):
        rep.add("E[lambda]", eng.m[-1, i], i=i, T=T)
        rep.add("E[H]", counts[i], i=i, T=T)
        rep.add("E[L]", losses[i], i=i, T=T)
        rep.add("E[Z]", payoff[i], i=i, T=T)
    for i in range(d):
        for ell in range(i, d):
            rep.add("Cov[H,H]", covariance_counting_separable(spec, i, ell, T, T, h), i=i, ell=ell, T=T, S=T)
    return rep


def plot_data(spec: ScenarioSpec, step: float | None = None, points: int = 50,
              T: float | None = None) -> tuple[list[str], np.ndarray]:
    """Columns ``t``, ``E[lambda^i_t]`` and ``Cov(H^i_t, H^ell_t)`` at evenly spaced times."""
    T = spec.horizon if T is None else T
    h = choose_step([T], step)
    eng = engine(spec, T, h)
    stride = max(1, eng.n // points)
    idx = np.arange(0, eng.n + 1, stride)
    d = spec.d
    header = ["t"] + [f"E[lambda_{i + 1}]" for i in range(d)]
    pairs = [(i, ell) for i in range(d) for ell in range(i, d)]
    header += [f"Cov[H_{i + 1},H_{ell + 1}]" for i, ell in pairs]
    rows = []
    for j in idx:
        t = eng.times[j]
        covs = [covariance_counting_separable(spec, i, ell, t, t, h) if j > 0 else 0.0 for i, ell in pairs]
        rows.append([t, *eng.m[j], *covs])
    return header, np.array(rows)
