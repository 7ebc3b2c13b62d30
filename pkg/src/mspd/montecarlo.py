"""Path-generation harness and statistical comparison against the analytic engine.

Every path ``j`` uses its own counter-based stream keyed by ``(seed, j)``, so
results do not depend on how paths are scheduled over workers.  Standard
errors come from batch means over ``floor(sqrt(n))`` batches.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import moments as mm
from .chaos import Functional, MeckeBox, MeckeCheck
from .errors import NotSubcritical
from .kernels import DKernel, spectral_radius
from .simulator import (ScenarioSpec, StressScenario, evaluate_mspd, path_rng, simulate,
                        simulate_shifted)
from . import marks as mk

log = logging.getLogger(__name__)

Z_THRESHOLD = 4.0
WALD_RTOL = 1e-6


@dataclass
class EstimatorResult:
    quantity: str
    n_paths: int
    estimate: float
    stderr: float
    reference: float
    z: float

    @classmethod
    def build(cls, quantity: str, estimate: float, stderr: float, reference: float, n: int):
        if stderr > 0:
            z = (estimate - reference) / stderr
        else:
            z = 0.0 if estimate == reference else math.copysign(math.inf, estimate - reference)
        return cls(quantity, n, float(estimate), float(stderr), float(reference), float(z))

    @property
    def passed(self) -> bool:
        return abs(self.z) <= Z_THRESHOLD


def batch_means(x: np.ndarray, n_batches: int | None = None) -> tuple[float, float]:
    """Sample mean and its batch-means standard error."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 2:
        return float(x.mean()) if n else math.nan, math.nan
    nb = n_batches or max(2, math.isqrt(n))
    size = n // nb
    means = x[: nb * size].reshape(nb, size).mean(axis=1)
    return float(x.mean()), float(means.std(ddof=1) / math.sqrt(nb))


def naive_stderr(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / math.sqrt(len(x)))


def covariance_estimate(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Unbiased sample covariance and the batch-means error of the centered products."""
    n = len(x)
    prod = (x - x.mean()) * (y - y.mean())
    est, se = batch_means(prod)
    return est * n / (n - 1), se * n / (n - 1)


# ---------------------------------------------------------------------------
# path loop


def _run_chunk(spec, start, stop, seed, collectors, record_theta, stress):
    # stream j is keyed by the global path index, so chunks can run anywhere
    out = [[] for _ in collectors]
    for j in range(start, stop):
        rng = path_rng(seed, j)
        if stress is None:
            path = simulate(spec, rng, record_theta=record_theta)
            obj = path
        else:
            path, obj = simulate_shifted(spec, stress, rng, record_theta=record_theta)
        for c, fn in enumerate(collectors):
            out[c].append(fn(obj, rng))
    return [np.asarray(o, dtype=float) for o in out]


def run_paths(spec: ScenarioSpec, n_paths: int, seed: int, collectors: Sequence[Callable],
              record_theta: bool = False, stress: StressScenario | None = None,
              n_workers: int = 1, offset: int = 0) -> list[np.ndarray]:
    """Simulate paths ``offset .. offset + n_paths - 1`` and apply each collector ``fn(path, rng)``.

    With a stress scenario the collectors receive the ShiftedPath accessor.
    Results are stacked in path order whatever the number of workers.
    """
    if n_workers <= 1:
        return _run_chunk(spec, offset, offset + n_paths, seed, collectors, record_theta, stress)
    bounds = offset + np.linspace(0, n_paths, 4 * n_workers + 1).astype(int)
    with ProcessPoolExecutor(n_workers) as ex:
        futs = [ex.submit(_run_chunk, spec, a, b, seed, collectors, record_theta, stress)
                for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        parts = [f.result() for f in futs]
    return [np.concatenate([p[c] for p in parts]) for c in range(len(collectors))]


class _PathValues:
    """Picklable collector returning ``Z^i_t`` for a list of (i, t)."""

    def __init__(self, zeta: DKernel, queries: Sequence[tuple[int, float]]):
        self.zeta, self.queries = zeta, list(queries)

    def __call__(self, path, rng) -> np.ndarray:
        return np.array([evaluate_mspd(path, self.zeta, i, t) for i, t in self.queries])


class _ShiftedValues(_PathValues):
    def __call__(self, shifted, rng) -> np.ndarray:
        return np.array([shifted.value(self.zeta, i, t) for i, t in self.queries])


def estimate_moments(spec: ScenarioSpec, zeta: DKernel, times: Sequence[float], n_paths: int,
                     seed: int | None = None, pairs: Sequence[tuple] = (), step: float | None = None,
                     n_workers: int = 1) -> list[EstimatorResult]:
    """Empirical means of ``Z^i_t`` and covariances ``Cov(Z^i_T, Z^ell_S)`` against the analytic engine."""
    if n_paths < 100:
        raise ValueError("n_paths must be >= 100")
    seed = spec.seed if seed is None else seed
    queries = [(i, float(t)) for t in times for i in range(spec.d)]
    for i, ell, T, S in pairs:
        queries += [(i, float(T)), (ell, float(S))]
    queries = list(dict.fromkeys(queries))
    pos = {q: n for n, q in enumerate(queries)}
    vals = run_paths(spec, n_paths, seed, [_PathValues(zeta, queries)], n_workers=n_workers)[0]
    out = []
    for t in times:
        ref = mm.expect_mspd(spec, zeta, t, step)
        for i in range(spec.d):
            est, se = batch_means(vals[:, pos[(i, float(t))]])
            out.append(EstimatorResult.build(f"E[Z_{i + 1}({t:g})]", est, se, ref[i], n_paths))
    for i, ell, T, S in pairs:
        est, se = covariance_estimate(vals[:, pos[(i, float(T))]], vals[:, pos[(ell, float(S))]])
        ref = mm.covariance(spec, zeta, spec, zeta, i, ell, T, S, step)
        out.append(EstimatorResult.build(f"Cov[Z_{i + 1}({T:g}),Z_{ell + 1}({S:g})]", est, se, ref, n_paths))
    return out


# ---------------------------------------------------------------------------
# validation battery


@dataclass
class ValidationConfig:
    n_paths: int = 10_000
    seed: int | None = None
    T: float | None = None
    step: float | None = None
    stress: StressScenario | None = None
    theta_cap: float | None = None
    mecke_window: tuple | None = None
    n_workers: int = 1


@dataclass
class CheckRow:
    name: str
    kind: str
    estimate: float
    reference: float
    stderr: float
    score: float
    tolerance: float
    passed: bool


@dataclass
class ValidationReport:
    rows: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def add_mc(self, res: EstimatorResult) -> None:
        self.rows.append(CheckRow(res.quantity, "mc", res.estimate, res.reference, res.stderr,
                                  res.z, Z_THRESHOLD, res.passed))

    def add_identity(self, name: str, value: float, reference: float, tol: float) -> None:
        dev = abs(value - reference)
        self.rows.append(CheckRow(name, "identity", value, reference, 0.0, dev, tol, dev <= tol))

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "kind", "estimate", "reference", "stderr", "score", "tolerance", "passed"])
        for r in self.rows:
            w.writerow([r.name, r.kind, format(r.estimate, ".17g"), format(r.reference, ".17g"),
                        format(r.stderr, ".17g"), format(r.score, ".17g"), format(r.tolerance, ".17g"),
                        "pass" if r.passed else "FAIL"])

    def summary(self) -> str:
        buf = io.StringIO()
        buf.write(f"{'check':<34} {'estimate':>14} {'reference':>14} {'score':>10}  result\n")
        for r in self.rows:
            score = f"z={r.score:+.2f}" if r.kind == "mc" else f"{r.score:.2e}"
            buf.write(f"{r.name:<34} {r.estimate:>14.6g} {r.reference:>14.6g} {score:>10}  "
                      f"{'pass' if r.passed else 'FAIL'}\n")
        buf.write(f"overall: {'pass' if self.passed else 'FAIL'} ({sum(r.passed for r in self.rows)}/{len(self.rows)})\n")
        return buf.getvalue()


def separable_agreement(spec: ScenarioSpec, i: int, ell: int, T: float, S: float,
                        step: float | None = None) -> tuple[float, float, float]:
    """General and separable covariances at step h and their combined grid-error scale.

    The scale is ``|v_h - v_2h|`` summed over both methods, a conservative
    estimate of the ``O(h^2)`` discretization error of each.
    """
    h = mm.choose_step([T, S], step)
    cnt = DKernel.counting(spec.d)
    gen_h = mm.covariance(spec, cnt, spec, cnt, i, ell, T, S, h)
    sep_h = mm.covariance_counting_separable(spec, i, ell, T, S, h)
    gen_2h = mm.covariance(spec, cnt, spec, cnt, i, ell, T, S, 2 * h)
    sep_2h = mm.covariance_counting_separable(spec, i, ell, T, S, 2 * h)
    scale = abs(gen_h - gen_2h) + abs(sep_h - sep_2h)
    return gen_h, sep_h, max(scale, 1e-12 * max(1.0, abs(gen_h)))


class _MainCollector:
    def __init__(self, spec: ScenarioSpec, T: float):
        self.T = T
        self.cnt, self.loss, self.payoff = DKernel.counting(spec.d), DKernel.loss(spec.d), spec.payoff
        self.d = spec.d

    def __call__(self, path, rng) -> np.ndarray:
        T = self.T
        return np.array([evaluate_mspd(path, z, i, T) for z in (self.cnt, self.loss, self.payoff)
                         for i in range(self.d)])


def default_stress(spec: ScenarioSpec, T: float) -> StressScenario:
    return StressScenario(((0, T / 5.0, mk.mean(spec.marks[0])),))


def validate(spec: ScenarioSpec, config: ValidationConfig | None = None) -> ValidationReport:
    """Run the cross-check battery; pass iff all |z| <= 4 and all identities hold."""
    cfg = config or ValidationConfig()
    radius = spectral_radius(spec.branching)
    if radius >= 1:
        raise NotSubcritical(radius)
    d = spec.d
    T = spec.horizon if cfg.T is None else cfg.T
    seed = spec.seed if cfg.seed is None else cfg.seed
    h = mm.choose_step([T], cfg.step)
    n = cfg.n_paths
    cnt = DKernel.counting(d)
    rep = ValidationReport()

    mean_lambda = float(mm.expect_intensity(spec, h, T).values.max())
    cap = cfg.theta_cap or max(5.0, math.ceil(3.0 * mean_lambda))
    t0, t1 = cfg.mecke_window or (0.2 * T, 0.6 * T)
    mecke = MeckeCheck(spec, MeckeBox(t0, t1, (0,)), Functional.mspd(cnt, 0), cap, h)
    log.info("simulating %d paths", n)
    main, mstats = run_paths(spec, n, seed, [_MainCollector(spec, T), mecke.path_stats],
                             record_theta=True, n_workers=cfg.n_workers)
    H, L, Z = main[:, :d], main[:, d:2 * d], main[:, 2 * d:]

    EH = mm.expect_mspd(spec, cnt, T, h)
    EZ = mm.expect_mspd(spec, spec.payoff, T, h)
    for i in range(d):
        rep.add_mc(EstimatorResult.build(f"E[H_{i + 1}]", *batch_means(H[:, i]), EH[i], n))
    if spec.payoff != cnt:
        for i in range(d):
            rep.add_mc(EstimatorResult.build(f"E[Z_{i + 1}]", *batch_means(Z[:, i]), EZ[i], n))
    for i in range(d):
        lhs, rhs = mm.wald_check(spec, i, T, h)
        rep.add_identity(f"Wald E[L_{i + 1}] analytic", lhs, rhs, WALD_RTOL * abs(rhs))
        rep.add_mc(EstimatorResult.build(f"Wald E[L_{i + 1}] MC", *batch_means(L[:, i]), rhs, n))
    for i in range(d):
        for ell in range(i, d):
            ref = mm.covariance(spec, cnt, spec, cnt, i, ell, T, T, h)
            est, se = covariance_estimate(H[:, i], H[:, ell])
            rep.add_mc(EstimatorResult.build(f"Cov[H_{i + 1},H_{ell + 1}]", est, se, ref, n))
            gen, sep, scale = separable_agreement(spec, i, ell, T, T, h)
            rep.add_identity(f"Cov[H_{i + 1},H_{ell + 1}] sep vs gen", sep, gen, 5 * scale)

    res = mecke.finish(mstats)
    rep.rows.append(CheckRow(f"Mecke F=H_1 cap {cap:g}", "mc", res.lhs, res.rhs, res.stderr, res.z,
                             Z_THRESHOLD, abs(res.z) <= Z_THRESHOLD))
    rep.rows.append(CheckRow(f"Mecke F=H_1 cap {2 * cap:g}", "mc", res.lhs_doubled, res.rhs_doubled,
                             res.stderr_doubled, res.z_doubled, Z_THRESHOLD, abs(res.z_doubled) <= Z_THRESHOLD))
    rep.add_identity("Mecke cap sensitivity", res.truncation, 0.0, res.stderr)

    stress = cfg.stress or default_stress(spec, T)
    ref = mm.expect_shifted(spec, cnt, T, stress, h)
    sh = run_paths(spec, n, seed, [_ShiftedValues(cnt, [(i, T) for i in range(d)])],
                   stress=stress, n_workers=cfg.n_workers, offset=n)[0]
    for i in range(d):
        rep.add_mc(EstimatorResult.build(f"E[H_{i + 1} shifted]", *batch_means(sh[:, i]), ref[i], n))
    return rep
