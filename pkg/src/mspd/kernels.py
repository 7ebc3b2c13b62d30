"""d-kernels, their nu-means on a uniform grid, branching matrices and resolvents.

Conventions
-----------
Every time profile is evaluated right-continuously: ``profile(0)`` is the
limit from the right.  Self-excitation kernels vanish at lag 0 (the
intensity is predictable), which is enforced by ``DKernel.value`` through
the strict inequality ``u > 0``.  Grid functions store the right limit at
the ``t = 0`` node because that is the value the trapezoid rule needs for
an ``O(h^2)`` convolution; the point value at 0 has zero Lebesgue mass.

Grid functions have shape ``(n + 1, d, d)`` (matrix valued) or
``(n + 1, d)`` (vector valued) with node ``j`` at time ``j * step``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.fft as sfft
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from . import marks as mk
from .errors import GridMismatch, NoConvergence, NotSubcritical

RESOLVENT_RTOL = 1e-10
RESOLVENT_MAX_SWEEPS = 10_000


# ---------------------------------------------------------------------------
# time profiles


@dataclass(frozen=True)
class ExponentialDecay:
    alpha: float
    beta: float

    family = "exponential"
    nonincreasing = True

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"beta must be finite and > 0, got {self.beta}")

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(u >= 0, self.alpha * np.exp(-self.beta * np.maximum(u, 0.0)), 0.0)

    def scalar(self, u: float) -> float:
        return self.alpha * math.exp(-self.beta * u)

    def integral(self) -> float:
        return self.alpha / self.beta

    def tail(self, horizon: float) -> float:
        return self.alpha / self.beta * math.exp(-self.beta * horizon)


@dataclass(frozen=True)
class PowerLaw:
    alpha: float
    p: float

    family = "power_law"
    nonincreasing = True

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not (math.isfinite(self.p) and self.p > 1):
            raise ValueError(f"power-law exponent must be > 1, got {self.p}")

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(u >= 0, self.alpha * np.power(1.0 + np.maximum(u, 0.0), -self.p), 0.0)

    def scalar(self, u: float) -> float:
        return self.alpha * (1.0 + u) ** -self.p

    def integral(self) -> float:
        return self.alpha / (self.p - 1.0)

    def tail(self, horizon: float) -> float:
        return self.alpha * (1.0 + horizon) ** (1.0 - self.p) / (self.p - 1.0)


@dataclass(frozen=True)
class TabulatedProfile:
    """Linear interpolation of values on ``0, step, 2 step, ...``; zero past the last node."""

    step: float
    values: tuple

    family = "tabulated"

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) < 2:
            raise ValueError("tabulated profile needs at least two values")
        if not (math.isfinite(self.step) and self.step > 0):
            raise ValueError("tabulated profile step must be > 0")
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError("tabulated profile values must be finite and >= 0")
        object.__setattr__(self, "values", vals)

    @cached_property
    def _times(self) -> np.ndarray:
        return self.step * np.arange(len(self.values))

    @property
    def nonincreasing(self) -> bool:
        return all(b <= a for a, b in zip(self.values, self.values[1:]))

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        out = np.interp(u, self._times, self.values, right=0.0)
        return np.where(u >= 0, out, 0.0)

    def scalar(self, u: float) -> float:
        return float(self(np.array(u)))

    def integral(self) -> float:
        return float(np.trapezoid(self.values, dx=self.step))

    def tail(self, horizon: float) -> float:
        t = self._times
        if horizon >= t[-1]:
            return 0.0
        keep = t > horizon
        x = np.concatenate([[horizon], t[keep]])
        return float(np.trapezoid(self(x), x))


@dataclass(frozen=True)
class ConstantProfile:
    """Constant in time; used for payoff kernels such as the counting kernel."""

    c: float = 1.0

    family = "constant"
    nonincreasing = True

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c >= 0):
            raise ValueError(f"constant profile must be finite and >= 0, got {self.c}")

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(u >= 0, self.c, 0.0)

    def scalar(self, u: float) -> float:
        return self.c

    def integral(self) -> float:
        return math.inf if self.c > 0 else 0.0

    def tail(self, horizon: float) -> float:
        return self.integral()


PROFILE_KEYS = {
    "exponential": {"alpha", "beta"},
    "power_law": {"alpha", "p"},
    "tabulated": {"step", "values"},
    "constant": {"c"},
}


def profile_from_dict(d: dict):
    fam = d.get("family")
    if fam == "exponential":
        return ExponentialDecay(float(d["alpha"]), float(d["beta"]))
    if fam == "power_law":
        return PowerLaw(float(d["alpha"]), float(d["p"]))
    if fam == "tabulated":
        return TabulatedProfile(float(d["step"]), tuple(d["values"]))
    if fam == "constant":
        return ConstantProfile(float(d.get("c", 1.0)))
    raise ValueError(f"unknown time profile family {fam!r}")


def profile_to_dict(p) -> dict:
    if isinstance(p, ExponentialDecay):
        return {"family": "exponential", "alpha": p.alpha, "beta": p.beta}
    if isinstance(p, PowerLaw):
        return {"family": "power_law", "alpha": p.alpha, "p": p.p}
    if isinstance(p, TabulatedProfile):
        return {"family": "tabulated", "step": p.step, "values": list(p.values)}
    return {"family": "constant", "c": p.c}


# ---------------------------------------------------------------------------
# d-kernels


@dataclass(frozen=True)
class Separable:
    """Entry ``profile(t) * modulator(y)``."""

    profile: object
    modulator: object = mk.Constant(1.0)

    def mean(self, law) -> float:
        return mk.expect(law, self.modulator)


@dataclass(frozen=True)
class DKernel:
    """A d x d matrix of separable entries; ``None`` marks a zero entry."""

    entries: tuple
    self_exciting: bool = False

    def __post_init__(self):
        rows = tuple(tuple(r) for r in self.entries)
        d = len(rows)
        if d == 0 or any(len(r) != d for r in rows):
            raise ValueError("kernel entries must form a non-empty square matrix")
        object.__setattr__(self, "entries", rows)

    @property
    def d(self) -> int:
        return len(self.entries)

    def entry(self, i: int, k: int):
        return self.entries[i][k]

    def nonzero(self):
        for i, row in enumerate(self.entries):
            for k, e in enumerate(row):
                if e is not None:
                    yield i, k, e

    def value(self, i: int, k: int, u: float, y: float) -> float:
        """Kernel entry at lag ``u`` and mark ``y`` (strict at 0 for self-excitation)."""
        e = self.entries[i][k]
        if e is None or u < 0 or (self.self_exciting and u <= 0):
            return 0.0
        return e.profile.scalar(u) * e.modulator.scalar(y)

    def profile_grid(self, times: np.ndarray) -> np.ndarray:
        """Profiles at ``times`` with right limits, shape ``(len(times), d, d)``."""
        out = np.zeros((len(times), self.d, self.d))
        for i, k, e in self.nonzero():
            out[:, i, k] = e.profile(times)
        return out

    def modulator_means(self, laws: Sequence) -> np.ndarray:
        self._check_laws(laws)
        out = np.zeros((self.d, self.d))
        for i, k, e in self.nonzero():
            out[i, k] = e.mean(laws[k])
        return out

    def integral_matrix(self, laws: Sequence) -> np.ndarray:
        """Closed-form branching matrix ``int_0^inf zeta-bar``."""
        out = np.zeros((self.d, self.d))
        means = self.modulator_means(laws)
        for i, k, e in self.nonzero():
            out[i, k] = 0.0 if means[i, k] == 0 else e.profile.integral() * means[i, k]
        return out

    def tails(self, laws: Sequence, horizon: float) -> np.ndarray:
        out = np.zeros((self.d, self.d))
        means = self.modulator_means(laws)
        for i, k, e in self.nonzero():
            out[i, k] = 0.0 if means[i, k] == 0 else e.profile.tail(horizon) * means[i, k]
        return out

    def _check_laws(self, laws) -> None:
        if len(laws) != self.d:
            raise ValueError(f"kernel has d={self.d} but {len(laws)} mark laws were given")

    @classmethod
    def zero(cls, d: int, self_exciting: bool = False) -> "DKernel":
        return cls(tuple((None,) * d for _ in range(d)), self_exciting)

    @classmethod
    def diagonal(cls, entries: Sequence, self_exciting: bool = False) -> "DKernel":
        d = len(entries)
        return cls(tuple(tuple(entries[i] if i == k else None for k in range(d)) for i in range(d)),
                   self_exciting)

    @classmethod
    def counting(cls, d: int) -> "DKernel":
        """``zeta = Id``: Z becomes the counting process H."""
        return cls.diagonal([Separable(ConstantProfile(1.0), mk.Constant(1.0))] * d)

    @classmethod
    def loss(cls, d: int) -> "DKernel":
        """``zeta = y Id``: Z becomes the aggregate loss L."""
        return cls.diagonal([Separable(ConstantProfile(1.0), mk.Identity())] * d)

    def as_self_exciting(self) -> "DKernel":
        return DKernel(self.entries, True)

    def as_payoff(self) -> "DKernel":
        return DKernel(self.entries, False)


# ---------------------------------------------------------------------------
# grid functions


@dataclass(eq=False)
class GridMatrix:
    """Matrix- or vector-valued function sampled at ``0, step, ..., n*step``."""

    step: float
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not (self.step > 0 and math.isfinite(self.step)):
            raise ValueError("grid step must be > 0")
        if self.values.ndim not in (2, 3):
            raise ValueError("grid values must have shape (n+1, d) or (n+1, d, d)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def n(self) -> int:
        return self.values.shape[0] - 1

    @property
    def horizon(self) -> float:
        return self.n * self.step

    @property
    def times(self) -> np.ndarray:
        return self.step * np.arange(self.n + 1)


def grid_size(step: float, horizon: float) -> int:
    """Number of intervals; ``horizon`` must be an integer multiple of ``step``."""
    n = int(round(horizon / step))
    if n < 1 or abs(n * step - horizon) > 1e-9 * max(horizon, step):
        raise GridMismatch(f"horizon {horizon!r} is not a multiple of step {step!r}")
    return n


def mean_kernel(kernel: DKernel, laws: Sequence, step: float, horizon: float) -> GridMatrix:
    """nu-mean ``zeta-bar(t)`` on the grid; column k integrates against the k-th law."""
    n = grid_size(step, horizon)
    times = step * np.arange(n + 1)
    vals = kernel.profile_grid(times) * kernel.modulator_means(laws)[None]
    return GridMatrix(step, vals)


def branching_matrix(mean: GridMatrix, tails: np.ndarray | None = None) -> np.ndarray:
    """Trapezoid integral of the grid plus an optional closed-form tail."""
    K = np.trapezoid(mean.values, dx=mean.step, axis=0)
    if tails is not None:
        K = K + np.asarray(tails, dtype=float)
    return np.maximum(K, 0.0)


def _perron(B: np.ndarray, tol: float, max_iter: int) -> float:
    # irreducible block: iterate on B + sI, which is primitive, and use the
    # Collatz-Wielandt bracket min(Ax/x) <= rho <= max(Ax/x) as stopping rule
    s = float(B.max())
    A = B / s + np.eye(len(B))
    x = np.ones(len(B))
    for _ in range(max_iter):
        y = A @ x
        r = y / x
        lo, hi = r.min(), r.max()
        if hi - lo <= tol * (hi - 1.0) or hi - lo <= 1e-15 * hi:
            return s * (0.5 * (lo + hi) - 1.0)
        x = y / y.max()
    raise NoConvergence(f"power iteration did not converge in {max_iter} iterations")


def spectral_radius(K, tol: float = 1e-12, max_iter: int = 100_000) -> float:
    """Perron root of a nonnegative square matrix."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape[0] != K.shape[1]:
        raise ValueError("matrix must be square")
    if np.any(np.isnan(K)) or np.any(K < 0):
        raise ValueError("matrix must be entrywise nonnegative")
    if np.any(np.isinf(K)):
        return math.inf
    ncomp, labels = connected_components(csr_matrix(K > 0), directed=True, connection="strong")
    best = 0.0
    for c in range(ncomp):
        idx = np.flatnonzero(labels == c)
        B = K[np.ix_(idx, idx)]
        r = float(B[0, 0]) if len(idx) == 1 else _perron(B, tol, max_iter)
        best = max(best, r)
    return best


# ---------------------------------------------------------------------------
# convolution


def _matmul(a, b):
    if b.ndim == a.ndim:
        return np.einsum("...im,...mk->...ik", a, b)
    return np.einsum("...im,...m->...i", a, b)


def _entrywise(a, b):
    # (a^{ab} * b^{bk}) for every triple, no summation over b
    return np.einsum("...ab,...bk->...abk", a, b)


def trapezoid_convolution(a: np.ndarray, b: np.ndarray, step: float, op=_matmul) -> np.ndarray:
    """``c_n = h [sum_j op(a_{n-j}, b_j) - op(a_n, b_0)/2 - op(a_0, b_n)/2]`` via FFT."""
    if a.shape[0] != b.shape[0]:
        raise GridMismatch("operands have different numbers of nodes")
    n = a.shape[0]
    size = sfft.next_fast_len(2 * n - 1, real=True)
    fa = sfft.rfft(a, size, axis=0)
    fb = sfft.rfft(b, size, axis=0)
    out = sfft.irfft(op(fa, fb), size, axis=0)[:n]
    out -= 0.5 * (op(a, b[:1]) + op(a[:1], b))
    out *= step
    out[0] = 0.0
    return out


def _same_grid(A: GridMatrix, B: GridMatrix) -> None:
    if A.n != B.n or abs(A.step - B.step) > 1e-12 * A.step:
        raise GridMismatch(f"grids differ: ({A.step}, {A.n}) vs ({B.step}, {B.n})")


def convolve(A: GridMatrix, B: GridMatrix) -> GridMatrix:
    """``(A * B)(t) = int_0^t A(t-s) B(s) ds`` with matrix products, trapezoid rule."""
    _same_grid(A, B)
    return GridMatrix(A.step, trapezoid_convolution(A.values, B.values, A.step))


def resolvent(phi_mean: GridMatrix, branching: np.ndarray | None = None,
              rtol: float = RESOLVENT_RTOL, max_sweeps: int = RESOLVENT_MAX_SWEEPS) -> GridMatrix:
    """Solve ``Psi = phi + phi * Psi`` on the grid of ``phi_mean`` by fixed-point sweeps.

    ``branching`` (the exact branching matrix) is used for the subcriticality
    check when given; otherwise the trapezoid integral of the grid is used.
    """
    K = branching_matrix(phi_mean) if branching is None else branching
    radius = spectral_radius(K)
    if radius >= 1:
        raise NotSubcritical(radius)
    phi = phi_mean.values
    h = phi_mean.step
    n = phi.shape[0]
    size = sfft.next_fast_len(2 * n - 1, real=True)
    fphi = sfft.rfft(phi, size, axis=0)
    edge = 0.5 * h * phi[:1]
    psi = phi.copy()
    scale = max(float(np.abs(phi).max()), np.finfo(float).tiny)
    for sweep in range(1, max_sweeps + 1):
        conv = sfft.irfft(_matmul(fphi, sfft.rfft(psi, size, axis=0)), size, axis=0)[:n] * h
        conv -= 0.5 * h * _matmul(phi, psi[:1]) + _matmul(edge, psi)
        conv[0] = 0.0
        new = phi + conv
        delta = float(np.abs(new - psi).max())
        psi = new
        scale = max(scale, float(np.abs(psi).max()))
        if delta <= rtol * scale:
            break
    else:
        raise NoConvergence(f"resolvent fixed point did not converge in {max_sweeps} sweeps")
    out = GridMatrix(h, psi, {"sweeps": sweep, "spectral_radius": radius})
    out.meta["residual"] = resolvent_residual(phi_mean, out)
    return out


def _simpson_convolution(a: np.ndarray, b: np.ndarray, step: float) -> np.ndarray:
    """Composite Simpson value of ``int_0^t a(t-s) b(s) ds`` at even nodes (odd nodes NaN)."""
    n = a.shape[0]
    odd = np.zeros(n)
    odd[1::2] = 1.0
    bo = b * odd.reshape((n,) + (1,) * (b.ndim - 1))
    size = sfft.next_fast_len(2 * n - 1, real=True)
    fa = sfft.rfft(a, size, axis=0)
    full = sfft.irfft(_matmul(fa, sfft.rfft(b, size, axis=0)), size, axis=0)[:n]
    fodd = sfft.irfft(_matmul(fa, sfft.rfft(bo, size, axis=0)), size, axis=0)[:n]
    out = step / 3.0 * (2.0 * full + 2.0 * fodd - _matmul(a, b[:1]) - _matmul(a[:1], b))
    out[0] = 0.0
    out[1::2] = np.nan
    return out


def resolvent_residual(phi_mean: GridMatrix, psi: GridMatrix) -> float:
    """Max-norm of ``int_0^t Psi(t-s) phi(s) ds - (Psi(t) - phi(t))`` at even nodes.

    The convolution is evaluated with Simpson's rule, independently of the
    trapezoid scheme used by the solver, so the value measures the
    discretization error of ``psi`` itself (``O(h^2)``).
    """
    _same_grid(phi_mean, psi)
    s = _simpson_convolution(psi.values, phi_mean.values, phi_mean.step)
    r = s[::2] - (psi.values[::2] - phi_mean.values[::2])
    return float(np.abs(r).max())


def cumulative_integral(values: np.ndarray, step: float) -> np.ndarray:
    """Running trapezoid integral along axis 0, starting at 0."""
    out = np.zeros_like(values)
    out[1:] = np.cumsum(0.5 * step * (values[1:] + values[:-1]), axis=0)
    return out
