"""Mark (claim-size) laws on the half line and mark functionals.

A mark law is an immutable description of a probability measure on
``[0, inf)``.  Sampling always goes through the quantile function so one
uniform variate produces one mark, which keeps per-path random streams
aligned across laws.

Mark functionals form a closed set of families.  ``expect`` dispatches on
the (law, functional) pair and uses a closed form whenever one exists;
otherwise it integrates numerically on ``(0, 1)`` through ``y = u/(1-u)``.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import integrate, special

from .errors import NonIntegrable

QUAD_RTOL = 1e-9


# ---------------------------------------------------------------------------
# laws


@dataclass(frozen=True)
class PointMass:
    value: float

    family = "point_mass"

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value >= 0):
            raise ValueError(f"point mass location must be finite and >= 0, got {self.value}")

    def ppf(self, u: float) -> float:
        return self.value

    def cdf(self, y):
        return np.where(np.asarray(y, dtype=float) >= self.value, 1.0, 0.0)

    def partial_mean(self, a: float, b: float) -> float:
        return self.value if a < self.value <= b else 0.0


@dataclass(frozen=True)
class Exponential:
    rate: float

    family = "exponential"

    def __post_init__(self):
        if not (math.isfinite(self.rate) and self.rate > 0):
            raise ValueError(f"exponential rate must be finite and > 0, got {self.rate}")

    def ppf(self, u: float) -> float:
        return -math.log1p(-u) / self.rate

    def pdf(self, y):
        y = np.asarray(y, dtype=float)
        return np.where(y >= 0, self.rate * np.exp(-self.rate * np.maximum(y, 0.0)), 0.0)

    def cdf(self, y):
        y = np.maximum(np.asarray(y, dtype=float), 0.0)
        return -np.expm1(-self.rate * y)

    def partial_mean(self, a: float, b: float) -> float:
        # int_a^b y rate e^{-rate y} dy
        def g(x):
            if math.isinf(x):
                return 0.0
            return (x + 1.0 / self.rate) * math.exp(-self.rate * x)

        return g(max(a, 0.0)) - g(max(b, 0.0))


@dataclass(frozen=True)
class LogNormal:
    mu: float
    sigma: float

    family = "lognormal"

    def __post_init__(self):
        if not math.isfinite(self.mu):
            raise ValueError(f"lognormal mu must be finite, got {self.mu}")
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"lognormal sigma must be finite and > 0, got {self.sigma}")

    def ppf(self, u: float) -> float:
        return math.exp(self.mu + self.sigma * special.ndtri(u))

    def pdf(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        pos = y > 0
        z = (np.log(y[pos]) - self.mu) / self.sigma
        out[pos] = np.exp(-0.5 * z * z) / (y[pos] * self.sigma * math.sqrt(2 * math.pi))
        return out

    def _z(self, x: float, shift: float = 0.0) -> float:
        if x <= 0:
            return -math.inf
        if math.isinf(x):
            return math.inf
        return (math.log(x) - self.mu - shift) / self.sigma

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore"):
            z = (np.log(np.maximum(y, 0.0)) - self.mu) / self.sigma
        return special.ndtr(z)

    def partial_mean(self, a: float, b: float) -> float:
        s2 = self.sigma ** 2
        m = math.exp(self.mu + 0.5 * s2)
        return m * (special.ndtr(self._z(b, s2)) - special.ndtr(self._z(a, s2)))


@dataclass(frozen=True)
class Empirical:
    values: tuple
    weights: tuple

    family = "empirical"

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        wts = tuple(float(w) for w in self.weights)
        if not vals or len(vals) != len(wts):
            raise ValueError("empirical law needs equally many values and weights (at least one)")
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError("empirical values must be finite and >= 0")
        if any(not math.isfinite(w) or w < 0 for w in wts):
            raise ValueError("empirical weights must be finite and >= 0")
        if abs(math.fsum(wts) - 1.0) > 1e-12:
            raise ValueError(f"empirical weights must sum to 1, got {math.fsum(wts)!r}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "weights", wts)
        object.__setattr__(self, "_cum", tuple(np.cumsum(wts).tolist()))

    def ppf(self, u: float) -> float:
        j = bisect.bisect_right(self._cum, u)
        return self.values[min(j, len(self.values) - 1)]

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        v = np.asarray(self.values)
        w = np.asarray(self.weights)
        return (w * (v <= y[..., None])).sum(axis=-1)

    def partial_mean(self, a: float, b: float) -> float:
        return math.fsum(w * v for v, w in zip(self.values, self.weights) if a < v <= b)


MarkLaw = Union[PointMass, Exponential, LogNormal, Empirical]
DISCRETE = (PointMass, Empirical)


def sample(law: MarkLaw, rng: np.random.Generator) -> float:
    """One draw from ``law`` using a single uniform from ``rng``."""
    return law.ppf(rng.random())


def sample_array(law: MarkLaw, rng: np.random.Generator, n: int) -> np.ndarray:
    u = rng.random(n)
    if isinstance(law, PointMass):
        return np.full(n, law.value)
    if isinstance(law, Exponential):
        return -np.log1p(-u) / law.rate
    if isinstance(law, LogNormal):
        return np.exp(law.mu + law.sigma * special.ndtri(u))
    idx = np.searchsorted(np.asarray(law._cum), u, side="right")
    return np.asarray(law.values)[np.minimum(idx, len(law.values) - 1)]


# ---------------------------------------------------------------------------
# functionals


@dataclass(frozen=True)
class Constant:
    c: float = 1.0

    family = "constant"

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c >= 0):
            raise ValueError(f"constant functional must be finite and >= 0, got {self.c}")

    def __call__(self, y):
        return np.full(np.shape(y), self.c, dtype=float)

    def scalar(self, y: float) -> float:
        return self.c


@dataclass(frozen=True)
class Identity:
    family = "identity"

    def __call__(self, y):
        return np.asarray(y, dtype=float) * 1.0

    def scalar(self, y: float) -> float:
        return y


@dataclass(frozen=True)
class Power:
    gamma: float

    family = "power"

    def __post_init__(self):
        if not math.isfinite(self.gamma):
            raise ValueError("power exponent must be finite")

    def __call__(self, y):
        with np.errstate(divide="ignore"):
            return np.power(np.asarray(y, dtype=float), self.gamma)

    def scalar(self, y: float) -> float:
        if y == 0.0:
            return 1.0 if self.gamma == 0 else (0.0 if self.gamma > 0 else math.inf)
        return y ** self.gamma


@dataclass(frozen=True)
class Capped:
    cap: float

    family = "capped"

    def __post_init__(self):
        if not (math.isfinite(self.cap) and self.cap > 0):
            raise ValueError(f"cap must be finite and > 0, got {self.cap}")

    def __call__(self, y):
        return np.minimum(np.asarray(y, dtype=float), self.cap)

    def scalar(self, y: float) -> float:
        return y if y < self.cap else self.cap


@dataclass(frozen=True)
class Tabulated:
    """Piecewise-linear interpolation of (knot, value) pairs, flat outside."""

    knots: tuple
    values: tuple

    family = "tabulated"

    def __post_init__(self):
        xs = tuple(float(x) for x in self.knots)
        ys = tuple(float(v) for v in self.values)
        if not xs or len(xs) != len(ys):
            raise ValueError("tabulated functional needs equally many knots and values")
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("tabulated knots must be strictly increasing")
        if xs[0] < 0 or any(not math.isfinite(v) or v < 0 for v in ys):
            raise ValueError("tabulated knots and values must be >= 0 and finite")
        object.__setattr__(self, "knots", xs)
        object.__setattr__(self, "values", ys)

    def __call__(self, y):
        return np.interp(np.asarray(y, dtype=float), self.knots, self.values)

    def scalar(self, y: float) -> float:
        xs, ys = self.knots, self.values
        if y <= xs[0]:
            return ys[0]
        if y >= xs[-1]:
            return ys[-1]
        j = bisect.bisect_right(xs, y)
        w = (y - xs[j - 1]) / (xs[j] - xs[j - 1])
        return ys[j - 1] + w * (ys[j] - ys[j - 1])


@dataclass(frozen=True)
class Product:
    """Pointwise product of two functionals (used for second-order moments)."""

    f: object
    g: object

    family = "product"

    def __call__(self, y):
        return self.f(y) * self.g(y)

    def scalar(self, y: float) -> float:
        return self.f.scalar(y) * self.g.scalar(y)


MarkFunctional = Union[Constant, Identity, Power, Capped, Tabulated, Product]


def combine(a: float, f: Tabulated, b: float, g: Tabulated) -> Tabulated:
    """The tabulated functional ``a*f + b*g`` on the union of the knots."""
    xs = np.union1d(f.knots, g.knots)
    return Tabulated(tuple(xs), tuple(a * f(xs) + b * g(xs)))


def _as_power(f) -> float | None:
    if isinstance(f, Identity):
        return 1.0
    if isinstance(f, Power):
        return f.gamma
    return None


def _piecewise(f) -> tuple[np.ndarray, np.ndarray] | None:
    """Knots and values if f is piecewise linear with flat tails."""
    if isinstance(f, Tabulated):
        return np.asarray(f.knots), np.asarray(f.values)
    if isinstance(f, Capped):
        return np.array([0.0, f.cap]), np.array([0.0, f.cap])
    return None


def _expect_piecewise(law, xs: np.ndarray, ys: np.ndarray) -> float:
    # E f(Y) = f(x0) P(Y<=x0) + sum_j [y_j dF_j + (y_j+1 - y_j) w_j] + f(xn) P(Y>xn)
    # with w_j = E[(Y - x_j)/(x_j+1 - x_j); x_j < Y <= x_j+1] in [0, dF_j]; no slopes, so
    # tiny or steep segments cannot overflow
    cdf = np.asarray(law.cdf(xs), dtype=float)
    terms = [ys[0] * cdf[0], ys[-1] * (1.0 - cdf[-1])]
    for j in range(len(xs) - 1):
        dF = cdf[j + 1] - cdf[j]
        if dF <= 0.0:
            continue
        x0, x1 = xs[j], xs[j + 1]
        with np.errstate(all="ignore"):
            w = (law.partial_mean(x0, x1) - x0 * dF) / (x1 - x0)
        w = min(max(w, 0.0), dF) if math.isfinite(w) else 0.5 * dF
        terms.append(ys[j] * dF + (ys[j + 1] - ys[j]) * w)
    return math.fsum(terms)


def _breakpoints(f) -> list[float]:
    if isinstance(f, Product):
        return _breakpoints(f.f) + _breakpoints(f.g)
    pw = _piecewise(f)
    return [] if pw is None else [float(x) for x in pw[0]]


def _quadrature(law, f) -> float:
    pts = sorted({x / (1.0 + x) for x in _breakpoints(f) if 0 < x < math.inf})

    def integrand(u):
        y = u / (1.0 - u)
        val = float(f(np.array([y]))[0] * law.pdf(np.array([y]))[0])
        return val / (1.0 - u) ** 2

    with np.errstate(all="ignore"):
        try:
            out = integrate.quad(integrand, 0.0, 1.0, epsabs=0.0, epsrel=QUAD_RTOL, limit=500,
                                 points=pts or None, full_output=True)
        except (ZeroDivisionError, OverflowError, FloatingPointError) as exc:
            raise NonIntegrable(f"quadrature of {f!r} under {law!r} failed: {exc}") from exc
    val, err = out[0], out[1]
    # a fourth element is the warning message scipy returns when it gives up
    if len(out) > 3 or not math.isfinite(val) or err > 10 * QUAD_RTOL * abs(val) + 1e-300:
        raise NonIntegrable(f"quadrature of {f!r} under {law!r} did not converge (estimate {val}, error {err})")
    return val


def expect(law: MarkLaw, f) -> float:
    """Integral of the functional ``f`` against ``law``."""
    if isinstance(law, PointMass):
        return float(f.scalar(law.value))
    if isinstance(law, Empirical):
        return math.fsum(w * f.scalar(v) for v, w in zip(law.values, law.weights) if w > 0)
    if isinstance(f, Constant):
        return f.c
    if isinstance(f, Product):
        if isinstance(f.f, Constant):
            return f.f.c * expect(law, f.g)
        if isinstance(f.g, Constant):
            return f.g.c * expect(law, f.f)
        ga, gb = _as_power(f.f), _as_power(f.g)
        if ga is not None and gb is not None:
            return expect(law, Power(ga + gb))
        return _quadrature(law, f)
    gamma = _as_power(f)
    if gamma is not None:
        if isinstance(law, Exponential):
            if gamma <= -1:
                raise NonIntegrable(f"y^{gamma} is not integrable under {law!r}")
            return math.exp(math.lgamma(gamma + 1.0) - gamma * math.log(law.rate))
        return math.exp(gamma * law.mu + 0.5 * (gamma * law.sigma) ** 2)
    pw = _piecewise(f)
    if pw is not None:
        return _expect_piecewise(law, *pw)
    return _quadrature(law, f)


def expect_product(law: MarkLaw, f, g) -> float:
    """E[f(Y) g(Y)] under ``law``."""
    return expect(law, Product(f, g))


def mean(law: MarkLaw) -> float:
    return expect(law, Identity())


def law_from_dict(d: dict) -> MarkLaw:
    fam = d.get("family")
    if fam == "point_mass":
        return PointMass(float(d["value"]))
    if fam == "exponential":
        return Exponential(float(d["rate"]))
    if fam == "lognormal":
        return LogNormal(float(d["mu"]), float(d["sigma"]))
    if fam == "empirical":
        return Empirical(tuple(d["values"]), tuple(d["weights"]))
    raise ValueError(f"unknown mark law family {fam!r}")


def law_to_dict(law: MarkLaw) -> dict:
    if isinstance(law, PointMass):
        return {"family": "point_mass", "value": law.value}
    if isinstance(law, Exponential):
        return {"family": "exponential", "rate": law.rate}
    if isinstance(law, LogNormal):
        return {"family": "lognormal", "mu": law.mu, "sigma": law.sigma}
    return {"family": "empirical", "values": list(law.values), "weights": list(law.weights)}


LAW_KEYS = {
    "point_mass": {"value"},
    "exponential": {"rate"},
    "lognormal": {"mu", "sigma"},
    "empirical": {"values", "weights"},
}

FUNCTIONAL_KEYS = {
    "constant": {"c"},
    "identity": set(),
    "power": {"gamma"},
    "capped": {"cap"},
    "tabulated": {"knots", "values"},
}


def functional_from_dict(d: dict):
    fam = d.get("family")
    if fam == "constant":
        return Constant(float(d.get("c", 1.0)))
    if fam == "identity":
        return Identity()
    if fam == "power":
        return Power(float(d["gamma"]))
    if fam == "capped":
        return Capped(float(d["cap"]))
    if fam == "tabulated":
        return Tabulated(tuple(d["knots"]), tuple(d["values"]))
    raise ValueError(f"unknown mark functional family {fam!r}")


def functional_to_dict(f) -> dict:
    if isinstance(f, Constant):
        return {"family": "constant", "c": f.c}
    if isinstance(f, Identity):
        return {"family": "identity"}
    if isinstance(f, Power):
        return {"family": "power", "gamma": f.gamma}
    if isinstance(f, Capped):
        return {"family": "capped", "cap": f.cap}
    if isinstance(f, Tabulated):
        return {"family": "tabulated", "knots": list(f.knots), "values": list(f.values)}
    raise ValueError(f"functional {f!r} has no configuration form")
