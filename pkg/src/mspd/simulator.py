"""Scenario specification, exact thinning simulation and path functionals.

Paths are generated by Ogata thinning against a dominating total rate that
is refreshed at every candidate.  Because every excitation profile is
non-increasing, the current right-limit of the excitation bounds its future
values; baselines contribute their supremum over the current window.

Stress points (injected atoms) are handled as "ghost" excitations: they are
added to the intensity state when time crosses them but are not recorded,
which yields the compensated shift.  The full shifted value adds back the
deterministic payoff of the injected points, see :class:`ShiftedPath`.
"""
from __future__ import annotations

import bisect
import csv
import dataclasses
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import marks as mk
from .errors import ExplosionGuard, NotSubcritical, ValidationError
from .kernels import DKernel, ExponentialDecay, spectral_radius

DEFAULT_MAX_EVENTS = 10_000_000


# ---------------------------------------------------------------------------
# baselines


@dataclass(frozen=True)
class ConstantBaseline:
    c: float

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c >= 0):
            raise ValueError(f"baseline must be finite and >= 0, got {self.c}")

    def __call__(self, t):
        return np.full(np.shape(t), self.c, dtype=float)

    def scalar(self, t: float) -> float:
        return self.c

    def sup(self, a: float, b: float) -> float:
        return self.c

    def integral(self, a: float, b: float) -> float:
        return self.c * (b - a)


@dataclass(frozen=True)
class PiecewiseLinearBaseline:
    """Linear interpolation between ``(t, value)`` knots, flat outside."""

    knots: tuple

    def __post_init__(self):
        ks = tuple((float(t), float(v)) for t, v in self.knots)
        if not ks:
            raise ValueError("piecewise-linear baseline needs at least one knot")
        if any(b[0] <= a[0] for a, b in zip(ks, ks[1:])):
            raise ValueError("baseline knot times must be strictly increasing")
        if any(not (math.isfinite(t) and math.isfinite(v)) or v < 0 for t, v in ks):
            raise ValueError("baseline knot values must be finite and >= 0")
        object.__setattr__(self, "knots", ks)

    @cached_property
    def _t(self):
        return [t for t, _ in self.knots]

    @cached_property
    def _v(self):
        return [v for _, v in self.knots]

    def __call__(self, t):
        return np.interp(np.asarray(t, dtype=float), self._t, self._v)

    def scalar(self, t: float) -> float:
        ts, vs = self._t, self._v
        if t <= ts[0]:
            return vs[0]
        if t >= ts[-1]:
            return vs[-1]
        j = bisect.bisect_right(ts, t)
        w = (t - ts[j - 1]) / (ts[j] - ts[j - 1])
        return vs[j - 1] + w * (vs[j] - vs[j - 1])

    def sup(self, a: float, b: float) -> float:
        ts = self._t
        lo, hi = bisect.bisect_right(ts, a), bisect.bisect_left(ts, b)
        return max([self.scalar(a), self.scalar(b)] + self._v[lo:hi])

    def integral(self, a: float, b: float) -> float:
        xs = [a] + [t for t in self._t if a < t < b] + [b]
        return float(np.trapezoid(self(np.array(xs)), xs))


# ---------------------------------------------------------------------------
# specification and paths


@dataclass(frozen=True)
class ScenarioSpec:
    """Full specification of a (zeta, mu, phi)-MSPD on ``[0, horizon]``."""

    d: int
    horizon: float
    baseline: tuple
    excitation: DKernel
    payoff: DKernel
    marks: tuple
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "baseline", tuple(self.baseline))
        object.__setattr__(self, "marks", tuple(self.marks))
        if not self.excitation.self_exciting:
            object.__setattr__(self, "excitation", self.excitation.as_self_exciting())
        d = self.d
        if d < 1:
            raise ValidationError("d must be >= 1")
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ValidationError("horizon must be finite and > 0")
        for name in ("baseline", "marks"):
            if len(getattr(self, name)) != d:
                raise ValidationError(f"{name} has {len(getattr(self, name))} entries, expected {d}")
        for name in ("excitation", "payoff"):
            if getattr(self, name).d != d:
                raise ValidationError(f"{name} kernel has dimension {getattr(self, name).d}, expected {d}")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ValidationError("seed must be a 64-bit unsigned integer")
        r = self.spectral_radius
        if not r < 1:
            raise NotSubcritical(r)

    @cached_property
    def branching(self) -> np.ndarray:
        return self.excitation.integral_matrix(self.marks)

    @cached_property
    def spectral_radius(self) -> float:
        return spectral_radius(self.branching)

    def baseline_grid(self, times: np.ndarray) -> np.ndarray:
        return np.stack([b(times) for b in self.baseline], axis=1)

    def replace(self, **changes) -> "ScenarioSpec":
        return dataclasses.replace(self, **changes)


class EventRecord(NamedTuple):
    component: int
    time: float
    mark: float


@dataclass(frozen=True)
class StressScenario:
    """Injected points ``(k, t, y)`` with strictly increasing times."""

    points: tuple = ()

    def __post_init__(self):
        pts = tuple(EventRecord(int(k), float(t), float(y)) for k, t, y in self.points)
        for a, b in zip(pts, pts[1:]):
            if b.time <= a.time:
                raise ValidationError("stress times must be strictly increasing")
        for p in pts:
            if not p.time > 0 or p.mark < 0 or p.component < 0:
                raise ValidationError(f"invalid stress point {tuple(p)}")
        object.__setattr__(self, "points", pts)

    def check(self, spec: ScenarioSpec, horizon: float | None = None) -> None:
        T = spec.horizon if horizon is None else horizon
        for p in self.points:
            if p.component >= spec.d:
                raise ValidationError(f"stress component {p.component} out of range for d={spec.d}")
            if p.time > T:
                raise ValidationError(f"stress time {p.time} beyond horizon {T}")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class Path:
    spec: ScenarioSpec
    events: tuple
    thetas: tuple | None = None

    @cached_property
    def times(self) -> np.ndarray:
        return np.array([e.time for e in self.events], dtype=float)

    @cached_property
    def components(self) -> np.ndarray:
        return np.array([e.component for e in self.events], dtype=int)

    @cached_property
    def marks(self) -> np.ndarray:
        return np.array([e.mark for e in self.events], dtype=float)

    def count(self, i: int, t: float | None = None) -> int:
        t = self.spec.horizon if t is None else t
        return int(np.count_nonzero((self.components == i) & (self.times <= t)))


def intensity_at(spec: ScenarioSpec, history: Sequence, i: int, t: float,
                 stress: StressScenario | None = None) -> float:
    """Predictable intensity ``mu^i(t) + sum_{t_j < t} phi^{i,k_j}(t - t_j, y_j)``."""
    phi = spec.excitation
    terms = [spec.baseline[i].scalar(t)]
    pts = list(history) + (list(stress.points) if stress is not None else [])
    for k, tj, y in pts:
        if tj < t:
            terms.append(phi.value(i, k, t - tj, y))
    return math.fsum(terms)


def evaluate_mspd(path: Path, zeta: DKernel, i: int, T_eval: float | None = None) -> float:
    """``Z^i_T = sum_{t_j <= T} zeta^{i,k_j}(T - t_j, y_j)`` (strict for self-excitation kernels)."""
    T = path.spec.horizon if T_eval is None else T_eval
    if not path.events:
        return 0.0
    t, c, y = path.times, path.components, path.marks
    live = (t < T) if zeta.self_exciting else (t <= T)
    total = 0.0
    for k in range(zeta.d):
        e = zeta.entry(i, k)
        if e is None:
            continue
        sel = live & (c == k)
        if sel.any():
            total += float(np.sum(e.profile(T - t[sel]) * e.modulator(y[sel])))
    return total


@dataclass(frozen=True, eq=False)
class ShiftedPath:
    """Accessor for ``Z o eps^+``: compensated-shift value plus the injected payoff."""

    path: Path
    stress: StressScenario

    def value(self, zeta: DKernel, i: int, T_eval: float | None = None) -> float:
        T = self.path.spec.horizon if T_eval is None else T_eval
        extra = math.fsum(zeta.value(i, k, T - t, y) for k, t, y in self.stress.points if t <= T)
        return evaluate_mspd(self.path, zeta, i, T) + extra

    def compensated(self, zeta: DKernel, i: int, T_eval: float | None = None) -> float:
        return evaluate_mspd(self.path, zeta, i, T_eval)

    def intensity(self, i: int, t: float) -> float:
        return intensity_at(self.path.spec, self.path.events, i, t, self.stress)


# ---------------------------------------------------------------------------
# random streams


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, index)``; independent of scheduling."""
    return np.random.Generator(np.random.Philox(key=(int(seed) % 2 ** 64) + (int(index) << 64)))


class _Uniforms:
    __slots__ = ("rng", "buf", "pos", "chunk")

    def __init__(self, rng: np.random.Generator, chunk: int = 64):
        self.rng, self.buf, self.pos, self.chunk = rng, [], 0, chunk

    def __call__(self) -> float:
        if self.pos == len(self.buf):
            self.buf = self.rng.random(self.chunk).tolist()
            self.pos = 0
        self.pos += 1
        return self.buf[self.pos - 1]


# ---------------------------------------------------------------------------
# thinning


class _Excitation:
    """Excitation state: exponential entries by recursion, the rest by history sums."""

    def __init__(self, spec: ScenarioSpec):
        d = spec.d
        self.d = d
        self.groups: list[tuple[int, float]] = []   # (target i, beta)
        self.S: list[float] = []
        self.tlast = 0.0
        gid: dict[tuple[int, float], int] = {}
        self.targets: list[list[tuple]] = [[] for _ in range(d)]  # per source k
        self.general: list[tuple] = []                            # (i, profile, t_j, w_j)
        for i, k, e in spec.excitation.nonzero():
            if not e.profile.nonincreasing:
                raise ValueError(f"excitation profile ({i},{k}) is not non-increasing; cannot bound intensity")
            if isinstance(e.profile, ExponentialDecay):
                key = (i, e.profile.beta)
                if key not in gid:
                    gid[key] = len(self.groups)
                    self.groups.append(key)
                    self.S.append(0.0)
                self.targets[k].append((i, gid[key], e.profile.alpha, e.modulator, None))
            else:
                self.targets[k].append((i, -1, 0.0, e.modulator, e.profile))
        self.betas = [b for _, b in self.groups]
        self.gi = [i for i, _ in self.groups]

    def at(self, s: float) -> list[float]:
        """Excitation at ``s`` from all added points (decays the exponential state to ``s``)."""
        out = [0.0] * self.d
        dt = s - self.tlast
        if self.S:
            S, betas, gi = self.S, self.betas, self.gi
            for g in range(len(S)):
                v = S[g] * math.exp(-betas[g] * dt) if dt else S[g]
                S[g] = v
                out[gi[g]] += v
            self.tlast = s
        for i, prof, tj, w in self.general:
            out[i] += w * prof.scalar(s - tj)
        return out

    def add(self, k: int, t: float, y: float, out: list[float]) -> None:
        """Add a point at ``t`` (state must already be at ``t``) and update ``out`` to the right limit."""
        for i, g, alpha, mod, prof in self.targets[k]:
            w = mod.scalar(y)
            if g >= 0:
                inc = alpha * w
                self.S[g] += inc
            else:
                self.general.append((i, prof, t, w))
                inc = w * prof.scalar(0.0)
            out[i] += inc


def _window(spec: ScenarioSpec) -> float:
    if all(isinstance(b, ConstantBaseline) for b in spec.baseline):
        return math.inf
    peak = sum(b.sup(0.0, spec.horizon) for b in spec.baseline)
    if peak <= 0:
        return math.inf
    return (1.0 - spec.spectral_radius) / peak


def _thin(spec: ScenarioSpec, rng: np.random.Generator, stress: StressScenario | None,
          record_theta: bool, max_events: int, window: float | None):
    T = spec.horizon
    d = spec.d
    uni = _Uniforms(rng)
    exc = _Excitation(spec)
    base = spec.baseline
    const_mu = [b.c if isinstance(b, ConstantBaseline) else None for b in base]
    ppf = [law.ppf for law in spec.marks]
    ghosts = list(stress.points) if stress is not None else []
    gpos = 0
    win = _window(spec) if window is None else window
    events: list[EventRecord] = []
    thetas: list[float] = []
    t = 0.0
    cur = [0.0] * d
    log = math.log
    while t < T:
        t_end = T
        if gpos < len(ghosts) and ghosts[gpos].time < t_end:
            t_end = ghosts[gpos].time
        if t + win < t_end:
            t_end = t + win
        bound = sum(cur)
        for i in range(d):
            bound += const_mu[i] if const_mu[i] is not None else base[i].sup(t, t_end)
        s = t - log(1.0 - uni()) / bound if bound > 0 else math.inf
        if s > t_end:
            t = t_end
            cur = exc.at(t)
            if gpos < len(ghosts) and ghosts[gpos].time == t:
                g = ghosts[gpos]
                exc.add(g.component, t, g.mark, cur)
                gpos += 1
            continue
        t = s
        cur = exc.at(t)
        theta = uni() * bound
        acc = 0.0
        for k in range(d):
            lam = cur[k] + (const_mu[k] if const_mu[k] is not None else base[k].scalar(t))
            if theta <= acc + lam:
                y = ppf[k](uni())
                events.append(EventRecord(k, t, y))
                if record_theta:
                    thetas.append(theta - acc)
                exc.add(k, t, y, cur)
                if len(events) > max_events:
                    raise ExplosionGuard(f"more than {max_events} events before T={T}")
                break
            acc += lam
    return events, thetas


def simulate(spec: ScenarioSpec, rng: np.random.Generator, *, record_theta: bool = False,
             max_events: int = DEFAULT_MAX_EVENTS, window: float | None = None) -> Path:
    """One path of the MSPD by thinning; ``rng`` is consumed from its current state."""
    events, thetas = _thin(spec, rng, None, record_theta, max_events, window)
    return Path(spec, tuple(events), tuple(thetas) if record_theta else None)


def simulate_shifted(spec: ScenarioSpec, stress: StressScenario, rng: np.random.Generator, *,
                     record_theta: bool = False, max_events: int = DEFAULT_MAX_EVENTS,
                     window: float | None = None) -> tuple[Path, ShiftedPath]:
    """Compensated-shift path (baseline augmented by the injected points) and its accessor."""
    stress.check(spec)
    events, thetas = _thin(spec, rng, stress, record_theta, max_events, window)
    path = Path(spec, tuple(events), tuple(thetas) if record_theta else None)
    return path, ShiftedPath(path, stress)


# ---------------------------------------------------------------------------
# Poisson imbedding on a truncated theta domain


def sample_configuration(spec: ScenarioSpec, rng: np.random.Generator, theta_cap: float,
                         horizon: float | None = None) -> list[tuple]:
    """Atoms ``(k, t, theta, y)`` of the driving Poisson measure on ``[0,T] x [0,cap]``, time-ordered."""
    T = spec.horizon if horizon is None else horizon
    atoms = []
    for k in range(spec.d):
        n = rng.poisson(T * theta_cap)
        ts = rng.uniform(0.0, T, n)
        th = rng.uniform(0.0, theta_cap, n)
        ys = mk.sample_array(spec.marks[k], rng, n)
        atoms.extend(zip([k] * n, ts.tolist(), th.tolist(), ys.tolist()))
    atoms.sort(key=lambda a: a[1])
    return atoms


def replay(spec: ScenarioSpec, atoms: Iterable, stress: StressScenario | None = None,
           mu_override: Sequence | None = None) -> tuple[list[int], list[float]]:
    """Deterministic acceptance ``theta_m <= lambda^{k_m}_{t_m}`` over time-ordered atoms.

    Returns the indices of accepted atoms and the intensity seen by every atom.
    """
    phi = spec.excitation
    base = spec.baseline if mu_override is None else mu_override
    accepted: list[tuple] = []
    idx: list[int] = []
    seen: list[float] = []
    injected = list(stress.points) if stress is not None else []
    for m, (k, t, th, y) in enumerate(atoms):
        terms = [base[k].scalar(t)]
        terms.extend(phi.value(k, kj, t - tj, yj) for kj, tj, yj in accepted if tj < t)
        terms.extend(phi.value(k, kj, t - tj, yj) for kj, tj, yj in injected if tj < t)
        lam = math.fsum(terms)
        seen.append(lam)
        if th <= lam:
            accepted.append((k, t, y))
            idx.append(m)
    return idx, seen


# ---------------------------------------------------------------------------
# export


def write_paths_csv(paths: Iterable, fh, start: int = 0) -> None:
    """CSV with columns ``path_id,component,time,mark`` (components 1-based)."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["path_id", "component", "time", "mark"])
    for n, path in enumerate(paths, start):
        for e in path.events:
            w.writerow([n, e.component + 1, format(e.time, ".17g"), format(e.mark, ".17g")])
