"""Deterministic operators on finite configurations and a Mecke-formula checker.

Points carry all four coordinates ``(k, t, theta, y)``.  A functional of a
finite configuration is evaluated by replaying the thinning rule on it, so
everything here is exact enumeration; the caps on ``n`` keep it that way.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from . import marks as mk
from .errors import TooLarge, ValidationError
from .kernels import DKernel, _entrywise, trapezoid_convolution
from .simulator import Path, ScenarioSpec, replay

MAX_SUBSET_POINTS = 20
MAX_ADDED_POINTS = 10
MAX_TUPLE_ORDER = 4
MAX_TUPLES = 10_000_000


class FullPoint(NamedTuple):
    component: int
    time: float
    theta: float
    mark: float


@dataclass(frozen=True)
class FinitePointSet:
    points: tuple = ()

    def __post_init__(self):
        pts = tuple(FullPoint(int(k), float(t), float(th), float(y)) for k, t, th, y in self.points)
        for a, b in zip(pts, pts[1:]):
            if b.time <= a.time:
                raise ValidationError("points must have strictly increasing times")
        for p in pts:
            if p.time <= 0 or p.theta < 0 or p.mark < 0 or p.component < 0:
                raise ValidationError(f"invalid point {tuple(p)}")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def subset(self, mask: Iterable[bool]) -> "FinitePointSet":
        return FinitePointSet(tuple(p for p, keep in zip(self.points, mask) if keep))

    def union(self, other: Iterable) -> "FinitePointSet":
        return FinitePointSet(tuple(sorted(list(self.points) + list(other), key=lambda p: p[1])))

    @classmethod
    def from_path(cls, path: Path) -> "FinitePointSet":
        if path.thetas is None:
            raise ValidationError("path was simulated without theta levels (use record_theta=True)")
        return cls(tuple((e.component, e.time, th, e.mark) for e, th in zip(path.events, path.thetas)))


def _total(terms: list, exact: bool):
    # exact=True keeps the sum as a rational so alternating sums cancel without rounding
    return sum(map(Fraction, terms), Fraction(0)) if exact else math.fsum(terms)


def _payoff(zeta: DKernel, i: int, T: float, pts: Sequence, exact: bool = False):
    return _total([zeta.value(i, p[0], T - p[1], p[3]) for p in pts if p[1] <= T], exact)


def evaluate_on_configuration(spec: ScenarioSpec, zeta: DKernel, points, i: int,
                              T_eval: float | None = None, exact: bool = False):
    """``Z^i_T`` of the configuration: replay acceptance, then sum the payoff of accepted points."""
    T = spec.horizon if T_eval is None else T_eval
    pts = list(points)
    idx, _ = replay(spec, pts)
    return _payoff(zeta, i, T, [pts[j] for j in idx], exact)


def intensity_on_configuration(spec: ScenarioSpec, points, k: int, t: float, exact: bool = False):
    """``lambda^k_t`` of the configuration (accepted points strictly before ``t``)."""
    pts = [p for p in points if p[1] < t]
    idx, _ = replay(spec, pts)
    terms = [spec.baseline[k].scalar(t)]
    terms.extend(spec.excitation.value(k, pts[j][0], t - pts[j][1], pts[j][3]) for j in idx)
    return _total(terms, exact)


def compatibility(spec: ScenarioSpec, points) -> bool:
    """Every point sits below the intensity generated by all of its predecessors."""
    pts = list(points)
    phi = spec.excitation
    for m, (k, t, th, y) in enumerate(pts):
        terms = [spec.baseline[k].scalar(t)]
        terms.extend(phi.value(k, kj, t - tj, yj) for kj, tj, _, yj in pts[:m])
        if th > math.fsum(terms):
            return False
    return True


def _alternating_sum(F: Callable[[list], float], pts: Sequence, base: Sequence = ()) -> float:
    n = len(pts)
    total = Fraction(0)
    for mask in itertools.product((0, 1), repeat=n):
        chosen = [p for p, keep in zip(pts, mask) if keep]
        cfg = sorted(list(base) + chosen, key=lambda p: p[1])
        v = Fraction(F(cfg))
        total += -v if (n - sum(mask)) % 2 else v
    return float(total)


def t_operator(F: Callable[[list], float], points) -> float:
    """``T^n F = sum_{J subset} (-1)^{n-|J|} F(J)`` for an arbitrary functional of point lists."""
    pts = list(points)
    if len(pts) > MAX_SUBSET_POINTS:
        raise TooLarge(f"{len(pts)} points exceed the enumeration cap {MAX_SUBSET_POINTS}")
    return _alternating_sum(F, pts)


def t_operator_direct(spec: ScenarioSpec, zeta: DKernel, points, i: int,
                      T_eval: float | None = None) -> float:
    """``T^n Z^i_T`` by enumerating all subsets of ``points``."""
    T = spec.horizon if T_eval is None else T_eval
    return t_operator(lambda cfg: evaluate_on_configuration(spec, zeta, cfg, i, T, exact=True), points)


def t_operator_recursive(spec: ScenarioSpec, zeta: DKernel, points, i: int,
                         T_eval: float | None = None) -> float:
    """``zeta^{i,k_n}(T - t_n, y_n) * T^{n-1} 1{theta_n <= lambda^{k_n}_{t_n}}``."""
    T = spec.horizon if T_eval is None else T_eval
    pts = list(points)
    n = len(pts)
    if n > MAX_SUBSET_POINTS:
        raise TooLarge(f"{n} points exceed the enumeration cap {MAX_SUBSET_POINTS}")
    if n == 0:
        return 0.0
    k, t, th, y = pts[-1]
    head = zeta.value(i, k, T - t, y)
    if head == 0.0:
        return 0.0
    count = 0
    for mask in itertools.product((0, 1), repeat=n - 1):
        sub = [p for p, keep in zip(pts[:-1], mask) if keep]
        if th <= intensity_on_configuration(spec, sub, k, t):
            count += -1 if (n - 1 - sum(mask)) % 2 else 1
    return head * count


def difference_operator(spec: ScenarioSpec, zeta: DKernel, base, added, i: int,
                        T_eval: float | None = None) -> float:
    """``D^n Z^i_T(omega)`` at the added points, omega given as a full configuration.

    ``base`` is a FinitePointSet (accepted and rejected atoms) or a Path
    simulated with ``record_theta=True``; in the latter case omega consists
    of the accepted atoms only.
    """
    T = spec.horizon if T_eval is None else T_eval
    base_pts = list(FinitePointSet.from_path(base) if isinstance(base, Path) else base)
    add = list(added)
    if len(add) > MAX_ADDED_POINTS:
        raise TooLarge(f"{len(add)} added points exceed the cap {MAX_ADDED_POINTS}")
    return _alternating_sum(lambda cfg: evaluate_on_configuration(spec, zeta, cfg, i, T, exact=True),
                            add, base_pts)


def iterated_integral(f: Callable[..., float], atoms: Sequence, n: int) -> float:
    """Sum of ``f(x_1, ..., x_n)`` over ordered n-tuples of pairwise distinct atoms."""
    if n > MAX_TUPLE_ORDER:
        raise TooLarge(f"order {n} exceeds the cap {MAX_TUPLE_ORDER}")
    m = len(atoms)
    if n > m:
        return 0.0
    if math.perm(m, n) > MAX_TUPLES:
        raise TooLarge(f"{math.perm(m, n)} tuples exceed the cap {MAX_TUPLES}")
    return math.fsum(f(*tup) for tup in itertools.permutations(atoms, n))


def random_configuration(spec: ScenarioSpec, rng: np.random.Generator, theta_cap: float,
                         horizon: float | None = None) -> FinitePointSet:
    from .simulator import sample_configuration
    return FinitePointSet(tuple(sample_configuration(spec, rng, theta_cap, horizon)))


# ---------------------------------------------------------------------------
# Mecke formula


@dataclass(frozen=True)
class MeckeBox:
    """``h(k, t, theta, y) = 1{k in components} 1{t0 <= t <= t1} 1{theta <= cap} weight(t)``."""

    t0: float
    t1: float
    components: tuple | None = None
    weight: Callable | None = None

    def comps(self, d: int) -> tuple:
        return tuple(range(d)) if self.components is None else tuple(self.components)

    def g(self, t):
        t = np.asarray(t, dtype=float)
        return np.ones_like(t) if self.weight is None else np.asarray(self.weight(t), dtype=float) * np.ones_like(t)


@dataclass(frozen=True)
class Functional:
    """``F`` in the Mecke check: a constant, ``Z^i_T`` for a payoff kernel, or ``lambda^i_T``."""

    kind: str
    i: int = 0
    zeta: DKernel | None = None
    value: float = 1.0

    @classmethod
    def constant(cls, value: float = 1.0) -> "Functional":
        return cls("constant", value=value)

    @classmethod
    def mspd(cls, zeta: DKernel, i: int) -> "Functional":
        return cls("mspd", i=i, zeta=zeta)

    @classmethod
    def intensity(cls, i: int) -> "Functional":
        return cls("intensity", i=i)

    def on_path(self, path: Path, T: float) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "mspd":
            from .simulator import evaluate_mspd
            return evaluate_mspd(path, self.zeta, self.i, T)
        return float(path_intensity(path, self.i, np.array([T]))[0])


def path_intensity(path: Path, k: int, ts: np.ndarray) -> np.ndarray:
    """Predictable intensity ``lambda^k`` of a path at an array of times."""
    spec = path.spec
    out = spec.baseline[k](ts)
    if path.events:
        tj, cj, yj = path.times, path.components, path.marks
        lag = ts[:, None] - tj[None, :]
        for kj in range(spec.d):
            e = spec.excitation.entry(k, kj)
            sel = cj == kj
            if e is None or not sel.any():
                continue
            lk = lag[:, sel]
            vals = e.profile(lk) * e.modulator(yj[sel])[None, :]
            out = out + np.where(lk > 0, vals, 0.0).sum(axis=1)
    return out


@dataclass
class MeckeResult:
    lhs: float
    stderr: float
    rhs: float
    z: float
    lhs_doubled: float
    stderr_doubled: float
    rhs_doubled: float
    z_doubled: float
    truncation: float
    n_paths: int
    passed: bool = field(default=False)

    @property
    def stable(self) -> bool:
        return abs(self.truncation) <= self.stderr


class MeckeCheck:
    """Per-path statistics and the final comparison for one (box, F, cap) triple.

    The left side ``E[F int h dN]`` needs every atom of the driving measure in
    the box: accepted events carry their recorded theta, and the atoms above
    the intensity are drawn afterwards as a Poisson measure restricted to
    ``{theta > lambda_t}`` (conditionally independent of the path).  The
    right side uses ``E[F o eps_x] = E[F] + P(theta <= lambda_t) (payoff
    increment)``; integrating theta over ``[0, cap]`` turns the probability
    into ``E[min(lambda_t, cap)]``, which the analytic side replaces by
    ``E[lambda_t]``.  The neglected ``E[(lambda_t - cap)^+]`` part is
    estimated from the paths and reported as ``truncation`` (its change when
    the cap doubles).
    """

    n_nodes = 33

    def __init__(self, spec: ScenarioSpec, box: MeckeBox, F: Functional, theta_cap: float,
                 step: float | None = None):
        from . import moments as mm
        T = spec.horizon
        if not (0 <= box.t0 < box.t1 <= T):
            raise ValidationError("Mecke box must satisfy 0 <= t0 < t1 <= horizon")
        self.spec, self.box, self.F, self.cap = spec, box, F, float(theta_cap)
        self.comps = box.comps(spec.d)
        self.nodes = np.linspace(box.t0, box.t1, self.n_nodes)
        h = mm.choose_step([T, box.t0, box.t1] if box.t0 > 0 else [T, box.t1], step)
        eng = mm.engine(spec, T, h)
        laws = spec.marks
        i = F.i
        # expected payoff increment of an accepted point, averaged over its mark
        inc = np.zeros((eng.n + 1, spec.d))
        lag = eng.times[::-1]
        if F.kind == "mspd":
            q = eng.descendant_weights(F.zeta)
            for k in range(spec.d):
                z = F.zeta.entry(i, k)
                if z is not None:
                    inc[:, k] += z.profile(lag) * mk.expect(laws[k], z.modulator)
                for m_ in range(spec.d):
                    e = spec.excitation.entry(m_, k)
                    if e is not None:
                        inc[:, k] += q[::-1, i, m_, k] * e.mean(laws[k])
            mean_F = mm.expect_mspd(spec, F.zeta, T, h)[i]
        elif F.kind == "intensity":
            pf = trapezoid_convolution(eng.psi.values, eng.F, h, op=_entrywise)
            for k in range(spec.d):
                for m_ in range(spec.d):
                    e = spec.excitation.entry(m_, k)
                    if e is None:
                        continue
                    w = e.mean(laws[k])
                    if m_ == i:
                        inc[:, k] += eng.F[::-1, i, k] * w
                    inc[:, k] += pf[::-1, i, m_, k] * w
            inc[-1] = 0.0          # strict at lag 0
            mean_F = eng.m[-1, i]
        else:
            mean_F = F.value
        self.mean_F = float(mean_F)
        sel = (eng.times >= box.t0 - 1e-12 * T) & (eng.times <= box.t1 + 1e-12 * T)
        tt = eng.times[sel]
        g = box.g(tt)
        self.mass = float(np.trapezoid(g, tt)) * len(self.comps)
        self.excess = float(sum(np.trapezoid(g * eng.m[sel, k] * inc[sel, k], tt) for k in self.comps))
        self.inc_nodes = np.stack([np.interp(self.nodes, eng.times, inc[:, k]) for k in range(spec.d)], axis=1)

    def rhs(self, cap: float) -> float:
        return cap * self.mass * self.mean_F + self.excess

    def path_stats(self, path: Path, rng: np.random.Generator) -> np.ndarray:
        """``[F N_cap, F N_2cap, truncation change]`` for one path; draws the atoms above the intensity."""
        spec, box, cap = self.spec, self.box, self.cap
        T = spec.horizon
        cap2 = 2.0 * cap
        Fv = self.F.on_path(path, T)
        n1 = n2 = 0.0
        for e, th in zip(path.events, path.thetas):
            if e.component in self.comps and box.t0 <= e.time <= box.t1 and th <= cap2:
                w = float(box.g(e.time))
                n2 += w
                if th <= cap:
                    n1 += w
        width = box.t1 - box.t0
        trunc = 0.0
        for k in self.comps:
            n = rng.poisson(width * cap2)
            ts = rng.uniform(box.t0, box.t1, n)
            th = rng.uniform(0.0, cap2, n)
            mk.sample_array(spec.marks[k], rng, n)   # marks are drawn to keep the atom law complete
            if n:
                lam = path_intensity(path, k, ts)
                above = th > lam
                w = box.g(ts)
                n2 += float(np.sum(w[above]))
                n1 += float(np.sum(w[above & (th <= cap)]))
            lam_nodes = path_intensity(path, k, self.nodes)
            change = np.clip(lam_nodes - cap, 0.0, cap)
            trunc += float(np.trapezoid(box.g(self.nodes) * change * self.inc_nodes[:, k], self.nodes))
        return np.array([Fv * n1, Fv * n2, trunc])

    def finish(self, stats: np.ndarray) -> MeckeResult:
        from .montecarlo import batch_means
        n = stats.shape[0]
        lhs, se = batch_means(stats[:, 0])
        lhs2, se2 = batch_means(stats[:, 1])
        trunc = float(np.mean(stats[:, 2]))
        r1, r2 = self.rhs(self.cap), self.rhs(2 * self.cap)
        z1 = (lhs - r1) / se if se > 0 else (0.0 if lhs == r1 else math.inf)
        z2 = (lhs2 - r2) / se2 if se2 > 0 else (0.0 if lhs2 == r2 else math.inf)
        res = MeckeResult(lhs, se, r1, z1, lhs2, se2, r2, z2, trunc, n)
        res.passed = abs(z1) <= 4 and abs(z2) <= 4 and res.stable
        return res


def mecke_check(spec: ScenarioSpec, h: MeckeBox, F: Functional, n_paths: int, theta_cap: float,
                seed: int | None = None, step: float | None = None, n_workers: int = 1) -> MeckeResult:
    """Monte Carlo left side against the analytic right side of the Mecke identity."""
    from .montecarlo import run_paths
    chk = MeckeCheck(spec, h, F, theta_cap, step)
    seed = spec.seed if seed is None else seed
    stats = run_paths(spec, n_paths, seed, [chk.path_stats], record_theta=True, n_workers=n_workers)[0]
    return chk.finish(stats)


# ---------------------------------------------------------------------------
# randomized invariant suite (used by the chaos-check command)


def random_scenario(rng: np.random.Generator, d: int | None = None, horizon: float = 2.0,
                    radius: float | None = None) -> ScenarioSpec:
    """A random subcritical separable scenario with mixed profiles, modulators and mark laws."""
    from .kernels import ExponentialDecay, PowerLaw, Separable
    from .simulator import ConstantBaseline, PiecewiseLinearBaseline

    d = int(rng.integers(1, 4)) if d is None else d
    laws = []
    for _ in range(d):
        fam = rng.integers(4)
        if fam == 0:
            laws.append(mk.PointMass(float(rng.uniform(0.5, 2.0))))
        elif fam == 1:
            laws.append(mk.Exponential(float(rng.uniform(0.5, 2.0))))
        elif fam == 2:
            laws.append(mk.LogNormal(float(rng.uniform(-0.5, 0.5)), float(rng.uniform(0.2, 0.8))))
        else:
            w = rng.dirichlet(np.ones(3))
            w[-1] = 1.0 - w[:-1].sum()
            laws.append(mk.Empirical(tuple(rng.uniform(0.1, 3.0, 3)), tuple(w)))

    def modulator():
        fam = rng.integers(4)
        if fam == 0:
            return mk.Constant(float(rng.uniform(0.5, 1.5)))
        if fam == 1:
            return mk.Identity()
        if fam == 2:
            return mk.Power(float(rng.uniform(0.5, 2.0)))
        return mk.Capped(float(rng.uniform(0.5, 2.0)))

    def entry():
        if rng.random() < 0.5:
            prof = ExponentialDecay(float(rng.uniform(0.2, 2.0)), float(rng.uniform(0.5, 3.0)))
        else:
            prof = PowerLaw(float(rng.uniform(0.2, 2.0)), float(rng.uniform(1.5, 4.0)))
        return Separable(prof, modulator())

    rows = [[entry() if rng.random() < 0.7 else None for _ in range(d)] for _ in range(d)]
    if all(e is None for r in rows for e in r):
        rows[0][0] = entry()
    target = float(rng.uniform(0.2, 0.8)) if radius is None else radius
    scaled = _scale_to_radius(rows, laws, target)
    base = []
    for _ in range(d):
        if rng.random() < 0.5:
            base.append(ConstantBaseline(float(rng.uniform(0.2, 1.5))))
        else:
            base.append(PiecewiseLinearBaseline(((0.0, float(rng.uniform(0.2, 1.5))),
                                                 (horizon, float(rng.uniform(0.2, 1.5))))))
    zrows = [[entry() if rng.random() < 0.7 else None for _ in range(d)] for _ in range(d)]
    return ScenarioSpec(d, horizon, tuple(base), DKernel(scaled, True), DKernel(tuple(map(tuple, zrows))),
                        tuple(laws), int(rng.integers(2 ** 63)))


def _scale_to_radius(rows, laws, target: float) -> tuple:
    """Rescale amplitudes to spectral radius ``target`` (largest entry ``target`` if nilpotent)."""
    from .kernels import ExponentialDecay, PowerLaw, Separable, spectral_radius

    K = DKernel(tuple(map(tuple, rows)), True).integral_matrix(laws)
    r = spectral_radius(K)
    s = target / (r if r > 0 else K.max())
    out = []
    for r in rows:
        new = []
        for e in r:
            if e is None:
                new.append(None)
            elif isinstance(e.profile, ExponentialDecay):
                new.append(Separable(ExponentialDecay(e.profile.alpha * s, e.profile.beta), e.modulator))
            else:
                new.append(Separable(PowerLaw(e.profile.alpha * s, e.profile.p), e.modulator))
        out.append(tuple(new))
    return tuple(out)


def random_points(spec: ScenarioSpec, rng: np.random.Generator, n: int, slack: float = 1.3) -> FinitePointSet:
    """n time-ordered points whose thetas straddle the compatibility bounds."""
    phi = spec.excitation
    times = np.sort(rng.uniform(0.0, spec.horizon, n))
    pts = []
    for t in times:
        k = int(rng.integers(spec.d))
        y = float(mk.sample_array(spec.marks[k], rng, 1)[0])
        bound = spec.baseline[k].scalar(t) + sum(phi.value(k, kj, t - tj, yj) for kj, tj, _, yj in pts)
        pts.append((k, float(t), float(rng.uniform(0.0, slack * bound)), y))
    return FinitePointSet(tuple(pts))


@dataclass
class InvariantRow:
    name: str
    trials: int
    max_deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance


def run_invariants(trials: int = 1000, seed: int = 0, max_points: int = 6) -> list[InvariantRow]:
    """Randomized checks of the operator identities; every deviation is absolute and must be exactly 0."""
    rng = np.random.default_rng(seed)
    eq_dev = vanish_dev = intens_dev = mono_dev = fact_dev = 0.0
    n_vanish = 0
    for _ in range(trials):
        spec = random_scenario(rng)
        n = int(rng.integers(1, max_points + 1))
        pts = random_points(spec, rng, n)
        i = int(rng.integers(spec.d))
        zeta = spec.payoff
        direct = t_operator_direct(spec, zeta, pts, i)
        rec = t_operator_recursive(spec, zeta, pts, i)
        eq_dev = max(eq_dev, abs(direct - rec))
        if not compatibility(spec, pts):
            n_vanish += 1
            vanish_dev = max(vanish_dev, abs(direct))
        phi = spec.excitation
        lam_direct = t_operator(lambda cfg: intensity_on_configuration(spec, cfg, i, spec.horizon, exact=True), pts)
        lam_rec = t_operator_recursive(spec, phi, pts, i)
        intens_dev = max(intens_dev, abs(lam_direct - lam_rec))
        total = math.fsum(zeta.value(i, p[0], spec.horizon - p[1], p[3]) for p in pts)
        mono_dev = max(mono_dev, evaluate_on_configuration(spec, zeta, pts, i) - total)
        m = int(rng.integers(0, 13))
        k = int(rng.integers(1, 5))
        atoms = list(range(m)) + [-1] * int(rng.integers(0, 4))
        inside = lambda *xs: 1.0 if all(x >= 0 for x in xs) else 0.0
        fact_dev = max(fact_dev, abs(iterated_integral(inside, atoms, k) - math.perm(m, k)))
    return [
        InvariantRow("recursive = direct", trials, eq_dev, 0.0),
        InvariantRow(f"incompatible sets vanish ({n_vanish})", trials, vanish_dev, 0.0),
        InvariantRow("intensity operator relation", trials, intens_dev, 0.0),
        InvariantRow("monotone evaluation bound", trials, max(mono_dev, 0.0), 0.0),
        InvariantRow("factorial measure law", trials, fact_dev, 0.0),
    ]
