import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mspd import marks as mk
from mspd.errors import ExplosionGuard, NotSubcritical, ValidationError
from mspd.kernels import DKernel, ExponentialDecay, PowerLaw, Separable
from mspd.simulator import (ConstantBaseline, EventRecord, Path, PiecewiseLinearBaseline, ScenarioSpec,
                            StressScenario, evaluate_mspd, intensity_at, path_rng, replay,
                            sample_configuration, simulate, simulate_shifted)

EXP1 = mk.Exponential(1.0)


def hawkes(alpha=1.0, beta=2.0, mu=1.0, T=5.0, mod=mk.Constant(1.0), law=EXP1, seed=0):
    phi = DKernel(((Separable(ExponentialDecay(alpha, beta), mod),),), True)
    return ScenarioSpec(1, T, (ConstantBaseline(mu),), phi, DKernel.counting(1), (law,), seed)


def poisson(mus, T=2.0, laws=None):
    d = len(mus)
    return ScenarioSpec(d, T, tuple(ConstantBaseline(m) for m in mus), DKernel.zero(d, True),
                        DKernel.counting(d), laws or (EXP1,) * d)


def test_intensity_at_examples():
    spec = hawkes(0.8, 2.0, mu=0.5)
    assert intensity_at(spec, [], 0, 1.3) == 0.5
    hist = [EventRecord(0, 1.0, 2.0)]
    assert intensity_at(spec, hist, 0, 1.0) == 0.5
    assert intensity_at(spec, hist, 0, 1.5) == pytest.approx(0.5 + 0.8 * math.exp(-1.0), rel=1e-15)


def test_spec_validation():
    with pytest.raises(NotSubcritical) as exc:
        hawkes(alpha=3.0, beta=2.0)
    assert exc.value.radius == pytest.approx(1.5)
    with pytest.raises(ValidationError):
        ScenarioSpec(2, 1.0, (ConstantBaseline(1.0),), DKernel.zero(2), DKernel.counting(2), (EXP1, EXP1))
    with pytest.raises(ValueError):
        ConstantBaseline(-1.0)
    spec = hawkes()
    assert spec.excitation.self_exciting


def test_poisson_counts_mean():
    spec = poisson([1.5, 0.4], T=2.0)
    counts = np.array([[simulate(spec, path_rng(3, j)).count(i) for i in range(2)] for j in range(10_000)])
    for i, mu in enumerate([1.5, 0.4]):
        se = counts[:, i].std(ddof=1) / 100.0
        assert abs(counts[:, i].mean() - mu * 2.0) <= 4 * se


def test_zero_baseline_empty():
    spec = poisson([0.0])
    assert all(not simulate(spec, path_rng(0, j)).events for j in range(50))


def test_inhomogeneous_poisson_mean():
    base = PiecewiseLinearBaseline(((0.0, 0.2), (1.0, 2.0), (3.0, 0.5)))
    spec = ScenarioSpec(1, 3.0, (base,), DKernel.zero(1, True), DKernel.counting(1), (EXP1,))
    n = np.array([len(simulate(spec, path_rng(5, j)).events) for j in range(10_000)])
    assert abs(n.mean() - base.integral(0.0, 3.0)) <= 4 * n.std(ddof=1) / 100.0


def test_first_arrival_exponential_ks():
    mu, T = 1.2, 2.0
    spec = poisson([mu], T=T)
    first = [p.times[0] for p in (simulate(spec, path_rng(11, j)) for j in range(10_000)) if p.events]
    cdf = lambda x: (1.0 - np.exp(-mu * x)) / (1.0 - math.exp(-mu * T))
    assert stats.kstest(first, cdf).pvalue > 0.01


def test_arrival_times_uniform_given_count():
    spec = poisson([2.0], T=3.0)
    u = np.concatenate([simulate(spec, path_rng(12, j)).times / 3.0 for j in range(5000)])
    assert stats.kstest(u, "uniform").pvalue > 0.01


def test_hawkes_mean_against_closed_form():
    # E[H_5] for (alpha, beta, mu) = (1, 2, 1): 2 T - (1 - e^{-T})
    spec = hawkes()
    n = np.array([len(simulate(spec, path_rng(21, j)).events) for j in range(20_000)])
    ref = 10.0 - (1.0 - math.exp(-5.0))
    assert abs(n.mean() - ref) <= 4 * n.std(ddof=1) / math.sqrt(n.size)


def test_power_law_path_replays():
    phi = DKernel(((Separable(PowerLaw(0.5, 2.5)),),), True)
    spec = ScenarioSpec(1, 3.0, (ConstantBaseline(1.0),), phi, DKernel.counting(1), (EXP1,))
    p = simulate(spec, path_rng(0, 0), record_theta=True)
    idx, seen = replay(spec, [(e.component, e.time, th, e.mark) for e, th in zip(p.events, p.thetas)])
    assert idx == list(range(len(p.events)))


def test_evaluate_mspd_examples():
    spec = poisson([1.0, 1.0])
    empty = Path(spec, ())
    assert evaluate_mspd(empty, DKernel.counting(2), 0) == 0.0
    p = Path(spec, (EventRecord(0, 0.5, 2.0), EventRecord(1, 0.7, 9.0), EventRecord(0, 1.2, 3.5)))
    assert evaluate_mspd(p, DKernel.counting(2), 0) == 2.0
    assert evaluate_mspd(p, DKernel.counting(2), 0, 1.0) == 1.0
    assert evaluate_mspd(p, DKernel.loss(2), 0) == 5.5


def test_reproducible_and_independent_of_order():
    spec = hawkes()
    a = [simulate(spec, path_rng(99, j)).events for j in range(20)]
    b = [simulate(spec, path_rng(99, j)).events for j in reversed(range(20))][::-1]
    assert a == b
    assert simulate(spec, path_rng(99, 0)).events != simulate(spec, path_rng(100, 0)).events


def test_events_in_horizon_and_replay():
    phi = DKernel(((Separable(ExponentialDecay(0.5, 2.0), mk.Identity()), Separable(PowerLaw(0.3, 3.0))),
                   (Separable(ExponentialDecay(0.4, 1.0)), None)), True)
    spec = ScenarioSpec(2, 4.0, (ConstantBaseline(0.7), PiecewiseLinearBaseline(((0.0, 0.1), (4.0, 0.9)))),
                        phi, DKernel.counting(2), (EXP1, mk.LogNormal(0.0, 0.5)))
    for j in range(200):
        p = simulate(spec, path_rng(4, j), record_theta=True)
        assert np.all((p.times > 0) & (p.times <= 4.0))
        assert np.all(np.diff(p.times) >= 0)
        atoms = [(e.component, e.time, th, e.mark) for e, th in zip(p.events, p.thetas)]
        idx, _ = replay(spec, atoms)
        assert idx == list(range(len(atoms)))


def test_predictability_at_event_times():
    spec = hawkes(0.9, 1.5)
    p = simulate(spec, path_rng(8, 0))
    for m, e in enumerate(p.events):
        assert intensity_at(spec, p.events, 0, e.time) == intensity_at(spec, p.events[:m], 0, e.time)


def test_empty_stress_identical_to_simulate():
    spec = hawkes()
    for j in range(20):
        path, shifted = simulate_shifted(spec, StressScenario(), path_rng(1, j))
        assert path.events == simulate(spec, path_rng(1, j)).events
        assert shifted.value(DKernel.counting(1), 0) == len(path.events)


def test_stress_without_excitation_adds_payoff_only():
    # the compensated path is still Poisson(mu) and the injected payoff is added on top
    spec = poisson([1.0], T=3.0, laws=(EXP1,))
    stress = StressScenario(((0, 1.0, 2.5),))
    vals, counts = [], []
    for j in range(10_000):
        path, shifted = simulate_shifted(spec, stress, path_rng(2, j))
        v = shifted.value(DKernel.loss(1), 0)
        assert v == pytest.approx(shifted.compensated(DKernel.loss(1), 0) + 2.5, rel=1e-15)
        assert shifted.intensity(0, 2.0) == 1.0
        vals.append(v)
        counts.append(len(path.events))
    vals, counts = np.array(vals), np.array(counts)
    assert abs(counts.mean() - 3.0) <= 4 * counts.std(ddof=1) / 100.0
    assert abs(vals.mean() - 5.5) <= 4 * vals.std(ddof=1) / 100.0


def test_stress_validation():
    spec = hawkes(T=2.0)
    with pytest.raises(ValidationError):
        StressScenario(((0, 1.0, 1.0), (0, 0.5, 1.0)))
    with pytest.raises(ValidationError):
        simulate_shifted(spec, StressScenario(((0, 3.0, 1.0),)), path_rng(0, 0))
    with pytest.raises(ValidationError):
        simulate_shifted(spec, StressScenario(((1, 1.0, 1.0),)), path_rng(0, 0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32), st.floats(0.1, 1.9), st.floats(0.0, 3.0))
def test_shift_monotone_under_coupling(seed, t1, y1):
    # same driving atoms: injecting a point can only add accepted atoms and raise intensities
    spec = hawkes(0.7, 1.5, mu=0.8, T=2.0, mod=mk.Identity())
    atoms = sample_configuration(spec, np.random.default_rng(seed), theta_cap=4.0)
    stress = StressScenario(((0, t1, y1),))
    idx0, lam0 = replay(spec, atoms)
    idx1, lam1 = replay(spec, atoms, stress)
    assert set(idx0) <= set(idx1)
    assert all(b >= a for a, b in zip(lam0, lam1))


def test_explosion_guard():
    with pytest.raises(ExplosionGuard):
        simulate(hawkes(mu=50.0), path_rng(0, 0), max_events=10)


def test_ties_kept():
    spec = hawkes()
    h = [EventRecord(0, 1.0, 1.0), EventRecord(0, 1.0, 1.0)]
    assert intensity_at(spec, h, 0, 1.5) == pytest.approx(1.0 + 2 * math.exp(-1.0))
