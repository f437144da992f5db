import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fluidsched.distributions import (Deterministic, Exponential, Normal, PointMassAtZero,
                                      Uniform)
from fluidsched.fluid import (Costs, Discretization, FluidProblem, Grid, fluid_objective,
                              zu_control)
from fluidsched.scheduling import Schedule, extract_schedule
from fluidsched.simulation import (Draws, fluid_scaled_gap, nth_system, outcome, sample_path,
                                   simulate_draws, simulate_many, simulate_once, t_half_width)

COSTS = Costs(0.0, 1.0, 50.0, 75.0)


def test_empty_schedule():
    o = simulate_once(Schedule(np.zeros(0)), Normal(0, 0.1), Exponential(100), COSTS, 0)
    assert o.objective == -50 and o.idle == 1.0 and o.admitted == 0


def test_punctual_deterministic_patients():
    P = 100
    s = Schedule(np.arange(P) / P)
    o = simulate_once(s, PointMassAtZero(), Deterministic(1 / P), COSTS, 0)
    assert o.wait_integral == pytest.approx(1.0)
    assert o.idle == pytest.approx(0.0, abs=1e-12)
    assert o.overtime == pytest.approx(0.0, abs=1e-12)
    assert o.objective == pytest.approx(-1.0)


def test_early_patient_waits_from_opening():
    d = Draws(np.array([0.5]), np.array([0.2]))
    o = simulate_draws(Schedule(np.array([0.5])), Uniform(-1.0 - 1e-12, 0.0), d, COSTS)
    # quantile 0.5 of U(-1, 0) is -0.5: the patient is there at -0 and waits for service only
    assert o.wait_integral == pytest.approx(0.2)
    assert o.idle == pytest.approx(0.8)
    assert o.overtime == 0


def test_late_arrival_rejected():
    d = Draws(np.array([0.99]), np.array([0.1]))
    o = simulate_draws(Schedule(np.array([0.95])), Uniform(0.0, 0.2), d,
                       Costs(1.0, 1.0, 50, 75))
    assert o.admitted == 0 and o.objective == -50


def test_objective_formula():
    costs = Costs(1.3, 2.0, 50, 75)
    s = Schedule(np.linspace(0, 1, 120))
    o = simulate_once(s, Normal(-0.02, 0.05), Exponential(100), costs, 3)
    assert o.objective == costs.r * o.admitted - costs.c_w * o.wait_integral \
        - costs.c_i * o.idle - costs.c_o * o.overtime


def test_degenerate_randomness_has_zero_sd():
    rep = simulate_many(Schedule(np.linspace(0, 1, 10)), PointMassAtZero(), Deterministic(0.05),
                        COSTS, 2, 0)
    assert rep.sd == 0


def test_replications_deterministic():
    args = (Schedule(np.linspace(0, 1, 50)), Normal(0, 0.1), Exponential(60), COSTS, 20, 11)
    r1, r2 = simulate_many(*args), simulate_many(*args)
    assert r1.outcomes == r2.outcomes and r1.seeds == r2.seeds


def test_report_statistics_and_csv(tmp_path):
    rep = simulate_many(Schedule(np.linspace(0, 1, 40)), Normal(0, 0.1), Exponential(40),
                        COSTS, 30, 5)
    x = rep.column("objective")
    assert rep.mean == np.mean(x)
    assert rep.half_width == pytest.approx(2.045229642132703 * np.std(x, ddof=1) / np.sqrt(30))
    path = tmp_path / "r.csv"
    rep.write_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["rep", "admitted", "wait_integral", "idle", "overtime",
                             "objective", "seed"]
    assert np.mean([float(r["objective"]) for r in rows]) == rep.mean
    assert rows[3]["seed"] == "5/3"


def test_t_half_width_needs_two():
    with pytest.raises(ValueError):
        t_half_width([1.0])


def _queue_integral(path):
    """Integrate Q(t) over [0, inf) from the event list."""
    ready = np.maximum(path.arrivals, 0.0)
    times = np.concatenate((ready, path.completions))
    jumps = np.concatenate((np.ones(ready.size), -np.ones(ready.size)))
    order = np.argsort(times, kind="stable")
    t, q = times[order], np.cumsum(jumps[order])
    # Q is constant between consecutive events; trapezoid over doubled breakpoints
    tt = np.repeat(t, 2)[1:]
    qq = np.repeat(q, 2)[:-1]
    return float(np.trapezoid(qq, tt))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 80), st.integers(0, 2 ** 31), st.sampled_from(["exp", "det"]))
def test_sample_path_invariants(m, seed, kind):
    rng = np.random.default_rng(seed)
    s = Schedule(np.sort(rng.random(m)))
    svc = Exponential(max(m, 1)) if kind == "exp" else Deterministic(1 / max(m, 1))
    unp = Normal(-0.05, 0.1)
    d = Draws(rng.random(m), np.asarray(svc.sample(rng, m), dtype=float))
    path = sample_path(s, unp, d)
    o = outcome(path, COSTS)
    assert o.admitted <= m
    assert np.all(path.arrivals <= s.horizon)
    assert o.wait_integral >= 0 and 0 <= o.idle <= s.horizon and o.overtime >= 0
    nu = d.services[:o.admitted]
    ready = np.maximum(path.arrivals, 0.0)
    assert np.all(path.completions >= ready + nu - 1e-12)
    # FIFO: completions follow arrival order, and the server never overlaps itself
    assert np.all(np.diff(path.completions) >= 0)
    assert np.all(path.starts[1:] >= path.completions[:-1] - 1e-12)
    if o.admitted:
        assert o.wait_integral == pytest.approx(_queue_integral(path), abs=1e-9)
        busy = np.sum(np.minimum(path.completions, 1) - np.minimum(path.starts, 1))
        assert o.idle == pytest.approx(1 - busy, abs=1e-12)


def test_wait_integral_matches_fine_time_stepping():
    rng = np.random.default_rng(4)
    s = Schedule(np.sort(rng.random(30)))
    d = Draws(rng.random(30), rng.exponential(1 / 30, 30))
    path = sample_path(s, Normal(0, 0.05), d)
    o = outcome(path, COSTS)
    t = np.linspace(0, path.completions[-1], 2_000_001)
    Q = (np.searchsorted(np.sort(np.maximum(path.arrivals, 0)), t, side="right")
         - np.searchsorted(path.completions, t, side="right"))
    assert o.wait_integral == pytest.approx(np.trapezoid(Q, t), abs=1e-4)


def _arrival_distance(problem, control, grid, n, seed):
    s, _, _ = nth_system(problem, control, grid, n)
    rng = np.random.default_rng(seed)
    arrivals = np.sort(s.times + problem.unpunctuality.sample(s.times, rng))
    H = Discretization(problem, grid).arrivals(control)
    E = np.searchsorted(arrivals, grid.nodes, side="right") / n
    return np.max(np.abs(E - H)) / H[-1]


def test_arrival_fluid_limit():
    p = FluidProblem(100, 1.0, COSTS, Normal(-0.05, 0.1))
    g = Grid(500)
    a = zu_control(p, g)
    d = {n: np.mean([_arrival_distance(p, a, g, n, s) for s in range(5)]) for n in (25, 100, 400)}
    assert d[400] <= 0.05
    assert d[25] > d[100] > d[400]


def test_punctual_uniform_rate_close_to_fluid_value():
    p = FluidProblem(100, 1.0, Costs(1.2, 1.0, 50, 75), PointMassAtZero())
    g = Grid(1000)
    a = zu_control(p, g)
    res = fluid_scaled_gap(p, a, g, 400, 200, seed=0)
    assert res.scaled_mean == pytest.approx(res.reference, rel=0.02)


def test_gap_at_unit_scale_is_noise():
    p = FluidProblem(100, 1.0, COSTS, PointMassAtZero())
    g = Grid(1000)
    a = zu_control(p, g)
    res = fluid_scaled_gap(p, a, g, 1, 200, seed=1)
    assert res.reference == pytest.approx(0.0, abs=0.01)
    hw = res.report.half_width
    # exponential service at full load: the balanced schedule pays for its queue
    assert res.scaled_mean < 0
    assert hw > 0
    assert res.normalized == res.gap


def test_nth_system_scales_capacity_and_costs():
    p = FluidProblem(100, 1.0, COSTS, Normal(0, 0.1))
    g = Grid(100)
    a = zu_control(p, g)
    s, svc, costs = nth_system(p, a, g, 4, service="deterministic")
    assert s.m == int(4 * a.sum() + 1e-9)
    assert svc.mean == pytest.approx(1 / 400)
    assert costs.c_i == 200 and costs.c_o == 300
    assert extract_schedule(a, g, 4).times.tolist() == s.times.tolist()


def test_fluid_objective_reference_default():
    p = FluidProblem(100, 1.0, COSTS, Normal(-0.05, 0.1))
    g = Grid(200)
    a = zu_control(p, g)
    res = fluid_scaled_gap(p, a, g, 2, 5, seed=0)
    assert res.reference == fluid_objective(Discretization(p, g), a)
