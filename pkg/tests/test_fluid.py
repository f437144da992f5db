import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fluidsched.distributions import (Empirical, GeneralizedLaplace, MiddaySplit, Normal,
                                      PointMassAtZero, Uniform)
from fluidsched.fluid import (Costs, Discretization, FluidProblem, Grid, convolve, evaluate,
                              fluid_objective, lindley_path, skorokhod_discrete,
                              uniform_block_control, zu_control, zu_optimal)
from fluidsched.scenarios import laplace_drift, normal_drift

COSTS = Costs(r=0.0, c_w=1.0, c_i=50.0, c_o=75.0)
VARIANTS = [PointMassAtZero(), Uniform(-0.1, 0.1), Normal(-0.05, 0.1),
            GeneralizedLaplace(-0.1211, 0.35, 45, 22.5),
            MiddaySplit(Normal(0, 0.2), Normal(-0.1, 0.05)), normal_drift(), laplace_drift(),
            Empirical([-0.15, -0.02, 0.0, 0.04, 0.2])]


def test_grid_nodes():
    g = Grid(4, 2.0)
    assert np.array_equal(g.nodes, [0, 0.5, 1.0, 1.5, 2.0])
    with pytest.raises(ValueError):
        Grid(1)


def test_convolve_point_mass():
    g = Grid(10)
    a = np.zeros(10)
    a[0] = 1.0
    p = FluidProblem(100, 1.0, COSTS, PointMassAtZero())
    assert np.array_equal(convolve(p, g, a, [-0.5, -1e-9, 0.0, 0.3, 1.0]), [0, 0, 1, 1, 1])


def test_convolve_zero_control():
    g = Grid(10)
    p = FluidProblem(100, 1.0, COSTS, Normal(0, 0.1))
    assert np.all(convolve(p, g, np.zeros(10), np.linspace(-1, 2, 7)) == 0)


def test_convolve_length_mismatch():
    p = FluidProblem(100)
    with pytest.raises(ValueError):
        convolve(p, Grid(10), np.zeros(9), 0.5)


def test_block_control_gives_balanced_arrivals():
    p = FluidProblem(100, 1.0, COSTS, Uniform(-0.1, 0.1))
    g = Grid(1000)
    a = uniform_block_control(0.1, 0.1, p, g)
    H = Discretization(p, g).arrivals(a)
    assert np.allclose(H, 100 * g.nodes, atol=1e-9)


def test_lindley_hand_example():
    path = lindley_path(Grid(2), [1.0, 1.0, 1.0], mu=1.0)
    assert np.array_equal(path.q, [1.0, 0.5, 0.0])
    assert np.array_equal(path.dI, [0, 0, 0])


def test_lindley_empty_system_all_idle():
    g = Grid(5, 2.0)
    path = lindley_path(g, np.zeros(6), mu=3.0)
    assert np.all(path.q == 0)
    assert np.allclose(path.dI[1:], 0.4)
    assert path.dI[0] == 0


def test_lindley_balanced():
    g = Grid(8)
    path = lindley_path(g, 100 * g.nodes, mu=100)
    assert np.allclose(path.q, 0, atol=1e-12)
    assert np.allclose(path.dI, 0, atol=1e-12)


def test_lindley_rejects_decreasing_arrivals():
    with pytest.raises(ValueError):
        lindley_path(Grid(2), [1.0, 0.5, 1.0], 1.0)


def test_skorokhod_empty_system():
    path = skorokhod_discrete(Grid(4), np.zeros(5), 1.0)
    assert path.idle == pytest.approx(1.0)
    assert path.q[-1] == 0


def test_skorokhod_hand_example():
    path = skorokhod_discrete(Grid(2), [1.0, 1.0, 1.0], 1.0)
    assert path.q[2] == 0.0


@pytest.mark.parametrize("model", VARIANTS, ids=lambda m: type(m).__name__)
def test_lindley_matches_skorokhod_on_random_controls(model):
    rng = np.random.default_rng(7)
    for _ in range(125):
        K = int(rng.integers(2, 60))
        g = Grid(K)
        # sparse blocks or dense mass, scaled around capacity
        a = rng.exponential(size=K) * (rng.random(K) < rng.uniform(0.1, 1.0))
        a *= rng.uniform(0.2, 2.0) * 100 / max(a.sum(), 1e-12)
        disc = Discretization(FluidProblem(100, 1.0, COSTS, model), g)
        H = disc.arrivals(a)
        p1, p2 = lindley_path(g, H, 100), skorokhod_discrete(g, H, 100)
        scale = max(1.0, H.max())
        assert np.max(np.abs(p1.q - p2.q)) <= 1e-12 * scale
        assert np.max(np.abs(p1.dI - p2.dI)) <= 1e-12 * scale
        # the recursion branches on one netflow, so one of the pair is exactly 0
        assert np.all(np.minimum(p1.q[1:], p1.dI[1:]) == 0)


def _reflect(x):
    y = np.maximum.accumulate(np.maximum(-x, 0.0))
    return x + y, y


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=40), st.floats(-1, 1),
       st.integers(0, 2 ** 31))
def test_reflection_lipschitz(x, shift, seed):
    x1 = np.array(x)
    x2 = x1 + shift * np.random.default_rng(seed).random(x1.size)
    q1, y1 = _reflect(x1)
    q2, y2 = _reflect(x2)
    d = np.max(np.abs(x1 - x2))
    assert np.max(np.abs(y1 - y2)) <= d + 1e-12
    assert np.max(np.abs(q1 - q2)) <= 2 * d + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=2, max_size=30), st.floats(1, 200))
def test_lindley_equals_skorokhod_property(increments, mu):
    H = np.concatenate(([0.0], np.cumsum(increments)))
    g = Grid(len(increments))
    p1, p2 = lindley_path(g, H, mu), skorokhod_discrete(g, H, mu)
    scale = max(1.0, H.max())
    assert np.allclose(p1.q, p2.q, atol=1e-12 * scale, rtol=0)
    assert np.allclose(p1.dI, p2.dI, atol=1e-12 * scale, rtol=0)
    assert np.all(p1.q >= 0) and np.all(p1.dI >= 0)


def test_objective_empty_schedule():
    p = FluidProblem(100, 1.0, COSTS, Normal(-0.05, 0.1))
    g = Grid(50)
    assert fluid_objective(Discretization(p, g), np.zeros(50)) == pytest.approx(-50.0)


def test_objective_balanced_zero():
    p = FluidProblem(100, 1.0, COSTS, PointMassAtZero())
    g = Grid(200)
    # one cell of lost service at the start costs O(1/K)
    v = fluid_objective(Discretization(p, g), zu_control(p, g))
    assert v == pytest.approx(0.0, abs=1.0 / 200)


def test_objective_components_sum():
    p = FluidProblem(100, 1.0, Costs(1.0, 1.0, 50, 75), Normal(-0.05, 0.1))
    g = Grid(40)
    a = np.random.default_rng(0).random(40) * 5
    v = evaluate(Discretization(p, g), a)
    assert v.value == pytest.approx(v.reward - v.wait - v.idle - v.overtime)


@pytest.mark.parametrize("K", [250, 1000, 4000])
def test_zu_control_approaches_closed_form(K):
    p = FluidProblem(100, 1.0, Costs(1.2, 1.0, 50, 75), PointMassAtZero())
    g = Grid(K)
    v = fluid_objective(Discretization(p, g), zu_control(p, g))
    # the terminal atom books one cell early: O(1/K) from the closed form
    assert v == pytest.approx(zu_optimal(p).value, abs=60.0 / K)


def test_zu_optimal_no_reward():
    opt = zu_optimal(FluidProblem(100, 1.0, COSTS))
    assert opt.value == 0 and opt.atom == 0


def test_zu_optimal_with_reward():
    opt = zu_optimal(FluidProblem(100, 1.0, Costs(1.2, 1.0, 50, 75)))
    assert opt.atom == pytest.approx(45.0)
    # the atom adds (r - c_o/mu) u - c_w u^2/(2 mu) = 10.125 on top of r mu T
    assert opt.value == pytest.approx(130.125)


def test_zu_optimal_boundary():
    opt = zu_optimal(FluidProblem(100, 1.0, Costs(0.75, 1.0, 50, 75)))
    assert opt.atom == 0 and opt.value == pytest.approx(75.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from(range(len(VARIANTS))),
       st.floats(0, 2.0))
def test_objective_bounded_by_zero_unpunctuality_value(seed, which, r):
    rng = np.random.default_rng(seed)
    K = 40
    p = FluidProblem(100, 1.0, Costs(r, 1.0, 50, 75), VARIANTS[which])
    a = rng.exponential(size=K) * rng.uniform(0.5, 4.0)
    v = fluid_objective(Discretization(p, Grid(K)), a)
    assert v <= zu_optimal(p).value + 1e-6


@pytest.mark.parametrize("early,late,n,times,mass", [
    (0.1, 0.1, 5, [0.1, 0.3, 0.5, 0.7, 0.9], 20.0),
    (0.25, 0.25, 2, [0.25, 0.75], 50.0),
    (0.5, 0.5, 1, [0.5], 100.0),
])
def test_uniform_block_control(early, late, n, times, mass):
    p = FluidProblem(100, 1.0, COSTS, Uniform(-early, late))
    g = Grid(1000)
    a = uniform_block_control(early, late, p, g)
    idx = np.flatnonzero(a)
    assert idx.size == n
    assert np.allclose(g.nodes[idx], times)
    assert np.allclose(a[idx], mass)


def test_uniform_block_value_is_zero():
    p = FluidProblem(100, 1.0, COSTS, Uniform(-0.1, 0.1))
    g = Grid(1000)
    assert fluid_objective(Discretization(p, g), uniform_block_control(0.1, 0.1, p, g)) \
        == pytest.approx(0.0, abs=1e-6)


def test_uniform_block_too_wide():
    p = FluidProblem(100, 1.0, COSTS, Uniform(-0.6, 0.6))
    with pytest.raises(ValueError):
        uniform_block_control(0.6, 0.6, p, Grid(100))


def test_problem_scaling():
    p = FluidProblem(100, 1.0, COSTS, Normal(0, 0.1)).scaled(2)
    assert p.mu == 200 and p.costs.c_i == 100 and p.costs.c_o == 150 and p.costs.c_w == 1
