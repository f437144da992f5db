"""Discretized fluid model: arrival convolution, reflection, fluid objective.

A control is a vector of appointment mass per grid cell; mass ``a[k]`` is
booked at node ``t_k``.  The arrival curve at the nodes is a matrix-vector
product with the CDF table ``M[k, i] = F(t_k - t_i, t_i)``, built once per
(problem, grid) by :class:`Discretization` and shared with the QP assembly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .distributions import PointMassAtZero, Uniform, UnpunctualityModel


@dataclass(frozen=True)
class Costs:
    """Reward per admitted patient and the three linear cost rates."""

    r: float = 0.0
    c_w: float = 1.0
    c_i: float = 50.0
    c_o: float = 75.0

    def __post_init__(self):
        for name in ("r", "c_w", "c_i", "c_o"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"cost {name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class FluidProblem:
    mu: float
    horizon: float = 1.0
    costs: Costs = field(default_factory=Costs)
    unpunctuality: UnpunctualityModel = field(default_factory=PointMassAtZero)

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("service rate mu must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    def scaled(self, kappa: float) -> "FluidProblem":
        """Problem with capacity, idle and overtime rates multiplied by ``kappa``."""
        c = self.costs
        return replace(self, mu=kappa * self.mu,
                       costs=Costs(c.r, c.c_w, kappa * c.c_i, kappa * c.c_o))


@dataclass(frozen=True)
class Grid:
    K: int
    horizon: float = 1.0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("grid resolution K must be at least 2")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def step(self) -> float:
        return self.horizon / self.K

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.arange(self.K + 1) * self.horizon / self.K

    def cumulative(self, a) -> np.ndarray:
        """Profile A(t_k) = sum of mass booked strictly before t_k, k = 0..K."""
        a = self.check(a)
        return np.concatenate(([0.0], np.cumsum(a)))

    def check(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if a.shape != (self.K,):
            raise ValueError(f"control has shape {a.shape}, grid expects ({self.K},)")
        return a


@dataclass(frozen=True)
class FluidPath:
    """Arrival curve, queue and idle increments at the grid nodes.

    ``dI[0]`` is always zero; ``dI[k]`` is the idle time over (t_{k-1}, t_k].
    """

    H: np.ndarray
    q: np.ndarray
    dI: np.ndarray

    @property
    def idle(self) -> float:
        return float(self.dI.sum())


class Discretization:
    """CDF tables for one (problem, grid) pair."""

    def __init__(self, problem: FluidProblem, grid: Grid):
        if not math.isclose(problem.horizon, grid.horizon):
            raise ValueError("problem and grid horizons differ")
        self.problem = problem
        self.grid = grid

    @cached_property
    def node_cdf(self) -> np.ndarray:
        """``M[k, i] = F(t_k - t_i, t_i)`` with shape (K+1, K)."""
        t = self.grid.nodes
        s = t[:-1]
        return self.problem.unpunctuality.cdf(t[:, None] - s[None, :], s[None, :])

    @cached_property
    def increments(self) -> np.ndarray:
        """``D[k-1, i] = F(t_k - t_i, t_i) - F(t_{k-1} - t_i, t_i)`` for k = 1..K."""
        return np.diff(self.node_cdf, axis=0)

    def arrivals(self, a) -> np.ndarray:
        return self.node_cdf @ self.grid.check(a)


def convolve(problem: FluidProblem, grid: Grid, a, t) -> np.ndarray:
    """Discrete arrival curve ``sum_k a_k F(t - t_k, t_k)`` at arbitrary times."""
    a = grid.check(a)
    t = np.asarray(t, dtype=float)
    s = grid.nodes[:-1]
    F = problem.unpunctuality.cdf(t[..., None] - s, s)
    return F @ a


def _check_arrivals(H, K):
    H = np.asarray(H, dtype=float)
    if H.shape != (K + 1,):
        raise ValueError(f"arrival curve needs {K + 1} node values, got {H.shape}")
    if H[0] < 0:
        raise ValueError("arrival curve must start nonnegative")
    dH = np.diff(H)
    if np.any(dH < -1e-12 * max(1.0, float(np.max(np.abs(H))))):
        raise ValueError("arrival curve must be nondecreasing")
    return H, dH


def lindley_path(grid: Grid, H, mu: float) -> FluidPath:
    """Queue and idle increments by the discrete Lindley recursion."""
    H, dH = _check_arrivals(H, grid.K)
    cap = mu * grid.step
    q = np.empty(grid.K + 1)
    dI = np.zeros(grid.K + 1)
    q[0] = H[0]
    for k in range(1, grid.K + 1):
        s = q[k - 1] + dH[k - 1] - cap
        # one netflow value feeds both branches, so min(q, dI) == 0 exactly
        if s >= 0:
            q[k] = s
        else:
            q[k] = 0.0
            dI[k] = -s / mu
    return FluidPath(H, q, dI)


def skorokhod_discrete(grid: Grid, H, mu: float) -> FluidPath:
    """Same path as :func:`lindley_path`, via the running-sup regulator formula."""
    H, _ = _check_arrivals(H, grid.K)
    x = H - mu * grid.nodes
    y = np.maximum.accumulate(np.maximum(-x, 0.0))
    q = x + y
    idle = y / mu
    dI = np.concatenate(([0.0], np.diff(idle)))
    return FluidPath(H, q, dI)


@dataclass(frozen=True)
class FluidValue:
    value: float
    reward: float
    wait: float
    idle: float
    overtime: float
    path: FluidPath


def evaluate(disc: Discretization, a) -> FluidValue:
    """Discretized fluid objective and its components for control ``a``."""
    p, g = disc.problem, disc.grid
    c = p.costs
    H = disc.arrivals(a)
    path = lindley_path(g, H, p.mu)
    qK = path.q[-1]
    reward = c.r * H[-1]
    wait = c.c_w * (g.step * path.q[:-1].sum() + qK ** 2 / (2 * p.mu))
    idle = c.c_i * path.dI[1:].sum()
    overtime = c.c_o * qK / p.mu
    return FluidValue(reward - wait - idle - overtime, reward, wait, idle, overtime, path)


def fluid_objective(disc: Discretization, a) -> float:
    return evaluate(disc, a).value


@dataclass(frozen=True)
class ZeroUnpunctualityOptimum:
    """Closed-form optimum when patients are punctual.

    The optimal arrival curve is ``rate * t`` on [0, T) plus an atom of size
    ``atom`` at T.
    """

    rate: float
    atom: float
    value: float


def zu_optimal(problem: FluidProblem) -> ZeroUnpunctualityOptimum:
    """Punctual-patient optimum; its value bounds every fluid objective from above."""
    mu, T, c = problem.mu, problem.horizon, problem.costs
    excess = max(c.r - c.c_o / mu, 0.0)
    if excess > 0 and c.c_w == 0:
        raise ValueError("unbounded: positive net reward with zero waiting cost")
    atom = mu * excess / c.c_w if excess > 0 else 0.0
    # rate mu on [0, T) earns r per unit at no cost; the atom u at T earns
    # (r - c_o/mu) u - c_w u^2 / (2 mu), maximized at u = mu * excess / c_w
    value = c.r * mu * T + (mu * excess ** 2 / (2 * c.c_w) if excess > 0 else 0.0)
    return ZeroUnpunctualityOptimum(mu, atom, value)


def zu_control(problem: FluidProblem, grid: Grid) -> np.ndarray:
    """Grid control for the punctual optimum: uniform rate plus terminal mass.

    Cell k carries the mass served over (t_k, t_{k+1}]; the atom at T lands in
    the last cell.
    """
    opt = zu_optimal(problem)
    a = np.full(grid.K, opt.rate * grid.step)
    a[0] = 0.0
    a[-1] += opt.rate * grid.step + opt.atom
    return a


def uniform_block_control(early: float, late: float, problem: FluidProblem,
                          grid: Grid) -> np.ndarray:
    """Block bookings that turn Uniform(-early, late) arrivals into rate ``mu``.

    Blocks of mass ``mu * (early + late)`` sit at ``early``, ``2 early + late``,
    ... and are snapped to the nearest grid node.
    """
    if not (early > 0 and late > 0):
        raise ValueError("block construction needs early, late > 0")
    unp = problem.unpunctuality
    if not (isinstance(unp, Uniform) and math.isclose(unp.lo, -early)
            and math.isclose(unp.hi, late)):
        raise ValueError("block construction needs Uniform(-early, late) unpunctuality")
    T, w = problem.horizon, early + late
    if w > T * (1 + 1e-12):
        raise ValueError("no block fits: early + late exceeds the horizon")
    n = 1
    while T - (n * early + (n - 1) * late) >= w * (1 - 1e-12):
        n += 1
    a = np.zeros(grid.K)
    for j in range(1, n + 1):
        s = j * early + (j - 1) * late
        k = min(int(round(s / grid.step)), grid.K - 1)
        a[k] += problem.mu * w
    return a
