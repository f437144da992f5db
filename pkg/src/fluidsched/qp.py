"""Discretized fluid control problem as a convex QP.

Decision vector layout (``n = 3K + 2``)::

    x = (a_0 .. a_{K-1},  q_0 .. q_K,  dI_0 .. dI_K)

Equality rows (``K + 2``)::

    q_0 - sum_i F(-t_i, t_i) a_i                      = 0
    dI_0                                              = 0
    q_k - q_{k-1} - mu dI_k - sum_i D[k-1, i] a_i     = -mu T / K,   k = 1..K

with ``x >= 0``.  The Lindley max is not imposed; both q and dI carry
positive cost, so the optimum sits on the reflected path anyway and the
complementarity is checked after the fact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .admm import AdmmSettings, SolverError, solve_qp
from .fluid import Discretization, FluidPath, FluidProblem, Grid, evaluate, lindley_path

log = logging.getLogger(__name__)


class AccuracyError(SolverError):
    """A recovered control is too far from feasible to trust."""


@dataclass
class QpInstance:
    disc: Discretization
    p: np.ndarray
    c: np.ndarray
    E: np.ndarray
    b: np.ndarray

    @property
    def K(self) -> int:
        return self.disc.grid.K

    @property
    def n_variables(self) -> int:
        return self.E.shape[1]

    @property
    def n_equalities(self) -> int:
        return self.E.shape[0]

    def split(self, x):
        K = self.K
        return x[:K], x[K:2 * K + 1], x[2 * K + 1:]

    def value(self, x) -> float:
        """Fluid objective (maximization sense) at a decision vector."""
        return -float(0.5 * np.dot(self.p * x, x) + np.dot(self.c, x))

    def dump(self, path) -> None:
        """Write the instance as tagged sparse triplets.

        Lines are ``P row col value``, ``c row 0 value``, ``E row col value``
        and ``b row 0 value`` (zero-based, minimization sense, x >= 0).
        """
        with open(path, "w") as fh:
            fh.write(f"# n={self.n_variables} m={self.n_equalities} minimize 1/2 x'Px + c'x "
                     f"s.t. Ex = b, x >= 0\n")
            for j in np.flatnonzero(self.p):
                fh.write(f"P {j} {j} {float(self.p[j])!r}\n")
            for j in np.flatnonzero(self.c):
                fh.write(f"c {j} 0 {float(self.c[j])!r}\n")
            rows, cols = np.nonzero(self.E)
            for i, j in zip(rows, cols):
                fh.write(f"E {i} {j} {float(self.E[i, j])!r}\n")
            for i in np.flatnonzero(self.b):
                fh.write(f"b {i} 0 {float(self.b[i])!r}\n")


def assemble_qp(problem: FluidProblem, grid: Grid,
                disc: Discretization | None = None) -> QpInstance:
    disc = disc or Discretization(problem, grid)
    K, mu, dt = grid.K, problem.mu, grid.step
    c = problem.costs
    n = 3 * K + 2
    ia, iq, idl = 0, K, 2 * K + 1

    E = np.zeros((K + 2, n))
    b = np.zeros(K + 2)
    E[0, iq] = 1.0
    E[0, ia:ia + K] = -disc.node_cdf[0]
    E[1, idl] = 1.0
    rows = np.arange(2, K + 2)
    k = np.arange(1, K + 1)
    E[rows, iq + k] = 1.0
    E[rows, iq + k - 1] = -1.0
    E[rows, idl + k] = -mu
    E[2:, ia:ia + K] = -disc.increments
    b[2:] = -mu * dt

    p = np.zeros(n)
    p[iq + K] = c.c_w / mu
    lin = np.zeros(n)
    lin[ia:ia + K] = -c.r * disc.node_cdf[-1]
    lin[iq:iq + K] = c.c_w * dt
    lin[iq + K] = c.c_o / mu
    lin[idl + 1:] = c.c_i
    return QpInstance(disc, p, lin, E, b)


@dataclass
class QpSolution:
    x: np.ndarray
    value: float
    primal_residual: float
    dual_residual: float
    iterations: int
    polished: bool
    instance: QpInstance
    warm_state: tuple | None = None

    @property
    def control(self) -> np.ndarray:
        return self.x[:self.instance.K]

    @property
    def queue(self) -> np.ndarray:
        return self.instance.split(self.x)[1]

    @property
    def idle_increments(self) -> np.ndarray:
        return self.instance.split(self.x)[2]


def _restorer(instance: QpInstance):
    """Map any vector to the feasible point its control induces.

    The queue and idle parts come from the Lindley recursion, so the point
    satisfies the equalities exactly.  The free mask holds the positive
    entries plus, for each balance row, whichever of q_k and dI_k is needed
    to keep the free columns of full row rank.
    """
    disc, K = instance.disc, instance.K
    mu = disc.problem.mu

    def restore(z):
        a = np.maximum(np.asarray(z[:K], dtype=float), 0.0)
        path = lindley_path(disc.grid, disc.arrivals(a), mu)
        x = np.concatenate((a, path.q, path.dI))
        free = x > 0
        free[K] = True
        free[2 * K + 1] = True
        q_free, i_free = free[K + 1:2 * K + 1], free[2 * K + 2:]
        q_free |= ~i_free
        return x, free

    return restore


def prolong(a, K: int) -> np.ndarray:
    """Embed a control on a grid of K/m cells into the K-cell grid.

    Coarse node i coincides with fine node m*i, so the arrival curve is
    unchanged.
    """
    a = np.asarray(a, dtype=float)
    if K % a.size:
        raise ValueError(f"cannot embed a {a.size}-cell control into {K} cells")
    out = np.zeros(K)
    out[::K // a.size] = a
    return out


def solve(instance: QpInstance, tol_primal: float = 1e-8, tol_dual: float = 1e-8,
          max_iter: int = 200_000, warm_start: QpSolution | None = None,
          settings: AdmmSettings | None = None, coarse_min: int = 100) -> QpSolution:
    """Solve the assembled QP; raises :class:`SolverError` on failure.

    A warm start from a solution on a coarser grid (or the same grid) seeds
    the polishing stage.  Without one, an even ``K`` with ``K/2 >= coarse_min``
    is first solved at ``K/2`` and the result is embedded as the seed.
    """
    st = replace(settings) if settings is not None else AdmmSettings()
    st.tol_primal, st.tol_dual, st.max_iter = tol_primal, tol_dual, max_iter
    K = instance.K
    state, guess = None, None
    if warm_start is not None:
        if warm_start.x.shape == instance.c.shape:
            state = warm_start.warm_state
            guess = warm_start.x
        elif K % warm_start.instance.K == 0:
            guess = np.concatenate((prolong(warm_start.control, K),
                                    np.zeros(instance.n_variables - K)))
    elif coarse_min and K % 2 == 0 and K // 2 >= coarse_min:
        problem = instance.disc.problem
        coarse = solve(assemble_qp(problem, Grid(K // 2, problem.horizon)), tol_primal,
                       tol_dual, max_iter, settings=settings, coarse_min=coarse_min)
        guess = np.concatenate((prolong(coarse.control, K), np.zeros(instance.n_variables - K)))
    res = solve_qp(instance.p, instance.c, instance.E, instance.b, st, warm_start=state,
                   restore=_restorer(instance), guess=guess)
    if res.status == "primal_infeasible":
        raise SolverError("solver declared the QP infeasible, but a = 0 is always feasible",
                          res.trace)
    if res.status != "solved":
        raise SolverError(f"QP solve failed with status {res.status}", res.trace)
    log.info("QP K=%d solved in %d iterations (polished=%s, prim %.1e, dual %.1e)",
             K, res.iterations, res.polished, res.primal_residual, res.dual_residual)
    return QpSolution(res.x, instance.value(res.x), res.primal_residual, res.dual_residual,
                      res.iterations, res.polished, instance, res.state)


@dataclass
class RecoveredControl:
    a: np.ndarray
    path: FluidPath
    value: float
    drift: float


def recover_control(solution: QpSolution, grid: Grid | None = None) -> RecoveredControl:
    """Clamp tiny negatives, re-run the recursion, and compare objective values."""
    disc = solution.instance.disc
    grid = grid or disc.grid
    a = np.array(solution.control, dtype=float)
    worst = float(-a.min(initial=0.0))
    if worst > 1e-6:
        raise AccuracyError(f"recovered control has a negative entry of size {worst:.2e}")
    if worst > 1e-9:
        log.warning("clamping control entries down to -%.2e", worst)
    a = np.maximum(a, 0.0)
    fv = evaluate(disc, a)
    return RecoveredControl(a, fv.path, fv.value, abs(fv.value - solution.value))


def solve_problem(problem: FluidProblem, K: int, **kwargs) -> tuple[QpSolution, RecoveredControl]:
    """Assemble, solve and recover in one call."""
    grid = Grid(K, problem.horizon)
    sol = solve(assemble_qp(problem, grid), **kwargs)
    return sol, recover_control(sol)


__all__ = ["AccuracyError", "QpInstance", "QpSolution", "RecoveredControl", "SolverError",
           "assemble_qp", "lindley_path", "prolong", "recover_control", "solve", "solve_problem"]
