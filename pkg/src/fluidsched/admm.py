"""Operator-splitting solver for equality-constrained, nonnegative convex QPs.

Solves::

    minimize    1/2 x' diag(p) x + c' x
    subject to  E x = b,  x >= 0

by ADMM on the splitting ``x = z``, ``z >= 0``, with the equality block kept
exact inside the x-update (a Schur complement of size ``rows(E)``).  Problem
data are Ruiz-equilibrated, the penalty is adapted by residual balancing,
and a polishing pass solves the reduced KKT system on the guessed active set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import activeset

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Raised when the solver cannot certify a solution."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class AdmmSettings:
    tol_primal: float = 1e-8
    tol_dual: float = 1e-8
    max_iter: int = 200_000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adapt_every: int = 50
    adapt_tolerance: float = 5.0
    check_every: int = 25
    scaling_iters: int = 15
    polish: bool = True
    polish_every: int = 100
    polish_trigger: float = 1e-3
    polish_forced: int = 500
    polish_delta: float = 1e-6
    polish_refine: int = 10
    infeasibility_tol: float = 1e-6
    anderson_memory: int = 10
    anderson_reg: float = 1e-10


@dataclass
class AdmmResult:
    x: np.ndarray
    nu: np.ndarray
    w: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    polished: bool
    objective: float
    trace: list = field(default_factory=list)
    # scaled iterates, for warm starts
    state: tuple | None = None


def _ruiz(p, E, iters):
    """Diagonal equilibration of the KKT matrix [[P, E'], [E, 0]]."""
    n = E.shape[1]
    m = E.shape[0]
    D = np.ones(n)
    R = np.ones(m)
    Es = E.copy()
    ps = p.copy()
    absE = np.abs(Es)
    for _ in range(iters):
        col = np.maximum(absE.max(axis=0), np.abs(ps))
        row = absE.max(axis=1)
        col = np.where(col < 1e-4, 1.0, np.minimum(col, 1e4))
        row = np.where(row < 1e-4, 1.0, np.minimum(row, 1e4))
        dc = 1.0 / np.sqrt(col)
        dr = 1.0 / np.sqrt(row)
        D *= dc
        R *= dr
        Es *= dr[:, None]
        Es *= dc[None, :]
        absE = np.abs(Es)
        ps *= dc * dc
    return D, R, Es, ps


class _Workspace:
    """Scaled data plus a factorization of the x-update Schur complement."""

    def __init__(self, p, c, E, b, settings: AdmmSettings):
        self.settings = settings
        D, R, Es, ps = _ruiz(p, E, settings.scaling_iters)
        cs = D * c
        scale = max(float(np.abs(ps).max(initial=0.0)), float(np.abs(cs).max(initial=0.0)))
        cost = 1.0 / min(max(scale, 1e-4), 1e4)
        self.D, self.R, self.cost = D, R, cost
        self.E = Es
        self.p = ps * cost
        self.c = cs * cost
        self.b = R * b
        self.G = Es @ Es.T
        self.curved = np.flatnonzero(self.p)
        self.rho = settings.rho
        self._factor()

    def _factor(self):
        s = self.settings.sigma + self.rho
        S = self.G / s
        for j in self.curved:
            e = self.E[:, j]
            S += (1.0 / (self.p[j] + s) - 1.0 / s) * np.outer(e, e)
        self.d = self.p + s
        self.chol = sla.cho_factor(S, lower=True, check_finite=False)

    def set_rho(self, rho):
        self.rho = rho
        self._factor()

    def x_update(self, rhs):
        nu = sla.cho_solve(self.chol, self.E @ (rhs / self.d) - self.b, check_finite=False)
        return (rhs - self.E.T @ nu) / self.d, nu

    # --- unscaling -------------------------------------------------------
    def unscale(self, x, nu, w):
        return self.D * x, self.R * nu / self.cost, w / self.D / self.cost


def _residuals(p, c, E, b, x, z, nu, w):
    """Unscaled primal/dual residuals and their normalizers."""
    Ex = E @ x
    prim = max(float(np.abs(Ex - b).max(initial=0.0)), float(np.abs(x - z).max(initial=0.0)))
    Px = p * x
    Etnu = E.T @ nu
    dual = float(np.abs(Px + c + Etnu + w).max(initial=0.0))
    pn = max(float(np.abs(b).max(initial=0.0)), float(np.abs(x).max(initial=0.0)),
             float(np.abs(Ex).max(initial=0.0)))
    dn = max(float(np.abs(c).max(initial=0.0)), float(np.abs(Etnu).max(initial=0.0)),
             float(np.abs(Px).max(initial=0.0)), float(np.abs(w).max(initial=0.0)))
    return prim, dual, pn, dn


def _polish(ws: _Workspace, z, w):
    """Solve the reduced KKT system on the active set guessed from (z, w)."""
    st = ws.settings
    active = z < -w
    free = np.flatnonzero(~active)
    nf = free.size
    m = ws.E.shape[0]
    EF = ws.E[:, free]
    EFs = sp.csc_matrix(EF)
    K0 = sp.bmat([[sp.diags(ws.p[free]), EFs.T], [EFs, None]], format="csc")
    delta = st.polish_delta
    reg = sp.diags(np.concatenate((np.full(nf, delta), np.full(m, -delta))))
    rhs = np.concatenate((-ws.c[free], ws.b))
    try:
        lu = spla.splu((K0 + reg).tocsc())
    except RuntimeError:
        return None
    sol = lu.solve(rhs)
    for _ in range(st.polish_refine):
        r = rhs - K0 @ sol
        if np.abs(r).max() < 1e-14 * max(1.0, np.abs(rhs).max()):
            break
        sol = sol + lu.solve(r)
    if not np.all(np.isfinite(sol)):
        return None
    x = np.zeros_like(z)
    x[free] = sol[:nf]
    nu = sol[nf:]
    wn = -(ws.p * x + ws.c + ws.E.T @ nu)
    wn[free] = 0.0
    return x, nu, wn


def _refine(ws: _Workspace, zu, restore):
    """Active-set polish from the feasible point ``restore`` builds near ``zu``."""
    x0, free0 = restore(zu)
    out = activeset.refine(ws.p, ws.c, ws.E, ws.b, x0 / ws.D, free0,
                           delta=ws.settings.polish_delta)
    return out


def solve_qp(p, c, E, b, settings: AdmmSettings | None = None, warm_start=None,
             restore=None, guess=None) -> AdmmResult:
    """Solve ``min 1/2 x'diag(p)x + c'x  s.t.  Ex = b, x >= 0``.

    ``warm_start`` is the ``state`` of a previous result on data of the same
    shape.  ``restore`` maps any (unscaled) nonnegative vector to a nearby
    feasible point and a free mask whose columns of ``E`` have full row rank;
    when given, polishing runs an active-set refinement from that point
    instead of a single reduced KKT solve.  ``guess`` is an unscaled point to
    polish from before the first iteration.

    Returns a result with status ``"solved"``, ``"primal_infeasible"`` or
    ``"dual_infeasible"``; raises :class:`SolverError` if ``max_iter`` is
    exhausted.
    """
    st = settings or AdmmSettings()
    p = np.asarray(p, dtype=float)
    c = np.asarray(c, dtype=float)
    E = np.asarray(E, dtype=float)
    b = np.asarray(b, dtype=float)
    n = E.shape[1]
    if p.shape != (n,) or c.shape != (n,) or b.shape != (E.shape[0],):
        raise ValueError("inconsistent QP dimensions")
    if np.any(p < 0):
        raise ValueError("objective curvature must be nonnegative")

    ws = _Workspace(p, c, E, b, st)
    if warm_start is not None:
        x, z, w = (np.array(v, dtype=float) for v in warm_start[:3])
        if x.shape != (n,):
            raise ValueError("warm start has the wrong shape")
        x, z, w = x / ws.D, z / ws.D, w * ws.D * ws.cost
        if warm_start[3] != ws.rho:
            ws.set_rho(warm_start[3])
    else:
        x = np.zeros(n)
        z = np.zeros(n)
        w = np.zeros(n)

    alpha, sigma = st.alpha, st.sigma

    def admm_map(state):
        x, z, w = state[:n], state[n:2 * n], state[2 * n:]
        rho = ws.rho
        xt, nu = ws.x_update(sigma * x - ws.c + rho * z - w)
        v = alpha * xt + (1 - alpha) * z + w / rho
        zn = np.maximum(v, 0.0)
        return np.concatenate((alpha * xt + (1 - alpha) * x, zn, rho * (v - zn))), nu

    def objective(xu):
        return float(0.5 * np.dot(p * xu, xu) + np.dot(c, xu))

    trace = []

    def polished(zs, ws_w, it, state):
        """Try to polish; return a solved result or None."""
        try:
            out = _refine(ws, ws.D * zs, restore) if restore is not None else _polish(ws, zs, ws_w)
        except (ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
            log.debug("polish at %d raised %s", it, exc)
            out = None
        if out is None:
            log.debug("polish at %d failed", it)
            return None
        xp, nup, wp = ws.unscale(*out)
        pres, dres, ppn, pdn = _residuals(p, c, E, b, xp, np.maximum(xp, 0.0), nup, wp)
        # bound multipliers on the active set must have the right sign
        dres = max(dres, float(np.maximum(wp, 0.0).max(initial=0.0)))
        log.debug("polish at %d: prim %.2e dual %.2e", it, pres, dres)
        if pres <= st.tol_primal * (1 + ppn) and dres <= st.tol_dual * (1 + pdn):
            return AdmmResult(xp, nup, wp, "solved", it, pres, dres, True,
                              objective(xp), trace, state)
        return None

    if st.polish and guess is not None:
        g0 = np.maximum(np.asarray(guess, dtype=float), 0.0)
        if g0.shape != (n,):
            raise ValueError("guess has the wrong shape")
        res = polished(g0 / ws.D, np.zeros(n), 0, None)
        if res is not None:
            return res

    # polish once the residuals pass the trigger, and in any case on a
    # doubling schedule; failed attempts back off on the same schedule
    next_polish = 0
    polish_wait = st.polish_every
    forced_polish = st.polish_forced
    s = np.concatenate((x, z, w))
    cached = None
    hist_s, hist_g = [], []
    s_prev = g_prev = None
    prev_check = None

    for it in range(1, st.max_iter + 1):
        f, nu = cached if cached is not None else admm_map(s)
        cached = None
        g = f - s

        if it % st.check_every == 0 or it % st.adapt_every == 0:
            x, z, w = f[:n], f[n:2 * n], f[2 * n:]
            xu, nuu, wu = ws.unscale(x, nu, w)
            zu = ws.D * z
            prim, dual, pn, dn = _residuals(p, c, E, b, xu, zu, nuu, wu)
            trace.append((it, prim, dual, ws.rho))
            if prim <= st.tol_primal * (1 + pn) and dual <= st.tol_dual * (1 + dn):
                return AdmmResult(zu, nuu, wu, "solved", it, prim, dual, False,
                                  objective(zu), trace, (xu, zu, wu, ws.rho))

            near = (prim <= st.polish_trigger * (1 + pn)
                    and dual <= st.polish_trigger * (1 + dn))
            if st.polish and it >= next_polish and (near or it >= forced_polish):
                forced_polish = 2 * it
                res = polished(z, w, it, (xu, zu, wu, ws.rho))
                if res is not None:
                    return res
                next_polish = it + polish_wait
                polish_wait *= 2

            # infeasibility certificates from differences between checks
            if prev_check is not None:
                dx, dw, dnu = x - prev_check[0], w - prev_check[1], nu - prev_check[2]
                eps = st.infeasibility_tol
                ny = max(float(np.abs(dnu).max(initial=0.0)), float(np.abs(dw).max(initial=0.0)))
                if (ny > 1e-8 and np.abs(ws.E.T @ dnu + dw).max() <= eps * ny
                        and dw.max() <= eps * ny and float(ws.b @ dnu) < -eps * ny):
                    return AdmmResult(xu, nuu, wu, "primal_infeasible", it, prim, dual, False,
                                      np.nan, trace, None)
                nx = float(np.abs(dx).max(initial=0.0))
                if (nx > 1e-8 and np.abs(ws.p * dx).max() <= eps * nx
                        and float(ws.c @ dx) < -eps * nx and dx.min() >= -eps * nx):
                    return AdmmResult(xu, nuu, wu, "dual_infeasible", it, prim, dual, False,
                                      -np.inf, trace, None)
            prev_check = (x, w, nu)

            if it % st.adapt_every == 0:
                rho = ws.rho
                ps = float(np.abs(x - z).max()) / max(float(np.abs(x).max()),
                                                       float(np.abs(z).max()), 1e-12)
                Etnu = ws.E.T @ nu
                rd = float(np.abs(ws.p * x + ws.c + Etnu + w).max())
                ds = rd / max(float(np.abs(ws.c).max(initial=0.0)), float(np.abs(Etnu).max()),
                              float(np.abs(w).max()), 1e-12)
                new_rho = float(np.clip(rho * np.sqrt(ps / max(ds, 1e-30)), 1e-6, 1e6))
                if new_rho > rho * st.adapt_tolerance or new_rho < rho / st.adapt_tolerance:
                    log.debug("rho %.2e -> %.2e at %d", rho, new_rho, it)
                    ws.set_rho(new_rho)
                    # the fixed-point map changed; restart acceleration from f
                    s, hist_s, hist_g, s_prev = f, [], [], None
                    continue

        if st.anderson_memory <= 0:
            s = f
            continue
        if s_prev is not None:
            hist_s.append(s - s_prev)
            hist_g.append(g - g_prev)
            if len(hist_s) > st.anderson_memory:
                hist_s.pop(0)
                hist_g.pop(0)
        s_prev, g_prev = s, g
        if not hist_s:
            s = f
            continue
        S = np.column_stack(hist_s)
        Y = np.column_stack(hist_g)
        YtY = Y.T @ Y
        reg = st.anderson_reg * (np.trace(YtY) + 1e-300)
        try:
            gamma = np.linalg.solve(YtY + reg * np.eye(YtY.shape[0]), Y.T @ g)
        except np.linalg.LinAlgError:
            s = f
            continue
        s_aa = f - (S + Y) @ gamma
        f_aa, nu_aa = admm_map(s_aa)
        if np.linalg.norm(f_aa - s_aa) < np.linalg.norm(g):
            s, cached = s_aa, (f_aa, nu_aa)
        else:
            s = f
            hist_s, hist_g, s_prev = [], [], None

    raise SolverError(f"ADMM did not converge in {st.max_iter} iterations "
                      f"(last residuals {trace[-1][1]:.2e}, {trace[-1][2]:.2e})", trace)
