"""Active-set refinement for ``min 1/2 x'diag(p)x + c'x  s.t.  Ex = b, x >= 0``.

Used as the polishing stage of the ADMM solver.  Starting from a feasible
point and a free set whose columns of ``E`` have full row rank, it runs a
primal active-set iteration: step to the minimizer on the current face,
fix the first variable that would turn negative, and release the fixed
variable with the most negative reduced cost once the face is exhausted.

Each step solves the reduced KKT system.  The system for a base free set is
factored once with a sparse LU; later additions and removals are absorbed
in a small dense Schur complement and the base is refactored when that
grows past ``max_updates``.  A tiny proximal term ``delta`` keeps the
system nonsingular on faces where the objective is flat; along such a face
the step is a scaled projected gradient and the ratio test bounds it.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class _ReducedKkt:
    def __init__(self, p, E, delta, max_updates):
        self.p = p
        self.E = E  # csc
        self.m = E.shape[0]
        self.delta = delta
        self.max_updates = max_updates

    def reset(self, free):
        F = np.flatnonzero(free)
        self.base = F
        self.pos = {int(j): i for i, j in enumerate(F)}
        EF = self.E[:, F]
        self.EF = EF
        self.EFt = EF.T.tocsr()
        K0 = sp.bmat([[sp.diags(self.p[F] + self.delta), EF.T], [EF, None]], format="csc")
        self.lu = spla.splu(K0)
        self.entries = []  # (kind, j)
        self.support = []
        self._added_cache = None
        self._bt_cache = None
        self.W = np.zeros((K0.shape[0], 0))
        self.S = np.zeros((0, 0))

    def _support(self, kind, j):
        """Nonzeros of the update vector for an entry, in KKT coordinates."""
        if kind == "add":
            lo, hi = self.E.indptr[j], self.E.indptr[j + 1]
            return self.base.size + self.E.indices[lo:hi], self.E.data[lo:hi]
        return np.array([self.pos[j]]), np.ones(1)

    def _append(self, kind, j):
        idx, vals = self._support(kind, j)
        v = np.zeros(self.base.size + self.m)
        v[idx] = vals
        wj = self.lu.solve(v)
        cj = self.p[j] + self.delta if kind == "add" else 0.0
        row = np.array([-(wj[i] @ v_) for i, v_ in self.support])
        n = len(self.entries)
        S = np.empty((n + 1, n + 1))
        S[:n, :n] = self.S
        S[:n, n] = row
        S[n, :n] = row
        S[n, n] = cj - wj[idx] @ vals
        self.S = S
        self.W = np.column_stack((self.W, wj))
        self.entries.append((kind, j))
        self.support.append((idx, vals))
        self._added_cache = None
        self._bt_cache = None

    def _drop(self, idx):
        keep = [i for i in range(len(self.entries)) if i != idx]
        self.entries.pop(idx)
        self.support.pop(idx)
        self._added_cache = None
        self._bt_cache = None
        self.S = self.S[np.ix_(keep, keep)]
        self.W = self.W[:, keep]

    def change(self, j, make_free, free):
        """Record that variable ``j`` becomes free (or fixed); ``free`` is already updated."""
        opposite = "remove" if make_free else "add"
        for idx, (k, i) in enumerate(self.entries):
            if i == j and k == opposite:
                self._drop(idx)
                return
        if len(self.entries) >= self.max_updates:
            self.reset(free)
            return
        self._append("add" if make_free else "remove", j)

    def solve(self, rd, rc, free, refine=3):
        """Solve on the free set, with iterative refinement against the true system.

        Falls back to a fresh factorization when refinement stalls.
        """
        scale = max(float(np.abs(rd).max(initial=0.0)), float(np.abs(rc).max(initial=0.0)), 1e-300)
        F = np.flatnonzero(free)
        for _ in range(2):
            d, lam = self._solve(rd, rc)
            for _ in range(refine + 1):
                r1 = np.zeros_like(rd)
                r1[F] = rd[F] - (self.p[F] + self.delta) * d[F] - self.tmul(lam, F)
                r2 = rc - self.mul(d)
                err = max(float(np.abs(r1).max()), float(np.abs(r2).max()))
                if err <= 1e-13 * scale:
                    return d, lam
                dd, dl = self._solve(r1, r2)
                d += dd
                lam += dl
            if err <= 1e-9 * scale or not self.entries:
                return d, lam
            self.reset(free)
        return d, lam

    def _added(self):
        if self._added_cache is None:
            cols = np.array([j for k, j in self.entries if k == "add"], dtype=int)
            self._added_cache = (cols, self.E[:, cols], self.E[:, cols].T.tocsr())
        return self._added_cache

    def mul(self, v):
        """``E v`` for ``v`` supported on the free set."""
        out = self.EF @ v[self.base]
        cols, Ea, _ = self._added()
        if cols.size:
            out += Ea @ v[cols]
        return out

    def tmul(self, lam, F):
        """``(E' lam)[F]`` for the free index array ``F``."""
        full = np.zeros(self.E.shape[1])
        full[self.base] = self.EFt @ lam
        cols, _, Eat = self._added()
        if cols.size:
            full[cols] = Eat @ lam
        return full[F]

    def _bt(self, y):
        """B' y for all update vectors at once."""
        if self._bt_cache is None:
            idx = np.concatenate([i for i, _ in self.support])
            vals = np.concatenate([v for _, v in self.support])
            owner = np.repeat(np.arange(len(self.support)), [i.size for i, _ in self.support])
            self._bt_cache = (idx, vals, owner)
        idx, vals, owner = self._bt_cache
        return np.bincount(owner, weights=y[idx] * vals, minlength=len(self.support))

    def _solve(self, rd, rc):
        """Solve with right-hand side ``(rd, rc)``; ``rd`` is full length.

        Returns the full-length primal part (zero off the free set) and the
        equality multipliers.
        """
        nb = self.base.size
        r = np.concatenate((rd[self.base], rc))
        y = self.lu.solve(r)
        d = np.zeros_like(rd)
        if self.entries:
            t = np.array([rd[j] if k == "add" else 0.0 for k, j in self.entries])
            rhs = t - self._bt(y)
            s = np.linalg.solve(self.S, rhs)
            y = y - self.W @ s
            for (k, j), sv in zip(self.entries, s):
                if k == "add":
                    d[j] = sv
        d[self.base] = y[:nb]
        for k, j in self.entries:
            if k == "remove":
                d[j] = 0.0
        return d, y[nb:]


def refine(p, c, E, b, x0, free0, *, tol=1e-12, delta=1e-5, max_steps=None,
           max_updates=80, max_inner=100):
    """Primal active-set iteration from the feasible point ``x0``.

    Returns ``(x, nu, w)`` with ``p*x + c + E'nu + w = 0``, ``w <= 0`` on fixed
    variables and zero on free ones, or ``None`` if the iteration cap is hit
    or the reduced system turns singular.
    """
    x = np.array(x0, dtype=float)
    free = np.array(free0, dtype=bool)
    n = x.size
    Ecsc = sp.csc_matrix(E)
    Et = Ecsc.T.tocsr()
    max_steps = max_steps or 20 * n
    kkt = _ReducedKkt(p, Ecsc, delta, max_updates)
    try:
        kkt.reset(free)
    except RuntimeError:
        return None
    scale = max(1.0, float(np.abs(x).max(initial=0.0)))
    bscale = max(1.0, float(np.abs(b).max(initial=0.0)))
    gscale = max(1.0, float(np.abs(c).max(initial=0.0)))
    feas_tol = 1e-11 * scale

    def restore():
        # pull rounding drift back onto the affine set
        res = b - kkt.mul(x)
        if np.abs(res).max() > 1e-14 * bscale:
            corr, _ = kkt.solve(np.zeros(n), res, free)
            x[free] += corr[free]

    inner = 0
    counts = {"prox": 0, "fix": 0, "release": 0}
    for step in range(max_steps):
        try:
            restore()
            g = p * x + c
            d, lam = kkt.solve(-g, np.zeros(kkt.m), free)
        except (np.linalg.LinAlgError, RuntimeError) as exc:
            log.debug("active set: reduced system failed at step %d: %s", step, exc)
            return None
        if not np.all(np.isfinite(d)):
            return None
        dmax = float(np.abs(d).max(initial=0.0))
        # delta * d is the stationarity defect left on the current face
        if dmax > 1e-13 * scale and delta * dmax > tol * gscale and inner < max_inner:
            F = np.flatnonzero(free)
            dF = d[F]
            # components at rounding level of the step cannot block it
            neg = dF < -1e-12 * dmax
            ratios = np.full(F.size, np.inf)
            xF = np.maximum(x[F], 0.0)
            ratios[neg] = xF[neg] / -dF[neg]
            # Harris pass: among near-ties, block on the largest |d_j|
            relaxed = np.full(F.size, np.inf)
            relaxed[neg] = (xF[neg] + feas_tol) / -dF[neg]
            cap = float(relaxed.min(initial=np.inf))
            ties = np.flatnonzero(ratios <= cap)
            i = int(ties[np.argmax(-dF[ties])]) if ties.size else 0
            # exact line search: the objective is quadratic along d
            slope = float(g @ d)
            curv = float(d @ (p * d))
            t_star = -slope / curv if curv > 0 else np.inf
            alpha = min(t_star, float(ratios[i]))
            if not np.isfinite(alpha):
                log.debug("active set: unbounded face at step %d", step)
                return None
            x[F] += alpha * dF
            np.maximum(x, 0.0, out=x)
            if alpha < ratios[i]:
                # interior minimizer along d; the face may need more steps
                inner += 1
                counts["prox"] += 1
                continue
            j = int(F[i])
            x[j] = 0.0
            free[j] = False
            inner = 0
            counts["fix"] += 1
            try:
                kkt.change(j, False, free)
            except RuntimeError as exc:
                log.debug("active set: refactor failed at step %d: %s", step, exc)
                return None
            continue
        inner = 0
        # on the face minimizer; lam prices the equalities
        red = g + Et @ lam
        red[free] = 0.0
        j = int(np.argmin(red))
        if red[j] >= -tol * gscale:
            restore()
            log.debug("active set: converged in %d steps %s, worst negative %.1e",
                      step + 1, counts, -x.min(initial=0.0))
            x = np.maximum(x, 0.0)
            w = -red
            w[free] = 0.0
            return x, lam, w
        free[j] = True
        counts["release"] += 1
        try:
            kkt.change(j, True, free)
        except RuntimeError as exc:
            log.debug("active set: refactor failed at step %d: %s", step, exc)
            return None
    log.debug("active set: step cap %d reached", max_steps)
    return None
