"""Interior-point solver for linear/second-order/semidefinite cone programs.

The program ``max c.x  s.t.  A_eq x = b_eq, A_in x <= b_in, bounds,
x[soc] in Q, x[psd] in S+`` is flattened to the conic standard form

    min  c.x   s.t.  A x = b,   G x + s = h,   s in K,

where K is a product of a nonnegative orthant (inequality and bound
rows), second-order cones, and PSD cones (svec coordinates).  The
solver runs a homogeneous self-dual embedding with Nesterov-Todd
scalings and a Mehrotra predictor-corrector, so infeasibility and
unboundedness come out as certificates rather than failures.

Sizing assumptions are desk-scale (a few hundred variables): dense
linear algebra throughout, one Cholesky of the reduced KKT matrix and
one of its Schur complement per iteration.  Second-order cones are
bucketed by dimension so per-iteration cone algebra is vectorized
across blocks of equal size.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .program import ConicProgram, tri_dim

_STEP_FRAC = 0.99


@dataclass
class SolverOptions:
    feastol: float = 1e-8
    gaptol: float = 1e-8
    # acceptance bands for iterates that stall short of full accuracy;
    # results inside them come back "optimal" with a reduced_accuracy flag
    feastol_inacc: float = 1e-5
    gaptol_inacc: float = 1e-4
    max_iters: int = 100
    reg: float = 1e-9
    presolve: bool = True
    equilibrate: bool = True
    verbose: bool = False


@dataclass
class ConicSolution:
    status: str
    x: np.ndarray | None
    objective: float | None
    residuals: dict
    gap: float
    iterations: int
    wall_time: float
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# standard-form conversion


class _Std:
    """Dense standard-form data plus bookkeeping to undo presolve."""

    def __init__(self):
        self.c = None
        self.A = None
        self.b = None
        self.G = None
        self.h = None
        self.l = 0
        self.soc_dims = []
        self.psd_dims = []
        self.keep = None
        self.col_scale = None
        self.steps = []
        self.n_orig = 0
        self.early_status = None


def _standardize(prog: ConicProgram) -> _Std:
    n = prog.n_vars
    st = _Std()
    st.n_orig = n
    st.c = -prog.objective.astype(float)  # internal form minimizes

    lb, ub = prog.var_lb, prog.var_ub
    pinned = np.isfinite(lb) & np.isfinite(ub) & (lb == ub)

    eq_rows = list(prog.eq_constraints) + [
        (np.array([j]), np.array([1.0]), float(lb[j])) for j in np.flatnonzero(pinned)
    ]
    p = len(eq_rows)
    A = np.zeros((p, n))
    b = np.zeros(p)
    for r, (idx, coef, rhs) in enumerate(eq_rows):
        A[r, idx] = coef
        b[r] = rhs

    lo_rows = np.flatnonzero(np.isfinite(lb) & ~pinned)
    hi_rows = np.flatnonzero(np.isfinite(ub) & ~pinned)
    l = len(prog.ineq_constraints) + len(lo_rows) + len(hi_rows)
    m = l + sum(len(blk) for blk in prog.soc_blocks) \
        + sum(len(blk) for blk in prog.psd_blocks)
    G = np.zeros((m, n))
    h = np.zeros(m)
    r = 0
    for idx, coef, rhs in prog.ineq_constraints:
        G[r, idx] = coef
        h[r] = rhs
        r += 1
    for j in lo_rows:
        G[r, j] = -1.0
        h[r] = -lb[j]
        r += 1
    for j in hi_rows:
        G[r, j] = 1.0
        h[r] = ub[j]
        r += 1
    for blk in prog.soc_blocks:
        for v in blk:
            G[r, v] = -1.0
            r += 1
        st.soc_dims.append(len(blk))
    for blk in prog.psd_blocks:
        for v in blk:
            G[r, v] = -1.0
            r += 1
        st.psd_dims.append(len(blk))

    st.A, st.b, st.G, st.h, st.l = A, b, G, h, l
    return st


def _presolve(st: _Std):
    """Symbolically substitute variables pinned by a single equality row.

    The builder wraps every nontrivial cone entry in an auxiliary
    variable with one defining equality; folding those back into the
    cone rows shrinks the KKT system substantially.
    """
    A, b, G, h, c = st.A, st.b, st.G, st.h, st.c
    p, n = A.shape
    col_alive = np.ones(n, dtype=bool)
    row_alive = np.ones(p, dtype=bool)
    steps = []

    changed = True
    while changed:
        changed = False
        nz = (A != 0.0)
        counts = nz.sum(axis=0)
        for j in range(n):
            if not col_alive[j] or counts[j] != 1:
                continue
            rows = np.flatnonzero(A[:, j])
            if len(rows) != 1 or not row_alive[rows[0]]:
                continue
            r = rows[0]
            pivot = A[r, j]
            if abs(pivot) < 1e-6:
                continue
            arow = A[r].copy()
            brhs = b[r]
            # substitute x_j = (brhs - sum_{k != j} arow_k x_k) / pivot
            gcol = G[:, j]
            mask = gcol != 0.0
            if mask.any():
                f = gcol[mask] / pivot
                G[mask] -= np.outer(f, arow)
                h[mask] -= f * brhs
            acol = A[:, j].copy()
            acol[r] = 0.0
            amask = acol != 0.0
            if amask.any():
                f = acol[amask] / pivot
                A[amask] -= np.outer(f, arow)
                b[amask] -= f * brhs
            if c[j] != 0.0:
                c -= (c[j] / pivot) * arow
            A[r] = 0.0
            b[r] = 0.0
            col_alive[j] = False
            row_alive[r] = False
            steps.append((j, arow, brhs, pivot))
            changed = True

    # empty or inconsistent leftover equality rows
    for r in range(p):
        if not row_alive[r]:
            continue
        if not np.any(np.abs(A[r]) > 1e-12):
            if abs(b[r]) > 1e-9:
                st.early_status = "infeasible"
            row_alive[r] = False

    # columns no constraint sees any more
    seen = (np.abs(A[row_alive]) > 0).any(axis=0) | (np.abs(G) > 0).any(axis=0)
    for j in range(n):
        if col_alive[j] and not seen[j]:
            if abs(c[j]) > 1e-12:
                st.early_status = "unbounded"
            steps.append((j, np.zeros(n), 0.0, 1.0))
            col_alive[j] = False

    # inequality rows whose coefficients all vanished are constants:
    # verify and drop them (cone rows keep their slot, they carry
    # structure even when constant)
    const_lp = np.flatnonzero(~(np.abs(G[: st.l]) > 1e-12).any(axis=1))
    if len(const_lp):
        if np.any(h[const_lp] < -1e-9):
            st.early_status = "infeasible"
        keep_rows = np.ones(G.shape[0], dtype=bool)
        keep_rows[const_lp] = False
        G = G[keep_rows]
        h = h[keep_rows]
        st.l -= len(const_lp)

    st.keep = np.flatnonzero(col_alive)
    st.steps = steps
    st.A = A[row_alive][:, st.keep]
    st.b = b[row_alive]
    st.G = G[:, st.keep]
    st.h = h
    st.c = c[st.keep]


def _equilibrate(st: _Std):
    """Ruiz-style row/column scaling; SOC/PSD row groups share a factor."""
    A, G = st.A, st.G
    p, n = A.shape
    m = G.shape[0]

    groups = [np.arange(st.l)]  # LP rows scale independently
    r0 = st.l
    for d in st.soc_dims + st.psd_dims:
        groups.append(np.arange(r0, r0 + d))
        r0 += d

    ra = np.ones(p)
    rg = np.ones(m)
    e = np.ones(n)
    # degenerate (all-zero) rows, blocks, or columns keep scale 1.0 --
    # flooring their max at eps and dividing would blow the rhs up
    def _scale(mx):
        return np.sqrt(np.where(mx > 1e-12, mx, 1.0))

    for _ in range(3):
        if p:
            s = _scale(np.abs(A).max(axis=1))
            A /= s[:, None]
            ra *= s
        lpg = groups[0]
        if len(lpg):
            s = _scale(np.abs(G[lpg]).max(axis=1))
            G[lpg] /= s[:, None]
            rg[lpg] *= s
        for grp in groups[1:]:
            mx = np.abs(G[grp]).max()
            s = math.sqrt(mx) if mx > 1e-12 else 1.0
            G[grp] /= s
            rg[grp] *= s
        cn = np.zeros(n)
        if p:
            cn = np.abs(A).max(axis=0)
        cn = np.maximum(cn, np.abs(G).max(axis=0))
        s = _scale(cn)
        A /= s[None, :]
        G /= s[None, :]
        e *= 1.0 / s
    st.b = st.b / ra
    st.h = st.h / rg
    st.c = st.c * e
    st.col_scale = e


def _reconstruct(st: _Std, x_red: np.ndarray) -> np.ndarray:
    x = np.zeros(st.n_orig)
    scale = st.col_scale if st.col_scale is not None else 1.0
    x[st.keep] = x_red * scale
    for j, arow, brhs, pivot in reversed(st.steps):
        x[j] = (brhs - float(arow @ x)) / pivot
    return x


# ---------------------------------------------------------------------------
# cone algebra


class _PsdCache:
    def __init__(self, d):
        self.d = d
        self.tri = tri_dim(d)
        self.rows, self.cols = np.tril_indices(d)
        off = self.rows != self.cols
        self.to_mat = np.where(off, 1.0 / math.sqrt(2.0), 1.0)
        self.to_vec = np.where(off, math.sqrt(2.0), 1.0)
        # svec basis matrices, used to form scaled-cone operator matrices
        basis = np.zeros((self.tri, d, d))
        for k, (i, j) in enumerate(zip(self.rows, self.cols)):
            basis[k, i, j] = self.to_mat[k]
            basis[k, j, i] = self.to_mat[k]
        self.basis = basis

    def mat(self, v):
        M = np.zeros((self.d, self.d))
        vals = v * self.to_mat
        M[self.rows, self.cols] = vals
        M[self.cols, self.rows] = vals
        return M

    def vec(self, M):
        return M[self.rows, self.cols] * self.to_vec


class _NTState:
    __slots__ = ("lp_w", "lp_lam", "lp_d_inv", "soc", "psd")

    def __init__(self):
        self.lp_w = None
        self.lp_lam = None
        self.lp_d_inv = None
        self.soc = {}
        self.psd = []


class _Cones:
    """Product-cone algebra over the slack vector layout."""

    def __init__(self, l, soc_dims, psd_dims):
        self.l = l
        self.buckets = {}
        r = l
        starts = {}
        for d in soc_dims:
            starts.setdefault(d, []).append(r)
            r += d
        for d, ss in starts.items():
            self.buckets[d] = np.asarray(ss)[:, None] + np.arange(d)[None, :]
        self.psd = []
        for tri in psd_dims:
            d = int((math.isqrt(8 * tri + 1) - 1) // 2)
            self.psd.append((slice(r, r + tri), _PsdCache(d)))
            r += tri
        self.m = r
        self.degree = l + len(soc_dims) + sum(c.d for _, c in self.psd)

    def unit(self):
        e = np.zeros(self.m)
        e[: self.l] = 1.0
        for rows in self.buckets.values():
            e[rows[:, 0]] = 1.0
        for sl, cache in self.psd:
            v = np.zeros(cache.tri)
            v[cache.rows == cache.cols] = 1.0
            e[sl] = v
        return e

    # -- NT scaling ---------------------------------------------------------

    def compute_nt(self, s, z):
        nt = _NTState()
        l = self.l
        if l:
            sl, zl = s[:l], z[:l]
            nt.lp_w = np.sqrt(sl / zl)
            nt.lp_lam = np.sqrt(sl * zl)
            nt.lp_d_inv = zl / sl
        for d, rows in self.buckets.items():
            S = s[rows]
            Z = z[rows]
            js = S[:, 0] ** 2 - np.sum(S[:, 1:] ** 2, axis=1)
            jz = Z[:, 0] ** 2 - np.sum(Z[:, 1:] ** 2, axis=1)
            snorm = np.sqrt(js)
            znorm = np.sqrt(jz)
            s_t = S / snorm[:, None]
            z_t = Z / znorm[:, None]
            gamma = np.sqrt((1.0 + np.sum(s_t * z_t, axis=1)) / 2.0)
            wb = z_t.copy()
            wb[:, 1:] *= -1.0
            wb = (s_t + wb) / (2.0 * gamma[:, None])
            eta = np.sqrt(snorm / znorm)
            v = wb.copy()
            v[:, 0] += 1.0
            v /= np.sqrt(2.0 * (wb[:, 0] + 1.0))[:, None]
            jv = v.copy()
            jv[:, 1:] *= -1.0
            vv = np.sum(v * v, axis=1)
            eye = np.eye(d)[None, :, :]
            w2inv = (
                4.0 * vv[:, None, None] * np.einsum("bi,bj->bij", jv, jv)
                - 2.0 * np.einsum("bi,bj->bij", jv, v)
                - 2.0 * np.einsum("bi,bj->bij", v, jv)
                + eye
            ) / (eta ** 2)[:, None, None]
            # lambda = W z = eta (2 v (v.z) - J z)
            vz = np.sum(v * Z, axis=1)
            JZ = Z.copy()
            JZ[:, 1:] *= -1.0
            lam = eta[:, None] * (2.0 * v * vz[:, None] - JZ)
            nt.soc[d] = {"eta": eta, "v": v, "lam": lam, "w2inv": w2inv}
        for sl, cache in self.psd:
            S = cache.mat(s[sl])
            Z = cache.mat(z[sl])
            Ls = np.linalg.cholesky(S)
            Lz = np.linalg.cholesky(Z)
            U, sv, Vt = np.linalg.svd(Lz.T @ Ls)
            isq = 1.0 / np.sqrt(sv)
            R = Ls @ Vt.T * isq[None, :]
            Rinv = (isq[:, None] * U.T) @ Lz.T
            Q = Rinv.T @ Rinv
            QBQ = np.einsum("ab,kbc,cd->kad", Q, cache.basis, Q)
            K = QBQ[:, cache.rows, cache.cols] * cache.to_vec[None, :]
            nt.psd.append({"R": R, "Rinv": Rinv, "lam": sv, "K2inv": K.T})
        return nt

    def lam_vec(self, nt):
        out = np.zeros(self.m)
        if self.l:
            out[: self.l] = nt.lp_lam
        for d, rows in self.buckets.items():
            out[rows] = nt.soc[d]["lam"]
        for (sl, cache), blk in zip(self.psd, nt.psd):
            v = np.zeros(cache.tri)
            v[cache.rows == cache.cols] = blk["lam"]
            out[sl] = v
        return out

    def lam_sq(self, nt):
        out = np.zeros(self.m)
        if self.l:
            out[: self.l] = nt.lp_lam ** 2
        for d, rows in self.buckets.items():
            lam = nt.soc[d]["lam"]
            out[rows[:, 0]] = np.sum(lam * lam, axis=1)
            out[rows[:, 1:]] = 2.0 * lam[:, 0][:, None] * lam[:, 1:]
        for (sl, cache), blk in zip(self.psd, nt.psd):
            v = np.zeros(cache.tri)
            v[cache.rows == cache.cols] = blk["lam"] ** 2
            out[sl] = v
        return out

    # -- scaled/space mappings ----------------------------------------------

    def _soc_W(self, blk, U, inverse=False):
        eta, v = blk["eta"], blk["v"]
        JU = U.copy()
        JU[:, 1:] *= -1.0
        if inverse:
            # W^{-1} u = (2 Jv (v.Ju) - Ju)/eta
            vju = np.sum(v * JU, axis=1)
            jv = v.copy()
            jv[:, 1:] *= -1.0
            return (2.0 * jv * vju[:, None] - JU) / eta[:, None]
        vu = np.sum(v * U, axis=1)
        return eta[:, None] * (2.0 * v * vu[:, None] - JU)

    def apply_W(self, nt, u):
        out = np.zeros_like(u)
        if self.l:
            out[: self.l] = nt.lp_w * u[: self.l]
        for d, rows in self.buckets.items():
            out[rows] = self._soc_W(nt.soc[d], u[rows])
        for (sl, cache), blk in zip(self.psd, nt.psd):
            R = blk["R"]
            out[sl] = cache.vec(R.T @ cache.mat(u[sl]) @ R)
        return out

    def apply_WT(self, nt, u):
        out = np.zeros_like(u)
        if self.l:
            out[: self.l] = nt.lp_w * u[: self.l]
        for d, rows in self.buckets.items():
            out[rows] = self._soc_W(nt.soc[d], u[rows])
        for (sl, cache), blk in zip(self.psd, nt.psd):
            R = blk["R"]
            out[sl] = cache.vec(R @ cache.mat(u[sl]) @ R.T)
        return out

    def apply_WinvT(self, nt, u):
        out = np.zeros_like(u)
        if self.l:
            out[: self.l] = u[: self.l] / nt.lp_w
        for d, rows in self.buckets.items():
            out[rows] = self._soc_W(nt.soc[d], u[rows], inverse=True)
        for (sl, cache), blk in zip(self.psd, nt.psd):
            Ri = blk["Rinv"]
            out[sl] = cache.vec(Ri @ cache.mat(u[sl]) @ Ri.T)
        return out

    def apply_W2(self, nt, u):
        return self.apply_WT(nt, self.apply_W(nt, u))

    def apply_W2inv(self, nt, u):
        out = np.zeros_like(u)
        if self.l:
            out[: self.l] = nt.lp_d_inv * u[: self.l]
        for d, rows in self.buckets.items():
            out[rows] = np.einsum("bij,bj->bi", nt.soc[d]["w2inv"], u[rows])
        for (sl, cache), blk in zip(self.psd, nt.psd):
            out[sl] = blk["K2inv"] @ u[sl]
        return out

    # -- Jordan algebra ------------------------------------------------------

    def jordan_mul(self, a, b):
        out = np.zeros_like(a)
        if self.l:
            out[: self.l] = a[: self.l] * b[: self.l]
        for d, rows in self.buckets.items():
            A = a[rows]
            B = b[rows]
            out[rows[:, 0]] = np.sum(A * B, axis=1)
            out[rows[:, 1:]] = A[:, 0][:, None] * B[:, 1:] + B[:, 0][:, None] * A[:, 1:]
        for sl, cache in self.psd:
            Am = cache.mat(a[sl])
            Bm = cache.mat(b[sl])
            out[sl] = cache.vec(0.5 * (Am @ Bm + Bm @ Am))
        return out

    def jordan_div_lam(self, nt, v):
        """Solve lam o u = v for u, lam being the current scaling point."""
        out = np.zeros_like(v)
        if self.l:
            out[: self.l] = v[: self.l] / nt.lp_lam
        for d, rows in self.buckets.items():
            lam = nt.soc[d]["lam"]
            V = v[rows]
            det = lam[:, 0] ** 2 - np.sum(lam[:, 1:] ** 2, axis=1)
            u0 = (lam[:, 0] * V[:, 0] - np.sum(lam[:, 1:] * V[:, 1:], axis=1)) / det
            ut = (V[:, 1:] - u0[:, None] * lam[:, 1:]) / lam[:, 0][:, None]
            out[rows[:, 0]] = u0
            out[rows[:, 1:]] = ut
        for (sl, cache), blk in zip(self.psd, nt.psd):
            lam = blk["lam"]
            denom = 0.5 * (lam[:, None] + lam[None, :])
            out[sl] = cache.vec(cache.mat(v[sl]) / denom)
        return out

    # -- step sizes -----------------------------------------------------------

    def max_step(self, v, dv):
        amax = np.inf
        if self.l:
            neg = dv[: self.l] < 0
            if neg.any():
                amax = min(amax, float(np.min(-v[: self.l][neg] / dv[: self.l][neg])))
        for d, rows in self.buckets.items():
            V = v[rows]
            D = dv[rows]
            a2 = D[:, 0] ** 2 - np.sum(D[:, 1:] ** 2, axis=1)
            a1 = V[:, 0] * D[:, 0] - np.sum(V[:, 1:] * D[:, 1:], axis=1)
            a0 = V[:, 0] ** 2 - np.sum(V[:, 1:] ** 2, axis=1)
            cand = np.full(len(V), np.inf)
            with np.errstate(divide="ignore", invalid="ignore"):
                disc = a1 * a1 - a2 * a0
                sq = np.sqrt(np.maximum(disc, 0.0))
                quad = np.abs(a2) > 1e-14
                r1 = np.where(quad, (-a1 - sq) / np.where(quad, a2, 1.0), np.inf)
                r2 = np.where(quad, (-a1 + sq) / np.where(quad, a2, 1.0), np.inf)
                lin = ~quad & (a1 < 0.0)
                r3 = np.where(lin, -a0 / (2.0 * np.where(lin, a1, 1.0)), np.inf)
                for r in (r1, r2, r3):
                    ok = (disc >= 0.0) & (r > 1e-16)
                    cand = np.where(ok & (r < cand), r, cand)
                head = D[:, 0] < 0.0
                r4 = np.where(head, -V[:, 0] / np.where(head, D[:, 0], 1.0), np.inf)
                cand = np.minimum(cand, np.where(r4 > 1e-16, r4, np.inf))
            if len(cand):
                amax = min(amax, float(np.min(cand)))
        for sl, cache in self.psd:
            S = cache.mat(v[sl])
            D = cache.mat(dv[sl])
            L = np.linalg.cholesky(S)
            M = sla.solve_triangular(L, D, lower=True)
            M = sla.solve_triangular(L, M.T, lower=True).T
            w = np.linalg.eigvalsh(0.5 * (M + M.T))
            if w[0] < 0:
                amax = min(amax, 1.0 / (-float(w[0])))
        return amax


# ---------------------------------------------------------------------------
# the solver


def _tri_solver(R):
    """Solve (R' R) x = r given an upper-triangular R."""
    def f(r):
        t = sla.solve_triangular(R, r, trans="T", check_finite=False)
        return sla.solve_triangular(R, t, check_finite=False)
    return f


def _newton_step(kkt, u2, cones, nt, lam2, e, A, G, c, b, h, p,
                 r1, r2, r3, r4, s, z, tau, kappa, mu, deg):
    """Mehrotra predictor-corrector direction for the homogeneous system."""
    with np.errstate(invalid="ignore", over="ignore"):
        x2, y2, z2 = u2
        # c'x2 + b'y2 + h'z2 equals -|W z2|^2 by symmetry of the reduced
        # system; the quadratic form avoids the cancellation that makes
        # the direct inner products change sign late on.
        wz2 = cones.apply_W(nt, z2)
        den = -float(wz2 @ wz2) - kappa / tau

        def direction(Rx, Ry, Rz, Rt, Rs, Rk):
            wls = cones.apply_WT(nt, cones.jordan_div_lam(nt, Rs))
            x1, y1, z1 = kkt.solve(Rx, Ry, Rz - wls)
            num = Rt - Rk / tau - float(c @ x1) \
                - (float(b @ y1) if p else 0.0) - float(h @ z1)
            dtau = num / den
            dx = x1 + dtau * x2
            dy = y1 + dtau * y2
            dz = z1 + dtau * z2
            # recover ds from the primal row rather than the scaled
            # complementarity elimination: the latter multiplies solve
            # error by W^2, which blows up near the boundary
            ds = Rz - G @ dx + h * dtau
            dkappa = (Rk - kappa * dtau) / tau
            return dx, dy, dz, ds, dtau, dkappa

        # predictor
        dxa, dya, dza, dsa, dta, dka = direction(
            -r1, -r2, -r3, -r4, -lam2, -tau * kappa)
        astep = min(cones.max_step(s, dsa), cones.max_step(z, dza), 1e18)
        if dta < 0:
            astep = min(astep, -tau / dta)
        if dka < 0:
            astep = min(astep, -kappa / dka)
        astep = min(1.0, astep)
        mu_aff = (float((s + astep * dsa) @ (z + astep * dza))
                  + (tau + astep * dta) * (kappa + astep * dka)) / deg
        sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3))

        # corrector
        corr = cones.jordan_mul(cones.apply_WinvT(nt, dsa),
                                cones.apply_W(nt, dza))
        Rs = sigma * mu * e - lam2 - corr
        Rk = sigma * mu - tau * kappa - dta * dka
        f = 1.0 - sigma
        Rx, Ry, Rz, Rt = -f * r1, -f * r2, -f * r3, -f * r4
        d = direction(Rx, Ry, Rz, Rt, Rs, Rk)
        # refine the composed direction: the tau column couples the two
        # subsolves, so their residuals enter the dual/primal rows scaled
        # by dtau and would otherwise get baked into r1/r2 for good (the
        # slack and kappa recoveries keep rows 3 and 6 exact throughout)
        zm = np.zeros(len(s))
        for _ in range(2):
            dx, dy, dz, ds, dtau, dkappa = d
            res1 = Rx - ((A.T @ dy if p else 0.0) + G.T @ dz + c * dtau)
            res2 = (Ry - (A @ dx - b * dtau)) if p else np.zeros(0)
            res4 = Rt - (float(c @ dx) + (float(b @ dy) if p else 0.0)
                         + float(h @ dz) + dkappa)
            err = max(float(np.abs(res1).max(initial=0.0)),
                      float(np.abs(res2).max(initial=0.0)), abs(res4))
            if err <= 1e-13 * (1.0 + abs(dtau)):
                break
            cx, cy, cz, cs, ct, ck = direction(res1, res2, zm, res4, zm, 0.0)
            d = (dx + cx, dy + cy, dz + cz, ds + cs,
                 dtau + ct, dkappa + ck)
        return d


class _KKT:
    """Factorization of the reduced Newton system for one NT scaling.

    Two back ends: ``chol`` forms H = G' W^-2 G and Cholesky-factors it
    (fast, but squares the conditioning of the scaled constraint matrix),
    ``qr`` factors the scaled matrix W^-T G itself, which stays usable for
    roughly the square of the barrier parameter range of the Cholesky path.
    """

    def __init__(self, A, G, cones, nt, reg, method="chol"):
        self.A, self.G, self.cones, self.nt = A, G, cones, nt
        p, n = A.shape
        if method == "chol":
            H = reg * np.eye(n)
            l = cones.l
            if l:
                H += (G[:l] * nt.lp_d_inv[:, None]).T @ G[:l]
            for d, rows in cones.buckets.items():
                Gb = G[rows.ravel()]
                M = np.einsum("bij,bjn->bin", nt.soc[d]["w2inv"],
                              Gb.reshape(rows.shape[0], d, -1))
                H += Gb.T @ M.reshape(-1, Gb.shape[1])
            for (sl, cache), blk in zip(cones.psd, nt.psd):
                Gb = G[sl]
                H += Gb.T @ (blk["K2inv"] @ Gb)
            Hf = sla.cho_factor(H, lower=True, check_finite=False)
            self._hsolve = lambda r: sla.cho_solve(Hf, r, check_finite=False)
        else:
            B = self._scaled_rows(G)
            Baug = np.vstack([B, math.sqrt(reg) * np.eye(n)])
            Rh = sla.qr(Baug, mode="r", check_finite=False)[0][:n]
            self._hsolve = _tri_solver(Rh)
        if p:
            if method == "chol":
                S = A @ self._hsolve(A.T) + reg * np.eye(p)
                Sf = sla.cho_factor(S, lower=True, check_finite=False)
                self._ssolve = lambda r: sla.cho_solve(Sf, r,
                                                       check_finite=False)
            else:
                C = sla.solve_triangular(Rh, A.T, trans="T",
                                         check_finite=False)
                Caug = np.vstack([C, math.sqrt(reg) * np.eye(p)])
                Rs = sla.qr(Caug, mode="r", check_finite=False)[0][:p]
                self._ssolve = _tri_solver(Rs)
        else:
            self._ssolve = None

    def _scaled_rows(self, G):
        """Rows of the cone-scaled inequality matrix W^-T G."""
        cones, nt = self.cones, self.nt
        B = np.empty_like(G)
        l = cones.l
        if l:
            B[:l] = G[:l] * np.sqrt(nt.lp_d_inv)[:, None]
        for d, rows in cones.buckets.items():
            blk = nt.soc[d]
            v, eta = blk["v"], blk["eta"]
            jv = v.copy()
            jv[:, 1:] *= -1.0
            Gb = G[rows.ravel()].reshape(rows.shape[0], d, -1)
            JGb = Gb.copy()
            JGb[:, 1:, :] *= -1.0
            t = np.einsum("bi,bin->bn", jv, Gb)
            Bb = (2.0 * jv[:, :, None] * t[:, None, :] - JGb) \
                / eta[:, None, None]
            B[rows.ravel()] = Bb.reshape(-1, G.shape[1])
        for (sl, cache), blk in zip(cones.psd, nt.psd):
            Ri = blk["Rinv"]
            RBR = np.einsum("ab,kbc,dc->kad", Ri, cache.basis, Ri)
            K = RBR[:, cache.rows, cache.cols] * cache.to_vec[None, :]
            B[sl] = K.T @ G[sl]
        return B

    def _solve_once(self, bx, by, bz):
        A, G, cones, nt = self.A, self.G, self.cones, self.nt
        rhs = bx + G.T @ cones.apply_W2inv(nt, bz)
        if self._ssolve is not None:
            t = self._hsolve(rhs)
            uy = self._ssolve(A @ t - by)
            ux = self._hsolve(rhs - A.T @ uy)
        else:
            uy = np.zeros(0)
            ux = self._hsolve(rhs)
        uz = cones.apply_W2inv(nt, G @ ux - bz)
        return ux, uy, uz

    def _residual(self, bx, by, bz, ux, uy, uz):
        A, G, cones, nt = self.A, self.G, self.cones, self.nt
        rx = bx - (A.T @ uy if len(uy) else 0.0) - G.T @ uz
        ry = by - A @ ux if len(uy) else by
        rz = bz - G @ ux + cones.apply_W2(nt, uz)
        return rx, ry, rz

    @staticmethod
    def _errnorm(rx, ry, rz):
        # the z-row residual is left out: near the boundary it is the
        # irreducible W^2-amplified image of a tiny z error, and it would
        # mask genuine progress on the two rows that feed the unscaled
        # optimality conditions
        return max(float(np.abs(rx).max(initial=0.0)),
                   float(np.abs(ry).max(initial=0.0)))

    def solve(self, bx, by, bz):
        cur = self._solve_once(bx, by, bz)
        rx, ry, rz = self._residual(bx, by, bz, *cur)
        err = self._errnorm(rx, ry, rz)
        # iterative refinement against the unregularized system; the round
        # budget is generous because the contraction rate degrades with the
        # conditioning and the no-progress gate exits early anyway
        for _ in range(10):
            if err < 1e-14:
                break
            cx, cy, cz = self._solve_once(rx, ry, rz)
            cand = (cur[0] + cx, cur[1] + cy, cur[2] + cz)
            rx2, ry2, rz2 = self._residual(bx, by, bz, *cand)
            err2 = self._errnorm(rx2, ry2, rz2)
            if err2 >= err * 0.5:
                if err2 < err:
                    cur = cand
                break
            cur, rx, ry, rz, err = cand, rx2, ry2, rz2, err2
        return cur


def _cone_shift(cones, v):
    """Smallest a such that v + a*e sits on the cone boundary."""
    shift = -math.inf
    if cones.l:
        shift = max(shift, -float(v[: cones.l].min()))
    for rows in cones.buckets.values():
        V = v[rows]
        shift = max(shift, float(np.max(
            np.linalg.norm(V[:, 1:], axis=1) - V[:, 0])))
    for sl, cache in cones.psd:
        w = np.linalg.eigvalsh(cache.mat(v[sl]))
        shift = max(shift, -float(w[0]))
    return shift


def _initial_point(A, G, c, b, h, cones, reg):
    """Least-squares starting iterate, shifted strictly inside the cone.

    Primal part minimizes |s| subject to Ax = b, s = h - Gx; dual part
    minimizes |z| subject to A'y + G'z = -c.  Keeps tau near one for
    problems whose natural scale is far from the unit cone point.
    """
    p, n = A.shape
    H0 = G.T @ G + reg * np.eye(n)
    Hf = sla.cho_factor(H0, lower=True, check_finite=False)

    def hsolve(r):
        return sla.cho_solve(Hf, r, check_finite=False)

    if p:
        S = A @ hsolve(A.T) + reg * np.eye(p)
        Sf = sla.cho_factor(S, lower=True, check_finite=False)

        def ssolve(r):
            return sla.cho_solve(Sf, r, check_finite=False)

    gh = G.T @ h
    if p:
        y0 = ssolve(A @ hsolve(gh) - b)
        x = hsolve(gh - A.T @ y0)
    else:
        x = hsolve(gh)
    s_hat = h - G @ x

    if p:
        yd = ssolve(A @ hsolve(-c))
        xd = hsolve(-c - A.T @ yd)
        y = yd
    else:
        xd = hsolve(-c)
        y = np.zeros(0)
    z_hat = G @ xd

    e = cones.unit()
    ap = _cone_shift(cones, s_hat)
    s = s_hat if ap < 0 else s_hat + (1.0 + ap) * e
    ad = _cone_shift(cones, z_hat)
    z = z_hat if ad < 0 else z_hat + (1.0 + ad) * e
    return x, y, s, z


def solve(prog: ConicProgram, opts: SolverOptions | None = None) -> ConicSolution:
    """Solve a ConicProgram; statuses: optimal, infeasible, unbounded,
    max_iter, numerical_error."""
    t0 = time.perf_counter()
    opts = opts or SolverOptions()
    prog.validate()

    st = _standardize(prog)
    if opts.presolve:
        _presolve(st)
    else:
        st.keep = np.arange(st.n_orig)
    if st.early_status is not None:
        return ConicSolution(st.early_status, None, None, {}, math.inf, 0,
                             time.perf_counter() - t0)
    if opts.equilibrate:
        _equilibrate(st)

    A, b, G, h, c = st.A, st.b, st.G, st.h, st.c
    p, n = A.shape
    m = G.shape[0]
    cones = _Cones(st.l, st.soc_dims, st.psd_dims)

    if n == 0 or m == 0:
        # everything substituted away; evaluate the pinned point
        x_full = _reconstruct(st, np.zeros(n))
        res = prog.check_feasibility(x_full)
        ok = res["max"] <= 1e-7
        return ConicSolution("optimal" if ok else "infeasible",
                             x_full if ok else None,
                             float(prog.objective @ x_full) if ok else None,
                             res, 0.0, 0, time.perf_counter() - t0)

    e = cones.unit()
    try:
        x, y, s, z = _initial_point(A, G, c, b, h, cones, opts.reg)
    except np.linalg.LinAlgError:
        x = np.zeros(n)
        y = np.zeros(p)
        s = e.copy()
        z = e.copy()
    tau, kappa = 1.0, 1.0

    bnrm = max(1.0, float(np.linalg.norm(b))) if p else 1.0
    hnrm = max(1.0, float(np.linalg.norm(h)))
    cnrm = max(1.0, float(np.linalg.norm(c)))
    deg = cones.degree + 1

    status = "max_iter"
    it = 0
    stall_count = 0
    best = None  # (merit, x/tau, pres, dres, relgap, it, mu)
    cert_ratio, cert_kind = math.inf, None
    for it in range(1, opts.max_iters + 1):
        d1 = (A.T @ y if p else 0.0) + G.T @ z
        r1 = d1 + c * tau
        r2 = (A @ x - b * tau) if p else np.zeros(0)
        r3 = G @ x + s - h * tau
        by_hz = (float(b @ y) if p else 0.0) + float(h @ z)
        cx = float(c @ x)
        r4 = cx + by_hz + kappa
        mu = (float(s @ z) + tau * kappa) / deg

        pcost = cx / tau
        gap = float(s @ z) / tau ** 2
        relgap = gap / max(1.0, abs(pcost))
        pres = max(float(np.linalg.norm(r2)) / bnrm,
                   float(np.linalg.norm(r3)) / hnrm) / tau
        dres = float(np.linalg.norm(r1)) / cnrm / tau
        if opts.verbose:
            print(f"  it {it:3d}  mu {mu:9.2e}  pres {pres:9.2e} "
                  f"dres {dres:9.2e}  relgap {relgap:9.2e}  tau {tau:8.2e}")
        # certificate checks come first: a diverging run (tau -> 0) stops
        # improving the tau-normalized merit long before the certificate
        # ratio crosses the threshold, so the stall exit below must not
        # preempt them
        d1n = float(np.linalg.norm(np.atleast_1d(d1), ord=np.inf))
        cert_improved = False
        if by_hz < -1e-12:
            ratio = d1n / (-by_hz)
            if ratio <= opts.feastol * 10.0:
                status = "infeasible"
                break
            if ratio < cert_ratio * 0.97:
                cert_ratio, cert_kind = ratio, "infeasible"
                cert_improved = True
        if cx < -1e-12:
            un = max(float(np.linalg.norm(r2 + b * tau, ord=np.inf)) if p else 0.0,
                     float(np.linalg.norm(G @ x + s, ord=np.inf)))
            ratio = un / (-cx)
            if ratio <= opts.feastol * 10.0:
                status = "unbounded"
                break
            if ratio < cert_ratio * 0.97:
                cert_ratio, cert_kind = ratio, "unbounded"
                cert_improved = True
        merit = max(pres, dres, relgap)
        diverged = best is not None and merit > 1e3 * best[0] \
            and mu > 1e2 * best[6]
        if not np.isfinite(merit) or diverged:
            # the last step was computed from a hopeless factorization
            # (mu cannot rise under a sane step); roll back to the most
            # accurate iterate.  Genuine infeasibility also inflates the
            # tau-normalized residuals, but there mu keeps shrinking.
            status = "stalled"
            break
        if best is None or merit < best[0]:
            best = (merit, (x / tau).copy(), pres, dres, relgap, it, mu)
            stall_count = 0
        elif cert_improved:
            # heading toward a certificate: tau -> 0 makes the
            # tau-normalized merit diverge even as the proof sharpens,
            # so this does not count against the stall budget
            pass
        else:
            stall_count += 1
            good = best[2] <= opts.feastol and best[3] <= opts.feastol \
                and best[4] <= opts.gaptol
            if stall_count >= (2 if good else 8):
                status = "stalled"
                break
        # push two digits past the requested tolerances when the iteration
        # stays healthy: the extra step costs little and the final-step
        # overshoot buys solution accuracy
        if pres <= opts.feastol * 1e-2 and dres <= opts.feastol * 1e-2 and \
                (relgap <= opts.gaptol * 1e-2 or gap <= opts.gaptol * 1e-4):
            status = "optimal"
            break

        try:
            with np.errstate(invalid="raise", divide="raise"):
                nt = cones.compute_nt(s, z)
        except (np.linalg.LinAlgError, FloatingPointError):
            status = "stalled"
            break

        lam2 = cones.lam_sq(nt)
        kkt = None
        for method, reg in (("chol", opts.reg), ("qr", opts.reg),
                            ("qr", opts.reg * 100.0)):
            try:
                cand = _KKT(A, G, cones, nt, reg, method)
                # probe: the Cholesky route loses the dual rows first when
                # the scaled system turns ill-conditioned; hand over to the
                # QR route while it can still produce clean directions
                u = cand.solve(-c, b, h)
                rx_p, ry_p, _ = cand._residual(-c, b, h, *u)
                q = max(float(np.abs(rx_p).max(initial=0.0)),
                        float(np.abs(ry_p).max(initial=0.0)))
                if kkt is None or q < kkt_q:
                    kkt, kkt_q, kkt_u = cand, q, u
                if q <= 1e-11:
                    break
            except np.linalg.LinAlgError:
                continue
        if kkt is None:
            status = "stalled"
            break
        try:
            dx, dy, dz, ds, dtau, dkappa = _newton_step(
                kkt, kkt_u, cones, nt, lam2, e, A, G, c, b, h, p,
                r1, r2, r3, r4, s, z, tau, kappa, mu, deg)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError,
                ZeroDivisionError):
            status = "stalled"
            break

        amax = min(cones.max_step(s, ds), cones.max_step(z, dz), 1e18)
        if dtau < 0:
            amax = min(amax, -tau / dtau)
        if dkappa < 0:
            amax = min(amax, -kappa / dkappa)
        alpha = min(1.0, _STEP_FRAC * amax)
        if not np.isfinite(alpha) or alpha <= 0:
            status = "stalled"
            break

        x += alpha * dx
        if p:
            y += alpha * dy
        z += alpha * dz
        s += alpha * ds
        tau += alpha * dtau
        kappa += alpha * dkappa
        if not (np.isfinite(tau) and np.isfinite(kappa) and tau > 0 and kappa > 0):
            status = "stalled"
            break


    wall = time.perf_counter() - t0
    if status in ("infeasible", "unbounded"):
        return ConicSolution(status, None, None, {}, math.inf, it, wall)
    if status == "max_iter" and best is not None \
            and best[2] <= opts.feastol and best[3] <= opts.feastol \
            and best[4] <= opts.gaptol:
        status = "optimal"
    # a certificate that sharpened to the reduced-accuracy band still
    # proves its case; prefer it over reporting a failed solve
    cert_ok = cert_kind is not None \
        and cert_ratio <= opts.feastol_inacc * 10.0
    reduced = False
    if status == "stalled":
        # fall back to the most accurate iterate seen; float64 floors out
        # well above the requested tolerances for badly conditioned
        # boundary optima, so a second, looser band still counts as solved
        # (flagged) rather than failed -- the bands follow the usual
        # inaccurate-solve thresholds of interior-point codes
        if best is not None and np.all(np.isfinite(best[1])):
            if best[2] <= opts.feastol and best[3] <= opts.feastol \
                    and best[4] <= opts.gaptol:
                status = "optimal"
            elif best[2] <= opts.feastol_inacc \
                    and best[3] <= opts.feastol_inacc \
                    and best[4] <= opts.gaptol_inacc:
                status = "optimal"
                reduced = True
            elif cert_ok:
                return ConicSolution(cert_kind, None, None, {}, math.inf,
                                     it, wall,
                                     info={"reduced_accuracy": True})
            else:
                status = "numerical_error"
        elif cert_ok:
            return ConicSolution(cert_kind, None, None, {}, math.inf, it,
                                 wall, info={"reduced_accuracy": True})
        else:
            return ConicSolution("numerical_error", None, None, {}, math.inf,
                                 it, wall, info={"tau": tau, "kappa": kappa})
    if status == "max_iter" and cert_ok:
        return ConicSolution(cert_kind, None, None, {}, math.inf, it, wall,
                             info={"reduced_accuracy": True})
    if best is None or not np.all(np.isfinite(best[1])):
        return ConicSolution("numerical_error", None, None, {}, math.inf, it,
                             wall, info={"tau": tau, "kappa": kappa})
    xhat = best[1]
    relgap_out = best[4]
    x_full = _reconstruct(st, xhat)
    res = prog.check_feasibility(x_full)
    obj = float(prog.objective @ x_full)
    info = {"best_iter": best[5]}
    if reduced:
        info["reduced_accuracy"] = True
    return ConicSolution(status, x_full, obj, res, relgap_out, it, wall,
                         info=info)
