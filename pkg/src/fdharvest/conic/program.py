"""Solver-agnostic conic program container and a builder layer.

A program is a set of sparse linear equalities/inequalities over ``n_vars``
real variables together with cone memberships expressed as *index groups*:
``soc_blocks`` lists variable groups ``[head, tail...]`` constrained to
``||x_tail|| <= x_head`` and ``psd_blocks`` lists groups holding the
scaled lower triangle (svec) of a symmetric matrix required PSD.

The svec convention stores the lower triangle row-major with off-diagonal
entries multiplied by sqrt(2), so Euclidean inner products of svec vectors
equal trace inner products of the matrices they represent.

Complex Hermitian blocks are carried as the real symmetric embedding
``[[Re, -Im], [Im, Re]]`` of doubled size; equality rows tie the repeated
entries together so the block stays a plain index group.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

SQRT2 = math.sqrt(2.0)


def tri_dim(d: int) -> int:
    return d * (d + 1) // 2


def _mat_dim(tri: int) -> int:
    d = (math.isqrt(8 * tri + 1) - 1) // 2
    if tri_dim(d) != tri:
        raise ValueError(f"{tri} is not a triangular number")
    return d


def svec_to_mat(v: np.ndarray) -> np.ndarray:
    """Expand a sqrt(2)-scaled lower triangle into the full symmetric matrix."""
    d = _mat_dim(len(v))
    M = np.zeros((d, d))
    k = 0
    for i in range(d):
        for j in range(i + 1):
            M[i, j] = v[k] if i == j else v[k] / SQRT2
            M[j, i] = M[i, j]
            k += 1
    return M


def mat_to_svec(M: np.ndarray) -> np.ndarray:
    d = M.shape[0]
    out = np.empty(tri_dim(d))
    k = 0
    for i in range(d):
        for j in range(i + 1):
            out[k] = M[i, j] if i == j else SQRT2 * M[i, j]
            k += 1
    return out


@dataclass
class ConicProgram:
    """Immutable-ish standard form handed to a solver backend."""

    n_vars: int
    objective: np.ndarray                 # maximize objective @ x
    eq_constraints: list                  # (idx array, coeff array, rhs)
    ineq_constraints: list                # (idx array, coeff array, rhs): a.x <= rhs
    soc_blocks: list                      # index arrays, [head, *tail]
    psd_blocks: list                      # index arrays, svec groups
    var_lb: np.ndarray
    var_ub: np.ndarray
    names: list

    def validate(self):
        n = self.n_vars
        if self.objective.shape != (n,):
            raise ValueError("objective length mismatch")
        if len(self.names) != n:
            raise ValueError("name map length mismatch")
        if self.var_lb.shape != (n,) or self.var_ub.shape != (n,):
            raise ValueError("bound vector length mismatch")
        if np.any(self.var_lb > self.var_ub):
            raise ValueError("lower bound exceeds upper bound")
        for rows in (self.eq_constraints, self.ineq_constraints):
            for idx, coef, rhs in rows:
                if len(idx) != len(coef):
                    raise ValueError("row index/coefficient length mismatch")
                if len(idx) and (idx.min() < 0 or idx.max() >= n):
                    raise ValueError("row index out of range")
        for blk in self.soc_blocks:
            if len(blk) < 2:
                raise ValueError("SOC block needs a head and at least one tail")
            if blk.min() < 0 or blk.max() >= n:
                raise ValueError("SOC index out of range")
        for blk in self.psd_blocks:
            _mat_dim(len(blk))
            if blk.min() < 0 or blk.max() >= n:
                raise ValueError("PSD index out of range")

    # -- reporting ---------------------------------------------------------

    def check_feasibility(self, x: np.ndarray) -> dict:
        """Worst signed violation per constraint class (<= 0 is feasible,
        PSD reported as max(0, -lambda_min))."""
        x = np.asarray(x, dtype=float)
        out = {"eq": 0.0, "ineq": 0.0, "soc": 0.0, "psd": 0.0, "bounds": 0.0}
        for idx, coef, rhs in self.eq_constraints:
            out["eq"] = max(out["eq"], abs(float(coef @ x[idx]) - rhs))
        vals = [float(coef @ x[idx]) - rhs for idx, coef, rhs in self.ineq_constraints]
        if vals:
            out["ineq"] = max(vals)
        socs = [float(np.linalg.norm(x[blk[1:]])) - x[blk[0]] for blk in self.soc_blocks]
        if socs:
            out["soc"] = max(socs)
        psds = []
        for blk in self.psd_blocks:
            w = np.linalg.eigvalsh(svec_to_mat(x[blk]))
            psds.append(max(0.0, -float(w[0])))
        if psds:
            out["psd"] = max(psds)
        lo = self.var_lb - x
        hi = x - self.var_ub
        finite = np.concatenate([lo[np.isfinite(lo)], hi[np.isfinite(hi)]])
        if finite.size:
            out["bounds"] = float(np.max(finite))
        out["max"] = max(out.values())
        return out

    # -- serialization -----------------------------------------------------

    def to_json_dict(self) -> dict:
        def rows(rs):
            return [[r[0].tolist(), r[1].tolist(), r[2]] for r in rs]

        def fin(v):
            return [None if not np.isfinite(t) else t for t in v.tolist()]

        return {
            "n_vars": self.n_vars,
            "objective": self.objective.tolist(),
            "eq_constraints": rows(self.eq_constraints),
            "ineq_constraints": rows(self.ineq_constraints),
            "soc_blocks": [b.tolist() for b in self.soc_blocks],
            "psd_blocks": [b.tolist() for b in self.psd_blocks],
            "var_lb": fin(self.var_lb),
            "var_ub": fin(self.var_ub),
            "names": list(self.names),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ConicProgram":
        def rows(rs):
            return [(np.asarray(i, dtype=int), np.asarray(c, dtype=float), float(r))
                    for i, c, r in rs]

        def unfin(v, fill):
            return np.array([fill if t is None else t for t in v], dtype=float)

        prog = cls(
            n_vars=d["n_vars"],
            objective=np.asarray(d["objective"], dtype=float),
            eq_constraints=rows(d["eq_constraints"]),
            ineq_constraints=rows(d["ineq_constraints"]),
            soc_blocks=[np.asarray(b, dtype=int) for b in d["soc_blocks"]],
            psd_blocks=[np.asarray(b, dtype=int) for b in d["psd_blocks"]],
            var_lb=unfin(d["var_lb"], -np.inf),
            var_ub=unfin(d["var_ub"], np.inf),
            names=list(d["names"]),
        )
        prog.validate()
        return prog

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path) -> "ConicProgram":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


class AffExpr:
    """Sparse affine form ``sum coeff_i x_i + const`` used by the builder."""

    __slots__ = ("terms", "const")

    def __init__(self, terms=None, const=0.0):
        self.terms = dict(terms) if terms else {}
        self.const = float(const)

    @classmethod
    def var(cls, idx: int, coeff: float = 1.0) -> "AffExpr":
        return cls({idx: float(coeff)})

    @classmethod
    def const_(cls, c: float) -> "AffExpr":
        return cls({}, c)

    def copy(self) -> "AffExpr":
        return AffExpr(self.terms, self.const)

    def __add__(self, other):
        out = self.copy()
        if isinstance(other, AffExpr):
            for k, v in other.terms.items():
                out.terms[k] = out.terms.get(k, 0.0) + v
            out.const += other.const
        else:
            out.const += float(other)
        return out

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, AffExpr):
            return self + other * -1.0
        return self + (-float(other))

    def __rsub__(self, other):
        return (self * -1.0) + other

    def __mul__(self, scalar):
        s = float(scalar)
        return AffExpr({k: v * s for k, v in self.terms.items()}, self.const * s)

    __rmul__ = __mul__

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(v * x[k] for k, v in self.terms.items())

    def compact(self, drop_below: float = 0.0) -> "AffExpr":
        return AffExpr({k: v for k, v in self.terms.items()
                        if v != 0.0 and abs(v) > drop_below}, self.const)


def cplx_inner(h: np.ndarray, re_idx, im_idx):
    """Affine forms for Re and Im of ``h^H w`` over split real variables.

    ``w`` is represented by real/imag coordinate variables ``re_idx``,
    ``im_idx``; with h = a + ib and w = u + iv,
    Re(h^H w) = a.u + b.v and Im(h^H w) = a.v - b.u.
    """
    a, b = np.real(h), np.imag(h)
    re = AffExpr()
    im = AffExpr()
    for m in range(len(h)):
        if a[m]:
            re.terms[re_idx[m]] = re.terms.get(re_idx[m], 0.0) + a[m]
            im.terms[im_idx[m]] = im.terms.get(im_idx[m], 0.0) + a[m]
        if b[m]:
            re.terms[im_idx[m]] = re.terms.get(im_idx[m], 0.0) + b[m]
            im.terms[re_idx[m]] = im.terms.get(re_idx[m], 0.0) - b[m]
    return re, im


class HermitianBlock:
    """Bookkeeping for one complex Hermitian PSD variable.

    The block owns the svec slots of its 2Mx2M real embedding; repeated
    and antisymmetric entries are tied by equality rows at creation so
    the PSD membership stays a plain index group.
    """

    def __init__(self, M: int, slot_a, slot_b):
        self.M = M
        self._a = slot_a   # dict (i, j) i >= j -> var idx of Re part slot
        self._b = slot_b   # dict (i, j) i > j  -> var idx of Im part slot

    def lin(self, S: np.ndarray) -> AffExpr:
        """Affine form equal to Re tr(S W) for Hermitian weight S."""
        M = self.M
        C, D = np.real(S), np.imag(S)
        e = AffExpr()
        for i in range(M):
            e += AffExpr.var(self._a[(i, i)], C[i, i])
            for j in range(i):
                if C[i, j]:
                    e += AffExpr.var(self._a[(i, j)], SQRT2 * C[i, j])
                if D[i, j]:
                    e += AffExpr.var(self._b[(i, j)], SQRT2 * D[i, j])
        return e

    def quad(self, h: np.ndarray) -> AffExpr:
        """Affine form equal to h^H W h."""
        return self.lin(np.outer(h, h.conj()))

    def trace(self) -> AffExpr:
        return self.lin(np.eye(self.M, dtype=complex))

    def values(self, W: np.ndarray) -> dict:
        """Variable assignment embedding a numeric Hermitian W."""
        A, B = np.real(W), np.imag(W)
        out = {}
        for i in range(self.M):
            out[self._a[(i, i)]] = A[i, i]
            for j in range(i):
                out[self._a[(i, j)]] = SQRT2 * A[i, j]
                out[self._b[(i, j)]] = SQRT2 * B[i, j]
        return out

    def extract(self, x: np.ndarray) -> np.ndarray:
        """Recover the complex matrix from a solution vector."""
        M = self.M
        W = np.zeros((M, M), dtype=complex)
        for i in range(M):
            W[i, i] = x[self._a[(i, i)]]
            for j in range(i):
                re = x[self._a[(i, j)]] / SQRT2
                im = x[self._b[(i, j)]] / SQRT2
                W[i, j] = re + 1j * im
                W[j, i] = re - 1j * im
        return W


class ProgramBuilder:
    """Incremental construction of a ConicProgram.

    Cone helpers accept affine expressions; non-trivial entries get an
    auxiliary variable plus a defining equality row, which the solver's
    presolve later substitutes away.
    """

    def __init__(self):
        self._lb = []
        self._ub = []
        self._names = []
        self._eq = []
        self._ineq = []
        self._soc = []
        self._psd = []
        self._obj = AffExpr()

    @property
    def n_vars(self):
        return len(self._names)

    def add_var(self, name: str, lb=None, ub=None) -> int:
        self._names.append(name)
        self._lb.append(-np.inf if lb is None else float(lb))
        self._ub.append(np.inf if ub is None else float(ub))
        return len(self._names) - 1

    def add_vars(self, prefix: str, n: int, lb=None, ub=None):
        return [self.add_var(f"{prefix}[{k}]", lb, ub) for k in range(n)]

    @staticmethod
    def _as_expr(e) -> AffExpr:
        if isinstance(e, AffExpr):
            return e
        if isinstance(e, (int, np.integer)):
            return AffExpr.var(int(e))
        if isinstance(e, float):
            return AffExpr.const_(e)
        raise TypeError(f"cannot interpret {e!r} as affine expression")

    def _row(self, expr: AffExpr):
        expr = expr.compact()
        idx = np.fromiter(expr.terms.keys(), dtype=int, count=len(expr.terms))
        coef = np.fromiter(expr.terms.values(), dtype=float, count=len(expr.terms))
        order = np.argsort(idx)
        return idx[order], coef[order], expr.const

    def add_eq(self, expr, rhs: float = 0.0):
        idx, coef, const = self._row(self._as_expr(expr))
        self._eq.append((idx, coef, float(rhs) - const))

    def add_ineq(self, expr, rhs: float = 0.0):
        """Constrain expr <= rhs."""
        idx, coef, const = self._row(self._as_expr(expr))
        self._ineq.append((idx, coef, float(rhs) - const))

    def _materialize(self, e, tag: str) -> int:
        """Variable index whose value equals the expression."""
        e = self._as_expr(e)
        if len(e.terms) == 1 and e.const == 0.0:
            (k, v), = e.terms.items()
            if v == 1.0:
                return k
        a = self.add_var(tag)
        self.add_eq(e - AffExpr.var(a), 0.0)
        return a

    def add_soc(self, head, tails, tag: str = "soc"):
        """|| tails ||_2 <= head, entries given as affine expressions."""
        hi = self._materialize(head, f"{tag}.h")
        ti = [self._materialize(t, f"{tag}.t{k}") for k, t in enumerate(tails)]
        self._soc.append(np.asarray([hi] + ti, dtype=int))

    def add_rotated(self, x, y, ts, tag: str = "rot"):
        """x*y >= sum t_k^2 with x + y >= 0 (so x, y >= 0 individually)."""
        x = self._as_expr(x)
        y = self._as_expr(y)
        head = x + y
        tails = [x - y] + [self._as_expr(t) * 2.0 for t in ts]
        self.add_soc(head, tails, tag=tag)

    def add_quad_le(self, ts, bound, tag: str = "quad"):
        """sum t_k^2 <= bound."""
        self.add_rotated(bound, AffExpr.const_(1.0), ts, tag=tag)

    def add_psd_block(self, d: int, tag: str = "psd"):
        """Real symmetric d x d PSD variable; returns svec slot indices."""
        slots = []
        for i in range(d):
            for j in range(i + 1):
                slots.append(self.add_var(f"{tag}[{i},{j}]"))
        self._psd.append(np.asarray(slots, dtype=int))
        return slots

    def add_hermitian_psd(self, M: int, tag: str = "hpsd") -> HermitianBlock:
        """Complex Hermitian M x M PSD variable via real embedding."""
        d = 2 * M
        slot = {}
        order = []
        for r in range(d):
            for c in range(r + 1):
                v = self.add_var(f"{tag}[{r},{c}]")
                slot[(r, c)] = v
                order.append(v)
        self._psd.append(np.asarray(order, dtype=int))
        a = {}
        b = {}
        for i in range(M):
            for j in range(i + 1):
                a[(i, j)] = slot[(i, j)]
                # duplicate Re block: embedding entry (M+i, M+j)
                self.add_eq(AffExpr.var(slot[(M + i, M + j)]) - AffExpr.var(slot[(i, j)]))
        for i in range(M):
            for j in range(M):
                if i == j:
                    self.add_eq(AffExpr.var(slot[(M + i, i)]))  # Im diagonal is zero
                elif i > j:
                    b[(i, j)] = slot[(M + i, j)]
                else:
                    # antisymmetry of the Im block
                    self.add_eq(AffExpr.var(slot[(M + i, j)]) + AffExpr.var(slot[(M + j, i)]))
        return HermitianBlock(M, a, b)

    def set_objective_max(self, expr):
        self._obj = self._as_expr(expr)

    def build(self) -> ConicProgram:
        n = self.n_vars
        c = np.zeros(n)
        for k, v in self._obj.terms.items():
            c[k] += v
        prog = ConicProgram(
            n_vars=n,
            objective=c,
            eq_constraints=list(self._eq),
            ineq_constraints=list(self._ineq),
            soc_blocks=list(self._soc),
            psd_blocks=list(self._psd),
            var_lb=np.asarray(self._lb, dtype=float),
            var_ub=np.asarray(self._ub, dtype=float),
            names=list(self._names),
        )
        prog.validate()
        return prog
