"""Convex inner approximation of the joint beamforming/power/time-split design.

The efficiency maximization is nonconvex three ways at once: rates couple to
the time split through ``alpha * log(1 + SINR)``, transmit covariances
multiply UE powers inside SINRs, and the objective is a ratio.  The lifted
form used throughout this module introduces per-phase SINR floors ``u``,
rate slacks ``z`` (natural log), exponential links ``t >= e^z``, phase-2
interference budgets ``b``, the inverse-power pair ``(c, tau)``, and a
geometric-mean proxy ``q`` of the efficiency with ``q^2 <= (sum z) * tau``.
Freezing an :class:`ExpansionPoint` turns every remaining nonconvexity into
one of four scalar surrogate families:

* ``surrogate_f1`` -- affine minorant of ``|x|^2 / y`` (global, because the
  function is jointly convex),
* ``surrogate_f2`` -- tangent plane of ``x / y``,
* ``surrogate_f3`` -- tangent plane of ``x ** (1/y)``,
* ``surrogate_f4_upper`` -- AM-GM majorant of the product ``x * y``.

``soc_exp_upper`` replaces each ``t >= e^z`` link with a squaring tower of
rotated cones so the emitted program needs no exponential-cone support.
:func:`build_subproblem` assembles the full inner program; all SINR-bearing
rows are stated on noise-normalized channels so their coefficients stay
near unity regardless of the configured noise floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channels import ChannelRealization
from .config import SystemConfig
from .conic import AffExpr, ConicProgram, ProgramBuilder
from .conic.program import cplx_inner
from .model import LN2, DesignPoint, DesignSlacks

# Regularizing floors applied when a snapshot is taken at a design whose
# streams carry (almost) no power.  They keep every linearization ratio
# defined and leave the surrounding rows a usable ascent direction instead
# of an identically-zero credit.  All three are far below the power scales
# the budgets allow, so they do not move the physics.
W1_AMP_FLOOR = 1e-4       # beamformer amplitude added along the user channel
W2_EIG_FLOOR = 1e-12      # ridge added to each lifted covariance
P2_FLOOR = 1e-8           # watts of uplink power assumed present


# ---------------------------------------------------------------------------
# scalar surrogates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class F1Minorant:
    """Affine lower bound of ``f(x, y) = |x|^2 / y`` anchored at (x_n, y_n).

    ``F1(x, y) = inner_coef * Re(conj(x_n) x) + y_coef * y``; the bound is
    global because f is jointly convex on y > 0, and it is tight at the
    anchor.
    """

    x_n: complex
    y_n: float

    @property
    def inner_coef(self) -> float:
        return 2.0 / self.y_n

    @property
    def y_coef(self) -> float:
        return -abs(self.x_n) ** 2 / self.y_n ** 2

    def value(self, x, y) -> float:
        return self.inner_coef * (self.x_n.conjugate() * x).real + self.y_coef * y


@dataclass(frozen=True)
class TangentPlane:
    """First-order model ``const + coef_x x + coef_y y`` of a smooth f."""

    x_n: float
    y_n: float
    coef_x: float
    coef_y: float
    const: float

    def value(self, x, y) -> float:
        return self.const + self.coef_x * x + self.coef_y * y


@dataclass(frozen=True)
class F4Majorant:
    """AM-GM upper bound of ``x * y``: ``0.5 * (phi x^2 + y^2 / phi)``.

    With ``phi = y_n / x_n`` the bound touches the product at the anchor
    and dominates it for every x, y >= 0.
    """

    x_n: float
    y_n: float

    @property
    def phi(self) -> float:
        return self.y_n / self.x_n

    def value(self, x, y) -> float:
        return 0.5 * (self.phi * x ** 2 + y ** 2 / self.phi)


def surrogate_f1(x_n, y_n: float) -> F1Minorant:
    """Affine minorant of ``|x|^2 / y`` at ``(x_n, y_n)``, ``y_n > 0``."""
    if y_n <= 0.0:
        raise ValueError("f1 linearization needs y_n > 0")
    return F1Minorant(complex(x_n), float(y_n))


def surrogate_f2(x_n: float, y_n: float) -> TangentPlane:
    """Tangent plane of ``x / y`` at ``(x_n, y_n)``, ``y_n > 0``."""
    if y_n <= 0.0:
        raise ValueError("f2 linearization needs y_n > 0")
    return TangentPlane(float(x_n), float(y_n),
                        coef_x=1.0 / y_n,
                        coef_y=-x_n / y_n ** 2,
                        const=x_n / y_n)


def surrogate_f3(x_n: float, y_n: float) -> TangentPlane:
    """Tangent plane of ``x ** (1/y)`` at ``x_n >= 1``, ``y_n in (0, 1)``."""
    if x_n < 1.0:
        raise ValueError("f3 linearization needs x_n >= 1")
    if not 0.0 < y_n < 1.0:
        raise ValueError("f3 linearization needs y_n in (0, 1)")
    f = x_n ** (1.0 / y_n)
    gx = f / (x_n * y_n)                      # (1/y) x^(1/y - 1)
    gy = -f * math.log(x_n) / y_n ** 2
    return TangentPlane(float(x_n), float(y_n), coef_x=gx, coef_y=gy,
                        const=f - gx * x_n - gy * y_n)


def surrogate_f4_upper(x_n: float, y_n: float) -> F4Majorant:
    """Convex upper bound of ``x * y`` anchored at positive ``(x_n, y_n)``."""
    if x_n <= 0.0 or y_n <= 0.0:
        raise ValueError("f4 majorant needs x_n > 0 and y_n > 0")
    return F4Majorant(float(x_n), float(y_n))


# ---------------------------------------------------------------------------
# SOC tower for t >= e^z
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SocApproxConfig:
    """Accuracy knobs of the ``t >= e^z`` squaring tower.

    The tower seeds a cubic Taylor lower bound of ``e^(z / 2^m)`` and
    squares it ``m`` times, so its minimal feasible ``t`` undershoots
    ``e^z`` by at most :meth:`rel_error`.  ``z_max`` is the range the
    tower is certified for; rows emitted by :func:`soc_exp_upper` pin
    ``z`` below it.
    """

    m: int = 6
    z_max: float = 9.0

    def validate(self):
        if self.m < 3:
            raise ValueError("tower level m must be at least 3")
        if self.z_max <= 0.0:
            raise ValueError("z_max must be positive")

    def rel_error(self, z: float) -> float:
        """Padded analytic bound on the relative undershoot at ``z``."""
        return -math.expm1(-1.05 * z ** 4 / (24.0 * 8.0 ** self.m))

    @property
    def seed_top(self) -> float:
        """Seed polynomial at the top of the certified range."""
        v = self.z_max * 2.0 ** (-self.m)
        return 1.0 + v + v * v / 2.0 + v ** 3 / 6.0

    @property
    def t_scale(self) -> float:
        """Static scale of the exponential output, ``~e^{z_max}``.

        Chain variables are normalized by their value at ``z = z_max``;
        this keeps every tower entry at or below order one anywhere in
        the certified range, which the interior-point backend needs --
        raw chains spanning ``1 .. e^{z_max}`` stall its gap refinement.
        The consumer of a ``t`` variable multiplies by this factor.
        """
        return self.seed_top ** (2 ** self.m)

    @classmethod
    def for_system(cls, cfg: SystemConfig, ch: ChannelRealization,
                   target_rel_err: float = 1e-3) -> "SocApproxConfig":
        """Range from the rate cap the budgets/channels allow, level from it.

        ``beta * ln(1 + s / beta)`` is increasing in the phase fraction
        ``beta``, so the per-phase log-rate of any slack is at most
        ``ln(1 + s)`` with ``s`` the full budget on the strongest channel
        against its noise floor; one spare nat absorbs slack drift.
        """
        s = 0.0
        for i in range(cfg.K_D):
            s = max(s, cfg.P_b_max * float(np.sum(np.abs(ch.h[i]) ** 2))
                    / cfg.sigma2_dl[i])
        for j in range(cfg.K_U):
            s = max(s, cfg.P_u_max * float(np.sum(np.abs(ch.g[j]) ** 2))
                    / cfg.sigma2_ul)
        z_cap = math.log1p(s) + 1.0
        m = 6
        while cls(m=m, z_max=z_cap).rel_error(z_cap) > target_rel_err and m < 16:
            m += 1
        return cls(m=m, z_max=z_cap)


def soc_exp_upper(pb: ProgramBuilder, z, t, approx: SocApproxConfig, *,
                  tag: str = "exp", z_ref: float | None = None,
                  anchor: dict | None = None) -> list:
    """Emit rotated-cone rows enforcing ``t >= (lower bound of e^z)``.

    ``z`` and ``t`` may be variable indices or affine expressions in
    physical units.  When the range is wide, ``t`` should be expressed
    through a variable normalized by :attr:`SocApproxConfig.t_scale`
    (pass ``AffExpr.var(t_hat, t_scale)``) so the cone coefficient and
    the variable both stay near one; a raw variable that must reach
    ``e^{z_max}`` makes the interior-point backend mistake the problem
    for an infeasible one.  The seed ``s_0 >= 1 + v + v^2/2 + v^3/6`` with
    ``v = z / 2^m`` uses one rotated cone for the square and one (with
    ``v`` in the affine slot) for the cube, then ``m`` squarings chain
    up to ``t``.  Every chain variable is stored divided by its value at
    ``z = z_max``; the normalization telescopes through the squarings
    (``sigma_k = sigma_{k-1}^2``), so the cones keep their unit form and
    only the seed row and the final cone carry a scale factor.  Returns
    the indices of the normalized chain variables.

    ``z_ref`` (when given) is checked against the certified range and,
    together with ``anchor``, records a feasible assignment of the
    auxiliary variables at the expansion point.
    """
    approx.validate()
    if z_ref is not None and z_ref > approx.z_max * (1.0 + 1e-12) + 1e-12:
        raise ValueError(
            f"z reference {z_ref:.4g} exceeds the certified tower range "
            f"{approx.z_max:.4g}; rebuild with a larger z_max (and m)")
    z = z if isinstance(z, AffExpr) else AffExpr.var(int(z))
    t = t if isinstance(t, AffExpr) else AffExpr.var(int(t))
    scale = 2.0 ** (-approx.m)
    v = z * scale
    sq = pb.add_var(f"{tag}.a", lb=0.0)
    cu = pb.add_var(f"{tag}.b", lb=0.0)
    pb.add_rotated(AffExpr.var(sq, 2.0), AffExpr.const_(1.0), [v],
                   tag=f"{tag}.sq")
    # v in the second slot keeps the cube bound exact at the seed optimum:
    # 6 b v >= (2 a)^2 = v^4 gives b >= v^3 / 6 (and forces v >= 0)
    pb.add_rotated(AffExpr.var(cu, 6.0), v, [AffExpr.var(sq, 2.0)],
                   tag=f"{tag}.cu")
    sigma = approx.seed_top
    chain = []
    prev = pb.add_var(f"{tag}.s0", lb=1.0 / sigma)
    pb.add_ineq(v + AffExpr.var(sq) + AffExpr.var(cu)
                - AffExpr.var(prev, sigma), -1.0)
    chain.append(prev)
    for k in range(1, approx.m):
        sigma = sigma * sigma
        nxt = pb.add_var(f"{tag}.s{k}", lb=1.0 / sigma)
        pb.add_rotated(AffExpr.var(nxt), AffExpr.const_(1.0),
                       [AffExpr.var(prev)], tag=f"{tag}.sq{k}")
        chain.append(nxt)
        prev = nxt
    pb.add_rotated(t * (1.0 / (sigma * sigma)), AffExpr.const_(1.0),
                   [AffExpr.var(prev)], tag=f"{tag}.sq{approx.m}")
    pb.add_ineq(z, approx.z_max)   # stay inside the certified range
    if anchor is not None and z_ref is not None:
        vv = max(z_ref, 0.0) * scale
        anchor[sq] = vv * vv / 2.0
        anchor[cu] = vv ** 3 / 6.0
        ratio = (1.0 + vv + anchor[sq] + anchor[cu]) / approx.seed_top
        for var in chain:
            anchor[var] = ratio
            ratio = ratio * ratio
    return chain


# ---------------------------------------------------------------------------
# expansion point
# ---------------------------------------------------------------------------

def _normalized(cfg: SystemConfig, ch: ChannelRealization):
    """Channels divided by the receiving-side noise standard deviation."""
    sd = np.sqrt(np.asarray(cfg.sigma2_dl, dtype=float))
    su = math.sqrt(cfg.sigma2_ul)
    ht = ch.h / sd[:, None]
    gt = ch.g / su
    gxt = ch.g_cross / sd[None, :]
    Ht = ch.H_on / su
    return ht, gt, gxt, Ht


@dataclass
class ExpansionPoint:
    """Snapshot of every quantity a linearization in the inner program uses.

    ``v_ul`` holds the fixed directions of the uplink SINR minorants
    (one per uplink UE), ``phi1``/``phi2`` the product-split ratios of
    the AM-GM majorants.  Slack entries are mutually consistent: ``z``
    is the per-phase log-rate implied by ``u``, ``t = e^z``, ``c`` is
    the inverse per-alpha supply draw and ``tau = c / alpha``.
    """

    w1: np.ndarray          # (K_D, M_T) complex
    alpha: float
    c: float
    tau: float
    u_dl1: np.ndarray
    u_dl2: np.ndarray
    u_ul: np.ndarray
    t_dl1: np.ndarray
    t_dl2: np.ndarray
    t_ul: np.ndarray
    b: np.ndarray
    z_dl1: np.ndarray
    z_dl2: np.ndarray
    z_ul: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    p2b: float
    W2: np.ndarray          # (K_D, M_T, M_T) complex, PSD
    v_ul: np.ndarray        # (K_U, M_R) complex
    phi1: float
    phi2: np.ndarray

    @property
    def w2_trace(self) -> np.ndarray:
        return np.real(np.trace(self.W2, axis1=1, axis2=2))

    def validate(self, cfg: SystemConfig | None = None,
                 include_phase1: bool = True):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie strictly inside (0, 1)")
        if self.c <= 0.0 or self.tau <= 0.0:
            raise ValueError("c and tau must be positive")
        if self.phi1 <= 0.0 or np.any(self.phi2 <= 0.0) \
                or not np.all(np.isfinite(self.phi2)):
            raise ValueError("product-split ratios must be positive finite")
        for t in (self.t_dl1, self.t_dl2, self.t_ul):
            if np.any(t < 1.0 - 1e-12):
                raise ValueError("exponential slacks t must be >= 1")
        if np.any(self.b < 1.0 - 1e-9):
            raise ValueError("interference budgets b must be >= 1 (normalized)")
        if np.any(self.u_dl2 <= 0.0):
            raise ValueError("phase-2 SINR snapshot must be positive")
        if include_phase1 and np.any(self.u_dl1 <= 0.0):
            raise ValueError("phase-1 SINR snapshot must be positive")
        for z in (self.z_dl1, self.z_dl2, self.z_ul):
            if np.any(z < -1e-12):
                raise ValueError("rate slacks must be nonnegative")
        if np.any(self.p1 < 0.0) or np.any(self.p2 < 0.0) or self.p2b < 0.0:
            raise ValueError("powers must be nonnegative")
        if cfg is not None:
            if self.w1.shape != (cfg.K_D, cfg.M_T):
                raise ValueError("w1 snapshot has wrong shape")
            if self.W2.shape != (cfg.K_D, cfg.M_T, cfg.M_T):
                raise ValueError("W2 snapshot has wrong shape")
            if self.v_ul.shape != (cfg.K_U, cfg.M_R):
                raise ValueError("v_ul has wrong shape")
            if len(self.u_ul) != cfg.K_U or len(self.b) != cfg.K_D:
                raise ValueError("slack arrays have wrong length")

    @classmethod
    def from_design_point(cls, cfg: SystemConfig, ch: ChannelRealization,
                          dp: DesignPoint, *,
                          include_phase1: bool = True) -> "ExpansionPoint":
        """Consistent snapshot of a physical design.

        SINRs, rate slacks, the interference budgets and the power pair
        ``(c, tau)`` are recomputed here (matrix path for phase 2), so a
        design coming back from a solve is re-anchored at its true
        operating point rather than at the solver's slack values.
        """
        cfg.validate()
        ch.validate(cfg)
        dp.validate(cfg)
        a = dp.alpha
        if not cfg.alpha_min <= a <= 1.0 - cfg.alpha_min:
            raise ValueError("alpha outside the allowed window")
        K_D, K_U = cfg.K_D, cfg.K_U
        ht, gt, gxt, Ht = _normalized(cfg, ch)

        if include_phase1:
            w1 = dp.w1.astype(complex).copy()
            for i in range(K_D):
                if np.linalg.norm(w1[i]) < W1_AMP_FLOOR:
                    hn = max(float(np.linalg.norm(ch.h[i])), 1e-30)
                    w1[i] = w1[i] + (W1_AMP_FLOOR / hn) * ch.h[i]
            p1 = np.asarray(dp.p1, dtype=float).copy()
        else:
            w1 = np.zeros((K_D, cfg.M_T), dtype=complex)
            p1 = np.zeros(K_U)

        # ridge + eigenvalue clip keep every covariance strictly PSD
        W2 = np.empty((K_D, cfg.M_T, cfg.M_T), dtype=complex)
        for i, W in enumerate(dp.w2_matrices()):
            W = 0.5 * (W + W.conj().T)
            lam, V = np.linalg.eigh(W)
            W2[i] = (V * np.maximum(lam, 0.0)) @ V.conj().T \
                + W2_EIG_FLOOR * np.eye(cfg.M_T)
        p2 = np.maximum(np.asarray(dp.p2, dtype=float), P2_FLOOR) \
            if K_U else np.zeros(0)

        u1 = np.zeros(K_D)
        if include_phase1:
            S1 = ht.conj() @ w1.T          # row i: h_i^H w1_k over k
            for i in range(K_D):
                own = abs(S1[i, i]) ** 2
                cross = float(np.sum(np.abs(S1[i]) ** 2)) - own
                ue = float(np.sum(p1 * np.abs(gxt[:, i]) ** 2)) if K_U else 0.0
                u1[i] = own / (1.0 + cross + ue)
        z1 = a * np.log1p(u1) if include_phase1 else np.zeros(K_D)
        t1 = np.exp(z1)

        quad = np.real(np.einsum("im,kmn,in->ik", ht.conj(), W2, ht))
        b = np.empty(K_D)
        u2 = np.empty(K_D)
        for i in range(K_D):
            cross = float(np.sum(quad[i])) - quad[i, i]
            ue = float(np.sum(p2 * np.abs(gxt[:, i]) ** 2)) if K_U else 0.0
            b[i] = 1.0 + cross + ue
            u2[i] = quad[i, i] / b[i]
        z2 = (1.0 - a) * np.log1p(u2)
        t2 = np.exp(z2)

        uu = np.zeros(K_U)
        v_ul = np.zeros((K_U, cfg.M_R), dtype=complex)
        if K_U:
            base = np.eye(cfg.M_R, dtype=complex) \
                + Ht.conj().T @ W2.sum(axis=0) @ Ht
            for j in range(K_U):
                X = base.copy()
                for l in range(j + 1, K_U):
                    X += p2[l] * np.outer(gt[l], gt[l].conj())
                sol = np.linalg.solve(X, gt[j])
                uu[j] = p2[j] * float(np.real(np.vdot(gt[j], sol)))
                v_ul[j] = math.sqrt(p2[j]) * sol
        zu = (1.0 - a) * np.log1p(uu)
        tu = np.exp(zu)

        p2b = max(float(dp.p2b), 0.0)
        spend = (float(np.sum(np.abs(w1) ** 2)) / cfg.epsilon + cfg.P_cir
                 + (1.0 / a - 1.0) * p2b
                 + float(np.sum(p1 + (1.0 / a - 1.0) * p2)))
        c = 1.0 / spend
        tau = c / a

        xp = cls(w1=w1, alpha=a, c=c, tau=tau,
                 u_dl1=(u1 if include_phase1 else np.zeros(K_D)),
                 u_dl2=u2, u_ul=uu, t_dl1=t1, t_dl2=t2, t_ul=tu, b=b,
                 z_dl1=z1, z_dl2=z2, z_ul=zu, p1=p1, p2=p2, p2b=p2b,
                 W2=W2, v_ul=v_ul, phi1=tau / a, phi2=b / u2)
        xp.validate(cfg, include_phase1=include_phase1)
        return xp


# ---------------------------------------------------------------------------
# subproblem assembly
# ---------------------------------------------------------------------------

def _complete_anchor(prog: ConicProgram, known: dict) -> np.ndarray:
    """Fill auxiliary slots by propagating through the equality rows.

    Every variable the builder materialized has one defining equality;
    repeated sweeps solve each row that is one unknown short until the
    whole vector is determined.
    """
    x = np.full(prog.n_vars, np.nan)
    for k, v in known.items():
        x[k] = v
    rows = prog.eq_constraints
    for _ in range(len(rows) + 1):
        progress = False
        for idx, coef, rhs in rows:
            vals = x[idx]
            miss = np.isnan(vals)
            if int(miss.sum()) != 1:
                continue
            k = int(np.flatnonzero(miss)[0])
            if coef[k] == 0.0:
                continue
            x[idx[k]] = (rhs - float(coef[~miss] @ vals[~miss])) / coef[k]
            progress = True
        if not progress:
            break
    if np.isnan(x).any():
        raise RuntimeError("failed to reconstruct auxiliary expansion values")
    return x


@dataclass
class Subproblem:
    """One emitted inner program plus the index map to read it back."""

    program: ConicProgram
    cfg: SystemConfig
    soc: SocApproxConfig
    anchor: np.ndarray
    idx: dict
    w2_blocks: list
    include_phase1: bool
    relax_min_rate: bool
    rbar: float
    t_scale: float

    def _arr(self, x, key) -> np.ndarray:
        return np.array([x[k] for k in self.idx[key]], dtype=float)

    def extract(self, x: np.ndarray) -> DesignPoint:
        """Design point (with slack bookkeeping) from a solution vector.

        Beamformer vectors ``w2`` are the dominant-eigenpair reading of
        the lifted covariances; the full matrices ride along in ``W2``.
        """
        cfg = self.cfg
        w1 = np.array([[x[k] for k in row] for row in self.idx["w1re"]]) \
            + 1j * np.array([[x[k] for k in row] for row in self.idx["w1im"]])
        W2 = np.stack([blk.extract(x) for blk in self.w2_blocks]) \
            if self.w2_blocks else np.zeros((0, cfg.M_T, cfg.M_T), complex)
        W2 = 0.5 * (W2 + np.conj(np.transpose(W2, (0, 2, 1))))
        w2 = np.zeros((cfg.K_D, cfg.M_T), dtype=complex)
        for i in range(cfg.K_D):
            lam, V = np.linalg.eigh(W2[i])
            w2[i] = V[:, -1] * math.sqrt(max(float(lam[-1]), 0.0))
        ts = self.t_scale
        slacks = DesignSlacks(
            z_dl1=self._arr(x, "z_dl1"), z_dl2=self._arr(x, "z_dl2"),
            z_ul=self._arr(x, "z_ul"), u_dl1=self._arr(x, "u_dl1"),
            u_dl2=self._arr(x, "u_dl2"), u_ul=self._arr(x, "u_ul"),
            t_dl1=ts * self._arr(x, "t_dl1"),
            t_dl2=ts * self._arr(x, "t_dl2"),
            t_ul=ts * self._arr(x, "t_ul"), b=self._arr(x, "b"),
            x=self._arr(x, "x_ul"), c=float(x[self.idx["c"]]),
            tau=float(x[self.idx["tau"]]), q=float(x[self.idx["q"]]))
        return DesignPoint(
            w1=w1, w2=w2,
            p1=np.maximum(self._arr(x, "p1"), 0.0),
            p2=np.maximum(self._arr(x, "p2"), 0.0),
            p2b=max(float(x[self.idx["p2b"]]), 0.0),
            alpha=float(np.clip(x[self.idx["alpha"]], cfg.alpha_min,
                                1.0 - cfg.alpha_min)),
            W2=W2, slacks=slacks)

    def rank1_ratios(self, x: np.ndarray) -> np.ndarray:
        """Dominant-to-second eigenvalue ratio of each lifted covariance."""
        out = np.empty(self.cfg.K_D)
        for i, blk in enumerate(self.w2_blocks):
            W = blk.extract(x)
            lam = np.linalg.eigvalsh(0.5 * (W + W.conj().T))
            if len(lam) == 1:
                out[i] = np.inf
            else:
                out[i] = float(lam[-1]) / max(abs(float(lam[-2])), 1e-300)
        return out

    def mu_values(self, x: np.ndarray) -> np.ndarray | None:
        if self.idx.get("mu") is None:
            return None
        return self._arr(x, "mu")


def build_subproblem(cfg: SystemConfig, ch: ChannelRealization,
                     xp: ExpansionPoint, soc: SocApproxConfig | None = None, *,
                     include_phase1: bool = True,
                     relax_min_rate: bool = False,
                     alpha_fixed: float | None = None,
                     alpha_trust: float | None = None) -> Subproblem:
    """Emit the inner second-order-cone program anchored at ``xp``.

    The objective maximizes ``q`` (plus the rate-deficit slacks ``mu``
    when ``relax_min_rate`` is set, which is how a feasible starting
    point is found).  ``include_phase1=False`` pins the harvest-phase
    transmit variables to zero, which removes all recycled supply — the
    no-recycling reference design.  ``alpha_fixed`` pins the time split;
    ``alpha_trust`` intersects its bounds with a window around the
    expansion value.
    """
    cfg.validate()
    ch.validate(cfg)
    xp.validate(cfg, include_phase1=include_phase1)
    if soc is None:
        soc = SocApproxConfig.for_system(cfg, ch)
    soc.validate()
    ph1 = include_phase1
    K_D, K_U, M = cfg.K_D, cfg.K_U, cfg.M_T
    a_n = xp.alpha
    rbar = LN2 * cfg.r_min_ul
    if K_U and rbar >= soc.z_max:
        raise ValueError("uplink rate floor exceeds the certified tower range")
    if K_U and not relax_min_rate and np.any(xp.z_ul < rbar - 1e-9):
        raise ValueError(
            "expansion point violates the uplink rate floor; seed with "
            "relax_min_rate or a design meeting the floor")
    for z_n in (xp.z_dl1 if ph1 else np.zeros(0), xp.z_dl2, xp.z_ul):
        if np.any(np.asarray(z_n) > soc.z_max + 1e-9):
            raise ValueError(
                "expansion rate slack exceeds the certified tower range; "
                "rebuild with a larger z_max (and m)")
    ht, gt, gxt, Ht = _normalized(cfg, ch)
    w1n = xp.w1 if ph1 else np.zeros_like(xp.w1)

    pb = ProgramBuilder()
    anchor: dict[int, float] = {}

    def new(name, val, lb=None, ub=None):
        k = pb.add_var(name, lb, ub)
        anchor[k] = float(val)
        return k

    V = AffExpr.var
    zsum_n = float(np.sum(xp.z_dl1 if ph1 else 0.0)
                   + np.sum(xp.z_dl2) + np.sum(xp.z_ul))
    q = new("q", math.sqrt(max(zsum_n, 0.0) * xp.tau), lb=0.0)
    zd1 = [new(f"z_dl1[{i}]", xp.z_dl1[i] if ph1 else 0.0,
               lb=0.0, ub=soc.z_max if ph1 else 0.0) for i in range(K_D)]
    zd2 = [new(f"z_dl2[{i}]", xp.z_dl2[i], lb=0.0, ub=soc.z_max)
           for i in range(K_D)]
    zul = [new(f"z_ul[{j}]", xp.z_ul[j],
               lb=0.0 if relax_min_rate else min(rbar, soc.z_max),
               ub=soc.z_max) for j in range(K_U)]
    ud1 = [new(f"u_dl1[{i}]", xp.u_dl1[i] if ph1 else 0.0,
               lb=0.0, ub=None if ph1 else 0.0) for i in range(K_D)]
    ud2 = [new(f"u_dl2[{i}]", xp.u_dl2[i], lb=0.0) for i in range(K_D)]
    uul = [new(f"u_ul[{j}]", xp.u_ul[j], lb=0.0) for j in range(K_U)]
    # exponential-link slacks live divided by the tower's output scale
    ts = soc.t_scale
    td1 = [new(f"t_dl1[{i}]", (xp.t_dl1[i] if ph1 else 1.0) / ts,
               lb=1.0 / ts, ub=None if ph1 else 1.0 / ts)
           for i in range(K_D)]
    td2 = [new(f"t_dl2[{i}]", xp.t_dl2[i] / ts, lb=1.0 / ts)
           for i in range(K_D)]
    tul = [new(f"t_ul[{j}]", xp.t_ul[j] / ts, lb=1.0 / ts)
           for j in range(K_U)]
    bv = [new(f"b[{i}]", xp.b[i], lb=1.0) for i in range(K_D)]
    xv = [new(f"x_ul[{j}]", math.sqrt(xp.p2[j]), lb=0.0) for j in range(K_U)]
    cvar = new("c", xp.c, lb=0.0)
    tauv = new("tau", xp.tau, lb=0.0)

    lo, hi = cfg.alpha_min, 1.0 - cfg.alpha_min
    if alpha_trust is not None:
        lo, hi = max(lo, a_n - alpha_trust), min(hi, a_n + alpha_trust)
    if alpha_fixed is not None:
        if not lo - 1e-12 <= alpha_fixed <= hi + 1e-12:
            raise ValueError("alpha_fixed outside the allowed window")
        lo = hi = alpha_fixed
    if not lo - 1e-12 <= a_n <= hi + 1e-12:
        raise ValueError("expansion alpha outside the allowed alpha window")
    av = new("alpha", a_n, lb=lo, ub=hi)

    w1re = [[new(f"w1re[{i}][{m}]", w1n[i, m].real,
                 lb=None if ph1 else 0.0, ub=None if ph1 else 0.0)
             for m in range(M)] for i in range(K_D)]
    w1im = [[new(f"w1im[{i}][{m}]", w1n[i, m].imag,
                 lb=None if ph1 else 0.0, ub=None if ph1 else 0.0)
             for m in range(M)] for i in range(K_D)]
    p1v = [new(f"p1[{j}]", xp.p1[j] if ph1 else 0.0,
               lb=0.0, ub=None if ph1 else 0.0) for j in range(K_U)]
    p2v = [new(f"p2[{j}]", xp.p2[j], lb=0.0) for j in range(K_U)]
    p2bv = new("p2b", xp.p2b, lb=0.0)
    blocks = [pb.add_hermitian_psd(M, tag=f"W2[{i}]") for i in range(K_D)]
    for i in range(K_D):
        anchor.update(blocks[i].values(xp.W2[i]))
    mu = None
    if relax_min_rate and K_U:
        mu = [new(f"mu[{j}]", min(0.0, xp.z_ul[j] - rbar), ub=0.0)
              for j in range(K_U)]
        for j in range(K_U):
            pb.add_ineq(V(mu[j]) - V(zul[j]), -rbar)

    # tangents of the x/alpha patterns, all anchored at alpha_n
    def f2_full(x_expr, x_anchor):
        s = surrogate_f2(x_anchor, a_n)
        return x_expr * s.coef_x + V(av, s.coef_y) + s.const

    def f2_excess(x_expr, x_anchor):
        return f2_full(x_expr, x_anchor) - x_expr

    def f2_const_over_alpha(xc):
        return AffExpr.const_(2.0 * xc / a_n) + V(av, -xc / a_n ** 2)

    # objective cone: q^2 <= (total log-rate) * tau
    zsum = sum((V(k) for k in zd1 + zd2 + zul), AffExpr())
    pb.add_rotated(zsum, V(tauv), [V(q)], tag="thr")

    # supply draw: 1/c >= per-alpha grid power (amplifier quadratic exact)
    f1c = surrogate_f1(1.0, xp.c)
    F1c = V(cvar, f1c.y_coef) + f1c.inner_coef
    spend_b = AffExpr.const_(cfg.P_cir) + f2_excess(V(p2bv), xp.p2b)
    for j in range(K_U):
        spend_b += V(p1v[j]) + f2_excess(V(p2v[j]), xp.p2[j])
    if ph1:
        amp = 1.0 / math.sqrt(cfg.epsilon)
        tails = [V(k, amp) for row in w1re + w1im for k in row]
        pb.add_quad_le(tails, F1c - spend_b, tag="grid")
    else:
        pb.add_ineq(spend_b - F1c, 0.0)

    # split product: c >= (majorant of alpha * tau)
    pb.add_quad_le([V(av, math.sqrt(xp.phi1 / 2.0)),
                    V(tauv, math.sqrt(0.5 / xp.phi1))], V(cvar), tag="split")

    # phase-1 SINR floors (signal term minorized, interference exact)
    if ph1:
        for i in range(K_D):
            inner = [cplx_inner(ht[i], w1re[k], w1im[k]) for k in range(K_D)]
            x_ni = complex(np.vdot(ht[i], w1n[i]))
            s1 = surrogate_f1(x_ni, xp.u_dl1[i])
            F1e = inner[i][0] * (s1.inner_coef * x_ni.real) \
                + inner[i][1] * (s1.inner_coef * x_ni.imag) \
                + V(ud1[i], s1.y_coef)
            den = AffExpr.const_(1.0)
            for j in range(K_U):
                den += V(p1v[j], float(np.abs(gxt[j, i]) ** 2))
            tails = [e for k in range(K_D) if k != i for e in inner[k]]
            if tails:
                pb.add_quad_le(tails, F1e - den, tag=f"sinr1[{i}]")
            else:
                pb.add_ineq(den - F1e, 0.0)

    # phase-2 SINR floors: h^H W h >= (majorant of u * b)
    for i in range(K_D):
        phi2 = float(xp.phi2[i])
        pb.add_quad_le([V(ud2[i], math.sqrt(phi2 / 2.0)),
                        V(bv[i], math.sqrt(0.5 / phi2))],
                       blocks[i].quad(ht[i]), tag=f"sinr2[{i}]")

    # per-phase rate links: 1 + u >= (tangent of t^(1/phase fraction))
    if ph1:
        for i in range(K_D):
            s3 = surrogate_f3(xp.t_dl1[i], a_n)
            pb.add_ineq(V(td1[i], s3.coef_x * ts) + V(av, s3.coef_y)
                        - V(ud1[i]), 1.0 - s3.const)
    for i in range(K_D):
        s3 = surrogate_f3(xp.t_dl2[i], 1.0 - a_n)
        pb.add_ineq(V(td2[i], s3.coef_x * ts) + V(av, -s3.coef_y)
                    - V(ud2[i]), 1.0 - s3.const - s3.coef_y)
    for j in range(K_U):
        s3 = surrogate_f3(xp.t_ul[j], 1.0 - a_n)
        pb.add_ineq(V(tul[j], s3.coef_x * ts) + V(av, -s3.coef_y)
                    - V(uul[j]), 1.0 - s3.const - s3.coef_y)

    # phase-2 interference budgets (affine in the lifted covariances)
    for i in range(K_D):
        row = AffExpr() - V(bv[i])
        for k in range(K_D):
            if k != i:
                row += blocks[k].quad(ht[i])
        for j in range(K_U):
            row += V(p2v[j], float(np.abs(gxt[j, i]) ** 2))
        pb.add_ineq(row, -1.0)

    # uplink SINR floors: variational minorant of the matrix-fractional
    # term, u <= 2 x Re(v^H g) - v^H X v with the direction v frozen at
    # the expansion point (tight there, a valid lower bound everywhere)
    for j in range(K_U):
        v = xp.v_ul[j]
        c1 = float(np.real(np.vdot(v, gt[j])))
        row = V(uul[j]) + V(xv[j], -2.0 * c1)
        for l in range(j + 1, K_U):
            row += V(p2v[l], float(np.abs(np.vdot(gt[l], v)) ** 2))
        hv = Ht @ v
        for i in range(K_D):
            row += blocks[i].quad(hv)
        pb.add_ineq(row, -float(np.real(np.vdot(v, v))))

    # uplink power consistency p2 >= x^2
    for j in range(K_U):
        pb.add_rotated(V(p2v[j]), AffExpr.const_(1.0), [V(xv[j])],
                       tag=f"pwr[{j}]")

    # exponential links (tower reads the t slacks in physical units)
    if ph1:
        for i in range(K_D):
            soc_exp_upper(pb, zd1[i], V(td1[i], ts), soc,
                          tag=f"exp.zd1[{i}]", z_ref=float(xp.z_dl1[i]),
                          anchor=anchor)
    for i in range(K_D):
        soc_exp_upper(pb, zd2[i], V(td2[i], ts), soc, tag=f"exp.zd2[{i}]",
                      z_ref=float(xp.z_dl2[i]), anchor=anchor)
    for j in range(K_U):
        soc_exp_upper(pb, zul[j], V(tul[j], ts), soc, tag=f"exp.zul[{j}]",
                      z_ref=float(xp.z_ul[j]), anchor=anchor)

    # harvest-phase energy balance: everything the second phase burns
    # (circuits, decoding, downlink amplifier) net of the dedicated grid
    # draw must be covered by recycled supply, all per unit of alpha
    spend_h = f2_const_over_alpha(cfg.P_cir) - cfg.P_cir \
        - f2_excess(V(p2bv), xp.p2b)
    for j in range(K_U):
        spend_h += f2_full(V(zul[j]), xp.z_ul[j]) * (cfg.beta[j] / LN2)
    for i in range(K_D):
        spend_h += f2_excess(blocks[i].trace(), float(xp.w2_trace[i])) \
            * (1.0 / cfg.epsilon)
    supply = AffExpr()
    A = ch.H_si @ ch.H_si.conj().T
    for i in range(K_D):
        av_i = A @ w1n[i]
        re_e, _ = cplx_inner(av_i, w1re[i], w1im[i])
        supply += re_e * 2.0
        supply += -float(np.real(np.vdot(w1n[i], av_i)))
    for j in range(K_U):
        supply += V(p1v[j], float(np.sum(np.abs(ch.g[j]) ** 2)))
    pb.add_ineq(spend_h - supply * cfg.eta, 0.0)

    # radiated-power budgets, per unit of alpha
    sbs_rhs = f2_const_over_alpha(cfg.P_b_max)
    for i in range(K_D):
        sbs_rhs -= f2_excess(blocks[i].trace(), float(xp.w2_trace[i]))
    if ph1:
        pb.add_quad_le([V(k) for row in w1re + w1im for k in row],
                       sbs_rhs, tag="sbs")
    else:
        pb.add_ineq(AffExpr() - sbs_rhs, 0.0)
    for j in range(K_U):
        pb.add_ineq(V(p1v[j]) + f2_excess(V(p2v[j]), xp.p2[j])
                    - f2_const_over_alpha(cfg.P_u_max), 0.0)

    obj = V(q)
    if mu is not None:
        obj = sum((V(k) for k in mu), obj)
    pb.set_objective_max(obj)

    prog = pb.build()
    vec = _complete_anchor(prog, anchor)
    idx = {"q": q, "z_dl1": zd1, "z_dl2": zd2, "z_ul": zul,
           "u_dl1": ud1, "u_dl2": ud2, "u_ul": uul,
           "t_dl1": td1, "t_dl2": td2, "t_ul": tul,
           "b": bv, "x_ul": xv, "c": cvar, "tau": tauv, "alpha": av,
           "w1re": w1re, "w1im": w1im, "p1": p1v, "p2": p2v, "p2b": p2bv,
           "mu": mu}
    return Subproblem(program=prog, cfg=cfg, soc=soc, anchor=vec, idx=idx,
                      w2_blocks=blocks, include_phase1=ph1,
                      relax_min_rate=relax_min_rate, rbar=rbar, t_scale=ts)
