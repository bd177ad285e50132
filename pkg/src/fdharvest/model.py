"""Physical-layer model of the two-phase self-energy-recycling cell.

Phase 1 (duration ``alpha*T``): the SBS beams to downlink UEs with
cancellation off and harvests its own loop-back energy plus uplink energy
signals.  Phase 2 (duration ``(1-alpha)*T``): cancellation on, simultaneous
uplink reception (MMSE with successive cancellation in ascending UE index)
and downlink transmission.

Everything here evaluates the true nonconvex quantities; the convex
machinery lives in :mod:`fdharvest.reformulation`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channels import ChannelRealization
from .config import SystemConfig

LN2 = math.log(2.0)


@dataclass
class DesignSlacks:
    """Auxiliary variables of the lifted problem, kept for bookkeeping."""

    z_dl1: np.ndarray
    z_dl2: np.ndarray
    z_ul: np.ndarray
    u_dl1: np.ndarray
    u_dl2: np.ndarray
    u_ul: np.ndarray
    t_dl1: np.ndarray
    t_dl2: np.ndarray
    t_ul: np.ndarray
    b: np.ndarray
    x: np.ndarray
    c: float
    tau: float
    q: float


@dataclass
class DesignPoint:
    """One candidate operating point of the cell.

    ``w1``/``w2`` are per-DL-UE beamformers of shape ``(K_D, M_T)``.
    ``W2`` optionally carries the lifted phase-2 covariances
    ``(K_D, M_T, M_T)``; when present it takes precedence in the
    matrix-path evaluators.  Powers are in watts, ``alpha`` is the
    phase-1 fraction of the block.
    """

    w1: np.ndarray
    w2: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    p2b: float
    alpha: float
    W2: np.ndarray | None = None
    slacks: DesignSlacks | None = None

    def validate(self, cfg: SystemConfig):
        if self.w1.shape != (cfg.K_D, cfg.M_T):
            raise ValueError("w1 has wrong shape")
        if self.w2.shape != (cfg.K_D, cfg.M_T):
            raise ValueError("w2 has wrong shape")
        if self.p1.shape != (cfg.K_U,) or self.p2.shape != (cfg.K_U,):
            raise ValueError("uplink power vectors have wrong shape")
        if np.any(self.p1 < 0) or np.any(self.p2 < 0) or self.p2b < 0:
            raise ValueError("powers must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.W2 is not None:
            if self.W2.shape != (cfg.K_D, cfg.M_T, cfg.M_T):
                raise ValueError("W2 has wrong shape")
            for W in self.W2:
                if not np.allclose(W, W.conj().T, atol=1e-9):
                    raise ValueError("W2 blocks must be Hermitian")

    def w2_matrices(self) -> np.ndarray:
        """Phase-2 covariances: ``W2`` if lifted, else rank-1 outer products."""
        if self.W2 is not None:
            return self.W2
        return np.einsum("im,in->imn", self.w2, self.w2.conj())


def zero_design(cfg: SystemConfig, alpha: float = 0.5) -> DesignPoint:
    """All-zero transmit decisions at a given split (useful as a stub)."""
    return DesignPoint(
        w1=np.zeros((cfg.K_D, cfg.M_T), dtype=complex),
        w2=np.zeros((cfg.K_D, cfg.M_T), dtype=complex),
        p1=np.zeros(cfg.K_U),
        p2=np.zeros(cfg.K_U),
        p2b=0.0,
        alpha=alpha,
    )


def sinr_dl(cfg: SystemConfig, ch: ChannelRealization, dp: DesignPoint,
            i: int, phase: int, matrix_path: bool = False) -> float:
    """SINR of downlink UE ``i`` during the given phase (1 or 2).

    With ``matrix_path`` the phase-2 signal and interference powers are
    read from the lifted covariances via ``h^H W h``; the two paths
    agree exactly when ``W2 = w2 w2^H``.
    """
    if phase not in (1, 2):
        raise ValueError("phase must be 1 or 2")
    if matrix_path and phase != 2:
        raise ValueError("matrix path only applies to phase 2")
    h = ch.h[i]
    p_ul = dp.p1 if phase == 1 else dp.p2
    ue_interf = float(np.sum(p_ul * np.abs(ch.g_cross[:, i]) ** 2)) if cfg.K_U else 0.0
    if matrix_path:
        W = dp.w2_matrices()
        powers = np.real(np.einsum("m,kmn,n->k", h.conj(), W, h))
    else:
        w = dp.w1 if phase == 1 else dp.w2
        powers = np.abs(w @ h.conj()) ** 2
    own = float(powers[i])
    cross = float(np.sum(powers)) - own
    denom = cfg.sigma2_dl[i] + cross + ue_interf
    return own / denom


def _ul_covariance(cfg, ch, dp, j, matrix_path):
    """Noise-plus-interference covariance seen when decoding UL UE ``j``."""
    X = cfg.sigma2_ul * np.eye(cfg.M_R, dtype=complex)
    for l in range(j + 1, cfg.K_U):
        X += dp.p2[l] * np.outer(ch.g[l], ch.g[l].conj())
    if cfg.K_D:
        if matrix_path:
            S = np.sum(dp.w2_matrices(), axis=0)
            X += ch.H_on.conj().T @ S @ ch.H_on
        else:
            V = dp.w2 @ ch.H_on.conj()  # row i is H_on^H w2_i
            X += V.T @ V.conj()
    return X


def sinr_ul(cfg: SystemConfig, ch: ChannelRealization, dp: DesignPoint,
            j: int, matrix_path: bool = False) -> float:
    """Post-MMSE SINR of uplink UE ``j`` under ascending-index
    successive cancellation (UEs decoded earlier see later UEs as
    interference; residual loop-back leakage always interferes)."""
    X = _ul_covariance(cfg, ch, dp, j, matrix_path)
    g = ch.g[j]
    return float(dp.p2[j] * np.real(np.vdot(g, np.linalg.solve(X, g))))


def rate_dl(cfg, ch, dp, i, matrix_path: bool = False) -> float:
    """Block-averaged downlink rate of UE ``i`` in bit/s/Hz."""
    g1 = sinr_dl(cfg, ch, dp, i, phase=1)
    g2 = sinr_dl(cfg, ch, dp, i, phase=2, matrix_path=matrix_path)
    a = dp.alpha
    return a * math.log2(1.0 + g1) + (1.0 - a) * math.log2(1.0 + g2)


def rate_ul(cfg, ch, dp, j, matrix_path: bool = False) -> float:
    """Block-averaged uplink rate of UE ``j`` in bit/s/Hz."""
    return (1.0 - dp.alpha) * math.log2(1.0 + sinr_ul(cfg, ch, dp, j, matrix_path))


def harvested_power(cfg: SystemConfig, ch: ChannelRealization,
                    dp: DesignPoint) -> float:
    """Block-averaged harvested power ``eta*alpha*(loop-back + uplink)``.

    Multiply by ``cfg.T`` for energy per block.
    """
    loop = float(np.sum(np.abs(dp.w1 @ ch.H_si.conj()) ** 2)) if cfg.K_D else 0.0
    ul = float(np.sum(dp.p1 * np.sum(np.abs(ch.g) ** 2, axis=1))) if cfg.K_U else 0.0
    return cfg.eta * dp.alpha * (loop + ul)


def grid_power(cfg: SystemConfig, dp: DesignPoint) -> float:
    """Total supply draw: SBS radiated/circuit/phase-2 grid power plus
    uplink UE battery draw, all block-averaged."""
    a = dp.alpha
    pb = (a * float(np.sum(np.abs(dp.w1) ** 2)) / cfg.epsilon
          + a * cfg.P_cir + (1.0 - a) * dp.p2b)
    pu = float(np.sum(a * dp.p1 + (1.0 - a) * dp.p2))
    return pb + pu


def consumed_power_sbs(cfg: SystemConfig, dp: DesignPoint,
                       rates_ul: np.ndarray) -> float:
    """Power the SBS hardware actually burns: both phases' amplifier
    draw, uplink decoding at ``beta_j`` W per bit/s/Hz, and circuits."""
    a = dp.alpha
    tx1 = a * float(np.sum(np.abs(dp.w1) ** 2)) / cfg.epsilon
    tx2 = (1.0 - a) * float(np.sum(np.abs(dp.w2) ** 2)) / cfg.epsilon
    dec = float(np.sum(np.asarray(cfg.beta) * np.asarray(rates_ul))) if cfg.K_U else 0.0
    return tx1 + tx2 + dec + cfg.P_cir


def phase2_transmit_power(cfg: SystemConfig, dp: DesignPoint,
                          matrix_path: bool = False) -> float:
    """Radiated phase-2 downlink power (from traces when lifted)."""
    if matrix_path:
        return float(np.real(np.trace(dp.w2_matrices().sum(axis=0))))
    return float(np.sum(np.abs(dp.w2) ** 2))


def harvest_balance_margin(cfg: SystemConfig, ch: ChannelRealization,
                           dp: DesignPoint, matrix_path: bool = False) -> float:
    """Slack of the phase-2 energy budget (>= 0 means self-sustained).

    Phase-2 spending (circuits, decoding, downlink amplifier) must be
    covered by harvested energy plus the dedicated grid draw ``p2b``.
    """
    a = dp.alpha
    rates = [rate_ul(cfg, ch, dp, j, matrix_path) for j in range(cfg.K_U)]
    dec = float(np.sum(np.asarray(cfg.beta) * np.asarray(rates))) if cfg.K_U else 0.0
    spend = ((1.0 - a) * (cfg.P_cir + phase2_transmit_power(cfg, dp, matrix_path) / cfg.epsilon)
             + dec)
    supply = harvested_power(cfg, ch, dp) + (1.0 - a) * dp.p2b
    return supply - spend


def total_throughput(cfg, ch, dp, matrix_path: bool = False) -> float:
    """Sum rate over all UEs in bit/s/Hz."""
    f = sum(rate_dl(cfg, ch, dp, i, matrix_path) for i in range(cfg.K_D))
    f += sum(rate_ul(cfg, ch, dp, j, matrix_path) for j in range(cfg.K_U))
    return f


def ee(cfg: SystemConfig, ch: ChannelRealization, dp: DesignPoint,
       matrix_path: bool = False) -> float:
    """Energy efficiency: throughput per watt of supply draw."""
    g = grid_power(cfg, dp)
    if g <= 0.0:
        raise ValueError("grid power must be positive to define efficiency")
    return total_throughput(cfg, ch, dp, matrix_path) / g
