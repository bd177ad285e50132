"""System-level configuration for the two-phase full-duplex small cell.

The downlink base station (SBS) splits each block of length ``T`` into a
harvesting phase of duration ``alpha*T`` (self-interference cancellation off,
transmit energy recycled) and a communication phase of duration
``(1-alpha)*T`` (cancellation on, uplink and downlink served simultaneously).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


def dbm_to_watt(dbm: float) -> float:
    """Convert a power level in dBm to watts."""
    return 10.0 ** (dbm / 10.0) / 1000.0


def watt_to_dbm(watt: float) -> float:
    """Convert a power level in watts to dBm."""
    if watt <= 0.0:
        raise ValueError("power must be positive to express in dBm")
    return 10.0 * math.log10(watt * 1000.0)


def db_to_pow(db: float) -> float:
    """Convert a ratio in dB to linear scale."""
    return 10.0 ** (db / 10.0)


def pow_to_db(ratio: float) -> float:
    """Convert a linear ratio to dB."""
    if ratio <= 0.0:
        raise ValueError("ratio must be positive to express in dB")
    return 10.0 * math.log10(ratio)


@dataclass
class SystemConfig:
    """Static parameters of one small cell.

    Parameters
    ----------
    M_T, M_R : int
        Transmit / receive antennas at the SBS.
    K_D, K_U : int
        Number of downlink / uplink single-antenna UEs.
    T : float
        Transmission block length in seconds (rates and powers are
        per-block averages, so the default 1.0 is rarely changed).
    eta : float
        Energy-harvester conversion efficiency in (0, 1].
    epsilon : float
        Power-amplifier efficiency in (0, 1]; radiating ``P`` watts
        drains ``P / epsilon`` from the supply.
    P_rf : float
        Circuit power per active RF chain (W).
    P_st : float
        Static circuit power of the SBS (W).
    beta : list[float]
        Per-uplink-UE decoder power coefficient (W per bit/s/Hz of
        decoded uplink rate).
    sigma2_dl : list[float]
        Noise variance at each downlink UE (W).
    sigma2_ul : float
        Noise variance per receive antenna at the SBS (W).
    sigma2_si : float
        Residual self-interference power ratio after cancellation
        (linear, e.g. 1e-11 for -110 dB).
    P_b_max : float
        SBS average radiated-power budget (W).
    P_u_max : float
        Per-uplink-UE average power budget (W).
    r_min_ul : float
        Minimum uplink rate per UE in bit/s/Hz (already normalized by
        bandwidth).
    bandwidth_hz : float
        System bandwidth, used only to convert absolute rate targets.
    alpha_min : float
        Numerical margin keeping the phase split inside the open
        interval (0, 1).
    """

    M_T: int = 2
    M_R: int = 2
    K_D: int = 2
    K_U: int = 2
    T: float = 1.0
    eta: float = 0.5
    epsilon: float = 0.35
    P_rf: float = 1.0
    P_st: float = 5.0
    beta: list[float] | None = None
    sigma2_dl: list[float] | None = None
    sigma2_ul: float = dbm_to_watt(-104.0)
    sigma2_si: float = 1e-11
    P_b_max: float = dbm_to_watt(25.0)
    P_u_max: float = dbm_to_watt(23.0)
    r_min_ul: float = 0.1
    bandwidth_hz: float = 1e7
    alpha_min: float = 1e-3

    def __post_init__(self):
        if self.beta is None:
            self.beta = [0.5] * self.K_U
        if self.sigma2_dl is None:
            self.sigma2_dl = [dbm_to_watt(-104.0)] * self.K_D
        self.validate()

    def validate(self):
        if self.M_T < 1 or self.M_R < 1:
            raise ValueError("antenna counts must be >= 1")
        if self.K_D < 0 or self.K_U < 0:
            raise ValueError("UE counts must be >= 0")
        if len(self.beta) != self.K_U:
            raise ValueError("beta must have one entry per uplink UE")
        if len(self.sigma2_dl) != self.K_D:
            raise ValueError("sigma2_dl must have one entry per downlink UE")
        for name in ("T", "eta", "epsilon", "sigma2_ul", "bandwidth_hz"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("P_rf", "P_st", "sigma2_si"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if any(b < 0.0 for b in self.beta):
            raise ValueError("beta entries must be >= 0")
        if any(s <= 0.0 for s in self.sigma2_dl):
            raise ValueError("sigma2_dl entries must be positive")
        if self.P_b_max < 0.0 or self.P_u_max < 0.0:
            raise ValueError("power budgets must be >= 0")
        if self.r_min_ul < 0.0:
            raise ValueError("r_min_ul must be >= 0")
        if not 0.0 < self.alpha_min < 0.5:
            raise ValueError("alpha_min must lie in (0, 0.5)")

    @property
    def P_cir(self) -> float:
        """Total SBS circuit power ``M_T * P_rf + P_st`` (W)."""
        return self.M_T * self.P_rf + self.P_st

    def rate_floor_from_mbps(self, mbps: float) -> float:
        """Translate an absolute rate target in Mbit/s to bit/s/Hz."""
        return mbps * 1e6 / self.bandwidth_hz
