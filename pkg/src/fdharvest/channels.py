"""Channel generation for the full-duplex small cell.

All small-scale fading is unit-variance circularly-symmetric complex
Gaussian.  The self-interference channel is Rician (a strong deterministic
loop-back component plus scatter).  An optional log-distance path-loss mode
places UEs uniformly in a disk and attenuates the UE-related channels; it is
off by default, in which case every UE channel entry is exactly CN(0, 1).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import SystemConfig


@dataclass
class PathLossConfig:
    """Log-distance attenuation applied to UE channels when enabled."""

    enabled: bool = False
    exponent: float = 3.7
    ref_loss_db: float = 40.0
    min_dist_m: float = 1.0


@dataclass
class ChannelGenConfig:
    """Knobs of the random channel generator.

    ``sigma2_si`` may be left ``None`` to inherit the value from the
    :class:`~fdharvest.config.SystemConfig` at draw time.  ``h_bar``
    selects the deterministic line-of-sight matrix of the Rician
    self-interference channel; only the all-ones convention is
    implemented.
    """

    rician_K: float = 1.0
    sigma2_si: float | None = None
    h_bar: str = "ones"
    cell_radius_m: float = 100.0
    uniform_placement: bool = True
    pathloss: PathLossConfig = field(default_factory=PathLossConfig)
    seed: int = 0

    def validate(self):
        if self.rician_K < 0.0:
            raise ValueError("rician_K must be >= 0")
        if self.h_bar != "ones":
            raise ValueError("only the all-ones LoS convention is supported")
        if self.cell_radius_m <= 0.0:
            raise ValueError("cell_radius_m must be positive")
        if self.pathloss.enabled:
            if self.pathloss.min_dist_m <= 0.0:
                raise ValueError("min_dist_m must be positive")
            if self.pathloss.exponent <= 0.0:
                raise ValueError("pathloss exponent must be positive")


@dataclass
class ChannelRealization:
    """One draw of every channel the model needs.

    Attributes
    ----------
    h : (K_D, M_T) complex ndarray
        SBS-to-downlink-UE channels.
    g : (K_U, M_R) complex ndarray
        Uplink-UE-to-SBS channels.
    g_cross : (K_U, K_D) complex ndarray
        Uplink-UE-to-downlink-UE interference channels.
    H_si : (M_T, M_R) complex ndarray
        Transmit-to-receive loop-back channel with cancellation off
        (unit power scale); this is what the harvester sees.
    H_on : (M_T, M_R) complex ndarray
        Residual loop-back channel with cancellation on.
    """

    h: np.ndarray
    g: np.ndarray
    g_cross: np.ndarray
    H_si: np.ndarray
    H_on: np.ndarray
    base_seed: int = 0
    trial_index: int = 0

    def validate(self, cfg: SystemConfig):
        if self.h.shape != (cfg.K_D, cfg.M_T):
            raise ValueError("h has wrong shape")
        if self.g.shape != (cfg.K_U, cfg.M_R):
            raise ValueError("g has wrong shape")
        if self.g_cross.shape != (cfg.K_U, cfg.K_D):
            raise ValueError("g_cross has wrong shape")
        if self.H_si.shape != (cfg.M_T, cfg.M_R):
            raise ValueError("H_si has wrong shape")
        if self.H_on.shape != (cfg.M_T, cfg.M_R):
            raise ValueError("H_on has wrong shape")


def _cn01(rng: np.random.Generator, shape) -> np.ndarray:
    """CN(0, 1) i.i.d. entries."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def _rician_loopback(rng, M_T, M_R, K, scale2):
    """Rician matrix with total per-entry power ``scale2``."""
    los = np.ones((M_T, M_R)) * math.sqrt(scale2 * K / (K + 1.0))
    scatter = _cn01(rng, (M_T, M_R)) * math.sqrt(scale2 / (K + 1.0))
    return los + scatter


def _disk_positions(rng, n, radius):
    r = radius * np.sqrt(rng.random(n))
    th = 2.0 * math.pi * rng.random(n)
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)


def _gain(dist, pl: PathLossConfig):
    d = np.maximum(dist, pl.min_dist_m)
    loss_db = pl.ref_loss_db + 10.0 * pl.exponent * np.log10(d)
    return np.sqrt(10.0 ** (-loss_db / 10.0))


def draw_channels(cfg: SystemConfig, gen: ChannelGenConfig,
                  trial_index: int = 0) -> ChannelRealization:
    """Draw one independent channel realization.

    The stream is keyed on ``(gen.seed, trial_index)`` with a
    counter-based generator, so realizations are reproducible and
    distinct trials never share a stream.
    """
    gen.validate()
    rng = np.random.Generator(np.random.Philox(key=[gen.seed, trial_index]))

    h = _cn01(rng, (cfg.K_D, cfg.M_T))
    g = _cn01(rng, (cfg.K_U, cfg.M_R))
    g_cross = _cn01(rng, (cfg.K_U, cfg.K_D))

    # Loop-back draws precede placement so toggling path loss does not
    # reshuffle the local hardware channels.
    sigma2_si = cfg.sigma2_si if gen.sigma2_si is None else gen.sigma2_si
    H_si = _rician_loopback(rng, cfg.M_T, cfg.M_R, gen.rician_K, 1.0)
    H_on = _rician_loopback(rng, cfg.M_T, cfg.M_R, gen.rician_K, sigma2_si)

    if gen.pathloss.enabled:
        # Positions drawn per realization; SBS sits at the origin.
        if gen.uniform_placement:
            pos_d = _disk_positions(rng, cfg.K_D, gen.cell_radius_m)
            pos_u = _disk_positions(rng, cfg.K_U, gen.cell_radius_m)
        else:
            pos_d = np.tile([gen.cell_radius_m / 2.0, 0.0], (cfg.K_D, 1))
            pos_u = np.tile([0.0, gen.cell_radius_m / 2.0], (cfg.K_U, 1))
        d_dl = np.linalg.norm(pos_d, axis=1)
        d_ul = np.linalg.norm(pos_u, axis=1)
        h = h * _gain(d_dl, gen.pathloss)[:, None]
        g = g * _gain(d_ul, gen.pathloss)[:, None]
        d_x = np.linalg.norm(pos_u[:, None, :] - pos_d[None, :, :], axis=2)
        g_cross = g_cross * _gain(d_x, gen.pathloss)

    ch = ChannelRealization(h=h, g=g, g_cross=g_cross, H_si=H_si, H_on=H_on,
                            base_seed=gen.seed, trial_index=trial_index)
    ch.validate(cfg)
    return ch


def _arr_to_pairs(a: np.ndarray):
    re = np.real(a)
    im = np.imag(a)
    return np.stack([re, im], axis=-1).tolist()


def _pairs_to_arr(pairs) -> np.ndarray:
    a = np.asarray(pairs, dtype=float)
    return a[..., 0] + 1j * a[..., 1]


def dump_channels(ch: ChannelRealization, path: str):
    """Write a realization to a JSON file of [re, im] pairs."""
    doc = {
        "base_seed": ch.base_seed,
        "trial_index": ch.trial_index,
        "h": _arr_to_pairs(ch.h),
        "g": _arr_to_pairs(ch.g),
        "g_cross": _arr_to_pairs(ch.g_cross),
        "H_si": _arr_to_pairs(ch.H_si),
        "H_on": _arr_to_pairs(ch.H_on),
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_channels(path: str) -> ChannelRealization:
    """Inverse of :func:`dump_channels`."""
    with open(path) as f:
        doc = json.load(f)
    return ChannelRealization(
        h=_pairs_to_arr(doc["h"]),
        g=_pairs_to_arr(doc["g"]),
        g_cross=_pairs_to_arr(doc["g_cross"]),
        H_si=_pairs_to_arr(doc["H_si"]),
        H_on=_pairs_to_arr(doc["H_on"]),
        base_seed=int(doc["base_seed"]),
        trial_index=int(doc["trial_index"]),
    )
