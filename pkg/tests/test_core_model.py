import math

import numpy as np
import pytest

from fdharvest.channels import ChannelRealization
from fdharvest.config import SystemConfig, dbm_to_watt
from fdharvest.model import (
    DesignPoint,
    consumed_power_sbs,
    ee,
    grid_power,
    harvest_balance_margin,
    harvested_power,
    rate_dl,
    rate_ul,
    sinr_dl,
    sinr_ul,
    total_throughput,
    zero_design,
)


def make_channels(cfg, h=None, g=None, g_cross=None, H_si=None, H_on=None):
    """Hand-built realization with zero defaults for unspecified parts."""
    return ChannelRealization(
        h=np.zeros((cfg.K_D, cfg.M_T), dtype=complex) if h is None else np.asarray(h, dtype=complex),
        g=np.zeros((cfg.K_U, cfg.M_R), dtype=complex) if g is None else np.asarray(g, dtype=complex),
        g_cross=np.zeros((cfg.K_U, cfg.K_D), dtype=complex) if g_cross is None else np.asarray(g_cross, dtype=complex),
        H_si=np.zeros((cfg.M_T, cfg.M_R), dtype=complex) if H_si is None else np.asarray(H_si, dtype=complex),
        H_on=np.zeros((cfg.M_T, cfg.M_R), dtype=complex) if H_on is None else np.asarray(H_on, dtype=complex),
        base_seed=0,
        trial_index=0,
    )


def unit_noise_cfg(**kw):
    defaults = dict(M_T=1, M_R=1, K_D=1, K_U=0, sigma2_ul=1.0,
                    P_rf=1.0, P_st=0.0, epsilon=1.0)
    defaults.update(kw)
    defaults.setdefault("sigma2_dl", [1.0] * defaults["K_D"])
    return SystemConfig(**defaults)


def test_sinr_dl_single_user_identity():
    cfg = unit_noise_cfg()
    ch = make_channels(cfg, h=[[1.0]])
    dp = zero_design(cfg)
    dp.w1[0, 0] = 1.0
    assert sinr_dl(cfg, ch, dp, 0, phase=1) == pytest.approx(1.0)


def test_sinr_dl_zero_beams():
    cfg = unit_noise_cfg()
    ch = make_channels(cfg, h=[[1.0]])
    dp = zero_design(cfg)
    assert sinr_dl(cfg, ch, dp, 0, phase=1) == 0.0
    assert sinr_dl(cfg, ch, dp, 0, phase=2) == 0.0


def test_sinr_dl_with_interference():
    # own beam power 4, one intra-cell interferer power 1, one UL UE
    # leaking power 1, unit noise -> 4/3
    cfg = unit_noise_cfg(K_D=2, K_U=1, sigma2_dl=[1.0, 1.0])
    ch = make_channels(cfg, h=[[1.0], [1.0]], g=[[0.0]], g_cross=[[1.0, 1.0]])
    dp = zero_design(cfg)
    dp.w1[0, 0] = 2.0
    dp.w1[1, 0] = 1.0
    dp.p1[:] = 1.0
    assert sinr_dl(cfg, ch, dp, 0, phase=1) == pytest.approx(4.0 / 3.0)


def test_sinr_dl_matrix_and_vector_paths_agree():
    rng = np.random.default_rng(7)
    cfg = SystemConfig(M_T=3, M_R=2, K_D=2, K_U=2)
    for _ in range(20):
        ch = make_channels(
            cfg,
            h=rng.normal(size=(2, 3)) + 1j * rng.normal(size=(2, 3)),
            g=rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)),
            g_cross=rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)),
            H_on=rng.normal(size=(3, 2)) + 1j * rng.normal(size=(3, 2)),
        )
        dp = zero_design(cfg)
        dp.w1 = rng.normal(size=(2, 3)) + 1j * rng.normal(size=(2, 3))
        dp.w2 = rng.normal(size=(2, 3)) + 1j * rng.normal(size=(2, 3))
        dp.p1 = rng.uniform(0, 1, size=2)
        dp.p2 = rng.uniform(0, 1, size=2)
        lifted = DesignPoint(w1=dp.w1, w2=dp.w2, p1=dp.p1, p2=dp.p2,
                             p2b=0.0, alpha=0.4, W2=dp.w2_matrices())
        for i in range(2):
            a = sinr_dl(cfg, ch, dp, i, phase=2)
            b = sinr_dl(cfg, ch, lifted, i, phase=2, matrix_path=True)
            assert abs(a - b) <= 1e-10 * max(1.0, abs(a))
        for j in range(2):
            a = sinr_ul(cfg, ch, dp, j)
            b = sinr_ul(cfg, ch, lifted, j, matrix_path=True)
            assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


def test_sinr_ul_single_user():
    cfg = unit_noise_cfg(K_D=0, K_U=1)
    ch = make_channels(cfg, g=[[1.0]])
    dp = zero_design(cfg)
    dp.p2[0] = 1.0
    assert sinr_ul(cfg, ch, dp, 0) == pytest.approx(1.0)


def test_sinr_ul_zero_power():
    cfg = unit_noise_cfg(K_D=0, K_U=1)
    ch = make_channels(cfg, g=[[1.0]])
    dp = zero_design(cfg)
    assert sinr_ul(cfg, ch, dp, 0) == 0.0


def test_sinr_ul_decode_order():
    """First-decoded UE sees the later one as interference; last sees none."""
    cfg = unit_noise_cfg(K_D=0, K_U=2)
    ch = make_channels(cfg, g=[[1.0], [1.0]])
    dp = zero_design(cfg)
    dp.p2[:] = 1.0
    assert sinr_ul(cfg, ch, dp, 0) == pytest.approx(0.5)
    assert sinr_ul(cfg, ch, dp, 1) == pytest.approx(1.0)


def test_rate_dl_two_phase_average():
    cfg = unit_noise_cfg()
    ch = make_channels(cfg, h=[[1.0]])
    dp = zero_design(cfg, alpha=0.5)
    dp.w1[0, 0] = 1.0            # phase-1 SINR 1
    dp.w2[0, 0] = math.sqrt(3.0)  # phase-2 SINR 3
    assert rate_dl(cfg, ch, dp, 0) == pytest.approx(0.5 * 1.0 + 0.5 * 2.0)


def test_rate_ul_scaling_with_alpha():
    cfg = unit_noise_cfg(K_D=0, K_U=1)
    ch = make_channels(cfg, g=[[1.0]])
    for alpha in (0.2, 0.5, 0.9):
        dp = zero_design(cfg, alpha=alpha)
        dp.p2[0] = 1.0
        assert rate_ul(cfg, ch, dp, 0) == pytest.approx(1.0 - alpha)


def test_harvested_power_single_beam():
    cfg = unit_noise_cfg(eta=1.0)
    ch = make_channels(cfg, h=[[1.0]], H_si=[[math.sqrt(2.0)]])
    dp = zero_design(cfg, alpha=0.5)
    dp.w1[0, 0] = 1.0  # ||H_si^H w||^2 = 2
    assert harvested_power(cfg, ch, dp) == pytest.approx(1.0)


def test_harvested_power_zero():
    cfg = unit_noise_cfg()
    ch = make_channels(cfg, H_si=[[1.0]])
    dp = zero_design(cfg, alpha=0.7)
    assert harvested_power(cfg, ch, dp) == 0.0


def test_harvested_power_monte_carlo():
    """Closed form against sample-mean harvesting over random symbols.

    The transmit signal in phase 1 is w1*s with unit-power symbols plus
    the uplink energy symbols; averaging |received|^2 over many draws
    must land on eta*alpha*(||H^H w||^2 + sum p |g|^2).
    """
    rng = np.random.default_rng(123)
    cfg = SystemConfig(M_T=2, M_R=2, K_D=2, K_U=1, eta=0.6)
    ch = make_channels(
        cfg,
        h=rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)),
        g=rng.normal(size=(1, 2)) + 1j * rng.normal(size=(1, 2)),
        H_si=rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)),
    )
    dp = zero_design(cfg, alpha=0.35)
    dp.w1 = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    dp.p1 = np.array([0.8])

    n = 100_000
    s = (rng.normal(size=(n, 2)) + 1j * rng.normal(size=(n, 2))) / math.sqrt(2)
    x = s @ dp.w1.conj() @ ch.H_si.conj()          # loop-back component
    e = (rng.normal(size=(n, 1)) + 1j * rng.normal(size=(n, 1))) / math.sqrt(2)
    x = x + (e * math.sqrt(dp.p1[0])) @ ch.g[0][None, :].conj()
    mc = cfg.eta * dp.alpha * float(np.mean(np.sum(np.abs(x) ** 2, axis=1)))
    exact = harvested_power(cfg, ch, dp)
    assert abs(mc - exact) / exact < 0.02


def test_grid_power_example():
    cfg = unit_noise_cfg(K_U=1)
    assert cfg.P_cir == pytest.approx(1.0)
    dp = zero_design(cfg, alpha=0.5)
    dp.w1[0, 0] = 1.0
    dp.p2b = 1.0
    assert grid_power(cfg, dp) == pytest.approx(1.5)


def test_consumed_power_decoding_term():
    cfg = unit_noise_cfg(K_U=1, beta=[2.0])
    dp = zero_design(cfg, alpha=1e-9)
    dp.alpha = 0.0  # boundary probe, bypassing validate()
    assert consumed_power_sbs(cfg, dp, np.array([1.5])) == pytest.approx(cfg.P_cir + 3.0)


def test_consumed_power_no_decode():
    cfg = unit_noise_cfg(K_U=1, beta=[0.0])
    dp = zero_design(cfg)
    assert consumed_power_sbs(cfg, dp, np.array([0.0])) == pytest.approx(cfg.P_cir)


def test_consumed_power_alpha_one_boundary():
    cfg = unit_noise_cfg(K_D=1, K_U=1, beta=[2.0])
    ch = make_channels(cfg, h=[[1.0]], g=[[1.0]])
    dp = zero_design(cfg)
    dp.alpha = 1.0
    dp.w2[0, 0] = 3.0
    dp.p2[0] = 5.0
    rates = np.array([rate_ul(cfg, ch, dp, 0)])
    assert rates[0] == 0.0
    assert consumed_power_sbs(cfg, dp, rates) == pytest.approx(cfg.P_cir)


def test_ee_matches_ratio_by_hand():
    cfg = unit_noise_cfg(K_U=1)
    ch = make_channels(cfg, h=[[1.0]], g=[[1.0]])
    dp = zero_design(cfg, alpha=0.5)
    dp.w1[0, 0] = 1.0
    dp.p2b = 1.0
    f = total_throughput(cfg, ch, dp)
    assert ee(cfg, ch, dp) == pytest.approx(f / 1.5)


def test_ee_rejects_zero_denominator():
    cfg = unit_noise_cfg(P_rf=0.0, P_st=0.0)
    ch = make_channels(cfg, h=[[1.0]])
    dp = zero_design(cfg)
    dp.alpha = 0.5
    with pytest.raises(ValueError):
        ee(cfg, ch, dp)


def test_phase_rotation_invariance():
    """SINRs depend on beamformers only through |.|^2 forms."""
    rng = np.random.default_rng(42)
    cfg = SystemConfig(M_T=2, M_R=2, K_D=2, K_U=2)
    for trial in range(10):
        ch = make_channels(
            cfg,
            h=rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)),
            g=rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)),
            g_cross=rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)),
            H_si=rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)),
            H_on=0.01 * (rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))),
        )
        dp = zero_design(cfg, alpha=0.5)
        dp.w1 = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        dp.w2 = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        dp.p1 = rng.uniform(0, 1, 2)
        dp.p2 = rng.uniform(0, 1, 2)
        phases = np.exp(1j * rng.uniform(0, 2 * np.pi, size=(2, 1)))
        rot = DesignPoint(w1=dp.w1 * phases, w2=dp.w2 * phases,
                          p1=dp.p1, p2=dp.p2, p2b=dp.p2b, alpha=dp.alpha)
        for i in range(2):
            assert sinr_dl(cfg, ch, dp, i, 1) == pytest.approx(sinr_dl(cfg, ch, rot, i, 1))
            assert sinr_dl(cfg, ch, dp, i, 2) == pytest.approx(sinr_dl(cfg, ch, rot, i, 2))
        for j in range(2):
            assert sinr_ul(cfg, ch, dp, j) == pytest.approx(sinr_ul(cfg, ch, rot, j))
        assert harvested_power(cfg, ch, dp) == pytest.approx(harvested_power(cfg, ch, rot))


def test_harvest_balance_margin_signs():
    cfg = unit_noise_cfg(eta=1.0, K_U=0, P_rf=0.0, P_st=1.0)
    ch = make_channels(cfg, h=[[1.0]], H_si=[[2.0]])
    dp = zero_design(cfg, alpha=0.5)
    # no spending beyond circuits, no harvest, no grid top-up: margin -P_cir/2
    assert harvest_balance_margin(cfg, ch, dp) == pytest.approx(-0.5)
    dp.w1[0, 0] = 1.0  # harvest 0.5*4 = 2.0
    assert harvest_balance_margin(cfg, ch, dp) == pytest.approx(1.5)
    dp.p2b = 3.0
    assert harvest_balance_margin(cfg, ch, dp) == pytest.approx(3.0)


def test_design_point_validation():
    cfg = unit_noise_cfg()
    dp = zero_design(cfg)
    dp.validate(cfg)
    bad = zero_design(cfg)
    bad.alpha = 1.0
    with pytest.raises(ValueError):
        bad.validate(cfg)
    bad2 = zero_design(cfg)
    bad2.p1 = np.array([-0.1]) if cfg.K_U else bad2.p1
    if cfg.K_U:
        with pytest.raises(ValueError):
            bad2.validate(cfg)


def test_config_unit_helpers():
    assert dbm_to_watt(30.0) == pytest.approx(1.0)
    assert dbm_to_watt(-104.0) == pytest.approx(10 ** (-13.4))
    cfg = SystemConfig()
    assert cfg.P_cir == pytest.approx(2 * 1.0 + 5.0)
    assert cfg.rate_floor_from_mbps(1.0) == pytest.approx(0.1)
