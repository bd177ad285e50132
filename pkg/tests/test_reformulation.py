"""Tests of the lifted convex inner approximation.

Covers the four scalar surrogate families (bounds, tangency, gradients),
the rotated-cone exponential tower, expansion-point bookkeeping against
the physical model, and assembled-program structure: the anchor must sit
inside its own program, the variable census must be exact, and a solved
subproblem must decode back to a physically consistent design.
"""

import math

import numpy as np
import pytest

from fdharvest.channels import ChannelGenConfig, draw_channels
from fdharvest.config import SystemConfig
from fdharvest.conic import AffExpr, ProgramBuilder, solve
from fdharvest.model import (
    LN2,
    DesignPoint,
    ee,
    grid_power,
    harvest_balance_margin,
    sinr_dl,
    sinr_ul,
)
from fdharvest.reformulation import (
    ExpansionPoint,
    SocApproxConfig,
    build_subproblem,
    soc_exp_upper,
    surrogate_f1,
    surrogate_f2,
    surrogate_f3,
    surrogate_f4_upper,
)


def small_cfg(**kw):
    kd = kw.pop("K_D", 2)
    ku = kw.pop("K_U", 2)
    base = dict(M_T=2, M_R=2, K_D=kd, K_U=ku,
                sigma2_dl=[1e-2] * kd, sigma2_ul=1e-2, sigma2_si=1e-3,
                P_b_max=1.0, P_u_max=0.5, r_min_ul=0.0)
    base.update(kw)
    return SystemConfig(**base)


def seed_design(cfg, ch, alpha=0.4, phase1=True):
    """Feasible hand-built design: MRT beams at a 45% power share, UEs at
    a quarter of their budget, p2b topped up to cover the harvest gap."""
    w1 = np.zeros((cfg.K_D, cfg.M_T), dtype=complex)
    w2 = np.zeros((cfg.K_D, cfg.M_T), dtype=complex)
    amp = math.sqrt(0.45 * cfg.P_b_max / cfg.K_D)
    for i in range(cfg.K_D):
        d = ch.h[i] / np.linalg.norm(ch.h[i])
        w2[i] = amp * d
        if phase1:
            w1[i] = amp * d
    pu = np.full(cfg.K_U, 0.25 * cfg.P_u_max)
    p1 = pu.copy() if phase1 else np.zeros(cfg.K_U)
    probe = DesignPoint(w1=w1, w2=w2, p1=p1, p2=pu.copy(), p2b=0.0,
                        alpha=alpha)
    gap = harvest_balance_margin(cfg, ch, probe)
    p2b = max(0.0, (1e-6 - gap) / (1.0 - alpha))
    return DesignPoint(w1=w1, w2=w2, p1=p1, p2=pu.copy(), p2b=p2b,
                       alpha=alpha)


# ---------------------------------------------------------------------------
# scalar surrogates
# ---------------------------------------------------------------------------

def test_quadratic_over_linear_minorant():
    rng = np.random.default_rng(71)
    for _ in range(1000):
        x_n = complex(rng.normal(), rng.normal())
        y_n = rng.uniform(0.1, 3.0)
        s = surrogate_f1(x_n, y_n)
        assert s.value(x_n, y_n) == pytest.approx(abs(x_n) ** 2 / y_n,
                                                  abs=1e-10)
        x = complex(rng.normal(), rng.normal()) * 2.0
        y = rng.uniform(0.05, 4.0)
        assert s.value(x, y) <= abs(x) ** 2 / y + 1e-10


def test_minorant_handbook_values():
    s = surrogate_f1(1.0, 1.0)
    # tangent of x^2/y at (1, 1) is 2x - y
    assert s.value(2.0, 1.0) == pytest.approx(3.0, abs=1e-12)
    assert 3.0 <= 4.0  # true value at that point
    # a purely imaginary anchor keeps the phase reference
    s = surrogate_f1(1j, 1.0)
    assert s.value(1j, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert s.value(2j, 1.0) == pytest.approx(3.0, abs=1e-12)


def test_ratio_tangent_values():
    s = surrogate_f2(1.0, 1.0)
    assert s.const == pytest.approx(1.0)
    assert s.coef_x == pytest.approx(1.0)
    assert s.coef_y == pytest.approx(-1.0)
    assert s.value(1.0, 1.0) == pytest.approx(1.0, abs=1e-12)
    # linear in x, so exact along the anchor's y
    assert s.value(2.0, 1.0) == pytest.approx(2.0, abs=1e-12)


def test_power_tangent_value():
    s = surrogate_f3(1.0, 0.5)
    # t^(1/y) at t = 1 has slope 1/y = 2 in t and 0 in y
    assert s.value(1.0, 0.5) == pytest.approx(1.0, abs=1e-12)
    assert s.value(1.25, 0.5) == pytest.approx(1.5, abs=1e-12)
    assert s.coef_y == pytest.approx(0.0, abs=1e-12)


def test_tangent_gradients_match_finite_differences():
    h = 1e-6

    def fd(f, args, k):
        up = list(args)
        dn = list(args)
        up[k] += h
        dn[k] -= h
        return (f(*up) - f(*dn)) / (2.0 * h)

    xr, xi, y = 1.3, -0.4, 0.8
    s1 = surrogate_f1(complex(xr, xi), y)
    f1 = lambda a, b, c: (a * a + b * b) / c
    assert s1.inner_coef * xr == pytest.approx(fd(f1, (xr, xi, y), 0),
                                               rel=1e-5)
    assert s1.inner_coef * xi == pytest.approx(fd(f1, (xr, xi, y), 1),
                                               rel=1e-5)
    assert s1.y_coef == pytest.approx(fd(f1, (xr, xi, y), 2), rel=1e-5)

    s2 = surrogate_f2(2.0, 0.7)
    f2 = lambda a, b: a / b
    assert s2.coef_x == pytest.approx(fd(f2, (2.0, 0.7), 0), rel=1e-5)
    assert s2.coef_y == pytest.approx(fd(f2, (2.0, 0.7), 1), rel=1e-5)

    s3 = surrogate_f3(1.9, 0.55)
    f3 = lambda a, b: a ** (1.0 / b)
    assert s3.coef_x == pytest.approx(fd(f3, (1.9, 0.55), 0), rel=1e-5)
    assert s3.coef_y == pytest.approx(fd(f3, (1.9, 0.55), 1), rel=1e-5)


def test_product_majorant():
    rng = np.random.default_rng(72)
    for _ in range(1000):
        x_n = rng.uniform(0.05, 3.0)
        y_n = rng.uniform(0.05, 3.0)
        s = surrogate_f4_upper(x_n, y_n)
        assert s.value(x_n, y_n) == pytest.approx(x_n * y_n, abs=1e-10)
        x = rng.uniform(0.0, 4.0)
        y = rng.uniform(0.0, 4.0)
        assert s.value(x, y) >= x * y - 1e-10
    s = surrogate_f4_upper(1.0, 1.0)
    assert s.value(1.0, 1.0) == pytest.approx(1.0)
    assert s.value(2.0, 1.0) == pytest.approx(2.5)
    s = surrogate_f4_upper(1.0, 2.0)
    assert s.phi == pytest.approx(2.0)
    assert s.value(1.0, 2.0) == pytest.approx(2.0)


def test_surrogate_domain_errors():
    with pytest.raises(ValueError):
        surrogate_f1(1.0, 0.0)
    with pytest.raises(ValueError):
        surrogate_f2(1.0, -1.0)
    with pytest.raises(ValueError):
        surrogate_f3(0.5, 0.5)
    with pytest.raises(ValueError):
        surrogate_f3(2.0, 1.0)
    with pytest.raises(ValueError):
        surrogate_f3(2.0, 0.0)
    with pytest.raises(ValueError):
        surrogate_f4_upper(0.0, 1.0)
    with pytest.raises(ValueError):
        surrogate_f4_upper(1.0, -2.0)
    with pytest.raises(ValueError):
        SocApproxConfig(m=2, z_max=1.0).validate()
    with pytest.raises(ValueError):
        SocApproxConfig(m=6, z_max=0.0).validate()


# ---------------------------------------------------------------------------
# exponential tower
# ---------------------------------------------------------------------------

def _tower_min_t(zval, approx):
    # t enters through a variable normalized by t_scale, the same
    # convention the subproblem builder uses for its rate slacks
    ts = approx.t_scale
    pb = ProgramBuilder()
    z = pb.add_var("z", lb=zval, ub=zval)
    t = pb.add_var("t", lb=1.0 / ts)
    soc_exp_upper(pb, z, AffExpr.var(t, ts), approx)
    pb.set_objective_max(AffExpr.var(t, -1.0))
    sol = solve(pb.build())
    assert sol.status == "optimal", sol.status
    return float(sol.x[t]) * ts


def test_exponential_tower_minimum():
    approx = SocApproxConfig(m=6, z_max=9.0)
    tmin = _tower_min_t(1.0, approx)
    assert math.e * (1.0 - 1e-3) <= tmin <= math.e * (1.0 + 1e-4)
    # m = 6 is far better than the coarse guarantee at z = 1
    assert tmin >= math.e * (1.0 - 1e-4)
    assert _tower_min_t(0.0, approx) == pytest.approx(1.0, abs=1e-4)
    tmin = _tower_min_t(8.0, approx)
    lo = math.exp(8.0) * (1.0 - approx.rel_error(8.0))
    assert lo * (1.0 - 1e-7) <= tmin <= math.exp(8.0) * (1.0 + 1e-4)


def test_exponential_tower_infeasible_when_capped():
    pb = ProgramBuilder()
    z = pb.add_var("z", lb=1.0, ub=1.0)
    t = pb.add_var("t", lb=0.0, ub=0.9)
    soc_exp_upper(pb, z, t, SocApproxConfig(m=6, z_max=9.0))
    pb.set_objective_max(AffExpr.var(t))
    sol = solve(pb.build())
    assert sol.status == "infeasible"


def test_tower_range_error():
    pb = ProgramBuilder()
    z = pb.add_var("z", lb=0.0)
    t = pb.add_var("t", lb=1.0)
    with pytest.raises(ValueError, match="larger z_max"):
        soc_exp_upper(pb, z, t, SocApproxConfig(m=6, z_max=2.0), z_ref=3.0)


def test_tower_config_for_system():
    cfg = small_cfg()
    ch = draw_channels(cfg, ChannelGenConfig(seed=11), 0)
    approx = SocApproxConfig.for_system(cfg, ch)
    assert approx.m >= 6
    assert approx.rel_error(approx.z_max) <= 1e-3
    # range covers the best single-user rate even with the whole block
    # squeezed into one phase
    s = max(cfg.P_b_max * np.sum(np.abs(ch.h[i]) ** 2) / cfg.sigma2_dl[i]
            for i in range(cfg.K_D))
    s = max(s, max(cfg.P_u_max * np.sum(np.abs(ch.g[j]) ** 2) / cfg.sigma2_ul
                   for j in range(cfg.K_U)))
    assert approx.z_max == pytest.approx(math.log1p(s) + 1.0)
    assert approx.rel_error(1.0) < approx.rel_error(5.0)


# ---------------------------------------------------------------------------
# expansion point
# ---------------------------------------------------------------------------

def test_expansion_point_matches_model():
    cfg = small_cfg()
    ch = draw_channels(cfg, ChannelGenConfig(seed=5), 0)
    dp = seed_design(cfg, ch)
    xp = ExpansionPoint.from_design_point(cfg, ch, dp)
    for i in range(cfg.K_D):
        assert xp.u_dl1[i] == pytest.approx(sinr_dl(cfg, ch, dp, i, 1),
                                            rel=1e-8)
        assert xp.u_dl2[i] == pytest.approx(
            sinr_dl(cfg, ch, dp, i, 2, matrix_path=True), rel=1e-8)
        cross = sum(abs(np.vdot(ch.h[i], dp.w2[k])) ** 2
                    for k in range(cfg.K_D) if k != i)
        cross += sum(dp.p2[j] * abs(ch.g_cross[j, i]) ** 2
                     for j in range(cfg.K_U))
        assert xp.b[i] == pytest.approx(1.0 + cross / cfg.sigma2_dl[i],
                                        rel=1e-8)
    for j in range(cfg.K_U):
        assert xp.u_ul[j] == pytest.approx(
            sinr_ul(cfg, ch, dp, j, matrix_path=True), rel=1e-8)
    np.testing.assert_allclose(xp.z_dl1, dp.alpha * np.log1p(xp.u_dl1))
    np.testing.assert_allclose(xp.z_dl2,
                               (1 - dp.alpha) * np.log1p(xp.u_dl2))
    np.testing.assert_allclose(xp.t_ul, np.exp(xp.z_ul))
    assert xp.c == pytest.approx(dp.alpha / grid_power(cfg, dp), rel=1e-12)
    assert xp.tau == pytest.approx(xp.c / dp.alpha, rel=1e-12)
    assert xp.phi1 == pytest.approx(xp.tau / dp.alpha, rel=1e-12)
    np.testing.assert_allclose(xp.phi2, xp.b / xp.u_dl2, rtol=1e-12)
    np.testing.assert_allclose(xp.w2_trace,
                               np.sum(np.abs(dp.w2) ** 2, axis=1),
                               rtol=1e-6)


def test_expansion_point_floors_degenerate_streams():
    cfg = small_cfg()
    ch = draw_channels(cfg, ChannelGenConfig(seed=6), 0)
    dp = seed_design(cfg, ch)
    dead = DesignPoint(w1=np.zeros_like(dp.w1), w2=dp.w2,
                       p1=np.zeros(cfg.K_U), p2=np.zeros(cfg.K_U),
                       p2b=dp.p2b + 20.0, alpha=dp.alpha)
    xp = ExpansionPoint.from_design_point(cfg, ch, dead)
    assert np.all(xp.u_dl1 > 0.0)
    assert np.all(xp.p2 == 1e-8)
    assert np.all(xp.u_ul > 0.0)
    xp.validate(cfg)


def test_expansion_point_validation_errors():
    cfg = small_cfg()
    ch = draw_channels(cfg, ChannelGenConfig(seed=7), 0)
    xp = ExpansionPoint.from_design_point(cfg, ch, seed_design(cfg, ch))
    import copy

    def broken(**kw):
        out = copy.deepcopy(xp)
        for k, v in kw.items():
            setattr(out, k, v)
        return out

    with pytest.raises(ValueError):
        broken(alpha=0.0).validate(cfg)
    with pytest.raises(ValueError):
        broken(alpha=1.0).validate(cfg)
    with pytest.raises(ValueError):
        broken(c=-1.0).validate(cfg)
    with pytest.raises(ValueError):
        broken(phi2=np.zeros(cfg.K_D)).validate(cfg)
    with pytest.raises(ValueError):
        broken(t_dl2=np.full(cfg.K_D, 0.5)).validate(cfg)
    with pytest.raises(ValueError):
        broken(b=np.full(cfg.K_D, 0.5)).validate(cfg)
    with pytest.raises(ValueError):
        broken(u_dl2=np.zeros(cfg.K_D)).validate(cfg)
    with pytest.raises(ValueError):
        broken(p1=-np.ones(cfg.K_U)).validate(cfg)
    with pytest.raises(ValueError):
        broken(w1=np.zeros((cfg.K_D, cfg.M_T + 1), complex)).validate(cfg)
    with pytest.raises(ValueError):
        dp = seed_design(cfg, ch, alpha=1e-4)
        ExpansionPoint.from_design_point(cfg, ch, dp)


# ---------------------------------------------------------------------------
# assembled programs
# ---------------------------------------------------------------------------

def test_anchor_is_feasible():
    cfg = small_cfg()
    gen = ChannelGenConfig(seed=21)
    for trial in range(4):
        ch = draw_channels(cfg, gen, trial)
        for ph1 in (True, False):
            dp = seed_design(cfg, ch, phase1=ph1)
            xp = ExpansionPoint.from_design_point(cfg, ch, dp,
                                                  include_phase1=ph1)
            sub = build_subproblem(cfg, ch, xp, include_phase1=ph1)
            rep = sub.program.check_feasibility(sub.anchor)
            assert rep["max"] <= 1e-9, (trial, ph1, rep)


def test_program_census_single_user():
    cfg = small_cfg(K_D=1, K_U=1, M_T=1, M_R=1)
    ch = draw_channels(cfg, ChannelGenConfig(seed=3), 0)
    xp = ExpansionPoint.from_design_point(cfg, ch, seed_design(cfg, ch))
    sub = build_subproblem(cfg, ch, xp)
    prog = sub.program
    semantic = {n for n in prog.names if "." not in n}
    assert semantic == {
        "q", "z_dl1[0]", "z_dl2[0]", "z_ul[0]",
        "u_dl1[0]", "u_dl2[0]", "u_ul[0]",
        "t_dl1[0]", "t_dl2[0]", "t_ul[0]",
        "b[0]", "x_ul[0]", "c", "tau", "alpha",
        "w1re[0][0]", "w1im[0][0]", "p1[0]", "p2[0]", "p2b",
        "W2[0][0,0]", "W2[0][1,0]", "W2[0][1,1]",
    }
    # one complex 1x1 covariance -> one 2x2 real PSD block
    assert len(prog.psd_blocks) == 1
    assert len(prog.psd_blocks[0]) == 3
    nz = np.flatnonzero(prog.objective)
    assert list(nz) == [sub.idx["q"]]
    assert prog.check_feasibility(sub.anchor)["max"] <= 1e-9


def test_relaxed_variant_adds_deficit_slacks():
    cfg = small_cfg(r_min_ul=2.0)
    ch = draw_channels(cfg, ChannelGenConfig(seed=4), 0)
    dp = seed_design(cfg, ch)
    xp = ExpansionPoint.from_design_point(cfg, ch, dp)
    sub = build_subproblem(cfg, ch, xp, relax_min_rate=True)
    assert sub.idx["mu"] is not None
    names = set(sub.program.names)
    assert {"mu[0]", "mu[1]"} <= names
    nz = set(np.flatnonzero(sub.program.objective))
    assert nz == {sub.idx["q"], *sub.idx["mu"]}
    assert sub.program.check_feasibility(sub.anchor)["max"] <= 1e-9
    mu = sub.mu_values(sub.anchor)
    np.testing.assert_allclose(mu, np.minimum(0.0, xp.z_ul - LN2 * 2.0))


def test_build_rejects_bad_anchors():
    cfg = small_cfg()
    ch = draw_channels(cfg, ChannelGenConfig(seed=9), 0)
    dp = seed_design(cfg, ch)
    xp = ExpansionPoint.from_design_point(cfg, ch, dp)
    with pytest.raises(ValueError, match="tower range"):
        build_subproblem(cfg, ch, xp, SocApproxConfig(m=6, z_max=0.5))
    with pytest.raises(ValueError, match="rate floor"):
        hungry = small_cfg(r_min_ul=20.0)
        build_subproblem(hungry, ch, xp,
                         SocApproxConfig(m=6, z_max=9.0))
    with pytest.raises(ValueError, match="alpha"):
        build_subproblem(cfg, ch, xp, alpha_fixed=0.9,
                         alpha_trust=0.05)


def test_subproblem_solution_is_physical():
    cfg = small_cfg()
    ch = draw_channels(cfg, ChannelGenConfig(seed=13), 0)
    dp = seed_design(cfg, ch)
    xp = ExpansionPoint.from_design_point(cfg, ch, dp)
    sub = build_subproblem(cfg, ch, xp, alpha_trust=0.05)
    sol = solve(sub.program)
    assert sol.status == "optimal", sol.status
    q_anchor = sub.anchor[sub.idx["q"]]
    assert sol.objective >= q_anchor - 1e-6
    out = sub.extract(sol.x)
    sl = out.slacks
    for i in range(cfg.K_D):
        g1 = sinr_dl(cfg, ch, out, i, 1)
        g2 = sinr_dl(cfg, ch, out, i, 2, matrix_path=True)
        assert sl.u_dl1[i] <= g1 * (1 + 1e-6) + 1e-7
        assert sl.u_dl2[i] <= g2 * (1 + 1e-6) + 1e-7
    for j in range(cfg.K_U):
        gu = sinr_ul(cfg, ch, out, j, matrix_path=True)
        assert sl.u_ul[j] <= gu * (1 + 1e-6) + 1e-7
        assert out.p2[j] >= sl.x[j] ** 2 - 1e-7
    # rate slacks respect the tower's certified undershoot
    for z, t in ((sl.z_dl1, sl.t_dl1), (sl.z_dl2, sl.t_dl2),
                 (sl.z_ul, sl.t_ul)):
        assert np.all(z <= np.log(t) + 2e-3)
    assert sl.c >= out.alpha * sl.tau - 1e-7
    # the tangent rows track the true supply draw to first order
    assert sl.c * grid_power(cfg, out) <= out.alpha * 1.05
    assert ee(cfg, ch, out) > 0.0
    assert np.all(sub.rank1_ratios(sol.x) > 0.0)


def test_alpha_fixed_pins_the_split():
    cfg = small_cfg()
    ch = draw_channels(cfg, ChannelGenConfig(seed=14), 0)
    dp = seed_design(cfg, ch, alpha=0.3)
    xp = ExpansionPoint.from_design_point(cfg, ch, dp)
    sub = build_subproblem(cfg, ch, xp, alpha_fixed=0.3)
    sol = solve(sub.program)
    assert sol.status == "optimal", sol.status
    assert sol.x[sub.idx["alpha"]] == pytest.approx(0.3, abs=1e-9)
