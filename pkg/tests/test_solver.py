import math

import numpy as np
import pytest

from evospde.elliptic import OperatorFamily
from evospde.errors import DivergenceError, DomainError, LocalizationError
from evospde.mesh import SpaceGrid
from evospde.noise import hs_norm, make_model, no_noise, single_mode
from evospde.solver import (PicardConfig, ProblemSpec, _check_nesting, draw_increments, free_evolution,
                            local_solve, make_evolution, march, nemytskii, picard_solve, picard_step,
                            weighted_norm)

HEAT = OperatorFamily.constant(1.0, 0.0)
ZERO = OperatorFamily.zero()


def zero_map(t, s, u):
    return np.zeros_like(u)


def one_map(t, s, u):
    return np.ones_like(u)


def identity_map(t, s, u):
    return u


def problem(fam=HEAT, noise=None, f=zero_map, g=zero_map, u0=1.0, T=1.0, n_cells=8, **kw):
    grid = SpaceGrid(n_cells)
    noise = make_model(2.0, N=3) if noise is None else noise
    return ProblemSpec(fam, noise, f, g, grid.field(u0), T, grid=grid, **kw)


def test_problem_validation_cites_hypotheses():
    with pytest.raises(DomainError, match=r"\(H2\)"):
        problem(theta_F=0.6, a=0.45)
    with pytest.raises(DomainError, match=r"\(H3\)"):
        problem(theta_B=0.3, a=0.2)
    with pytest.raises(DomainError, match=r"\(AT2\)"):
        problem(fam=OperatorFamily.constant(1.0, 0.0, mu=0.4))


def test_nemytskii_examples():
    ps = problem(f=zero_map, g=one_map)
    fu, cols = nemytskii(ps, 0.0, np.linspace(0, 1, 9))
    assert not np.any(fu)
    assert np.allclose(cols, ps.noise.columns(ps.grid))
    e1 = ps.noise.modes(ps.grid)[0]
    assert np.array_equal(nemytskii(problem(f=identity_map), 0.0, e1)[0], e1)
    ps2 = problem(g=identity_map, noise=make_model(2.0, N=2))
    _, cols = nemytskii(ps2, 0.0, np.full(9, 2.0))
    assert hs_norm(cols).value == pytest.approx(2 * math.sqrt(1.25), rel=1e-12)


def test_nemytskii_rejects_nonfinite():
    ps = problem(f=lambda t, s, u: np.full_like(u, np.inf))
    with pytest.raises(DomainError):
        nemytskii(ps, 0.0, np.ones(9))


def test_picard_step_examples():
    cfg = PicardConfig(M=3, m_steps=8, substeps=1, seed=5)
    ps = problem()
    ef = make_evolution(ps, cfg)
    dW = draw_increments(ps, cfg)
    phi = np.random.default_rng(0).standard_normal((3, 9, 9))
    assert np.array_equal(picard_step(ps, ef, dW, phi), free_evolution(ef, ps.initial(3)))

    ps = problem(fam=ZERO, f=one_map, u0=0.5)
    ef = make_evolution(ps, cfg)
    out = picard_step(ps, ef, dW, phi)
    assert np.allclose(out, 0.5 + ef.tgrid.times[None, :, None], atol=1e-14)

    ps = problem(fam=ZERO, g=one_map, u0=0.5)
    ef = make_evolution(ps, cfg)
    out = picard_step(ps, ef, dW, phi)
    w_t = np.concatenate([np.zeros((3, 3, 1)), np.cumsum(dW, axis=-1)], axis=-1)
    expected = 0.5 + np.einsum("mnk,ni->mki", w_t, ps.noise.columns(ps.grid))
    assert np.allclose(out, expected, atol=1e-13)


def test_weighted_norm_examples():
    cfg = PicardConfig(r=2, p_weight=0.0)
    grid = SpaceGrid(8)
    times = np.linspace(0, 1, 11)
    assert weighted_norm(np.zeros((4, 11, 9)), cfg, times=times) == 0.0
    assert weighted_norm(np.full((2, 11, 9), -3.0), cfg, times=times) == pytest.approx(3.0)
    p = 2.5
    x = np.cos(np.pi * grid.nodes)
    x /= np.sqrt(np.sum(x**2 * grid.weights))
    path = np.exp(p * times)[:, None] * x
    cfg_p = PicardConfig(r=4, p_weight=p)
    assert weighted_norm(path, cfg_p, times=times) == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(DomainError):
        weighted_norm(np.zeros((0, 11, 9)), cfg, times=times)


def test_picard_trivial_problem_one_iteration():
    res = picard_solve(problem(), PicardConfig(M=2, m_steps=8, substeps=1))
    assert res.report.iters == 1


def test_picard_ode_oracle():
    errs = []
    for m in (50, 100, 200):
        ps = problem(fam=ZERO, noise=no_noise(), f=lambda t, s, u: -u)
        res = picard_solve(ps, PicardConfig(M=1, m_steps=m, substeps=1, tol=1e-13))
        assert res.report.q_max <= 0.9
        errs.append(np.max(np.abs(res.values[0, :, 0] - np.exp(-res.ef.tgrid.times))))
        assert errs[-1] <= 1.0 / m
    assert 1.8 <= errs[0] / errs[1] <= 2.2 and 1.8 <= errs[1] / errs[2] <= 2.2


def test_picard_geometric_decay():
    ps = problem(f=lambda t, s, u: np.sin(u), g=lambda t, s, u: 0.5 * np.sqrt(1 + u**2))
    res = picard_solve(ps, PicardConfig(M=20, m_steps=16, substeps=2, seed=1))
    rep = res.report
    assert rep.q_max <= 0.9
    res_ = rep.residuals
    assert all(b <= rep.q_max * a * (1 + 1e-9) for a, b in zip(res_[:-1], res_[1:]) if b > 1e-12)
    assert res.report.to_dict()["half_reached"] in (True, False)


def test_picard_matches_causal_march():
    ps = problem(f=lambda t, s, u: np.sin(u), g=lambda t, s, u: 0.5 * np.sqrt(1 + u**2))
    cfg = PicardConfig(M=6, m_steps=16, substeps=2, seed=2, tol=1e-13)
    res = picard_solve(ps, cfg)
    assert np.allclose(res.values, march(ps, res.ef, res.dW), atol=1e-11)


def test_picard_reports_non_convergence():
    ps = problem(f=lambda t, s, u: np.sin(u))
    with pytest.raises(DivergenceError):
        picard_solve(ps, PicardConfig(M=1, m_steps=16, max_iter=1))


def test_r_two_only_without_extrapolation():
    ps = problem(theta_B=0.1)
    with pytest.raises(DomainError):
        picard_solve(ps, PicardConfig(r=2, m_steps=4))


def test_locality_bitwise():
    grid = SpaceGrid(8)
    rng = np.random.default_rng(3)
    u_a = rng.standard_normal((40, 9))
    u_b = u_a.copy()
    u_b[20:] = rng.standard_normal((20, 9))
    cfg = PicardConfig(M=40, m_steps=8, substeps=1, seed=4)
    f = lambda t, s, u: np.sin(u)
    g = lambda t, s, u: np.cos(u)
    ps_a = ProblemSpec(HEAT, make_model(2.0, N=3), f, g, u_a, 1.0, grid=grid)
    ps_b = ProblemSpec(HEAT, make_model(2.0, N=3), f, g, u_b, 1.0, grid=grid)
    ef = make_evolution(ps_a, cfg)
    dW = draw_increments(ps_a, cfg)
    phi = rng.standard_normal((40, 9, 9))
    step_a, step_b = picard_step(ps_a, ef, dW, phi), picard_step(ps_b, ef, dW, phi)
    assert np.array_equal(step_a[:20], step_b[:20])
    assert np.array_equal(march(ps_a, ef, dW)[:20], march(ps_b, ef, dW)[:20])


def test_local_solve_global_lipschitz_never_stops():
    ps = problem(f=lambda t, s, u: np.sin(u), g=lambda t, s, u: 0.2 * np.cos(u), u0=0.5)
    cfg = PicardConfig(M=8, m_steps=32, substeps=1, seed=6)
    sol = local_solve(ps, cfg, 6)
    sup = np.max(np.abs(march(ps, sol.ef, draw_increments(ps, cfg))))
    above = [j for j, n in enumerate(sol.levels) if n > sup]
    assert above and np.all(sol.tau[:, above] == 32 + 1)
    assert np.all(sol.tau_times[:, above] == 1.0)
    assert not sol.exploded.any()


def test_local_solve_zero_equilibrium():
    ps = problem(fam=ZERO, noise=no_noise(), f=lambda t, s, u: u**3, u0=0.0)
    sol = local_solve(ps, PicardConfig(M=1, m_steps=32, substeps=1), 4)
    assert not np.any(sol.values)
    assert np.all(sol.tau_times == 1.0) and not sol.exploded.any()


def test_local_solve_short_blowup_run():
    ps = problem(fam=ZERO, noise=no_noise(), f=lambda t, s, u: u**2, u0=2.0, T=0.6, n_cells=4)
    sol = local_solve(ps, PicardConfig(M=1, m_steps=1200, substeps=1), 10)
    assert sol.exploded[0]
    assert abs(sol.explosion_time[0] - 0.5) <= 0.05 * 0.5
    tau = sol.tau_times[0]
    assert np.all(np.diff(tau[tau < 0.6]) >= 0)


def test_nesting_check_detects_disagreement():
    lower = np.zeros((1, 5, 3))
    upper = lower.copy()
    upper[0, 1, 0] = 1e-15
    with pytest.raises(LocalizationError):
        _check_nesting(lower, upper, np.array([3]))
    _check_nesting(lower, upper, np.array([1]))


def test_local_solve_argument_checks():
    ps = problem()
    with pytest.raises(DomainError):
        local_solve(ps, PicardConfig(m_steps=4), 0)
    with pytest.raises(DomainError):
        local_solve(ps, PicardConfig(m_steps=4), 2, radii=[2.0, 1.0])


def test_moment_bound_shape():
    ratios = []
    for scale in (1.0, 2.0, 4.0):
        ps = problem(f=lambda t, s, u: np.sin(u), g=lambda t, s, u: 0.5 * np.sqrt(1 + u**2),
                     u0=lambda s: scale * np.cos(np.pi * s))
        cfg = PicardConfig(M=50, m_steps=16, substeps=1, seed=7)
        res = picard_solve(ps, cfg)
        z = weighted_norm(res.values, cfg, ef=res.ef, p=res.report.p_weight)
        u0_norm = weighted_norm(ps.initial(1)[:, None, :], cfg, times=[0.0], p=0.0)
        ratios.append(z / (1 + u0_norm))
    assert (max(ratios) - min(ratios)) / max(ratios) < 0.5


def test_config_validation():
    with pytest.raises(DomainError):
        PicardConfig(r=1.5)
    with pytest.raises(DomainError):
        PicardConfig(p_weight=-1.0)
    with pytest.raises(DomainError):
        PicardConfig(M=0)
