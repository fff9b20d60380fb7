import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import gamma as gamma_fn

from evospde.convolution import (det_convolve, factorization_defect, max_reg_functional, max_reg_rhs,
                                 r_alpha, relative_defect, square_function_integral, stoch_convolve,
                                 zeta_alpha)
from evospde.elliptic import OperatorFamily, frac_power
from evospde.errors import ContractViolationError, DomainError
from evospde.evolution import EvolutionFamily
from evospde.mesh import SpaceGrid, TimeGrid, holder_seminorm_time, lp_norm
from evospde.noise import make_model, sample, sample_ensemble, single_mode

HEAT = OperatorFamily.constant(1.0, 0.0)


def family(fam=HEAT, n_cells=16, m=32, T=1.0, substeps=1):
    return EvolutionFamily(fam, SpaceGrid(n_cells), TimeGrid(T, m), substeps=substeps)


def zero_family(n_cells=8, m=16, T=1.0):
    return family(OperatorFamily.zero(), n_cells, m, T)


def test_det_convolve_zero_input():
    ef = family()
    res = det_convolve(ef, np.zeros((33, 17)))
    assert not np.any(res.values)


def test_det_convolve_eigenmode_oracle():
    errs = []
    for m in (50, 100, 200):
        ef = family(n_cells=64, m=m, T=0.5)
        x = np.cos(np.pi * ef.grid.nodes)
        lam = -np.pi**2
        got = det_convolve(ef, np.tile(x, (m + 1, 1))).values[-1]
        exact = (math.exp(lam * 0.5) - 1) / lam * x
        errs.append(lp_norm(got - exact, 2))
    assert errs[-1] <= 0.02 * lp_norm(exact, 2)
    assert errs[0] > errs[1] > errs[2]


def test_det_convolve_richardson_order():
    finals = []
    for m in (40, 80, 160):
        ef = family(n_cells=32, m=m, T=0.5)
        phi = np.cos(np.pi * ef.grid.nodes) + ef.grid.nodes ** 2
        finals.append(det_convolve(ef, np.tile(phi, (m + 1, 1))).values[-1])
    ratio = lp_norm(finals[0] - finals[1], 2) / lp_norm(finals[1] - finals[2], 2)
    assert 1.5 <= ratio <= 3


def test_det_convolve_theta_range():
    ef = family()
    with pytest.raises(DomainError):
        det_convolve(ef, np.zeros((33, 17)), theta_F=1.0)
    assert det_convolve(ef, np.zeros((33, 17)), theta_F=0.5).values.shape == (33, 17)


def test_stoch_convolve_zero_and_adaptedness():
    ef = family()
    W = sample(make_model(2.0, N=4), ef.tgrid, 1)
    assert not np.any(stoch_convolve(ef, np.zeros((4, 17)), W).values)
    with pytest.raises(ContractViolationError):
        stoch_convolve(ef, np.zeros((4, 17)), W, adapted=False)
    with pytest.raises(DomainError):
        stoch_convolve(ef, np.zeros((4, 17)), W, theta_B=0.5)


def test_stoch_convolve_without_drift_telescopes():
    ef = zero_family()
    W = sample(single_mode(), ef.tgrid, 2)
    e1 = np.ones((1, 9))
    res = stoch_convolve(ef, e1, W).values
    assert np.allclose(res, W.values()[0][:, None] * e1, atol=1e-14)


def _discrete_isometry(ef, cols, k_end=None):
    """E||sum_k P(T,t_k) cols dW_k||^2 = dt sum_k ||P(T,t_k) cols||_HS^2."""
    m = ef.tgrid.m_steps
    total = 0.0
    g = cols.copy()
    for k in range(m - 1, -1, -1):
        g = g @ ef.propagator(k).T
        total += ef.tgrid.dt * np.sum(lp_norm(g, 2) ** 2)
    return total


def test_ito_isometry_within_three_sigma():
    ef = family(n_cells=8, m=16, T=0.5)
    model = make_model(2.0, N=4)
    cols = model.columns(ef.grid)
    dW = sample_ensemble(model, ef.tgrid, 9, range(4000))
    final = stoch_convolve(ef, cols, dW).values[:, -1]
    sq = lp_norm(final, 2) ** 2
    oracle = _discrete_isometry(ef, cols)
    assert abs(sq.mean() - oracle) <= 3 * sq.std(ddof=1) / math.sqrt(len(sq))


def test_zeta_alpha_examples():
    ef = family(n_cells=8, m=64)
    model = make_model(2.0, N=3)
    W = sample(model, ef.tgrid, 4)
    cols = model.columns(ef.grid)
    assert not np.any(zeta_alpha(ef, np.zeros_like(cols), W, 0.2).values)
    direct = stoch_convolve(ef, cols, W).values
    near = zeta_alpha(ef, cols, W, 1e-3).values
    assert relative_defect(direct, near) <= 0.02
    with pytest.raises(DomainError):
        zeta_alpha(ef, cols, W, 0.5)
    with pytest.raises(DomainError):
        zeta_alpha(ef, cols, W, 0.3, theta_B=0.25)


def test_zeta_alpha_single_step():
    ef = family(n_cells=8, m=1, T=0.25)
    model = make_model(2.0, N=2)
    W = sample(model, ef.tgrid, 8)
    cols = model.columns(ef.grid)
    alpha = 0.3
    got = zeta_alpha(ef, cols, W, alpha).values[1]
    expected = 0.25 ** -alpha / gamma_fn(1 - alpha) * ((W.increments[:, 0] @ cols) @ ef.propagator(0).T)
    assert np.allclose(got, expected, rtol=1e-13, atol=1e-15)


def test_r_alpha_examples():
    ef = zero_family(m=16, T=2.0)
    t = ef.tgrid.times
    ones = np.ones((17, 9))
    assert np.allclose(r_alpha(ef, 3.0 * ones, 1.0).values, 3.0 * t[:, None] * ones, rtol=1e-13, atol=1e-14)
    for alpha in (0.1, 0.35, 0.8):
        expected = t ** alpha / gamma_fn(alpha + 1)
        assert np.allclose(r_alpha(ef, ones, alpha).values, expected[:, None] * ones, rtol=1e-12, atol=1e-14)
    assert not np.any(r_alpha(ef, 0 * ones, 0.5).values)
    with pytest.raises(DomainError):
        r_alpha(ef, ones, 0.0)


def test_factorization_zero_integrand():
    ef = family(n_cells=8, m=16)
    W = sample(make_model(2.0, N=3), ef.tgrid, 1)
    assert factorization_defect(ef, np.zeros((3, 9)), W, 0.25) == 0.0


def test_factorization_without_drift_converges():
    fine = TimeGrid(1.0, 512)
    inc = sample(single_mode(), fine, 21).increments
    defects = []
    for m in (64, 128, 256, 512):
        ef = zero_family(m=m)
        W = inc.reshape(1, m, -1).sum(axis=2)
        defects.append(factorization_defect(ef, np.ones((1, 9)), W, 0.25))
    orders = np.log2(np.array(defects[:-1]) / np.array(defects[1:]))
    assert np.mean(orders) >= 0.4
    assert defects[-1] < defects[0]


@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_convolutions_are_linear(seed, a, b):
    ef = family(n_cells=6, m=8)
    rng = np.random.default_rng(seed)
    f, g = rng.standard_normal((2, 9, 7))
    dW = rng.standard_normal((2, 8)) * 0.1
    c1, c2 = rng.standard_normal((2, 2, 7))
    ops = [lambda x: det_convolve(ef, x).values,
           lambda x: r_alpha(ef, x, 0.6).values]
    for op in ops:
        lhs, rhs = op(a * f + b * g), a * op(f) + b * op(g)
        assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-10 * (1 + np.max(np.abs(rhs))))
    sops = [lambda c: stoch_convolve(ef, c, dW).values,
            lambda c: zeta_alpha(ef, c, dW, 0.3).values]
    for op in sops:
        lhs, rhs = op(a * c1 + b * c2), a * op(c1) + b * op(c2)
        assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-10 * (1 + np.max(np.abs(rhs))))


def test_max_reg_zero_and_rhs():
    ef = family(n_cells=8, m=16)
    assert max_reg_functional(ef, np.zeros((17, 9))) == 0.0
    cols = make_model(2.0, N=3).columns(ef.grid)
    assert max_reg_rhs(ef, cols) == pytest.approx(np.sum(make_model(2.0, N=3).lambdas), rel=1e-10)


def test_max_reg_monte_carlo_oracle():
    ef = family(n_cells=8, m=16, T=0.5)
    model = make_model(2.0, N=3)
    cols = model.columns(ef.grid)
    dW = sample_ensemble(model, ef.tgrid, 17, range(10_000))
    left = max_reg_functional(ef, stoch_convolve(ef, cols, dW))
    # discrete oracle: E||(w-A)^{1/2} Z_l||^2 = dt sum_{k<l} ||(w-A)^{1/2} P(t_l,t_k) cols||_HS^2
    root = frac_power(ef.operator(0.0), 0.5, ef.w).matrix
    m, dt = ef.tgrid.m_steps, ef.tgrid.dt
    oracle = 0.0
    for l in range(1, m + 1):
        g = cols.copy()
        for k in range(l - 1, -1, -1):
            g = g @ ef.propagator(k).T
            oracle += dt * dt * np.sum(lp_norm(g @ root.T, 2) ** 2)
    assert left == pytest.approx(oracle, rel=0.05)
    # continuous spectral formula on the exact eigenbasis of the discrete operator
    sd = ef.operator(0.0).spectrum()
    coeff = (cols * ef.grid.weights) @ sd.eigenvectors
    lam = sd.eigenvalues
    T = 0.5
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = np.where(lam < -1e-12, (T - (1 - np.exp(2 * lam * T)) / (-2 * lam)) / (-2 * lam), T * T / 2)
    spectral = float(np.sum(coeff**2 * (ef.w - lam) * inner))
    assert oracle == pytest.approx(spectral, rel=0.25)


def test_square_function_building_block():
    g = SpaceGrid(32)
    op = OperatorFamily.constant(1.0, -1.0).operator(g, 0.0)
    x = np.exp(g.nodes) * np.sin(3 * g.nodes)
    res = square_function_integral(op, x)
    assert res["ratio"] == pytest.approx(0.5, abs=1e-6)
    assert square_function_integral(HEAT.operator(g, 0.0), x, w=1.0)["ratio"] == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(DomainError):
        square_function_integral(HEAT.operator(g, 0.0), x)


def test_r_alpha_holder_regularity_stable():
    rng = np.random.default_rng(6)
    coarse = rng.uniform(-1, 1, (64, 9))
    values = []
    for factor in (1, 2):
        ef = family(n_cells=8, m=64 * factor)
        f = np.repeat(coarse, factor, axis=0)
        f = np.vstack([f, f[-1:]])
        out = r_alpha(ef, f, 0.8)
        values.append(holder_seminorm_time(out.values, 0.5, "l2", times=ef.tgrid.times))
    assert all(math.isfinite(v) for v in values)
    assert max(values) / min(values) < 2


def test_result_serialization(tmp_path):
    ef = family(n_cells=4, m=4)
    res = det_convolve(ef, np.ones((5, 5)))
    res.to_csv(tmp_path / "conv")
    assert (tmp_path / "conv.csv").exists()
    assert res.metadata()["method"] == "direct"
