import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from evospde.errors import DomainError
from evospde.mesh import SpaceGrid, TimeGrid
from evospde.noise import (check_cond_linfty, check_cond_lq, hs_norm, make_model, noise_fields,
                           no_noise, sample, sample_ensemble, single_mode)


def test_single_mode_model():
    m = make_model(3.7, N=1)
    assert m.N == 1 and m.lambdas[0] == 1.0


def test_condition_sum_gamma_two():
    res = check_cond_linfty(make_model(2.0, N=100))
    assert res["sum"] <= 2 * math.pi**2 / 6
    assert res["sum"] == pytest.approx(2 * sum(n**-2.0 for n in range(1, 101)), rel=1e-12)
    assert res["pass"]
    assert make_model(2.0, N=100).regime == "Linf"


def test_harmonic_weights_fail():
    m = make_model(1.0, N=10_000)
    res = check_cond_linfty(m)
    assert not res["pass"]
    assert m.regime == "Lq"
    assert m.tail() == math.inf


def test_tail_is_hurwitz_zeta():
    m = make_model(2.0, N=10)
    assert m.tail() == pytest.approx(math.pi**2 / 6 - sum(n**-2.0 for n in range(1, 11)), rel=1e-10)


def test_cond_lq_examples():
    m = make_model(1.5, N=40)
    total = float(np.sum(m.lambdas))
    assert check_cond_lq(m, 2.0 + 1e-12, 0.2)["sum"] == pytest.approx(total, rel=1e-9)
    assert check_cond_lq(m, 4.0, 0.2)["sum"] == pytest.approx(math.sqrt(1.5) * total, rel=1e-12)
    assert check_cond_lq(m, 6.0, 0.4)["sum"] > 0
    with pytest.raises(DomainError, match="condCovb"):
        check_cond_lq(m, 4.0, 0.4)
    with pytest.raises(DomainError, match="condCovb"):
        check_cond_lq(m, 4.0, 0.5)


def test_lq_norms_match_quadrature():
    g = SpaceGrid(2000)
    m = make_model(2.0, N=5)
    assert np.allclose(m.lq_norms(4.0), [np.mean(np.abs(e) ** 4) ** 0.25 for e in m.modes(g)], rtol=1e-3)


def test_model_validation():
    with pytest.raises(DomainError):
        make_model(0.0)
    with pytest.raises(DomainError):
        make_model(2.0, N=0)
    with pytest.raises(DomainError):
        make_model(2.0, N=16).modes(SpaceGrid(16))


def test_modes_orthonormal():
    g = SpaceGrid(32)
    e = make_model(2.0, N=31).modes(g)
    assert np.allclose((e * g.weights) @ e.T, np.eye(31), atol=1e-10)


def test_sampling_is_deterministic_and_order_free():
    m = make_model(2.0, N=4)
    tg = TimeGrid(1.0, 10)
    a = sample(m, tg, seed=7, member=3).increments
    assert np.array_equal(a, sample(m, tg, seed=7, member=3).increments)
    fwd = sample_ensemble(m, tg, 7, [0, 1, 2, 3])
    rev = sample_ensemble(m, tg, 7, [3, 2, 1, 0])
    assert np.array_equal(fwd, rev[::-1])
    assert not np.array_equal(fwd[0], fwd[1])


def test_increment_variance():
    m = single_mode()
    tg = TimeGrid(1.0, 8)
    inc = sample_ensemble(m, tg, 11, range(10_000))[:, 0, :]
    var = inc.var(axis=0, ddof=1)
    assert np.all(np.abs(var / tg.dt - 1) <= 5 / math.sqrt(10_000))


def test_karhunen_loeve_covariance():
    g = SpaceGrid(8)
    m = make_model(2.0, N=4)
    tg = TimeGrid(0.5, 4)
    dW = sample_ensemble(m, tg, 5, range(20_000))
    w_T = noise_fields(m, g, dW).sum(axis=-2)
    emp = w_T.T @ w_T / len(w_T)
    e = m.modes(g)
    exact = 0.5 * (e.T * m.lambdas) @ e
    se = np.sqrt((np.diag(exact)[:, None] * np.diag(exact)[None, :] + exact**2) / len(w_T))
    assert np.all(np.abs(emp - exact) <= 5 * se + 1e-12)


def test_wiener_values_and_coarsen():
    w = sample(make_model(2.0, N=2), TimeGrid(1.0, 8), 3)
    assert np.array_equal(w.values()[:, 0], [0.0, 0.0])
    assert np.allclose(w.coarsen(4).values()[:, -1], w.values()[:, -1])
    with pytest.raises(DomainError):
        w.coarsen(3)


def test_hs_norm_examples():
    g = SpaceGrid(64)
    col = np.cos(3 * g.nodes)[None, :]
    from evospde.mesh import lp_norm
    assert hs_norm(col).value == pytest.approx(lp_norm(col[0], 2), rel=1e-14)
    m = make_model(2.0, N=20)
    assert hs_norm(m.columns(g)).value == pytest.approx(math.sqrt(np.sum(m.lambdas)), rel=1e-10)
    ones = np.ones(g.n_nodes)
    assert hs_norm(ones * m.columns(g)).value == pytest.approx(math.sqrt(np.sum(m.lambdas)), rel=1e-10)
    assert hs_norm(no_noise().columns(g)).value == 0.0


@given(arrays(float, (3, 9), elements=st.floats(-10, 10)))
def test_hs_norm_is_weighted_frobenius(cols):
    w = SpaceGrid(8).weights
    res = hs_norm(cols, p_values=(2.0,))
    assert res.value == pytest.approx(math.sqrt(np.sum(cols**2 * w)), rel=1e-12, abs=1e-300)
    assert res.lp[2.0] == pytest.approx(res.value, rel=1e-12, abs=1e-300)


def test_multiplication_bound():
    g = SpaceGrid(64)
    m = make_model(2.0, N=32)
    k = math.sqrt(check_cond_linfty(m)["sum"])
    rng = np.random.default_rng(4)
    from evospde.mesh import lp_norm
    for p in (2.0, 4.0):
        for _ in range(100):
            x = rng.standard_normal(g.n_nodes)
            ratio = hs_norm(x * m.columns(g), (p,)).lp[p] / lp_norm(x, p)
            assert ratio <= k * (1 + 1e-12)


def test_model_json():
    import json
    d = json.loads(make_model(2.0, N=3).to_json())
    assert d["N"] == 3 and d["lambda"][0] == 1.0
