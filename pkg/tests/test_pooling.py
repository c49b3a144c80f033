import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codiff.models import History, LinearGaussian1D, SourceLocation
from codiff.pooling import (
    DegenerateWeightsError,
    OutcomeMeasure,
    log_lik_table,
    pooled_log_density_unnorm,
    pooled_score,
    row_ess,
    snis_weights,
    validate_pooling_weights,
)
from conftest import FlatGaussianLocation, quadratic_moments

rng = np.random.default_rng(11)


def test_pooled_density_single_atom_is_plain_posterior():
    model = LinearGaussian1D()
    xi = np.array([0.8])
    measure = OutcomeMeasure(np.array([[0.4]]))
    th = model.sample_prior(20, rng)
    got = pooled_log_density_unnorm(model, th, measure, xi)
    want = model.log_prior(th) + model.log_lik(np.array([0.4]), th, xi)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_pooled_gaussians_precision_weighted():
    # pooling N(1,1) and N(3,1) with equal weights gives N(2,1)
    model = FlatGaussianLocation(v=1.0)
    measure = OutcomeMeasure(np.array([[1.0], [3.0]]))
    mean, var = quadratic_moments(
        lambda t: pooled_log_density_unnorm(model, np.array([t]), measure, np.zeros(1)).item()
    )
    assert abs(mean - 2.0) < 1e-10
    assert abs(var - 1.0) < 1e-10
    score_at_mode = pooled_score(model, np.array([2.0]), measure, np.zeros(1))
    np.testing.assert_allclose(score_at_mode, 0.0, atol=1e-12)


def test_pooled_gaussians_random_configurations():
    # precision Lambda = sum nu_i Lambda_i, mean = Lambda^-1 sum nu_i Lambda_i m_i
    for _ in range(10):
        v = float(rng.uniform(0.3, 2.0))
        model = FlatGaussianLocation(v=v)
        atoms = rng.normal(size=(4, 1))
        nu = rng.dirichlet(np.ones(4))
        measure = OutcomeMeasure(atoms, nu)
        mean, var = quadratic_moments(
            lambda t: pooled_log_density_unnorm(model, np.array([t]), measure, np.zeros(1)).item()
        )
        lam = np.sum(nu / v)
        want_mean = np.sum(nu * atoms[:, 0] / v) / lam
        assert abs(var - 1.0 / lam) < 1e-10
        assert abs(mean - want_mean) < 1e-10


def test_nu_on_vertex_recovers_single_posterior():
    model = LinearGaussian1D()
    xi = np.array([1.2])
    atoms = np.array([[0.5], [-1.5]])
    measure = OutcomeMeasure(atoms, np.array([0.0, 1.0]))
    th = model.sample_prior(15, rng)
    got = pooled_log_density_unnorm(model, th, measure, xi)
    want = model.log_prior(th) + model.log_lik(atoms[1], th, xi)
    np.testing.assert_allclose(got, want, rtol=1e-12)


@pytest.mark.parametrize("with_history", [False, True])
def test_pooled_score_matches_finite_differences(with_history):
    model = SourceLocation()
    xi = np.array([0.4, 0.9])
    th = model.sample_prior(10, rng)
    atoms = model.sample_outcome(model.sample_prior(3, rng), xi, rng)
    measure = OutcomeMeasure(atoms, np.array([0.2, 0.5, 0.3]))
    history = History()
    if with_history:
        history = history.append(np.array([1.0, -1.0]), np.array([0.7]))
    s = pooled_score(model, th, measure, xi, history)
    step = 1e-5
    for i in range(10):
        for d in range(model.theta_dim):
            e = np.zeros(model.theta_dim)
            e[d] = step
            fd = (
                pooled_log_density_unnorm(model, th[i] + e, measure, xi, history)
                - pooled_log_density_unnorm(model, th[i] - e, measure, xi, history)
            ) / (2 * step)
            assert abs(s[i, d] - fd) / max(abs(fd), 1.0) < 1e-4


def test_snis_single_atom_uniform():
    w = snis_weights(rng.normal(size=(1, 8)), np.array([1.0]))
    np.testing.assert_allclose(w, 1.0 / 8)


def test_snis_identical_atoms_uniform():
    row = rng.normal(size=8)
    w = snis_weights(np.stack([row, row]), np.array([0.5, 0.5]))
    np.testing.assert_allclose(w, 1.0 / 8)


def test_snis_two_by_two_hand_computed():
    model = LinearGaussian1D(a=1.0, sigma=1.0)
    xi = np.array([1.0])
    atoms = np.array([[0.5], [-1.0]])
    th = np.array([[0.2], [1.1]])
    L = log_lik_table(model, OutcomeMeasure(atoms), th, xi)
    nu = np.array([0.5, 0.5])
    w = snis_weights(L, nu)
    # direct ratio table from the Gaussian densities
    dens = np.exp(-0.5 * (atoms - th[:, 0]) ** 2) / np.sqrt(2 * np.pi)
    tilde = dens / np.sqrt(dens[0] * dens[1])
    want = tilde / tilde.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(w, want, rtol=1e-10)


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 5),
    m=st.integers(1, 6),
    scale=st.floats(0.1, 300.0),
    seed=st.integers(0, 10_000),
)
def test_snis_rows_stochastic(n, m, scale, seed):
    r = np.random.default_rng(seed)
    L = scale * r.normal(size=(n, m))
    w = snis_weights(L, np.full(n, 1.0 / n))
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-10)


def test_snis_shift_invariances():
    L = rng.normal(size=(3, 5))
    nu = np.array([0.2, 0.3, 0.5])
    base = snis_weights(L, nu)
    np.testing.assert_allclose(snis_weights(L + rng.normal(size=(3, 1)), nu), base, rtol=1e-10)
    np.testing.assert_allclose(snis_weights(L + rng.normal(size=(1, 5)), nu), base, rtol=1e-10)


def test_snis_column_permutation_equivariance():
    L = rng.normal(size=(3, 6))
    nu = np.full(3, 1.0 / 3)
    perm = rng.permutation(6)
    np.testing.assert_allclose(snis_weights(L[:, perm], nu), snis_weights(L, nu)[:, perm])


def test_snis_degenerate_row_raises_with_index():
    L = rng.normal(size=(3, 4))
    L[1] = -np.inf
    with pytest.raises(DegenerateWeightsError) as err:
        snis_weights(L, np.full(3, 1.0 / 3))
    assert err.value.row == 1


def test_row_ess_extremes():
    uniform = np.full((2, 10), 0.1)
    np.testing.assert_allclose(row_ess(uniform), 10.0)
    onehot = np.zeros((1, 10))
    onehot[0, 3] = 1.0
    np.testing.assert_allclose(row_ess(onehot), 1.0)


def test_pooling_weight_validation():
    with pytest.raises(ValueError):
        validate_pooling_weights(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        validate_pooling_weights(np.array([-0.1, 1.1]))
    with pytest.raises(ValueError):
        OutcomeMeasure(np.zeros((2, 1)), np.array([1.0]))
