import numpy as np
import pytest

from rdiv import dgp
from rdiv.errors import InvalidArgumentError, InvalidParameterError
from rdiv.hypothesis import HypothesisSpec, features
from rdiv.inverse_core import SpectralDecay, make_problem


def latent_regression(params, n, seed):
    """OLS of W'_0 on (1, A, Q', U, S') with standard errors."""
    rng = np.random.default_rng(seed)
    s, a, w, q, u = dgp._latents(params, n, rng)
    design = np.column_stack([np.ones(n), a, q, u, s])
    coef, *_ = np.linalg.lstsq(design, w[:, 0], rcond=None)
    resid = w[:, 0] - design @ coef
    sigma2 = resid @ resid / (n - design.shape[1])
    se = np.sqrt(np.diag(sigma2 * np.linalg.inv(design.T @ design)))
    return coef, se


@pytest.mark.parametrize("dims", [(15, 15, 1), (20, 20, 10)])
def test_compatibility_blocks_analytic(dims):
    params = dgp.proximal_params(*dims)
    coefs = params.conditional_coefficients()
    assert np.max(np.abs(coefs["A"])) <= 1e-10
    assert np.max(np.abs(coefs["Q"])) <= 1e-10
    np.linalg.cholesky(params.joint_covariance())


def test_compatibility_blocks_sample_regression():
    params = dgp.proximal_params(15, 15, 1)
    coef, se = latent_regression(params, 200000, 0)
    d = params.d
    z = np.abs(coef[1:2 + d]) / se[1:2 + d]
    assert np.all(z <= 4.0)


def test_singular_covariance_rejected():
    draft = dgp.ProximalParams.draft(3, 3, 1)
    from dataclasses import replace
    bad = replace(draft, sigma_u2=np.ones((3, 3)))
    with pytest.raises(InvalidParameterError):
        dgp.derive_compatibility_blocks(bad)


def test_draft_is_not_completed():
    draft = dgp.ProximalParams.draft(3, 3, 1)
    assert not draft.completed
    with pytest.raises(InvalidParameterError):
        dgp.generate_proximal(draft, 5, 0)


def test_s_prime_mean():
    params = dgp.proximal_params(15, 15, 1)
    s, *_ = dgp._latents(params, 100000, np.random.default_rng(1))
    assert np.all(np.abs(s.mean(axis=0)) <= 4 * np.sqrt(0.5 / 1e5))


def test_treatment_probability_at_origin():
    params = dgp.proximal_params(15, 15, 1)
    s, a, *_ = dgp._latents(params, 400000, np.random.default_rng(2))
    small = np.abs(s.sum(axis=1)) < 0.1
    p_hat = a[small].mean()
    assert p_hat == pytest.approx(1 / (1 + np.exp(0.125)), abs=4 * np.sqrt(0.25 / small.sum()))
    assert 1 / (1 + np.exp(0.125)) == pytest.approx(0.4688, abs=1e-4)


def test_marginal_treatment_probability():
    params = dgp.proximal_params(15, 15, 1)
    a = dgp.generate_proximal(params, 200000, 3).x[:, 15 + 1 - 15]
    assert a.mean() == pytest.approx(dgp.treatment_probability(params), abs=4 * np.sqrt(0.25 / 2e5))


def test_identity_link_observes_latents():
    params = dgp.proximal_params(5, 5, 2, "Id")
    data = dgp.generate_proximal(params, 50, 4)
    s, a, w, q, u = dgp._latents(params, 50, np.random.default_rng(4))
    np.testing.assert_array_equal(data.x[:, 3:], s)
    np.testing.assert_array_equal(data.x[:, :2], w[:, :2])
    np.testing.assert_array_equal(data.z[:, :5], q)


def test_layout_and_names():
    data = dgp.generate_proximal(dgp.proximal_params(4, 4, 2, "Sigmoid"), 10, 0)
    assert data.x_names == ("w_0", "w_1", "a", "s_0", "s_1", "s_2", "s_3")
    assert data.z_names == ("q_0", "q_1", "q_2", "q_3", "a", "s_0", "s_1", "s_2", "s_3")
    assert data.free_columns == (0, 1)


def test_generate_proximal_is_seeded():
    params = dgp.proximal_params(4, 4, 1, "CubicRoot")
    a, b = dgp.generate_proximal(params, 20, 7), dgp.generate_proximal(params, 20, 7)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)


@pytest.mark.parametrize("kind", dgp.LINKS)
def test_link_right_inverse(kind):
    g = dgp.LinkFunction(kind)
    x = np.random.default_rng(5).normal(0, np.sqrt(0.5 * 4), 20000)
    t = g(x)
    np.testing.assert_allclose(g(g.inverse(t)), t, atol=1e-8, rtol=1e-8)


def test_link_values():
    assert dgp.LinkFunction("Poly")(2.0) == 8.0
    assert dgp.LinkFunction("CubicRoot")(-27.0) == pytest.approx(-3.0)
    assert dgp.LinkFunction("Sigmoid")(0.0) == pytest.approx(2.5)
    assert dgp.LinkFunction("LogSigmoid")(1.0) == pytest.approx(np.log(9.0))
    assert dgp.LinkFunction("Piecewise")(0.0) == pytest.approx(-6.0)
    assert dgp.LinkFunction("Piecewise")(2.0) == pytest.approx(np.log(8.0))
    assert dgp.LinkFunction("Piecewise")(1.0625) == pytest.approx(np.log(0.5))
    assert np.isfinite(dgp.LinkFunction("Piecewise")(1.0 + 1e-12))
    with pytest.raises(InvalidArgumentError):
        dgp.LinkFunction("Exp")


def test_counterfactual_truth_matches_closed_form():
    params = dgp.proximal_params(15, 15, 1)
    value, se = dgp.counterfactual_truth(params, 200000, 0)
    assert abs(value - dgp.counterfactual_truth_exact(params)) <= 4 * se


def test_counterfactual_truth_closed_form_value():
    params = dgp.proximal_params(15, 15, 1)
    p = dgp.treatment_probability(params)
    # every block of the default design sums to the same scalar per unit of p
    expected = 1 + 2 * (0.2 * 15) + p * (15 + params.mu_a.sum())
    assert dgp.counterfactual_truth_exact(params) == pytest.approx(expected, rel=1e-12)


def test_counterfactual_truth_se_scaling_and_seed():
    params = dgp.proximal_params(15, 15, 1)
    _, se1 = dgp.counterfactual_truth(params, 20000, 1)
    _, se2 = dgp.counterfactual_truth(params, 80000, 2)
    assert 1.3 <= se1 / se2 <= 3.0
    assert dgp.counterfactual_truth(params, 1000, 3) == dgp.counterfactual_truth(params, 1000, 3)


def test_linear_npiv_zero_noise_zero_solution():
    problem = make_problem(SpectralDecay("polynomial", 1.0, 4, 0.9), 1.0, np.zeros(4), 0)
    params = dgp.LinearNpivParams(problem, noise_y=0.0)
    assert np.all(dgp.generate_linear_npiv(params, 100, 0).y == 0.0)


def test_linear_npiv_operator_matches_construction():
    params = dgp.linear_npiv_params(4, 1.0, 3)
    n = 400000
    data = dgp.generate_linear_npiv(params, n, 4)
    # L2-orthonormal coordinates of X and Z; E[u_X u_Z'] is the operator's transpose
    ux = data.x @ params.whitening
    uz = data.z
    cross = ux.T @ uz / n
    se = np.sqrt(np.mean((ux[:, :, None] * uz[:, None, :]) ** 2, axis=0) / n)
    assert np.all(np.abs(cross - params.problem.operator_matrix.T) <= 4 * se + 1e-12)


def test_linear_npiv_conditional_mean_of_response():
    params = dgp.linear_npiv_params(3, 2.0, 1)
    data = dgp.generate_linear_npiv(params, 300000, 5)
    coef, *_ = np.linalg.lstsq(data.z, data.y, rcond=None)
    np.testing.assert_allclose(coef, params.problem.response, atol=0.02)


def test_linear_npiv_l2_error_is_exact():
    params = dgp.linear_npiv_params(3, 1.0, 2)
    rng = np.random.default_rng(6)
    theta = rng.standard_normal(3)
    c = 0.3
    data = dgp.generate_linear_npiv(params, 400000, 7)
    empirical = np.mean((c + data.x @ theta - data.x @ params.theta0) ** 2)
    assert params.l2_error(c, theta) == pytest.approx(empirical, rel=0.02)


def test_linear_npiv_is_seeded():
    params = dgp.linear_npiv_params(3, 1.0, 2)
    a, b = dgp.generate_linear_npiv(params, 10, 1), dgp.generate_linear_npiv(params, 10, 1)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)


def test_linear_npiv_rejects_unit_operator_norm():
    problem = make_problem(SpectralDecay("polynomial", 1.0, 3, 1.0), 1.0, np.ones(3), 0)
    with pytest.raises(InvalidParameterError):
        dgp.LinearNpivParams(problem)


def test_oracle_density_is_the_first_stage():
    params = dgp.linear_npiv_params(3, 1.0, 2)
    g = params.oracle_density()
    data = dgp.generate_linear_npiv(params, 100000, 8)
    design = np.column_stack([np.ones(data.n), data.z])
    coef, *_ = np.linalg.lstsq(design, data.x, rcond=None)
    np.testing.assert_allclose(coef[1:].T, params.first_stage_matrix, atol=0.01)
    assert features(HypothesisSpec("poly-sieve", 1, 3), data.x[0]).size == 4
    assert g.x_dim == 3 and g.z_dim == 3
