import json

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from rdiv import density_stage as ds
from rdiv.errors import DimensionMismatchError, InvalidArgumentError, TrainingDivergedError, UnsupportedError


def random_mixture(rng, k=None):
    k = int(rng.integers(1, 5)) if k is None else k
    weights = rng.dirichlet(np.ones(k))
    return ds.mixture_model(weights, rng.normal(0, 2, size=(k, 1)), rng.uniform(0.3, 2.0, size=k))


def linear_data(n, seed, slope=2.0, sd=0.5):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, 1))
    return z * slope + sd * rng.standard_normal((n, 1)), z


def test_standard_normal_density():
    m = ds.gaussian_model(0.0, 0.0, 1.0)
    assert ds.density(m, [0.0], [0.3]) == pytest.approx(1.0 / np.sqrt(2.0 * np.pi), abs=1e-12)


def test_symmetric_mixture_density():
    m = ds.mixture_model([0.5, 0.5], [[-1.5], [1.5]], [1.0, 1.0])
    assert ds.density(m, [1.5], [0.0]) == pytest.approx(ds.density(m, [-1.5], [0.0]), rel=1e-12)


def test_density_integrates_to_one():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = random_mixture(rng)
        pi, mu, sigma = ds.mixture_components(m, [[0.0]])
        lo, hi = (mu.min() - 10 * sigma.max()), (mu.max() + 10 * sigma.max())
        grid = np.linspace(lo, hi, 20001)
        total = np.trapezoid(ds.density(m, grid[:, None], [0.0]), grid)
        assert total == pytest.approx(1.0, abs=1e-4)


def test_density_dimension_mismatch():
    m = ds.gaussian_model(1.0, 0.0, 1.0)
    with pytest.raises(DimensionMismatchError):
        ds.density(m, [0.0, 1.0], [0.0])


def test_simplex_and_scale_floor_invariants():
    rng = np.random.default_rng(1)
    m = ds.initial_model(ds.ConditionalMixtureModel(5, 2, 3, "mlp", hidden=(8,)), rng.standard_normal((50, 2)),
                         rng.standard_normal((50, 3)), rng)
    params = rng.normal(0, 3, size=m.params.size)
    m = m.with_params(params)
    pi, _, sigma = ds.mixture_components(m, rng.normal(0, 3, size=(1000, 3)))
    assert np.all(pi > 0)
    assert np.max(np.abs(pi.sum(axis=1) - 1.0)) <= 1e-8
    assert np.all(sigma >= m.floor_sigma)


def test_sample_near_point_mass():
    m = ds.linear_gaussian([[1.0]], 0.0, 1e-4)
    draws = ds.sample(m, [0.7], 1000, seed=0)
    assert np.all(np.abs(draws - 0.7) <= 6 * 1e-4)


def test_sample_mean_clt():
    m = ds.gaussian_model(2.0, 1.0, 0.5)
    draws = ds.sample(m, [0.4], 100000, seed=3)
    assert abs(draws.mean() - 1.8) <= 4 * 0.5 / np.sqrt(1e5)


def test_sample_is_seeded():
    m = random_mixture(np.random.default_rng(2), k=3)
    a = ds.sample(m, [0.0], 50, seed=11)
    b = ds.sample(m, [0.0], 50, seed=11)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, ds.sample(m, [0.0], 50, seed=12))


def test_chi2_standard_normal():
    m = ds.gaussian_model(0.0, 0.0, 1.0)
    assert ds.chi2_pairwise_integral(m, [0.0]) == pytest.approx(1.0 / (2.0 * np.sqrt(np.pi)), abs=1e-9)


def test_chi2_matches_quadrature():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = random_mixture(rng)
        exact = ds.chi2_pairwise_integral(m, [0.0])
        numeric, _ = quad(lambda x: ds.density(m, [x], [0.0]) ** 2, -np.inf, np.inf, epsabs=1e-12, limit=200)
        assert exact == pytest.approx(numeric, abs=1e-6)


def test_chi2_far_separated_components():
    m = ds.mixture_model([0.5, 0.5], [[-50.0], [50.0]], [1.0, 2.0])
    self_terms = 1 / (2 * np.sqrt(np.pi) * 1.0) + 1 / (2 * np.sqrt(np.pi) * 2.0)
    assert ds.chi2_pairwise_integral(m, [0.0]) == pytest.approx(0.25 * self_terms, rel=1e-9)


def test_hellinger_identical_is_zero():
    m = ds.gaussian_model(1.0, 0.0, 1.0)
    assert ds.hellinger_estimate(m, m, np.zeros((5, 1))) <= 1e-6


def test_hellinger_shifted_gaussians():
    a = ds.gaussian_model(0.0, 0.0, 1.0)
    b = ds.gaussian_model(0.0, 1.0, 1.0)
    expected = 2.0 * (1.0 - np.exp(-1.0 / 8.0))
    assert expected == pytest.approx(0.23500, abs=1e-5)
    assert ds.hellinger_estimate(a, b, np.zeros((3, 1))) == pytest.approx(expected, abs=1e-6)


def test_hellinger_rejects_multivariate_x():
    m = ds.linear_gaussian(np.eye(2), 0.0, 1.0)
    with pytest.raises(UnsupportedError):
        ds.hellinger_estimate(m, m, np.zeros((2, 2)))


def test_fit_density_recovers_linear_gaussian():
    x, z = linear_data(5000, 0)
    g = ds.fit_density((x, z), ds.ConditionalMixtureModel(1, 1, 1, "linear"),
                       ds.TrainConfig(learning_rate=1e-2, epochs=30, batch_size=50, seed=0))
    _, mu, sigma = ds.mixture_components(g, [[0.0], [1.0]])
    assert 1.9 <= mu[1, 0, 0] - mu[0, 0, 0] <= 2.1
    assert 0.45 <= sigma[0, 0] <= 0.55
    assert g.trace[-1] <= g.trace[0]


def test_frozen_scale_fit_matches_least_squares():
    x, z = linear_data(2000, 1)
    template = ds.ConditionalMixtureModel(1, 1, 1, "linear")
    g = ds.fit_density((x, z), template, ds.TrainConfig(learning_rate=1e-2, epochs=1500, batch_size=2000,
                                                        seed=0, freeze_scales=True))
    design = np.column_stack([np.ones(2000), z])
    coef = np.linalg.lstsq(design, x[:, 0], rcond=None)[0]
    _, mu, _ = ds.mixture_components(g, [[0.0], [1.0]])
    assert mu[0, 0, 0] == pytest.approx(coef[0], abs=1e-3)
    assert mu[1, 0, 0] - mu[0, 0, 0] == pytest.approx(coef[1], abs=1e-3)


def test_fit_density_is_seeded():
    x, z = linear_data(300, 2)
    template = ds.ConditionalMixtureModel(3, 1, 1, "mlp", hidden=(8,))
    cfg = ds.TrainConfig(epochs=5, seed=4)
    a = ds.fit_density((x, z), template, cfg)
    b = ds.fit_density((x, z), template, cfg)
    assert np.array_equal(a.params, b.params)


def test_chi2_objective_trains():
    x, z = linear_data(1000, 3)
    g = ds.fit_density((x, z), ds.ConditionalMixtureModel(2, 1, 1, "linear"),
                       ds.TrainConfig(objective="chi2-mle", learning_rate=1e-2, epochs=20, seed=0))
    assert g.trace[-1] <= g.trace[0]


def test_objective_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((20, 2))
    z = rng.standard_normal((20, 3))
    template = ds.ConditionalMixtureModel(3, 2, 3, "mlp", hidden=(6,))
    model = ds.initial_model(template, x, z, rng)
    params = np.array(model.params) + rng.normal(0, 0.1, model.params.size)
    for objective in ("mle", "chi2-mle"):
        _, grad = ds.objective_and_grad(model, x, z, objective, params)
        numeric = np.empty_like(grad)
        for j in range(params.size):
            up, down = params.copy(), params.copy()
            up[j] += 1e-6
            down[j] -= 1e-6
            numeric[j] = (ds.objective_and_grad(model, x, z, objective, up)[0]
                          - ds.objective_and_grad(model, x, z, objective, down)[0]) / 2e-6
        assert np.max(np.abs(grad - numeric)) <= 1e-5


def test_zero_epochs_rejected():
    with pytest.raises(InvalidArgumentError):
        ds.TrainConfig(epochs=0)


def test_divergence_raises_with_epoch():
    x, z = linear_data(100, 4)
    x[3, 0] = np.inf
    with pytest.raises(TrainingDivergedError) as err:
        ds.fit_density((x, z), ds.ConditionalMixtureModel(1, 1, 1, "linear"), ds.TrainConfig(epochs=3))
    assert err.value.epoch == 0


def test_json_round_trip_is_exact():
    rng = np.random.default_rng(6)
    x, z = rng.standard_normal((30, 2)), rng.standard_normal((30, 3))
    m = ds.initial_model(ds.ConditionalMixtureModel(4, 2, 3, "mlp", hidden=(5, 4)), x, z, rng)
    doc = json.loads(json.dumps(m.to_dict()))
    assert set(doc) >= {"k", "x_dim", "z_dim", "parameterization", "params"}
    back = ds.ConditionalMixtureModel.from_dict(doc)
    assert np.array_equal(back.params, m.params)
    assert np.array_equal(ds.log_density(back, x, z), ds.log_density(m, x, z))


def test_hellinger_decreases_with_more_data():
    truth = ds.gaussian_model(2.0, 0.0, 0.5)
    zq = norm.ppf(np.linspace(0.05, 0.95, 7))[:, None]
    small, large = [], []
    for seed in range(10):
        for n, out in ((250, small), (1000, large)):
            x, z = linear_data(n, 100 + seed)
            g = ds.fit_density((x, z), ds.ConditionalMixtureModel(1, 1, 1, "linear"),
                               ds.TrainConfig(learning_rate=1e-2, epochs=40, batch_size=50, seed=seed))
            out.append(ds.hellinger_estimate(g, truth, zq))
    assert np.median(large) < np.median(small)


def test_mle_error_halves_when_n_quadruples():
    errors = {}
    for n in (500, 2000):
        values = []
        for seed in range(20):
            x, z = linear_data(n, 1000 * n + seed)
            # full-batch steps, so the optimizer converges to the sample MLE
            g = ds.fit_density((x, z), ds.ConditionalMixtureModel(1, 1, 1, "linear"),
                               ds.TrainConfig(learning_rate=1e-2, epochs=1500, batch_size=n, seed=seed))
            _, mu, _ = ds.mixture_components(g, [[0.0], [1.0]])
            values.append(abs(mu[1, 0, 0] - mu[0, 0, 0] - 2.0))
        errors[n] = np.median(values)
    ratio = errors[500] / errors[2000]
    assert 1.3 <= ratio <= 3.0
