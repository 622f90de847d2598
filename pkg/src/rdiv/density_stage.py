"""First-stage conditional density estimation with isotropic Gaussian mixtures.

The mixture parameters are produced by a network of the (standardised)
conditioning vector ``z``: weights through a softmax, means directly, and
scales through ``softplus + floor_sigma``. Training maximises the
log-likelihood (``objective="mle"``) or minimises the chi-square criterion
``0.5 * E_n[int g(x|Z)^2 dx] - E_n[g(X|Z)]`` (``objective="chi2-mle"``), whose
inner integral is available in closed form for Gaussian mixtures.
"""
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logsumexp

from ._nn import DenseNet
from .errors import (DimensionMismatchError, InvalidArgumentError,
                     TrainingDivergedError, UnsupportedError)
from .optim import Adam

SCHEMA_VERSION = 1
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "mle"
    learning_rate: float = 1e-3
    epochs: int = 300
    batch_size: int = 50
    seed: int = 0
    weight_decay: float = 0.0
    freeze_scales: bool = False

    def __post_init__(self):
        if self.objective not in ("mle", "chi2-mle"):
            raise InvalidArgumentError(f"unknown objective {self.objective!r}")
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if self.batch_size < 1 or not self.learning_rate > 0 or self.weight_decay < 0:
            raise InvalidArgumentError("batch_size, learning_rate must be positive, weight_decay >= 0")


@dataclass(frozen=True, eq=False)
class ConditionalMixtureModel:
    n_components: int
    x_dim: int
    z_dim: int
    parameterization: str = "mlp"
    hidden: tuple = (64, 64, 64)
    floor_sigma: float = 1e-3
    params: np.ndarray = None
    z_shift: np.ndarray = None
    z_scale: np.ndarray = None
    trace: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if self.parameterization not in ("linear", "mlp"):
            raise InvalidArgumentError(f"unknown parameterization {self.parameterization!r}")
        if min(self.n_components, self.x_dim, self.z_dim) < 1 or not self.floor_sigma > 0:
            raise InvalidArgumentError("component count, dimensions and floor_sigma must be positive")
        hidden = () if self.parameterization == "linear" else tuple(int(h) for h in self.hidden)
        object.__setattr__(self, "hidden", hidden)
        if self.params is not None:
            params = np.array(self.params, dtype=float)
            if params.shape != (self.net.size,):
                raise DimensionMismatchError(f"expected {self.net.size} parameters, got {params.shape}")
            params.setflags(write=False)
            object.__setattr__(self, "params", params)
        shift = np.zeros(self.z_dim) if self.z_shift is None else np.array(self.z_shift, dtype=float)
        scale = np.ones(self.z_dim) if self.z_scale is None else np.array(self.z_scale, dtype=float)
        object.__setattr__(self, "z_shift", shift)
        object.__setattr__(self, "z_scale", scale)

    @property
    def net(self):
        k, d = self.n_components, self.x_dim
        return DenseNet((self.z_dim,) + self.hidden + (k + k * d + k,))

    def with_params(self, params, **changes):
        return replace(self, params=params, **changes)

    def to_dict(self):
        return {
            "version": SCHEMA_VERSION,
            "k": self.n_components,
            "x_dim": self.x_dim,
            "z_dim": self.z_dim,
            "parameterization": self.parameterization,
            "hidden": list(self.hidden),
            "floor_sigma": self.floor_sigma,
            "params": self.params.tolist(),
            "z_shift": self.z_shift.tolist(),
            "z_scale": self.z_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("version") != SCHEMA_VERSION:
            raise InvalidArgumentError(f"unsupported mixture schema version {doc.get('version')!r}")
        return cls(doc["k"], doc["x_dim"], doc["z_dim"], doc["parameterization"],
                   tuple(doc["hidden"]), doc["floor_sigma"], doc["params"],
                   doc["z_shift"], doc["z_scale"])


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    return y + np.log(-np.expm1(-y))


def _batch(v, dim, what):
    v = np.asarray(v, dtype=float)
    single = v.ndim <= 1
    V = v.reshape(1, -1) if single else v
    if V.shape[1] != dim:
        raise DimensionMismatchError(f"{what} has dimension {V.shape[1]}, expected {dim}")
    return V, single


def _split_outputs(model, out):
    k, d = model.n_components, model.x_dim
    logits = out[:, :k]
    mu = out[:, k:k + k * d].reshape(-1, k, d)
    raw = out[:, k + k * d:]
    return logits, mu, raw


def mixture_components(model, z):
    """``(weights (n,K), means (n,K,d), scales (n,K))`` at each row of ``z``."""
    Z, _ = _batch(z, model.z_dim, "z")
    out, _ = model.net.forward(model.params, (Z - model.z_shift) / model.z_scale)
    logits, mu, raw = _split_outputs(model, out)
    log_pi = logits - logsumexp(logits, axis=1, keepdims=True)
    return np.exp(log_pi), mu, _softplus(raw) + model.floor_sigma


def _component_log_pdf(x, mu, sigma):
    d = mu.shape[-1]
    sq = np.sum((x[:, None, :] - mu) ** 2, axis=-1)
    return -0.5 * d * LOG_2PI - d * np.log(sigma) - 0.5 * sq / sigma ** 2, sq


def log_density(model, x, z):
    X, single = _batch(x, model.x_dim, "x")
    Z, _ = _batch(z, model.z_dim, "z")
    if Z.shape[0] == 1 and X.shape[0] > 1:
        Z = np.repeat(Z, X.shape[0], axis=0)
    pi, mu, sigma = mixture_components(model, Z)
    comp, _ = _component_log_pdf(X, mu, sigma)
    out = logsumexp(comp + np.log(pi), axis=1)
    return float(out[0]) if single else out


def density(model, x, z):
    """``sum_k pi_k(z) N(x; mu_k(z), sigma_k(z)^2 I)``."""
    out = log_density(model, x, z)
    return float(np.exp(out)) if np.ndim(out) == 0 else np.exp(out)


def sample_components(pi, mu, sigma, count, rng):
    """Draws of shape ``(n, count, d)`` given per-row mixture parameters."""
    n, k, d = mu.shape
    u = rng.random((n, count))
    cdf = np.cumsum(pi, axis=1)
    cdf[:, -1] = 1.0
    comp = (u[:, :, None] > cdf[:, None, :]).sum(axis=2)
    rows = np.arange(n)[:, None]
    eps = rng.standard_normal((n, count, d))
    return mu[rows, comp] + sigma[rows, comp][..., None] * eps


def sample_many(model, z, count, rng):
    pi, mu, sigma = mixture_components(model, z)
    return sample_components(pi, mu, sigma, count, rng)


def sample(model, z, count, seed):
    """``count`` i.i.d. draws from ``g(.|z)``, shape ``(count, x_dim)``."""
    if count < 1:
        raise InvalidArgumentError("count must be >= 1")
    Z, _ = _batch(z, model.z_dim, "z")
    if Z.shape[0] != 1:
        raise DimensionMismatchError("sample takes a single conditioning vector")
    return sample_many(model, Z, count, np.random.default_rng(seed))[0]


def _pairwise_terms(mu, sigma):
    d = mu.shape[-1]
    s = sigma[:, :, None] ** 2 + sigma[:, None, :] ** 2
    diff = mu[:, :, None, :] - mu[:, None, :, :]
    sq = np.sum(diff ** 2, axis=-1)
    M = np.exp(-0.5 * d * np.log(2.0 * np.pi * s) - 0.5 * sq / s)
    return M, s, sq, diff


def chi2_pairwise_integral(model, z):
    """Closed-form ``int g(x|z)^2 dx`` for each row of ``z``."""
    Z, single = _batch(z, model.z_dim, "z")
    pi, mu, sigma = mixture_components(model, Z)
    M, _, _, _ = _pairwise_terms(mu, sigma)
    out = np.einsum("nj,nk,njk->n", pi, pi, M)
    return float(out[0]) if single else out


def _nll_grad(model, out, X):
    """Mean NLL and its gradient with respect to the raw network outputs."""
    logits, mu, raw = _split_outputs(model, out)
    sigma = _softplus(raw) + model.floor_sigma
    d = model.x_dim
    log_pi = logits - logsumexp(logits, axis=1, keepdims=True)
    comp, sq = _component_log_pdf(X, mu, sigma)
    joint = comp + log_pi
    ll = logsumexp(joint, axis=1)
    resp = np.exp(joint - ll[:, None])
    n = X.shape[0]
    g_logits = (np.exp(log_pi) - resp) / n
    g_mu = -(resp / sigma ** 2)[..., None] * (X[:, None, :] - mu) / n
    g_sigma = -resp * (-d / sigma + sq / sigma ** 3) / n
    g_raw = g_sigma * expit(raw)
    return -ll.mean(), np.hstack([g_logits, g_mu.reshape(n, -1), g_raw])


def _chi2_grad(model, out, X):
    """``0.5*mean int g^2 - mean g(X|Z)`` and its gradient wrt the raw outputs."""
    logits, mu, raw = _split_outputs(model, out)
    sigma = _softplus(raw) + model.floor_sigma
    d = model.x_dim
    n = X.shape[0]
    log_pi = logits - logsumexp(logits, axis=1, keepdims=True)
    pi = np.exp(log_pi)

    M, s, sq_pair, diff = _pairwise_terms(mu, sigma)
    integral = np.einsum("nj,nk,njk->n", pi, pi, M)
    dI_dpi = 2.0 * np.einsum("nk,njk->nj", pi, M)
    ppM = pi[:, :, None] * pi[:, None, :] * M
    dI_dmu = -2.0 * np.einsum("njk,njkd->njd", ppM / s, diff)
    dM_ds = M * (-0.5 * d / s + 0.5 * sq_pair / s ** 2)
    dI_dsigma = 4.0 * sigma * np.einsum("nj,nk,njk->nj", pi, pi, dM_ds)

    comp, sq = _component_log_pdf(X, mu, sigma)
    N = np.exp(comp)
    g = np.sum(pi * N, axis=1)
    dg_dpi = N
    dg_dmu = (pi * N / sigma ** 2)[..., None] * (X[:, None, :] - mu)
    dg_dsigma = pi * N * (-d / sigma + sq / sigma ** 3)

    dL_dpi = (0.5 * dI_dpi - dg_dpi) / n
    g_logits = pi * (dL_dpi - np.sum(pi * dL_dpi, axis=1, keepdims=True))
    g_mu = (0.5 * dI_dmu - dg_dmu) / n
    g_raw = (0.5 * dI_dsigma - dg_dsigma) / n * expit(raw)
    loss = 0.5 * integral.mean() - g.mean()
    return loss, np.hstack([g_logits, g_mu.reshape(n, -1), g_raw])


_OBJECTIVES = {"mle": _nll_grad, "chi2-mle": _chi2_grad}


def objective_and_grad(model, X, Z, objective="mle", params=None):
    """Training objective on ``(X, Z)`` and its gradient with respect to the parameters."""
    params = model.params if params is None else params
    out, acts = model.net.forward(params, (Z - model.z_shift) / model.z_scale)
    loss, g_out = _OBJECTIVES[objective](model, out, X)
    return loss, model.net.backward(params, acts, g_out)


def initial_model(template, X, Z, rng):
    """Uniform weights, means scattered around the marginal of X, scales at its spread."""
    z_shift = Z.mean(axis=0)
    z_scale = Z.std(axis=0)
    z_scale[z_scale < 1e-12] = 1.0
    net = template.net
    params = net.init(rng, out_scale=0.01)
    W_out, c_out = net.output_layer(params)
    k, d = template.n_components, template.x_dim
    x_mean = X.mean(axis=0)
    x_std = X.std(axis=0)
    spread = max(float(np.mean(x_std)), 10 * template.floor_sigma)
    jitter = 0.0 if k == 1 else 1.0
    c_out[:k] = 0.0
    c_out[k:k + k * d] = (x_mean + jitter * x_std * rng.standard_normal((k, d))).ravel()
    W_out[:, k:k + k * d] *= max(spread, 1.0) * 10.0
    c_out[k + k * d:] = _softplus_inv(spread - template.floor_sigma + 1e-12)
    return template.with_params(params, z_shift=z_shift, z_scale=z_scale)


def _scale_mask(model):
    """Boolean mask over parameters feeding the scale outputs."""
    mask = np.zeros(model.net.size, dtype=bool)
    k, d = model.n_components, model.x_dim
    probe = np.arange(model.net.size, dtype=float)
    W, c = model.net.output_layer(probe)
    cols = np.arange(k + k * d, 2 * k + k * d)
    mask[W[:, cols].astype(int).ravel()] = True
    mask[c[cols].astype(int)] = True
    return mask


def fit_density(data, template, cfg):
    """Mini-batch Adam on the chosen objective; returns a fitted model.

    ``data`` is a :class:`~rdiv.data.Dataset` (its modelled X columns are used)
    or an ``(X, Z)`` pair. The fitted model's ``trace`` holds the full-data
    objective before training followed by the mean batch objective per epoch.
    """
    if hasattr(data, "free_x"):
        X, Z = data.free_x, np.asarray(data.z)
    else:
        X, Z = (np.atleast_2d(np.asarray(a, dtype=float)) for a in data)
    if X.shape[0] == 0:
        raise InvalidArgumentError("empty training data")
    if X.shape[1] != template.x_dim or Z.shape[1] != template.z_dim:
        raise DimensionMismatchError(
            f"data dims ({X.shape[1]}, {Z.shape[1]}) != model dims ({template.x_dim}, {template.z_dim})")
    n = X.shape[0]
    batch = min(cfg.batch_size, n)
    rng = np.random.default_rng(cfg.seed)
    model = initial_model(template, X, Z, rng)
    params = np.array(model.params)
    frozen = _scale_mask(model) if cfg.freeze_scales else None
    opt = Adam(params.size, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    start, _ = objective_and_grad(model, X, Z, cfg.objective, params)
    trace = [float(start)]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            loss, grad = objective_and_grad(model, X[idx], Z[idx], cfg.objective, params)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(epoch)
            if frozen is not None:
                grad[frozen] = 0.0
                saved = params[frozen].copy()
            opt.step(params, grad)
            if frozen is not None:
                params[frozen] = saved
            total += loss * idx.size
        trace.append(total / n)
    return model.with_params(params, trace=tuple(trace))


def _quadrature_grid(x_quadrature):
    if isinstance(x_quadrature, tuple) and len(x_quadrature) == 3:
        lo, hi, num = x_quadrature
        return np.linspace(lo, hi, int(num))
    return np.asarray(x_quadrature, dtype=float)


def hellinger_estimate(model, truth, z_samples, x_quadrature=(-10.0, 10.0, 4001)):
    """Average over ``z_samples`` of ``int (sqrt p - sqrt q)^2 dx`` by trapezoid rule.

    ``x_quadrature`` is ``(lo, hi, n_points)`` or an explicit grid.
    """
    if model.x_dim != 1 or truth.x_dim != 1:
        raise UnsupportedError("Hellinger estimate is implemented for one-dimensional x only")
    grid = _quadrature_grid(x_quadrature)
    Zs = np.atleast_2d(np.asarray(z_samples, dtype=float))
    values = []
    for z in Zs:
        p = density(model, grid[:, None], z)
        q = density(truth, grid[:, None], z)
        values.append(np.trapezoid((np.sqrt(p) - np.sqrt(q)) ** 2, grid))
    return float(np.mean(values))


def gaussian_model(mean_slope, mean_intercept, sigma, z_dim=1):
    """K=1 linear-in-z model ``N(intercept + slope @ z, sigma^2)`` with ``x_dim = 1``.

    Built exactly (no training); used as an oracle first stage and in tests.
    """
    slope = np.atleast_1d(np.asarray(mean_slope, dtype=float))
    if slope.size != z_dim:
        raise DimensionMismatchError("slope length must equal z_dim")
    model = ConditionalMixtureModel(1, 1, z_dim, "linear", floor_sigma=min(1e-3, sigma / 2))
    params = np.zeros(model.net.size)
    W, c = model.net.output_layer(params)
    W[:, 1] = slope
    c[1] = mean_intercept
    c[2] = _softplus_inv(sigma - model.floor_sigma)
    return model.with_params(params)


def mixture_model(weights, means, sigmas, z_dim=1, floor_sigma=1e-3):
    """Constant-in-z mixture with given weights, means (K, d) and scales (K,)."""
    weights = np.asarray(weights, dtype=float)
    means = np.atleast_2d(np.asarray(means, dtype=float))
    if means.shape[0] != weights.size:
        means = means.T
    sigmas = np.asarray(sigmas, dtype=float)
    k, d = means.shape
    model = ConditionalMixtureModel(k, d, z_dim, "linear", floor_sigma=floor_sigma)
    params = np.zeros(model.net.size)
    _, c = model.net.output_layer(params)
    c[:k] = np.log(weights)
    c[k:k + k * d] = means.ravel()
    c[k + k * d:] = _softplus_inv(sigmas - floor_sigma)
    return model.with_params(params)


def linear_gaussian(C, intercept, sigma):
    """K=1 linear model ``X | z ~ N(intercept + C z, sigma^2 I)``, built exactly."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    dx, dz = C.shape
    model = ConditionalMixtureModel(1, dx, dz, "linear", floor_sigma=min(1e-3, sigma / 2))
    params = np.zeros(model.net.size)
    W, c = model.net.output_layer(params)
    W[:, 1:1 + dx] = C.T
    c[1:1 + dx] = intercept
    c[1 + dx] = _softplus_inv(sigma - model.floor_sigma)
    return model.with_params(params)


def gaussian_mle(data):
    """Closed-form maximum likelihood over K=1 linear isotropic Gaussian models.

    The mean map is the least-squares fit of the modelled X columns on
    ``(1, z)`` and ``sigma^2`` the mean squared residual over all coordinates.
    """
    X, Z = data.free_x, np.asarray(data.z)
    design = np.column_stack([np.ones(Z.shape[0]), Z])
    coef, *_ = np.linalg.lstsq(design, X, rcond=None)
    resid = X - design @ coef
    sigma = float(np.sqrt(np.mean(resid ** 2)))
    return linear_gaussian(coef[1:].T, coef[0], sigma)
