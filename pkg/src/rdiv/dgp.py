"""Synthetic data generators.

* The proximal causal inference family: latent ``S', U, W', Q'`` with a
  binary treatment ``A``; observed ``X = (W, A, S)``, ``Z = (Q, A, S)``.
* A linear-Gaussian NPIV family whose population problem, in L2-orthonormal
  coordinates, is exactly a given :class:`~rdiv.inverse_core.LinearInverseProblem`.
"""
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import expit

from .data import Dataset
from .density_stage import linear_gaussian
from .errors import DimensionMismatchError, InvalidArgumentError, InvalidParameterError

LINKS = ("Id", "Poly", "LogSigmoid", "Piecewise", "Sigmoid", "CubicRoot")
PIECEWISE_LOG_FLOOR = 1e-8


@dataclass(frozen=True)
class LinkFunction:
    """Elementwise observation map ``g`` with a right inverse ``g_inv`` (``g(g_inv(t)) = t``).

    LogSigmoid is two-to-one on ``(0, 0.5)`` and Piecewise overlaps itself on
    ``(1, 1 + e^{-3}/8)``; the inverse returns one preimage in those cases.
    """

    kind: str

    def __post_init__(self):
        if self.kind not in LINKS:
            raise InvalidArgumentError(f"unknown link {self.kind!r}; expected one of {LINKS}")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        k = self.kind
        if k == "Id":
            return x.copy()
        if k == "Poly":
            return x ** 3
        if k == "LogSigmoid":
            return np.log1p(np.abs(16.0 * x - 8.0)) * np.sign(x)
        if k == "Piecewise":
            low = 3.0 * (x - 2.0)
            high = np.log(np.maximum(8.0 * x - 8.0, PIECEWISE_LOG_FLOOR))
            return np.where(x <= 1.0, low, high)
        if k == "Sigmoid":
            return 5.0 * expit(0.1 * x)
        return np.cbrt(x)

    def inverse(self, t):
        t = np.asarray(t, dtype=float)
        k = self.kind
        if k == "Id":
            return t.copy()
        if k == "Poly":
            return np.cbrt(t)
        if k == "LogSigmoid":
            neg = (9.0 - np.exp(-np.minimum(t, 0.0))) / 16.0
            pos = (np.exp(np.maximum(t, 0.0)) + 7.0) / 16.0
            return np.where(t < 0, neg, np.where(t == 0, 0.0, pos))
        if k == "Piecewise":
            return np.where(t <= -3.0, t / 3.0 + 2.0, 1.0 + np.exp(np.maximum(t, -3.0)) / 8.0)
        if k == "Sigmoid":
            return -10.0 * np.log(5.0 / t - 1.0)
        return t ** 3


def _ones(d):
    return np.ones(d)


def _equicorrelated(d, diag=0.1, offdiag=0.1):
    return diag * np.eye(d) + offdiag * np.ones((d, d))


@dataclass(frozen=True, eq=False)
class ProximalParams:
    """All blocks of the latent Gaussian model.

    ``d = d_S = d_Q`` is the common latent dimension of ``S', U, W', Q'``;
    ``W'`` is truncated to its first ``d_W`` coordinates when observed. The
    treatment coefficients ``mu_a, alpha_a, kappa_a`` are length-``d``
    vectors (an identity block acting on ``A * 1``).
    """

    d_S: int
    d_Q: int
    d_W: int
    link: LinkFunction
    mu0: np.ndarray = None
    alpha0: np.ndarray = None
    kappa0: np.ndarray = None
    mu_s: np.ndarray = None
    alpha_s: np.ndarray = None
    kappa_s: np.ndarray = None
    alpha_a: np.ndarray = None
    kappa_a: np.ndarray = None
    sigma_w2: np.ndarray = None
    sigma_q2: np.ndarray = None
    sigma_u2: np.ndarray = None
    sigma_wu2: np.ndarray = None
    sigma_qu2: np.ndarray = None
    sigma_wq2: np.ndarray = None
    mu_a: np.ndarray = None
    s_variance: float = 0.5
    logit_offset: float = 0.125
    logit_slope: float = 0.125
    y_noise: float = 1.0
    _chol: np.ndarray = field(default=None, repr=False)

    @property
    def d(self):
        return self.d_S

    @property
    def completed(self):
        return self.sigma_wq2 is not None and self.mu_a is not None

    @classmethod
    def draft(cls, d_S, d_Q, d_W, link="Id"):
        """Benchmark defaults with the two derived blocks left unset."""
        if d_S != d_Q:
            raise InvalidArgumentError("the latent model needs d_S == d_Q")
        if not 1 <= d_W <= d_S:
            raise InvalidArgumentError("d_W must lie in [1, d_S]")
        d = d_S
        link = link if isinstance(link, LinkFunction) else LinkFunction(link)
        eye = np.eye(d)
        return cls(
            d_S, d_Q, d_W, link,
            mu0=0.2 * _ones(d), alpha0=0.2 * _ones(d), kappa0=0.2 * _ones(d),
            mu_s=eye.copy(), alpha_s=eye.copy(), kappa_s=eye.copy(),
            alpha_a=_ones(d), kappa_a=_ones(d),
            sigma_w2=_equicorrelated(d), sigma_q2=_equicorrelated(d), sigma_u2=_equicorrelated(d),
            sigma_wu2=0.1 * np.ones((d, d)), sigma_qu2=0.1 * np.ones((d, d)),
        )

    def joint_covariance(self):
        """Covariance of ``(W', Q', U)`` given ``(A, S')``."""
        return np.block([
            [self.sigma_w2, self.sigma_wq2, self.sigma_wu2],
            [self.sigma_wq2.T, self.sigma_q2, self.sigma_qu2],
            [self.sigma_wu2.T, self.sigma_qu2.T, self.sigma_u2],
        ])

    def regression_blocks(self):
        """``Sigma_{w(q,u)} Sigma_{q,u}^{-1}`` split into its Q' and U blocks."""
        d = self.d
        s_wqu = np.hstack([self.sigma_wq2, self.sigma_wu2])
        s_qu = np.block([[self.sigma_q2, self.sigma_qu2], [self.sigma_qu2.T, self.sigma_u2]])
        coef = np.linalg.solve(s_qu.T, s_wqu.T).T
        return coef[:, :d], coef[:, d:]

    def conditional_coefficients(self):
        """Coefficients of ``E[W' | U, S', A, Q']`` on each regressor."""
        b_q, b_u = self.regression_blocks()
        return {
            "A": self.mu_a - b_q @ self.alpha_a - b_u @ self.kappa_a,
            "Q": b_q,
            "U": b_u,
            "S": self.mu_s - b_q @ self.alpha_s - b_u @ self.kappa_s,
            "const": self.mu0 - b_q @ self.alpha0 - b_u @ self.kappa0,
        }


def derive_compatibility_blocks(params):
    """Choose ``sigma_wq2`` and ``mu_a`` so that ``E[W'|U,S',A,Q']`` ignores ``A`` and ``Q'``.

    With ``B = (sigma_wq2, sigma_wu2) Sigma_{q,u}^{-1}``, a zero Q'-block
    forces ``sigma_wq2 = sigma_wu2 sigma_u2^{-1} sigma_qu2'`` and the U-block
    ``sigma_wu2 sigma_u2^{-1}``; the A coefficient then vanishes for
    ``mu_a = sigma_wu2 sigma_u2^{-1} kappa_a``.
    """
    d = params.d
    blocks = (params.sigma_w2, params.sigma_q2, params.sigma_u2, params.sigma_wu2, params.sigma_qu2)
    if any(b is None or b.shape != (d, d) for b in blocks):
        raise InvalidParameterError("all covariance blocks must be set to d x d matrices")
    try:
        b_u = np.linalg.solve(params.sigma_u2.T, params.sigma_wu2.T).T
        s_qu = np.block([[params.sigma_q2, params.sigma_qu2], [params.sigma_qu2.T, params.sigma_u2]])
        np.linalg.cholesky(s_qu)
    except np.linalg.LinAlgError as exc:
        raise InvalidParameterError(f"Sigma_(q,u) is singular or indefinite: {exc}") from None
    sigma_wq2 = b_u @ params.sigma_qu2.T
    mu_a = b_u @ params.kappa_a
    done = replace(params, sigma_wq2=sigma_wq2, mu_a=mu_a)
    try:
        chol = np.linalg.cholesky(done.joint_covariance())
    except np.linalg.LinAlgError:
        raise InvalidParameterError("assembled covariance is not positive definite") from None
    return replace(done, _chol=chol)


def proximal_params(d_S, d_Q, d_W, link="Id"):
    return derive_compatibility_blocks(ProximalParams.draft(d_S, d_Q, d_W, link))


def _require_completed(params):
    if not params.completed or params._chol is None:
        raise InvalidParameterError("params must be completed by derive_compatibility_blocks")


def _latents(params, n, rng, force_a=None):
    d = params.d
    s = rng.standard_normal((n, d)) * np.sqrt(params.s_variance)
    if force_a is None:
        p = expit(-(params.logit_offset - params.logit_slope * s.sum(axis=1)))
        a = (rng.random(n) < p).astype(float)
    else:
        a = np.full(n, float(force_a))
    mean = np.hstack([
        params.mu0 + a[:, None] * params.mu_a + s @ params.mu_s.T,
        params.alpha0 + a[:, None] * params.alpha_a + s @ params.alpha_s.T,
        params.kappa0 + a[:, None] * params.kappa_a + s @ params.kappa_s.T,
    ])
    draws = mean + rng.standard_normal((n, 3 * d)) @ params._chol.T
    return s, a, draws[:, :d], draws[:, d:2 * d], draws[:, 2 * d:]


def structural_mean(a, s, u, w):
    """``E[Y | A, S', U, W'] = A + 1's' + 1'u + 1'w'`` (full latent W')."""
    return a + s.sum(axis=1) + u.sum(axis=1) + w.sum(axis=1)


def generate_proximal(params, n, seed):
    """Observed sample with X = (W, A, S), Z = (Q, A, S) and outcome Y."""
    _require_completed(params)
    rng = np.random.default_rng(seed)
    s, a, w, q, u = _latents(params, n, rng)
    y = structural_mean(a, s, u, w) + params.y_noise * rng.standard_normal(n)
    g = params.link
    W, S, Q = g(w[:, :params.d_W]), g(s), g(q)
    x = np.hstack([W, a[:, None], S])
    z = np.hstack([Q, a[:, None], S])
    s_names = tuple(f"s_{i}" for i in range(params.d_S))
    x_names = tuple(f"w_{i}" for i in range(params.d_W)) + ("a",) + s_names
    z_names = tuple(f"q_{i}" for i in range(params.d_Q)) + ("a",) + s_names
    return Dataset(x, z, y, x_names, z_names)


def counterfactual_truth(params, mc, seed):
    """Monte-Carlo ``E[Y(1)]``: ``(value, standard_error)``.

    ``(S', U, W')`` are drawn from their observational law and only the
    treatment entering the outcome equation is set to 1. U is a confounder
    and W' a negative control outcome (``W' _|_ A | U, S'``), so neither is
    moved by the intervention; this is the estimand the bridge identifies.
    """
    _require_completed(params)
    rng = np.random.default_rng(seed)
    s, _, w, _, u = _latents(params, mc, rng)
    m = structural_mean(np.ones(mc), s, u, w)
    return float(m.mean()), float(m.std(ddof=1) / np.sqrt(mc))


def treatment_probability(params, nodes=80):
    """``P(A = 1)``, by Gauss-Hermite quadrature over ``1'S' ~ N(0, d * s_variance)``."""
    x, wts = hermegauss(nodes)
    sd = np.sqrt(params.d * params.s_variance)
    p = expit(-(params.logit_offset - params.logit_slope * sd * x))
    return float(wts @ p / wts.sum())


def counterfactual_truth_exact(params):
    """Closed form ``1 + 1'(kappa0 + kappa_a p) + 1'(mu0 + mu_a p)`` with ``p = P(A=1)``."""
    _require_completed(params)
    p = treatment_probability(params)
    return float(1.0 + np.sum(params.kappa0 + p * params.kappa_a) + np.sum(params.mu0 + p * params.mu_a))


def true_bridge_coefficients(params):
    """Linear bridge ``h(w', a, s') = c + a + b_s's' + k w'`` in latent coordinates.

    Solves ``E[h | U, S', A] = E[Y | U, S', A]`` for the observed block of
    ``W'``, assuming its U-loading is a multiple of ``1'U`` (true for the
    default blocks). Returns ``(const, a_coef, s_coef, w_coef)``.
    """
    _require_completed(params)
    coefs = params.conditional_coefficients()
    dW = params.d_W
    total_u = coefs["U"][0]
    target_u = np.ones(params.d) + coefs["U"].sum(axis=0)
    k = float(target_u[0] / total_u[0])
    w_coef = np.zeros(dW)
    w_coef[0] = k
    s_target = np.ones(params.d) + coefs["S"].sum(axis=0)
    s_coef = s_target - k * coefs["S"][0]
    const = float(coefs["const"].sum() - k * coefs["const"][0])
    return const, 1.0, s_coef, w_coef


@dataclass(frozen=True, eq=False)
class LinearNpivParams:
    """Gaussian NPIV design whose linear-feature problem is ``problem``.

    ``Z ~ N(0, I)``, ``X | Z ~ N(C Z, s^2 I)`` with ``C`` chosen so that, in the
    L2-orthonormal coordinates ``u = Sigma_X^{1/2} theta`` of linear functions
    ``h(x) = theta'x``, the conditional expectation operator is exactly
    ``problem.operator_matrix``. The outcome is
    ``Y = h0(X) + noise_y * (confounding * e_1 + sqrt(1 - confounding^2) * nu)``
    where ``e`` is the standardised first-stage noise, so ``confounding`` is
    the correlation that makes X endogenous.
    """

    problem: object
    noise_y: float = 0.5
    confounding: float = 0.5
    cond_scale: float = 0.5

    def __post_init__(self):
        T = self.problem.operator_matrix
        if T.shape[0] != T.shape[1]:
            raise DimensionMismatchError("the linear NPIV family needs a square operator")
        if np.max(self.problem.singular_values) >= 1.0:
            raise InvalidParameterError("operator norm must be below 1")
        if self.noise_y < 0 or not self.cond_scale > 0 or not -1 <= self.confounding <= 1:
            raise InvalidParameterError("need noise_y >= 0, cond_scale > 0, |confounding| <= 1")

    @property
    def x_dim(self):
        return self.problem.p_in

    @property
    def z_dim(self):
        return self.problem.p_out

    @property
    def _parts(self):
        u, s, vt = self.problem._svd
        c = self.cond_scale * s / np.sqrt(1.0 - s ** 2)
        C = vt.T @ np.diag(c) @ u.T
        sigma_x = vt.T @ np.diag(c ** 2 + self.cond_scale ** 2) @ vt
        half_inv = vt.T @ np.diag(1.0 / np.sqrt(c ** 2 + self.cond_scale ** 2)) @ vt
        return C, sigma_x, half_inv

    @property
    def first_stage_matrix(self):
        return self._parts[0]

    @property
    def x_covariance(self):
        return self._parts[1]

    @property
    def whitening(self):
        """``Sigma_X^{-1/2}``: maps X to coordinates where linear functions are orthonormal."""
        return self._parts[2]

    @property
    def theta0(self):
        """Raw-coordinate slope of ``h0``."""
        return self.whitening @ self.problem.true_solution

    def to_coordinates(self, theta):
        """Orthonormal coordinates of ``x -> theta'x``."""
        return np.linalg.solve(self.whitening, theta)

    def l2_error(self, intercept, theta):
        """``||h - h0||^2_{L2(X)}`` for ``h(x) = intercept + theta'x``."""
        d = np.asarray(theta) - self.theta0
        return float(intercept ** 2 + d @ self.x_covariance @ d)

    def oracle_density(self):
        """The true first stage as a one-component linear mixture model."""
        return gaussian_first_stage(self.first_stage_matrix, self.cond_scale)


def gaussian_first_stage(C, scale, intercept=None):
    """``X | Z ~ N(intercept + C Z, scale^2 I)`` as a K=1 linear mixture model."""
    return linear_gaussian(C, 0.0 if intercept is None else intercept, scale)


def linear_npiv_params(dimension, beta, seed, rate=1.0, top=0.9, w0=None, **kw):
    """Polynomial-decay problem (``s_i = top * i^-rate``) wrapped as an NPIV design."""
    from .inverse_core import SpectralDecay, make_problem
    w0 = np.ones(dimension) if w0 is None else w0
    problem = make_problem(SpectralDecay("polynomial", rate, dimension, top), beta, w0, seed)
    return LinearNpivParams(problem, **kw)


def generate_linear_npiv(params, n, seed):
    rng = np.random.default_rng(seed)
    C = params.first_stage_matrix
    z = rng.standard_normal((n, params.z_dim))
    e = rng.standard_normal((n, params.x_dim))
    x = z @ C.T + params.cond_scale * e
    rho = params.confounding
    noise = rho * e[:, 0] + np.sqrt(1.0 - rho ** 2) * rng.standard_normal(n)
    y = x @ params.theta0 + params.noise_y * noise
    return Dataset.plain(x, z, y)
