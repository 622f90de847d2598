"""Finite-dimensional linear inverse problems with known singular structure.

Closed-form Tikhonov and iterated-Tikhonov solutions live here. They act as
the deterministic reference that the sampled estimators are checked against.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, InvalidArgumentError

DEFAULT_ALPHA_GRID = np.logspace(-4, -1, 8)


@dataclass(frozen=True)
class SpectralDecay:
    """Singular value law: ``scale * i**-rate`` or ``scale * exp(-rate*(i-1))``."""

    kind: str
    rate: float
    dimension: int
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("polynomial", "exponential"):
            raise InvalidArgumentError(f"unknown decay kind {self.kind!r}")
        if self.rate <= 0 or self.dimension < 1 or self.scale <= 0:
            raise InvalidArgumentError("rate, dimension and scale must be positive")

    def singular_values(self):
        i = np.arange(1, self.dimension + 1, dtype=float)
        if self.kind == "polynomial":
            return self.scale * i ** -self.rate
        return self.scale * np.exp(-self.rate * (i - 1.0))


@dataclass(frozen=True, eq=False)
class LinearInverseProblem:
    """Operator ``T``, response ``r0 = T h0`` and least-norm solution ``h0``.

    ``source_beta``/``source_w0`` are set when ``h0 = (T'T)^{beta/2} w0``; they
    are ``None`` for problems built directly from an operator and response.
    """

    operator_matrix: np.ndarray
    response: np.ndarray
    true_solution: np.ndarray
    source_beta: float = None
    source_w0: np.ndarray = None
    _svd: tuple = field(default=None, repr=False)

    def __post_init__(self):
        T = np.asarray(self.operator_matrix, dtype=float)
        r0 = np.asarray(self.response, dtype=float)
        h0 = np.asarray(self.true_solution, dtype=float)
        if T.ndim != 2 or r0.shape != (T.shape[0],) or h0.shape != (T.shape[1],):
            raise DimensionMismatchError(
                f"operator {T.shape}, response {r0.shape}, solution {h0.shape}")
        for name, value in (("operator_matrix", T), ("response", r0), ("true_solution", h0)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if self._svd is None:
            u, s, vt = np.linalg.svd(T, full_matrices=True)
            object.__setattr__(self, "_svd", (u, s, vt))
        scale = max(1.0, float(np.linalg.norm(r0)))
        if np.linalg.norm(T @ h0 - r0) > 1e-10 * scale:
            raise InvalidArgumentError("response is not T applied to the true solution")
        if np.linalg.norm(self.null_space_component(h0)) > 1e-10 * max(1.0, float(np.linalg.norm(h0))):
            raise InvalidArgumentError("true solution has a null-space component")

    @property
    def p_out(self):
        return self.operator_matrix.shape[0]

    @property
    def p_in(self):
        return self.operator_matrix.shape[1]

    @property
    def singular_values(self):
        """Singular values padded with zeros to length ``p_in``."""
        s = self._svd[1]
        return np.concatenate([s, np.zeros(self.p_in - s.size)])

    @property
    def right_basis(self):
        """Rows are right singular vectors (``vt`` of the SVD)."""
        return self._svd[2]

    def rank(self, tol=1e-12):
        s = self._svd[1]
        return int(np.sum(s > tol * max(1.0, s.max(initial=0.0))))

    def null_space_component(self, h):
        vt = self._svd[2]
        null = vt[self.rank():]
        return null.T @ (null @ h)

    @classmethod
    def from_svd(cls, u, s, vt, beta, w0):
        """Build ``T = u diag(s) vt`` with ``h0 = (T'T)^{beta/2} w0``."""
        u, s, vt = (np.asarray(a, dtype=float) for a in (u, s, vt))
        w0 = np.asarray(w0, dtype=float)
        if beta < 0:
            raise InvalidArgumentError("beta must be nonnegative")
        if w0.shape != (vt.shape[0],) or s.size != min(u.shape[0], vt.shape[0]):
            raise DimensionMismatchError("w0 / singular values do not match the bases")
        T = (u[:, : s.size] * s) @ vt[: s.size]
        # (T'T)^{beta/2} = V diag(s^beta) V' on the range of T'; beta=0 gives the identity
        if beta == 0:
            h0 = w0.copy()
        else:
            coef = vt[: s.size] @ w0
            h0 = vt[: s.size].T @ (s ** beta * coef)
        return cls(T, T @ h0, h0, float(beta), w0, _svd=(u, s, vt))

    @classmethod
    def from_operator(cls, operator_matrix, response):
        """Least-norm problem for a given ``T`` and ``r0`` in the range of ``T``."""
        T = np.asarray(operator_matrix, dtype=float)
        r0 = np.asarray(response, dtype=float)
        if r0.shape != (T.shape[0],):
            raise DimensionMismatchError(f"response length {r0.size} != {T.shape[0]}")
        h0 = np.linalg.pinv(T) @ r0
        return cls(T, T @ h0, h0)


def random_orthonormal(dim, rng):
    """Haar-distributed orthonormal matrix via sign-corrected QR."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def make_problem(decay, beta, w0, seed, singular_basis=False):
    """Problem with singular values from ``decay`` and random orthonormal bases.

    ``w0`` is given in the original coordinates unless ``singular_basis`` is
    set, in which case entry ``i`` is the coefficient on the i-th right
    singular vector. ``h0 = (T'T)^{beta/2} w0``.
    """
    w0 = np.asarray(w0, dtype=float)
    if w0.shape != (decay.dimension,):
        raise DimensionMismatchError(f"w0 has length {w0.size}, expected {decay.dimension}")
    if beta < 0:
        raise InvalidArgumentError("beta must be nonnegative")
    rng = np.random.default_rng(seed)
    u = random_orthonormal(decay.dimension, rng)
    v = random_orthonormal(decay.dimension, rng)
    if singular_basis:
        w0 = v @ w0
    return LinearInverseProblem.from_svd(u, decay.singular_values(), v.T, beta, w0)


def tikhonov_solve(problem, alpha):
    """``(T'T + alpha I)^{-1} T' r0``."""
    if not alpha > 0:
        raise InvalidArgumentError("alpha must be positive")
    T = problem.operator_matrix
    gram = T.T @ T + alpha * np.eye(problem.p_in)
    return np.linalg.solve(gram, T.T @ problem.response)


def iterated_tikhonov_solve(problem, alpha, m):
    """m-th iterate of ``h_k = (T'T + alpha I)^{-1}(T' r0 + alpha h_{k-1})``, ``h_0 = 0``."""
    if not alpha > 0:
        raise InvalidArgumentError("alpha must be positive")
    if m < 1:
        raise InvalidArgumentError("m must be at least 1")
    T = problem.operator_matrix
    gram = T.T @ T + alpha * np.eye(problem.p_in)
    rhs = T.T @ problem.response
    h = np.zeros(problem.p_in)
    for _ in range(m):
        h = np.linalg.solve(gram, rhs + alpha * h)
    return h


def spectral_filter(sigma_sq, alpha, m):
    """``g_m(s) = (1 - (alpha/(s+alpha))^m) / s`` with its limit ``m/alpha`` at ``s=0``."""
    sigma_sq = np.asarray(sigma_sq, dtype=float)
    out = np.empty_like(sigma_sq)
    pos = sigma_sq > 0
    out[pos] = (1.0 - (alpha / (sigma_sq[pos] + alpha)) ** m) / sigma_sq[pos]
    out[~pos] = m / alpha
    return out


def filtered_solution(problem, alpha, m):
    """Iterated Tikhonov evaluated coordinatewise in the singular basis."""
    u, s, vt = problem._svd
    k = s.size
    coef = u[:, :k].T @ problem.response
    return vt[:k].T @ (spectral_filter(s ** 2, alpha, m) * s * coef)


def bias(problem, alpha, m=1):
    """Squared regularization bias ``||h_{m,*} - h0||^2``."""
    return float(np.sum((iterated_tikhonov_solve(problem, alpha, m) - problem.true_solution) ** 2))


def worst_case_bias(problem, beta, alpha, m=1):
    """Squared bias maximised over unit-norm source elements ``w0``.

    Equals ``max_i s_i^{2 beta} (alpha/(s_i^2+alpha))^{2m}`` over the
    singular values of the operator (zero singular values included).
    """
    s = problem.singular_values
    return float(np.max(s ** (2.0 * beta) * (alpha / (s ** 2 + alpha)) ** (2 * m)))


def _check_grid(alpha_grid):
    grid = np.asarray(alpha_grid, dtype=float)
    if grid.ndim != 1 or grid.size < 4:
        raise InvalidArgumentError("alpha grid needs at least 4 points")
    if np.any(grid <= 0) or np.any(grid >= 1):
        raise InvalidArgumentError("alpha grid values must lie in (0, 1)")
    if np.log10(grid.max() / grid.min()) < 2.0 - 1e-12:
        raise InvalidArgumentError("alpha grid must span at least two decades")
    return grid


def bias_slope(problem, m, alpha_grid=DEFAULT_ALPHA_GRID, worst_case=False):
    """OLS slope of log squared bias against log alpha.

    With ``worst_case=True`` the bias is the supremum over the unit ball of
    source elements for the problem's ``source_beta`` rather than the bias of
    the problem's own ``w0``.
    """
    grid = _check_grid(alpha_grid)
    if worst_case:
        if problem.source_beta is None:
            raise InvalidArgumentError("worst-case slope needs a source-condition problem")
        values = [worst_case_bias(problem, problem.source_beta, a, m) for a in grid]
    else:
        values = [bias(problem, a, m) for a in grid]
    values = np.asarray(values)
    if np.any(values <= 0):
        raise InvalidArgumentError("bias vanishes on the grid; slope undefined")
    slope, _ = np.polyfit(np.log(grid), np.log(values), 1)
    return float(slope)


def scale_free_source(dimension):
    """``w0_i = i^{-1/2}``: equal source energy per log-scale of ``s_i = 1/i``."""
    return np.arange(1, dimension + 1, dtype=float) ** -0.5
