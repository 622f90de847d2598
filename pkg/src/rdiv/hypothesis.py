"""Second-stage hypothesis classes: polynomial and random-Fourier sieves, and a small MLP.

Every function's output is hard-clipped to ``[-clip, clip]``; the parameter
gradient is taken as zero wherever the clip is active.
"""
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations_with_replacement

import numpy as np

from ._nn import ACTIVATIONS, DenseNet
from .errors import DimensionMismatchError, InvalidArgumentError, UnsupportedError

KINDS = ("poly-sieve", "fourier-sieve", "mlp")
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class HypothesisSpec:
    """``degree_or_width`` is the total polynomial degree, the number of
    Fourier frequencies, or the MLP hidden width depending on ``kind``."""

    kind: str
    degree_or_width: int
    x_dim: int
    clip: float = 50.0
    seed: int = 0
    hidden_layers: int = 3
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown hypothesis kind {self.kind!r}")
        if self.degree_or_width < 1 or self.x_dim < 1:
            raise InvalidArgumentError("degree_or_width and x_dim must be >= 1")
        if not self.clip > 0:
            raise InvalidArgumentError("clip must be positive")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")

    @cached_property
    def monomials(self):
        terms = []
        for degree in range(self.degree_or_width + 1):
            terms.extend(combinations_with_replacement(range(self.x_dim), degree))
        return tuple(terms)

    @cached_property
    def frequencies(self):
        rng = np.random.default_rng(self.seed)
        return rng.standard_normal((self.x_dim, self.degree_or_width))

    @cached_property
    def net(self):
        sizes = (self.x_dim,) + (self.degree_or_width,) * self.hidden_layers + (1,)
        return DenseNet(sizes, self.activation)

    @property
    def n_params(self):
        if self.kind == "poly-sieve":
            return len(self.monomials)
        if self.kind == "fourier-sieve":
            return 2 * self.degree_or_width
        return self.net.size

    @property
    def is_linear(self):
        return self.kind != "mlp"


def _as_batch(x, x_dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    X = x.reshape(1, -1) if single else x
    if X.shape[1] != x_dim:
        raise DimensionMismatchError(f"expected x of dimension {x_dim}, got {X.shape[1]}")
    return X, single


def _feature_matrix(spec, X):
    if spec.kind == "poly-sieve":
        cols = [np.prod(X[:, list(term)], axis=1) if term else np.ones(X.shape[0])
                for term in spec.monomials]
        return np.column_stack(cols)
    if spec.kind == "fourier-sieve":
        proj = X @ spec.frequencies
        return np.hstack([np.cos(proj), np.sin(proj)])
    raise UnsupportedError("features are defined for sieve kinds only")


def features(spec, x):
    """Sieve basis at ``x`` (a vector, or rows of a matrix)."""
    X, single = _as_batch(x, spec.x_dim)
    Phi = _feature_matrix(spec, X)
    return Phi[0] if single else Phi


@dataclass(frozen=True, eq=False)
class HypothesisFunction:
    """A member of the class described by ``spec``.

    ``input_shift``/``input_scale`` standardise inputs before the MLP; they are
    ignored by sieve kinds so that sieve features stay in raw coordinates.
    """

    spec: HypothesisSpec
    params: np.ndarray
    input_shift: np.ndarray = field(default=None)
    input_scale: np.ndarray = field(default=None)

    def __post_init__(self):
        params = np.array(self.params, dtype=float)
        if params.shape != (self.spec.n_params,):
            raise DimensionMismatchError(
                f"expected {self.spec.n_params} parameters, got {params.shape}")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        shift = np.zeros(self.spec.x_dim) if self.input_shift is None else np.array(self.input_shift, dtype=float)
        scale = np.ones(self.spec.x_dim) if self.input_scale is None else np.array(self.input_scale, dtype=float)
        object.__setattr__(self, "input_shift", shift)
        object.__setattr__(self, "input_scale", scale)

    def with_params(self, params):
        return HypothesisFunction(self.spec, params, self.input_shift, self.input_scale)

    def forward(self, X, params=None):
        """Unclipped output and a cache for :meth:`backward`."""
        params = self.params if params is None else params
        if self.spec.is_linear:
            Phi = _feature_matrix(self.spec, X)
            return Phi @ params, Phi
        out, acts = self.spec.net.forward(params, (X - self.input_shift) / self.input_scale)
        return out[:, 0], acts

    def backward(self, cache, dout, params=None):
        """Gradient of ``sum(dout * raw_output)`` with respect to the parameters."""
        params = self.params if params is None else params
        if self.spec.is_linear:
            return cache.T @ dout
        return self.spec.net.backward(params, cache, dout[:, None])

    def raw(self, x):
        X, single = _as_batch(x, self.spec.x_dim)
        out, _ = self.forward(X)
        return float(out[0]) if single else out

    def __call__(self, x):
        return evaluate(self, x)

    def to_dict(self):
        s = self.spec
        return {
            "version": SCHEMA_VERSION,
            "kind": s.kind,
            "degree_or_width": s.degree_or_width,
            "x_dim": s.x_dim,
            "clip": s.clip,
            "seed": s.seed,
            "hidden_layers": s.hidden_layers,
            "activation": s.activation,
            "params": self.params.tolist(),
            "input_shift": self.input_shift.tolist(),
            "input_scale": self.input_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("version") != SCHEMA_VERSION:
            raise InvalidArgumentError(f"unsupported hypothesis schema version {doc.get('version')!r}")
        spec = HypothesisSpec(doc["kind"], doc["degree_or_width"], doc["x_dim"],
                              doc["clip"], doc["seed"], doc["hidden_layers"], doc.get("activation", "tanh"))
        return cls(spec, doc["params"], doc["input_shift"], doc["input_scale"])


def zero_function(spec):
    return HypothesisFunction(spec, np.zeros(spec.n_params))


def init_function(spec, rng, X=None):
    """Starting point for training: zero for sieves, small random weights for the MLP.

    For the MLP, ``X`` (if given) sets the input standardisation.
    """
    if spec.is_linear:
        return zero_function(spec)
    shift = scale = None
    if X is not None:
        shift = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale < 1e-12] = 1.0
    params = spec.net.init(rng, out_scale=0.1)
    return HypothesisFunction(spec, params, shift, scale)


def evaluate(h, x):
    """Clipped value of ``h`` at a vector ``x`` or at each row of a matrix."""
    X, single = _as_batch(x, h.spec.x_dim)
    out, _ = h.forward(X)
    out = np.clip(out, -h.spec.clip, h.spec.clip)
    return float(out[0]) if single else out


def param_gradient(h, x):
    """Analytic gradient of :func:`evaluate` with respect to the parameters at one point."""
    X, _ = _as_batch(x, h.spec.x_dim)
    raw, cache = h.forward(X)
    if abs(raw[0]) >= h.spec.clip:
        return np.zeros(h.spec.n_params)
    return h.backward(cache, np.ones(1))


def grad_check(h, x, eps=1e-5):
    """Max absolute gap between the analytic gradient and central differences."""
    if not 1e-7 <= eps <= 1e-3:
        raise InvalidArgumentError("eps must lie in [1e-7, 1e-3]")
    analytic = param_gradient(h, x)
    X, _ = _as_batch(x, h.spec.x_dim)
    numeric = np.empty_like(analytic)
    base = np.array(h.params)
    for j in range(base.size):
        p = base.copy()
        p[j] += eps
        up = np.clip(h.forward(X, p)[0][0], -h.spec.clip, h.spec.clip)
        p[j] -= 2 * eps
        down = np.clip(h.forward(X, p)[0][0], -h.spec.clip, h.spec.clip)
        numeric[j] = (up - down) / (2 * eps)
    return float(np.max(np.abs(analytic - numeric)))


def sup_to_l2_ratio(spec, rng, n_pairs=100, n_points=2000, box=1.0):
    """Sup-norm versus L2-norm of differences of random sieve functions on a box.

    Returns ``(sup, l2)`` arrays, one entry per random pair; recorded as a
    smoothness diagnostic, not asserted.
    """
    if not spec.is_linear:
        raise UnsupportedError("ratio diagnostic is defined for sieve kinds")
    X = rng.uniform(-box, box, size=(n_points, spec.x_dim))
    Phi = _feature_matrix(spec, X)
    diffs = rng.standard_normal((n_pairs, spec.n_params)) - rng.standard_normal((n_pairs, spec.n_params))
    values = Phi @ diffs.T
    return np.max(np.abs(values), axis=0), np.sqrt(np.mean(values ** 2, axis=0))
