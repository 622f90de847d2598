"""Regularized DeepIV: the second stage on top of a fitted conditional density.

For ``m = 1..iterations`` the fit minimises

    E_n[(Y - (T h)(Z))^2] + alpha * E_n[(h(X) - h_{m-1}(X))^2],   h_0 = 0,

where ``(T h)(z)`` is the mean of ``h`` over draws from the first-stage
density at ``z``. ``alpha = 0`` with one iteration is plain DeepIV.
"""
from dataclasses import dataclass, field, asdict
import numpy as np

from .density_stage import TrainConfig, mixture_components, sample_many
from .errors import DimensionMismatchError, InvalidArgumentError, TrainingDivergedError
from .hypothesis import HypothesisFunction, evaluate, init_function
from .inverse_core import LinearInverseProblem, iterated_tikhonov_solve
from .optim import Adam
from . import hypothesis as hyp

FROZEN_STREAM = 7
EVAL_STREAM = 11


@dataclass(frozen=True)
class RdivConfig:
    alpha: float = 0.1
    mc_batch: int = 64
    iterations: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    unbiased_grad: bool = True
    frozen_mc: bool = False
    eval_mc_batch: int = 4096
    center_outcome: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidArgumentError("alpha must be nonnegative")
        if self.mc_batch < 1 or self.eval_mc_batch < 1:
            raise InvalidArgumentError("Monte-Carlo batch sizes must be >= 1")
        if self.iterations < 1:
            raise InvalidArgumentError("iterations must be >= 1")


@dataclass(frozen=True, eq=False)
class RdivFit:
    hypothesis: HypothesisFunction
    per_iteration: tuple
    losses: tuple
    config: RdivConfig = None
    objective_start: tuple = ()
    objective_end: tuple = ()
    outcome_shift: float = 0.0

    def __post_init__(self):
        if self.per_iteration and self.per_iteration[-1] is not self.hypothesis:
            raise InvalidArgumentError("hypothesis must be the last iterate")

    def to_dict(self):
        cfg = asdict(self.config) if self.config is not None else None
        return {
            "version": 1,
            "hypothesis": self.hypothesis.to_dict(),
            "per_iteration": [h.to_dict() for h in self.per_iteration],
            "losses": [list(trace) for trace in self.losses],
            "objective_start": list(self.objective_start),
            "objective_end": list(self.objective_end),
            "outcome_shift": self.outcome_shift,
            "config": cfg,
        }

    @classmethod
    def from_dict(cls, doc):
        per = tuple(HypothesisFunction.from_dict(d) for d in doc["per_iteration"])
        cfg = doc.get("config")
        if cfg is not None:
            cfg = RdivConfig(**{**cfg, "train": TrainConfig(**cfg["train"])})
        return cls(per[-1], per, tuple(tuple(t) for t in doc["losses"]), cfg,
                   tuple(doc["objective_start"]), tuple(doc["objective_end"]),
                   doc.get("outcome_shift", 0.0))


class ConditionalSampler:
    """Draws full X rows given Z: modelled columns from ``g_hat``, shared ones copied."""

    def __init__(self, g_hat, layout=None):
        self.g_hat = g_hat
        self.layout = layout
        x_dim = g_hat.x_dim if layout is None else layout.x_dim
        z_dim = g_hat.z_dim if layout is None else layout.z_dim
        if layout is not None and (len(layout.free_columns) != g_hat.x_dim or layout.z_dim != g_hat.z_dim):
            raise DimensionMismatchError("first-stage model does not match the data layout")
        self.x_dim, self.z_dim = x_dim, z_dim

    def __call__(self, Z, count, rng):
        draws = sample_many(self.g_hat, Z, count, rng)
        if self.layout is None:
            return draws
        return self.layout.assemble_x(draws, Z[:, None, :])


def _clipped_forward(h, X, params):
    raw, cache = h.forward(X, params)
    inside = np.abs(raw) < h.spec.clip
    return np.clip(raw, -h.spec.clip, h.spec.clip), cache, inside


def _mc_mean(h, sampler, Z, mc_batch, rng, max_draws=1 << 16):
    """Per-row mean of ``h`` over ``mc_batch`` sampler draws, in row chunks to bound memory."""
    rows = max(1, max_draws // mc_batch)
    out = np.empty(Z.shape[0])
    for lo in range(0, Z.shape[0], rows):
        draws = sampler(Z[lo:lo + rows], mc_batch, rng)
        values = evaluate(h, draws.reshape(-1, draws.shape[-1]))
        out[lo:lo + rows] = values.reshape(-1, mc_batch).mean(axis=1)
    return out


def mc_conditional_expectation(g_hat, h, z, mc_batch, seed, layout=None):
    """Mean of ``h`` over ``mc_batch`` draws from ``g_hat(.|z)``."""
    if mc_batch < 1:
        raise InvalidArgumentError("mc_batch must be >= 1")
    Z = np.atleast_2d(np.asarray(z, dtype=float))
    out = _mc_mean(h, ConditionalSampler(g_hat, layout), Z, mc_batch, np.random.default_rng(seed))
    return float(out[0]) if np.ndim(z) <= 1 else out


def _moment_step(h, params, Y, S1, S2):
    """Squared moment loss on batch 1 and its gradient, with T(grad h) taken from batch 2."""
    b, B, dx = S1.shape
    v1, cache1, inside1 = _clipped_forward(h, S1.reshape(-1, dx), params)
    resid = Y - v1.reshape(b, B).mean(axis=1)
    loss = float(np.mean(resid ** 2))
    if S2 is S1:
        cache2, inside2 = cache1, inside1
    else:
        _, cache2, inside2 = _clipped_forward(h, S2.reshape(-1, dx), params)
    dout = np.repeat(-2.0 * resid / (b * B), B) * inside2
    return loss, h.backward(cache2, dout, params)


def _anchor_step(h, params, X, anchor_values, alpha):
    """``alpha * mean((h(X) - anchor)^2)`` and its gradient."""
    v, cache, inside = _clipped_forward(h, X, params)
    diff = v - anchor_values
    loss = alpha * float(np.mean(diff ** 2))
    dout = (2.0 * alpha / X.shape[0]) * diff * inside
    return loss, h.backward(cache, dout, params)


def _check_inputs(data, g_hat, spec=None):
    if data.n == 0:
        raise InvalidArgumentError("empty dataset")
    if spec is not None and spec.x_dim != data.x_dim:
        raise DimensionMismatchError(f"hypothesis x_dim {spec.x_dim} != data x_dim {data.x_dim}")
    return ConditionalSampler(g_hat, data)


def _streams(seed, iteration):
    return np.random.default_rng([seed, iteration])


def frozen_samples(data, g_hat, cfg):
    """The fixed per-row Monte-Carlo sample set used when ``cfg.frozen_mc`` is set."""
    sampler = _check_inputs(data, g_hat)
    return sampler(np.asarray(data.z), cfg.mc_batch, np.random.default_rng([cfg.seed, FROZEN_STREAM]))


def empirical_objective(h, data, sampler_or_samples, alpha, anchor=None, mc_batch=256, seed=0, y=None):
    """Regularized empirical objective of ``h`` on ``data``.

    ``sampler_or_samples`` is a frozen sample array ``(n, B, x_dim)`` or a
    :class:`ConditionalSampler` (then ``mc_batch`` draws per row with ``seed``).
    """
    Y = data.y if y is None else y
    if isinstance(sampler_or_samples, np.ndarray):
        S = sampler_or_samples
        n, B, dx = S.shape
        Th = evaluate(h, S.reshape(-1, dx)).reshape(n, B).mean(axis=1)
    else:
        Th = _mc_mean(h, sampler_or_samples, np.asarray(data.z), mc_batch,
                      np.random.default_rng([seed, EVAL_STREAM]))
    loss = float(np.mean((Y - Th) ** 2))
    if alpha:
        a = np.zeros(data.n) if anchor is None else evaluate(anchor, data.x)
        loss += alpha * float(np.mean((evaluate(h, data.x) - a) ** 2))
    return loss


def _prepare(data, spec, cfg, rng):
    shift = float(np.mean(data.y)) if cfg.center_outcome else 0.0
    Y = np.asarray(data.y) - shift
    start = init_function(spec, rng, np.asarray(data.x))
    if not spec.is_linear:
        start = _with_output_scale(start, Y)
    return Y, shift, start


def _with_output_scale(h, Y):
    """Fold the outcome scale into the MLP's last layer so training starts at the right magnitude."""
    params = np.array(h.params)
    W, c = h.spec.net.output_layer(params)
    scale = max(float(np.std(Y)), 1e-8)
    W *= scale
    c[:] = float(np.mean(Y))
    return h.with_params(params)


def _train_iteration(h, anchor, data, Y, sampler, cfg, rng, frozen, regularized=True):
    X = np.asarray(data.x)
    Z = np.asarray(data.z)
    n = data.n
    tc = cfg.train
    batch = min(tc.batch_size, n)
    params = np.array(h.params)
    opt = Adam(params.size, lr=tc.learning_rate, weight_decay=tc.weight_decay)
    anchor_values = None
    if regularized:
        anchor_values = np.zeros(n) if anchor is None else evaluate(anchor, X)
    trace = []
    for epoch in range(tc.epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            if frozen is not None:
                S1 = S2 = frozen[idx]
            else:
                S1 = sampler(Z[idx], cfg.mc_batch, rng)
                S2 = sampler(Z[idx], cfg.mc_batch, rng) if cfg.unbiased_grad else S1
            loss, grad = _moment_step(h, params, Y[idx], S1, S2)
            if regularized:
                reg_loss, reg_grad = _anchor_step(h, params, X[idx], anchor_values[idx], cfg.alpha)
                loss += reg_loss
                grad = grad + reg_grad
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(epoch)
            opt.step(params, grad)
            total += loss * idx.size
        trace.append(total / n)
    return h.with_params(params), tuple(trace)


def fit(data, g_hat, spec, cfg):
    """Fit ``cfg.iterations`` rounds of (iterated) Tikhonov-regularized DeepIV."""
    sampler = _check_inputs(data, g_hat, spec)
    Y, shift, current = _prepare(data, spec, cfg, np.random.default_rng([cfg.seed, 0, 1]))
    frozen = frozen_samples(data, g_hat, cfg) if cfg.frozen_mc else None
    eval_set = frozen if frozen is not None else sampler
    anchor = None
    per, losses, starts, ends = [], [], [], []
    for it in range(cfg.iterations):
        rng = _streams(cfg.seed, it + 1)
        starts.append(empirical_objective(current, data, eval_set, cfg.alpha, anchor,
                                          cfg.eval_mc_batch, cfg.seed + it, Y))
        current, trace = _train_iteration(current, anchor, data, Y, sampler, cfg, rng, frozen)
        ends.append(empirical_objective(current, data, eval_set, cfg.alpha, anchor,
                                        cfg.eval_mc_batch, cfg.seed + it, Y))
        per.append(current)
        losses.append(trace)
        anchor = current
    return RdivFit(per[-1], tuple(per), tuple(losses), cfg, tuple(starts), tuple(ends), shift)


def fit_deepiv(data, g_hat, spec, cfg):
    """Unregularized two-stage fit (no anchor term at all), one round."""
    sampler = _check_inputs(data, g_hat, spec)
    Y, shift, current = _prepare(data, spec, cfg, np.random.default_rng([cfg.seed, 0, 1]))
    frozen = frozen_samples(data, g_hat, cfg) if cfg.frozen_mc else None
    eval_set = frozen if frozen is not None else sampler
    start = empirical_objective(current, data, eval_set, 0.0, None, cfg.eval_mc_batch, cfg.seed, Y)
    current, trace = _train_iteration(current, None, data, Y, sampler, cfg, _streams(cfg.seed, 1),
                                      frozen, regularized=False)
    end = empirical_objective(current, data, eval_set, 0.0, None, cfg.eval_mc_batch, cfg.seed, Y)
    return RdivFit(current, (current,), (trace,), cfg, (start,), (end,), shift)


def predict(fit_result, x):
    return _shifted(evaluate(fit_result.hypothesis, x), fit_result.outcome_shift)


def _shifted(value, shift):
    return value + shift if shift else value


def counterfactual_mean(fit_result, covariate_sampler, mc, seed):
    """Average prediction over ``mc`` inputs drawn by ``covariate_sampler(count, rng)``."""
    X = covariate_sampler(mc, np.random.default_rng(seed))
    return float(np.mean(predict(fit_result, X)))


def forced_treatment_sampler(x_rows, column, value=1.0):
    """Sampler over observed X rows with one column forced to ``value``.

    Draws without replacement while ``count`` fits in the sample, so
    ``count == len(x_rows)`` is the plain empirical average.
    """
    rows = np.array(x_rows, dtype=float)
    rows[:, column] = value

    def draw(count, rng):
        if count <= rows.shape[0]:
            return rows[rng.permutation(rows.shape[0])[:count]]
        return rows[rng.integers(0, rows.shape[0], size=count)]

    return draw


def exact_feature_mean(data, g_hat, spec):
    """``E_g[features(X) | Z]`` in closed form for degree-1 polynomial sieves.

    The features are ``(1, x)``, so the conditional mean is the mixture mean
    ``sum_k pi_k mu_k(z)`` with shared columns copied from Z.
    """
    if spec.kind != "poly-sieve" or spec.degree_or_width != 1:
        raise InvalidArgumentError("exact feature means need a degree-1 polynomial sieve")
    _check_inputs(data, g_hat, spec)
    pi, mu, _ = mixture_components(g_hat, np.asarray(data.z))
    mean = np.einsum("nk,nkd->nd", pi, mu)
    x_mean = data.assemble_x(mean, np.asarray(data.z))
    return np.column_stack([np.ones(data.n), x_mean])


def linear_sieve_moments(data, g_hat, spec, cfg, samples=None, exact=False):
    """``(Psi, Phi)``: MC-averaged features at each Z and features at each X.

    With ``exact`` the Monte-Carlo average is replaced by its limit
    (degree-1 polynomial sieves only).
    """
    if not spec.is_linear:
        raise InvalidArgumentError("moment matrices exist for sieve kinds only")
    if exact:
        Psi = exact_feature_mean(data, g_hat, spec)
    else:
        S = frozen_samples(data, g_hat, cfg) if samples is None else samples
        n, B, dx = S.shape
        Psi = hyp.features(spec, S.reshape(-1, dx)).reshape(n, B, -1).mean(axis=1)
    Phi = hyp.features(spec, np.asarray(data.x))
    return Psi, Phi


def induced_problem(data, g_hat, spec, cfg, samples=None):
    """The frozen objective rewritten as a Euclidean Tikhonov problem.

    Returns ``(problem, to_params)``: solving ``problem`` with the same alpha
    gives coordinates ``u`` and ``to_params(u)`` maps them to sieve parameters.
    """
    Psi, Phi = linear_sieve_moments(data, g_hat, spec, cfg, samples)
    n = data.n
    Y = np.asarray(data.y) - (float(np.mean(data.y)) if cfg.center_outcome else 0.0)
    Q, R = np.linalg.qr(Psi / np.sqrt(n))
    b = Q.T @ Y / np.sqrt(n)
    L = np.linalg.cholesky(Phi.T @ Phi / n)
    T = np.linalg.solve(L, R.T).T
    problem = LinearInverseProblem.from_operator(T, b)

    def to_params(u):
        return np.linalg.solve(L.T, u)

    return problem, to_params


def solve_linear_sieve(data, g_hat, spec, cfg, samples=None, exact=False):
    """Exact minimiser of the frozen objective for a sieve class (clip assumed inactive)."""
    Psi, Phi = linear_sieve_moments(data, g_hat, spec, cfg, samples, exact)
    n = data.n
    shift = float(np.mean(data.y)) if cfg.center_outcome else 0.0
    Y = np.asarray(data.y) - shift
    A = Psi.T @ Psi / n
    G = Phi.T @ Phi / n
    rhs = Psi.T @ Y / n
    theta = np.zeros(spec.n_params)
    per = []
    for _ in range(cfg.iterations):
        theta = np.linalg.lstsq(A + cfg.alpha * G, rhs + cfg.alpha * G @ theta, rcond=None)[0]
        per.append(HypothesisFunction(spec, theta))
    return RdivFit(per[-1], tuple(per), tuple(() for _ in per), cfg, outcome_shift=shift)


def ridge_reference(data, g_hat, spec, cfg, samples=None):
    """Closed-form parameters for the frozen objective via :mod:`inverse_core`."""
    problem, to_params = induced_problem(data, g_hat, spec, cfg, samples)
    return to_params(iterated_tikhonov_solve(problem, cfg.alpha, cfg.iterations))
