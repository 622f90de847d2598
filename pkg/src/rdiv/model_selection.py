"""Choosing among fitted second-stage candidates on held-out data.

Both rules score ``h_theta = sum_j theta_j h_j`` with the regularized
validation loss

    E_n[(Y - (T h_theta)(Z))^2] + alpha * E_n[h_theta(X)^2]

using one frozen Monte-Carlo sample set per call, so the loss is an exact
convex quadratic in ``theta``. Best-ERM searches the simplex vertices,
Convex-ERM the whole simplex. :func:`select_density` picks the first stage
by held-out likelihood.
"""
import json
from dataclasses import dataclass, replace

import numpy as np

from .density_stage import fit_density, log_density
from .errors import DimensionMismatchError, InvalidArgumentError, TrainingDivergedError
from .estimator import ConditionalSampler
from .hypothesis import evaluate

SIMPLEX_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class CandidateSet:
    candidates: tuple
    g_hat: object
    alpha: float = 0.0

    def __post_init__(self):
        cands = tuple(self.candidates)
        if not cands:
            raise InvalidArgumentError("need at least one candidate")
        if len({h.spec.x_dim for h in cands}) != 1:
            raise DimensionMismatchError("candidates must share x_dim")
        if self.alpha < 0:
            raise InvalidArgumentError("alpha must be nonnegative")
        object.__setattr__(self, "candidates", cands)

    @property
    def size(self):
        return len(self.candidates)


@dataclass(frozen=True, eq=False)
class SimplexWeights:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        if theta.size == 0 or np.any(theta < 0) or abs(theta.sum() - 1.0) > SIMPLEX_TOL:
            raise InvalidArgumentError("weights must be nonnegative and sum to 1")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def vertex(cls, size, index):
        theta = np.zeros(size)
        theta[index] = 1.0
        return cls(theta)

    @classmethod
    def uniform(cls, size):
        return cls(np.full(size, 1.0 / size))

    @property
    def argmax(self):
        return int(np.argmax(self.theta))


@dataclass(frozen=True)
class _Quadratic:
    """``loss(theta) = theta' A theta - 2 b' theta + c``."""

    A: np.ndarray
    b: np.ndarray
    c: float

    def loss(self, theta):
        return float(theta @ self.A @ theta - 2.0 * self.b @ theta + self.c)

    def grad(self, theta):
        return 2.0 * (self.A @ theta - self.b)


def _quadratic(cands, data, mc_batch, seed):
    if mc_batch < 1:
        raise InvalidArgumentError("mc_batch must be >= 1")
    if data.x_dim != cands.candidates[0].spec.x_dim:
        raise DimensionMismatchError("data and candidates disagree on x_dim")
    sampler = ConditionalSampler(cands.g_hat, data)
    draws = sampler(data.z, mc_batch, np.random.default_rng(seed))
    flat = draws.reshape(-1, data.x_dim)
    n = data.n
    TH = np.column_stack([evaluate(h, flat).reshape(n, mc_batch).mean(axis=1) for h in cands.candidates])
    HX = np.column_stack([evaluate(h, data.x) for h in cands.candidates])
    A = (TH.T @ TH + cands.alpha * HX.T @ HX) / n
    b = TH.T @ data.y / n
    return _Quadratic(A, b, float(np.mean(data.y ** 2)))


def _as_weights(theta, size):
    w = theta if isinstance(theta, SimplexWeights) else SimplexWeights(theta)
    if w.theta.size != size:
        raise DimensionMismatchError(f"expected {size} weights, got {w.theta.size}")
    return w


def validation_loss(cands, theta, data, mc_batch, seed):
    """Regularized validation loss of the ``theta``-mixture of candidates."""
    w = _as_weights(theta, cands.size)
    return _quadratic(cands, data, mc_batch, seed).loss(w.theta)


def candidate_losses(cands, data, mc_batch, seed):
    """Validation loss of every single candidate on one shared sample set."""
    q = _quadratic(cands, data, mc_batch, seed)
    return np.diag(q.A) - 2.0 * q.b + q.c


def best_erm(cands, data, mc_batch, seed):
    """Vertex with the lowest validation loss; ties go to the lowest index."""
    losses = candidate_losses(cands, data, mc_batch, seed)
    return SimplexWeights.vertex(cands.size, int(np.argmin(losses)))


def _exponentiated_gradient(q, steps):
    size = q.b.size
    theta = np.full(size, 1.0 / size)
    # sup-norm bound of the gradient over the simplex
    lipschitz = 2.0 * (np.max(np.abs(q.A)) + np.max(np.abs(q.b)))
    step = 0.5 / max(lipschitz, 1e-300)
    best, best_loss = theta, q.loss(theta)
    for j in range(size):
        e = np.zeros(size)
        e[j] = 1.0
        loss = q.loss(e)
        if loss < best_loss:
            best, best_loss = e, loss
    for _ in range(steps):
        g = q.grad(theta)
        logits = np.log(np.maximum(theta, 1e-300)) - step * g
        logits -= logits.max()
        theta = np.exp(logits)
        theta /= theta.sum()
        loss = q.loss(theta)
        if loss < best_loss:
            best, best_loss = theta, loss
    return best, best_loss


def convex_erm(cands, data, mc_batch, seed, steps=500):
    """Simplex minimiser of the frozen validation loss by exponentiated gradient.

    The best point visited (vertices included) is returned, so the result
    never scores worse than :func:`best_erm` on the same samples.
    """
    if steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    q = _quadratic(cands, data, mc_batch, seed)
    theta, _ = _exponentiated_gradient(q, steps)
    theta = np.maximum(theta, 0.0)
    return SimplexWeights(theta / theta.sum())


def selection_report(cands, data, mc_batch, seed, steps=500, names=None):
    """Per-candidate losses and both selections, as a JSON-ready dict."""
    q = _quadratic(cands, data, mc_batch, seed)
    losses = np.diag(q.A) - 2.0 * q.b + q.c
    best = int(np.argmin(losses))
    theta, convex_loss = _exponentiated_gradient(q, steps)
    names = list(names) if names is not None else [f"candidate_{j}" for j in range(cands.size)]
    return {
        "alpha": cands.alpha,
        "mc_batch": mc_batch,
        "seed": seed,
        "candidates": [{"name": nm, "loss": float(v)} for nm, v in zip(names, losses)],
        "best_erm": {"index": best, "name": names[best], "loss": float(losses[best])},
        "convex_erm": {"theta": [float(t) for t in theta / theta.sum()], "loss": convex_loss},
    }


def write_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)


def select_density(data, candidates, holdout_fraction=0.2):
    """First-stage selection by held-out log-likelihood.

    ``candidates`` is a list of ``(template, TrainConfig)`` pairs. Each is fit
    on the leading rows, scored by mean negative log-density on the trailing
    ``holdout_fraction`` of rows, and the winner (lowest index on ties) is
    refit on all rows. Returns ``(model, index, holdout_nll)``.
    """
    if not candidates:
        raise InvalidArgumentError("need at least one density candidate")
    if not 0 < holdout_fraction < 1:
        raise InvalidArgumentError("holdout_fraction must lie in (0, 1)")
    n_fit = int(round(data.n * (1.0 - holdout_fraction)))
    if not 1 <= n_fit < data.n:
        raise InvalidArgumentError("holdout split leaves an empty part")
    train, held = data.split(n_fit)
    scores = []
    for template, cfg in candidates:
        try:
            model = fit_density(train, template, replace(cfg, batch_size=min(cfg.batch_size, train.n)))
            nll = -float(np.mean(log_density(model, held.free_x, held.z)))
        except TrainingDivergedError:
            nll = np.inf
        scores.append(nll if np.isfinite(nll) else np.inf)
    best = int(np.argmin(scores))
    template, cfg = candidates[best]
    return fit_density(data, template, cfg), best, scores
