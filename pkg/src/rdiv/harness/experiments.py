"""Experiment drivers behind the CLI subcommands.

Each replication or grid cell is an independent work item seeded from the
master seed and its own coordinates (:func:`derive_seed`), so results do not
depend on the number of workers or on execution order.
"""
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .. import estimator as est
from ..density_stage import ConditionalMixtureModel, TrainConfig, gaussian_mle, log_density, fit_density
from ..dgp import (counterfactual_truth_exact, generate_linear_npiv, generate_proximal,
                   linear_npiv_params, proximal_params)
from ..errors import RdivError
from ..hypothesis import HypothesisSpec
from ..inverse_core import SpectralDecay, bias, bias_slope, make_problem, scale_free_source
from ..model_selection import CandidateSet, best_erm, convex_erm, select_density, selection_report, validation_loss
from .report import aggregate, failed_row, make_row

# stream tags keep data, fitting and evaluation randomness apart
DATA, FIT, EVAL, LARGE = 0, 1, 2, 3


def derive_seed(master, *keys):
    """Counter-style split of ``master`` into an independent 32-bit seed."""
    return int(np.random.SeedSequence([int(master) & 0xFFFFFFFF, *(int(k) for k in keys)])
               .generate_state(1)[0])


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class _Clock:
    def __init__(self, enabled):
        self.enabled = enabled
        self.start = time.perf_counter()

    def ms(self):
        return (time.perf_counter() - self.start) * 1000.0 if self.enabled else 0.0


def hypothesis_spec(cfg, x_dim, seed=0):
    h = cfg.estimator.hypothesis
    return HypothesisSpec(h.kind, h.width, x_dim, clip=h.clip, seed=seed,
                          hidden_layers=h.hidden_layers, activation=h.activation)


def rdiv_config(cfg, alpha, seed, **train_overrides):
    e, t = cfg.estimator, cfg.estimator.train
    train = TrainConfig(learning_rate=t.learning_rate, epochs=t.epochs, batch_size=t.batch_size,
                        seed=seed, weight_decay=t.weight_decay)
    if train_overrides:
        train = replace(train, **train_overrides)
    return est.RdivConfig(alpha=float(alpha), mc_batch=e.mc_batch, iterations=e.iterations, train=train,
                          seed=seed, unbiased_grad=e.unbiased_grad, center_outcome=e.center_outcome)


def density_candidates(cfg, data, seed):
    dens = cfg.density
    out = []
    for c in dens.candidates:
        template = ConditionalMixtureModel(c.components, len(data.free_columns), data.z_dim,
                                           c.parameterization, hidden=tuple(c.hidden))
        train = TrainConfig(objective=dens.objective, learning_rate=dens.learning_rate, epochs=c.epochs,
                            batch_size=dens.batch_size, seed=seed, weight_decay=dens.weight_decay)
        out.append((template, train))
    return out


def treatment_estimate(fit, data, seed):
    """``E_n[h(W, 1, S)]`` over the sample's own covariate rows."""
    sampler = est.forced_treatment_sampler(data.x, data.x_names.index("a"), 1.0)
    return est.counterfactual_mean(fit, sampler, data.n, seed)


# ---------------------------------------------------------------- bench

def _bench_item(args):
    cfg, link_index, link, rep = args
    d = cfg.dgp
    params = proximal_params(d.d_S, d.d_Q, d.d_W, link)
    truth = counterfactual_truth_exact(params)
    data_seed = derive_seed(cfg.seed, DATA, link_index, rep)
    fit_seed = derive_seed(cfg.seed, FIT, link_index, rep)
    m = cfg.estimator.iterations
    clock = _Clock(cfg.record_timing)
    data = generate_proximal(params, d.n, data_seed)
    try:
        g_hat, _, _ = select_density(data, density_candidates(cfg, data, fit_seed), cfg.density.holdout_fraction)
    except RdivError as exc:
        return [failed_row("bench", link, d.n, a, m, rep, truth, clock.ms(), data_seed, exc.category)
                for a in cfg.estimator.alphas]
    density_ms = clock.ms()
    spec = hypothesis_spec(cfg, data.x_dim, fit_seed)
    rows = []
    for alpha in cfg.estimator.alphas:
        clock = _Clock(cfg.record_timing)
        try:
            fit = est.fit(data, g_hat, spec, rdiv_config(cfg, alpha, fit_seed))
            value = treatment_estimate(fit, data, fit_seed)
            rows.append(make_row("bench", link, d.n, alpha, m, rep, value, truth, density_ms + clock.ms(),
                                 data_seed, cfg.normalization))
        except RdivError as exc:
            rows.append(failed_row("bench", link, d.n, alpha, m, rep, truth, density_ms + clock.ms(),
                                   data_seed, exc.category))
    return rows


def run_bench(cfg):
    """Links x alphas x replications on the proximal benchmark, plus aggregates."""
    items = [(cfg, i, link, rep) for i, link in enumerate(cfg.dgp.links) for rep in range(cfg.replications)]
    rows = [row for chunk in _map(_bench_item, items, cfg.threads) for row in chunk]
    rows.sort(key=lambda r: (cfg.dgp.links.index(r.setting), cfg.estimator.alphas.index(r.alpha), r.replication))
    return rows + aggregate(rows)


# ---------------------------------------------------------------- bias study

def bias_problem(settings, beta, seed):
    decay = SpectralDecay(settings.decay, settings.rate, settings.dimension)
    return make_problem(decay, beta, scale_free_source(settings.dimension), seed, singular_basis=True)


def run_bias_study(cfg):
    """Fitted log-log slope of the squared bias for every (beta, m); truth is ``min(beta, 2m)``."""
    b = cfg.bias_study
    grid = np.logspace(np.log10(b.alpha_min), np.log10(b.alpha_max), b.alpha_points)
    rows = []
    for beta in b.betas:
        problem = bias_problem(b, beta, cfg.seed)
        for m in b.iterations:
            clock = _Clock(cfg.record_timing)
            slope = bias_slope(problem, m, grid, worst_case=b.worst_case)
            rows.append(make_row("bias-study", beta, b.dimension, 0.0, m, 0, slope, min(beta, 2 * m),
                                 clock.ms(), cfg.seed, cfg.normalization))
    return rows


# ---------------------------------------------------------------- rate study

def rate_params(settings):
    return linear_npiv_params(settings.dimension, settings.beta, settings.problem_seed, rate=settings.rate,
                              top=settings.top, noise_y=settings.noise_y, confounding=settings.confounding,
                              cond_scale=settings.cond_scale)


def sieve_error(params, data, g_hat, alpha, m):
    """``||h_hat - h0||^2`` of the exact linear-sieve fit with exact first-stage means."""
    spec = HypothesisSpec("poly-sieve", 1, params.x_dim)
    fit = est.solve_linear_sieve(data, g_hat, spec, est.RdivConfig(alpha=alpha, iterations=m), exact=True)
    theta = fit.hypothesis.params
    return params.l2_error(theta[0], theta[1:])


def _rate_item(args):
    cfg, n, rep = args
    r = cfg.rate_study
    params = rate_params(r)
    seed = derive_seed(cfg.seed, DATA, n, rep)
    clock = _Clock(cfg.record_timing)
    data = generate_linear_npiv(params, n, seed)
    g_hat = gaussian_mle(data)
    errors = [sieve_error(params, data, g_hat, a, cfg.estimator.iterations) for a in r.alphas]
    return n, rep, seed, errors, clock.ms()


@dataclass
class RateSummary:
    ns: list
    tuned_alpha: dict
    median_error: dict
    large_n_error: float
    large_n_bias: float
    slope: float


def run_rate_study(cfg, summary=None):
    """Error of the tuned estimator across n, the large-n proxy, and the log-log slope.

    alpha is tuned per n as the grid minimiser of the median population error
    across replications (the error is exact, so no held-out sample is needed).
    """
    r = cfg.rate_study
    m = cfg.estimator.iterations
    params = rate_params(r)
    items = [(cfg, n, rep) for n in r.ns for rep in range(cfg.replications)]
    results = _map(_rate_item, items, cfg.threads)
    rows, tuned, medians = [], {}, {}
    for n in r.ns:
        cell = [res for res in results if res[0] == n]
        table = np.array([res[3] for res in cell])
        j = int(np.argmin(np.median(table, axis=0)))
        tuned[n] = r.alphas[j]
        medians[n] = float(np.median(table[:, j]))
        target = bias(params.problem, r.alphas[j], m)
        for _, rep, seed, errors, ms in cell:
            rows.append(make_row("rate-study", r.beta, n, r.alphas[j], m, rep, errors[j], target, ms, seed,
                                 cfg.normalization))
    # large-n proxy: oracle first stage at the alpha tuned for the largest swept n
    alpha = tuned[r.ns[-1]]
    seed = derive_seed(cfg.seed, LARGE)
    clock = _Clock(cfg.record_timing)
    big = generate_linear_npiv(params, r.large_n, seed)
    err = sieve_error(params, big, params.oracle_density(), alpha, m)
    target = bias(params.problem, alpha, m)
    rows.append(make_row("rate-study:large-n", r.beta, r.large_n, alpha, m, 0, err, target, clock.ms(), seed,
                         cfg.normalization))
    ns = np.array(r.ns, dtype=float)
    slope = float(np.polyfit(np.log(ns), np.log([medians[n] for n in r.ns]), 1)[0])
    b = min(r.beta, 2.0)
    rows.append(make_row("rate-study:slope", r.beta, r.ns[-1], alpha, m, 0, slope, -b / (2.0 + b), 0.0,
                         cfg.seed, cfg.normalization))
    if summary is not None:
        summary.append(RateSummary(list(r.ns), tuned, medians, err, target, slope))
    return rows + aggregate([row for row in rows if row.experiment == "rate-study"])


# ---------------------------------------------------------------- model selection

def _scaled(values, scale):
    return sorted({max(1, int(round(v * scale))) for v in values})


def _select_item(args):
    cfg, rep = args
    s = cfg.select
    d = cfg.dgp
    params = proximal_params(d.d_S, d.d_Q, d.d_W, s.link)
    truth = counterfactual_truth_exact(params)
    seed = derive_seed(cfg.seed, DATA, rep)
    fit_seed = derive_seed(cfg.seed, FIT, rep)
    train = generate_proximal(params, s.n_train, seed)
    val = generate_proximal(params, s.n_val, derive_seed(cfg.seed, EVAL, rep))
    clock = _Clock(cfg.record_timing)
    # stage 1: density grid scored by validation log-likelihood
    density_grid, nll = [], []
    for k in _scaled(s.density_components, s.scale):
        for batch in s.density_batch:
            for lr in s.learning_rates:
                for epochs in _scaled(s.epochs, s.scale):
                    template = ConditionalMixtureModel(k, len(train.free_columns), train.z_dim, "mlp", hidden=(16,))
                    tc = TrainConfig(learning_rate=lr, epochs=epochs, batch_size=batch, seed=fit_seed,
                                     weight_decay=cfg.density.weight_decay)
                    try:
                        g = fit_density(train, template, tc)
                        score = -float(np.mean(log_density(g, val.free_x, val.z)))
                    except RdivError:
                        g, score = None, np.inf
                    density_grid.append(({"components": k, "batch": batch, "learning_rate": lr,
                                          "epochs": epochs}, g))
                    nll.append(score if np.isfinite(score) else np.inf)
    chosen_density = int(np.argmin(nll))
    g_hat = density_grid[chosen_density][1]
    # stage 2: second-stage grid scored by the regularized validation loss
    spec = hypothesis_spec(cfg, train.x_dim, fit_seed)
    settings, fits = [], []
    for batch in s.stage2_batch:
        for lr in s.learning_rates:
            for epochs in _scaled(s.epochs, s.scale):
                rc = replace(rdiv_config(cfg, s.alpha, fit_seed, learning_rate=lr, epochs=epochs,
                                         batch_size=batch), mc_batch=s.mc_batch)
                settings.append({"batch": batch, "learning_rate": lr, "epochs": epochs})
                fits.append(est.fit(train, g_hat, spec, rc))
    cands = CandidateSet([f.hypothesis for f in fits], g_hat, s.alpha)
    eval_seed = derive_seed(cfg.seed, EVAL, rep, 1)
    names = [f"batch={c['batch']},lr={c['learning_rate']},epochs={c['epochs']}" for c in settings]
    report = selection_report(cands, val, s.mc_batch, eval_seed, names=names)
    chosen = report["best_erm"]["index"]
    ms = clock.ms()
    rows = []
    for j, f in enumerate(fits):
        value = treatment_estimate(f, train, fit_seed)
        label = "select:chosen" if j == chosen else "select:candidate"
        rows.append(make_row(label, s.link, s.n_train, s.alpha, cfg.estimator.iterations, rep, value, truth,
                             ms, seed, cfg.normalization))
    report.update({
        "replication": rep,
        "density_grid": [c for c, _ in density_grid],
        "density_nll": [float(v) for v in nll],
        "density_choice": chosen_density,
    })
    return rows, report


def run_select(cfg, reports=None):
    """Two-stage Best-ERM over the scaled hyperparameter grid; one chosen row per replication.

    Every candidate also gets a ``select:candidate`` row so the chosen test
    error can be compared with the grid.
    """
    results = _map(_select_item, [(cfg, rep) for rep in range(cfg.replications)], cfg.threads)
    rows = []
    for chunk, report in results:
        rows.extend(chunk)
        if reports is not None:
            reports.append(report)
    rows.sort(key=lambda r: (r.experiment != "select:chosen", r.replication))
    return rows + aggregate(rows)


# ---------------------------------------------------------------- staged selection oracle

def selection_oracle(seed, replications=50, n_train=250, n_val=250, mc_batch=64, val_alpha=0.01):
    """Best-ERM and Convex-ERM over {underfit, well-specified, overfit} candidates.

    On a 5-dimensional linear Gaussian design, the candidates are the linear
    sieve at alpha=100 (underfit), the linear sieve at alpha=0.01
    (well-specified) and a cubic sieve at alpha=1e-8 (overfit). Returns one
    dict per replication with the Best-ERM index and both frozen losses.
    """
    params = linear_npiv_params(5, 2.0, 0, noise_y=1.0)
    linear = HypothesisSpec("poly-sieve", 1, 5)
    cubic = HypothesisSpec("poly-sieve", 3, 5, clip=1e6)
    out = []
    for rep in range(replications):
        train = generate_linear_npiv(params, n_train, derive_seed(seed, DATA, rep))
        val = generate_linear_npiv(params, n_val, derive_seed(seed, EVAL, rep))
        g_hat = gaussian_mle(train)
        fit_seed = derive_seed(seed, FIT, rep)
        under = est.solve_linear_sieve(train, g_hat, linear, est.RdivConfig(alpha=100.0), exact=True)
        well = est.solve_linear_sieve(train, g_hat, linear, est.RdivConfig(alpha=0.01), exact=True)
        over = est.solve_linear_sieve(train, g_hat, cubic, est.RdivConfig(alpha=1e-8, mc_batch=mc_batch,
                                                                          seed=fit_seed))
        cands = CandidateSet([under.hypothesis, well.hypothesis, over.hypothesis], g_hat, val_alpha)
        best = best_erm(cands, val, mc_batch, fit_seed)
        convex = convex_erm(cands, val, mc_batch, fit_seed)
        out.append({
            "best_index": best.argmax,
            "best_loss": validation_loss(cands, best, val, mc_batch, fit_seed),
            "convex_loss": validation_loss(cands, convex, val, mc_batch, fit_seed),
            "loss_scale": float(np.mean(val.y ** 2)),
            "convex_theta": convex.theta.tolist(),
        })
    return out


RUNNERS = {
    "bench": run_bench,
    "bias-study": run_bias_study,
    "rate-study": run_rate_study,
    "select": run_select,
}
