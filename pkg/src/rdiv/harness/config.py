"""Experiment configuration: a strict YAML schema with defaults.

Every section is a dataclass; unknown keys, wrong shapes and broken
invariants are rejected with the offending dotted key in the message.
The schema is documented field by field in ``configs/README.md``.
"""
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..dgp import LINKS
from ..errors import ConfigInvariantError, ConfigKeyError, ConfigMissingError, ConfigSyntaxError

EXPERIMENTS = ("bench", "bias-study", "rate-study", "select")


@dataclass
class DensityCandidate:
    components: int = 1
    parameterization: str = "linear"
    hidden: list = field(default_factory=list)
    epochs: int = 300


def _default_density_candidates():
    return [
        DensityCandidate(1, "linear", [], 300),
        DensityCandidate(3, "linear", [], 100),
        DensityCandidate(5, "mlp", [16], 30),
        DensityCandidate(5, "mlp", [16], 60),
    ]


@dataclass
class DensitySettings:
    candidates: list = field(default_factory=_default_density_candidates)
    objective: str = "mle"
    learning_rate: float = 1e-3
    batch_size: int = 50
    weight_decay: float = 1e-4
    holdout_fraction: float = 0.2


@dataclass
class HypothesisSettings:
    kind: str = "mlp"
    width: int = 32
    hidden_layers: int = 2
    activation: str = "tanh"
    clip: float = 500.0


@dataclass
class TrainSettings:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 50
    weight_decay: float = 1e-3


@dataclass
class EstimatorSettings:
    alphas: list = field(default_factory=lambda: [0.1, 0.0])
    iterations: int = 1
    mc_batch: int = 16
    unbiased_grad: bool = True
    center_outcome: bool = False
    hypothesis: HypothesisSettings = field(default_factory=HypothesisSettings)
    train: TrainSettings = field(default_factory=TrainSettings)


@dataclass
class DgpSettings:
    d_S: int = 15
    d_Q: int = 15
    d_W: int = 1
    n: int = 500
    links: list = field(default_factory=lambda: ["Id", "LogSigmoid", "Piecewise", "Sigmoid", "CubicRoot"])


@dataclass
class BiasSettings:
    dimension: int = 200
    decay: str = "polynomial"
    rate: float = 1.0
    betas: list = field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0])
    iterations: list = field(default_factory=lambda: [1, 2, 3])
    alpha_min: float = 1e-4
    alpha_max: float = 1e-1
    alpha_points: int = 8
    worst_case: bool = True


@dataclass
class RateSettings:
    dimension: int = 20
    beta: float = 2.0
    rate: float = 1.0
    top: float = 0.9
    ns: list = field(default_factory=lambda: [250, 1000, 4000, 16000])
    alphas: list = field(default_factory=lambda: [float(a) for a in 10.0 ** np.linspace(-4, 0, 17)])
    noise_y: float = 1.0
    confounding: float = 0.5
    cond_scale: float = 0.5
    large_n: int = 100000
    problem_seed: int = 0


@dataclass
class SelectSettings:
    n_train: int = 500
    n_val: int = 250
    link: str = "Id"
    density_components: list = field(default_factory=lambda: [40, 50, 60])
    density_batch: list = field(default_factory=lambda: [30, 50])
    stage2_batch: list = field(default_factory=lambda: [50, 60, 100])
    learning_rates: list = field(default_factory=lambda: [1e-4, 1e-3])
    epochs: list = field(default_factory=lambda: [300, 400])
    scale: float = 0.1
    alpha: float = 0.1
    mc_batch: int = 16


@dataclass
class ExperimentConfig:
    experiment: str = "bench"
    seed: int = 0
    replications: int = 20
    output_path: str = "results.csv"
    threads: int = 1
    normalization: str = "squared"
    record_timing: bool = True
    dgp: DgpSettings = field(default_factory=DgpSettings)
    density: DensitySettings = field(default_factory=DensitySettings)
    estimator: EstimatorSettings = field(default_factory=EstimatorSettings)
    bias_study: BiasSettings = field(default_factory=BiasSettings)
    rate_study: RateSettings = field(default_factory=RateSettings)
    select: SelectSettings = field(default_factory=SelectSettings)


# fields holding lists of nested sections
_LIST_SECTIONS = {(DensitySettings, "candidates"): DensityCandidate}


def _nested_type(cls, f):
    if f.default_factory is not dataclasses.MISSING:
        sample = f.default_factory()
        if dataclasses.is_dataclass(sample):
            return type(sample)
    return None


def _build(cls, doc, path):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigInvariantError(path or "<root>", "expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in fields:
            raise ConfigKeyError(f"{path}.{key}" if path else str(key))
    kwargs = {}
    for name, value in doc.items():
        where = f"{path}.{name}" if path else name
        nested = _nested_type(cls, fields[name])
        item_cls = _LIST_SECTIONS.get((cls, name))
        if nested is not None:
            kwargs[name] = _build(nested, value, where)
        elif item_cls is not None:
            if not isinstance(value, list):
                raise ConfigInvariantError(where, "expected a list")
            kwargs[name] = [_build(item_cls, v, f"{where}[{i}]") for i, v in enumerate(value)]
        else:
            kwargs[name] = _coerce(fields[name], value, where)
    return cls(**kwargs)


def _coerce(f, value, where):
    default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigInvariantError(where, "expected true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvariantError(where, "expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvariantError(where, "expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigInvariantError(where, "expected a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigInvariantError(where, "expected a list")
        return list(value)
    return value


def _positive(value, where):
    if not value >= 1:
        raise ConfigInvariantError(where, "must be >= 1")


def validate(cfg):
    """Check cross-field invariants; returns ``cfg``."""
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigInvariantError("experiment", f"must be one of {EXPERIMENTS}")
    if cfg.normalization not in ("squared", "linear"):
        raise ConfigInvariantError("normalization", "must be 'squared' or 'linear'")
    _positive(cfg.replications, "replications")
    _positive(cfg.threads, "threads")
    est = cfg.estimator
    if not est.alphas:
        raise ConfigInvariantError("estimator.alphas", "must be nonempty")
    if any(not isinstance(a, (int, float)) or a < 0 for a in est.alphas):
        raise ConfigInvariantError("estimator.alphas", "entries must be nonnegative numbers")
    for name in ("iterations", "mc_batch"):
        _positive(getattr(est, name), f"estimator.{name}")
    for name in ("epochs", "batch_size"):
        _positive(getattr(est.train, name), f"estimator.train.{name}")
    if est.hypothesis.kind not in ("poly-sieve", "fourier-sieve", "mlp"):
        raise ConfigInvariantError("estimator.hypothesis.kind", "unknown hypothesis kind")
    if est.hypothesis.activation not in ("tanh", "relu"):
        raise ConfigInvariantError("estimator.hypothesis.activation", "must be 'tanh' or 'relu'")
    dgp = cfg.dgp
    if not dgp.links or any(link not in LINKS for link in dgp.links):
        raise ConfigInvariantError("dgp.links", f"entries must be drawn from {LINKS}")
    if dgp.d_S != dgp.d_Q or not 1 <= dgp.d_W <= dgp.d_S:
        raise ConfigInvariantError("dgp", "need d_S == d_Q and 1 <= d_W <= d_S")
    _positive(dgp.n, "dgp.n")
    dens = cfg.density
    if not dens.candidates:
        raise ConfigInvariantError("density.candidates", "must be nonempty")
    if dens.objective not in ("mle", "chi2-mle"):
        raise ConfigInvariantError("density.objective", "must be 'mle' or 'chi2-mle'")
    if not 0 < dens.holdout_fraction < 1:
        raise ConfigInvariantError("density.holdout_fraction", "must lie in (0, 1)")
    for i, c in enumerate(dens.candidates):
        if c.parameterization not in ("linear", "mlp"):
            raise ConfigInvariantError(f"density.candidates[{i}].parameterization", "must be 'linear' or 'mlp'")
        _positive(c.components, f"density.candidates[{i}].components")
        _positive(c.epochs, f"density.candidates[{i}].epochs")
    bias = cfg.bias_study
    if not bias.betas or not bias.iterations:
        raise ConfigInvariantError("bias_study", "betas and iterations must be nonempty")
    if not 0 < bias.alpha_min < bias.alpha_max < 1:
        raise ConfigInvariantError("bias_study", "need 0 < alpha_min < alpha_max < 1")
    rate = cfg.rate_study
    if len(rate.ns) < 2 or any(n < 2 for n in rate.ns) or not rate.alphas:
        raise ConfigInvariantError("rate_study", "need at least two sample sizes and a nonempty alpha grid")
    sel = cfg.select
    if not 0 < sel.scale <= 1:
        raise ConfigInvariantError("select.scale", "must lie in (0, 1]")
    return cfg


def from_dict(doc):
    return validate(_build(ExperimentConfig, doc, ""))


def parse_config(path):
    """Read and validate a YAML experiment config."""
    path = Path(path)
    if not path.is_file():
        raise ConfigMissingError(f"config file not found: {path}")
    text = path.read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigSyntaxError(str(getattr(exc, "problem", exc)), line) from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigSyntaxError("top level must be a mapping", 1)
    return from_dict(doc)


def to_dict(cfg):
    return dataclasses.asdict(cfg)
