"""Result rows, CSV output with aggregate rows, and the JSON run manifest."""
import csv
import json
import math
import subprocess
from dataclasses import asdict, dataclass, fields

import numpy as np

AGGREGATE_MEAN = "mean"
AGGREGATE_SPREAD = "2sd"


@dataclass
class ResultRow:
    """One replication, or an aggregate when ``replication`` is ``mean``/``2sd``.

    ``setting`` is the link name (bench, select) or the source exponent beta
    (bias and rate studies). ``status`` is ``ok`` or the error category of a
    failed replication, whose numeric fields are then NaN.
    """

    experiment: str
    setting: str
    n: int
    alpha: float
    m: int
    replication: object
    estimate: float
    truth: float
    squared_error: float
    normalized_mse: float
    wall_time_ms: float
    seed: int
    status: str = "ok"


FIELDS = tuple(f.name for f in fields(ResultRow))


def normalized_error(estimate, truth, normalization="squared"):
    """``(squared_error, normalized)`` with ``normalized = sq / truth^2`` or ``sq / |truth|``."""
    sq = (estimate - truth) ** 2
    scale = truth ** 2 if normalization == "squared" else abs(truth)
    return sq, sq / scale if scale > 0 else math.inf


def make_row(experiment, setting, n, alpha, m, replication, estimate, truth, wall_ms, seed,
             normalization="squared"):
    sq, norm = normalized_error(estimate, truth, normalization)
    return ResultRow(experiment, str(setting), int(n), float(alpha), int(m), replication,
                     float(estimate), float(truth), float(sq), float(norm), float(wall_ms), int(seed))


def failed_row(experiment, setting, n, alpha, m, replication, truth, wall_ms, seed, category):
    nan = float("nan")
    return ResultRow(experiment, str(setting), int(n), float(alpha), int(m), replication,
                     nan, float(truth), nan, nan, float(wall_ms), int(seed), category)


_NUMERIC = ("estimate", "truth", "squared_error", "normalized_mse", "wall_time_ms")


def aggregate(rows):
    """Mean and 2*SD rows per (experiment, setting, n, alpha, m) over ``ok`` replications.

    Groups keep first-appearance order. The ``seed`` of an aggregate row is
    the number of replications it summarises.
    """
    groups = {}
    for row in rows:
        if row.replication in (AGGREGATE_MEAN, AGGREGATE_SPREAD):
            continue
        key = (row.experiment, row.setting, row.n, row.alpha, row.m)
        groups.setdefault(key, []).append(row)
    out = []
    for key, members in groups.items():
        ok = [r for r in members if r.status == "ok"]
        status = "ok" if len(ok) == len(members) else f"failed:{len(members) - len(ok)}"
        values = {name: np.array([getattr(r, name) for r in ok], dtype=float) for name in _NUMERIC}
        mean = {k: float(v.mean()) if v.size else float("nan") for k, v in values.items()}
        spread = {k: float(2.0 * v.std(ddof=1)) if v.size > 1 else 0.0 for k, v in values.items()}
        for label, stats in ((AGGREGATE_MEAN, mean), (AGGREGATE_SPREAD, spread)):
            out.append(ResultRow(*key, label, stats["estimate"], stats["truth"], stats["squared_error"],
                                 stats["normalized_mse"], stats["wall_time_ms"], len(ok), status))
    return out


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FIELDS)
        for row in rows:
            writer.writerow([_fmt(getattr(row, name)) for name in FIELDS])


def _parse(name, text):
    if name in ("n", "m", "seed"):
        return int(text)
    if name == "replication":
        return int(text) if text.lstrip("-").isdigit() else text
    if name in ("experiment", "setting", "status"):
        return text
    return float(text)


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != FIELDS:
            raise ValueError(f"unexpected header {header}")
        return [ResultRow(*(_parse(nm, v) for nm, v in zip(FIELDS, line))) for line in reader]


def git_describe(cwd=None):
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=cwd,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def write_manifest(path, config, wall_time_s, rows, extra=None):
    doc = {
        "config": config,
        "git_describe": git_describe(),
        "wall_time_s": wall_time_s,
        "rows": len(rows),
        "failed_rows": sum(1 for r in rows if r.status != "ok"),
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def row_dict(row):
    return asdict(row)
