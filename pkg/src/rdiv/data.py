"""The (X, Y, Z) sample container and its CSV / binary serialisations.

Column names decide block membership (layout version 1):

* ``w_*`` and ``x_*`` columns belong to X only,
* ``q_*`` and ``z_*`` columns belong to Z only,
* ``a`` and ``s_*`` columns belong to both X and Z (shared),
* ``y`` is the outcome.

Shared columns are copied, not modelled, by the first-stage density.
"""
import csv
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, InvalidArgumentError

LAYOUT_VERSION = 1
_X_ONLY = ("w_", "x_")
_Z_ONLY = ("q_", "z_")


def _is_shared(name):
    return name == "a" or name.startswith("s_")


def _block(name):
    if _is_shared(name):
        return "shared"
    if name.startswith(_X_ONLY):
        return "x"
    if name.startswith(_Z_ONLY):
        return "z"
    if name == "y":
        return "y"
    raise InvalidArgumentError(f"column {name!r} does not follow the dataset layout")


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    x_names: tuple
    z_names: tuple

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        z = np.atleast_2d(np.asarray(self.z, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if not (x.shape[0] == z.shape[0] == y.shape[0]):
            raise DimensionMismatchError("x, z and y must have the same number of rows")
        if len(self.x_names) != x.shape[1] or len(self.z_names) != z.shape[1]:
            raise DimensionMismatchError("column names do not match array widths")
        for name in self.x_names:
            if _block(name) not in ("x", "shared"):
                raise InvalidArgumentError(f"column {name!r} cannot be part of X")
        for name in self.z_names:
            if _block(name) not in ("z", "shared"):
                raise InvalidArgumentError(f"column {name!r} cannot be part of Z")
        for xi, zi in self.shared:
            if not np.array_equal(x[:, xi], z[:, zi]):
                raise InvalidArgumentError(f"shared column {self.x_names[xi]!r} differs between X and Z")
        for name, value in (("x", x), ("z", z), ("y", y)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "x_names", tuple(self.x_names))
        object.__setattr__(self, "z_names", tuple(self.z_names))

    @classmethod
    def plain(cls, x, z, y):
        """Dataset with generic ``x_i``/``z_i`` names and no shared columns."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if x.shape[0] == 1 and np.asarray(y).size > 1:
            x, z = x.T, z.T
        return cls(x, z, y, tuple(f"x_{i}" for i in range(x.shape[1])),
                   tuple(f"z_{i}" for i in range(z.shape[1])))

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def x_dim(self):
        return self.x.shape[1]

    @property
    def z_dim(self):
        return self.z.shape[1]

    @property
    def shared(self):
        """``(x_column, z_column)`` index pairs of shared columns."""
        z_index = {name: j for j, name in enumerate(self.z_names)}
        return tuple((i, z_index[name]) for i, name in enumerate(self.x_names)
                     if _is_shared(name) and name in z_index)

    @property
    def free_columns(self):
        """Indices of X columns that the first stage must model."""
        shared = {i for i, _ in self.shared}
        return tuple(i for i in range(self.x_dim) if i not in shared)

    @property
    def free_x(self):
        return self.x[:, list(self.free_columns)]

    def assemble_x(self, free, z):
        """Full X rows from modelled columns ``free`` (..., n_free) and Z rows (..., z_dim)."""
        free = np.asarray(free, dtype=float)
        z = np.asarray(z, dtype=float)
        out = np.empty(free.shape[:-1] + (self.x_dim,))
        out[..., list(self.free_columns)] = free
        for xi, zi in self.shared:
            out[..., xi] = np.broadcast_to(z[..., zi], free.shape[:-1])
        return out

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.z[idx], self.y[idx], self.x_names, self.z_names)

    def split(self, n_first):
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, self.n))

    def columns(self):
        """Ordered unique columns as ``(names, matrix)``."""
        names, cols = [], []
        for i, name in enumerate(self.x_names):
            names.append(name)
            cols.append(self.x[:, i])
        for j, name in enumerate(self.z_names):
            if name not in names:
                names.append(name)
                cols.append(self.z[:, j])
        names.append("y")
        cols.append(self.y)
        return names, np.column_stack(cols)

    @classmethod
    def from_columns(cls, names, matrix):
        names = list(names)
        if names.count("y") != 1 or len(set(names)) != len(names):
            raise InvalidArgumentError("columns must be unique and contain exactly one 'y'")
        blocks = [_block(nm) for nm in names]
        x_idx = [i for i, b in enumerate(blocks) if b in ("x", "shared")]
        z_idx = [i for i, b in enumerate(blocks) if b in ("z", "shared")]
        # X keeps its own-block columns before shared ones, Z likewise
        x_idx = [i for i in x_idx if blocks[i] == "x"] + [i for i in x_idx if blocks[i] == "shared"]
        z_idx = [i for i in z_idx if blocks[i] == "z"] + [i for i in z_idx if blocks[i] == "shared"]
        matrix = np.asarray(matrix, dtype=float).reshape(-1, len(names))
        return cls(matrix[:, x_idx], matrix[:, z_idx], matrix[:, names.index("y")],
                   tuple(names[i] for i in x_idx), tuple(names[i] for i in z_idx))


def write_csv(data, path):
    names, matrix = data.columns()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        names = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return Dataset.from_columns(names, np.array(rows).reshape(len(rows), len(names)))


def write_npz(data, path):
    names, matrix = data.columns()
    np.savez(path, layout=np.array(LAYOUT_VERSION), names=np.array(names), matrix=matrix)


def read_npz(path):
    with np.load(path, allow_pickle=False) as doc:
        if int(doc["layout"]) != LAYOUT_VERSION:
            raise InvalidArgumentError(f"unsupported dataset layout {int(doc['layout'])}")
        return Dataset.from_columns([str(s) for s in doc["names"]], doc["matrix"])
