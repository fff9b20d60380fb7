"""Grids, discrete fields and discrete norms on S = (0, 1).

All norms use the trapezoidal rule with boundary half-weights, so the
quadrature weights sum to one and constant fields have norm |c| in every
L^p.  Summation is always carried out in fixed index order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .errors import DomainError

MAX_ALL_PAIRS_NODES = 513


@dataclass(frozen=True)
class SpaceGrid:
    n_cells: int

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 4:
            raise DomainError(f"n_cells must be an integer >= 4, got {self.n_cells}")

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    @property
    def n_nodes(self) -> int:
        return self.n_cells + 1

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_nodes) / self.n_cells

    @property
    def weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights; they sum to one."""
        w = np.full(self.n_nodes, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    def field(self, values) -> "Field":
        if callable(values):
            values = values(self.nodes)
        return Field(np.broadcast_to(np.asarray(values, dtype=float), (self.n_nodes,)).copy(), self)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    m_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise DomainError("time horizon T must be positive")
        if int(self.m_steps) != self.m_steps or self.m_steps < 1:
            raise DomainError("m_steps must be a positive integer")

    @property
    def dt(self) -> float:
        return self.T / self.m_steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.m_steps + 1) * self.dt
        t[-1] = self.T
        return t

    def index(self, t: float, tol: float = 1e-9) -> int:
        k = int(round(t / self.dt))
        if k < 0 or k > self.m_steps or abs(k * self.dt - t) > tol * max(1.0, self.T):
            raise DomainError(f"time {t} is not a node of {self}")
        return k

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.T, self.m_steps * factor)


@dataclass(frozen=True, eq=False)
class Field:
    values: np.ndarray
    grid: SpaceGrid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_nodes,):
            raise DomainError(f"field has {v.shape} values, grid has {self.grid.n_nodes} nodes")
        if not np.all(np.isfinite(v)):
            raise DomainError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __add__(self, other):
        return Field(self.values + _values(other), self.grid)

    def __sub__(self, other):
        return Field(self.values - _values(other), self.grid)

    def __mul__(self, c):
        return Field(self.values * c, self.grid)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class Path:
    """A discrete process: one Field per TimeGrid node, stored as a 2-D array."""

    values: np.ndarray
    grid: SpaceGrid
    tgrid: TimeGrid
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.tgrid.m_steps + 1, self.grid.n_nodes):
            raise DomainError(
                f"path shape {v.shape} inconsistent with grids "
                f"({self.tgrid.m_steps + 1}, {self.grid.n_nodes})")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __getitem__(self, k) -> Field:
        return Field(self.values[k], self.grid)

    def __len__(self):
        return self.values.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.tgrid.times

    @classmethod
    def from_fields(cls, fields: Sequence[Field], tgrid: TimeGrid) -> "Path":
        grids = {f.grid for f in fields}
        if len(grids) != 1:
            raise DomainError("all fields of a path must share one SpaceGrid")
        return cls(np.stack([f.values for f in fields]), fields[0].grid, tgrid)


def _values(f) -> np.ndarray:
    return f.values if isinstance(f, (Field, Path)) else np.asarray(f, dtype=float)


def _weights_for(values: np.ndarray) -> np.ndarray:
    n_cells = values.shape[-1] - 1
    w = np.full(n_cells + 1, 1.0 / n_cells)
    w[0] = w[-1] = 0.5 / n_cells
    return w


def lp_norm(f, p: float = 2.0):
    """Trapezoidal L^p(0,1) norm; ``p=np.inf`` gives the max of |values|.

    Works on a Field or on any array whose last axis indexes grid nodes, in
    which case the norm is taken along that axis.
    """
    if not (p >= 1):
        raise DomainError(f"L^p norm needs p >= 1, got {p}")
    v = np.abs(_values(f))
    if math.isinf(p):
        return np.max(v, axis=-1)
    w = _weights_for(v)
    if p == 1:
        return v @ w
    # scale by the max so that powers of tiny or huge values stay representable
    top = np.max(v, axis=-1, keepdims=True)
    safe = np.where(top > 0, top, 1.0)
    r = v / safe
    inner = np.sqrt(r**2 @ w) if p == 2 else (r**p @ w) ** (1.0 / p)
    return inner * safe[..., 0]


def l2_inner(f, g):
    """Trapezoidal L^2(0,1) inner product along the last axis."""
    a, b = _values(f), _values(g)
    return (a * b) @ _weights_for(a)


def sobolev1_norm(f):
    """Discrete W^{1,2} norm with forward difference quotients on cells."""
    v = _values(f)
    n_cells = v.shape[-1] - 1
    if n_cells < 2:
        raise DomainError("sobolev1_norm needs at least two cells")
    h = 1.0 / n_cells
    dv = np.diff(v, axis=-1) / h
    return np.sqrt(lp_norm(v, 2) ** 2 + np.sum(dv**2, axis=-1) * h)


NormSelector = Union[str, Callable[[np.ndarray], np.ndarray]]


def resolve_norm(spatial_norm: NormSelector) -> Callable[[np.ndarray], np.ndarray]:
    """Map a norm selector ("sup", "l2", "lp:<p>", "h1" or callable) to a function."""
    if callable(spatial_norm):
        return spatial_norm
    key = spatial_norm.lower()
    if key in ("sup", "inf", "linf"):
        return lambda v: lp_norm(v, np.inf)
    if key in ("l2", "2"):
        return lambda v: lp_norm(v, 2)
    if key == "h1":
        return sobolev1_norm
    if key.startswith("lp:"):
        p = float(key[3:])
        return lambda v: lp_norm(v, p)
    raise DomainError(f"unknown spatial norm selector {spatial_norm!r}")


def _lag_pairs(n_nodes: int):
    if n_nodes <= MAX_ALL_PAIRS_NODES:
        return range(1, n_nodes)
    lags = []
    lag = 1
    while lag < n_nodes:
        lags.append(lag)
        lag *= 2
    return lags


def holder_seminorm_time(p, lam: float, spatial_norm: NormSelector = "sup", times=None) -> float:
    """max_{k<l} |p[l]-p[k]| / (t_l - t_k)^lam over node pairs.

    All pairs are used for up to 513 time nodes; above that only dyadic
    lags 2^j enter the maximum.
    """
    if not 0 < lam < 1:
        raise DomainError("Hoelder exponent must lie in (0, 1)")
    values = _values(p)
    if times is None:
        times = p.times
    if values.ndim != 2 or values.shape[0] == 0:
        raise DomainError("empty path")
    if values.shape[0] < 2:
        raise DomainError("Hoelder seminorm needs at least two time nodes")
    norm = resolve_norm(spatial_norm)
    times = np.asarray(times, dtype=float)
    best = 0.0
    for lag in _lag_pairs(values.shape[0]):
        inc = norm(values[lag:] - values[:-lag])
        span = times[lag:] - times[:-lag]
        best = max(best, float(np.max(inc / span**lam)))
    return best


def holder_seminorm_space(f, beta: float) -> float:
    """max_{i<j} |f_j - f_i| / (s_j - s_i)^beta over node pairs of one field.

    Uses the same pair rule as :func:`holder_seminorm_time`; an array with
    leading axes gives the maximum over all of them.
    """
    if not 0 < beta < 1:
        raise DomainError("Hoelder exponent must lie in (0, 1)")
    v = _values(f)
    n_nodes = v.shape[-1]
    h = 1.0 / (n_nodes - 1)
    best = 0.0
    for lag in _lag_pairs(n_nodes):
        inc = np.abs(v[..., lag:] - v[..., :-lag])
        best = max(best, float(np.max(inc)) / (lag * h) ** beta)
    return best


def write_csv(path, times, values) -> None:
    """One row per time node: t, then node values; header t,x0000,x0001,..."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    times = np.atleast_1d(np.asarray(times, dtype=float))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{i:04d}" for i in range(values.shape[1])])
        for t, row in zip(times, values):
            writer.writerow([repr(float(t))] + [repr(float(x)) for x in row])


def read_csv(path):
    """Inverse of :func:`write_csv`; returns (times, values)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "t":
        raise DomainError(f"{path}: first column must be 't'")
    data = np.array([[float(x) for x in r] for r in body])
    return data[:, 0], data[:, 1:]


def path_to_csv(p: Path, filename) -> None:
    write_csv(filename, p.times, p.values)
