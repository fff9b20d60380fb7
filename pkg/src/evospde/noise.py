"""Q-Wiener noise in spectral form W(t,s) = sum_n sqrt(lam_n) W_n(t) e_n(s).

The default basis is e_n(s) = sqrt(2) cos(n pi s) with weights lam_n = n^-gamma.
Its nodal values are orthonormal for the trapezoidal inner product as long as
n < n_cells, so a model is always truncated below the grid's Nyquist mode.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import DomainError
from .mesh import SpaceGrid, TimeGrid, l2_inner, lp_norm

DEFAULT_TRUNCATION = 64
TAIL_FRACTION = 0.01
ORTHONORMAL_TOL = 1e-10


def _cos_abs_moment(q: float) -> float:
    """int_0^1 |cos(n pi s)|^q ds, the same for every integer n >= 1."""
    return math.exp(gammaln((q + 1) / 2) - gammaln(q / 2 + 1)) / math.sqrt(math.pi)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Spectral covariance: variance weights lam_n with basis functions e_n.

    ``basis`` maps node coordinates to an (N, n_nodes) array.  ``family``
    names the basis; for the cosine family the sup and L^q norms of e_n are
    known in closed form and the covariance checks use them directly.
    """

    lambdas: np.ndarray
    basis: Callable[[np.ndarray], np.ndarray]
    family: str = "cosine"
    gamma: Optional[float] = None
    regime: str = "Linf"
    q: Optional[float] = None
    beta: Optional[float] = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        if lam.ndim != 1:
            raise DomainError("lambdas must be one-dimensional")
        if np.any(lam < 0) or np.any(np.diff(lam) > 0):
            raise DomainError("noise weights must be nonnegative and nonincreasing")
        lam.setflags(write=False)
        object.__setattr__(self, "lambdas", lam)

    @property
    def N(self) -> int:
        return len(self.lambdas)

    def modes(self, grid: SpaceGrid) -> np.ndarray:
        """Nodal values of e_n, shape (N, n_nodes); checked orthonormal."""
        key = grid.n_cells
        e = self._cache.get(key)
        if e is None:
            e = np.atleast_2d(np.asarray(self.basis(grid.nodes), dtype=float))
            if self.N == 0:
                e = np.zeros((0, grid.n_nodes))
            gram = (e * grid.weights) @ e.T
            err = float(np.max(np.abs(gram - np.eye(self.N)))) if self.N else 0.0
            if err > ORTHONORMAL_TOL:
                raise DomainError(
                    f"noise modes are not orthonormal on a {grid.n_cells}-cell grid "
                    f"(Gram error {err:.2e}); use N < n_cells for the cosine family")
            e.setflags(write=False)
            e = self._cache.setdefault(key, e)
        return e

    def columns(self, grid: SpaceGrid) -> np.ndarray:
        """sqrt(lam_n) e_n as an (N, n_nodes) array: the columns of sqrt(Q)."""
        return np.sqrt(self.lambdas)[:, None] * self.modes(grid)

    def tail(self) -> float:
        """Covariance-trace truncation error sum_{n>N} lam_n (cosine family)."""
        if self.family != "cosine" or self.gamma is None:
            return 0.0
        if self.gamma <= 1:
            return math.inf
        from scipy.special import zeta
        return float(zeta(self.gamma, self.N + 1))

    def sup_norms(self, grid: Optional[SpaceGrid] = None) -> np.ndarray:
        if self.family == "cosine":
            return np.full(self.N, math.sqrt(2.0))
        return lp_norm(self.modes(grid), np.inf)

    def lq_norms(self, q: float, grid: Optional[SpaceGrid] = None) -> np.ndarray:
        if self.family == "cosine":
            return np.full(self.N, math.sqrt(2.0) * _cos_abs_moment(q) ** (1 / q))
        return lp_norm(self.modes(grid), q)

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "N": self.N, "regime": self.regime,
                "family": self.family, "q": self.q, "beta": self.beta,
                "lambda": [float(x) for x in self.lambdas]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def cosine_basis(n_modes: int):
    ks = np.arange(1, n_modes + 1)

    def basis(s):
        return math.sqrt(2.0) * np.cos(np.pi * ks[:, None] * np.asarray(s)[None, :])

    return basis


def make_model(gamma: float, N: int = DEFAULT_TRUNCATION, family: str = "cosine",
               regime: Optional[str] = None, q: Optional[float] = None,
               beta: Optional[float] = None) -> NoiseModel:
    """Cosine-family model lam_n = n^-gamma, e_n = sqrt(2) cos(n pi s), n = 1..N.

    The declared regime is "Linf" when the L^infty covariance sum converges
    numerically (see :func:`check_cond_linfty`), otherwise "Lq".
    """
    if family != "cosine":
        raise DomainError(f"unknown noise family {family!r}")
    if not gamma > 0:
        raise DomainError("decay exponent gamma must be positive")
    if int(N) != N or N < 1:
        raise DomainError("truncation N must be a positive integer")
    lam = np.arange(1, N + 1, dtype=float) ** (-gamma)
    model = NoiseModel(lam, cosine_basis(N), "cosine", float(gamma), "Linf", q, beta)
    if regime is None:
        regime = "Linf" if check_cond_linfty(model)["pass"] else "Lq"
    if regime not in ("Linf", "Lq"):
        raise DomainError(f"unknown covariance regime {regime!r}")
    if regime == "Lq":
        if q is None or beta is None:
            q, beta = 2.0, None
        else:
            validate_lq(q, beta)
    return NoiseModel(lam, cosine_basis(N), "cosine", float(gamma), regime, q, beta)


def single_mode(lam: float = 1.0, func: Optional[Callable] = None) -> NoiseModel:
    """One noise mode; by default the constant e(s) = 1 (unit L^2 norm)."""
    if func is None:
        def func(s):
            return np.ones((1, len(s)))
    return NoiseModel(np.array([lam], dtype=float), func, family="custom", regime="Linf")


def no_noise() -> NoiseModel:
    return NoiseModel(np.zeros(0), lambda s: np.zeros((0, len(s))), family="none", regime="Linf")


def _tail_pass(terms: np.ndarray) -> tuple:
    total = float(np.sum(terms))
    if total == 0:
        return total, 0.0, True
    n = len(terms)
    tail = float(np.sum(terms[n - n // 4:])) if n >= 4 else 0.0
    return total, tail, tail < TAIL_FRACTION * total


def check_cond_linfty(m: NoiseModel, grid: Optional[SpaceGrid] = None) -> dict:
    """Partial sum of lam_n ||e_n||_inf^2; passes when the last quartile carries < 1%."""
    total, tail, ok = _tail_pass(m.lambdas * m.sup_norms(grid) ** 2)
    return {"sum": total, "tail": tail, "pass": ok}


def validate_lq(q: float, beta: float) -> None:
    if not 0 < beta < 0.5:
        raise DomainError(f"condCovb: beta must lie in (0, 1/2), got {beta}")
    lower = 1.0 / (1.0 - 2.0 * beta)
    if not q > lower:
        raise DomainError(f"condCovb: q={q} must exceed 1/(1-2 beta) = {lower:.6g}")


def check_cond_lq(m: NoiseModel, q: float, beta: float, grid: Optional[SpaceGrid] = None) -> dict:
    """Partial sum of lam_n ||e_n||_q^2 after validating the (q, beta) constraint."""
    validate_lq(q, beta)
    total, tail, ok = _tail_pass(m.lambdas * m.lq_norms(q, grid) ** 2)
    return {"sum": total, "tail": tail, "pass": ok}


@dataclass(frozen=True, eq=False)
class WienerPath:
    """Increments dW[n, k] ~ N(0, dt) of the scalar Brownian motions W_n."""

    increments: np.ndarray
    dt: float
    seed: int
    member: int = 0
    generator: str = "philox"

    @property
    def N(self) -> int:
        return self.increments.shape[0]

    @property
    def m_steps(self) -> int:
        return self.increments.shape[1]

    def values(self) -> np.ndarray:
        """W_n(t_k) with W_n(0) = 0, shape (N, m+1)."""
        out = np.zeros((self.N, self.m_steps + 1))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out

    def coarsen(self, factor: int) -> "WienerPath":
        if self.m_steps % factor:
            raise DomainError("coarsening factor must divide the number of steps")
        inc = self.increments.reshape(self.N, -1, factor).sum(axis=2)
        return WienerPath(inc, self.dt * factor, self.seed, self.member, self.generator)

    def to_csv(self, filename) -> None:
        """Mode-major audit dump: one row per mode, increments in step order."""
        with open(filename, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["mode"] + [f"dW{k:05d}" for k in range(self.m_steps)])
            for n, row in enumerate(self.increments):
                writer.writerow([n + 1] + [repr(float(x)) for x in row])


def _generator(seed: int, member: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(member),))
    return np.random.Generator(np.random.Philox(ss))


def sample(m: NoiseModel, tg: TimeGrid, seed: int, member: int = 0) -> WienerPath:
    """Gaussian increments keyed by (seed, member), mode-major.

    Each member owns a Philox stream, so an ensemble is reproducible
    regardless of which worker draws which member.  Row n holds the
    increments of W_n in step order.
    """
    rng = _generator(seed, member)
    inc = rng.standard_normal((m.N, tg.m_steps)) * math.sqrt(tg.dt)
    return WienerPath(inc, tg.dt, int(seed), int(member))


def sample_ensemble(m: NoiseModel, tg: TimeGrid, seed: int, members: Sequence[int]) -> np.ndarray:
    """Stacked increments for the given member indices, shape (M, N, m_steps)."""
    out = np.empty((len(members), m.N, tg.m_steps))
    for i, member in enumerate(members):
        out[i] = sample(m, tg, seed, member).increments
    return out


def noise_fields(m: NoiseModel, grid: SpaceGrid, dW: np.ndarray) -> np.ndarray:
    """Spatial increments sum_n sqrt(lam_n) e_n dW_n, shape (..., m_steps, n_nodes)."""
    return np.swapaxes(dW, -1, -2) @ m.columns(grid)


@dataclass
class HSNorm:
    value: float
    dominating: np.ndarray
    lp: dict


def hs_norm(columns, p_values: Sequence[float] = (2.0,)) -> HSNorm:
    """Hilbert-Schmidt norm of an operator given by its columns g_n = Phi(e_n).

    ``columns`` has shape (N, n_nodes).  Also returns the pointwise
    dominating function g(s) = (sum_n g_n(s)^2)^{1/2}, which satisfies
    |Phi h| <= |h| g, and its L^p norms.
    """
    g = np.atleast_2d(np.asarray(columns, dtype=float))
    col_norms = lp_norm(g, 2) if g.size else np.zeros(0)
    value = float(np.sqrt(np.sum(col_norms**2)))
    dom = np.sqrt(np.sum(g**2, axis=0))
    return HSNorm(value, dom, {float(p): float(lp_norm(dom, p)) for p in p_values})
