"""Discrete evolution family P(t, s) generated by an operator family.

P(t, s) is realised by implicit time stepping on a substep refinement of the
solution TimeGrid, with coefficients frozen per substep (right endpoint for
backward Euler, midpoint for Crank-Nicolson).  Off-grid times are snapped,
never interpolated.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .elliptic import OperatorFamily, choose_shift, frac_power, interp_norm
from .errors import DomainError, OrderingError, SingularStepError
from .mesh import Field, SpaceGrid, TimeGrid, lp_norm

log = logging.getLogger(__name__)

SCHEMES = ("backward-euler", "crank-nicolson")


@dataclass(eq=False)
class EvolutionFamily:
    fam: OperatorFamily
    grid: SpaceGrid
    tgrid: TimeGrid
    scheme: str = "backward-euler"
    substeps: int = 4
    w: Optional[float] = None
    _lu: dict = field(default_factory=dict, repr=False)
    _coarse: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise DomainError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise DomainError("substep factor must be a positive integer")
        self.subgrid = self.tgrid.refine(self.substeps)
        if self.w is None:
            self.w = choose_shift(self.fam, self.grid, list(self.tgrid.times))
        self.check_stability()

    @property
    def h(self) -> float:
        return self.subgrid.dt

    def operator(self, t: float):
        return self.fam.operator(self.grid, t)

    def operator_at(self, k: int):
        """A(t_k) at a node of the solution grid."""
        return self.operator(self.tgrid.times[k])

    def check_stability(self) -> float:
        """Largest amplification modulus over coarse nodes; must be <= 1 + 10 dt."""
        worst = 0.0
        times = [0.0] if self.fam.autonomous else self.tgrid.times
        h = self.h
        for t in times:
            lam = self.operator(t).spectrum().eigenvalues
            if self.scheme == "backward-euler":
                amp = np.abs(1.0 / (1.0 - h * lam))
            else:
                amp = np.abs((1.0 + 0.5 * h * lam) / (1.0 - 0.5 * h * lam))
            worst = max(worst, float(np.max(amp)))
        if worst > 1 + 10 * self.tgrid.dt:
            raise SingularStepError(
                f"{self.scheme} amplification {worst:.6g} exceeds 1 + 10 dt = {1 + 10 * self.tgrid.dt:.6g}")
        return worst

    # -- substep machinery -------------------------------------------------

    def sub_index(self, t: float, snap: bool = False) -> int:
        j = t / self.h
        k = int(round(j))
        dist = abs(k * self.h - t)
        if dist > 1e-9 * max(1.0, self.tgrid.T):
            if not snap:
                raise DomainError(f"time {t} is not on the evolution subgrid (spacing {self.h})")
            log.info("snapped t=%r to subgrid node %r (distance %.3g)", t, k * self.h, dist)
        return min(max(k, 0), self.subgrid.m_steps)

    def _step(self, j: int):
        """Factorisation data for the substep j -> j+1."""
        key = 0 if self.fam.autonomous else j
        data = self._lu.get(key)
        if data is not None:
            return data
        h = self.h
        n = self.grid.n_nodes
        eye = np.eye(n)
        if self.scheme == "backward-euler":
            a = self.operator((j + 1) * h).matrix
            lhs, rhs = eye - h * a, None
        else:
            a = self.operator((j + 0.5) * h).matrix
            lhs, rhs = eye - 0.5 * h * a, eye + 0.5 * h * a
        with np.errstate(all="raise"):
            try:
                lu = sla.lu_factor(lhs)
            except (sla.LinAlgError, FloatingPointError, ValueError) as exc:
                raise SingularStepError(f"implicit step {j} is singular") from exc
        if np.min(np.abs(np.diag(lu[0]))) < 1e-14:
            raise SingularStepError(f"implicit step {j} is singular")
        return self._lu.setdefault(key, (lu, rhs))

    def _march(self, j0: int, j1: int, v: np.ndarray) -> np.ndarray:
        # v has nodes on the first axis
        for j in range(j0, j1):
            lu, rhs = self._step(j)
            if rhs is not None:
                v = rhs @ v
            v = sla.lu_solve(lu, v, check_finite=False)
        return v

    def apply(self, t: float, s: float, x, snap: bool = False):
        """P(t, s) x; ``x`` is a Field or an array with nodes on the last axis."""
        if t < s:
            raise OrderingError(f"evolution needs s <= t, got s={s}, t={t}")
        js, jt = self.sub_index(s, snap), self.sub_index(t, snap)
        is_field = isinstance(x, Field)
        v = x.values if is_field else np.asarray(x, dtype=float)
        if js == jt:
            out = v.copy()
        else:
            out = self._march(js, jt, v.T).T
        return Field(out, self.grid) if is_field else out

    # -- solution-grid propagators ---------------------------------------

    def propagator(self, k: int) -> np.ndarray:
        """Dense matrix of P(t_{k+1}, t_k) on the solution grid."""
        key = 0 if self.fam.autonomous else k
        g = self._coarse.get(key)
        if g is None:
            j0 = k * self.substeps
            g = self._coarse.setdefault(key, self._march(j0, j0 + self.substeps, np.eye(self.grid.n_nodes)))
        return g

    def propagate(self, k0: int, k1: int, x: np.ndarray) -> np.ndarray:
        """P(t_{k1}, t_{k0}) applied to rows of ``x`` using the dense propagators."""
        x = np.asarray(x, dtype=float)
        for k in range(k0, k1):
            x = x @ self.propagator(k).T
        return x

    def power(self, k: int, theta: float) -> np.ndarray:
        """(w - A(t_k))^theta as a dense matrix."""
        return frac_power(self.operator_at(k), theta, self.w).matrix


def cocycle_defect(ef: EvolutionFamily, t: float, r: float, s: float, x, eps: float = 1e-300) -> float:
    """Relative gap between P(t,s)x and P(t,r)P(r,s)x on the subgrid."""
    if not s <= r <= t:
        raise OrderingError(f"cocycle needs s <= r <= t, got {s}, {r}, {t}")
    for val in (t, r, s):
        ef.sub_index(val)  # raises for off-grid times
    v = x.values if isinstance(x, Field) else np.asarray(x, dtype=float)
    direct = ef.apply(t, s, v)
    split = ef.apply(t, r, ef.apply(r, s, v))
    return float(lp_norm(direct - split, 2) / max(float(lp_norm(v, 2)), eps))


@dataclass
class ConstantEstimate:
    """Sampled maximum of an inequality ratio, with per-sample detail."""

    value: float
    ratios: list
    skipped: int = 0

    def to_dict(self) -> dict:
        return {"value": self.value, "ratios": self.ratios, "skipped": self.skipped}


def _field_values(x):
    return x.values if isinstance(x, Field) else np.asarray(x, dtype=float)


def smoothing_constant(ef: EvolutionFamily, alpha: float, beta: float,
                       samples: Iterable[tuple], w: Optional[float] = None) -> ConstantEstimate:
    """max ||P(t,s)x||_{E^t_alpha} (t-s)^{alpha-beta} / ||x||_{E^s_beta} over samples."""
    if not (0 <= beta <= alpha <= 1):
        raise DomainError("smoothing estimate needs 0 <= beta <= alpha <= 1")
    w = ef.w if w is None else w
    ratios, skipped = [], 0
    for s, t, x in samples:
        if not s < t:
            raise OrderingError("smoothing estimate needs s < t")
        v = _field_values(x)
        denom = float(interp_norm(ef.operator(s), beta, w, v))
        if denom == 0:
            skipped += 1
            continue
        num = float(interp_norm(ef.operator(t), alpha, w, ef.apply(t, s, v)))
        ratios.append(num * (t - s) ** (alpha - beta) / denom)
    return ConstantEstimate(max(ratios) if ratios else float("nan"), ratios, skipped)


def singular_bound(ef: EvolutionFamily, theta: float, samples: Iterable[tuple],
                   w: Optional[float] = None) -> ConstantEstimate:
    """max ||P(t,s)(w - A(s))^theta x|| (t-s)^theta / ||x|| over samples."""
    if not 0 <= theta < ef.fam.mu:
        raise DomainError(f"singular bound needs 0 <= theta < mu = {ef.fam.mu}")
    w = ef.w if w is None else w
    ratios, skipped = [], 0
    for s, t, x in samples:
        if not s < t:
            raise OrderingError("singular bound needs s < t")
        v = _field_values(x)
        nx = float(lp_norm(v, 2))
        if nx == 0:
            skipped += 1
            continue
        y = frac_power(ef.operator(s), theta, w)(v)
        ratios.append(float(lp_norm(ef.apply(t, s, y), 2)) * (t - s) ** theta / nx)
    return ConstantEstimate(max(ratios) if ratios else float("nan"), ratios, skipped)


def strong_continuity_order(ef: EvolutionFamily, x, s: float = 0.0,
                            lags: Optional[Sequence[int]] = None) -> dict:
    """Fit log ||P(s+d, s)x - x|| against log d over dyadic subgrid lags d."""
    v = _field_values(x)
    js = ef.sub_index(s)
    if lags is None:
        lags = []
        lag = 1
        while js + lag <= ef.subgrid.m_steps and len(lags) < 8:
            lags.append(lag)
            lag *= 2
    deltas, incs = [], []
    for lag in lags:
        t = (js + lag) * ef.h
        deltas.append(lag * ef.h)
        incs.append(float(lp_norm(ef.apply(t, s, v) - v, 2)))
    deltas, incs = np.array(deltas), np.array(incs)
    ok = incs > 0
    if ok.sum() < 2:
        return {"order": math.inf, "deltas": deltas.tolist(), "increments": incs.tolist()}
    slope = np.polyfit(np.log(deltas[ok]), np.log(incs[ok]), 1)[0]
    return {"order": float(slope), "deltas": deltas.tolist(), "increments": incs.tolist()}
