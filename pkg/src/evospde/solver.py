"""Semilinear stochastic evolution equations: Picard iteration and localisation.

The problem is du = (A(t)u + F(t,u)) dt + B(t,u) dW with Nemytskii
coefficients F(t,u)(s) = f(t,s,u(s)) and (B(t,u)h)(s) = g(t,s,u(s)) (sqrt(Q)h)(s).
Ensembles are stored as arrays of shape (M, m+1, n_nodes).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import curve_fit

from .convolution import accumulate
from .elliptic import OperatorFamily, interp_norm
from .errors import DivergenceError, DomainError, LocalizationError
from .evolution import EvolutionFamily
from .mesh import Field, SpaceGrid, TimeGrid, lp_norm
from .noise import NoiseModel, sample_ensemble

P_SCHEDULE = (0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0)
CONTRACTION_TARGET = 0.9
CHUNK = 32

ScalarMap = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


@dataclass(eq=False)
class ProblemSpec:
    """Data of the semilinear equation.

    ``f`` and ``g`` are vectorised maps (t, s, u) -> array broadcasting over
    leading member axes of ``u``.  ``u0`` is a Field, a nodal array, or an
    (M, n_nodes) array of per-member initial values.
    """

    fam: OperatorFamily
    noise: NoiseModel
    f: ScalarMap
    g: ScalarMap
    u0: Union[Field, np.ndarray]
    T: float
    theta_F: float = 0.0
    theta_B: float = 0.0
    a: float = 0.0
    grid: Optional[SpaceGrid] = None
    lipschitz: dict = field(default_factory=lambda: {"mode": "global"})
    name: str = "problem"

    def __post_init__(self):
        if isinstance(self.u0, Field):
            self.grid = self.u0.grid
        if self.grid is None:
            raise DomainError("a SpaceGrid is needed when u0 is a plain array")
        u0 = np.asarray(getattr(self.u0, "values", self.u0), dtype=float)
        if u0.shape[-1] != self.grid.n_nodes or not np.all(np.isfinite(u0)):
            raise DomainError("initial value must be finite with one value per grid node")
        self.u0 = u0
        if not self.T > 0:
            raise DomainError("time horizon T must be positive")
        for name in ("theta_F", "theta_B", "a"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative")
        if not self.a + self.theta_F < 1:
            raise DomainError(f"a + theta_F = {self.a + self.theta_F} >= 1 violates (H2)")
        if not self.a + self.theta_B < 0.5:
            raise DomainError(f"a + theta_B = {self.a + self.theta_B} >= 1/2 violates (H3)")
        if not 0.5 < self.fam.mu <= 1:
            raise DomainError(f"mu = {self.fam.mu} outside (1/2, 1] violates (AT2)")

    def initial(self, M: int) -> np.ndarray:
        if self.u0.ndim == 1:
            return np.broadcast_to(self.u0, (M, self.u0.size)).copy()
        if self.u0.shape[0] != M:
            raise DomainError(f"u0 holds {self.u0.shape[0]} members, ensemble has {M}")
        return self.u0.copy()


@dataclass
class PicardConfig:
    r: float = 4.0
    p_weight: Union[str, float] = "auto"
    max_iter: int = 100
    tol: float = 1e-10
    M: int = 1
    seed: int = 0
    m_steps: int = 64
    substeps: int = 4
    scheme: str = "backward-euler"
    workers: int = 1

    def __post_init__(self):
        if not self.tol > 0:
            raise DomainError("tol must be positive")
        if self.M < 1:
            raise DomainError("ensemble size M must be at least 1")
        if self.r < 2:
            raise DomainError("moment exponent r must be >= 2")
        if self.p_weight != "auto" and not float(self.p_weight) >= 0:
            raise DomainError("p_weight must be 'auto' or a nonnegative number")
        if self.max_iter < 1:
            raise DomainError("max_iter must be positive")

    def tgrid(self, T: float) -> TimeGrid:
        return TimeGrid(T, self.m_steps)


def make_evolution(ps: ProblemSpec, cfg: PicardConfig) -> EvolutionFamily:
    return EvolutionFamily(ps.fam, ps.grid, cfg.tgrid(ps.T), cfg.scheme, cfg.substeps)


def draw_increments(ps: ProblemSpec, cfg: PicardConfig, tgrid: Optional[TimeGrid] = None,
                    members: Optional[Sequence[int]] = None) -> np.ndarray:
    """Wiener increments (M, N, m) for members 0..M-1 (or the given indices)."""
    tgrid = tgrid or cfg.tgrid(ps.T)
    members = range(cfg.M) if members is None else members
    return sample_ensemble(ps.noise, tgrid, cfg.seed, members)


def nemytskii(ps: ProblemSpec, t: float, u) -> tuple:
    """(F(t,u), B(t,u) columns); columns have shape (..., N, n_nodes)."""
    v = np.asarray(getattr(u, "values", u), dtype=float)
    s = ps.grid.nodes
    fu = np.broadcast_to(np.asarray(ps.f(t, s, v), dtype=float), v.shape)
    gu = np.broadcast_to(np.asarray(ps.g(t, s, v), dtype=float), v.shape)
    if not (np.all(np.isfinite(fu)) and np.all(np.isfinite(gu))):
        raise DomainError(f"non-finite Nemytskii output at t={t}")
    cols = gu[..., None, :] * ps.noise.columns(ps.grid)
    return fu, cols


def _spatial_noise(ps: ProblemSpec, dW: np.ndarray) -> np.ndarray:
    """xi_k = sum_n sqrt(lam_n) e_n dW_n(t_k), shape (M, m, n_nodes)."""
    return np.swapaxes(dW, -1, -2) @ ps.noise.columns(ps.grid)


def _power_rows(ef: EvolutionFamily, k: int, theta: float, v: np.ndarray) -> np.ndarray:
    return v if theta == 0 else v @ ef.power(k, theta).T


def _increment(ps: ProblemSpec, ef: EvolutionFamily, k: int, u: np.ndarray, xi_k: np.ndarray) -> np.ndarray:
    """dt (w-A)^theta_F F(t_k,u) + (w-A)^theta_B B(t_k,u) dW_k, row-wise."""
    t = ef.tgrid.times[k]
    s = ps.grid.nodes
    fu = np.asarray(ps.f(t, s, u), dtype=float)
    gu = np.asarray(ps.g(t, s, u), dtype=float)
    out = ef.tgrid.dt * _power_rows(ef, k, ps.theta_F, np.broadcast_to(fu, u.shape))
    return out + _power_rows(ef, k, ps.theta_B, np.broadcast_to(gu, u.shape) * xi_k)


def free_evolution(ef: EvolutionFamily, u0: np.ndarray) -> np.ndarray:
    """P(t_k, 0) u0 at every node, shape (M, m+1, n)."""
    m = ef.tgrid.m_steps
    out = np.empty(u0.shape[:-1] + (m + 1, u0.shape[-1]))
    out[..., 0, :] = u0
    for k in range(m):
        out[..., k + 1, :] = out[..., k, :] @ ef.propagator(k).T
    return out


def _fixed_point_map(ps, ef, xi, base, phi):
    m = ef.tgrid.m_steps
    d = np.empty(phi.shape[:-2] + (m, phi.shape[-1]))
    for k in range(m):
        d[..., k, :] = _increment(ps, ef, k, phi[..., k, :], xi[..., k, :])
    return base + accumulate(ef, d)


def _chunks(M: int):
    return [slice(i, min(i + CHUNK, M)) for i in range(0, M, CHUNK)]


def _map_chunks(fn, M: int, workers: int):
    """Apply ``fn(slice)`` over fixed member chunks; results in chunk order."""
    parts = _chunks(M)
    if workers <= 1 or len(parts) == 1:
        return [fn(sl) for sl in parts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, parts))


def picard_step(ps: ProblemSpec, ef: EvolutionFamily, dW: np.ndarray, phi: np.ndarray,
                workers: int = 1) -> np.ndarray:
    """L(phi) = P(.,0)u0 + P*F(.,phi) + P<>B(.,phi) member by member."""
    xi = _spatial_noise(ps, dW)
    base = free_evolution(ef, ps.initial(phi.shape[0]))
    parts = _map_chunks(lambda sl: _fixed_point_map(ps, ef, xi[sl], base[sl], phi[sl]),
                        phi.shape[0], workers)
    return np.concatenate(parts, axis=0)


def node_moments(values: np.ndarray, r: float, a: float = 0.0,
                 ef: Optional[EvolutionFamily] = None) -> np.ndarray:
    """(mean over members of ||v(t_k)||^r)^{1/r} for each node k."""
    if a == 0:
        norms = lp_norm(values, 2)
    else:
        if ef is None:
            raise DomainError("interpolation norms need an evolution family")
        norms = np.stack([interp_norm(ef.operator_at(k), a, ef.w, values[..., k, :])
                          for k in range(values.shape[-2])], axis=-1)
    norms = norms.reshape(-1, norms.shape[-1])
    return np.mean(norms**r, axis=0) ** (1.0 / r)


def weighted_norm(ensemble, cfg: PicardConfig, a: float = 0.0, ef: Optional[EvolutionFamily] = None,
                  times=None, p: Optional[float] = None) -> float:
    """max_k e^{-p t_k} (E ||phi(t_k)||^r)^{1/r} with the Monte Carlo mean over members."""
    v = np.asarray(getattr(ensemble, "values", ensemble), dtype=float)
    if v.ndim == 2:
        v = v[None]
    if v.shape[0] == 0:
        raise DomainError("empty ensemble")
    if times is None:
        times = ef.tgrid.times if ef is not None else np.linspace(0.0, 1.0, v.shape[-2])
    if p is None:
        p = 0.0 if cfg.p_weight == "auto" else float(cfg.p_weight)
    return _weighted(node_moments(v, cfg.r, a, ef), np.asarray(times), p)


def _weighted(moments: np.ndarray, times: np.ndarray, p: float) -> float:
    return float(np.max(np.exp(-p * times) * moments))


@dataclass
class ContractionReport:
    p_weight: float
    iters: int
    q: list
    final_residual: float
    residuals: list = field(default_factory=list)
    tried: dict = field(default_factory=dict)

    @property
    def q_max(self) -> float:
        return max(self.q) if self.q else 0.0

    def to_dict(self) -> dict:
        return {"p_weight": self.p_weight, "iters": self.iters, "q": self.q,
                "final_residual": self.final_residual, "q_max": self.q_max,
                "half_reached": self.q_max <= 0.5}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class PicardResult:
    values: np.ndarray
    ef: EvolutionFamily
    dW: np.ndarray
    report: ContractionReport


def _ratios(res: Sequence[float], floor: float) -> list:
    q = []
    for prev, cur in zip(res[:-1], res[1:]):
        if prev <= floor:
            break
        q.append(cur / prev)
    return q


def picard_solve(ps: ProblemSpec, cfg: PicardConfig, dW: Optional[np.ndarray] = None,
                 ef: Optional[EvolutionFamily] = None) -> PicardResult:
    """Fixed-point iteration from P(t,0)u0 with exponential-weight escalation.

    The iterates do not depend on the weight p, only the norm does, so the
    differences are stored as per-node moments and every weight of the
    schedule {0, 1, 2, 4, ..., 1024} is evaluated on the same iterates.  The
    reported weight is the first whose largest contraction factor is below
    0.9.
    """
    if cfg.r == 2 and (ps.theta_F > 0 or ps.theta_B > 0):
        raise DomainError("r = 2 is only admissible when theta_F = theta_B = 0")
    ef = ef or make_evolution(ps, cfg)
    if dW is None:
        dW = draw_increments(ps, cfg, ef.tgrid)
    times = ef.tgrid.times
    phi = free_evolution(ef, ps.initial(cfg.M))
    scale = max(1.0, float(np.max(node_moments(phi, cfg.r, ps.a, ef))))
    moments = []
    converged = False
    for _ in range(cfg.max_iter):
        new = picard_step(ps, ef, dW, phi, cfg.workers)
        if not np.all(np.isfinite(new)):
            raise DivergenceError("Picard iterate became non-finite",
                                  {"iteration": len(moments) + 1})
        moments.append(node_moments(new - phi, cfg.r, ps.a, ef))
        phi = new
        if float(np.max(moments[-1])) <= cfg.tol * scale:
            converged = True
            break
    schedule = P_SCHEDULE if cfg.p_weight == "auto" else (float(cfg.p_weight),)
    floor = 1e3 * np.finfo(float).eps * scale
    tried = {}
    for p in schedule:
        res = [_weighted(mo, times, p) for mo in moments]
        q = _ratios(res, floor)
        tried[p] = max(q) if q else 0.0
        if tried[p] < CONTRACTION_TARGET:
            report = ContractionReport(p, len(moments), q, res[-1], res, tried)
            if not converged:
                raise DivergenceError(
                    f"no convergence to tol={cfg.tol} within {cfg.max_iter} iterations",
                    {"report": report.to_dict()})
            return PicardResult(phi, ef, dW, report)
    raise DivergenceError(
        f"contraction factor >= {CONTRACTION_TARGET} for every weight up to {schedule[-1]}",
        {"q_max_by_weight": tried, "iterations": len(moments)})


def march(ps: ProblemSpec, ef: EvolutionFamily, dW: np.ndarray, u0: Optional[np.ndarray] = None,
          clamp: Optional[float] = None) -> np.ndarray:
    """Causal left-point scheme U_{k+1} = P(t_{k+1},t_k)(U_k + increment(U_k)).

    This is the exact fixed point of the discrete Picard map.  With
    ``clamp=R`` the coefficients see the radially truncated state
    u min(1, R/||u||).
    """
    xi = _spatial_noise(ps, dW)
    u = ps.initial(dW.shape[0]) if u0 is None else np.array(u0, dtype=float)
    m = ef.tgrid.m_steps
    out = np.empty(u.shape[:-1] + (m + 1, u.shape[-1]))
    out[..., 0, :] = u
    for k in range(m):
        uc = u if clamp is None else radial_clamp(u, clamp, _state_norm(ps, ef, k, u))
        u = (u + _increment(ps, ef, k, uc, xi[..., k, :])) @ ef.propagator(k).T
        out[..., k + 1, :] = u
    return out


def radial_clamp(u: np.ndarray, radius: float, norms: np.ndarray) -> np.ndarray:
    """u min(1, R/||u||) row-wise; rows inside the ball are returned unchanged."""
    outside = norms > radius
    if not np.any(outside):
        return u
    out = u.copy()
    out[outside] *= (radius / norms[outside])[:, None]
    return out


def _state_norm(ps: ProblemSpec, ef: EvolutionFamily, k: int, u: np.ndarray) -> np.ndarray:
    if ps.a == 0:
        return lp_norm(u, 2)
    return interp_norm(ef.operator_at(k), ps.a, ef.w, u)


@dataclass
class LocalSolution:
    values: np.ndarray           # top-level localised paths, frozen after their stopping node
    tau: np.ndarray              # (M, n_levels) stopping node indices; m_steps + 1 means never
    tau_times: np.ndarray        # (M, n_levels), T where the level was never reached
    levels: list
    exploded: np.ndarray         # per member
    explosion_time: np.ndarray   # per member; inf when no explosion is detected
    max_level: int
    ef: EvolutionFamily = field(repr=False)

    def to_dict(self) -> dict:
        return {"tau": self.tau_times.tolist(), "tau_nodes": self.tau.tolist(),
                "levels": self.levels, "exploded": self.exploded.tolist(),
                "explosion_time": [None if math.isinf(x) else float(x) for x in self.explosion_time],
                "max_level": self.max_level}


def _power_tail(n, tau_star, c, p):
    return tau_star - c * n ** (-p)


def estimate_explosion(levels: Sequence[float], tau_times: Sequence[float], T: float) -> float:
    """Limit of tau_n from the fit tau_n = tau* - c n^{-p} over the crossed levels.

    Uses the levels whose stopping time lies strictly inside (0, T).
    Returns inf when fewer than three such levels exist or the fitted limit
    is not below T.
    """
    lv = np.asarray(levels, dtype=float)
    tt = np.asarray(tau_times, dtype=float)
    ok = (tt > 0) & (tt < T)
    if ok.sum() < 3 or np.any(np.diff(tt[ok]) < 0):
        return math.inf
    x, y = lv[ok], tt[ok]
    try:
        popt, _ = curve_fit(_power_tail, x, y, p0=(y[-1] + 0.5 * (y[-1] - y[0]), 1.0, 1.0),
                            bounds=([y[-1], 0.0, 0.05], [np.inf, np.inf, 10.0]), maxfev=20000)
    except (RuntimeError, ValueError):
        return math.inf
    return float(popt[0]) if popt[0] < T else math.inf


def local_solve(ps: ProblemSpec, cfg: PicardConfig, n_levels: int,
                dW: Optional[np.ndarray] = None, radii: Optional[Sequence[float]] = None,
                ef: Optional[EvolutionFamily] = None) -> LocalSolution:
    """Localised solutions with coefficients clamped at radius n, n = 1..n_levels.

    tau_n is the first node where the level-n solution reaches norm n; the
    path is frozen from there on.  Levels are checked to coincide before
    each lower stopping time.
    """
    if n_levels < 1:
        raise DomainError("n_levels must be positive")
    radii = list(range(1, n_levels + 1)) if radii is None else list(radii)
    if len(radii) != n_levels or np.any(np.diff(radii) <= 0):
        raise DomainError("radii must be increasing, one per level")
    ef = ef or make_evolution(ps, cfg)
    if dW is None:
        dW = draw_increments(ps, cfg, ef.tgrid)
    m = ef.tgrid.m_steps
    M = dW.shape[0]
    xi = _spatial_noise(ps, dW)
    tau = np.full((M, n_levels), m + 1, dtype=int)
    prev = None
    for j, R in enumerate(radii):
        u = ps.initial(M)
        out = np.empty((M, m + 1, u.shape[-1]))
        out[:, 0] = u
        active = np.ones(M, dtype=bool)
        nrm = _state_norm(ps, ef, 0, u)
        hit = nrm >= R
        tau[hit, j] = 0
        active &= ~hit
        for k in range(m):
            if not active.any():
                out[:, k + 1:] = out[:, k: k + 1]
                break
            uc = radial_clamp(u, R, nrm)
            step = (u + _increment(ps, ef, k, uc, xi[:, k, :])) @ ef.propagator(k).T
            u = np.where(active[:, None], step, u)
            out[:, k + 1] = u
            nrm = _state_norm(ps, ef, k + 1, u)
            hit = active & (nrm >= R)
            tau[hit, j] = k + 1
            active &= ~hit
        if prev is not None:
            _check_nesting(prev, out, tau[:, j - 1])
        prev = out
    tau_times = np.where(tau <= m, ef.tgrid.times[np.minimum(tau, m)], ps.T)
    est = np.array([estimate_explosion(radii, tau_times[i], ps.T) for i in range(M)])
    exploded = (tau[:, -1] <= m) & np.isfinite(est)
    return LocalSolution(prev, tau, tau_times, radii, exploded, est, radii[-1], ef)


def _check_nesting(lower: np.ndarray, upper: np.ndarray, tau_lower: np.ndarray) -> None:
    for i, t in enumerate(tau_lower):
        stop = min(int(t), lower.shape[1] - 1)
        if not np.array_equal(lower[i, :stop], upper[i, :stop]):
            gap = float(np.max(np.abs(lower[i, :stop] - upper[i, :stop])))
            raise LocalizationError(
                f"member {i}: localised solutions differ by {gap:.3g} before the lower stopping node {stop}")
