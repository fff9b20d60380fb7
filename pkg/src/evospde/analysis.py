"""Verification harness: variational residuals, Hoelder exponents, ensemble reports."""

from __future__ import annotations

import dataclasses
import json
import math
import platform
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy
import scipy.linalg as sla

from . import __version__
from .convolution import (factorization_defect, max_reg_functional, max_reg_rhs,
                          stoch_convolve)
from .elliptic import at1_probe, at2_probe, default_time_pairs
from .errors import DomainError, SingularStepError, SPDEError
from .evolution import EvolutionFamily, singular_bound, smoothing_constant
from .mesh import SpaceGrid, TimeGrid, l2_inner, resolve_norm, sobolev1_norm
from .noise import make_model, sample_ensemble
from .solver import (PicardConfig, ProblemSpec, _increment, _spatial_noise, draw_increments,
                     local_solve, march, picard_solve)

MIN_HOLDER_MEMBERS = 30
MIN_HOLDER_LAGS = 4


# -- variational residual ---------------------------------------------------

def adjoint_test_function(ef: EvolutionFamily, l: int, x_star, substeps: Optional[int] = None,
                          scheme: str = "crank-nicolson") -> np.ndarray:
    """phi(t_k) = P(t_l, t_k)^* x* for k = 0..l by backward adjoint marching.

    The adjoint is taken in the trapezoidal inner product, A^* = W^{-1} A^T W.
    The marching uses its own scheme and substep count, independent of the
    propagator that produced the solution.
    """
    if scheme not in ("crank-nicolson", "backward-euler"):
        raise DomainError(f"unknown adjoint scheme {scheme!r}")
    ns = 2 * ef.substeps if substeps is None else int(substeps)
    h = ef.tgrid.dt / ns
    wts = ef.grid.weights
    n = ef.grid.n_nodes
    eye = np.eye(n)
    phi = np.empty((l + 1, n))
    cur = np.asarray(getattr(x_star, "values", x_star), dtype=float).copy()
    phi[l] = cur
    for j in range(l * ns - 1, -1, -1):
        if scheme == "crank-nicolson":
            a = ef.operator((j + 0.5) * h).matrix
            adj = a.T * wts[None, :] / wts[:, None]
            rhs = (eye + 0.5 * h * adj) @ cur
            lhs = eye - 0.5 * h * adj
        else:
            a = ef.operator((j + 1) * h).matrix
            rhs = cur
            lhs = eye - h * (a.T * wts[None, :] / wts[:, None])
        try:
            cur = sla.solve(lhs, rhs, check_finite=True)
        except (sla.LinAlgError, ValueError) as exc:
            raise SingularStepError(f"adjoint step {j} failed") from exc
        if j % ns == 0:
            phi[j // ns] = cur
    return phi


def variational_residual(U, ef: EvolutionFamily, ps: ProblemSpec, dW, l: int, x_star,
                         phi: Optional[np.ndarray] = None, **adjoint_kw) -> np.ndarray:
    """Signed discrete residual of the tested identity at node ``l``.

    <U(t_l), phi(t_l)> - <u0, phi(0)> - sum_k dt <U_k, phi'_k + A(t_k)^* phi_k>
    - sum_k <F_k dt + B_k dW_k, phi_k>, with phi' a forward difference.
    ``U`` may hold one path (m+1, n) or an ensemble (M, m+1, n).
    """
    U = np.asarray(getattr(U, "values", U), dtype=float)
    single = U.ndim == 2
    if single:
        U = U[None]
        dW = np.asarray(dW)[None]
    if not 0 < l <= ef.tgrid.m_steps:
        raise DomainError(f"test node {l} outside 1..{ef.tgrid.m_steps}")
    if phi is None:
        phi = adjoint_test_function(ef, l, x_star, **adjoint_kw)
    xi = _spatial_noise(ps, np.asarray(dW, dtype=float))
    dt = ef.tgrid.dt
    res = l2_inner(U[:, l], phi[l]) - l2_inner(U[:, 0], phi[0])
    for k in range(l):
        a = ef.operator_at(k).matrix
        drift = (phi[k + 1] - phi[k]) + dt * (a.T @ (ef.grid.weights * phi[k])) / ef.grid.weights
        res = res - l2_inner(U[:, k], drift)
        res = res - l2_inner(_increment(ps, ef, k, U[:, k], xi[:, k]), phi[k])
    return res[0] if single else res


# -- Hoelder exponent ---------------------------------------------------------

def dyadic_lags(n_max: int, count: int = 6) -> list:
    return [2**j for j in range(count) if 2**j < n_max]


def _slope_summary(med: np.ndarray, x: np.ndarray, lags, n_boot: int, level: float, seed: int) -> dict:
    """Median and bootstrap CI of per-member OLS slopes of log ``med`` against ``x``."""
    M = med.shape[0]
    good = np.all(med > 0, axis=1)
    out = {"lags": list(map(int, lags)), "members": int(M), "degenerate": int(M - good.sum())}
    if not good.any():
        out.update(est=math.inf, lo=math.inf, hi=math.inf, flag="degenerate")
        return out
    s = np.polyfit(x, np.log(med[good]).T, 1)[0]
    est = float(np.median(s))
    rng = np.random.default_rng(seed)
    boots = np.median(s[rng.integers(0, s.size, size=(n_boot, s.size))], axis=1)
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(boots, [tail, 100.0 - tail])
    out.update(est=est, lo=float(min(lo, est)), hi=float(max(hi, est)), flag=None)
    return out


def _holder_preconditions(M: int, lags, n: int, min_members: int) -> None:
    if M < min_members:
        raise DomainError(f"Hoelder estimation needs an ensemble of at least {min_members} members, got {M}")
    if len(lags) < MIN_HOLDER_LAGS:
        raise DomainError(f"Hoelder estimation needs at least {MIN_HOLDER_LAGS} lags")
    if max(lags) >= n:
        raise DomainError("largest lag exceeds the path length")


def estimate_holder(paths, spatial_norm="sup", lags: Optional[Sequence[int]] = None,
                    dt: Optional[float] = None, n_boot: int = 2000, level: float = 0.9,
                    seed: int = 0, min_members: int = MIN_HOLDER_MEMBERS) -> dict:
    """Ensemble median of per-member log-log slopes of median increment norms.

    For each member the median over k of ||U_{k+L} - U_k|| is regressed
    (ordinary least squares, log scale) on the lag L dt.  The confidence
    interval is the percentile bootstrap of the ensemble median over
    members.  Members whose increments vanish at some lag are degenerate;
    if every member is degenerate the estimate is the +inf sentinel.
    """
    v = np.asarray(getattr(paths, "values", paths), dtype=float)
    if v.ndim == 2:
        v = v[None]
    M, n_t = v.shape[0], v.shape[1]
    lags = dyadic_lags(n_t) if lags is None else list(lags)
    _holder_preconditions(M, lags, n_t, min_members)
    dt = 1.0 if dt is None else dt
    norm = resolve_norm(spatial_norm)
    med = np.stack([np.median(norm(v[:, L:] - v[:, :-L]), axis=1) for L in lags], axis=1)
    x = np.log(np.asarray(lags, dtype=float) * dt)
    return _slope_summary(med, x, lags, n_boot, level, seed)


def estimate_holder_space(paths, lags: Optional[Sequence[int]] = None, n_boot: int = 2000,
                          level: float = 0.9, seed: int = 0,
                          min_members: int = MIN_HOLDER_MEMBERS) -> dict:
    """Spatial analogue of :func:`estimate_holder` on node-pair increments.

    Per member, the median of |u_{j+L}(t_k) - u_j(t_k)| over all nodes j and
    time nodes k >= 1 is regressed on log(L h).  The result also carries the
    implied index delta = beta / 2 of the interpolation scale.
    """
    v = np.asarray(getattr(paths, "values", paths), dtype=float)
    if v.ndim == 2:
        v = v[None]
    M, n = v.shape[0], v.shape[-1]
    lags = dyadic_lags(n - 1, 5) if lags is None else list(lags)
    _holder_preconditions(M, lags, n, min_members)
    body = v[:, 1:, :].reshape(M, -1, n) if v.shape[1] > 1 else v
    med = np.stack([np.median(np.abs(body[..., L:] - body[..., :-L]).reshape(M, -1), axis=1)
                    for L in lags], axis=1)
    x = np.log(np.asarray(lags, dtype=float) / (n - 1))
    out = _slope_summary(med, x, lags, n_boot, level, seed)
    out["delta"] = out["est"] / 2
    return out


# -- ensemble orchestration ---------------------------------------------------

@dataclass
class Scenario:
    name: str
    problem: ProblemSpec
    config: PicardConfig
    checks: list = field(default_factory=list)
    options: dict = field(default_factory=dict)

    def opt(self, key, default):
        return self.options.get(key, default)


@dataclass
class RegularityReport:
    scenario_id: str
    grids: dict
    seeds: dict
    exponents: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    solution: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def to_dict(self) -> dict:
        return {"scenario_id": self.scenario_id, "grids": self.grids, "seeds": self.seeds,
                "exponents": self.exponents, "constants": self.constants, "flags": self.flags,
                "details": self.details, "versions": self.versions}

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True, allow_nan=True) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def versions() -> dict:
    return {"evospde": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


class _Context:
    """Lazily computed shared state for the checks of one run."""

    def __init__(self, sc: Scenario, workers: int):
        self.sc = sc
        self.ps = sc.problem
        self.cfg = dataclasses.replace(sc.config, workers=workers)
        self._solution = None

    def solution(self):
        if self._solution is None:
            ps, cfg = self.ps, self.cfg
            if ps.lipschitz.get("mode", "global") == "local":
                loc = local_solve(ps, cfg, int(self.sc.opt("n_levels", 8)))
                self._solution = (loc.values, None, loc)
            else:
                res = picard_solve(ps, cfg)
                self._solution = (res.values, res, None)
        return self._solution


def _check_contraction(ctx: _Context) -> dict:
    _, res, _ = ctx.solution()
    if res is None:
        return {"pass": True, "skipped": "local problem"}
    rep = res.report
    return {"pass": rep.q_max <= 0.9, "constant": {"value": rep.q_max, "p_weight": rep.p_weight,
            "iters": rep.iters, "half_reached": rep.q_max <= 0.5,
            "grids": [[ctx.ps.grid.n_cells, ctx.cfg.m_steps]]}, "report": rep.to_dict()}


def _check_holder(ctx: _Context) -> dict:
    vals, _, _ = ctx.solution()
    lags = ctx.sc.opt("holder_lags", dyadic_lags(vals.shape[1]))
    est = estimate_holder(vals, ctx.sc.opt("holder_norm", "sup"), lags, ctx.cfg.tgrid(ctx.ps.T).dt,
                          seed=ctx.cfg.seed)
    lo_win, hi_win = ctx.sc.opt("holder_window", (0.30, 0.55))
    ok = lo_win < est["lo"] and est["hi"] < hi_win
    # spatial exponent is recorded only; it does not enter the flag
    if len(dyadic_lags(vals.shape[-1] - 1, 5)) >= MIN_HOLDER_LAGS:
        space = estimate_holder_space(vals, seed=ctx.cfg.seed)
    else:
        space = {"est": None, "lo": None, "hi": None, "delta": None, "flag": "grid too coarse"}
    return {"pass": bool(ok), "exponent": est, "window": [lo_win, hi_win], "space": space}


def _check_sobolev(ctx: _Context) -> dict:
    """E int_0^T ||u(t)||_{W^{1,2}}^2 dt at m and m/2 steps (shared Wiener paths)."""
    ps, cfg = ctx.ps, ctx.cfg
    vals, res, _ = ctx.solution()
    dW = res.dW if res is not None else draw_increments(ps, cfg)
    m = cfg.m_steps
    coarse_cfg = PicardConfig(**{**cfg.__dict__, "m_steps": m // 2})
    ef_c = EvolutionFamily(ps.fam, ps.grid, coarse_cfg.tgrid(ps.T), cfg.scheme, cfg.substeps)
    dW_c = dW.reshape(dW.shape[0], dW.shape[1], m // 2, 2).sum(-1)
    coarse = march(ps, ef_c, dW_c)

    def functional(v, dt):
        return float(np.mean(dt * np.sum(sobolev1_norm(v[:, 1:]) ** 2, axis=1)))

    fine_val = functional(vals, ps.T / m)
    coarse_val = functional(coarse, ps.T / (m // 2))
    ratio = fine_val / coarse_val if coarse_val > 0 else math.inf
    ok = math.isfinite(fine_val) and 0.5 < ratio < 2.0
    return {"pass": bool(ok), "value": fine_val, "coarse": coarse_val, "ratio": ratio,
            "grids": [[ps.grid.n_cells, m // 2], [ps.grid.n_cells, m]]}


def _noise_on(ctx: _Context, grid: SpaceGrid):
    model = ctx.ps.noise
    if model.family == "cosine" and model.N >= grid.n_cells:
        model = make_model(model.gamma, grid.n_cells - 1, regime=model.regime, q=model.q, beta=model.beta)
    return model


def _check_factorization(ctx: _Context) -> dict:
    sc, ps = ctx.sc, ctx.ps
    grid = SpaceGrid(int(sc.opt("factorization_n_cells", ps.grid.n_cells)))
    steps = list(sc.opt("factorization_steps", (64, 128, 256)))
    members = int(sc.opt("factorization_members", min(ctx.cfg.M, 50)))
    alpha = float(sc.opt("factorization_alpha", 0.25))
    substeps = int(sc.opt("factorization_substeps", ctx.cfg.substeps))
    model = _noise_on(ctx, grid)
    finest = TimeGrid(ps.T, steps[-1])
    dW = sample_ensemble(model, finest, ctx.cfg.seed, range(members))
    cols = model.columns(grid)
    defects = []
    for m in steps:
        ef = EvolutionFamily(ps.fam, grid, TimeGrid(ps.T, m), ctx.cfg.scheme, substeps)
        coarse = dW.reshape(members, model.N, m, steps[-1] // m).sum(-1)
        defects.append(factorization_defect(ef, cols, coarse, alpha, ps.theta_B))
    ratios = [a / b if b > 0 else math.inf for a, b in zip(defects[:-1], defects[1:])]
    ok = all(r >= 1.3 for r in ratios)
    return {"pass": bool(ok), "constant": {"value": defects[-1], "defects": defects, "ratios": ratios,
            "alpha": alpha, "grids": [[grid.n_cells, m] for m in steps]}}


def _check_maxreg(ctx: _Context) -> dict:
    sc, ps, cfg = ctx.sc, ctx.ps, ctx.cfg
    grid = SpaceGrid(int(sc.opt("maxreg_n_cells", ps.grid.n_cells)))
    m = int(sc.opt("maxreg_steps", cfg.m_steps))
    members = int(sc.opt("maxreg_members", cfg.M))
    model = _noise_on(ctx, grid)
    dW = sample_ensemble(model, TimeGrid(ps.T, m), cfg.seed, range(members))
    cols = model.columns(grid)
    ratios = []
    for mm in (m // 2, m):
        ef = EvolutionFamily(ps.fam, grid, TimeGrid(ps.T, mm), cfg.scheme, cfg.substeps)
        inc = dW.reshape(members, model.N, mm, m // mm).sum(-1)
        conv = stoch_convolve(ef, cols, inc)
        ratios.append(max_reg_functional(ef, conv) / max_reg_rhs(ef, cols))
    change = abs(ratios[1] / ratios[0] - 1.0)
    return {"pass": bool(change < 0.25), "constant": {"value": ratios[1], "coarse": ratios[0],
            "change": change, "grids": [[grid.n_cells, m // 2], [grid.n_cells, m]]}}


def _check_variational(ctx: _Context) -> dict:
    """RMS residual of the additive linear model against an adjoint-evolved eigenmode."""
    sc, ps, cfg = ctx.sc, ctx.ps, ctx.cfg
    grid = SpaceGrid(int(sc.opt("variational_n_cells", min(ps.grid.n_cells, 32))))
    steps = list(sc.opt("variational_steps", (16, 32, 64)))
    members = int(sc.opt("variational_members", cfg.M))
    model = _noise_on(ctx, grid)
    u0 = np.interp(grid.nodes, ps.grid.nodes, ps.u0 if ps.u0.ndim == 1 else ps.u0[0])
    lin = ProblemSpec(ps.fam, model, lambda t, s, u: np.zeros_like(u), lambda t, s, u: np.ones_like(u),
                      grid.field(u0), ps.T, name="additive-linear")
    dW = sample_ensemble(model, TimeGrid(ps.T, steps[-1]), cfg.seed, range(members))
    x_star = ps.fam.operator(grid, ps.T).spectrum().eigenvectors[:, 1].real
    rms = []
    for m in steps:
        ef = EvolutionFamily(ps.fam, grid, TimeGrid(ps.T, m), cfg.scheme, cfg.substeps)
        inc = dW.reshape(members, model.N, m, steps[-1] // m).sum(-1)
        U = march(lin, ef, inc)
        r = variational_residual(U, ef, lin, inc, m, x_star)
        rms.append(float(np.sqrt(np.mean(r**2))))
    order = float(np.polyfit(np.log([ps.T / m for m in steps]), np.log(rms), 1)[0])
    return {"pass": bool(order >= 0.4), "rms": rms, "order": order,
            "grids": [[grid.n_cells, m] for m in steps]}


def _sample_fields(grid: SpaceGrid, count: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    k = np.arange(1, 9)
    return [(rng.standard_normal(8) / k) @ np.cos(np.pi * np.outer(k, grid.nodes)) for _ in range(count)]


def _constant_pair(ctx: _Context, fn: Callable, label: str) -> dict:
    ps, cfg = ctx.ps, ctx.cfg
    values = []
    grids = []
    for nc in (max(ps.grid.n_cells // 2, 8), ps.grid.n_cells):
        grid = SpaceGrid(nc)
        ef = EvolutionFamily(ps.fam, grid, TimeGrid(ps.T, cfg.m_steps), cfg.scheme, cfg.substeps)
        dt = ef.tgrid.dt
        pairs = [(0.0, 4 * dt), (0.0, ps.T / 2), (ps.T / 4, ps.T / 4 + 8 * dt), (ps.T / 2, ps.T)]
        samples = [(s, t, x) for (s, t) in pairs for x in _sample_fields(grid, 3, cfg.seed)]
        values.append(fn(ef, samples).value)
        grids.append([nc, cfg.m_steps])
    ratio = max(values) / min(values) if min(values) > 0 else math.inf
    return {"pass": bool(all(map(math.isfinite, values)) and ratio < 2.0),
            "constant": {"value": values[-1], "coarse": values[0], "ratio": ratio, "grids": grids,
                         "kind": label}}


def _check_smoothing(ctx: _Context) -> dict:
    return _constant_pair(ctx, lambda ef, smp: smoothing_constant(ef, 0.5, 0.0, smp), "alpha=1/2,beta=0")


def _check_singular(ctx: _Context) -> dict:
    theta = min(0.25, 0.5 * ctx.ps.fam.mu)
    return _constant_pair(ctx, lambda ef, smp: singular_bound(ef, theta, smp), f"theta={theta}")


def _check_at(ctx: _Context) -> dict:
    ps = ctx.ps
    grid = SpaceGrid(int(ctx.sc.opt("at_n_cells", min(ps.grid.n_cells, 32))))
    times = list(np.linspace(0.0, ps.T, 5))
    r1 = at1_probe(ps.fam, grid, times)
    r2 = at2_probe(ps.fam, grid, default_time_pairs(ps.T))
    return {"pass": bool(r1.passed and r2.passed), "at1": r1.to_dict(), "at2": r2.to_dict()}


CHECKS = {
    "contraction": _check_contraction,
    "holder": _check_holder,
    "sobolev": _check_sobolev,
    "factorization": _check_factorization,
    "maxreg": _check_maxreg,
    "variational": _check_variational,
    "smoothing": _check_smoothing,
    "singular": _check_singular,
    "at": _check_at,
}

CONSTANT_KEYS = {"smoothing": "smoothing", "singular": "singular", "maxreg": "maxreg",
                 "factorization": "factorization", "contraction": "contraction"}


def run_ensemble(sc: Scenario, workers: int = 1, solve: bool = False) -> RegularityReport:
    """Run the scenario's checks and assemble a deterministic report.

    With ``solve=True`` the solution ensemble is computed even when no check
    needs it and is attached as ``report.solution`` (not serialised).
    """
    unknown = [c for c in sc.checks if c not in CHECKS]
    if unknown:
        raise DomainError(f"unknown check ids: {', '.join(unknown)}")
    ps, cfg = sc.problem, sc.config
    report = RegularityReport(
        scenario_id=sc.name,
        grids={"n_cells": ps.grid.n_cells, "m_steps": cfg.m_steps, "substeps": cfg.substeps,
               "T": ps.T, "scheme": cfg.scheme},
        seeds={"seed": cfg.seed, "M": cfg.M},
        versions=versions())
    ctx = _Context(sc, workers)
    for cid in sc.checks:
        try:
            out = CHECKS[cid](ctx)
        except SPDEError as exc:
            exc.args = (f"scenario {sc.name!r}, check {cid!r}: {exc}",) + exc.args[1:]
            raise
        report.flags[cid] = bool(out["pass"])
        report.details[cid] = out
        if cid in CONSTANT_KEYS and "constant" in out:
            report.constants[CONSTANT_KEYS[cid]] = out["constant"]
        if cid == "holder":
            e = out["exponent"]
            report.exponents["time"] = {"est": e["est"], "lo": e["lo"], "hi": e["hi"]}
            sp = out["space"]
            report.exponents["space"] = {"est": sp["est"], "lo": sp["lo"], "hi": sp["hi"],
                                         "delta": sp["delta"]}
    if solve or ctx._solution is not None:
        report.solution = ctx.solution()[0]
    return report
