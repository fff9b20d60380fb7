"""Divergence-form operators A(t) = D(a(t,s) D) + a0(t,s) with conormal
Neumann conditions, their spectral calculus, and resolvent probes.

Discrete operators act on nodal values.  The ghost-node Neumann stencil is
not a symmetric matrix, but it is self-adjoint for the trapezoidal inner
product <f, g> = sum_i w_i f_i g_i that all L^2 norms in :mod:`mesh` use;
"symmetric" below always refers to that inner product.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import DomainError, EllipticityError, IllConditionedError, ShiftError, SingularResolventError
from .mesh import Field, SpaceGrid, lp_norm

Coefficient = Callable[[float, np.ndarray], np.ndarray]

SYMMETRY_TOL = 1e-12
MAX_EIGVEC_COND = 1e8
PROBE_ANGLE = 3 * math.pi / 4
PROBE_MODULI = np.logspace(-1, 3, 9)


def _as_coefficient(c) -> Optional[Coefficient]:
    if c is None or callable(c):
        return c
    value = float(c)
    return lambda t, s: np.full_like(np.asarray(s, dtype=float), value)


@dataclass(frozen=True, eq=False)
class OperatorFamily:
    """Time-dependent coefficients of A(t,s,D) = D(a D) + a0 on (0,1).

    ``a=None`` switches the second-order part off (used for A = a0 and for
    the drift-free case A = 0).  ``w=None`` lets :func:`choose_shift` pick the
    shift.  ``autonomous`` marks time-constant coefficients so that operators
    can be shared across time nodes.
    """

    a: Optional[Coefficient] = None
    a0: Coefficient = 0.0
    mu: float = 1.0
    nu: float = 1.0
    kappa: float = 1.0
    w: Optional[float] = None
    autonomous: bool = False
    holder_const: Optional[float] = None
    name: str = "custom"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "a", _as_coefficient(self.a))
        object.__setattr__(self, "a0", _as_coefficient(self.a0))
        if not 0 < self.mu <= 1 or not 0 < self.nu <= 1:
            raise DomainError("Hoelder exponents mu, nu must lie in (0, 1]")
        if self.a is not None and not self.kappa > 0:
            raise DomainError("ellipticity floor kappa must be positive")

    @classmethod
    def constant(cls, a=1.0, a0=0.0, **kw) -> "OperatorFamily":
        kw.setdefault("kappa", a if a is not None and a > 0 else 1.0)
        kw.setdefault("name", f"constant(a={a}, a0={a0})")
        return cls(a=a, a0=a0, autonomous=True, **kw)

    @classmethod
    def zero(cls) -> "OperatorFamily":
        """A(t) = 0: the drift-free family."""
        return cls(a=None, a0=0.0, autonomous=True, name="zero")

    @property
    def kappa_mu_nu(self) -> float:
        return self.mu + self.nu - 1.0

    def operator(self, grid: SpaceGrid, t: float) -> "DiscreteOperator":
        key = (grid.n_cells, 0.0 if self.autonomous else float(t))
        op = self._cache.get(key)
        if op is None:
            op = self._cache.setdefault(key, assemble(self, grid, t))
        return op

    def check_holder(self, grid: SpaceGrid, times: Sequence[float]) -> float:
        """Largest sampled ratio sup_s |a(t,s)-a(r,s)| / |t-r|^mu."""
        if self.a is None:
            return 0.0
        s = grid.nodes
        vals = [self.a(t, s) for t in times]
        worst = 0.0
        for i in range(len(times)):
            for j in range(i + 1, len(times)):
                gap = abs(times[j] - times[i])
                if gap > 0:
                    worst = max(worst, float(np.max(np.abs(vals[j] - vals[i]))) / gap**self.mu)
        if self.holder_const is not None and worst > self.holder_const * (1 + 1e-12):
            raise DomainError(
                f"coefficient a is not {self.mu}-Hoelder with constant {self.holder_const} "
                f"(measured {worst:.4g})")
        return worst


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    matrix: np.ndarray
    t: float
    w: Optional[float]
    grid: SpaceGrid
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, x):
        v = x.values if isinstance(x, Field) else np.asarray(x, dtype=float)
        return v @ self.matrix.T

    def weighted_asymmetry(self) -> float:
        """||WA - (WA)^T|| / ||WA|| with W the trapezoidal weights."""
        wa = self.grid.weights[:, None] * self.matrix
        scale = np.linalg.norm(wa)
        return 0.0 if scale == 0 else float(np.linalg.norm(wa - wa.T) / scale)

    def adjoint_matrix(self) -> np.ndarray:
        """Matrix of A^* with respect to the trapezoidal inner product."""
        wts = self.grid.weights
        return (self.matrix.T * wts[None, :]) / wts[:, None]

    def weighted_norm(self, matrix=None) -> float:
        """Operator norm on discrete L^2 of ``matrix`` (default: this operator)."""
        m = self.matrix if matrix is None else matrix
        d = np.sqrt(self.grid.weights)
        return float(np.linalg.norm(d[:, None] * m / d[None, :], 2))

    def spectrum(self) -> "SpectralData":
        sd = self._cache.get("spectrum")
        if sd is None:
            sd = self._cache.setdefault("spectrum", spectrum(self))
        return sd


@dataclass(frozen=True, eq=False)
class SpectralData:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    inverse: np.ndarray
    condition: float
    symmetric: bool


def assemble(fam: OperatorFamily, grid: SpaceGrid, t: float) -> DiscreteOperator:
    """Conservative second-order stencil with ghost-node reflection at s=0, 1."""
    n = grid.n_nodes
    h = grid.h
    s = grid.nodes
    mat = np.zeros((n, n))
    if fam.a is not None:
        a_nodes = np.asarray(fam.a(t, s), dtype=float)
        bad = np.flatnonzero(~(a_nodes >= fam.kappa))
        if bad.size:
            i = int(bad[0])
            raise EllipticityError(
                f"ellipticity a(t,s) >= kappa={fam.kappa} violated at node {i} "
                f"(s={s[i]:.6g}, t={t:.6g}, a={a_nodes[i]:.6g})")
        a_mid = np.asarray(fam.a(t, (np.arange(n - 1) + 0.5) * h), dtype=float)
        if np.any(~(a_mid >= fam.kappa)):
            i = int(np.flatnonzero(~(a_mid >= fam.kappa))[0])
            raise EllipticityError(
                f"ellipticity a(t,s) >= kappa={fam.kappa} violated between nodes {i} and {i + 1}")
        left = np.concatenate([[a_mid[0]], a_mid])    # a_{i-1/2}, ghost reflected
        right = np.concatenate([a_mid, [a_mid[-1]]])  # a_{i+1/2}, ghost reflected
        idx = np.arange(n)
        mat[idx, idx] = -(left + right)
        mat[idx[:-1], idx[:-1] + 1] = right[:-1]
        mat[idx[1:], idx[1:] - 1] = left[1:]
        # ghost node f_{-1} = f_1 and f_{n+1} = f_{n-1}
        mat[0, 1] += left[0]
        mat[-1, -2] += right[-1]
        mat /= h * h
    a0 = np.asarray(fam.a0(t, s), dtype=float)
    mat[np.arange(n), np.arange(n)] += a0
    if not np.all(np.isfinite(mat)):
        raise DomainError("assembled operator has non-finite entries")
    return DiscreteOperator(mat, float(t), fam.w, grid)


def spectrum(op: DiscreteOperator) -> SpectralData:
    """Dense eigendecomposition, sorted by real part descending."""
    a = op.matrix
    if not np.all(np.isfinite(a)):
        raise DomainError("operator matrix is not finite")
    if op.weighted_asymmetry() <= SYMMETRY_TOL:
        d = np.sqrt(op.grid.weights)
        sym = d[:, None] * a / d[None, :]
        lam, q = np.linalg.eigh(0.5 * (sym + sym.T))
        order = np.argsort(-lam, kind="stable")
        lam, q = lam[order], q[:, order]
        vecs = q / d[:, None]
        inv = q.T * d[None, :]
        return SpectralData(lam, vecs, inv, 1.0, True)
    lam, vecs = np.linalg.eig(a)
    order = np.lexsort((-lam.imag, -lam.real))
    lam, vecs = lam[order], vecs[:, order]
    cond = float(np.linalg.cond(vecs))
    if not cond <= MAX_EIGVEC_COND:
        raise IllConditionedError(
            f"eigenvector matrix condition {cond:.3g} exceeds {MAX_EIGVEC_COND:.0e}; "
            "spectral calculus unreliable for this non-normal operator")
    return SpectralData(lam, vecs, np.linalg.inv(vecs), cond, False)


def _resolve_shift(op: DiscreteOperator, w) -> float:
    if w is None:
        w = op.w
    if w is None:
        w = shift_for([op])
    return float(w)


def frac_power(op: DiscreteOperator, theta: float, w: Optional[float] = None) -> DiscreteOperator:
    """(w - A)^theta through the eigendecomposition, for theta of either sign."""
    w = _resolve_shift(op, w)
    key = ("power", float(theta), w)
    cached = op._cache.get(key)
    if cached is not None:
        return cached
    if theta == 0:
        return op._cache.setdefault(key, DiscreteOperator(np.eye(op.n), op.t, w, op.grid))
    sd = op.spectrum()
    gap = w - sd.eigenvalues
    if np.any(~(gap.real > 0)):
        raise ShiftError(
            f"spectrum not strictly left of w={w}: max Re(lambda)={np.max(sd.eigenvalues.real):.6g}")
    if sd.symmetric:
        mat = (sd.eigenvectors * gap**theta) @ sd.inverse
    else:
        mat = (sd.eigenvectors * gap.astype(complex) ** theta) @ sd.inverse
        mat = mat.real
    return op._cache.setdefault(key, DiscreteOperator(mat, op.t, w, op.grid))


def interp_norm(op: DiscreteOperator, eta: float, w: Optional[float], x):
    """Discrete E_eta^t norm ||(w - A(t))^eta x||_{L^2}."""
    if not 0 <= eta <= 1:
        raise DomainError("interpolation index eta must lie in [0, 1]")
    v = x.values if isinstance(x, Field) else np.asarray(x, dtype=float)
    if eta == 0:
        return lp_norm(v, 2)
    return lp_norm(frac_power(op, eta, w)(v), 2)


def shift_for(ops: Sequence[DiscreteOperator]) -> float:
    """Smallest integer w with max Re(spectrum) <= w - 1 over the given operators."""
    top = max(float(np.max(op.spectrum().eigenvalues.real)) for op in ops)
    return float(math.ceil(top + 1 - 1e-9))


def choose_shift(fam: OperatorFamily, grid: SpaceGrid, times: Sequence[float]) -> float:
    if fam.w is not None:
        return float(fam.w)
    return shift_for([fam.operator(grid, t) for t in times])


@dataclass
class ATReport:
    kind: str
    K_est: Optional[float] = None
    L_est: Optional[float] = None
    w_used: float = 0.0
    phi: float = PROBE_ANGLE
    mu: float = 1.0
    nu: float = 1.0
    kappa_mu_nu: float = 1.0
    levels: dict = field(default_factory=dict)
    stability_ratio: float = float("nan")
    samples: list = field(default_factory=list)
    passed: bool = False
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        d["levels"] = {str(k): v for k, v in self.levels.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _sector_samples(centre: float, phi: float, moduli=PROBE_MODULI) -> list:
    out = []
    for r in moduli:
        for sign in (1, -1):
            out.append(centre + r * np.exp(sign * 1j * phi))
    return out


def _weighted_2norm(grid: SpaceGrid, m: np.ndarray) -> float:
    d = np.sqrt(grid.weights)
    return float(np.linalg.norm(d[:, None] * m / d[None, :], 2))


def _resolvent(op: DiscreteOperator, lam: complex, t: float, s=None) -> np.ndarray:
    shifted = lam * np.eye(op.n) - op.matrix
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu = sla.lu_factor(shifted, check_finite=True)
    except (sla.LinAlgError, ValueError) as exc:
        raise SingularResolventError(f"resolvent singular at lambda={lam}, t={t}, s={s}") from exc
    if np.any(np.abs(np.diag(lu[0])) < 1e-14 * max(1.0, np.max(np.abs(shifted)))):
        raise SingularResolventError(f"resolvent singular at lambda={lam}, t={t}, s={s}")
    return sla.lu_solve(lu, np.eye(op.n, dtype=complex))


def _stability(levels: dict) -> tuple:
    vals = [v for v in levels.values()]
    if any(not math.isfinite(v) for v in vals):
        return float("inf"), False
    hi, lo = max(vals), min(vals)
    if hi == 0:
        return 1.0, True
    ratio = hi / lo if lo > 0 else float("inf")
    return float(ratio), bool(ratio < 2.0)


def _refinement_grids(grid, refine: int):
    if isinstance(grid, SpaceGrid):
        return [grid, SpaceGrid(grid.n_cells * refine)]
    return list(grid)


def at1_probe(fam: OperatorFamily, grid, t_samples: Sequence[float], lam_samples=None, *,
              phi: float = PROBE_ANGLE, w: Optional[float] = None, refine: int = 2) -> ATReport:
    """Estimate K in ||R(lambda, A(t))|| <= K / (1 + |lambda - w|).

    ``grid`` may be one SpaceGrid (a second level refined by ``refine`` is
    added for the stability flag) or a sequence of grids.  Samples default
    to the rays arg(lambda - w) = +-phi at log-spaced moduli.
    """
    if not math.pi / 2 < phi <= math.pi:
        raise DomainError("sector angle phi must lie in (pi/2, pi]")
    grids = _refinement_grids(grid, refine)
    if w is None:
        w = max(choose_shift(fam, g, t_samples) for g in grids)
    lams = _sector_samples(w, phi) if lam_samples is None else [complex(x) for x in lam_samples]
    report = ATReport("AT1", w_used=w, phi=phi, mu=fam.mu, nu=fam.nu, kappa_mu_nu=fam.kappa_mu_nu)
    for level, g in enumerate(grids):
        k_max = 0.0
        for t in t_samples:
            op = fam.operator(g, t)
            for lam in lams:
                r = _resolvent(op, lam, t)
                value = _weighted_2norm(g, r) * (1 + abs(lam - w))
                k_max = max(k_max, value)
                if level == 0:
                    report.samples.append({"lambda_re": lam.real, "lambda_im": lam.imag,
                                           "t": float(t), "s": None, "value": value})
        report.levels[g.n_cells] = k_max
    report.K_est = report.levels[grids[0].n_cells]
    report.stability_ratio, report.passed = _stability(report.levels)
    if fam.mu <= 0.5:
        report.warnings.append("mu <= 1/2: model-problem coefficient hypothesis fails")
    return report


def default_time_pairs(T: float, n_levels: int = 5) -> list:
    """(s, t) pairs with dyadic separations T/2^j, anchored at 0 and at T."""
    pairs = []
    for j in range(1, n_levels + 1):
        gap = T / 2**j
        pairs.append((0.0, gap))
        pairs.append((T - gap, T))
    return pairs


def at2_lhs(op_t: DiscreteOperator, op_s: DiscreteOperator, lam: complex, w: float) -> float:
    """||A_w(t) R(lambda, A_w(t)) (A_w(t)^{-1} - A_w(s)^{-1})|| on discrete L^2."""
    n = op_t.n
    eye = np.eye(n)
    aw_t = op_t.matrix - w * eye
    aw_s = op_s.matrix - w * eye
    diff = np.linalg.solve(aw_t, eye) - np.linalg.solve(aw_s, eye)
    shifted = lam * eye - aw_t
    try:
        res_diff = np.linalg.solve(shifted, diff.astype(complex))
    except np.linalg.LinAlgError as exc:
        raise SingularResolventError(f"resolvent singular at lambda={lam}, t={op_t.t}, s={op_s.t}") from exc
    return _weighted_2norm(op_t.grid, aw_t @ res_diff)


def at2_probe(fam: OperatorFamily, grid, st_pairs: Sequence[tuple], lam_samples=None, *,
              phi: float = PROBE_ANGLE, w: Optional[float] = None, refine: int = 2) -> ATReport:
    """Estimate L in the commutator bound with (mu, nu) from the family metadata."""
    grids = _refinement_grids(grid, refine)
    times = sorted({x for pair in st_pairs for x in pair})
    if w is None:
        w = max(choose_shift(fam, g, times) for g in grids)
    lams = _sector_samples(0.0, phi) if lam_samples is None else [complex(x) for x in lam_samples]
    report = ATReport("AT2", w_used=w, phi=phi, mu=fam.mu, nu=fam.nu, kappa_mu_nu=fam.kappa_mu_nu)
    for level, g in enumerate(grids):
        l_max = 0.0
        for s, t in st_pairs:
            if s == t:
                raise DomainError("AT2 probe needs s != t")
            op_t, op_s = fam.operator(g, t), fam.operator(g, s)
            for lam in lams:
                lhs = at2_lhs(op_t, op_s, lam, w)
                value = lhs / (abs(t - s) ** fam.mu * (abs(lam) + 1) ** (-fam.nu))
                l_max = max(l_max, value)
                if level == 0:
                    report.samples.append({"lambda_re": lam.real, "lambda_im": lam.imag,
                                           "t": float(t), "s": float(s), "value": value})
        report.levels[g.n_cells] = l_max
    report.L_est = report.levels[grids[0].n_cells]
    report.stability_ratio, report.passed = _stability(report.levels)
    if fam.mu + fam.nu <= 1:
        report.warnings.append("mu + nu <= 1: (AT2) requires mu + nu > 1")
    if fam.mu <= 0.5:
        report.warnings.append("mu <= 1/2: model-problem coefficient hypothesis fails")
    return report
