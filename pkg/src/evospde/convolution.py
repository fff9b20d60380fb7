"""Deterministic and stochastic convolutions against a discrete evolution family.

Every routine works on stacked inputs: arrays whose trailing two axes are
(time node, space node) and whose leading axes index ensemble members.
Integrands are frozen at the left endpoint of each time cell.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.special import gamma as gamma_fn

from .errors import ContractViolationError, DomainError
from .evolution import EvolutionFamily
from .mesh import Path, lp_norm, write_csv
from .noise import WienerPath


@dataclass
class ConvolutionResult:
    """Convolution values of shape (..., m+1, n_nodes); entry 0 in time is zero."""

    values: np.ndarray
    ef: EvolutionFamily = field(repr=False)
    method: str = "direct"
    alpha: Optional[float] = None
    quadrature: dict = field(default_factory=dict)

    @property
    def path(self) -> Path:
        if self.values.ndim != 2:
            raise DomainError("result holds an ensemble; use member(i)")
        return Path(self.values, self.ef.grid, self.ef.tgrid, {"method": self.method})

    def member(self, i: int) -> Path:
        return Path(self.values[i], self.ef.grid, self.ef.tgrid, {"method": self.method})

    def metadata(self) -> dict:
        return {"method": self.method, "alpha": self.alpha, "quadrature": self.quadrature}

    def to_csv(self, stem) -> None:
        """Write ``stem``.csv (single path) and the ``stem``.json sidecar."""
        write_csv(f"{stem}.csv", self.ef.tgrid.times, self.path.values)
        with open(f"{stem}.json", "w") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)


def _path_values(x) -> np.ndarray:
    return x.values if isinstance(x, Path) else np.asarray(x, dtype=float)


def _apply_power(ef: EvolutionFamily, d: np.ndarray, theta: float) -> np.ndarray:
    """Multiply the k-th time slice of ``d`` by (w - A(t_k))^theta."""
    if theta == 0:
        return d
    out = np.empty_like(d)
    for k in range(d.shape[-2]):
        out[..., k, :] = d[..., k, :] @ ef.power(k, theta).T
    return out


def accumulate(ef: EvolutionFamily, d: np.ndarray, endpoint: str = "left") -> np.ndarray:
    """Z_l = sum_{k<l} P(t_l, t_k) d_k (``endpoint="left"``) or P(t_l, t_{k+1}) d_k.

    ``d`` has shape (..., m, n_nodes); the result has shape (..., m+1, n_nodes).
    """
    if endpoint not in ("left", "right"):
        raise DomainError("endpoint must be 'left' or 'right'")
    m = ef.tgrid.m_steps
    if d.shape[-2] < m:
        raise DomainError(f"integrand has {d.shape[-2]} time slices, need {m}")
    out = np.zeros(d.shape[:-2] + (m + 1, d.shape[-1]))
    z = out[..., 0, :].copy()
    for l in range(m):
        g = ef.propagator(l)
        if endpoint == "left":
            z = (z + d[..., l, :]) @ g.T
        else:
            z = z @ g.T + d[..., l, :]
        out[..., l + 1, :] = z
    return out


def kernel_accumulate(ef: EvolutionFamily, d: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Z_l = sum_{k<l} weights[l-k] P(t_l, t_k) d_k for a lag-dependent kernel.

    All pending contributions P(t_l, t_k) d_k are propagated together, so the
    cost is quadratic in the number of steps.
    """
    m = ef.tgrid.m_steps
    lead = d.shape[:-2]
    n = d.shape[-1]
    out = np.zeros(lead + (m + 1, n))
    pending = np.zeros(lead + (m, n))
    for l in range(m):
        pending[..., l, :] = d[..., l, :]
        g = ef.propagator(l)
        pending[..., : l + 1, :] = pending[..., : l + 1, :] @ g.T
        lags = weights[l + 1: 0: -1]  # weights[l+1-k] for k = 0..l
        out[..., l + 1, :] = np.einsum("k,...kn->...n", lags, pending[..., : l + 1, :])
    return out


def _check_theta(theta: float, ef: EvolutionFamily, cap: float, label: str) -> None:
    if theta >= 1:
        raise DomainError(f"{label} = {theta} must be < 1")
    if not 0 <= theta < min(ef.fam.mu, cap):
        raise DomainError(f"{label} = {theta} must lie in [0, {min(ef.fam.mu, cap)})")


def det_convolve(ef: EvolutionFamily, phi, theta_F: float = 0.0) -> ConvolutionResult:
    """Left-rectangle P*phi with the positive power (w - A)^theta_F applied to the input.

    ``phi`` holds the extrapolated integrand psi = (w - A)^{-theta_F} phi
    at the time nodes.
    """
    _check_theta(theta_F, ef, 1.0, "theta_F")
    psi = _path_values(phi)
    d = ef.tgrid.dt * _apply_power(ef, psi[..., : ef.tgrid.m_steps, :], theta_F)
    return ConvolutionResult(accumulate(ef, d), ef, "direct", None,
                             {"rule": "left-rectangle", "theta": theta_F})


def _increments(dW) -> np.ndarray:
    return dW.increments if isinstance(dW, WienerPath) else np.asarray(dW, dtype=float)


def noise_integrand(Phi, dW, m_steps: int) -> np.ndarray:
    """Per-cell vectors sum_n Phi_k[n] dW_n(t_k), shape (..., m, n_nodes).

    ``Phi`` is either constant columns (N, n_nodes) or per-node columns
    (..., m or m+1, N, n_nodes); ``dW`` has shape (..., N, m).
    """
    Phi = np.asarray(Phi, dtype=float)
    dW = _increments(dW)
    if dW.shape[-1] != m_steps:
        raise DomainError(f"Wiener path has {dW.shape[-1]} steps, grid has {m_steps}")
    if Phi.ndim == 2:
        if Phi.shape[0] != dW.shape[-2]:
            raise DomainError("number of operator columns differs from the number of noise modes")
        return np.swapaxes(dW, -1, -2) @ Phi
    return np.einsum("...nk,...kni->...ki", dW, Phi[..., :m_steps, :, :])


def stoch_convolve(ef: EvolutionFamily, Phi, W, theta_B: float = 0.0, *,
                   adapted: bool = True, endpoint: str = "left") -> ConvolutionResult:
    """Left-point Ito sum of P(t_l, t_k)(w - A(t_k))^theta_B Psi_k dW_k over k < l.

    ``endpoint="right"`` uses P(t_l, t_{k+1}) instead, which differs at O(dt).
    """
    if not adapted:
        raise ContractViolationError("stochastic convolution needs an adapted integrand")
    _check_theta(theta_B, ef, 0.5, "theta_B")
    d = _apply_power(ef, noise_integrand(Phi, W, ef.tgrid.m_steps), theta_B)
    return ConvolutionResult(accumulate(ef, d, endpoint), ef, "direct", None,
                             {"rule": "ito-left", "endpoint": endpoint, "theta": theta_B})


def zeta_weights(m: int, dt: float, alpha: float) -> np.ndarray:
    """weights[j] = (j dt)^{-alpha} / Gamma(1-alpha) for lags j >= 1 (weights[0] unused)."""
    lags = np.arange(m + 1, dtype=float)
    w = np.zeros(m + 1)
    w[1:] = (lags[1:] * dt) ** (-alpha) / gamma_fn(1.0 - alpha)
    return w


def r_weights(m: int, dt: float, alpha: float) -> np.ndarray:
    """Exact cell integrals of (t_l - s)^{alpha-1}/Gamma(alpha) for lag j = l - k."""
    lags = np.arange(m + 1, dtype=float)
    w = np.zeros(m + 1)
    w[1:] = dt**alpha * (lags[1:] ** alpha - lags[:-1] ** alpha) / gamma_fn(alpha + 1.0)
    return w


def zeta_alpha(ef: EvolutionFamily, Phi, W, alpha: float, theta_B: float = 0.0) -> ConvolutionResult:
    """Singular-kernel Ito sum with weights (t_l - t_k)^{-alpha}/Gamma(1-alpha), k < l."""
    _check_theta(theta_B, ef, 0.5, "theta_B")
    if not 0 < alpha < 0.5 - theta_B:
        raise DomainError(f"alpha = {alpha} must lie in (0, 1/2 - theta_B) = (0, {0.5 - theta_B})")
    d = _apply_power(ef, noise_integrand(Phi, W, ef.tgrid.m_steps), theta_B)
    w = zeta_weights(ef.tgrid.m_steps, ef.tgrid.dt, alpha)
    return ConvolutionResult(kernel_accumulate(ef, d, w), ef, "zeta", alpha,
                             {"rule": "ito-left-singular", "theta": theta_B})


def r_alpha(ef: EvolutionFamily, f, alpha: float) -> ConvolutionResult:
    """Product-rectangle R_alpha f with exact kernel weights per cell."""
    if not 0 < alpha <= 1:
        raise DomainError(f"alpha = {alpha} must lie in (0, 1]")
    v = _path_values(f)
    w = r_weights(ef.tgrid.m_steps, ef.tgrid.dt, alpha)
    vals = kernel_accumulate(ef, v[..., : ef.tgrid.m_steps, :], w)
    return ConvolutionResult(vals, ef, "factorized", alpha, {"rule": "product-rectangle"})


def relative_defect(a: np.ndarray, b: np.ndarray) -> float:
    """max_t ||a - b|| / max_t ||a||, with ||.|| the L^2(Omega; L^2) norm over members.

    Leading axes of ``a`` and ``b`` index ensemble members; for a single
    path this is the plain pathwise ratio of node maxima.  Returns 0 when
    both sides vanish.
    """
    diff = lp_norm(a - b, 2) ** 2
    ref = lp_norm(a, 2) ** 2
    if diff.ndim > 1:
        diff = diff.reshape(-1, diff.shape[-1]).mean(axis=0)
        ref = ref.reshape(-1, ref.shape[-1]).mean(axis=0)
    num, den = math.sqrt(float(np.max(diff))), math.sqrt(float(np.max(ref)))
    if den == 0:
        return 0.0 if num == 0 else math.inf
    return num / den


def factorization_defect(ef: EvolutionFamily, Phi, W, alpha: float, theta_B: float = 0.0) -> float:
    """Gap between P<>Phi and R_alpha(zeta_alpha) computed on shared Wiener paths.

    Stacked Wiener increments (M, N, m) are compared member by member and
    aggregated in mean square before taking the maximum over time nodes.
    """
    direct = stoch_convolve(ef, Phi, W, theta_B).values
    fact = r_alpha(ef, zeta_alpha(ef, Phi, W, alpha, theta_B).values, alpha).values
    return relative_defect(direct, fact)


def _half_power_norms_sq(ef: EvolutionFamily, values: np.ndarray, w: Optional[float]) -> np.ndarray:
    from .elliptic import frac_power

    m = ef.tgrid.m_steps
    out = np.zeros(values.shape[:-2] + (m + 1,))
    for k in range(1, m + 1):
        root = frac_power(ef.operator_at(k), 0.5, ef.w if w is None else w).matrix
        out[..., k] = lp_norm(values[..., k, :] @ root.T, 2) ** 2
    return out


def max_reg_functional(ef: EvolutionFamily, conv, w: Optional[float] = None) -> float:
    """Ensemble mean of the right-rectangle integral of ||(w - A(t))^{1/2} conv(t)||_2^2."""
    vals = conv.values if isinstance(conv, ConvolutionResult) else _path_values(conv)
    sq = _half_power_norms_sq(ef, vals, w)
    per_member = ef.tgrid.dt * sq[..., 1:].sum(axis=-1)
    return float(np.mean(per_member))


def max_reg_rhs(ef: EvolutionFamily, Phi) -> float:
    """Left-rectangle integral of ||Phi(t)||_HS^2 (ensemble mean for stacked input)."""
    Phi = np.asarray(Phi, dtype=float)
    m = ef.tgrid.m_steps
    if Phi.ndim == 2:
        return float(m * ef.tgrid.dt * np.sum(lp_norm(Phi, 2) ** 2))
    hs = np.sum(lp_norm(Phi[..., :m, :, :], 2) ** 2, axis=-1)
    return float(np.mean(ef.tgrid.dt * hs.sum(axis=-1)))


def square_function_integral(op, x, w: float = 0.0, rtol: float = 1e-10) -> dict:
    """int_0^inf ||(-B)^{1/2} e^{tB} x||_2^2 dt for B = A - w, by adaptive quadrature.

    B must be self-adjoint in the weighted inner product and negative definite.
    The integrand is a sum of decaying exponentials in the orthonormal
    eigenbasis; quadrature runs over log-spaced panels up to a horizon at
    which the slowest mode has decayed below machine precision.
    """
    spec = op.spectrum()
    if not spec.symmetric:
        raise DomainError("square-function integral needs a self-adjoint operator")
    lam = np.real(spec.eigenvalues) - w
    if np.max(lam) >= 0:
        raise DomainError("square-function integral needs a negative definite operator")
    xv = np.asarray(getattr(x, "values", x), dtype=float)
    coeff = spec.inverse @ xv
    c2 = np.real(coeff * np.conj(coeff))
    rate = -lam

    def integrand(t):
        return float(np.sum(rate * np.exp(-2.0 * rate * t) * c2))

    t_lo = 1e-3 / np.max(rate)
    t_hi = 40.0 / np.min(rate)
    edges = np.geomspace(t_lo, t_hi, int(np.ceil(np.log2(t_hi / t_lo))) + 1)
    total = float(np.sum(c2 * (1.0 - np.exp(-2.0 * rate * t_lo)) / 2.0))  # first panel in closed form
    for a, b in zip(edges[:-1], edges[1:]):
        total += integrate.quad(integrand, a, b, epsabs=0.0, epsrel=rtol, limit=200)[0]
    nx2 = float(lp_norm(xv, 2) ** 2)
    ratio = total / nx2 if nx2 > 0 else math.nan
    return {"value": total, "norm_sq": nx2, "ratio": ratio,
            "constant": math.sqrt(ratio) if nx2 > 0 else math.nan, "horizon": t_hi}
