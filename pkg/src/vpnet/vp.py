"""Variable projection operators built on the SVD pseudoinverse.

For a basis matrix ``phi`` (m x n) the linear least-squares coefficients of a
signal ``x`` are ``pinv @ x``, its projection is ``phi @ pinv @ x`` and the VP
functional is the squared residual norm.  Derivatives with respect to one
scalar nonlinear parameter take the basis derivative ``dphi`` (m x n) and
assume the rank of ``phi`` is locally constant.

Signals may be passed as a single vector (m,) or a batch (N, m); batched
results are returned row-wise.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DivergenceError
from .hermite import RANK_EPS, SampledBasis, VpParams

log = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-10


@dataclass(frozen=True)
class PinvBundle:
    phi: np.ndarray
    pinv: np.ndarray
    rank: int
    singular_values: np.ndarray
    orthonormal: bool = False

    @property
    def shape(self):
        return self.phi.shape


def pseudoinverse(phi: np.ndarray, orthonormal_tol: float | None = ORTHONORMAL_TOL) -> PinvBundle:
    """Moore-Penrose pseudoinverse of ``phi`` via SVD.

    When ``orthonormal_tol`` is set and ``||phi^T phi - I||_F`` is below it, the
    transpose is used directly and the SVD is skipped.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 2 or phi.size == 0:
        raise ValueError("pseudoinverse needs a non-empty matrix")
    m, n = phi.shape
    if m < n:
        raise ValueError(f"expected a tall matrix, got {m} x {n}")
    if not np.all(np.isfinite(phi)):
        raise ValueError("basis matrix has non-finite entries")
    if orthonormal_tol is not None:
        gram = phi.T @ phi
        gram[np.diag_indices(n)] -= 1.0
        if np.linalg.norm(gram) <= orthonormal_tol:
            return PinvBundle(phi, phi.T.copy(), n, np.ones(n), True)
    u, sv, vt = np.linalg.svd(phi, full_matrices=False)
    keep = sv >= RANK_EPS * sv[0] * max(m, n) if sv[0] > 0 else np.zeros(n, dtype=bool)
    rank = int(np.count_nonzero(keep))
    inv_s = np.zeros_like(sv)
    inv_s[keep] = 1.0 / sv[keep]
    pinv = (vt.T * inv_s) @ u.T
    return PinvBundle(phi, pinv, rank, sv, False)


def _check_signal(x, bundle: PinvBundle) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != bundle.phi.shape[0]:
        raise ValueError(f"signal length {x.shape[-1] if x.ndim else 0} does not match basis rows {bundle.phi.shape[0]}")
    return x


def _check_dphi(bundle: PinvBundle, dphi) -> np.ndarray:
    dphi = np.asarray(dphi, dtype=float)
    if dphi.shape != bundle.phi.shape:
        raise ValueError(f"derivative shape {dphi.shape} does not match basis {bundle.phi.shape}")
    return dphi


def coefficients(x, bundle: PinvBundle) -> np.ndarray:
    x = _check_signal(x, bundle)
    return x @ bundle.pinv.T


def project(x, bundle: PinvBundle) -> np.ndarray:
    x = _check_signal(x, bundle)
    return (x @ bundle.pinv.T) @ bundle.phi.T


def residual_r2(x, bundle: PinvBundle):
    """Squared norm of the part of ``x`` outside the column span."""
    x = _check_signal(x, bundle)
    r = x - project(x, bundle)
    return np.sum(r * r, axis=-1)


def d_projection(bundle: PinvBundle, dphi) -> np.ndarray:
    """Derivative of the projector ``phi pinv`` (m x m, symmetric)."""
    dphi = _check_dphi(bundle, dphi)
    phi, pinv = bundle.phi, bundle.pinv
    a = dphi @ pinv
    a -= phi @ (pinv @ a)
    return a + a.T


def d_pinv(bundle: PinvBundle, dphi) -> np.ndarray:
    """Derivative of the pseudoinverse (n x m)."""
    dphi = _check_dphi(bundle, dphi)
    phi, pinv = bundle.phi, bundle.pinv
    dphi_t = dphi.T
    # (I - phi pinv) applied from the right to dphi^T, and (I - pinv phi) from the left
    right = dphi_t - (dphi_t @ phi) @ pinv
    left_proj = np.eye(phi.shape[1]) - pinv @ phi
    out = -pinv @ dphi @ pinv
    out += (pinv @ pinv.T) @ right
    out += ((left_proj @ dphi_t) @ pinv.T) @ pinv
    return out


def d_r2(x, bundle: PinvBundle, dphi):
    """Derivative of ``residual_r2`` w.r.t. one parameter: ``-2 x^T (I - P) dphi pinv x``."""
    x = _check_signal(x, bundle)
    dphi = _check_dphi(bundle, dphi)
    c = x @ bundle.pinv.T
    resid = x - c @ bundle.phi.T
    return -2.0 * np.sum(resid * (c @ dphi.T), axis=-1)


def relative_r2(x, bundle: PinvBundle):
    """``r2(x) / ||x||^2``; zero-energy rows yield nan."""
    x = _check_signal(x, bundle)
    energy = np.sum(x * x, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return residual_r2(x, bundle) / energy


def _mean_relative_r2(x: np.ndarray, basis: SampledBasis):
    bundle = pseudoinverse(basis.phi)
    energy = np.sum(x * x, axis=1)
    value = np.mean(residual_r2(x, bundle) / energy)
    grad = np.array([np.mean(d_r2(x, bundle, d) / energy) for d in basis.dphi])
    return value, grad, bundle.rank


def vp_fit(
    x,
    basis_builder: Callable[[VpParams], SampledBasis],
    theta0: VpParams,
    steps: int = 200,
    step_size: float = 1e-2,
    interval: tuple[float, float] | None = None,
    max_halvings: int = 20,
) -> VpParams:
    """Fit (tau, lam) by safeguarded gradient descent on mean ``r2 / ||x||^2``.

    The descent runs in coordinates scaled by the interval length L
    (``tau / L`` and ``lam * L``) so both parameters move at comparable rates.
    A trial step is halved until the objective decreases; if it never does
    within ``max_halvings`` the current estimate is returned.  ``lam`` is kept
    at or above ``6 / L`` so that the feasible region stays non-empty.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    energy = np.sum(x * x, axis=1)
    if np.any(energy == 0):
        raise ValueError("vp_fit needs signals with non-zero energy")
    if not isinstance(theta0, VpParams):
        theta0 = VpParams.from_array(theta0)
    if steps <= 0:
        return theta0
    if interval is None:
        interval = basis_builder(theta0).grid.interval
    length = float(interval[1] - interval[0])
    lam_min = 6.0 / length
    scale = np.array([length * length, 1.0 / (length * length)])

    theta = theta0.as_array()
    theta[1] = max(theta[1], lam_min)
    value, grad, rank = _mean_relative_r2(x, basis_builder(VpParams.from_array(theta)))
    for it in range(steps):
        if not np.all(np.isfinite(grad)) or not np.isfinite(value):
            raise DivergenceError(f"non-finite VP objective gradient at iteration {it}", iteration=it)
        step = step_size
        accepted = False
        for _ in range(max_halvings + 1):
            trial = theta - step * scale * grad
            trial[1] = max(trial[1], lam_min)
            t_value, t_grad, t_rank = _mean_relative_r2(x, basis_builder(VpParams.from_array(trial)))
            if np.isfinite(t_value) and t_value < value:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            log.debug("vp_fit stalled after %d iterations (objective %.6g)", it, value)
            break
        if t_rank != rank:
            warnings.warn(f"basis rank changed from {rank} to {t_rank} during vp_fit", RuntimeWarning)
        theta, value, grad, rank = trial, t_value, t_grad, t_rank
    return VpParams.from_array(theta)
