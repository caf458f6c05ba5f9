"""Adaptive Hermite function systems on uniform sample grids.

The classical Hermite functions are evaluated with the normalized three-term
recurrence, so no factorials or raw Hermite polynomials appear and orders in
the hundreds stay finite.  The adaptive system translates by ``tau`` and
dilates by ``lam``::

    phi_k(t; tau, lam) = sqrt(lam) * phi_k(lam * (t - tau))

Derivatives with respect to (tau, lam) are exact, obtained from the identity
``phi_k' = sqrt(k/2) phi_{k-1} - sqrt((k+1)/2) phi_{k+1}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PI_QUARTER = np.pi ** -0.25
SUPPORT_GROWTH = 1.05
RANK_EPS = 2.0 ** -52


@dataclass(frozen=True)
class SampleGrid:
    """Uniformly spaced sample positions inside a sampling interval ``(a, b)``."""

    points: np.ndarray
    interval: tuple[float, float] = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("a sample grid needs at least two points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("grid points must be finite")
        diffs = np.diff(pts)
        if np.any(diffs <= 0):
            raise ValueError("grid points must be strictly increasing")
        h = (pts[-1] - pts[0]) / (pts.size - 1)
        tol = 1e-12 * max(h, float(np.abs(pts).max()))
        if np.max(np.abs(diffs - h)) > tol:
            raise ValueError("grid points must be uniformly spaced")
        interval = self.interval
        if interval is None:
            interval = (float(pts[0]), float(pts[-1]))
        a, b = float(interval[0]), float(interval[1])
        if not (a <= pts[0] and pts[-1] <= b):
            raise ValueError(f"interval ({a}, {b}) does not contain the grid")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "interval", (a, b))

    @classmethod
    def uniform(cls, m: int, a: float = 0.0, b: float | None = None) -> "SampleGrid":
        """``m`` equidistant points from ``a`` to ``b`` (default ``b = a + m - 1``, unit spacing)."""
        if m < 2:
            raise ValueError("a sample grid needs at least two points")
        if b is None:
            b = a + (m - 1)
        return cls(np.linspace(a, b, m), (a, b))

    @property
    def m(self) -> int:
        return self.points.size

    @property
    def spacing(self) -> float:
        return float((self.points[-1] - self.points[0]) / (self.points.size - 1))


@dataclass(frozen=True)
class VpParams:
    """Nonlinear parameters of the adaptive Hermite system.

    ``tau`` is the translation in grid units, ``lam`` the dilation in inverse
    grid units (``lambda`` is a Python keyword).
    """

    tau: float
    lam: float

    def __post_init__(self):
        if not (np.isfinite(self.tau) and np.isfinite(self.lam)):
            raise ValueError("VP parameters must be finite")
        if self.lam <= 0:
            raise ValueError(f"dilation must be positive, got {self.lam}")

    def as_array(self) -> np.ndarray:
        return np.array([self.tau, self.lam], dtype=float)

    @classmethod
    def from_array(cls, theta) -> "VpParams":
        return cls(float(theta[0]), float(theta[1]))


@dataclass(frozen=True)
class SampledBasis:
    """Sampled basis ``phi`` (m x n) with its parameter derivatives.

    ``dphi[0]`` is d/dtau and ``dphi[1]`` is d/dlam.
    """

    phi: np.ndarray
    dphi: tuple[np.ndarray, ...]
    params: VpParams
    grid: SampleGrid
    normalized: bool = False

    @property
    def n(self) -> int:
        return self.phi.shape[1]


def _hermite_table(s: np.ndarray, levels: int) -> np.ndarray:
    # columns 0..levels-1 of the orthonormal Hermite functions at s
    s = np.asarray(s, dtype=float)
    out = np.empty((s.size, levels))
    out[:, 0] = PI_QUARTER * np.exp(-0.5 * s * s)
    if levels > 1:
        out[:, 1] = np.sqrt(2.0) * s * out[:, 0]
    for k in range(1, levels - 1):
        out[:, k + 1] = s * np.sqrt(2.0 / (k + 1)) * out[:, k] - np.sqrt(k / (k + 1)) * out[:, k - 1]
    return out


def _points_of(grid) -> np.ndarray:
    if isinstance(grid, SampleGrid):
        return grid.points
    pts = np.asarray(grid, dtype=float)
    if pts.ndim != 1 or pts.size == 0:
        raise ValueError("expected a non-empty vector of sample points")
    return pts


def classical_hermite(grid, n: int) -> np.ndarray:
    """Orthonormal Hermite functions ``phi_0..phi_{n-1}`` at the grid points (m x n).

    ``grid`` may be a :class:`SampleGrid` or any 1-D array of positions.
    """
    if n < 1:
        raise ValueError("number of basis functions must be at least 1")
    return _hermite_table(_points_of(grid), n)


def adaptive_hermite(grid: SampleGrid, n: int, params: VpParams, normalize: bool = False) -> SampledBasis:
    """Translated/dilated Hermite system with analytic d/dtau and d/dlam.

    With ``normalize=True`` every column (and derivative) is multiplied by
    ``sqrt(h)``, h the grid spacing, so the discrete Gram matrix approximates
    the continuous one.  On unit-spacing grids both conventions coincide.
    """
    if n < 1:
        raise ValueError("number of basis functions must be at least 1")
    if not isinstance(params, VpParams):
        params = VpParams.from_array(params)
    t = grid.points
    tau, lam = params.tau, params.lam
    shifted = t - tau
    s = lam * shifted
    table = _hermite_table(s, n + 1)
    sq = np.sqrt(lam)
    phi = sq * table[:, :n]

    k = np.arange(n)
    prev = np.zeros_like(table[:, :n])
    prev[:, 1:] = table[:, : n - 1]
    dtable = np.sqrt(k / 2.0) * prev - np.sqrt((k + 1) / 2.0) * table[:, 1 : n + 1]

    d_tau = -lam * sq * dtable
    d_lam = table[:, :n] / (2.0 * sq) + sq * shifted[:, None] * dtable
    if normalize:
        w = np.sqrt(grid.spacing)
        phi, d_tau, d_lam = phi * w, d_tau * w, d_lam * w
    return SampledBasis(phi, (d_tau, d_lam), params, grid, normalize)


def support_radius(n: int) -> float:
    """Half-width of the effective support of ``phi_0..phi_{n-1}`` in dilated units.

    Three-sigma radius of the Gaussian envelope, grown by 1.05 per order.
    This is an empirical heuristic; it is adequate for the first few orders.
    """
    return 3.0 * SUPPORT_GROWTH ** max(n - 1, 0)


def orthogonality_radius(n: int) -> float:
    """Radius that keeps ``phi_0..phi_{n-1}`` discretely orthonormal for any order.

    The turning point ``sqrt(2n - 1)`` of the highest function plus the same
    three-unit tail allowance used for the Gaussian.
    """
    return math.sqrt(2 * max(n, 1) - 1) + 3.0


def feasible_region_check(params: VpParams, interval, radius: float = 3.0) -> bool:
    """True iff ``tau +- radius/lam`` lies inside ``interval``.

    The default radius 3 gives the standard feasible set; pass
    ``support_radius(n)`` for an order-aware check.
    """
    a, b = float(interval[0]), float(interval[1])
    if not a < b:
        raise ValueError("interval must satisfy a < b")
    if not isinstance(params, VpParams):
        params = VpParams.from_array(params)
    half = radius / params.lam
    return bool(params.tau + half <= b and params.tau - half >= a)


def condition_number(phi: np.ndarray) -> float:
    """sigma_max / sigma_min, or ``inf`` when ``phi`` is numerically rank deficient."""
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 2 or phi.size == 0:
        raise ValueError("condition number needs a non-empty matrix")
    sv = np.linalg.svd(phi, compute_uv=False)
    smax, smin = sv[0], sv[-1]
    if smax == 0:
        raise ValueError("condition number of the zero matrix is undefined")
    if phi.shape[0] < phi.shape[1] or smin < RANK_EPS * smax * max(phi.shape):
        return float("inf")
    return float(smax / smin)


def condition_sweep(
    grid: SampleGrid,
    n: int,
    tau_range: Sequence[float],
    lambda_range: Sequence[float],
) -> list[tuple[float, float, float]]:
    """Condition number of the adaptive basis over a (tau, lam) mesh, tau-major order."""
    taus = [float(v) for v in tau_range]
    lams = [float(v) for v in lambda_range]
    if not taus or not lams:
        raise ValueError("tau and lambda ranges must be non-empty")
    rows = []
    for tau in taus:
        for lam in lams:
            basis = adaptive_hermite(grid, n, VpParams(tau, lam))
            rows.append((tau, lam, condition_number(basis.phi)))
    return rows
