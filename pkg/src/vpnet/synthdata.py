"""Synthetic three-class Hermite dataset.

Each sample is ``x = phi(tau_i, lam_i) @ c / scale_i`` on the grid
``0..m-1``.  The first three coefficients lie on one of three concentric
spherical shells (the class); the remaining ``n_gen - 3`` coefficients are
nuisance terms that absorb the energy left over by the shell point, so every
coefficient vector has norm ``energy`` before Gaussian perturbation.  The
signal is then rescaled to unit norm and the scale is kept in the metadata.
``(tau_i, lam_i)`` are jittered around their means and redrawn until they
fall in the feasible region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import LabeledDataset
from .errors import ConfigError
from .hermite import SampleGrid, VpParams, _hermite_table, adaptive_hermite, feasible_region_check

TRAIN, TEST = 0, 1
MAX_REDRAWS = 1000


@dataclass(frozen=True)
class SynthConfig:
    samples_per_class: int = 5000
    m: int = 100
    n_gen: int = 5
    shell_radii: tuple[float, ...] = (1.0, 2.0, 3.0)
    shell_thickness: float = 0.2
    energy: float = 3.5
    nuisance_std: float = 0.1
    tau_mean: float | None = None
    tau_std: float | None = None
    lambda_mean: float | None = None
    lambda_std: float | None = None
    seed: int = 0

    def __post_init__(self):
        m = self.m
        defaults = {
            "tau_mean": m / 2.0,
            "tau_std": m / 200.0,
            "lambda_mean": 12.0 / m,
        }
        for k, v in defaults.items():
            if getattr(self, k) is None:
                object.__setattr__(self, k, v)
        if self.lambda_std is None:
            object.__setattr__(self, "lambda_std", self.lambda_mean / 50.0)
        object.__setattr__(self, "shell_radii", tuple(float(r) for r in self.shell_radii))
        self.validate()

    def validate(self):
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be at least 1")
        if self.m < 2:
            raise ConfigError("signal length m must be at least 2")
        if self.n_gen < 3:
            raise ConfigError("n_gen must be at least 3 (three shell coordinates)")
        radii, th = self.shell_radii, self.shell_thickness
        if len(radii) < 2:
            raise ConfigError("need at least two shells")
        if th < 0 or min(radii) <= th:
            raise ConfigError("shell radii must exceed the thickness, which must be non-negative")
        if list(radii) != sorted(radii):
            raise ConfigError("shell radii must be sorted ascending")
        for lo, hi in zip(radii, radii[1:]):
            if (hi - th) - (lo + th) <= 2 * th:
                raise ConfigError(f"shells at {lo} and {hi} are not separated by more than twice the thickness")
        if self.energy < radii[-1] + th:
            raise ConfigError("energy must be at least the outer shell radius plus thickness")
        if self.nuisance_std < 0 or self.tau_std < 0 or self.lambda_std < 0:
            raise ConfigError("standard deviations must be non-negative")
        if self.lambda_mean <= 0:
            raise ConfigError("lambda_mean must be positive")
        if not feasible_region_check(VpParams(self.tau_mean, self.lambda_mean), self.interval):
            raise ConfigError("mean (tau, lambda) lies outside the feasible region")

    @property
    def interval(self) -> tuple[float, float]:
        return (0.0, float(self.m - 1))

    @property
    def classes(self) -> int:
        return len(self.shell_radii)


def shell_point(radius: float, thickness: float, rng: np.random.Generator) -> np.ndarray:
    """Point uniform in direction on the sphere, radius uniform in ``radius +- thickness``."""
    if radius <= thickness:
        raise ValueError("shell radius must exceed its thickness")
    u = rng.standard_normal(3)
    u /= np.linalg.norm(u)
    return rng.uniform(radius - thickness, radius + thickness) * u


def _draw_params(cfg: SynthConfig, rng: np.random.Generator) -> VpParams:
    for _ in range(MAX_REDRAWS):
        tau = rng.normal(cfg.tau_mean, cfg.tau_std)
        lam = rng.normal(cfg.lambda_mean, cfg.lambda_std)
        if lam > 0 and feasible_region_check(VpParams(tau, lam), cfg.interval):
            return VpParams(tau, lam)
    raise ConfigError("parameter jitter too large: cannot draw feasible (tau, lambda)")


def coefficients_for(cfg: SynthConfig, k: int, rng: np.random.Generator) -> np.ndarray:
    shell = shell_point(cfg.shell_radii[k], cfg.shell_thickness, rng)
    extra = cfg.n_gen - 3
    rest = np.sqrt(max(cfg.energy ** 2 - shell @ shell, 0.0))
    direction = rng.standard_normal(extra)
    direction /= np.linalg.norm(direction)
    nuisance = rest * direction + cfg.nuisance_std * rng.standard_normal(extra)
    return np.concatenate([shell, nuisance])


def generate_split(cfg: SynthConfig, split: int) -> LabeledDataset:
    """One split; each class has its own stream derived from (seed, split, class)."""
    grid = SampleGrid.uniform(cfg.m, *cfg.interval)
    n_total = cfg.samples_per_class * cfg.classes
    labels = np.repeat(np.arange(cfg.classes), cfg.samples_per_class)
    coefs = np.empty((n_total, cfg.n_gen))
    theta = np.empty((n_total, 2))
    row = 0
    for k in range(cfg.classes):
        rng = np.random.default_rng([cfg.seed, split, k])
        for _ in range(cfg.samples_per_class):
            coefs[row] = coefficients_for(cfg, k, rng)
            params = _draw_params(cfg, rng)
            theta[row] = params.tau, params.lam
            row += 1
    signals = synthesize(grid, theta, coefs)
    scale = np.linalg.norm(signals, axis=1)
    signals /= scale[:, None]
    metadata = {"class": labels.copy(), "tau": theta[:, 0].copy(), "lambda": theta[:, 1].copy(), "scale": scale}
    ds = LabeledDataset(signals, labels, cfg.classes, metadata)
    ds.metadata["coefficients"] = coefs
    return ds


def synthesize(grid: SampleGrid, theta: np.ndarray, coefs: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Rows ``phi(tau_i, lam_i) @ c_i`` for many parameter pairs at once."""
    theta = np.atleast_2d(theta)
    coefs = np.atleast_2d(coefs)
    n = coefs.shape[1]
    out = np.empty((theta.shape[0], grid.m))
    for start in range(0, theta.shape[0], chunk):
        tau, lam = theta[start : start + chunk, 0], theta[start : start + chunk, 1]
        s = lam[:, None] * (grid.points[None, :] - tau[:, None])
        table = _hermite_table(s.ravel(), n).reshape(s.shape + (n,))
        out[start : start + chunk] = np.sqrt(lam)[:, None] * np.einsum("imk,ik->im", table, coefs[start : start + chunk])
    return out


def generate(cfg: SynthConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """(train, test) with independent random streams."""
    return generate_split(cfg, TRAIN), generate_split(cfg, TEST)


def meta_columns(ds: LabeledDataset) -> dict:
    """Metadata columns written to ``meta.csv`` (class, tau, lambda, scale)."""
    return {k: ds.metadata[k] for k in ("class", "tau", "lambda", "scale")}


def nearest_shell_accuracy(ds: LabeledDataset, cfg: SynthConfig, n: int | None = None) -> float:
    """Classify by the radius of the first three recovered coefficients at the mean parameters.

    The stored per-sample scale undoes the amplitude normalization.
    """
    from . import vp

    grid = SampleGrid.uniform(cfg.m, *cfg.interval)
    basis = adaptive_hermite(grid, n or cfg.n_gen, VpParams(cfg.tau_mean, cfg.lambda_mean))
    c = vp.coefficients(ds.signals, vp.pseudoinverse(basis.phi))
    radius = np.linalg.norm(c[:, :3], axis=1) * ds.metadata["scale"]
    pred = np.argmin(np.abs(radius[:, None] - np.array(cfg.shell_radii)[None, :]), axis=1)
    return float(np.mean(pred == ds.labels))
