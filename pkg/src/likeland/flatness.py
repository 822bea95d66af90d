"""Per-sample (phi) and dataset (Phi) flatness of the likelihood landscape.

phi(x) averages the approximate mass score over every grid point of
``n_planes`` random planes around ``x``; dividing by the grid size as well
as the plane count keeps the value independent of grid resolution. Phi is
the mean of phi over a dataset. Both are <= 0; closer to 0 is flatter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .landscape import GridSpec, random_plane
from .likelihood import _as_batch, ams_score


@dataclass
class FlatnessReport:
    per_sample_phi: list
    Phi: float
    n_planes: int
    grid_spec: GridSpec
    sample_count: int
    seed: int = 0
    model_checksum: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "phi_per_sample": [float(v) for v in self.per_sample_phi],
            "Phi": float(self.Phi),
            "n_planes": self.n_planes,
            "grid": self.grid_spec.to_dict(),
            "seed": self.seed,
            "sample_count": self.sample_count,
            "model_checksum": self.model_checksum,
        }


def neighborhood_points(x, n_planes: int, grid: GridSpec, seed=0) -> np.ndarray:
    """Every grid point of ``n_planes`` random planes around ``x``, stacked."""
    rng = np.random.default_rng(seed)
    pts = [random_plane(x, grid.eps_max, grid.resolution, rng).points() for _ in range(n_planes)]
    return np.concatenate([p.reshape((-1,) + np.shape(x)) for p in pts])


def phi_flatness(model, x, n_planes: int = 1, grid_spec: GridSpec | None = None, seed=0) -> float:
    grid = grid_spec or GridSpec()
    if n_planes < 1:
        raise ConfigError("phi needs n_planes >= 1")
    if grid.n_points < 1:
        raise ConfigError("phi needs a nonempty grid")
    batch, single = _as_batch(model, x)
    if not single:
        raise InputError("phi_flatness takes one sample")
    x = batch[0]
    if grid.resolution == 0:
        return float(ams_score(model, x))
    scores = ams_score(model, neighborhood_points(x, n_planes, grid, seed))
    return float(np.mean(scores))


def sample_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def dataset_flatness(model, samples, n_planes: int = 1, grid_spec: GridSpec | None = None, seed: int = 0) -> FlatnessReport:
    """Phi over a dataset, with one independent seed per sample."""
    inputs = getattr(samples, "inputs", samples)
    if len(inputs) == 0:
        raise InputError("flatness needs a nonempty dataset")
    grid = grid_spec or GridSpec()
    seeds = sample_seeds(seed, len(inputs))
    phis = [phi_flatness(model, x, n_planes, grid, s) for x, s in zip(inputs, seeds)]
    checksum = model.checksum() if hasattr(model, "checksum") else ""
    return FlatnessReport(phis, float(np.mean(phis)), n_planes, grid, len(phis), seed, checksum)
