"""Relative likelihood landscapes over 2-D perturbation planes.

A plane around a sample ``x`` is spanned by two orthogonal signed
directions of equal norm; each grid point ``x + e1 * d + e2 * d_perp`` is
scored by its log-likelihood relative to ``x``. Points are deliberately not
clipped to the input box, which would fold the plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from .attacks import loss_input_gradient
from .errors import ConfigError, InputError, NumericError
from .likelihood import _as_batch, log_likelihoods

DEFAULT_EPS_MAX = 8 / 255
DEFAULT_RESOLUTION = 10
_MAX_REDRAWS = 100


@dataclass(frozen=True)
class GridSpec:
    """Uniform (2 * resolution + 1)^2 grid over [-eps_max, eps_max]^2."""

    eps_max: float = DEFAULT_EPS_MAX
    resolution: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        if self.resolution < 0:
            raise ConfigError("grid resolution must be >= 0")
        if self.resolution > 0 and not self.eps_max > 0:
            raise ConfigError("eps_max must be positive")

    @property
    def axis(self) -> np.ndarray:
        # i / r * eps keeps the centre at exactly 0, the ends at exactly +-eps
        if self.resolution == 0:
            return np.zeros(1)
        r = self.resolution
        return np.arange(-r, r + 1) / r * self.eps_max

    @property
    def n_points(self) -> int:
        return (2 * self.resolution + 1) ** 2

    def to_dict(self) -> dict:
        return {"eps_max": self.eps_max, "resolution": self.resolution}


@dataclass
class LandscapePlane:
    center: np.ndarray
    d: np.ndarray
    d_perp: np.ndarray
    axis: np.ndarray
    direction_kind: str = "random"
    metadata: dict = field(default_factory=dict)

    @property
    def eps_grid(self) -> list[tuple[float, float]]:
        return [(float(a), float(b)) for a in self.axis for b in self.axis]

    @property
    def center_index(self) -> int:
        return len(self.axis) // 2

    def points(self) -> np.ndarray:
        """All perturbed inputs, shaped (n, n, *center.shape)."""
        e1 = self.axis.reshape((-1, 1) + (1,) * self.center.ndim)
        e2 = self.axis.reshape((1, -1) + (1,) * self.center.ndim)
        return self.center + e1 * self.d + e2 * self.d_perp


@dataclass
class LandscapeSurface:
    plane: LandscapePlane
    values: np.ndarray
    direction_kind: str = "random"

    @property
    def vmin(self) -> float:
        return float(self.values.min())

    @property
    def vmax(self) -> float:
        return float(self.values.max())

    def to_csv(self) -> str:
        lines = ["eps1,eps2,dlogp"]
        axis = self.plane.axis
        for i, a in enumerate(axis):
            for j, b in enumerate(axis):
                lines.append(f"{float(a)!r},{float(b)!r},{float(self.values[i, j])!r}")
        return "\n".join(lines) + "\n"

    def to_ppm(self, cell: int = 8) -> bytes:
        return heatmap_ppm(self.values, cell=cell)


@dataclass
class LikelihoodHistogram:
    clean_values: np.ndarray
    perturbed_values: np.ndarray
    bin_edges: np.ndarray
    clean_counts: np.ndarray
    perturbed_counts: np.ndarray
    eps: float

    def to_csv(self) -> str:
        lines = ["bin_lo,bin_hi,clean_count,perturbed_count"]
        for lo, hi, c, p in zip(self.bin_edges[:-1], self.bin_edges[1:], self.clean_counts, self.perturbed_counts):
            lines.append(f"{float(lo)!r},{float(hi)!r},{int(c)},{int(p)}")
        return "\n".join(lines) + "\n"

    def wasserstein(self) -> float:
        from scipy.stats import wasserstein_distance

        return float(wasserstein_distance(self.clean_values, self.perturbed_values))


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def orthogonal_partner(d: np.ndarray, draw: np.ndarray) -> np.ndarray | None:
    """Gram-Schmidt ``draw`` against ``d`` and rescale to ``|d|``; None if degenerate."""
    d = np.asarray(d, dtype=np.float64)
    r = np.asarray(draw, dtype=np.float64)
    dd = d @ d
    if dd == 0.0:
        return np.zeros_like(r)
    r = r - (r @ d) / dd * d
    norm = np.linalg.norm(r)
    if norm <= 1e-9 * np.sqrt(dd):
        return None
    return r * (np.sqrt(dd) / norm)


def _signed(rng, dim) -> np.ndarray:
    return rng.choice(np.array([-1.0, 1.0]), size=dim)


def random_partner(d: np.ndarray, seed=0) -> np.ndarray:
    rng = _rng(seed)
    for _ in range(_MAX_REDRAWS):
        partner = orthogonal_partner(d, _signed(rng, d.size))
        if partner is not None:
            return partner
    raise NumericError(f"no non-parallel signed draw in {_MAX_REDRAWS} attempts")


def sample_direction_pair(dim: int, reference_norm: float | None = None, seed=0):
    """Signed direction ``d`` and an orthogonal partner of the same norm.

    ``d`` has entries +-1; the partner is a second +-1 draw orthogonalized
    against ``d``. With ``reference_norm`` both are rescaled to that norm.
    """
    if dim < 2:
        raise InputError("direction pairs need dim >= 2")
    rng = _rng(seed)
    d = _signed(rng, dim)
    d_perp = random_partner(d, rng)
    if reference_norm is not None:
        scale = reference_norm / np.linalg.norm(d)
        d, d_perp = d * scale, d_perp * scale
    return d, d_perp


def neighborhood(x, d, d_perp, eps_max: float = DEFAULT_EPS_MAX, resolution: int = DEFAULT_RESOLUTION,
                 direction_kind: str = "random", metadata: dict | None = None) -> LandscapePlane:
    x = np.asarray(x, dtype=np.float64)
    if resolution < 1:
        raise ConfigError("neighborhood resolution must be >= 1")
    grid = GridSpec(eps_max, resolution)
    return LandscapePlane(
        x, np.asarray(d, dtype=np.float64).reshape(x.shape), np.asarray(d_perp, dtype=np.float64).reshape(x.shape),
        grid.axis, direction_kind, dict(metadata or {}),
    )


def random_plane(x, eps_max=DEFAULT_EPS_MAX, resolution=DEFAULT_RESOLUTION, seed=0) -> LandscapePlane:
    x = np.asarray(x, dtype=np.float64)
    d, d_perp = sample_direction_pair(x.size, seed=seed)
    meta = {} if isinstance(seed, np.random.Generator) else {"seed": seed}
    return neighborhood(x, d, d_perp, eps_max, resolution, "random", meta)


def surface(model, plane: LandscapePlane) -> LandscapeSurface:
    """Relative log-likelihood at every grid point; the centre is exactly 0."""
    pts = plane.points()
    n = len(plane.axis)
    ll = log_likelihoods(model, pts.reshape((n * n,) + plane.center.shape)).reshape(n, n)
    c = plane.center_index
    values = ll - ll[c, c]
    return LandscapeSurface(plane, values, plane.direction_kind)


def fgsm_plane(model, x, label: int, eps_max: float = DEFAULT_EPS_MAX,
               resolution: int = DEFAULT_RESOLUTION, seed=0) -> LandscapePlane:
    """Plane spanned by the FGSM sign direction and a random orthogonal signed vector."""
    batch, _ = _as_batch(model, x)
    if not 0 <= int(label) < model.num_classes:
        raise InputError(f"label {label} outside [0, {model.num_classes})")
    g = loss_input_gradient(model, batch, np.array([int(label)]))[0]
    d = np.sign(g).reshape(-1)
    zero = not np.any(d)
    d_perp = np.zeros_like(d) if zero else random_partner(d, seed)
    meta = {"label": int(label), "zero_gradient": bool(zero), "seed": seed}
    return neighborhood(batch[0], d, d_perp, eps_max, resolution, "fgsm", meta)


def axis_variance(surf: LandscapeSurface, along: str = "d") -> float:
    """Variance of the surface along one plane axis through the centre."""
    c = surf.plane.center_index
    line = surf.values[:, c] if along == "d" else surf.values[c, :]
    return float(np.var(line))


def likelihood_histogram(model, dataset, eps: float = DEFAULT_EPS_MAX, bins: int = 30, seed=0) -> LikelihoodHistogram:
    """Clean vs uniformly l-inf perturbed log-likelihoods on shared bins."""
    if len(dataset) == 0:
        raise InputError("histogram needs a nonempty dataset")
    if eps < 0 or bins < 1:
        raise ConfigError("histogram needs eps >= 0 and bins >= 1")
    rng = _rng(seed)
    x = dataset.inputs
    noise = rng.uniform(-eps, eps, size=x.shape) if eps > 0 else np.zeros_like(x)
    clean = log_likelihoods(model, x)
    perturbed = log_likelihoods(model, x + noise)
    edges = np.histogram_bin_edges(np.concatenate([clean, perturbed]), bins=bins)
    cc, _ = np.histogram(clean, edges)
    pc, _ = np.histogram(perturbed, edges)
    return LikelihoodHistogram(clean, perturbed, edges, cc, pc, float(eps))


# -- heatmap rendering ------------------------------------------------------------

# viridis anchors, sampled every 1/8 of the colormap
_PALETTE = np.array([
    [68, 1, 84], [71, 44, 122], [59, 81, 139], [44, 113, 142], [33, 144, 141],
    [39, 173, 129], [92, 200, 99], [170, 220, 50], [253, 231, 37],
], dtype=np.float64)


def colorize(values: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Map values linearly onto the palette; returns uint8 RGB of shape (*values.shape, 3)."""
    values = np.asarray(values, dtype=np.float64)
    lo = values.min() if vmin is None else vmin
    hi = values.max() if vmax is None else vmax
    t = np.zeros_like(values) if hi <= lo else np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    pos = t * (len(_PALETTE) - 1)
    i = np.minimum(pos.astype(int), len(_PALETTE) - 2)
    frac = (pos - i)[..., None]
    rgb = _PALETTE[i] * (1 - frac) + _PALETTE[i + 1] * frac
    return np.rint(rgb).astype(np.uint8)


def heatmap_ppm(values: np.ndarray, cell: int = 8) -> bytes:
    """Binary PPM (P6); row 0 is the largest second-axis offset."""
    rgb = colorize(values.T[::-1])
    rgb = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def write_surface(surf: LandscapeSurface, csv_path, ppm_path, cell: int = 8) -> None:
    atomic_write_text(csv_path, surf.to_csv())
    atomic_write_bytes(ppm_path, surf.to_ppm(cell))
