"""Procedural brain-like phantoms with exact ground truth.

A canonical phantom of nested anisotropic ellipsoid shells is built once
per spec; each population member warps it through a random smooth
displacement field and perturbs its intensities (smooth multiplicative
gain + additive offset + voxel noise). Because the member's label map is
the canonical label map warped through the *same* field, ground truth is
exact by construction.
"""

from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .grids import DisplacementField, LabelMap, Volume
from .seeding import derive_seed
from .warp import warp_image, warp_labels

# Relative semi-axis of the outermost shell; keeps >= 4 voxels of
# background margin on a 32-cube so warped members still touch the border.
OUTER_FRACTION = 0.75
# Per-axis anisotropy of the ellipsoids.
AXIS_SCALES = (1.0, 0.92, 0.80)
# Per-member intensity perturbation: a global gain/offset draw plus
# smooth low-frequency gain/offset fields.
GLOBAL_GAIN = 0.05
GLOBAL_OFFSET = 0.025
GAIN_FIELD = 0.08
OFFSET_FIELD = 0.04


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a phantom population."""

    grid_size: tuple = (32, 32, 32)
    num_regions: int = 4
    base_intensities: tuple = (0.05, 0.35, 0.65, 0.95)
    deform_amplitude: float = 5.5
    deform_smoothness: float = 2.5
    noise_sigma: float = 0.04
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid_size", tuple(int(s) for s in self.grid_size))
        object.__setattr__(self, "base_intensities", tuple(float(v) for v in self.base_intensities))
        if len(self.grid_size) != 3 or any(s < 8 for s in self.grid_size):
            raise ConfigError(f"grid_size must be three dims >= 8, got {self.grid_size}")
        if self.num_regions < 2:
            raise ConfigError("num_regions must be >= 2 (background + 1)")
        if len(self.base_intensities) != self.num_regions:
            raise ConfigError("need one base intensity per region")
        vals = sorted(self.base_intensities)
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ConfigError("base intensities must lie in [0, 1]")
        if any(b - a < 0.05 for a, b in zip(vals, vals[1:])):
            raise ConfigError("base intensities must be pairwise distinct by >= 0.05")
        if self.deform_amplitude < 0:
            raise ConfigError("deform_amplitude must be >= 0")
        if self.deform_amplitude >= min(self.grid_size) / 4:
            raise ConfigError(
                f"deform_amplitude {self.deform_amplitude} too large for grid {self.grid_size}"
            )
        if self.deform_smoothness <= 0:
            raise ConfigError("deform_smoothness must be > 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


def canonical_phantom(spec: PhantomSpec):
    """Nested-ellipsoid phantom: labels 1..K-1 are shells, 0 is background."""
    dims = spec.grid_size
    center = [(s - 1) / 2.0 for s in dims]
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in dims], indexing="ij")
    labels = np.zeros(dims, dtype=np.int32)
    k = spec.num_regions
    for region in range(1, k):
        frac = OUTER_FRACTION * (k - region) / (k - 1)
        r2 = np.zeros(dims, dtype=np.float64)
        for axis in range(3):
            semi = max(frac * AXIS_SCALES[axis] * dims[axis] / 2.0, 1.5)
            r2 += ((grids[axis] - center[axis]) / semi) ** 2
        labels[r2 <= 1.0] = region
    if len(np.unique(labels)) != spec.num_regions:
        raise ConfigError(
            f"grid {dims} too small to carve {spec.num_regions} distinct regions"
        )
    intensities = np.asarray(spec.base_intensities, dtype=np.float32)[labels]
    return Volume(intensities), LabelMap(labels, spec.num_regions)


def smooth_noise(shape, smoothness: float, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency noise in [-1, 1]: blurred white noise, max-normalized."""
    field = gaussian_filter(rng.standard_normal(shape), sigma=smoothness, mode="nearest")
    peak = np.abs(field).max()
    if peak > 0:
        field = field / peak
    return field.astype(np.float32)


def random_displacement(spec: PhantomSpec, seed: int) -> DisplacementField:
    """Smooth random displacement with max component magnitude = amplitude."""
    rng = np.random.default_rng(seed)
    comps = [
        spec.deform_amplitude * smooth_noise(spec.grid_size, spec.deform_smoothness, rng)
        for _ in range(3)
    ]
    return DisplacementField(np.stack(comps))


def make_member(canonical_vol: Volume, canonical_lab: LabelMap, spec: PhantomSpec,
                shape_seed: int, intensity_seed: int, noise_seed: int):
    """Build one population member from explicit per-channel seeds."""
    field = random_displacement(spec, shape_seed)
    with torch.no_grad():
        warped = warp_image(canonical_vol.tensor(), field.tensor()).numpy()
        labels = warp_labels(canonical_lab.tensor(), field.tensor()).numpy()

    irng = np.random.default_rng(intensity_seed)
    gain = (1.0 + GLOBAL_GAIN * irng.uniform(-1.0, 1.0)) * (
        1.0 + GAIN_FIELD * smooth_noise(spec.grid_size, spec.deform_smoothness, irng)
    )
    offset = GLOBAL_OFFSET * irng.uniform(-1.0, 1.0) + OFFSET_FIELD * smooth_noise(
        spec.grid_size, spec.deform_smoothness, irng
    )
    img = warped * gain + offset
    if spec.noise_sigma > 0:
        nrng = np.random.default_rng(noise_seed)
        img = img + nrng.normal(0.0, spec.noise_sigma, size=img.shape)
    vol = Volume(np.clip(img, 0.0, 1.0).astype(np.float32))
    return vol, LabelMap(labels.astype(np.int32), spec.num_regions)


def generate_population(spec: PhantomSpec, count: int):
    """Deterministically generate `count` (Volume, LabelMap) members."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    canonical_vol, canonical_lab = canonical_phantom(spec)
    members = []
    for i in range(count):
        if spec.deform_amplitude == 0 and spec.noise_sigma == 0:
            # zero-perturbation spec: members are the canonical phantom
            members.append((canonical_vol, canonical_lab))
            continue
        members.append(
            make_member(
                canonical_vol,
                canonical_lab,
                spec,
                shape_seed=derive_seed(spec.seed, "member", i, "shape"),
                intensity_seed=derive_seed(spec.seed, "member", i, "intensity"),
                noise_seed=derive_seed(spec.seed, "member", i, "noise"),
            )
        )
    return members
