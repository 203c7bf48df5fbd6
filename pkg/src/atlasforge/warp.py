"""Differentiable backward warping and finite-difference gradients.

Convention: the output at voxel v samples the moving grid at v + field(v)
("backward" warping). Sample coordinates are clamped to the grid border,
so out-of-bounds reads repeat the border value. Intensities use trilinear
interpolation; label maps use nearest-neighbor with ties at .5 fractional
coordinates rounded half away from zero.

The tensor-level functions (`warp_image`, `warp_labels`, `forward_diff`,
`spatial_gradient`) are differentiable torch ops used inside training
loops; the typed wrappers (`warp_trilinear`, `warp_nearest`) operate on
the immutable grid types.
"""

from functools import lru_cache

import numpy as np
import torch

from .errors import ContractViolation
from .grids import DisplacementField, IntensityField, LabelMap, Volume


@lru_cache(maxsize=8)
def _identity_grid(shape, dtype, device):
    axes = [torch.arange(s, dtype=dtype, device=device) for s in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def identity_grid(shape, dtype=torch.float32, device="cpu") -> torch.Tensor:
    """Voxel-coordinate grid of shape (3, D, H, W)."""
    return _identity_grid(tuple(shape), dtype, torch.device(device))


def _as_field_tensor(field, dtype=None):
    if isinstance(field, DisplacementField):
        return field.tensor(dtype or torch.float32)
    t = torch.as_tensor(field)
    return t.to(dtype) if dtype is not None else t


def _check_warp_shapes(moving_shape, disp):
    if disp.ndim != 4 or disp.shape[0] != 3:
        raise ContractViolation(f"field must have shape (3, D, H, W), got {tuple(disp.shape)}")
    if tuple(moving_shape) != tuple(disp.shape[1:]):
        raise ContractViolation(
            f"moving shape {tuple(moving_shape)} != field spatial shape {tuple(disp.shape[1:])}"
        )


def warp_image(moving: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Trilinearly resample `moving` (D, H, W) at v + disp(v), border-clamped.

    Differentiable w.r.t. both `moving` and `disp`.
    """
    _check_warp_shapes(moving.shape, disp)
    sizes = moving.shape
    grid = identity_grid(sizes, dtype=disp.dtype, device=disp.device)
    coords = grid + disp

    lo, fr, hi = [], [], []
    for axis, size in enumerate(sizes):
        c = coords[axis].clamp(0.0, float(size - 1))
        f = c.floor()
        lo.append(f.long())
        hi.append(torch.clamp(lo[axis] + 1, max=size - 1))
        fr.append(c - f)

    def corner(a, b, c):
        return moving[a, b, c]

    # interpolate along W, then H, then D
    c00 = corner(lo[0], lo[1], lo[2]) * (1 - fr[2]) + corner(lo[0], lo[1], hi[2]) * fr[2]
    c01 = corner(lo[0], hi[1], lo[2]) * (1 - fr[2]) + corner(lo[0], hi[1], hi[2]) * fr[2]
    c10 = corner(hi[0], lo[1], lo[2]) * (1 - fr[2]) + corner(hi[0], lo[1], hi[2]) * fr[2]
    c11 = corner(hi[0], hi[1], lo[2]) * (1 - fr[2]) + corner(hi[0], hi[1], hi[2]) * fr[2]
    c0 = c00 * (1 - fr[1]) + c01 * fr[1]
    c1 = c10 * (1 - fr[1]) + c11 * fr[1]
    return c0 * (1 - fr[0]) + c1 * fr[0]


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Round to nearest integer with .5 ties going away from zero."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def warp_labels(labels: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbor resample of an integer grid at v + disp(v)."""
    _check_warp_shapes(labels.shape, disp)
    sizes = labels.shape
    grid = identity_grid(sizes, dtype=disp.dtype, device=disp.device)
    coords = grid + disp
    idx = [
        round_half_away(coords[axis]).clamp(0, size - 1).long()
        for axis, size in enumerate(sizes)
    ]
    return labels[idx[0], idx[1], idx[2]]


def warp_trilinear(moving: Volume, field: DisplacementField) -> Volume:
    """Warp a Volume through a DisplacementField (Volume-level wrapper)."""
    with torch.no_grad():
        out = warp_image(moving.tensor(), field.tensor())
    return Volume(np.clip(out.numpy(), 0.0, 1.0))


def warp_nearest(moving: LabelMap, field: DisplacementField) -> LabelMap:
    """Warp a LabelMap through a DisplacementField (LabelMap-level wrapper)."""
    out = warp_labels(moving.tensor(), field.tensor())
    return LabelMap(out.numpy().astype(np.int32), moving.num_classes)


def forward_diff(x: torch.Tensor, axis: int) -> torch.Tensor:
    """Forward difference along one spatial axis, zero at the trailing slice."""
    src = [slice(None)] * x.ndim
    dst = [slice(None)] * x.ndim
    src[axis] = slice(1, None)
    dst[axis] = slice(0, -1)
    diff = x[tuple(src)] - x[tuple(dst)]
    zshape = list(x.shape)
    zshape[axis] = 1
    return torch.cat([diff, x.new_zeros(zshape)], dim=axis)


def spatial_gradient(field) -> torch.Tensor:
    """Per-voxel Jacobian components of a (3, D, H, W) field.

    Returns shape (3, 3, D, H, W): entry [c, a] is the forward difference
    of component c along spatial axis a (zero at each trailing slice).
    """
    disp = _as_field_tensor(field)
    if disp.ndim != 4 or disp.shape[0] != 3:
        raise ContractViolation(f"expected shape (3, D, H, W), got {tuple(disp.shape)}")
    rows = [
        torch.stack([forward_diff(disp[c], axis) for axis in range(3)])
        for c in range(3)
    ]
    return torch.stack(rows)


def scalar_gradient(x) -> torch.Tensor:
    """Forward-difference gradient of a scalar (D, H, W) grid, shape (3, D, H, W)."""
    if isinstance(x, IntensityField):
        x = x.tensor()
    if x.ndim != 3:
        raise ContractViolation(f"expected a (D, H, W) grid, got {tuple(x.shape)}")
    return torch.stack([forward_diff(x, axis) for axis in range(3)])
