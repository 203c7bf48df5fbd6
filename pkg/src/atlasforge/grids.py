"""Core 3D grid types.

All imaging data lives on (D, H, W) voxel grids:

* ``Volume`` -- scalar intensities normalized to [0, 1]
* ``LabelMap`` -- integer region ids, 0 reserved for background
* ``DisplacementField`` -- per-voxel 3-vector of displacements in voxel
  units, stored as (3, D, H, W)
* ``IntensityField`` -- per-voxel additive intensity offset, (D, H, W)

Instances are immutable after construction (the wrapped arrays are made
read-only), so they are safe to share across threads.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractViolation


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _check_spatial_shape(shape):
    if len(shape) != 3:
        raise ContractViolation(f"expected a 3D grid, got shape {shape}")
    if any(s < 2 for s in shape):
        raise ContractViolation(f"all grid dims must be >= 2, got {shape}")


@dataclass(frozen=True)
class Volume:
    """A 3D scalar intensity grid with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        _check_spatial_shape(data.shape)
        if not np.all(np.isfinite(data)):
            raise ContractViolation("volume contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ContractViolation(
                f"volume values outside [0, 1]: min={data.min()}, max={data.max()}"
            )
        object.__setattr__(self, "data", _freeze(data))

    @classmethod
    def from_raw(cls, data) -> "Volume":
        """Min-max normalize an arbitrary finite scalar grid into [0, 1]."""
        data = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(data)):
            raise ContractViolation("raw volume contains non-finite values")
        lo, hi = float(data.min()), float(data.max())
        if hi > lo:
            data = (data - lo) / (hi - lo)
        else:
            data = np.zeros_like(data)
        return cls(np.clip(data, 0.0, 1.0))

    @property
    def shape(self):
        return self.data.shape

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.data, dtype=dtype)


@dataclass(frozen=True)
class LabelMap:
    """A 3D grid of region ids in [0, num_classes), aligned with a Volume."""

    labels: np.ndarray
    num_classes: int = 0  # 0 means "infer as max label + 1"

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            raise ContractViolation(f"labels must be integers, got {labels.dtype}")
        labels = labels.astype(np.int32)
        _check_spatial_shape(labels.shape)
        if labels.min() < 0:
            raise ContractViolation("labels must be non-negative")
        k = self.num_classes if self.num_classes else int(labels.max()) + 1
        if labels.max() >= k:
            raise ContractViolation(
                f"label {int(labels.max())} out of range for num_classes={k}"
            )
        object.__setattr__(self, "labels", _freeze(labels))
        object.__setattr__(self, "num_classes", k)

    @property
    def shape(self):
        return self.labels.shape

    def tensor(self) -> torch.Tensor:
        return torch.tensor(self.labels, dtype=torch.long)


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement 3-vectors in voxel units, shape (3, D, H, W)."""

    disp: np.ndarray

    def __post_init__(self):
        disp = np.asarray(self.disp, dtype=np.float32)
        if disp.ndim != 4 or disp.shape[0] != 3:
            raise ContractViolation(f"expected shape (3, D, H, W), got {disp.shape}")
        _check_spatial_shape(disp.shape[1:])
        if not np.all(np.isfinite(disp)):
            raise ContractViolation("displacement field contains non-finite values")
        object.__setattr__(self, "disp", _freeze(disp))

    @classmethod
    def zeros(cls, spatial_shape) -> "DisplacementField":
        return cls(np.zeros((3, *spatial_shape), dtype=np.float32))

    @property
    def spatial_shape(self):
        return self.disp.shape[1:]

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.disp, dtype=dtype)


@dataclass(frozen=True)
class IntensityField:
    """Per-voxel additive intensity offset, shape (D, H, W)."""

    offset: np.ndarray

    def __post_init__(self):
        offset = np.asarray(self.offset, dtype=np.float32)
        _check_spatial_shape(offset.shape)
        if not np.all(np.isfinite(offset)):
            raise ContractViolation("intensity field contains non-finite values")
        object.__setattr__(self, "offset", _freeze(offset))

    @classmethod
    def zeros(cls, spatial_shape) -> "IntensityField":
        return cls(np.zeros(spatial_shape, dtype=np.float32))

    @property
    def shape(self):
        return self.offset.shape

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.offset, dtype=dtype)
