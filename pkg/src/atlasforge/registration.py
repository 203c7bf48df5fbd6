"""Unsupervised shape registration.

A 3D Unet takes (moving, fixed) volumes stacked as two channels and
predicts the displacement field that warps the moving volume onto the
fixed one. Training maximizes local patch cross-correlation while
penalizing rough fields:

    objective = -cc + smoothness_weight * smoothness

The same machinery trains the reverse direction (target -> atlas) used to
produce inverse-warped images for intensity alignment.
"""

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, load_into_module, save_checkpoint
from .errors import ConfigError, ContractViolation, DtypeMismatchError, TrainingDiverged
from .grids import DisplacementField, Volume
from .networks import Unet3D
from .seeding import derive_seed
from .warp import spatial_gradient, warp_image


@dataclass
class RegistrationConfig:
    patch_size: int = 9
    smoothness_weight: float = 1.0
    encoder_channels: tuple = (16, 32, 32, 32)
    decoder_channels: tuple = (32, 32, 32, 32, 16, 16)
    learning_rate: float = 1e-4
    epochs: int = 500
    batch_size: int = 1
    cc_epsilon: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.decoder_channels = tuple(self.decoder_channels)
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be odd and >= 3, got {self.patch_size}")
        if any(c < 1 for c in self.encoder_channels + self.decoder_channels):
            raise ConfigError("all channel counts must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


def _axis_box_sum(x: torch.Tensor, dim: int, n: int) -> torch.Tensor:
    # windowed sum via cumulative-sum differences; truncates at the ends
    pad = n // 2
    size = x.shape[dim]
    cs = x.cumsum(dim)
    idx = torch.arange(size, device=x.device)
    upper = cs.index_select(dim, torch.clamp(idx + pad, max=size - 1))
    lo_idx = idx - pad - 1
    lower = cs.index_select(dim, torch.clamp(lo_idx, min=0))
    shape = [1, 1, 1]
    shape[dim] = size
    keep = (lo_idx >= 0).reshape(shape).to(x.dtype)
    return upper - lower * keep


def _box_sum(x: torch.Tensor, n: int) -> torch.Tensor:
    """Sum over the n^3 window centered at each voxel (zero outside)."""
    for dim in range(3):
        x = _axis_box_sum(x, dim, n)
    return x


@lru_cache(maxsize=8)
def _window_counts(shape, n, dtype):
    # in-volume voxels per window; windows truncate at the boundary
    return _box_sum(torch.ones(shape, dtype=dtype), n)


def local_cc_loss(a, b, n: int = 9, eps: float = 1e-5) -> torch.Tensor:
    """Sum over voxels of squared local patch correlation.

    Patches are n^3 windows truncated at the volume boundary, with means
    taken over the surviving voxels, so a constant volume has zero
    covariance with anything and negating one input leaves the value
    unchanged. Each per-voxel ratio is bounded by 1 (Cauchy-Schwarz), so
    the total is at most the voxel count. Differentiable w.r.t. both
    inputs.
    """
    if isinstance(a, Volume):
        a = a.tensor()
    if isinstance(b, Volume):
        b = b.tensor()
    if a.shape != b.shape or a.ndim != 3:
        raise ContractViolation(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if n < 3 or n % 2 == 0:
        raise ContractViolation(f"patch size must be odd and >= 3, got {n}")
    win = _window_counts(tuple(a.shape), n, a.dtype)
    sa = _box_sum(a, n)
    sb = _box_sum(b, n)
    saa = _box_sum(a * a, n)
    sbb = _box_sum(b * b, n)
    sab = _box_sum(a * b, n)
    cross = sab - sa * sb / win
    var_a = saa - sa * sa / win
    var_b = sbb - sb * sb / win
    return (cross * cross / (var_a * var_b + eps)).sum()


def smoothness_loss(disp) -> torch.Tensor:
    """Sum over voxels of the L2 norm of all Jacobian components."""
    jac = spatial_gradient(disp)
    sq = (jac * jac).sum(dim=(0, 1))
    mask = sq > 0
    norms = torch.sqrt(sq[mask])  # masked so exact zeros stay zero with no NaN grad
    return norms.sum() if norms.numel() else sq.sum()


class RegistrationModel(nn.Module):
    """Maps a (moving, fixed) volume pair to a displacement field."""

    def __init__(self, cfg: RegistrationConfig):
        super().__init__()
        self.cfg = cfg
        self.unet = Unet3D(2, 3, cfg.encoder_channels, cfg.decoder_channels)

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> torch.Tensor:
        x = torch.stack([moving, fixed])[None]
        return self.unet(x)[0]


def registration_objective(model, moving_t, fixed_t, cfg):
    disp = model(moving_t, fixed_t)
    warped = warp_image(moving_t, disp)
    cc = local_cc_loss(warped, fixed_t, n=cfg.patch_size, eps=cfg.cc_epsilon)
    smooth = smoothness_loss(disp)
    return -cc + cfg.smoothness_weight * smooth


def train_registration(atlas: Volume, unlabeled, cfg: RegistrationConfig,
                       direction: str = "forward"):
    """Train a registration model; returns (model, per-epoch loss trace).

    direction "forward" warps the atlas toward each unlabeled volume;
    "reverse" warps each unlabeled volume toward the atlas.
    """
    if direction not in ("forward", "reverse"):
        raise ConfigError(f"unknown direction {direction!r}")
    if not unlabeled:
        raise ContractViolation("need at least one unlabeled volume")
    for v in unlabeled:
        if v.shape != atlas.shape:
            raise ContractViolation(f"volume shape {v.shape} != atlas shape {atlas.shape}")

    torch.manual_seed(cfg.seed)
    model = RegistrationModel(cfg)
    if cfg.epochs == 0:
        return model, []

    atlas_t = atlas.tensor()
    targets = [v.tensor() for v in unlabeled]
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "epoch-order", direction))

    trace = []
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(targets))
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            loss = 0.0
            for idx in batch:
                if direction == "forward":
                    loss = loss + registration_objective(model, atlas_t, targets[idx], cfg)
                else:
                    loss = loss + registration_objective(model, targets[idx], atlas_t, cfg)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"registration loss became non-finite at epoch {epoch}", step=epoch
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
        trace.append(total / len(targets))
    return model, trace


def predict_forward_field(model: RegistrationModel, atlas: Volume,
                          target: Volume) -> DisplacementField:
    """Field that warps the atlas toward the target."""
    if atlas.shape != target.shape:
        raise ContractViolation("atlas/target shape mismatch")
    with torch.no_grad():
        disp = model(atlas.tensor(), target.tensor())
    return DisplacementField(disp.numpy())


def predict_reverse_field(model: RegistrationModel, target: Volume,
                          atlas: Volume) -> DisplacementField:
    """Field that warps the target back toward the atlas."""
    if atlas.shape != target.shape:
        raise ContractViolation("atlas/target shape mismatch")
    with torch.no_grad():
        disp = model(target.tensor(), atlas.tensor())
    return DisplacementField(disp.numpy())


def save_model(model: RegistrationModel, path):
    save_checkpoint(path, "registration", asdict(model.cfg), model.cfg.seed,
                    model.state_dict())


def load_model(path) -> RegistrationModel:
    meta, arrays = load_checkpoint(path)
    if meta["kind"] != "registration":
        raise DtypeMismatchError(f"{path}: checkpoint kind {meta['kind']!r}")
    model = RegistrationModel(RegistrationConfig(**meta["config"]))
    return load_into_module(model, arrays)
