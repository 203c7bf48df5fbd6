"""Intensity alignment: learn per-volume additive offset fields.

A Unet takes (atlas, inverse-warped target) as two channels and predicts
the offset field I such that (atlas + I) warped through the frozen
forward registration field matches the target. The offset is kept smooth
inside anatomical regions but may jump across region contours, hence the
contour-masked total-variation penalty.
"""

from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.ndimage import binary_dilation
from torch import nn

from .checkpoint import load_checkpoint, load_into_module, save_checkpoint
from .errors import ConfigError, ContractViolation, DtypeMismatchError, TrainingDiverged
from .grids import DisplacementField, IntensityField, LabelMap, Volume
from .networks import Unet3D
from .seeding import derive_seed
from .warp import scalar_gradient, warp_image


@dataclass(frozen=True)
class ContourMask:
    """Binary mask of voxels on (or dilated around) region boundaries."""

    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.ndim != 3:
            raise ContractViolation(f"expected a 3D mask, got shape {mask.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise ContractViolation("contour mask must be binary")
        mask = mask.astype(np.uint8)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    def tensor(self, dtype=torch.float32):
        return torch.tensor(self.mask, dtype=dtype)


@dataclass
class IntensityAlignConfig:
    lambda_weight: float = 0.02  # trade-off on the offset-smoothness penalty
    contour_dilation: int = 1
    encoder_channels: tuple = (16, 32, 32, 32)
    decoder_channels: tuple = (32, 32, 32, 32, 16, 16)
    learning_rate: float = 1e-4
    epochs: int = 500
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.decoder_channels = tuple(self.decoder_channels)
        if self.lambda_weight < 0:
            raise ConfigError("lambda_weight must be >= 0")
        if self.contour_dilation < 0:
            raise ConfigError("contour_dilation must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


def contour_mask(atlas_labels: LabelMap, dilation: int = 1) -> ContourMask:
    """Mark voxels whose 6-neighborhood crosses a label boundary, dilated."""
    lab = atlas_labels.labels
    edges = np.zeros(lab.shape, dtype=bool)
    for axis in range(3):
        diff = np.diff(lab, axis=axis) != 0
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        edges[tuple(lo)] |= diff
        edges[tuple(hi)] |= diff
    if dilation > 0 and edges.any():
        edges = binary_dilation(edges, iterations=dilation)
    return ContourMask(edges.astype(np.uint8))


def intensity_losses(atlas, offset, disp, target, contour, lambda_weight: float):
    """Return (reconstruction, offset-smoothness, total) loss tensors.

    reconstruction: sum of squared differences between (atlas + offset)
    warped through `disp` and the target. offset-smoothness: sum over
    voxels off the contour mask of the L1 norm of the offset's forward
    differences.
    """
    atlas_t = atlas.tensor() if isinstance(atlas, Volume) else atlas
    offset_t = offset.tensor() if isinstance(offset, IntensityField) else offset
    disp_t = disp.tensor() if isinstance(disp, DisplacementField) else disp
    target_t = target.tensor() if isinstance(target, Volume) else target
    contour_t = contour.tensor(atlas_t.dtype) if isinstance(contour, ContourMask) else contour
    shapes = {tuple(atlas_t.shape), tuple(offset_t.shape), tuple(target_t.shape),
              tuple(contour_t.shape), tuple(disp_t.shape[1:])}
    if len(shapes) != 1:
        raise ContractViolation(f"shape mismatch across intensity loss inputs: {shapes}")

    warped = warp_image(atlas_t + offset_t, disp_t)
    recon = ((warped - target_t) ** 2).sum()
    grad_l1 = scalar_gradient(offset_t).abs().sum(dim=0)
    smooth = ((1.0 - contour_t) * grad_l1).sum()
    return recon, smooth, recon + lambda_weight * smooth


class IntensityAlignModel(nn.Module):
    """Maps (atlas, inverse-warped target) to an additive offset field."""

    def __init__(self, cfg: IntensityAlignConfig):
        super().__init__()
        self.cfg = cfg
        self.unet = Unet3D(2, 1, cfg.encoder_channels, cfg.decoder_channels)

    def forward(self, atlas: torch.Tensor, inverse_warped: torch.Tensor) -> torch.Tensor:
        x = torch.stack([atlas, inverse_warped])[None]
        return self.unet(x)[0, 0]


def train_intensity(atlas: Volume, inverse_warped, forward_fields, targets,
                    contour: ContourMask, cfg: IntensityAlignConfig):
    """Train the offset predictor with frozen forward fields.

    Returns (model, per-epoch loss trace).
    """
    if not (len(inverse_warped) == len(forward_fields) == len(targets)) or not targets:
        raise ContractViolation("need equal-length, non-empty subject lists")

    torch.manual_seed(cfg.seed)
    model = IntensityAlignModel(cfg)
    if cfg.epochs == 0:
        return model, []

    atlas_t = atlas.tensor()
    contour_t = contour.tensor()
    inv_t = [v.tensor() for v in inverse_warped]
    disp_t = [f.tensor() for f in forward_fields]
    target_t = [v.tensor() for v in targets]
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "epoch-order", "intensity"))

    trace = []
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(targets))
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            loss = 0.0
            for idx in batch:
                offset = model(atlas_t, inv_t[idx])
                _, _, objective = intensity_losses(
                    atlas_t, offset, disp_t[idx], target_t[idx], contour_t, cfg.lambda_weight
                )
                loss = loss + objective
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"intensity loss became non-finite at epoch {epoch}", step=epoch
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
        trace.append(total / len(targets))
    return model, trace


def predict_intensity_field(model: IntensityAlignModel, atlas: Volume,
                            inverse_warped: Volume) -> IntensityField:
    if atlas.shape != inverse_warped.shape:
        raise ContractViolation("atlas/inverse-warped shape mismatch")
    with torch.no_grad():
        offset = model(atlas.tensor(), inverse_warped.tensor())
    return IntensityField(offset.numpy())


def save_model(model: IntensityAlignModel, path):
    save_checkpoint(path, "intensity", asdict(model.cfg), model.cfg.seed,
                    model.state_dict())


def load_model(path) -> IntensityAlignModel:
    meta, arrays = load_checkpoint(path)
    if meta["kind"] != "intensity":
        raise DtypeMismatchError(f"{path}: checkpoint kind {meta['kind']!r}")
    model = IntensityAlignModel(IntensityAlignConfig(**meta["config"]))
    return load_into_module(model, arrays)
