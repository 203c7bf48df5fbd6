"""Slice-wise 2D Unet segmentation.

3D volumes are split into 2D slices along a configurable axis; training
batches are random slices of one freshly synthesized volume per
iteration, and inference segments every slice independently before
restacking.
"""

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, load_into_module, save_checkpoint
from .errors import ConfigError, ContractViolation, DtypeMismatchError, TrainingDiverged
from .grids import LabelMap, Volume
from .networks import Unet2D
from .seeding import derive_seed


@dataclass
class SegmentationConfig:
    num_classes: int = 4
    slice_axis: int = 2
    batch_size: int = 16
    iterations: int = 40_000
    learning_rate: float = 1e-4
    encoder_channels: tuple = (16, 32, 64, 128, 256)
    decoder_channels: tuple = (128, 64, 32, 16, 16)
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.decoder_channels = tuple(self.decoder_channels)
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.slice_axis not in (0, 1, 2):
            raise ConfigError("slice_axis must be 0, 1, or 2")
        if len(self.encoder_channels) != 5 or len(self.decoder_channels) != 5:
            raise ConfigError("encoder/decoder widths must have length 5")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")


def ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of -log softmax(logits)[target] for one slice.

    logits: (K, H, W); target: (H, W) integer labels in [0, K).
    """
    if logits.ndim != 3 or target.ndim != 2 or logits.shape[1:] != target.shape:
        raise ContractViolation(
            f"logits {tuple(logits.shape)} incompatible with target {tuple(target.shape)}"
        )
    if target.min() < 0 or target.max() >= logits.shape[0]:
        raise ContractViolation(
            f"target labels outside [0, {logits.shape[0] - 1}]"
        )
    return F.cross_entropy(logits[None], target[None].long())


class SegmentationModel(nn.Module):
    def __init__(self, cfg: SegmentationConfig):
        super().__init__()
        self.cfg = cfg
        self.unet = Unet2D(1, cfg.num_classes, cfg.encoder_channels, cfg.decoder_channels)

    def forward(self, slices: torch.Tensor) -> torch.Tensor:
        """(B, H, W) intensity slices -> (B, K, H, W) logits."""
        return self.unet(slices[:, None])


def _slices_along(t: torch.Tensor, axis: int) -> torch.Tensor:
    return torch.movedim(t, axis, 0)


def train_segmentation(stream, cfg: SegmentationConfig):
    """Train on synthesized samples; returns (model, per-iteration trace).

    Each iteration consumes one sample from the stream and builds a batch
    of `batch_size` random slices along `slice_axis`.
    """
    torch.manual_seed(cfg.seed)
    model = SegmentationModel(cfg)
    if cfg.iterations == 0:
        return model, []

    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    slice_rng = np.random.default_rng(derive_seed(cfg.seed, "slice-picks"))

    trace = []
    for step in range(cfg.iterations):
        sample = next(stream)
        vol_slices = _slices_along(sample.image.tensor(), cfg.slice_axis)
        lab_slices = _slices_along(sample.labels.tensor(), cfg.slice_axis)
        if sample.labels.num_classes > cfg.num_classes:
            raise ContractViolation(
                f"stream yields {sample.labels.num_classes} classes, model has {cfg.num_classes}"
            )
        picks = slice_rng.integers(vol_slices.shape[0], size=cfg.batch_size)
        idx = torch.from_numpy(picks)
        logits = model(vol_slices[idx])
        loss = F.cross_entropy(logits, lab_slices[idx])
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"segmentation loss became non-finite at iteration {step}",
                                   step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
    return model, trace


def segment_volume(model: SegmentationModel, vol: Volume,
                   cfg: SegmentationConfig = None) -> LabelMap:
    """Segment every slice along the configured axis and restack."""
    cfg = cfg or model.cfg
    vol_t = vol.tensor()
    slices = _slices_along(vol_t, cfg.slice_axis)
    with torch.no_grad():
        logits = model(slices)
        labels = logits.argmax(dim=1)
    labels = torch.movedim(labels, 0, cfg.slice_axis)
    return LabelMap(labels.numpy().astype(np.int32), cfg.num_classes)


def save_model(model: SegmentationModel, path):
    save_checkpoint(path, "segmentation", asdict(model.cfg), model.cfg.seed,
                    model.state_dict())


def load_model(path) -> SegmentationModel:
    meta, arrays = load_checkpoint(path)
    if meta["kind"] != "segmentation":
        raise DtypeMismatchError(f"{path}: checkpoint kind {meta['kind']!r}")
    model = SegmentationModel(SegmentationConfig(**meta["config"]))
    return load_into_module(model, arrays)
