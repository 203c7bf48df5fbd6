"""3D variational autoencoders over deformation fields.

Two VAEs share one architecture: the shape VAE models displacement
fields (3 channels) and additionally penalizes differences between the
atlas warped by the input field and by the reconstruction; the intensity
VAE models scalar offset fields (1 channel) with a plain reconstruction
term. Both weight the KL term by a small beta so the posterior may drift
from the prior, trading prior fit for sample diversity; generation then
draws latents from a wider Gaussian N(0, sigma^2).
"""

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .checkpoint import load_checkpoint, load_into_module, save_checkpoint
from .errors import ConfigError, ContractViolation, DtypeMismatchError, TrainingDiverged
from .grids import DisplacementField, IntensityField, Volume
from .networks import VaeDecoder3D, VaeEncoder3D
from .seeding import derive_seed
from .warp import warp_image


@dataclass
class VaeConfig:
    latent_dim: int = 512
    beta: float = 0.1
    sample_sigma: float = 10.0
    encoder_channels: tuple = (16, 32, 64, 64)
    group_norm_groups: int = 8
    learning_rate: float = 1e-4
    iterations: int = 40_000
    batch_size: int = 1
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.sample_sigma < 0:
            raise ConfigError("sample_sigma must be >= 0")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if self.group_norm_groups < 1:
            raise ConfigError("group_norm_groups must be >= 1")


def kl_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL( N(mu, diag(exp(logvar))) || N(0, I) )."""
    if mu.shape != logvar.shape:
        raise ContractViolation("mu/logvar length mismatch")
    return 0.5 * (torch.exp(logvar) + mu * mu - 1.0 - logvar).sum()


def _sum_sq(a, b):
    d = a - b
    return (d * d).sum()


def shape_vae_loss(disp, recon, atlas, mu, logvar, beta: float):
    """Return (field-reconstruction, warped-image, KL, total) loss tensors."""
    disp_t = disp.tensor() if isinstance(disp, DisplacementField) else disp
    recon_t = recon.tensor() if isinstance(recon, DisplacementField) else recon
    atlas_t = atlas.tensor() if isinstance(atlas, Volume) else atlas
    if disp_t.shape != recon_t.shape or tuple(atlas_t.shape) != tuple(disp_t.shape[1:]):
        raise ContractViolation("shape mismatch in shape-VAE loss inputs")
    field_term = _sum_sq(disp_t, recon_t)
    image_term = _sum_sq(warp_image(atlas_t, disp_t), warp_image(atlas_t, recon_t))
    kl = kl_loss(mu, logvar)
    return field_term, image_term, kl, field_term + image_term + beta * kl


def intensity_vae_loss(offset, recon, mu, logvar, beta: float):
    """Return (reconstruction, KL, total) loss tensors."""
    offset_t = offset.tensor() if isinstance(offset, IntensityField) else offset
    recon_t = recon.tensor() if isinstance(recon, IntensityField) else recon
    if offset_t.shape != recon_t.shape:
        raise ContractViolation("shape mismatch in intensity-VAE loss inputs")
    field_term = _sum_sq(offset_t, recon_t)
    kl = kl_loss(mu, logvar)
    return field_term, kl, field_term + beta * kl


class DeformationVae(nn.Module):
    """Encoder/decoder pair over fixed-shape fields.

    `field_channels` is 3 for displacement fields, 1 for intensity
    offsets. Built for one spatial shape; the decoder upsamples back to
    the exact encoder sizes so any dims >= 16 work.
    """

    def __init__(self, field_shape, field_channels: int, cfg: VaeConfig):
        super().__init__()
        self.field_shape = tuple(field_shape)
        self.field_channels = field_channels
        self.cfg = cfg
        self.encoder = VaeEncoder3D(
            field_shape, field_channels, cfg.encoder_channels,
            cfg.latent_dim, cfg.group_norm_groups,
        )
        self.decoder = VaeDecoder3D(
            self.encoder.sizes, field_channels, cfg.encoder_channels,
            cfg.latent_dim, cfg.group_norm_groups,
        )

    def _batched(self, x: torch.Tensor) -> torch.Tensor:
        if self.field_channels == 1 and x.ndim == 3:
            x = x[None]
        return x[None] if x.ndim == 4 else x

    def encode(self, x: torch.Tensor):
        mu, logvar = self.encoder(self._batched(x))
        return mu[0], logvar[0]

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        out = self.decoder(z[None])[0]
        return out[0] if self.field_channels == 1 else out

    def forward(self, x: torch.Tensor, generator: torch.Generator = None):
        """Reparameterized pass: returns (reconstruction, mu, logvar)."""
        mu, logvar = self.encode(x)
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        z = mu + torch.exp(0.5 * logvar) * noise
        return self.decode(z), mu, logvar


def train_vae(fields, cfg: VaeConfig, atlas: Volume = None):
    """Train a VAE on a list of fields; returns (vae, per-iteration trace).

    Displacement-field lists train the shape VAE (atlas required for the
    warped-image term); intensity-field lists train the intensity VAE.
    """
    if not fields:
        raise ContractViolation("need at least one training field")
    tensors = []
    for f in fields:
        if isinstance(f, DisplacementField):
            tensors.append(f.tensor())
        elif isinstance(f, IntensityField):
            tensors.append(f.tensor())
        elif torch.is_tensor(f):
            tensors.append(f)
        else:
            raise ContractViolation(f"unsupported field type {type(f)!r}")
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ContractViolation(f"fields must share one shape, got {shapes}")
    shape = tensors[0].shape
    is_shape_vae = len(shape) == 4
    if is_shape_vae and atlas is None:
        raise ContractViolation("shape-VAE training requires the atlas volume")

    torch.manual_seed(cfg.seed)
    vae = DeformationVae(shape[1:] if is_shape_vae else shape,
                         3 if is_shape_vae else 1, cfg)
    if cfg.iterations == 0:
        return vae, []

    atlas_t = atlas.tensor() if atlas is not None else None
    if is_shape_vae:
        # the input-field warps never change; precompute them once
        with torch.no_grad():
            warped_inputs = [warp_image(atlas_t, t) for t in tensors]
    opt = torch.optim.Adam(vae.parameters(), lr=cfg.learning_rate,
                           betas=(cfg.adam_beta1, cfg.adam_beta2))
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "vae-noise"))
    pick = torch.Generator().manual_seed(derive_seed(cfg.seed, "vae-batch"))

    trace = []
    for step in range(cfg.iterations):
        idxs = torch.randint(len(tensors), (cfg.batch_size,), generator=pick)
        loss = 0.0
        for idx in idxs.tolist():
            x = tensors[idx]
            recon, mu, logvar = vae(x, generator=gen)
            kl = kl_loss(mu, logvar)
            if is_shape_vae:
                field_term = _sum_sq(x, recon)
                image_term = _sum_sq(warped_inputs[idx], warp_image(atlas_t, recon))
                total = field_term + image_term + cfg.beta * kl
            else:
                total = _sum_sq(x, recon) + cfg.beta * kl
            loss = loss + total
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"VAE loss became non-finite at iteration {step}",
                                   step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
    return vae, trace


def sample_field(vae: DeformationVae, sigma: float, generator: torch.Generator):
    """Decode a latent drawn from N(0, sigma^2 I).

    Returns a DisplacementField or IntensityField matching the VAE kind.
    sigma = 0 always decodes the origin, a single fixed field.
    """
    z = sigma * torch.randn(vae.cfg.latent_dim, generator=generator)
    with torch.no_grad():
        out = vae.decode(z)
    if vae.field_channels == 3:
        return DisplacementField(out.numpy())
    return IntensityField(out.numpy())


def save_vae(vae: DeformationVae, path):
    config = asdict(vae.cfg)
    config["field_shape"] = list(vae.field_shape)
    config["field_channels"] = vae.field_channels
    save_checkpoint(path, "vae", config, vae.cfg.seed, vae.state_dict())


def load_vae(path) -> DeformationVae:
    meta, arrays = load_checkpoint(path)
    if meta["kind"] != "vae":
        raise DtypeMismatchError(f"{path}: checkpoint kind {meta['kind']!r}")
    config = dict(meta["config"])
    field_shape = tuple(config.pop("field_shape"))
    field_channels = config.pop("field_channels")
    vae = DeformationVae(field_shape, field_channels, VaeConfig(**config))
    return load_into_module(vae, arrays)
