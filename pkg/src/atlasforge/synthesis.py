"""Synthesis of labeled training pairs from the atlas.

A sample is built by adding an intensity offset to the atlas, warping the
result through a displacement field, and warping the atlas label map
through the *same* field with nearest-neighbor interpolation:

    image  = clamp((atlas + offset) o field, 0, 1)
    labels = atlas_labels o field

Streams draw the fields either from the stored registration results
(uniformly, shape and intensity paired independently) or from trained
VAEs, and mix in the undeformed atlas itself with probability 1/(N+1).
"""

import enum
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ContractViolation
from .grids import DisplacementField, IntensityField, LabelMap, Volume
from .seeding import derive_seed
from .vae import DeformationVae, sample_field
from .warp import warp_image, warp_labels


class AugmentationMode(enum.Enum):
    REG_SHAPE_ONLY = "reg-shape"
    REG_SHAPE_INTENSITY = "reg-shape-intensity"
    VAE_SHAPE_ONLY = "vae-shape"
    VAE_SHAPE_INTENSITY = "vae-shape-intensity"

    @property
    def uses_vae(self):
        return self in (AugmentationMode.VAE_SHAPE_ONLY, AugmentationMode.VAE_SHAPE_INTENSITY)

    @property
    def uses_intensity(self):
        return self in (AugmentationMode.REG_SHAPE_INTENSITY, AugmentationMode.VAE_SHAPE_INTENSITY)


@dataclass(frozen=True)
class SynthesizedSample:
    image: Volume
    labels: LabelMap
    provenance: tuple  # (shape source, intensity source, draw index)


def synthesize(atlas: Volume, atlas_labels: LabelMap, shape_field: DisplacementField,
               intensity_field: IntensityField = None,
               provenance: tuple = ("manual", "manual", 0)) -> SynthesizedSample:
    """Apply one (shape, intensity) deformation pair to the atlas."""
    if atlas.shape != atlas_labels.shape:
        raise ContractViolation("atlas volume/labels shape mismatch")
    if shape_field.spatial_shape != atlas.shape:
        raise ContractViolation("shape field does not match atlas shape")
    if intensity_field is not None and intensity_field.shape != atlas.shape:
        raise ContractViolation("intensity field does not match atlas shape")

    atlas_t = atlas.tensor()
    if intensity_field is not None:
        atlas_t = atlas_t + intensity_field.tensor()
    with torch.no_grad():
        image = warp_image(atlas_t, shape_field.tensor()).clamp(0.0, 1.0)
        labels = warp_labels(atlas_labels.tensor(), shape_field.tensor())
    return SynthesizedSample(
        image=Volume(image.numpy()),
        labels=LabelMap(labels.numpy().astype(np.int32), atlas_labels.num_classes),
        provenance=provenance,
    )


def sample_stream(mode: AugmentationMode, atlas: Volume, atlas_labels: LabelMap,
                  shape_fields=None, intensity_fields=None,
                  shape_vae: DeformationVae = None, intensity_vae: DeformationVae = None,
                  sigma: float = 10.0, seed: int = 0, num_sources: int = None,
                  include_identity: bool = True):
    """Infinite, seed-deterministic iterator of SynthesizedSamples.

    REG modes draw uniformly from the stored registration fields (shape
    and intensity indices drawn independently); VAE modes decode fresh
    latents. With probability 1/(num_sources + 1) the undeformed atlas is
    emitted instead, so the one labeled example itself stays in training.
    """
    mode = AugmentationMode(mode)
    if mode.uses_vae:
        if shape_vae is None or (mode.uses_intensity and intensity_vae is None):
            raise ConfigError(f"{mode.name} requires trained VAEs")
        if num_sources is None:
            raise ConfigError("VAE streams need num_sources for the identity mix-in")
    else:
        if not shape_fields:
            raise ConfigError(f"{mode.name} requires stored shape fields")
        if mode.uses_intensity and not intensity_fields:
            raise ConfigError(f"{mode.name} requires stored intensity fields")
        if num_sources is None:
            num_sources = len(shape_fields)

    identity_prob = 1.0 / (num_sources + 1) if include_identity else 0.0
    zero_shape = DisplacementField.zeros(atlas.shape)
    rng = np.random.default_rng(derive_seed(seed, "stream", mode.value))
    vae_gen = torch.Generator().manual_seed(derive_seed(seed, "stream-vae", mode.value))

    draw = 0
    while True:
        if rng.uniform() < identity_prob:
            yield synthesize(atlas, atlas_labels, zero_shape, None,
                             provenance=(("identity",), ("none",), draw))
            draw += 1
            continue
        if mode.uses_vae:
            shape_field = sample_field(shape_vae, sigma, vae_gen)
            shape_src = ("vae", draw)
        else:
            i = int(rng.integers(len(shape_fields)))
            shape_field = shape_fields[i]
            shape_src = ("reg", i)
        if mode.uses_intensity:
            if mode.uses_vae:
                intensity_field = sample_field(intensity_vae, sigma, vae_gen)
                intensity_src = ("vae", draw)
            else:
                j = int(rng.integers(len(intensity_fields)))
                intensity_field = intensity_fields[j]
                intensity_src = ("reg", j)
        else:
            intensity_field = None
            intensity_src = ("none",)
        yield synthesize(atlas, atlas_labels, shape_field, intensity_field,
                         provenance=(shape_src, intensity_src, draw))
        draw += 1
