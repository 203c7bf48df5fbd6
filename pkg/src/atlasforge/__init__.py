"""atlasforge: one-shot 3D segmentation via sampled atlas deformations.

The pipeline registers a single labeled atlas against unlabeled volumes,
models the resulting shape and intensity deformation distributions with
two 3D VAEs, samples them to synthesize unlimited labeled volumes, and
trains a slice-wise 2D Unet on the synthetic stream.
"""

from .grids import DisplacementField, IntensityField, LabelMap, Volume
from .metrics import DiceReport, dice, evaluate
from .phantom import PhantomSpec, generate_population
from .synthesis import AugmentationMode, SynthesizedSample, synthesize
from .warp import spatial_gradient, warp_nearest, warp_trilinear

__all__ = [
    "AugmentationMode",
    "DiceReport",
    "DisplacementField",
    "IntensityField",
    "LabelMap",
    "PhantomSpec",
    "SynthesizedSample",
    "Volume",
    "dice",
    "evaluate",
    "generate_population",
    "spatial_gradient",
    "synthesize",
    "warp_nearest",
    "warp_trilinear",
]
