"""Experiment configuration: JSON loading, validation, and presets.

A config file is a single JSON object; every stage section is optional
and falls back to the preset defaults. `desk_config` is the CI-runnable
default (32-cube phantoms, reduced widths and iteration counts);
`paper_config` keeps the full-scale training protocol for users with
real data and the hardware to match.
"""

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .intensity import IntensityAlignConfig
from .phantom import PhantomSpec
from .registration import RegistrationConfig
from .segmentation import SegmentationConfig
from .synthesis import AugmentationMode
from .vae import VaeConfig

STAGES = (
    "gen-data",
    "register",
    "align-intensity",
    "train-shape-vae",
    "train-intensity-vae",
    "synthesize",
    "train-seg",
    "evaluate",
    "ablate",
)

_MODE_VALUES = [m.value for m in AugmentationMode] + [m.name for m in AugmentationMode]

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string"},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "phantom": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "grid_size": {
                            "type": "array",
                            "items": {"type": "integer", "minimum": 8},
                            "minItems": 3,
                            "maxItems": 3,
                        },
                        "num_regions": {"type": "integer", "minimum": 2},
                        "base_intensities": {
                            "type": "array",
                            "items": {"type": "number", "minimum": 0, "maximum": 1},
                        },
                        "deform_amplitude": {"type": "number", "minimum": 0},
                        "deform_smoothness": {"type": "number", "exclusiveMinimum": 0},
                        "noise_sigma": {"type": "number", "minimum": 0},
                        "seed": {"type": "integer", "minimum": 0},
                    },
                },
                "num_unlabeled": {"type": "integer", "minimum": 1},
                "num_test": {"type": "integer", "minimum": 1},
                "population_dir": {"type": "string"},
            },
        },
        "registration": {"type": "object"},
        "intensity": {"type": "object"},
        "shape_vae": {"type": "object"},
        "intensity_vae": {"type": "object"},
        "segmentation": {"type": "object"},
        "synthesis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"type": "string", "enum": _MODE_VALUES},
                "sigma": {"type": "number", "minimum": 0},
                "count": {"type": "integer", "minimum": 1},
            },
        },
    },
}


@dataclass
class DataConfig:
    phantom: PhantomSpec = None
    num_unlabeled: int = 10
    num_test: int = 5
    population_dir: str = None

    def __post_init__(self):
        if self.phantom is None and self.population_dir is None:
            raise ConfigError("data needs either a phantom spec or a population_dir")
        if self.num_unlabeled < 1 or self.num_test < 1:
            raise ConfigError("num_unlabeled and num_test must be >= 1")


@dataclass
class ExperimentConfig:
    data: DataConfig
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    intensity: IntensityAlignConfig = field(default_factory=IntensityAlignConfig)
    shape_vae: VaeConfig = field(default_factory=VaeConfig)
    intensity_vae: VaeConfig = field(default_factory=VaeConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    synthesis_mode: AugmentationMode = AugmentationMode.VAE_SHAPE_INTENSITY
    synthesis_sigma: float = 10.0
    synthesis_count: int = 8
    seed: int = 0
    out_dir: str = None

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "data": {
                "num_unlabeled": self.data.num_unlabeled,
                "num_test": self.data.num_test,
            },
            "registration": asdict(self.registration),
            "intensity": asdict(self.intensity),
            "shape_vae": asdict(self.shape_vae),
            "intensity_vae": asdict(self.intensity_vae),
            "segmentation": asdict(self.segmentation),
            "synthesis": {
                "mode": self.synthesis_mode.value,
                "sigma": self.synthesis_sigma,
                "count": self.synthesis_count,
            },
        }
        if self.data.phantom is not None:
            d["data"]["phantom"] = asdict(self.data.phantom)
        if self.data.population_dir is not None:
            d["data"]["population_dir"] = self.data.population_dir
        if self.out_dir is not None:
            d["out_dir"] = self.out_dir
        return d


def _build(cls, overrides: dict, defaults):
    """Instantiate a config dataclass from defaults plus JSON overrides."""
    base = asdict(defaults)
    unknown = set(overrides) - set(base)
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    base.update(overrides)
    try:
        return cls(**base)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def config_from_dict(raw: dict, defaults: ExperimentConfig = None) -> ExperimentConfig:
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config schema violation: {exc.message}") from exc
    defaults = defaults or desk_config()

    data_raw = copy.deepcopy(raw.get("data", {}))
    phantom_raw = data_raw.pop("phantom", None)
    if phantom_raw is not None:
        if "grid_size" in phantom_raw:
            phantom_raw["grid_size"] = tuple(phantom_raw["grid_size"])
        if "base_intensities" in phantom_raw:
            phantom_raw["base_intensities"] = tuple(phantom_raw["base_intensities"])
        phantom = _build(PhantomSpec, phantom_raw,
                         defaults.data.phantom or PhantomSpec())
    else:
        phantom = None if "population_dir" in data_raw else defaults.data.phantom
    data = DataConfig(
        phantom=phantom,
        num_unlabeled=data_raw.get("num_unlabeled", defaults.data.num_unlabeled),
        num_test=data_raw.get("num_test", defaults.data.num_test),
        population_dir=data_raw.get("population_dir"),
    )

    synth = raw.get("synthesis", {})
    mode_raw = synth.get("mode", defaults.synthesis_mode.value)
    mode = (AugmentationMode[mode_raw] if mode_raw in AugmentationMode.__members__
            else AugmentationMode(mode_raw))

    return ExperimentConfig(
        data=data,
        registration=_build(RegistrationConfig, raw.get("registration", {}),
                            defaults.registration),
        intensity=_build(IntensityAlignConfig, raw.get("intensity", {}),
                         defaults.intensity),
        shape_vae=_build(VaeConfig, raw.get("shape_vae", {}), defaults.shape_vae),
        intensity_vae=_build(VaeConfig, raw.get("intensity_vae", {}),
                             defaults.intensity_vae),
        segmentation=_build(SegmentationConfig, raw.get("segmentation", {}),
                            defaults.segmentation),
        synthesis_mode=mode,
        synthesis_sigma=synth.get("sigma", defaults.synthesis_sigma),
        synthesis_count=synth.get("count", defaults.synthesis_count),
        seed=raw.get("seed", defaults.seed),
        out_dir=raw.get("out_dir", defaults.out_dir),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(raw)


def desk_config(seed: int = 0) -> ExperimentConfig:
    """CI-runnable preset: 32-cube phantoms, reduced widths and iterations."""
    vae = dict(
        latent_dim=64,
        encoder_channels=(8, 16, 16, 16),
        iterations=2000,
        learning_rate=1e-3,
    )
    return ExperimentConfig(
        data=DataConfig(
            phantom=PhantomSpec(
                grid_size=(32, 32, 32),
                num_regions=4,
                base_intensities=(0.05, 0.35, 0.65, 0.95),
                deform_amplitude=5.5,
                deform_smoothness=2.5,
                noise_sigma=0.04,
                seed=0,
            ),
            num_unlabeled=10,
            num_test=5,
        ),
        registration=RegistrationConfig(
            encoder_channels=(8, 16, 16, 16),
            decoder_channels=(16, 16, 16, 16, 8, 8),
            smoothness_weight=0.1,
            epochs=25,
            learning_rate=1e-3,
        ),
        intensity=IntensityAlignConfig(
            encoder_channels=(8, 16, 16, 16),
            decoder_channels=(16, 16, 16, 16, 8, 8),
            epochs=25,
            learning_rate=1e-3,
        ),
        shape_vae=VaeConfig(**vae),
        intensity_vae=VaeConfig(**vae),
        segmentation=SegmentationConfig(
            num_classes=4,
            encoder_channels=(8, 16, 32, 64, 64),
            decoder_channels=(64, 32, 16, 8, 8),
            iterations=3000,
            learning_rate=1e-3,
        ),
        synthesis_mode=AugmentationMode.VAE_SHAPE_INTENSITY,
        synthesis_sigma=10.0,
        synthesis_count=8,
        seed=seed,
    )


def paper_config(seed: int = 0) -> ExperimentConfig:
    """Full-scale protocol (160x160x128 volumes, 82 unlabeled subjects)."""
    return ExperimentConfig(
        data=DataConfig(
            phantom=PhantomSpec(
                grid_size=(160, 160, 128),
                num_regions=4,
                base_intensities=(0.05, 0.35, 0.65, 0.95),
                deform_amplitude=12.0,
                deform_smoothness=12.0,
                noise_sigma=0.01,
                seed=0,
            ),
            num_unlabeled=82,
            num_test=20,
        ),
        registration=RegistrationConfig(),          # 500 epochs, lr 1e-4
        intensity=IntensityAlignConfig(),           # 500 epochs, lambda 0.02
        shape_vae=VaeConfig(),                      # latent 512, 40k iterations
        intensity_vae=VaeConfig(),
        segmentation=SegmentationConfig(num_classes=29),  # 28 regions + background
        synthesis_mode=AugmentationMode.VAE_SHAPE_INTENSITY,
        synthesis_sigma=10.0,
        synthesis_count=8,
        seed=seed,
    )
