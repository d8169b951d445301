"""Versioned JSON experiment configuration.

Every section rejects unknown keys. ``load_config`` turns validation failures
into ``ConfigError`` messages that name the offending field path.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveFloat, PositiveInt, ValidationError, field_validator, model_validator

from .clb import ClbParams
from .errors import ConfigError
from .gan.networks import DiscriminatorSpec, GeneratorSpec
from .measurement import MeasurementConfig

CONFIG_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ClbSection(_Strict):
    preset: Optional[Literal["opex", "simpiso"]] = "opex"
    image_size: tuple[PositiveInt, PositiveInt] = (256, 256)
    # rescale mean_clusters from the 256x256 preset so cluster density stays fixed
    scale_density_from_256: bool = False
    mean_clusters: Optional[PositiveFloat] = None
    mean_lumps_per_cluster: Optional[PositiveFloat] = None
    cluster_spread: Optional[PositiveFloat] = None
    lump_amplitude: Optional[float] = None
    lump_shape: Optional[PositiveFloat] = None
    lump_exponent: Optional[PositiveFloat] = None
    lump_lengths: Optional[tuple[PositiveFloat, PositiveFloat]] = None

    def params(self) -> ClbParams:
        overrides = {
            k: v
            for k, v in self.model_dump().items()
            if k not in ("preset", "image_size", "scale_density_from_256") and v is not None
        }
        if self.preset is None:
            missing = {"mean_clusters", "mean_lumps_per_cluster", "cluster_spread", "lump_amplitude", "lump_shape", "lump_exponent", "lump_lengths"} - set(overrides)
            if missing:
                raise ConfigError(f"clb section without preset must set {sorted(missing)}")
            return ClbParams(**overrides, image_size=self.image_size, preset_name="custom")
        if self.scale_density_from_256:
            base = ClbParams.preset(self.preset, (256, 256), **overrides)
            return base.scaled_to(self.image_size)
        return ClbParams.preset(self.preset, self.image_size, **overrides)


class IngestSection(_Strict):
    directory: str
    size: tuple[PositiveInt, PositiveInt] = (256, 256)
    normalization: Literal["percentile", "minmax", "none"] = "percentile"


class MeasurementSection(_Strict):
    system_operator: Literal["identity"] = "identity"
    noise_model: Literal["gaussian_additive", "none"] = "gaussian_additive"
    noise_mean: float = 0.0
    noise_std: float = Field(0.04, ge=0)
    seed_policy: Literal["fresh_per_call", "fixed"] = "fresh_per_call"

    def build(self) -> MeasurementConfig:
        return MeasurementConfig(**self.model_dump())


class GeneratorSection(_Strict):
    base_width: PositiveInt = 64
    n_residual_blocks: Optional[NonNegativeInt] = None
    downsampling_levels: NonNegativeInt = 2
    norm: Literal["instance", "none"] = "instance"
    near_identity: bool = False


class DiscriminatorSection(_Strict):
    n_layers: PositiveInt = 3
    base_width: PositiveInt = 64
    norm: Literal["instance", "none"] = "instance"


class ModelSection(_Strict):
    variant: Literal["ambient", "cyclegan"] = "ambient"
    loss_family: Literal["least_squares", "cross_entropy"] = "least_squares"
    lambda_cyc: float = Field(10.0, ge=0)
    cycle_norm: Literal["l2", "l1"] = "l2"
    lambda_identity: float = Field(0.0, ge=0)
    image_pool: bool = False
    generator: GeneratorSection = GeneratorSection()
    discriminator: DiscriminatorSection = DiscriminatorSection()

    @field_validator("image_pool")
    @classmethod
    def _no_pool(cls, v):
        if v:
            raise ValueError("the image pool / replay buffer is not supported in this version")
        return v


class TrainSection(_Strict):
    learning_rate: PositiveFloat = 2e-4
    batch_size: PositiveInt = 10
    total_steps: NonNegativeInt = 20000
    checkpoint_every: PositiveInt = 1000
    n_images_x: PositiveInt = 20000
    n_images_y: PositiveInt = 20000
    x_manifest: Optional[str] = None
    y_manifest: Optional[str] = None


class SeedSection(_Strict):
    model_init: NonNegativeInt = 0
    data_shuffle: NonNegativeInt = 1
    noise: NonNegativeInt = 2
    data_x: NonNegativeInt = 100_000
    data_y: NonNegativeInt = 200_000


class EvalSection(_Strict):
    # evaluation phantoms translated per model; also the size of the clean truth set
    n_images: PositiveInt = 6500
    metrics: tuple[Literal["fid", "raps", "ssim", "ho"], ...] = ("fid", "raps", "ssim", "ho")
    embedder: Literal["random_projection", "downsample", "canonical"] = "random_projection"
    embedder_dim: PositiveInt = 64
    embedder_seed: NonNegativeInt = 0
    embedder_path: Optional[str] = None
    n_pairs: PositiveInt = 2000
    signal_amplitude: float = 0.3
    signal_std: PositiveFloat = 0.7
    patch_size: PositiveInt = 64
    ho_regularization: float = Field(1e-3, ge=0)
    ho_train: PositiveInt = 4500
    ho_test: PositiveInt = 1000
    seed: NonNegativeInt = 0
    interpret_threshold: float = Field(0.5, ge=0, le=1)


class TrainConfig(_Strict):
    """Everything a training run needs; archived as ``config.json`` in the run directory."""

    version: Literal[1] = CONFIG_VERSION
    image_size: tuple[PositiveInt, PositiveInt] = (256, 256)
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    seeds: SeedSection = SeedSection()
    measurement: MeasurementSection = MeasurementSection()

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(image_size=self.image_size, **self.model.generator.model_dump())

    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(**self.model.discriminator.model_dump())


class ExperimentConfig(_Strict):
    version: Literal[1] = CONFIG_VERSION
    clb_x: ClbSection = ClbSection(preset="opex")
    clb_y: Optional[ClbSection] = None
    ingest_y: Optional[IngestSection] = None
    measurement: MeasurementSection = MeasurementSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    output_dir: str = "runs/experiment"
    seeds: SeedSection = SeedSection()

    @model_validator(mode="after")
    def _one_y_source(self):
        if (self.clb_y is None) == (self.ingest_y is None):
            raise ValueError("exactly one of clb_y or ingest_y must be given")
        y_size = self.clb_y.image_size if self.clb_y else self.ingest_y.size
        if tuple(y_size) != tuple(self.clb_x.image_size):
            raise ValueError(f"clb_x image_size {self.clb_x.image_size} differs from Y size {y_size}")
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            image_size=self.clb_x.image_size,
            model=self.model,
            train=self.train,
            seeds=self.seeds,
            measurement=self.measurement,
        )


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(doc: dict, model=ExperimentConfig):
    try:
        return model.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path: str | Path, model=ExperimentConfig):
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(doc, model)


def dump_config(cfg: BaseModel) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2)
