from enum import Enum
from pathlib import Path
from typing import Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..config import settings
from ..engine.errors import ConfigurationError


# Architecture Schemas
class LayerKind(str, Enum):
    FOLDING = "F"
    POOLING = "P"
    CGMM = "G"
    CLASSIFIER = "C"


class LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: LayerKind
    kernel: Optional[int] = Field(default=None, ge=1, description="Kernel size f (folding/pooling)")
    stride: Optional[int] = Field(default=None, ge=1, description="Stride (folding/pooling)")
    components: Optional[int] = Field(default=None, ge=1, description="Component count K (cGMM)")
    independent: bool = Field(default=False, description="Per-position parameters (cGMM)")
    classes: Optional[int] = Field(default=None, ge=2, description="Class count S (classifier)")

    @model_validator(mode="after")
    def check_fields(self):
        if self.kind in (LayerKind.FOLDING, LayerKind.POOLING):
            if self.kernel is None or self.stride is None:
                raise ValueError(f"{self.kind.value} layers need kernel and stride")
        elif self.kind == LayerKind.CGMM and self.components is None:
            raise ValueError("G layers need a component count")
        elif self.kind == LayerKind.CLASSIFIER and self.classes is None:
            raise ValueError("C layers need a class count")
        return self

    @property
    def token(self) -> str:
        if self.kind in (LayerKind.FOLDING, LayerKind.POOLING):
            return f"{self.kind.value}({self.kernel},{self.stride})"
        if self.kind == LayerKind.CGMM:
            return f"G({self.components})" + ("i" if self.independent else "")
        return f"C({self.classes})"


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "dcgmm"
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    shapes: tuple[tuple[int, int, int], ...] = Field(description="Inferred forward output shape per layer")

    @property
    def architecture(self) -> str:
        return "-".join(layer.token for layer in self.layers)


# Training Schemas
class TrainSchedule(BaseModel):
    epochs: int = Field(default_factory=lambda: settings.EPOCHS, ge=1)
    batch_size: int = Field(default_factory=lambda: settings.BATCH_SIZE, ge=1)
    lr_centroids: float = Field(default_factory=lambda: settings.LR_CENTROIDS, ge=0)
    lr_logits: float = Field(default_factory=lambda: settings.LR_LOGITS, ge=0)
    lr_precisions: float = Field(default_factory=lambda: settings.LR_PRECISIONS, ge=0)
    lr_classifier: float = Field(default_factory=lambda: settings.LR_CLASSIFIER, ge=0)
    delay_factor: float = Field(default_factory=lambda: settings.DELAY_FACTOR, ge=0)
    delays: Optional[list[float]] = Field(default=None, description="Explicit delay per cGMM ordinal")
    freeze_weights: bool = False
    freeze_precisions: bool = False
    seed: int = 0
    shuffle: bool = True
    log_every: int = Field(default=10, ge=1)
    eval_every: int = Field(default=0, ge=0, description="Held-out evaluation period in steps (0 = only at milestones)")
    progress: bool = False

    @field_validator("delays")
    @classmethod
    def check_delays(cls, value):
        if value is not None and any(not 0 <= d < 1 for d in value):
            raise ValueError("every delay must lie in [0, 1)")
        return value

    def delay_for(self, ordinal: int) -> float:
        """Delay fraction for the cGMM with 1-based ordinal `ordinal`."""
        if self.delays is not None and ordinal <= len(self.delays):
            return self.delays[ordinal - 1]
        delay = self.delay_factor * ordinal
        if not 0 <= delay < 1:
            raise ConfigurationError(f"delay {delay:.3f} for cGMM ordinal {ordinal} is outside [0, 1)")
        return delay


class TrainRecord(BaseModel):
    step: int
    layer: int
    split: str
    loss: float


# Generation Schemas
class SharpenConfig(BaseModel):
    iterations: int = Field(default_factory=lambda: settings.SHARPEN_ITERATIONS, ge=0)
    step: float = Field(default_factory=lambda: settings.SHARPEN_STEP, gt=0)
    target_layer: Optional[int] = Field(default=None, description="Layer index to maximize; default next-highest cGMM")


class SamplingPrior(str, Enum):
    """Component distribution used at a cGMM sampled without a control signal."""

    UNIFORM = "uniform"
    WEIGHTS = "weights"


class SamplerConfig(BaseModel):
    top_s: Optional[int] = Field(default=None, ge=1)
    seed: Optional[int] = None
    variance_scale: float = Field(default=1.0, gt=0)
    prior: SamplingPrior = SamplingPrior.UNIFORM


# Experiment Schemas
class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    architecture: str
    input_shape: str = "28x28x1"
    train_images: str
    train_labels: str
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    classes: Optional[str] = Field(default=None, description="Kept classes, e.g. '1-9' or '0,3,5'")
    per_class_cap: Optional[int] = Field(default=None, ge=1)
    output_dir: str = Field(default_factory=lambda: settings.OUTPUT_DIR)
    seed: Optional[int] = None

    # TrainSchedule overrides
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    lr_centroids: Optional[float] = None
    lr_logits: Optional[float] = None
    lr_precisions: Optional[float] = None
    lr_classifier: Optional[float] = None
    delay_factor: Optional[float] = None
    freeze_weights: Optional[bool] = None
    freeze_precisions: Optional[bool] = None

    # Sampler / sharpening
    top_s: Optional[int] = None
    variance_scale: float = 1.0
    prior: SamplingPrior = SamplingPrior.UNIFORM
    sharpen_iterations: int = Field(default_factory=lambda: settings.SHARPEN_ITERATIONS, ge=0)
    sharpen_step: float = Field(default_factory=lambda: settings.SHARPEN_STEP)

    @classmethod
    def from_file(cls, path, overrides: Optional[dict] = None) -> "ExperimentConfig":
        values = {k.strip().lower(): v for k, v in dotenv_values(path).items() if v is not None and v != ""}
        if overrides:
            values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            config = cls.model_validate(values)
        except ValidationError as e:
            raise ConfigurationError(f"invalid experiment config {path}: {e}") from e
        base = Path(path).resolve().parent
        for field in ("train_images", "train_labels", "test_images", "test_labels"):
            value = getattr(config, field)
            if value is not None and not Path(value).is_absolute():
                config = config.model_copy(update={field: str(base / value)})
        return config

    def schedule(self, training_overrides: Optional[dict] = None) -> TrainSchedule:
        keys = TrainSchedule.model_fields.keys()
        values = {k: getattr(self, k) for k in keys if hasattr(self, k) and getattr(self, k) is not None}
        if training_overrides:
            unknown = set(training_overrides) - set(keys)
            if unknown:
                raise ConfigurationError(f"unknown training keys: {', '.join(sorted(unknown))}")
            values.update(training_overrides)
        return TrainSchedule.model_validate(values)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(top_s=self.top_s, seed=self.seed, variance_scale=self.variance_scale, prior=self.prior)

    def sharpening(self) -> SharpenConfig:
        return SharpenConfig(iterations=self.sharpen_iterations, step=self.sharpen_step)


def load_training_overrides(path) -> dict:
    """Reads a key=value training config file into TrainSchedule overrides."""
    return {k.strip().lower(): v for k, v in dotenv_values(path).items() if v is not None and v != ""}
