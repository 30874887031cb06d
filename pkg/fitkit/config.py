##################################################################################################
#                                        OVERVIEW                                                #
#                                                                                                #
# Run configuration: a YAML document validated by pydantic models. Unknown keys are rejected at  #
# every level, and every constraint is checked before any computation starts. Command-line flags #
# are applied on top of the file values through `apply_overrides`.                               #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

from typing import List, Literal, Optional

import yaml                             # Run configuration files
from pydantic import BaseModel, ConfigDict, Field, field_validator
from pydantic import ValidationError as PydanticValidationError

from fitkit.data import load_idx_dataset, make_synthetic_digits
from fitkit.errors import ValidationError
from fitkit.models import DESK_FILTERS, TrainConfig, build_model, desk_cnn_specs, mlp_specs
from utils.settings import DEFAULT_SEED, MAX_WORKERS, OUTPUT_DIR

##################################################################################################
#                                        SCHEMA                                                  #
##################################################################################################

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(_Strict):
    kind: Literal["synthetic", "idx"] = "synthetic"
    num_train: int = Field(2000, ge=1)
    num_test: int = Field(500, ge=1)
    num_classes: int = Field(10, ge=2, le=10)
    image_size: int = Field(8, ge=4)
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None


class ModelConfig(_Strict):
    kind: Literal["desk_cnn", "mlp"] = "desk_cnn"
    filters: List[int] = Field(default_factory=lambda: list(DESK_FILTERS))
    batchnorm: bool = False
    hidden: List[int] = Field(default_factory=lambda: [32])

    @field_validator("filters", "hidden")
    @classmethod
    def _positive(cls, values):
        if any(v < 1 for v in values):
            raise ValueError("layer widths must be positive")
        return values


class TrainSection(_Strict):
    epochs: int = Field(50, ge=1)
    lr: float = Field(0.01, gt=0)
    schedule: Literal["cosine", "constant"] = "cosine"
    batch_size: int = Field(32, ge=1)
    optimizer: Literal["adam", "sgd"] = "adam"


class QATSection(_Strict):
    epochs: int = Field(30, ge=1)
    lr_scale: float = Field(0.1, gt=0)


class QuantizationSection(_Strict):
    bits: List[int] = Field(default_factory=lambda: [8, 6, 4, 3])
    ema_decay: float = Field(0.9, gt=0, le=1)

    @field_validator("bits")
    @classmethod
    def _valid_bits(cls, values):
        if not values or any(b < 2 for b in values):
            raise ValueError("bits must be a nonempty list of integers >= 2")
        return values


class TraceSection(_Strict):
    batch_size: int = Field(32, ge=1)
    tolerance: float = Field(0.01, ge=0)
    max_iters: int = Field(200, ge=1)
    window: int = Field(20, ge=2)
    include_twelfth: bool = False


class SweepSection(_Strict):
    n_configs: int = Field(24, ge=3)
    jobs: int = Field(MAX_WORKERS, ge=1)


class BenchSection(_Strict):
    batch_size: int = Field(32, ge=1)
    iters: int = Field(50, ge=2)
    repeats: int = Field(3, ge=1)
    batch_sizes: List[int] = Field(default_factory=lambda: [8, 16, 32, 64])

    @field_validator("batch_sizes")
    @classmethod
    def _positive(cls, values):
        if any(v < 1 for v in values):
            raise ValueError("batch sizes must be positive")
        return values


class RunConfig(_Strict):
    """Complete, validated description of a pipeline run."""

    seed: int = DEFAULT_SEED
    output_dir: str = OUTPUT_DIR
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainSection = Field(default_factory=TrainSection)
    qat: QATSection = Field(default_factory=QATSection)
    quantization: QuantizationSection = Field(default_factory=QuantizationSection)
    trace: TraceSection = Field(default_factory=TraceSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    bench: BenchSection = Field(default_factory=BenchSection)

##################################################################################################
#                                        LOADING                                                 #
##################################################################################################

def _format_errors(error):
    return "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in error.errors())


def parse_run_config(document):
    """Validates a mapping; raises ValidationError with one message per offending field."""

    try:
        return RunConfig.model_validate(document or {})
    except PydanticValidationError as e:
        raise ValidationError(f"Invalid run configuration: {_format_errors(e)}") from None


def load_run_config(path=None):
    """Reads and validates a YAML run configuration (defaults only when `path` is None)."""

    if path is None:
        return parse_run_config({})
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ValidationError(f"Cannot read run configuration {path}: {e}") from None
    if document is not None and not isinstance(document, dict):
        raise ValidationError(f"Run configuration {path} must be a mapping.")
    return parse_run_config(document)


def apply_overrides(config, **overrides):
    """
    Returns a re-validated copy with command-line values applied.

    Keys: seed, tolerance, max_iters, bits, jobs, output_dir. None values are ignored.
    """

    document = config.model_dump()
    targets = {
        "seed": ("seed",), "output_dir": ("output_dir",), "tolerance": ("trace", "tolerance"),
        "max_iters": ("trace", "max_iters"), "bits": ("quantization", "bits"), "jobs": ("sweep", "jobs"),
    }
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in targets:
            raise ValidationError(f"Unknown override '{key}'.")
        *parents, leaf = targets[key]
        node = document
        for p in parents:
            node = node[p]
        node[leaf] = value
    return parse_run_config(document)

##################################################################################################
#                                        BUILDERS                                                #
##################################################################################################

def build_datasets(config):
    """Train and test datasets described by the configuration."""

    ds = config.dataset
    if ds.kind == "synthetic":
        train = make_synthetic_digits(ds.num_train, ds.num_classes, ds.image_size, config.seed, "train")
        test = make_synthetic_digits(ds.num_test, ds.num_classes, ds.image_size, config.seed, "test")
        return train, test
    missing = [k for k in ("train_images", "train_labels", "test_images", "test_labels") if not getattr(ds, k)]
    if missing:
        raise ValidationError(f"IDX dataset needs paths for: {', '.join(missing)}.")
    train = load_idx_dataset(ds.train_images, ds.train_labels, ds.image_size, "train", ds.num_classes, ds.num_train)
    test = load_idx_dataset(ds.test_images, ds.test_labels, ds.image_size, "test", ds.num_classes, ds.num_test)
    return train, test


def build_configured_model(config, input_shape):
    m = config.model
    classes = config.dataset.num_classes
    if m.kind == "desk_cnn":
        specs = desk_cnn_specs(classes, m.filters, m.batchnorm)
    else:
        specs = mlp_specs(m.hidden, classes, flatten=True)
    return build_model(specs, classes, input_shape, config.seed)


def train_config(config):
    t = config.train
    return TrainConfig(t.epochs, t.lr, t.schedule, t.batch_size, config.seed, t.optimizer)


def qat_config(config):
    """Fine-tuning recipe: the training recipe with fewer epochs and a reduced learning rate."""

    t = config.train
    return TrainConfig(config.qat.epochs, t.lr * config.qat.lr_scale, t.schedule, t.batch_size, config.seed,
                       t.optimizer)
