##################################################################################################
#                                        OVERVIEW                                                #
#                                                                                                #
# Small convolutional classifiers: layer specs, shape-checked construction, forward pass with    #
# hooks, training, evaluation and portable checkpoints.                                          #
#                                                                                                #
# Quantizable blocks are the conv and dense layers. Each block owns one activation site: the     #
# block output after its batch-norm / ReLU run and before pooling; for the head it is the        #
# logits. Forward hooks see every block's weight, its per-example linear view and its site,      #
# which is how fake quantization, range calibration and per-example gradients plug in.           #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

import base64
import copy
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from tqdm import tqdm                   # Progress bar

from fitkit import functional as F
from fitkit import tensor as T
from fitkit.errors import NumericalError, ShapeError, ValidationError
from fitkit.optim import learning_rate, make_optimizer
from fitkit.tensor import Tensor
from utils.logs_config import logger    # Logs and events
from utils.settings import SHOW_PROGRESS

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

LAYER_KINDS = ("conv", "maxpool", "batchnorm", "relu", "flatten", "dense")
QUANTIZABLE_KINDS = ("conv", "dense")
SITE_RUN_KINDS = ("batchnorm", "relu")       # Layers folded into the preceding block's site

DESK_FILTERS = (8, 16, 32)                   # Conv filter counts of the desk CNN
CHECKPOINT_FORMAT_VERSION = 1
EVAL_BATCH_SIZE = 256

##################################################################################################
#                                        SPECS AND BLOCKS                                        #
##################################################################################################

@dataclass
class LayerSpec:
    """
    One layer of a sequential model.

    Attributes:
        kind (str): conv, maxpool, batchnorm, relu, flatten or dense.
        name (str): Unique identifier.
        channels (int, optional): Output channels (conv) or units (dense).
        kernel_size (int): Conv kernel side.
        stride (int): Conv stride.
        padding (int, optional): Conv zero padding; defaults to kernel_size // 2.
        pool (int): Max-pool window and stride.
        in_features (int, optional): Declared dense input width, checked against the actual one.
    """

    kind: str
    name: str
    channels: int = None
    kernel_size: int = 3
    stride: int = 1
    padding: int = None
    pool: int = 2
    in_features: int = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, document):
        return cls(**document)


@dataclass
class ParameterBlock:
    """A quantizable layer's parameters. `n` counts the weights only (biases excluded)."""

    name: str
    kind: str
    weights: Tensor
    bias: Tensor = None
    bn_gamma: Tensor = None

    @property
    def n(self):
        return self.weights.size


class ForwardHooks:
    """No-op base for forward interceptors. Subclasses override what they need."""

    def on_weight(self, block, weight):
        return weight

    def on_linear(self, block, parts):
        pass

    def on_activation(self, block, activation):
        return activation


@dataclass
class TrainConfig:
    """
    Training hyperparameters.

    A learning rate of 0 is accepted and leaves the parameters unchanged.
    """

    epochs: int = 50
    lr: float = 0.01
    schedule: str = "cosine"
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}.")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}.")
        if not self.lr >= 0:
            raise ValidationError(f"lr must be >= 0, got {self.lr}.")
        if self.schedule not in ("cosine", "constant"):
            raise ValidationError(f"schedule must be 'cosine' or 'constant', got '{self.schedule}'.")


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)

    def to_rows(self):
        return [{"epoch": i, "loss": loss} for i, loss in enumerate(self.losses)]


@dataclass
class EvalResult:
    accuracy: float
    loss: float

##################################################################################################
#                                        MODEL                                                   #
##################################################################################################

class Model:
    """
    Sequential classifier built from LayerSpecs.

    Args:
        specs (list[LayerSpec]): Layers from input to the dense head.
        input_shape (tuple[int, ...]): (C, H, W) or (F,) per example.
        num_classes (int): Output width of the head.
        seed (int): Seed of the He-normal initialization.

    Raises:
        ShapeError: Naming the first layer whose shape does not fit.
        ValidationError: On duplicate names or unknown kinds.
    """

    def __init__(self, specs, input_shape, num_classes, seed=0):
        self.specs = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in specs]
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        self.params = {}
        self.bn_states = {}
        self.blocks = []
        self.training = False
        self._site_after = {}
        self._build(np.random.default_rng(self.seed))

    # --- construction --------------------------------------------------------------------------

    def _build(self, rng):
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ValidationError(f"Layer names must be unique: {names}.")
        if not self.specs:
            raise ShapeError("A model needs at least one layer.")

        shape = self.input_shape
        current = None
        for i, spec in enumerate(self.specs):
            if spec.kind not in LAYER_KINDS:
                raise ValidationError(f"Layer '{spec.name}' has unknown kind '{spec.kind}'.")
            shape, current = self._add_layer(spec, shape, current, rng)
            if spec.kind in QUANTIZABLE_KINDS:
                j = i
                while j + 1 < len(self.specs) and self.specs[j + 1].kind in SITE_RUN_KINDS:
                    j += 1
                self._site_after[j] = current

        last = self.specs[-1]
        if last.kind != "dense" or shape != (self.num_classes,):
            raise ShapeError(
                f"Layer '{last.name}' must be a dense head with {self.num_classes} outputs, got {shape}.",
                layer=last.name,
            )

    def _add_layer(self, spec, shape, current, rng):
        name = spec.name
        if spec.kind == "conv":
            if len(shape) != 3:
                raise ShapeError(f"Conv layer '{name}' expects (C, H, W) input, got {shape}.", layer=name)
            c, h, w = shape
            k = spec.kernel_size
            pad = spec.padding if spec.padding is not None else k // 2
            out_h = F.conv_output_size(h, k, spec.stride, pad)
            out_w = F.conv_output_size(w, k, spec.stride, pad)
            if out_h < 1 or out_w < 1 or not spec.channels:
                raise ShapeError(f"Conv layer '{name}' does not fit input {shape}.", layer=name)
            weight = rng.normal(0.0, np.sqrt(2.0 / (c * k * k)), size=(spec.channels, c, k, k))
            block = self._add_block(name, "conv", weight, spec.channels)
            return (spec.channels, out_h, out_w), block

        if spec.kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"Dense layer '{name}' expects flat input, got {shape}.", layer=name)
            width = shape[0]
            if spec.in_features is not None and spec.in_features != width:
                raise ShapeError(
                    f"Dense layer '{name}' declares {spec.in_features} inputs but receives {width}.", layer=name
                )
            if not spec.channels:
                raise ShapeError(f"Dense layer '{name}' needs a positive unit count.", layer=name)
            weight = rng.normal(0.0, np.sqrt(2.0 / width), size=(spec.channels, width))
            block = self._add_block(name, "dense", weight, spec.channels)
            return (spec.channels,), block

        if spec.kind == "batchnorm":
            channels = shape[0]
            gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
            self.params[f"{name}.gamma"] = gamma
            self.params[f"{name}.beta"] = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
            self.bn_states[name] = F.BatchNormState(np.zeros(channels), np.ones(channels))
            if current is not None and current.bn_gamma is None:
                current.bn_gamma = gamma
            return shape, current

        if spec.kind == "maxpool":
            if len(shape) != 3:
                raise ShapeError(f"Max-pool layer '{name}' expects (C, H, W) input, got {shape}.", layer=name)
            c, h, w = shape
            out_h, out_w = (h - spec.pool) // spec.pool + 1, (w - spec.pool) // spec.pool + 1
            if out_h < 1 or out_w < 1:
                raise ShapeError(f"Max-pool layer '{name}' does not fit input {shape}.", layer=name)
            return (c, out_h, out_w), current

        if spec.kind == "flatten":
            return (int(np.prod(shape)),), current

        return shape, current  # relu

    def _add_block(self, name, kind, weight, out_features):
        w = Tensor(weight, requires_grad=True, name=f"{name}.weight")
        b = Tensor(np.zeros(out_features), requires_grad=True, name=f"{name}.bias")
        self.params[f"{name}.weight"] = w
        self.params[f"{name}.bias"] = b
        block = ParameterBlock(name, kind, w, b)
        self.blocks.append(block)
        return block

    # --- accessors -----------------------------------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def block(self, name):
        for block in self.blocks:
            if block.name == name:
                return block
        raise ValidationError(f"Model has no quantizable layer '{name}'.")

    @property
    def block_names(self):
        return [b.name for b in self.blocks]

    @property
    def num_quantizable(self):
        return int(sum(b.n for b in self.blocks))

    @property
    def has_batchnorm(self):
        return bool(self.bn_states)

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def copy(self):
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.grad = None
        return clone

    # --- forward -------------------------------------------------------------------------------

    def forward(self, inputs, hooks=(), overrides=None):
        """
        Computes logits.

        Args:
            inputs (np.ndarray | Tensor): (N, *input_shape) batch.
            hooks (Sequence[ForwardHooks]): Interceptors applied in order.
            overrides (dict[str, Tensor], optional): Replacement tensors keyed like `params`
                (e.g. "conv1.weight"), used to build losses as functions of free variables.

        Returns:
            Tensor: (N, num_classes) logits.
        """

        x = T.as_tensor(inputs)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"Model expects inputs of shape (N, {self.input_shape}), got {x.shape}.", layer="input")
        overrides = overrides or {}
        param = lambda key: overrides.get(key, self.params[key])  # noqa: E731
        blocks = iter(self.blocks)

        for i, spec in enumerate(self.specs):
            if spec.kind in QUANTIZABLE_KINDS:
                block = next(blocks)
                w = param(f"{spec.name}.weight")
                for hook in hooks:
                    w = hook.on_weight(block, w)
                if spec.kind == "conv":
                    pad = spec.padding if spec.padding is not None else spec.kernel_size // 2
                    x, parts = F.conv2d(x, w, param(f"{spec.name}.bias"), spec.stride, pad)
                else:
                    x, parts = F.dense(x, w, param(f"{spec.name}.bias"))
                for hook in hooks:
                    hook.on_linear(block, parts)
            elif spec.kind == "batchnorm":
                x = F.batch_norm(
                    x, param(f"{spec.name}.gamma"), param(f"{spec.name}.beta"),
                    self.bn_states[spec.name], self.training,
                )
            elif spec.kind == "relu":
                x = x.relu()
            elif spec.kind == "maxpool":
                x = F.max_pool2d(x, spec.pool)
            elif spec.kind == "flatten":
                x = x.reshape(x.shape[0], -1)

            site = self._site_after.get(i)
            if site is not None:
                for hook in hooks:
                    x = hook.on_activation(site, x)
        return x

    __call__ = forward

    def loss(self, inputs, labels, reduction="mean", hooks=(), overrides=None):
        return F.softmax_cross_entropy(self.forward(inputs, hooks, overrides), labels, reduction)


def build_model(specs, num_classes, input_shape, seed=0):
    """Builds and initializes a Model; see `Model` for the validation rules."""

    model = Model(specs, input_shape, num_classes, seed)
    logger.debug(f"🔗 Built model with {len(model.blocks)} quantizable blocks ({model.num_quantizable} weights).")
    return model


def desk_cnn_specs(num_classes, filters=DESK_FILTERS, batchnorm=False):
    """Three conv blocks (max-pool after the first two) and a dense head."""

    specs = []
    for i, channels in enumerate(filters, start=1):
        specs.append(LayerSpec("conv", f"conv{i}", channels=channels, kernel_size=3))
        if batchnorm:
            specs.append(LayerSpec("batchnorm", f"bn{i}"))
        specs.append(LayerSpec("relu", f"relu{i}"))
        if i < len(filters):
            specs.append(LayerSpec("maxpool", f"pool{i}", pool=2))
    specs.append(LayerSpec("flatten", "flatten"))
    specs.append(LayerSpec("dense", "fc", channels=num_classes))
    return specs


def mlp_specs(hidden, num_classes, flatten=False):
    """Dense/ReLU stack; `flatten` prepends a flatten layer for image inputs."""

    specs = [LayerSpec("flatten", "flatten")] if flatten else []
    for i, units in enumerate(hidden, start=1):
        specs.append(LayerSpec("dense", f"fc{i}", channels=units))
        specs.append(LayerSpec("relu", f"relu{i}"))
    specs.append(LayerSpec("dense", "head", channels=num_classes))
    return specs

##################################################################################################
#                                        TRAINING                                                #
##################################################################################################

def train(model, dataset, cfg, hooks=(), desc="🚀 train"):
    """
    Trains `model` in place with mini-batch cross-entropy.

    Args:
        model (Model): Model to train.
        dataset (Dataset): Training data.
        cfg (TrainConfig): Hyperparameters; `cfg.seed` drives the batch order.
        hooks (Sequence[ForwardHooks]): Forward interceptors (fake quantization during QAT).
        desc (str): Progress-bar label.

    Returns:
        tuple[Model, TrainHistory]: The same model (left in eval mode) and per-epoch mean losses.

    Raises:
        ValidationError: If the dataset is empty.
        NumericalError: If the loss becomes non-finite, with the epoch index.
    """

    if len(dataset) == 0:
        raise ValidationError("Cannot train on an empty dataset.")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    optimizer = make_optimizer(cfg.optimizer, params)
    history = TrainHistory()

    model.train()
    try:
        for epoch in tqdm(range(cfg.epochs), desc=desc, disable=not SHOW_PROGRESS, leave=False):
            lr = learning_rate(cfg.lr, epoch, cfg.epochs, cfg.schedule)
            total = 0.0
            for inputs, labels in dataset.batches(cfg.batch_size, rng):
                loss = model.loss(inputs, labels, hooks=hooks)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericalError(f"Training diverged at epoch {epoch} (loss {value}).", epoch=epoch)
                optimizer.step(T.grad(loss, params), lr)
                total += value * len(labels)
            history.losses.append(total / len(dataset))
            logger.debug(f"📊 epoch {epoch}: loss {history.losses[-1]:.6f} (lr {lr:.5f})")
    finally:
        model.eval()
    return model, history


def evaluate(model, dataset, hooks=(), batch_size=EVAL_BATCH_SIZE):
    """
    Accuracy and mean cross-entropy in evaluation mode.

    Raises:
        ValidationError: On an empty dataset or a head width different from the class count.
    """

    if len(dataset) == 0:
        raise ValidationError("Cannot evaluate on an empty dataset.")
    if model.num_classes != dataset.num_classes:
        raise ValidationError(f"Model predicts {model.num_classes} classes, dataset has {dataset.num_classes}.")
    was_training = model.training
    model.eval()
    correct, total_loss = 0, 0.0
    try:
        with T.no_grad():
            for inputs, labels in dataset.batches(batch_size):
                logits = model.forward(inputs, hooks)
                correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
                total_loss += F.softmax_cross_entropy(logits, labels, reduction="sum").item()
    finally:
        model.training = was_training
    return EvalResult(accuracy=correct / len(dataset), loss=total_loss / len(dataset))

##################################################################################################
#                                        CHECKPOINTS                                             #
##################################################################################################

def encode_array(array):
    data = np.ascontiguousarray(array, dtype="<f8")
    return {"shape": list(data.shape), "data": base64.b64encode(data.tobytes()).decode("ascii")}


def decode_array(document):
    raw = base64.b64decode(document["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(document["shape"])


def model_to_document(model):
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "seed": model.seed,
        "specs": [s.to_dict() for s in model.specs],
        "params": {key: encode_array(p.data) for key, p in model.params.items()},
        "bn_states": {
            name: {"running_mean": encode_array(s.running_mean), "running_var": encode_array(s.running_var)}
            for name, s in model.bn_states.items()
        },
    }


def model_from_document(document):
    version = document.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValidationError(f"Unsupported checkpoint format_version {version}.")
    model = Model(
        [LayerSpec.from_dict(s) for s in document["specs"]],
        document["input_shape"], document["num_classes"], document.get("seed", 0),
    )
    for key, encoded in document["params"].items():
        if key not in model.params:
            raise ValidationError(f"Checkpoint parameter '{key}' does not belong to the model.")
        value = decode_array(encoded)
        if value.shape != model.params[key].shape:
            raise ShapeError(f"Checkpoint parameter '{key}' has shape {value.shape}.", layer=key.split(".")[0])
        model.params[key].data = value
    for name, state in document.get("bn_states", {}).items():
        model.bn_states[name] = F.BatchNormState(decode_array(state["running_mean"]), decode_array(state["running_var"]))
    return model


def save_checkpoint(model, path):
    """Writes the model as deterministic JSON (sorted keys, base64 little-endian float64)."""

    with open(path, "w", encoding="utf-8") as f:
        json.dump(model_to_document(model), f, indent=2, sort_keys=True)
    logger.info(f"✅ Checkpoint saved to {path}.")


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as f:
        return model_from_document(json.load(f))
