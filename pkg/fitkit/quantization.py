##################################################################################################
#                                        OVERVIEW                                                #
#                                                                                                #
# Uniform affine quantization of weights and activations:                                        #
# - QuantScheme / quantize_uniform / noise_power: the quantizer and its Δ²/12 noise model.       #
# - FakeQuant: quantize in the forward pass, clipped straight-through gradient in the backward.  #
# - RangeTracker / track_ranges: min-max weight ranges and EMA activation ranges.                #
# - BitConfig / sample_bitconfig: per-layer weight and activation bit widths.                    #
# - qat_finetune: quantization-aware fine-tuning of a copy of a trained model.                   #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

from dataclasses import dataclass

import numpy as np

from fitkit import tensor as T
from fitkit.errors import ValidationError
from fitkit.models import ForwardHooks, evaluate, train
from fitkit.tensor import Function, Tensor
from utils.logs_config import logger    # Logs and events

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

MIN_BITS = 2
DEFAULT_BIT_SET = (8, 6, 4, 3)
EMA_DECAY = 0.9                  # Weight of the newest batch in EMA range tracking
CALIBRATION_BATCH_SIZE = 64
RANGE_MODES = ("minmax", "ema")

##################################################################################################
#                                        QUANTIZER                                               #
##################################################################################################

@dataclass(frozen=True)
class QuantScheme:
    """
    Uniform grid of 2^bits levels on [theta_min, theta_max].

    A zero-width range is allowed but flagged `degenerate`; quantizing with it is rejected and its
    noise power is 0.
    """

    bits: int
    theta_min: float
    theta_max: float

    def __post_init__(self):
        if int(self.bits) != self.bits or self.bits < MIN_BITS:
            raise ValidationError(f"bits must be an integer >= {MIN_BITS}, got {self.bits}.")
        if not (np.isfinite(self.theta_min) and np.isfinite(self.theta_max)):
            raise ValidationError(f"Range [{self.theta_min}, {self.theta_max}] must be finite.")
        if self.theta_max < self.theta_min:
            raise ValidationError(f"Range [{self.theta_min}, {self.theta_max}] is inverted.")

    @property
    def levels(self):
        return 2 ** int(self.bits)

    @property
    def delta(self):
        return (self.theta_max - self.theta_min) / (self.levels - 1)

    @property
    def degenerate(self):
        return self.theta_max == self.theta_min


def _quantize_array(x, scheme):
    delta = scheme.delta
    clipped = np.clip(x, scheme.theta_min, scheme.theta_max)
    # Arguments are non-negative, so floor(v + 0.5) rounds half away from zero
    k = np.clip(np.floor((clipped - scheme.theta_min) / delta + 0.5), 0, scheme.levels - 1)
    return scheme.theta_min + k * delta


def quantize_uniform(x, scheme):
    """
    Maps values to the nearest grid point θmin + kΔ after clamping to [θmin, θmax].

    Args:
        x (Tensor | np.ndarray): Values.
        scheme (QuantScheme): Non-degenerate scheme.

    Returns:
        Tensor | np.ndarray: Quantized values, same type as `x` (Tensors come back constant).

    Raises:
        ValidationError: If the scheme's range is degenerate.
    """

    if scheme.degenerate:
        raise ValidationError(f"Cannot quantize with a zero-width range at {scheme.theta_min}.")
    if isinstance(x, Tensor):
        return Tensor(_quantize_array(x.data, scheme))
    return _quantize_array(np.asarray(x, dtype=np.float64), scheme)


def noise_power(scheme, include_twelfth=True):
    """Expected squared quantization error Δ²/12 (Δ² when `include_twelfth` is False)."""

    power = scheme.delta ** 2
    return power / 12.0 if include_twelfth else power


class FakeQuant(Function):
    """Forward: quantize_uniform. Backward: identity inside [θmin, θmax], zero outside."""

    @staticmethod
    def forward(ctx, x, scheme):
        ctx.save(mask=((x >= scheme.theta_min) & (x <= scheme.theta_max)).astype(np.float64))
        return _quantize_array(x, scheme)

    @staticmethod
    def backward(ctx, grad):
        return (grad * Tensor(ctx.saved["mask"]),)


def fake_quant(x, scheme):
    """Fake-quantizes a Tensor; a degenerate range passes the values through unchanged."""

    if scheme.degenerate:
        return x
    return FakeQuant.apply(x, scheme=scheme)


@dataclass
class NoiseEstimate:
    """Per-layer expected squared perturbation of weights and activations."""

    weight: dict
    activation: dict
    include_twelfth: bool


def noise_estimate(bitconfig, ranges, include_twelfth=True):
    """NoiseEstimate for every layer of `bitconfig` from a RangeReport."""

    weight, activation = {}, {}
    for entry in bitconfig.entries:
        weight[entry.layer] = noise_power(ranges.weight_scheme(entry.layer, entry.w_bits), include_twelfth)
        activation[entry.layer] = noise_power(ranges.activation_scheme(entry.layer, entry.a_bits), include_twelfth)
    return NoiseEstimate(weight, activation, include_twelfth)

##################################################################################################
#                                        RANGES                                                  #
##################################################################################################

class RangeTracker:
    """
    Running range estimate.

    minmax: running extrema of everything observed.
    ema: first batch initializes the estimate; afterwards est = decay * batch + (1 - decay) * est,
    so decay 1.0 keeps the last batch's extrema.
    """

    def __init__(self, mode="ema", decay=EMA_DECAY):
        if mode not in RANGE_MODES:
            raise ValidationError(f"Range mode must be one of {RANGE_MODES}, got '{mode}'.")
        if not 0.0 < decay <= 1.0:
            raise ValidationError(f"EMA decay must lie in (0, 1], got {decay}.")
        self.mode = mode
        self.decay = decay
        self.low = None
        self.high = None
        self.count = 0

    def update(self, values):
        values = np.asarray(values)
        if values.size == 0:
            return
        low, high = float(values.min()), float(values.max())
        if self.count == 0:
            self.low, self.high = low, high
        elif self.mode == "minmax":
            self.low, self.high = min(self.low, low), max(self.high, high)
        else:
            self.low = self.decay * low + (1.0 - self.decay) * self.low
            self.high = self.decay * high + (1.0 - self.decay) * self.high
        self.count += 1

    def reset(self, low, high):
        self.low, self.high, self.count = float(low), float(high), 1

    def scheme(self, bits):
        if self.count == 0:
            raise ValidationError("Range tracker has not observed any values.")
        return QuantScheme(bits, self.low, self.high)


@dataclass
class RangeReport:
    """Weight and activation (min, max) per quantizable layer, in model order."""

    weight: dict
    activation: dict
    decay: float = EMA_DECAY

    @property
    def degenerate(self):
        return sorted(name for name, (lo, hi) in self.weight.items() if lo == hi)

    def weight_scheme(self, layer, bits):
        if layer not in self.weight:
            raise ValidationError(f"No weight range for layer '{layer}'.")
        return QuantScheme(bits, *self.weight[layer])

    def activation_scheme(self, layer, bits):
        if layer not in self.activation:
            raise ValidationError(f"No activation range for layer '{layer}'.")
        return QuantScheme(bits, *self.activation[layer])

    def to_document(self):
        return {
            "decay": self.decay,
            "layers": [
                {"layer": name, "weight": list(self.weight[name]), "activation": list(self.activation[name])}
                for name in self.weight
            ],
        }

    @classmethod
    def from_document(cls, document):
        weight = {row["layer"]: tuple(row["weight"]) for row in document["layers"]}
        activation = {row["layer"]: tuple(row["activation"]) for row in document["layers"]}
        return cls(weight, activation, document.get("decay", EMA_DECAY))


class _CalibrationHooks(ForwardHooks):
    def __init__(self, trackers):
        self.trackers = trackers

    def on_activation(self, block, activation):
        self.trackers[block.name].update(activation.data)
        return activation


def track_ranges(model, dataset, decay=EMA_DECAY, batch_size=CALIBRATION_BATCH_SIZE):
    """
    Calibrates quantization ranges with one pass over `dataset` in evaluation mode.

    Weight ranges are the exact extrema of each block's weights; activation ranges are the EMA of
    per-batch extrema at each block's activation site, in dataset order.

    Raises:
        ValidationError: If the calibration set is empty.
    """

    if len(dataset) == 0:
        raise ValidationError("Calibration set is empty.")
    trackers = {name: RangeTracker("ema", decay) for name in model.block_names}
    hooks = (_CalibrationHooks(trackers),)
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            for inputs, _ in dataset.batches(batch_size):
                model.forward(inputs, hooks)
    finally:
        model.training = was_training

    weight = {b.name: (float(b.weights.data.min()), float(b.weights.data.max())) for b in model.blocks}
    activation = {name: (t.low, t.high) for name, t in trackers.items()}
    report = RangeReport(weight, activation, decay)
    for name in report.degenerate:
        logger.warning(f"⚠️ Layer '{name}' has constant weights (zero-width range).")
    return report

##################################################################################################
#                                        BIT CONFIGURATIONS                                      #
##################################################################################################

@dataclass(frozen=True)
class LayerBits:
    layer: str
    w_bits: int
    a_bits: int


@dataclass(frozen=True)
class BitConfig:
    """Ordered per-layer weight/activation bit widths."""

    entries: tuple

    def __post_init__(self):
        names = [e.layer for e in self.entries]
        if len(set(names)) != len(names):
            raise ValidationError(f"Duplicate layers in bit configuration: {names}.")
        for e in self.entries:
            if e.w_bits < MIN_BITS or e.a_bits < MIN_BITS:
                raise ValidationError(f"Layer '{e.layer}' has fewer than {MIN_BITS} bits.")

    @classmethod
    def uniform(cls, layers, bits):
        return cls(tuple(LayerBits(name, bits, bits) for name in layers))

    @property
    def layers(self):
        return [e.layer for e in self.entries]

    def entry(self, layer):
        for e in self.entries:
            if e.layer == layer:
                return e
        raise ValidationError(f"Bit configuration has no layer '{layer}'.")

    def key(self):
        """Lexicographic sort key."""
        return tuple((e.w_bits, e.a_bits) for e in self.entries)

    def check(self, bit_set):
        allowed = set(bit_set)
        for e in self.entries:
            if e.w_bits not in allowed or e.a_bits not in allowed:
                raise ValidationError(f"Layer '{e.layer}' uses bits outside {sorted(allowed)}.")

    def to_document(self):
        return {"layers": [{"layer": e.layer, "w_bits": e.w_bits, "a_bits": e.a_bits} for e in self.entries]}

    @classmethod
    def from_document(cls, document):
        return cls(tuple(LayerBits(r["layer"], int(r["w_bits"]), int(r["a_bits"])) for r in document["layers"]))

    def flat(self):
        """Columns for tabular export: {layer}_w and {layer}_a."""
        row = {}
        for e in self.entries:
            row[f"{e.layer}_w"] = e.w_bits
            row[f"{e.layer}_a"] = e.a_bits
        return row


def sample_bitconfig(num_layers, bit_set, seed, layer_names=None):
    """
    Independent uniform draws of weight and activation bits per layer.

    Args:
        num_layers (int): Number of quantizable layers.
        bit_set (Sequence[int]): Allowed bit widths.
        seed (int | np.random.SeedSequence): PRNG seed.
        layer_names (list[str], optional): Names; default "layer0", "layer1", ...
    """

    bit_set = list(bit_set)
    if not bit_set:
        raise ValidationError("bit_set must not be empty.")
    names = list(layer_names) if layer_names is not None else [f"layer{i}" for i in range(num_layers)]
    if len(names) != num_layers:
        raise ValidationError(f"{len(names)} layer names for {num_layers} layers.")
    rng = np.random.default_rng(seed)
    draws = rng.choice(np.asarray(bit_set, dtype=np.int64), size=(num_layers, 2))
    return BitConfig(tuple(LayerBits(n, int(w), int(a)) for n, (w, a) in zip(names, draws)))

##################################################################################################
#                                        QAT                                                     #
##################################################################################################

class QuantizationHooks(ForwardHooks):
    """
    Fake quantization of every block per a BitConfig.

    Weights use the min-max range of their current values at every forward pass. Activations use
    EMA trackers seeded from calibration; they are updated only while the model is training.
    """

    def __init__(self, model, bitconfig, ranges, decay=EMA_DECAY):
        self.model = model
        self.bitconfig = bitconfig
        self.trackers = {}
        for name in model.block_names:
            bitconfig.entry(name)
            tracker = RangeTracker("ema", decay)
            tracker.reset(*ranges.activation[name])
            self.trackers[name] = tracker

    def on_weight(self, block, weight):
        bits = self.bitconfig.entry(block.name).w_bits
        scheme = QuantScheme(bits, float(weight.data.min()), float(weight.data.max()))
        return fake_quant(weight, scheme)

    def on_activation(self, block, activation):
        tracker = self.trackers[block.name]
        if self.model.training:
            tracker.update(activation.data)
        return fake_quant(activation, tracker.scheme(self.bitconfig.entry(block.name).a_bits))


@dataclass
class QATResult:
    model: object
    losses: list
    train_accuracy: float
    test_accuracy: float


def qat_finetune(model, bitconfig, train_set, cfg, test_set=None, ranges=None, decay=EMA_DECAY):
    """
    Quantization-aware fine-tuning of a copy of `model`.

    Args:
        model (Model): Full-precision trained model (left untouched).
        bitconfig (BitConfig): Bits for every quantizable layer.
        train_set (Dataset): Fine-tuning data.
        cfg (TrainConfig): Fine-tuning hyperparameters.
        test_set (Dataset, optional): Held-out data; train accuracy is reported when missing.
        ranges (RangeReport, optional): Calibrated ranges; computed from `train_set` if missing.
        decay (float): EMA decay of the activation trackers.

    Returns:
        QATResult: Fine-tuned copy, loss history and quantized train/test accuracies.

    Raises:
        NumericalError: If fine-tuning diverges.
    """

    quantized = model.copy()
    if ranges is None:
        ranges = track_ranges(quantized, train_set, decay)
    hooks = (QuantizationHooks(quantized, bitconfig, ranges, decay),)
    _, history = train(quantized, train_set, cfg, hooks=hooks, desc="🔄 qat")

    train_acc = evaluate(quantized, train_set, hooks).accuracy
    test_acc = evaluate(quantized, test_set, hooks).accuracy if test_set is not None else train_acc
    return QATResult(quantized, history.losses, train_acc, test_acc)
