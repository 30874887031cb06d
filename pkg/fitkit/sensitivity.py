##################################################################################################
#                                        OVERVIEW                                                #
#                                                                                                #
# Sensitivity estimation for quantization:                                                       #
# - Empirical Fisher traces for weights (per-example squared gradient norms) and activations.    #
# - Hutchinson Hessian traces with per-block Rademacher vectors, for models or explicit matrices. #
# - ConvergenceMonitor: relative standard error of the running mean over a trailing window.      #
# - fit_metric and the comparison heuristics (QR, BN, noise only, weight/activation ablations).  #
# - Dense oracles: explicit empirical Fisher, Fisher/Hessian agreement in the realizable regime, #
#   the quadratic KL expansion and weight perturbation ratios.                                   #
#                                                                                                #
# All estimators sample batches without replacement from a seeded generator and run the model in #
# evaluation mode, so examples are independent and reports are reproducible per seed.            #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

import time
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm                   # Progress bar

from fitkit import functional as F
from fitkit import tensor as T
from fitkit.errors import IndeterminateError, NumericalError, OracleLimitError, ValidationError
from fitkit.graph import ORACLE_LIMIT, HessianOperator, exact_hessian, flatten
from fitkit.models import ForwardHooks
from fitkit.quantization import QuantScheme, noise_power, quantize_uniform
from fitkit.tensor import Tensor
from utils.logs_config import logger    # Logs and events
from utils.settings import SHOW_PROGRESS

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

TOLERANCE = 0.01             # Relative standard error at which estimators stop
WINDOW = 20                  # Trailing window of the convergence monitor
MAX_ITERS = 200
BATCH_SIZE = 32
SIGN_CHUNK = 4096            # Rademacher vectors per vectorized chunk for explicit matrices
ORACLE_BATCH = 512           # Examples per forward pass in the dense oracles
INDETERMINATE_TRACE = 1e-12  # |Tr H| below this makes the agreement gap undefined

ESTIMATORS = ("ef_weight", "ef_activation", "hutchinson")
BASELINES = ("FIT", "FIT_W", "FIT_A", "QR", "QR_W", "QR_A", "BN", "Noise")

##################################################################################################
#                                        REPORTS                                                 #
##################################################################################################

@dataclass
class BlockTrace:
    """
    Trace estimate of one block.

    Attributes:
        name (str): Block or activation-site name.
        trace (float): Mean of the per-iteration estimates.
        variance (float): Sample variance (ddof=1) of the per-iteration estimates.
        iterations (int): Number of estimates.
        num_elements (int): Weights in the block, or activation elements per example.
        history (list[float]): Per-iteration estimates.
    """

    name: str
    trace: float
    variance: float
    iterations: int
    num_elements: int
    history: list = field(default_factory=list)

    @property
    def per_parameter(self):
        return self.trace / self.num_elements

    @property
    def normalized_variance(self):
        """Per-iteration variance relative to the squared trace (0 when the trace is 0)."""
        return self.variance / self.trace ** 2 if self.trace else 0.0


@dataclass
class TraceReport:
    """Per-block trace estimates of one estimator run."""

    kind: str
    blocks: dict
    batch_size: int
    seed: int
    tolerance: float
    max_iters: int
    converged: bool = False
    iterations: int = 0
    fallback_blocks: list = field(default_factory=list)
    iteration_times: list = field(default_factory=list)

    def traces(self):
        return {name: b.trace for name, b in self.blocks.items()}

    def normalized_variance(self):
        """Trace-normalized per-iteration variance averaged over blocks."""
        values = [b.normalized_variance for b in self.blocks.values()]
        return float(np.mean(values)) if values else 0.0

    def scaled(self, factor):
        """Copy with every trace multiplied by `factor`."""
        blocks = {
            name: BlockTrace(b.name, b.trace * factor, b.variance * factor ** 2, b.iterations, b.num_elements,
                             [h * factor for h in b.history])
            for name, b in self.blocks.items()
        }
        return TraceReport(self.kind, blocks, self.batch_size, self.seed, self.tolerance, self.max_iters,
                           self.converged, self.iterations, list(self.fallback_blocks))

    def to_document(self):
        return {
            "kind": self.kind,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "tolerance": self.tolerance,
            "max_iters": self.max_iters,
            "converged": self.converged,
            "iterations": self.iterations,
            "normalization": "raw",
            "fallback_blocks": list(self.fallback_blocks),
            "blocks": [
                {"name": b.name, "trace": b.trace, "variance": b.variance, "iterations": b.iterations,
                 "num_elements": b.num_elements, "history": list(b.history)}
                for b in self.blocks.values()
            ],
        }

    @classmethod
    def from_document(cls, document):
        if document.get("kind") not in ESTIMATORS:
            raise ValidationError(f"Unknown trace report kind '{document.get('kind')}'.")
        blocks = {
            row["name"]: BlockTrace(row["name"], row["trace"], row["variance"], row["iterations"],
                                    row["num_elements"], list(row.get("history", [])))
            for row in document["blocks"]
        }
        return cls(document["kind"], blocks, document["batch_size"], document["seed"], document["tolerance"],
                   document["max_iters"], document.get("converged", False), document.get("iterations", 0),
                   list(document.get("fallback_blocks", [])))

    def to_rows(self):
        return [
            {"block": b.name, "trace": b.trace, "per_parameter": b.per_parameter, "variance": b.variance,
             "iterations": b.iterations, "num_elements": b.num_elements}
            for b in self.blocks.values()
        ]

##################################################################################################
#                                        CONVERGENCE                                             #
##################################################################################################

class ConvergenceMonitor:
    """
    Stops an estimator once every block's running mean is stable.

    After `window` iterations, a block is stable when std(last `window` estimates) / sqrt(t),
    divided by |running mean|, is below `tolerance`. A running mean of exactly 0 with nonzero spread
    uses the standard error itself against `tolerance` and is flagged. Tolerance 0 never stops.
    """

    def __init__(self, tolerance=TOLERANCE, window=WINDOW):
        if tolerance < 0:
            raise ValidationError(f"tolerance must be >= 0, got {tolerance}.")
        if window < 2:
            raise ValidationError(f"window must be >= 2, got {window}.")
        self.tolerance = tolerance
        self.window = window
        self.history = {}
        self.sums = {}
        self.fallback = set()
        self.relative_error = {}

    @property
    def iterations(self):
        return max((len(h) for h in self.history.values()), default=0)

    def update(self, estimates):
        """Adds one estimate per block; returns True when the run should stop."""

        for name, value in estimates.items():
            self.history.setdefault(name, []).append(float(value))
            self.sums[name] = self.sums.get(name, 0.0) + float(value)
        t = self.iterations
        if t < self.window or self.tolerance == 0:
            return False

        stable = True
        for name, values in self.history.items():
            mean = self.sums[name] / len(values)
            se = float(np.std(values[-self.window:], ddof=1)) / np.sqrt(len(values))
            if mean == 0.0:
                if se > 0.0:
                    self.fallback.add(name)
                rel = se
            else:
                rel = se / abs(mean)
            self.relative_error[name] = rel
            stable = stable and rel < self.tolerance
        return stable


@dataclass
class ConvergenceResult:
    stopped: bool
    iterations: int
    relative_error: dict
    fallback_blocks: list


def convergence_monitor(stream, tolerance=TOLERANCE, window=WINDOW, max_iters=None):
    """
    Runs a ConvergenceMonitor over a stream of estimates (floats or {block: float} dicts).

    Returns:
        ConvergenceResult: Whether and when the stream would have been stopped.
    """

    monitor = ConvergenceMonitor(tolerance, window)
    for i, estimate in enumerate(stream):
        if max_iters is not None and i >= max_iters:
            break
        if not isinstance(estimate, dict):
            estimate = {"value": estimate}
        if monitor.update(estimate):
            return ConvergenceResult(True, monitor.iterations, dict(monitor.relative_error), sorted(monitor.fallback))
    return ConvergenceResult(False, monitor.iterations, dict(monitor.relative_error), sorted(monitor.fallback))

##################################################################################################
#                                        SAMPLING HELPERS                                        #
##################################################################################################

class _Capture(ForwardHooks):
    """Keeps each block's linear view and activation site of the latest forward pass."""

    def __init__(self):
        self.parts = {}
        self.sites = {}

    def on_linear(self, block, parts):
        self.parts[block.name] = parts

    def on_activation(self, block, activation):
        self.sites[block.name] = activation
        return activation


def _sample_batch(rng, size, batch_size):
    if batch_size >= size:
        return np.arange(size)
    return np.sort(rng.choice(size, size=batch_size, replace=False))


def _block_names(model, blocks):
    names = model.block_names if blocks is None else list(blocks)
    for name in names:
        model.block(name)
    return names


def _check_finite(values, name, iteration):
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"Non-finite gradient in block '{name}' at iteration {iteration}.",
                             block=name, batch=iteration)


def per_example_weight_sq_norms(model, inputs, labels, names):
    """
    Squared norm of each example's loss gradient restricted to each block's weights.

    Uses the per-example linear view of every block: for outputs z = cols · Wᵀ, the gradient of
    example n is gz[n]ᵀ cols[n], so no per-example backward pass is needed.

    Returns:
        dict[str, np.ndarray]: (N,) squared norms per block.
    """

    capture = _Capture()
    with T.enable_grad():
        loss = model.loss(inputs, labels, reduction="sum", hooks=(capture,))
        zs = [capture.parts[name].z for name in names]
        grads = T.grad(loss, zs)
    norms = {}
    for name, g in zip(names, grads):
        per_example = np.einsum("nlo,nlk->nok", g.data, capture.parts[name].cols.data)
        norms[name] = np.sum(per_example ** 2, axis=(1, 2))
    return norms


def per_example_activation_sq_norms(model, inputs, labels, names):
    """Summed squared loss gradient over each example's activation-site elements."""

    capture = _Capture()
    with T.enable_grad():
        loss = model.loss(inputs, labels, reduction="sum", hooks=(capture,))
        sites = [capture.sites[name] for name in names]
        grads = T.grad(loss, sites)
    norms, elements = {}, {}
    for name, g in zip(names, grads):
        norms[name] = np.sum(g.data.reshape(g.shape[0], -1) ** 2, axis=1)
        elements[name] = int(np.prod(g.shape[1:]))
    return norms, elements

##################################################################################################
#                                        TRACE ESTIMATORS                                        #
##################################################################################################

def _run_estimator(kind, model, dataset, step, names, batch_size, tolerance, max_iters, seed, window, elements):
    if len(dataset) == 0:
        raise ValidationError("Trace estimation needs a nonempty dataset.")
    if max_iters < 1:
        raise ValidationError(f"max_iters must be >= 1, got {max_iters}.")
    rng = np.random.default_rng(seed)
    monitor = ConvergenceMonitor(tolerance, window)
    times = []
    converged = False
    was_training = model.training
    model.eval()
    try:
        for iteration in tqdm(range(max_iters), desc=f"📊 {kind}", disable=not SHOW_PROGRESS, leave=False):
            chosen = _sample_batch(rng, len(dataset), batch_size)
            start = time.perf_counter()
            estimates = step(dataset.inputs[chosen], dataset.labels[chosen], rng, iteration)
            times.append(time.perf_counter() - start)
            if monitor.update(estimates):
                converged = True
                break
    finally:
        model.training = was_training

    blocks = {}
    for name in names:
        history = monitor.history[name]
        variance = float(np.var(history, ddof=1)) if len(history) > 1 else 0.0
        blocks[name] = BlockTrace(name, float(np.mean(history)), variance, len(history), elements[name], history)
    report = TraceReport(kind, blocks, batch_size, seed, tolerance, max_iters, converged, monitor.iterations,
                         sorted(monitor.fallback), times)
    state = "converged" if converged else "reached max-iters"
    logger.info(f"📊 {kind}: {state} after {report.iterations} iterations.")
    return report


def ef_weight_trace(model, dataset, batch_size=BATCH_SIZE, tolerance=TOLERANCE, max_iters=MAX_ITERS, seed=0,
                    window=WINDOW, blocks=None):
    """
    Empirical Fisher trace of each block's weights.

    Every iteration samples a batch without replacement and records the batch mean of the
    per-example squared gradient norm restricted to the block. The report's trace is the mean
    over iterations; a batch size of at least len(dataset) uses the full set every iteration.

    Args:
        model (Model): Trained model (evaluated in eval mode).
        dataset (Dataset): Data with true labels.
        batch_size (int): Examples per iteration.
        tolerance (float): Convergence tolerance; 0 runs exactly `max_iters` iterations.
        max_iters (int): Iteration cap.
        seed (int): Batch sampling seed.
        window (int): Convergence window.
        blocks (list[str], optional): Blocks to estimate; all by default.

    Returns:
        TraceReport: kind "ef_weight".

    Raises:
        NumericalError: On a non-finite gradient, naming block and iteration.
    """

    names = _block_names(model, blocks)

    def step(inputs, labels, rng, iteration):
        norms = per_example_weight_sq_norms(model, inputs, labels, names)
        for name in names:
            _check_finite(norms[name], name, iteration)
        return {name: float(np.mean(norms[name])) for name in names}

    elements = {name: model.block(name).n for name in names}
    return _run_estimator("ef_weight", model, dataset, step, names, batch_size, tolerance, max_iters, seed,
                          window, elements)


def ef_activation_trace(model, dataset, batch_size=BATCH_SIZE, tolerance=TOLERANCE, max_iters=MAX_ITERS, seed=0,
                        window=WINDOW, blocks=None):
    """
    Empirical Fisher trace at each block's activation site.

    Per example the squared loss gradient is summed over the site's elements (the mean squared
    gradient per element times the element count); examples are averaged. Element counts are
    stored as `num_elements`.
    """

    names = _block_names(model, blocks)
    elements = {}

    def step(inputs, labels, rng, iteration):
        norms, counts = per_example_activation_sq_norms(model, inputs, labels, names)
        elements.update(counts)
        for name in names:
            _check_finite(norms[name], name, iteration)
        return {name: float(np.mean(norms[name])) for name in names}

    return _run_estimator("ef_activation", model, dataset, step, names, batch_size, tolerance, max_iters, seed,
                          window, elements)


def _rademacher(rng, shape):
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def _matrix_hutchinson(matrix, m, seed, tolerance, window):
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValidationError(f"Hutchinson needs a square matrix, got {matrix.shape}.")
    rng = np.random.default_rng(seed)
    values = []
    remaining = m
    while remaining > 0:
        size = min(SIGN_CHUNK, remaining)
        signs = _rademacher(rng, (size, matrix.shape[0]))
        values.extend(np.einsum("ij,jk,ik->i", signs, matrix, signs).tolist())
        remaining -= size
    if not np.all(np.isfinite(values)):
        raise NumericalError("Non-finite Hutchinson estimate.", block="matrix")
    stopped, used = False, values
    if tolerance > 0:
        result = convergence_monitor(values, tolerance, window)
        stopped = result.stopped
        used = values[: result.iterations]
    block = BlockTrace("matrix", float(np.mean(used)), float(np.var(used, ddof=1)) if len(used) > 1 else 0.0,
                       len(used), matrix.shape[0], used)
    return TraceReport("hutchinson", {"matrix": block}, 0, seed, tolerance, m, stopped, len(used))


def hutchinson_trace(target, dataset=None, m=MAX_ITERS, seed=0, batch_size=BATCH_SIZE, tolerance=0.0,
                     window=WINDOW, blocks=None):
    """
    Hutchinson estimate of per-block Hessian traces, mean over Rademacher vectors of rᵀ H r.

    For a model, every iteration samples a batch, builds the mean cross-entropy and draws one
    Rademacher vector per block supported on that block's weights only, so the estimate targets the
    block-diagonal trace Tr(H_l). For an explicit matrix, m vectors are drawn directly.

    Args:
        target (Model | np.ndarray): Model, or a square matrix H.
        dataset (Dataset, optional): Data for the model case.
        m (int): Number of Rademacher vectors (iterations).
        seed (int): Sign and batch seed.
        batch_size (int): Examples per iteration (model case).
        tolerance (float): Convergence tolerance; 0 draws exactly `m` vectors.
        window (int): Convergence window.
        blocks (list[str], optional): Blocks to estimate.

    Returns:
        TraceReport: kind "hutchinson".
    """

    if not hasattr(target, "blocks"):
        return _matrix_hutchinson(target, m, seed, tolerance, window)
    if dataset is None:
        raise ValidationError("hutchinson_trace on a model needs a dataset.")

    model = target
    names = _block_names(model, blocks)
    weights = [model.block(name).weights for name in names]

    def step(inputs, labels, rng, iteration):
        with T.enable_grad():
            op = HessianOperator(lambda: model.loss(inputs, labels), weights)
        estimates = {}
        offset = 0
        for name, w in zip(names, weights):
            direction = np.zeros(op.dim)
            r = _rademacher(rng, w.size)
            direction[offset:offset + w.size] = r
            value = float(r @ op.matvec(direction)[offset:offset + w.size])
            if not np.isfinite(value):
                raise NumericalError(f"Non-finite Hessian-vector product in block '{name}'.", block=name,
                                     batch=iteration)
            estimates[name] = value
            offset += w.size
        return estimates

    elements = {name: model.block(name).n for name in names}
    return _run_estimator("hutchinson", model, dataset, step, names, batch_size, tolerance, m, seed, window, elements)


def hutchinson_variance_predict(matrix):
    """Per-sample variance of rᵀHr for Rademacher r and symmetric H: 2(‖H‖_F² − Σ H_ii²)."""

    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValidationError(f"Expected a square matrix, got shape {matrix.shape}.")
    return float(2.0 * (np.sum(matrix ** 2) - np.sum(np.diag(matrix) ** 2)))

##################################################################################################
#                                        FIT AND BASELINES                                       #
##################################################################################################

@dataclass
class FITReport:
    """
    FIT value with its per-block decomposition.

    `omega` is exactly sum(weight_terms) + sum(activation_terms), in that order.
    """

    omega: float
    weight_terms: dict
    activation_terms: dict
    bitconfig: object
    ranges: object
    include_twelfth: bool
    noise_model: str
    components: str

    def to_document(self):
        return {
            "omega": self.omega,
            "components": self.components,
            "include_twelfth": self.include_twelfth,
            "noise_model": self.noise_model,
            "bitconfig": self.bitconfig.to_document(),
            "blocks": [
                {"layer": layer, "weight": self.weight_terms.get(layer, 0.0),
                 "activation": self.activation_terms.get(layer, 0.0)}
                for layer in self.bitconfig.layers
            ],
        }


def _as_traces(traces):
    if traces is None:
        return None
    return traces.traces() if isinstance(traces, TraceReport) else dict(traces)


def monte_carlo_noise(values, scheme):
    """Empirical mean squared quantization error ‖Q(θ) − θ‖² / n of actual values."""

    values = np.asarray(values.data if isinstance(values, Tensor) else values, dtype=np.float64)
    if scheme.degenerate:
        return 0.0
    return float(np.mean((quantize_uniform(values, scheme) - values) ** 2))


def fit_metric(weight_traces, activation_traces, bitconfig, ranges, include_twelfth=False, components="both",
               weights=None):
    """
    Ω = Σ_l Tr_w(l)·E[δθ²]_l + Σ_l Tr_a(l)·E[δa²]_l.

    Args:
        weight_traces (TraceReport | dict[str, float]): Raw block traces of the weights.
        activation_traces (TraceReport | dict[str, float] | None): Raw activation-site traces;
            None leaves the activation sum empty.
        bitconfig (BitConfig): Bits per layer.
        ranges (RangeReport): Weight and activation ranges.
        include_twelfth (bool): Use Δ²/12 instead of Δ².
        components (str): "both", "weight" (FIT_W) or "activation" (FIT_A); the other sum is 0.
        weights (dict[str, np.ndarray], optional): Actual block weights; when given, the weight
            noise is the empirical ‖Q(θ) − θ‖²/n(l) instead of the uniform model.

    Returns:
        FITReport: Ω and its decomposition.

    Raises:
        ValidationError: If a layer of `bitconfig` lacks a trace or a range.
    """

    if components not in ("both", "weight", "activation"):
        raise ValidationError(f"components must be 'both', 'weight' or 'activation', got '{components}'.")
    w_traces = _as_traces(weight_traces)
    a_traces = _as_traces(activation_traces)

    weight_terms, activation_terms = {}, {}
    for entry in bitconfig.entries:
        layer = entry.layer
        if layer not in w_traces:
            raise ValidationError(f"No weight trace for layer '{layer}'.")
        scheme = ranges.weight_scheme(layer, entry.w_bits)
        if weights is not None:
            noise = monte_carlo_noise(weights[layer], scheme)
        else:
            noise = noise_power(scheme, include_twelfth)
        weight_terms[layer] = w_traces[layer] * noise if components != "activation" else 0.0
        if a_traces is not None:
            if layer not in a_traces:
                raise ValidationError(f"No activation trace for layer '{layer}'.")
            a_noise = noise_power(ranges.activation_scheme(layer, entry.a_bits), include_twelfth)
            activation_terms[layer] = a_traces[layer] * a_noise if components != "weight" else 0.0

    omega = float(sum(weight_terms.values())) + float(sum(activation_terms.values()))
    return FITReport(omega, weight_terms, activation_terms, bitconfig, ranges, include_twelfth,
                     "empirical" if weights is not None else "uniform", components)


def _qr_term(low, high, bits, include_twelfth):
    # (1/width) * Δ² written without the division so a zero-width range contributes 0
    width = high - low
    term = width / (2 ** bits - 1) ** 2
    return term / 12.0 if include_twelfth else term


def _bn_scales(model):
    scales = {}
    for block in model.blocks:
        if block.bn_gamma is not None:
            scales[block.name] = float(np.mean(np.abs(block.bn_gamma.data)))
    return scales


def baseline_heuristics(kind, bitconfig, ranges, weight_traces=None, activation_traces=None, model=None,
                        include_twelfth=False, weights=None):
    """
    Scores a BitConfig with one sensitivity heuristic.

    FIT / FIT_W / FIT_A: fit_metric with both sums, weights only or activations only. `weights` (actual
        block weights) selects the empirical weight-noise model for these three.
    QR / QR_W / QR_A: traces replaced by 1/|range| (activation terms only where activation ranges
        exist).
    BN: traces replaced by 1/mean|γ| for blocks followed by batch normalization.
    Noise: unweighted sum of weight and activation noise powers.

    Raises:
        ValidationError: Unknown kind, missing inputs, or BN on a model without batch norm.
    """

    if kind not in BASELINES:
        raise ValidationError(f"Unknown heuristic '{kind}' (expected one of {BASELINES}).")
    if kind.startswith("FIT"):
        if weight_traces is None:
            raise ValidationError(f"{kind} needs weight traces.")
        components = {"FIT": "both", "FIT_W": "weight", "FIT_A": "activation"}[kind]
        return fit_metric(weight_traces, activation_traces, bitconfig, ranges, include_twelfth, components,
                          weights).omega

    total = 0.0
    if kind.startswith("QR"):
        for e in bitconfig.entries:
            if kind != "QR_A":
                total += _qr_term(*ranges.weight[e.layer], e.w_bits, include_twelfth)
            if kind != "QR_W" and e.layer in ranges.activation:
                total += _qr_term(*ranges.activation[e.layer], e.a_bits, include_twelfth)
        return float(total)

    if kind == "BN":
        scales = _bn_scales(model) if model is not None else {}
        if not scales:
            raise ValidationError("BN heuristic requested for a model without batch normalization.")
        for e in bitconfig.entries:
            if e.layer in scales:
                noise = noise_power(ranges.weight_scheme(e.layer, e.w_bits), include_twelfth)
                if e.layer in ranges.activation:
                    noise += noise_power(ranges.activation_scheme(e.layer, e.a_bits), include_twelfth)
                total += noise / scales[e.layer]
        return float(total)

    for e in bitconfig.entries:  # Noise
        total += noise_power(ranges.weight_scheme(e.layer, e.w_bits), include_twelfth)
        if e.layer in ranges.activation:
            total += noise_power(ranges.activation_scheme(e.layer, e.a_bits), include_twelfth)
    return float(total)

##################################################################################################
#                                        ORACLES                                                 #
##################################################################################################

def _check_oracle_size(count, limit):
    if count > limit:
        raise OracleLimitError(f"Dense oracle requested for {count} parameters (limit {limit}).")


def empirical_fisher_matrix(model, dataset, limit=ORACLE_LIMIT):
    """
    Explicit (1/N) Σ g gᵀ over the quantizable weights, one backward pass per example.

    Coordinates follow model block order, each block flattened row-major.
    """

    if len(dataset) == 0:
        raise ValidationError("Empirical Fisher needs a nonempty dataset.")
    weights = [b.weights for b in model.blocks]
    _check_oracle_size(sum(w.size for w in weights), limit)
    size = sum(w.size for w in weights)
    fisher = np.zeros((size, size))
    was_training = model.training
    model.eval()
    try:
        for i in range(len(dataset)):
            with T.enable_grad():
                loss = model.loss(dataset.inputs[i:i + 1], dataset.labels[i:i + 1], reduction="sum")
                g = flatten(T.grad(loss, weights))
            fisher += np.outer(g, g)
    finally:
        model.training = was_training
    return fisher / len(dataset)


@dataclass
class AgreementReport:
    gap: float
    fisher_trace: float
    hessian_trace: float
    budget: int
    label_mode: str
    indeterminate: bool = False


def _predictive(model, inputs):
    with T.no_grad():
        return F.softmax(model.forward(inputs).data)


def _allocate_draws(n, budget, rng):
    """
    Spreads `budget` label draws over `n` examples as evenly as possible.

    Returns:
        tuple: (example index, estimator weight, stratum index, draws of that example) per draw.
        With budget >= n every example gets budget // n draws (the remainder goes to random
        examples) and is weighted 1 / (n · its draws); below n a random subset gets one draw each.
    """

    if budget < n:
        chosen = np.sort(rng.choice(n, size=budget, replace=False))
        ones = np.ones(budget)
        return chosen, ones / budget, np.zeros(budget), ones
    per_example = np.full(n, budget // n)
    per_example[rng.choice(n, size=budget % n, replace=False)] += 1
    chosen = np.repeat(np.arange(n), per_example)
    starts = np.repeat(np.cumsum(per_example) - per_example, per_example)
    counts = per_example[chosen].astype(float)
    return chosen, 1.0 / (n * counts), np.arange(budget) - starts, counts


def fisher_hessian_agreement(model, dataset, sampling_budget, seed=0, label_mode="model", limit=ORACLE_LIMIT):
    """
    Relative gap |Tr F̂ − Tr Ĥ| / |Tr Ĥ| over the quantizable weights.

    label_mode:
        "model": F̂ averages squared per-example gradient norms over `sampling_budget` draws, spread
            evenly over the inputs, of a label from the model's predictive distribution (stratified
            over each input's draws, so the error falls like 1/budget rather than 1/sqrt(budget));
            Ĥ is the exact Hessian of the cross-entropy against the model's own predictive
            distribution, averaged over the inputs (the expected Hessian under the model).
        "given": the same draws use the dataset's labels, and Ĥ is the Hessian of the ordinary
            cross-entropy with those labels (misspecified when the model underfits).
        "enumerated": F̂ sums over every class weighted by its predicted probability (no sampling).

    Returns:
        AgreementReport: The gap (NaN and `indeterminate` when |Tr Ĥ| is negligible).
    """

    if label_mode not in ("model", "given", "enumerated"):
        raise ValidationError(f"label_mode must be 'model', 'given' or 'enumerated', got '{label_mode}'.")
    if sampling_budget < 1:
        raise ValidationError(f"sampling_budget must be >= 1, got {sampling_budget}.")
    names = model.block_names
    weights = [b.weights for b in model.blocks]
    _check_oracle_size(sum(w.size for w in weights), limit)

    was_training = model.training
    model.eval()
    try:
        probs = _predictive(model, dataset.inputs)
        rng = np.random.default_rng(seed)
        fisher_trace = 0.0
        if label_mode == "enumerated":
            for k in range(model.num_classes):
                labels = np.full(len(dataset), k)
                norms = per_example_weight_sq_norms(model, dataset.inputs, labels, names)
                fisher_trace += float(np.sum(probs[:, k] * sum(norms.values())))
            fisher_trace /= len(dataset)
        else:
            chosen, weights_per_draw, strata, counts = _allocate_draws(len(dataset), sampling_budget, rng)
            if label_mode == "model":
                cumulative = np.cumsum(probs[chosen], axis=1)
                u = (strata + rng.random(sampling_budget)) / counts
                labels = (u[:, None] > cumulative).sum(axis=1)
                labels = np.minimum(labels, model.num_classes - 1)
            else:
                labels = dataset.labels[chosen]
            for start in range(0, sampling_budget, ORACLE_BATCH):
                part = slice(start, start + ORACLE_BATCH)
                norms = per_example_weight_sq_norms(model, dataset.inputs[chosen[part]], labels[part], names)
                fisher_trace += float(np.sum(weights_per_draw[part] * sum(norms.values())))

        if label_mode == "given":
            loss_fn = lambda: model.loss(dataset.inputs, dataset.labels)  # noqa: E731
        else:
            loss_fn = lambda: F.soft_cross_entropy(model.forward(dataset.inputs), probs)  # noqa: E731
        with T.enable_grad():
            hessian, _ = exact_hessian(loss_fn, weights, limit)
        hessian_trace = float(np.trace(hessian))
    finally:
        model.training = was_training

    if abs(hessian_trace) < INDETERMINATE_TRACE:
        logger.warning("⚠️ Hessian trace is ~0; Fisher/Hessian gap is indeterminate.")
        return AgreementReport(float("nan"), fisher_trace, hessian_trace, sampling_budget, label_mode, True)
    gap = abs(fisher_trace - hessian_trace) / abs(hessian_trace)
    return AgreementReport(gap, fisher_trace, hessian_trace, sampling_budget, label_mode)


def _directional_logits(model, inputs, weights, direction):
    """J·d: derivative of the logits along `direction` (double-backward trick)."""

    with T.enable_grad():
        logits = model.forward(inputs)
        dummy = Tensor(np.zeros(logits.shape), requires_grad=True)
        grads = T.grad(logits, weights, grad_outputs=[dummy], create_graph=True)
        inner = None
        for g, d in zip(grads, direction):
            term = (g * Tensor(d)).sum()
            inner = term if inner is None else inner + term
        if inner is None or not inner.requires_grad:
            return np.zeros(logits.shape)
        return T.grad(inner, dummy).data


@dataclass
class KLCheck:
    kl: float
    quadratic: float
    scale: float

    @property
    def ratio(self):
        return self.kl / self.quadratic if self.quadratic else float("nan")


def kl_quadratic_check(model, dataset, direction, scale):
    """
    Compares the mean KL(p_θ ‖ p_{θ+εd}) with ½ε² dᵀ F d, F being the model-label Fisher of the
    quantizable weights. Their ratio tends to 1 as ε shrinks.

    Args:
        model (Model): Model at θ.
        dataset (Dataset): Inputs to average over.
        direction (dict[str, np.ndarray]): Perturbation direction per block.
        scale (float): ε.
    """

    names = model.block_names
    for name in names:
        if name not in direction:
            raise ValidationError(f"Direction has no entry for block '{name}'.")
    weights = [model.block(n).weights for n in names]
    d = [np.asarray(direction[n], dtype=np.float64).reshape(model.block(n).weights.shape) for n in names]

    was_training = model.training
    model.eval()
    try:
        probs = _predictive(model, dataset.inputs)
        overrides = {f"{n}.weight": Tensor(model.block(n).weights.data + scale * di) for n, di in zip(names, d)}
        with T.no_grad():
            shifted = F.softmax(model.forward(dataset.inputs, overrides=overrides).data)
        jd = _directional_logits(model, dataset.inputs, weights, d)
    finally:
        model.training = was_training

    kl = float(np.mean(np.sum(probs * (np.log(probs) - np.log(shifted)), axis=1)))
    centered = jd - np.sum(probs * jd, axis=1, keepdims=True)
    quadratic = 0.5 * scale ** 2 * float(np.mean(np.sum(probs * centered ** 2, axis=1)))
    return KLCheck(kl, quadratic, scale)


def perturbation_ratios(model, bitconfig):
    """
    Per block |δθ|/|θ| statistics of weight quantization (min-max range per block).

    Returns:
        dict[str, dict]: median ratio and the fraction of ratios below 1, over nonzero weights.
    """

    stats = {}
    for block in model.blocks:
        values = block.weights.data.reshape(-1)
        scheme = QuantScheme(bitconfig.entry(block.name).w_bits, float(values.min()), float(values.max()))
        delta = np.zeros_like(values) if scheme.degenerate else quantize_uniform(values, scheme) - values
        nonzero = values != 0
        if not np.any(nonzero):
            raise IndeterminateError(f"Block '{block.name}' has only zero weights.")
        ratios = np.abs(delta[nonzero]) / np.abs(values[nonzero])
        stats[block.name] = {"median": float(np.median(ratios)), "fraction_below_one": float(np.mean(ratios < 1))}
    return stats
