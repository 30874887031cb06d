##################################################################################################
#                                        OVERVIEW                                                #
#                                                                                                #
# Evaluation protocols at desk scale:                                                            #
# - spearman: tie-averaged rank correlation.                                                     #
# - run_sweep / correlate: random mixed-precision configurations scored by every heuristic,      #
#   QAT-fine-tuned from one checkpoint, then rank-correlated with final accuracy.                #
# - benchmark_estimators: EF vs Hutchinson per-iteration variance, iteration time and speedup.   #
# - rank_configs: feasible configurations under a weight-bit budget, ordered by FIT.             #
# - variance_vs_batch_size: estimator variance as a function of the batch size.                  #
#                                                                                                #
# Sweep rows are independent jobs run on a thread pool; every row gets its own seed stream and   #
# results are re-ordered by config id, so output does not depend on completion order.            #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata        # Tie-averaged ranks
from tqdm import tqdm                   # Progress bar

from fitkit.errors import IndeterminateError, NumericalError, ValidationError
from fitkit.quantization import DEFAULT_BIT_SET, qat_finetune, sample_bitconfig, track_ranges
from fitkit.sensitivity import (
    baseline_heuristics, ef_activation_trace, ef_weight_trace, fit_metric, hutchinson_trace,
)
from utils.logs_config import logger    # Logs and events
from utils.settings import SHOW_PROGRESS

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

MIN_ROWS = 3
MIN_REPEATS = 3
SWEEP_HEURISTICS = ("FIT", "QR", "Noise", "FIT_W", "QR_W", "FIT_A", "QR_A", "BN")

# Published per-iteration variances and iteration times (ms) of the EF and Hutchinson estimators
# on ResNet-18, and the reported speedup band (mean, std)
REFERENCE_ROW = {"ef_variance": 0.15, "h_variance": 1.09, "ef_time": 47.78, "h_time": 186.54}
REFERENCE_BAND = (27.67, 5.40)

##################################################################################################
#                                        RANK CORRELATION                                        #
##################################################################################################

def spearman(xs, ys):
    """
    Spearman's ρ: Pearson correlation of tie-averaged ranks.

    Raises:
        ValidationError: Lengths differ or fewer than 3 values.
        IndeterminateError: Either input is constant.
    """

    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if xs.size != ys.size:
        raise ValidationError(f"spearman needs equal lengths, got {xs.size} and {ys.size}.")
    if xs.size < MIN_ROWS:
        raise ValidationError(f"spearman needs at least {MIN_ROWS} values, got {xs.size}.")
    rx, ry = rankdata(xs, method="average"), rankdata(ys, method="average")
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if denom == 0:
        raise IndeterminateError("Rank correlation is undefined for a constant input.")
    return float(np.clip(np.sum(rx * ry) / denom, -1.0, 1.0))

##################################################################################################
#                                        SWEEP                                                   #
##################################################################################################

@dataclass
class SweepResult:
    """One row of a mixed-precision sweep."""

    config_id: int
    bitconfig: object
    scores: dict
    train_accuracy: float
    test_accuracy: float
    seed: int
    wall_time: float = 0.0
    failed: bool = False
    error: str = ""

    def to_row(self):
        row = {"id": self.config_id}
        row.update(self.bitconfig.flat())
        row.update({name: self.scores[name] for name in sorted(self.scores)})
        row.update({
            "train_accuracy": self.train_accuracy, "test_accuracy": self.test_accuracy,
            "seed": self.seed, "failed": int(self.failed),
        })
        return row


def score_config(bitconfig, weight_traces, activation_traces, ranges, model=None, include_twelfth=False,
                 weights=None):
    """
    Every available heuristic for one configuration (BN only for batch-normalized models).

    `weights` switches the FIT family to the empirical weight-noise model; the other heuristics
    keep the closed form.
    """

    scores = {}
    for kind in SWEEP_HEURISTICS:
        if kind == "BN" and (model is None or not model.has_batchnorm):
            continue
        scores[kind] = baseline_heuristics(kind, bitconfig, ranges, weight_traces, activation_traces, model,
                                           include_twelfth, weights)
    return scores


def _row_seed(stream):
    return int(stream.generate_state(1)[0])


def run_sweep(model_fp, train_set, test_set, n_configs, bit_set=DEFAULT_BIT_SET, seed=0, qat_cfg=None,
              weight_traces=None, activation_traces=None, ranges=None, trace_kwargs=None, jobs=1):
    """
    Samples `n_configs` BitConfigs, scores them, and QAT-fine-tunes each from `model_fp`.

    Scores use the full-precision model's traces and ranges only; they are computed before any
    fine-tuning. Every row starts from the same checkpoint with the same QAT seed.

    Args:
        model_fp (Model): Trained full-precision model (not modified).
        train_set (Dataset): Data for traces, calibration and fine-tuning.
        test_set (Dataset): Held-out data for the test accuracy.
        n_configs (int): Number of configurations (at least 3).
        bit_set (Sequence[int]): Allowed bit widths.
        seed (int): Sweep seed; row i draws its config from child stream i.
        qat_cfg (TrainConfig): Fine-tuning hyperparameters.
        weight_traces, activation_traces (TraceReport, optional): Precomputed traces.
        ranges (RangeReport, optional): Precomputed ranges.
        trace_kwargs (dict, optional): Extra arguments for the EF estimators.
        jobs (int): Worker threads.

    Returns:
        list[SweepResult]: Rows ordered by config id; diverged rows are marked failed.
    """

    if n_configs < MIN_ROWS:
        raise ValidationError(f"A sweep needs at least {MIN_ROWS} configurations, got {n_configs}.")
    if qat_cfg is None:
        raise ValidationError("run_sweep needs a QAT configuration.")
    trace_kwargs = dict(trace_kwargs or {})
    trace_kwargs.setdefault("seed", seed)
    if weight_traces is None:
        weight_traces = ef_weight_trace(model_fp, train_set, **trace_kwargs)
    if activation_traces is None:
        activation_traces = ef_activation_trace(model_fp, train_set, **trace_kwargs)
    if ranges is None:
        ranges = track_ranges(model_fp, train_set)

    streams = np.random.SeedSequence(seed).spawn(n_configs)
    rows = []
    for i, stream in enumerate(streams):
        bitconfig = sample_bitconfig(len(model_fp.blocks), bit_set, stream, model_fp.block_names)
        scores = score_config(bitconfig, weight_traces, activation_traces, ranges, model_fp)
        rows.append(SweepResult(i, bitconfig, scores, float("nan"), float("nan"), _row_seed(stream)))

    def finetune(row):
        start = time.perf_counter()
        try:
            result = qat_finetune(model_fp, row.bitconfig, train_set, qat_cfg, test_set, ranges)
            row.train_accuracy, row.test_accuracy = result.train_accuracy, result.test_accuracy
        except NumericalError as e:
            row.failed, row.error = True, str(e)
            logger.warning(f"⚠️ Config {row.config_id} diverged: {e}")
        row.wall_time = time.perf_counter() - start
        return row

    logger.info(f"🚀 Sweeping {n_configs} configurations with {jobs} worker(s).")
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        futures = [executor.submit(finetune, row) for row in rows]
        for future in tqdm(as_completed(futures), total=len(futures), desc="🔄 sweep", disable=not SHOW_PROGRESS):
            future.result()

    failed = sum(r.failed for r in rows)
    logger.info(f"✅ Sweep finished: {len(rows) - failed} rows succeeded, {failed} failed.")
    return sorted(rows, key=lambda r: r.config_id)

##################################################################################################
#                                        CORRELATION                                             #
##################################################################################################

@dataclass
class CorrelationReport:
    """
    Rank correlation of one heuristic with final accuracy.

    ρ is computed on the negated score, so a heuristic that ranks sensitive configurations as
    worse gets a positive value.
    """

    heuristic: str
    rho_test: float
    rho_train: float
    samples: int
    excluded: int = 0
    indeterminate: list = field(default_factory=list)

    def to_row(self):
        return {"heuristic": self.heuristic, "rho_test": self.rho_test, "rho_train": self.rho_train,
                "samples": self.samples, "excluded": self.excluded,
                "indeterminate": ";".join(self.indeterminate)}


def _safe_spearman(xs, ys, label, flags):
    try:
        return spearman(xs, ys)
    except IndeterminateError:
        flags.append(label)
        return float("nan")


def correlate(results, heuristics=None):
    """
    Spearman ρ of every heuristic (negated) against test and train accuracy.

    Raises:
        ValidationError: Fewer than 3 successful rows.
    """

    ok = [r for r in results if not r.failed]
    excluded = len(results) - len(ok)
    if len(ok) < MIN_ROWS:
        raise ValidationError(f"Correlation needs at least {MIN_ROWS} successful rows, got {len(ok)}.")
    if heuristics is None:
        heuristics = [h for h in SWEEP_HEURISTICS if all(h in r.scores for r in ok)]

    test = [r.test_accuracy for r in ok]
    train = [r.train_accuracy for r in ok]
    reports = []
    for name in heuristics:
        negated = [-r.scores[name] for r in ok]
        flags = []
        rho_test = _safe_spearman(negated, test, "test", flags)
        rho_train = _safe_spearman(negated, train, "train", flags)
        reports.append(CorrelationReport(name, rho_test, rho_train, len(ok), excluded, flags))
        logger.info(f"📊 {name}: ρ_test={rho_test:.3f} ρ_train={rho_train:.3f}")
    return reports

##################################################################################################
#                                        ESTIMATOR BENCHMARK                                     #
##################################################################################################

def speedup(h_variance, h_time, ef_variance, ef_time):
    """Relative cost of reaching a fixed tolerance: (σ_H² · t_H) / (σ_EF² · t_EF)."""

    return (h_variance * h_time) / (ef_variance * ef_time)


def reference_speedup_check():
    """Recomputes the published speedup from its published inputs and checks the reported band."""

    s = speedup(REFERENCE_ROW["h_variance"], REFERENCE_ROW["h_time"],
                REFERENCE_ROW["ef_variance"], REFERENCE_ROW["ef_time"])
    mean, std = REFERENCE_BAND
    return {"speedup": s, "band_mean": mean, "band_std": std, "within_band": bool(abs(s - mean) <= std)}


@dataclass
class EstimatorBenchmark:
    """
    EF vs Hutchinson at one batch size. Variances are trace-normalized and averaged over blocks;
    times are median seconds per iteration. `speedup` is derived from these four fields.
    """

    ef_variance: float
    h_variance: float
    ef_time: float
    h_time: float
    batch_size: int
    iters: int
    repeats: int
    dispersion: dict = field(default_factory=dict)

    @property
    def speedup(self):
        return speedup(self.h_variance, self.h_time, self.ef_variance, self.ef_time)

    def to_document(self):
        return {
            "ef_variance": self.ef_variance, "h_variance": self.h_variance,
            "ef_time": self.ef_time, "h_time": self.h_time, "speedup": self.speedup,
            "batch_size": self.batch_size, "iters": self.iters, "repeats": self.repeats,
            "dispersion": self.dispersion, "reference_check": reference_speedup_check(),
        }


def benchmark_estimators(model, dataset, batch_size=32, iters=50, seed=0, repeats=MIN_REPEATS):
    """
    Runs both estimators for exactly `iters` iterations, `repeats` times with seeds seed..seed+r-1.

    Returns:
        EstimatorBenchmark: Means over repeats (variances), medians (times) and their dispersion.
    """

    if repeats < 1 or iters < 2:
        raise ValidationError("benchmark_estimators needs repeats >= 1 and iters >= 2.")
    ef_var, h_var, ef_times, h_times, speedups = [], [], [], [], []
    for r in range(repeats):
        ef = ef_weight_trace(model, dataset, batch_size, tolerance=0.0, max_iters=iters, seed=seed + r)
        h = hutchinson_trace(model, dataset, m=iters, seed=seed + r, batch_size=batch_size, tolerance=0.0)
        ef_var.append(ef.normalized_variance())
        h_var.append(h.normalized_variance())
        ef_times.append(float(np.median(ef.iteration_times)))
        h_times.append(float(np.median(h.iteration_times)))
        speedups.append(speedup(h_var[-1], h_times[-1], ef_var[-1], ef_times[-1]))

    dispersion = {
        "ef_variance_std": float(np.std(ef_var)), "h_variance_std": float(np.std(h_var)),
        "ef_time_std": float(np.std(ef_times)), "h_time_std": float(np.std(h_times)),
        "speedup_mean": float(np.mean(speedups)), "speedup_std": float(np.std(speedups)),
    }
    bench = EstimatorBenchmark(float(np.mean(ef_var)), float(np.mean(h_var)), float(np.median(ef_times)),
                               float(np.median(h_times)), batch_size, iters, repeats, dispersion)
    logger.info(f"📊 EF var {bench.ef_variance:.4g}, Hutchinson var {bench.h_variance:.4g}, speedup {bench.speedup:.2f}")
    return bench


def variance_vs_batch_size(model, dataset, batch_sizes, iters=30, repeats=MIN_REPEATS, seed=0):
    """Trace-normalized estimator variances (mean and std over repeats) for each batch size."""

    rows = []
    for batch_size in batch_sizes:
        ef, h = [], []
        for r in range(repeats):
            ef.append(ef_weight_trace(model, dataset, batch_size, 0.0, iters, seed + r).normalized_variance())
            h.append(hutchinson_trace(model, dataset, iters, seed + r, batch_size, 0.0).normalized_variance())
        rows.append({"batch_size": batch_size, "ef_mean": float(np.mean(ef)), "ef_std": float(np.std(ef)),
                     "h_mean": float(np.mean(h)), "h_std": float(np.std(h))})
    return rows

##################################################################################################
#                                        CONFIG RANKING                                          #
##################################################################################################

@dataclass
class RankedConfig:
    bitconfig: object
    omega: float
    size_bits: int


@dataclass
class RankResult:
    ranked: list
    diagnostic: str = ""


def rank_configs(weight_traces, activation_traces, ranges, candidates, budget, block_sizes, include_twelfth=False):
    """
    Feasible configurations (Σ n(l)·b_w ≤ budget) ordered by ascending FIT, ties broken by the
    lexicographic order of the bits.

    Args:
        weight_traces, activation_traces: Traces passed to fit_metric.
        ranges (RangeReport): Quantization ranges.
        candidates (list[BitConfig]): Nonempty candidate list.
        budget (float): Weight-bit budget (> 0, may be inf).
        block_sizes (dict[str, int]): n(l) per layer.

    Returns:
        RankResult: Ranked feasible configs; when none fits, an empty list and a diagnostic naming
        the smallest budget violation.
    """

    if not candidates:
        raise ValidationError("rank_configs needs at least one candidate.")
    if not budget > 0:
        raise ValidationError(f"budget must be > 0, got {budget}.")

    feasible, tightest = [], None
    for config in candidates:
        size = int(sum(block_sizes[e.layer] * e.w_bits for e in config.entries))
        if size > budget:
            if tightest is None or size < tightest[0]:
                tightest = (size, config)
            continue
        omega = fit_metric(weight_traces, activation_traces, config, ranges, include_twelfth).omega
        feasible.append(RankedConfig(config, omega, size))

    feasible.sort(key=lambda c: (c.omega, c.bitconfig.key()))
    if feasible:
        return RankResult(feasible)
    size, config = tightest
    return RankResult([], f"No candidate fits {budget} bits; the smallest needs {size} "
                          f"({size - budget} over) with bits {config.key()}.")

