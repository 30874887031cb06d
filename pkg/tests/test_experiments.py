import math
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from fitkit.config import build_configured_model, build_datasets, load_run_config, qat_config, train_config
from fitkit.data import make_synthetic_digits
from fitkit.errors import IndeterminateError, ValidationError
from fitkit.experiments import (
    SweepResult,
    benchmark_estimators,
    correlate,
    rank_configs,
    reference_speedup_check,
    run_sweep,
    score_config,
    spearman,
    speedup,
    variance_vs_batch_size,
)
from fitkit.models import TrainConfig, build_model, desk_cnn_specs, train
from fitkit.quantization import BitConfig, LayerBits, RangeReport, track_ranges
from fitkit.sensitivity import ef_activation_trace, ef_weight_trace

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def sweep_row(config_id, omega, test_accuracy, failed=False):
    bits = BitConfig.uniform(["a"], 4)
    return SweepResult(config_id, bits, {"FIT": omega, "QR": 1.0}, test_accuracy, test_accuracy, 0, failed=failed)


class TestSpearman:
    def test_matches_scipy_with_ties(self, rng):
        for _ in range(50):
            xs = rng.integers(0, 5, size=12).astype(float)
            ys = rng.normal(size=12)
            assert spearman(xs, ys) == pytest.approx(spearmanr(xs, ys)[0], abs=1e-12)

    def test_perfect_orderings(self):
        assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
        assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)

    def test_constant_input_is_indeterminate(self):
        with pytest.raises(IndeterminateError):
            spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_length_checks(self):
        with pytest.raises(ValidationError):
            spearman([1, 2], [1, 2])
        with pytest.raises(ValidationError):
            spearman([1, 2, 3], [1, 2, 3, 4])


class TestCorrelate:
    def test_negated_score_against_accuracy(self):
        rows = [sweep_row(i, omega, acc) for i, (omega, acc) in enumerate([(0.1, 0.9), (0.5, 0.7), (0.9, 0.2)])]
        reports = {r.heuristic: r for r in correlate(rows)}
        assert reports["FIT"].rho_test == pytest.approx(1.0)
        assert reports["FIT"].samples == 3
        assert math.isnan(reports["QR"].rho_test)
        assert reports["QR"].indeterminate == ["test", "train"]

    def test_failed_rows_are_excluded(self):
        rows = [sweep_row(0, 0.1, 0.9), sweep_row(1, 0.5, 0.7), sweep_row(2, 0.3, float("nan"), failed=True),
                sweep_row(3, 0.9, 0.2)]
        fit = correlate(rows, heuristics=["FIT"])[0]
        assert fit.samples == 3
        assert fit.excluded == 1
        assert fit.rho_test == pytest.approx(1.0)

    def test_needs_three_successful_rows(self):
        rows = [sweep_row(0, 0.1, 0.9), sweep_row(1, 0.5, 0.7), sweep_row(2, 0.3, 0.1, failed=True)]
        with pytest.raises(ValidationError):
            correlate(rows)


class TestSpeedup:
    def test_reference_speedup_is_in_band(self):
        check = reference_speedup_check()
        assert check["speedup"] == pytest.approx(28.37, abs=0.01)
        assert check["within_band"]

    def test_formula(self):
        assert speedup(2.0, 3.0, 1.0, 1.5) == pytest.approx(4.0)

    def test_benchmark_document(self, tiny_mlp, tiny_data):
        bench = benchmark_estimators(tiny_mlp, tiny_data, batch_size=4, iters=4, seed=0, repeats=2)
        assert bench.ef_variance > 0 and bench.h_variance > 0
        assert bench.ef_time > 0 and bench.h_time > 0
        document = bench.to_document()
        assert document["speedup"] == pytest.approx(
            (bench.h_variance * bench.h_time) / (bench.ef_variance * bench.ef_time))
        assert document["repeats"] == 2
        assert set(document["dispersion"]) >= {"speedup_mean", "speedup_std"}

    def test_benchmark_rejects_single_iteration(self, tiny_mlp, tiny_data):
        with pytest.raises(ValidationError):
            benchmark_estimators(tiny_mlp, tiny_data, iters=1)

    def test_variance_by_batch_size(self, tiny_mlp, tiny_data):
        rows = variance_vs_batch_size(tiny_mlp, tiny_data, [2, 8], iters=3, repeats=2)
        assert [r["batch_size"] for r in rows] == [2, 8]
        assert all(r["ef_mean"] >= 0 and r["h_std"] >= 0 for r in rows)


class TestRankConfigs:
    def setup_method(self):
        self.ranges = RangeReport({"a": (0.0, 3.0), "b": (0.0, 3.0)}, {"a": (0.0, 3.0), "b": (0.0, 3.0)})
        self.traces = {"a": 10.0, "b": 1.0}
        self.sizes = {"a": 10, "b": 10}

    def configs(self, *bits):
        return [BitConfig((LayerBits("a", wa, 8), LayerBits("b", wb, 8))) for wa, wb in bits]

    def test_orders_by_fit_within_budget(self):
        candidates = self.configs((3, 8), (8, 3), (8, 8), (6, 6))
        result = rank_configs(self.traces, None, self.ranges, candidates, budget=120, block_sizes=self.sizes)
        assert [c.bitconfig.key()[0][0] for c in result.ranked] == [6, 8, 3]
        assert [c.size_bits for c in result.ranked] == [120, 110, 110]
        assert all(a.omega <= b.omega for a, b in zip(result.ranked, result.ranked[1:]))

    def test_ties_break_lexicographically(self):
        candidates = self.configs((4, 6), (4, 4))
        result = rank_configs({"a": 1.0, "b": 0.0}, None, self.ranges, candidates, math.inf, self.sizes)
        assert [c.bitconfig.key() for c in result.ranked] == [((4, 8), (4, 8)), ((4, 8), (6, 8))]

    def test_infeasible_budget_reports_smallest_violation(self):
        result = rank_configs(self.traces, None, self.ranges, self.configs((8, 8), (3, 3)), 50, self.sizes)
        assert result.ranked == []
        assert "60" in result.diagnostic and "10 over" in result.diagnostic

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValidationError):
            rank_configs(self.traces, None, self.ranges, [], 10, self.sizes)
        with pytest.raises(ValidationError):
            rank_configs(self.traces, None, self.ranges, self.configs((8, 8)), 0, self.sizes)


class TestSweep:
    @pytest.fixture
    def trained(self, tiny_cnn, digits):
        train(tiny_cnn, digits[0], TrainConfig(epochs=3, batch_size=32))
        kwargs = {"batch_size": 32, "tolerance": 0.0, "max_iters": 2}
        return {
            "model": tiny_cnn,
            "weight": ef_weight_trace(tiny_cnn, digits[0], **kwargs),
            "activation": ef_activation_trace(tiny_cnn, digits[0], **kwargs),
            "ranges": track_ranges(tiny_cnn, digits[0]),
        }

    def _sweep(self, trained, digits, jobs):
        return run_sweep(
            trained["model"], digits[0], digits[1], 3, seed=5, qat_cfg=TrainConfig(epochs=1, lr=0.001, batch_size=32),
            weight_traces=trained["weight"], activation_traces=trained["activation"], ranges=trained["ranges"],
            jobs=jobs,
        )

    def test_rows_do_not_depend_on_worker_count(self, trained, digits):
        serial = self._sweep(trained, digits, jobs=1)
        parallel = self._sweep(trained, digits, jobs=2)
        assert [r.config_id for r in parallel] == [0, 1, 2]
        for a, b in zip(serial, parallel):
            assert a.bitconfig == b.bitconfig
            assert a.scores == b.scores
            assert a.test_accuracy == b.test_accuracy
            assert not a.failed

    def test_scores_cover_heuristics(self, trained, digits):
        rows = self._sweep(trained, digits, jobs=1)
        assert set(rows[0].scores) == {"FIT", "QR", "Noise", "FIT_W", "QR_W", "FIT_A", "QR_A"}
        expected = score_config(rows[0].bitconfig, trained["weight"], trained["activation"], trained["ranges"],
                                trained["model"])
        assert rows[0].scores == expected
        row = rows[0].to_row()
        assert row["id"] == 0 and "conv1_w" in row and row["failed"] == 0

    def test_needs_three_configs(self, trained, digits):
        with pytest.raises(ValidationError):
            run_sweep(trained["model"], digits[0], digits[1], 2, qat_cfg=TrainConfig(epochs=1))


@pytest.fixture(scope="module")
def desk():
    """The shipped desk run: trained model, traces and ranges, plus a cache of sweeps by seed."""

    config = load_run_config(CONFIGS / "desk_cnn.yaml")
    train_set, test_set = build_datasets(config)
    model = build_configured_model(config, train_set.sample_shape)
    train(model, train_set, train_config(config))
    t = config.trace
    trace_kwargs = {"batch_size": t.batch_size, "tolerance": t.tolerance, "max_iters": t.max_iters,
                    "window": t.window, "seed": config.seed}
    return {
        "config": config, "model": model, "train_set": train_set, "test_set": test_set,
        "weight_traces": ef_weight_trace(model, train_set, **trace_kwargs),
        "activation_traces": ef_activation_trace(model, train_set, **trace_kwargs),
        "ranges": track_ranges(model, train_set, config.quantization.ema_decay),
        "sweeps": {},
    }


def desk_correlations(desk, seed):
    if seed not in desk["sweeps"]:
        config = desk["config"]
        rows = run_sweep(desk["model"], desk["train_set"], desk["test_set"], config.sweep.n_configs,
                         config.quantization.bits, seed, qat_config(config), desk["weight_traces"],
                         desk["activation_traces"], desk["ranges"], jobs=config.sweep.jobs)
        desk["sweeps"][seed] = {r.heuristic: r.rho_test for r in correlate(rows)}
    return desk["sweeps"][seed]


@pytest.mark.slow
class TestDeskStudies:
    def test_fit_correlates_with_accuracy(self, desk):
        rho = desk_correlations(desk, desk["config"].seed)
        assert rho["FIT"] >= 0.5
        assert rho["FIT"] >= rho["QR"]

    def test_activation_term_helps_on_average(self, desk):
        gains = []
        for seed in range(5):
            rho = desk_correlations(desk, seed)
            gains.append(rho["FIT"] - rho["FIT_W"])
        assert np.mean(gains) >= 0

    def test_empirical_fisher_beats_hutchinson(self):
        train_set = make_synthetic_digits(300, 10, 8, seed=0)
        model = build_model(desk_cnn_specs(10), 10, (1, 8, 8), seed=0)
        train(model, train_set, TrainConfig(epochs=10, lr=0.01, batch_size=32))
        bench = benchmark_estimators(model, train_set, batch_size=32, iters=30, seed=0, repeats=3)
        assert bench.ef_variance < bench.h_variance
        assert bench.speedup > 1
