import numpy as np
import pytest

from fitkit import functional as F
from fitkit.data import Dataset
from fitkit.errors import IndeterminateError, NumericalError, OracleLimitError, ValidationError
from fitkit.graph import exact_hessian
from fitkit.quantization import BitConfig, LayerBits, QuantScheme, RangeReport, quantize_uniform
from fitkit.sensitivity import (
    ConvergenceMonitor,
    TraceReport,
    baseline_heuristics,
    convergence_monitor,
    ef_activation_trace,
    ef_weight_trace,
    empirical_fisher_matrix,
    fisher_hessian_agreement,
    fit_metric,
    hutchinson_trace,
    hutchinson_variance_predict,
    kl_quadratic_check,
    monte_carlo_noise,
    perturbation_ratios,
)

PAIR = np.array([[2.0, 1.0], [1.0, 3.0]])


def block_diagonal_traces(model, matrix):
    traces, start = {}, 0
    for block in model.blocks:
        stop = start + block.n
        traces[block.name] = float(np.trace(matrix[start:stop, start:stop]))
        start = stop
    return traces


def two_layer_ranges():
    return RangeReport({"a": (0.0, 3.0), "b": (-1.0, 1.0)}, {"a": (0.0, 15.0), "b": (0.0, 2.0)})


class TestEmpiricalFisher:
    @pytest.mark.parametrize("fixture", ["tiny_mlp", "tiny_cnn"])
    def test_full_batch_matches_explicit_matrix(self, fixture, request, tiny_data, digits):
        model = request.getfixturevalue(fixture)
        data = tiny_data if fixture == "tiny_mlp" else digits[0].subset(range(10))
        report = ef_weight_trace(model, data, batch_size=len(data) + 5, tolerance=0.0, max_iters=1)
        expected = block_diagonal_traces(model, empirical_fisher_matrix(model, data))
        for name, value in expected.items():
            assert report.blocks[name].trace == pytest.approx(value, rel=1e-10)
            assert report.blocks[name].iterations == 1

    def test_zero_tolerance_runs_max_iters(self, tiny_mlp, tiny_data):
        report = ef_weight_trace(tiny_mlp, tiny_data, batch_size=4, tolerance=0.0, max_iters=7, window=2)
        assert report.iterations == 7
        assert not report.converged
        assert all(len(b.history) == 7 for b in report.blocks.values())

    def test_same_seed_same_report(self, tiny_mlp, tiny_data):
        a = ef_weight_trace(tiny_mlp, tiny_data, batch_size=4, tolerance=0.0, max_iters=5, seed=3)
        b = ef_weight_trace(tiny_mlp, tiny_data, batch_size=4, tolerance=0.0, max_iters=5, seed=3)
        assert a.to_document() == b.to_document()

    def test_block_subset(self, tiny_mlp, tiny_data):
        report = ef_weight_trace(tiny_mlp, tiny_data, max_iters=1, tolerance=0.0, blocks=["head"])
        assert list(report.blocks) == ["head"]
        assert report.blocks["head"].num_elements == 15

    def test_non_finite_gradient_names_block_and_batch(self, tiny_mlp, tiny_data):
        tiny_mlp.block("head").weights.data[0, 0] = np.nan
        with pytest.raises(NumericalError) as info:
            ef_weight_trace(tiny_mlp, tiny_data, max_iters=3, tolerance=0.0)
        assert info.value.block in tiny_mlp.block_names
        assert info.value.batch == 0

    def test_oracle_limit(self, tiny_mlp, tiny_data):
        with pytest.raises(OracleLimitError):
            empirical_fisher_matrix(tiny_mlp, tiny_data, limit=10)


class TestActivationTrace:
    def test_head_site_is_softmax_residual(self, tiny_mlp, tiny_data):
        report = ef_activation_trace(tiny_mlp, tiny_data, batch_size=64, tolerance=0.0, max_iters=1)
        probs = F.softmax(tiny_mlp.forward(tiny_data.inputs).data)
        residual = probs - np.eye(3)[tiny_data.labels]
        assert report.blocks["head"].trace == pytest.approx(np.mean(np.sum(residual ** 2, axis=1)), rel=1e-10)
        assert report.blocks["head"].num_elements == 3
        assert report.blocks["fc1"].num_elements == 5

    def test_conv_site_elements(self, tiny_cnn, digits):
        report = ef_activation_trace(tiny_cnn, digits[0], batch_size=8, tolerance=0.0, max_iters=2)
        assert report.blocks["conv1"].num_elements == 2 * 8 * 8
        assert report.blocks["conv3"].num_elements == 4 * 2 * 2
        assert all(b.trace >= 0 for b in report.blocks.values())


class TestHutchinson:
    def test_two_by_two_enumeration(self):
        signs = [np.array([a, b]) for a in (-1.0, 1.0) for b in (-1.0, 1.0)]
        values = [r @ PAIR @ r for r in signs]
        assert np.mean(values) == 5.0
        assert np.var(values) == 4.0
        assert hutchinson_variance_predict(PAIR) == 4.0

    def test_two_by_two_sampled(self):
        report = hutchinson_trace(PAIR, m=100_000, seed=0)
        block = report.blocks["matrix"]
        assert block.iterations == 100_000
        assert abs(block.trace - 5.0) <= 3 * np.sqrt(4.0 / 100_000)
        assert block.variance == pytest.approx(4.0, rel=0.05)

    def test_random_matrices_match_predicted_variance(self):
        gen = np.random.default_rng(42)
        m = 100_000
        for i in range(20):
            a = gen.standard_normal((10, 10))
            h = (a + a.T) / 2
            block = hutchinson_trace(h, m=m, seed=i).blocks["matrix"]
            predicted = hutchinson_variance_predict(h)
            assert block.variance == pytest.approx(predicted, rel=0.10)
            assert abs(block.trace - np.trace(h)) <= 3 * np.sqrt(predicted / m)

    def test_diagonal_matrix_is_exact(self):
        block = hutchinson_trace(np.diag([1.0, 2.0, 3.0]), m=10, seed=0).blocks["matrix"]
        assert block.trace == pytest.approx(6.0)
        assert block.variance == pytest.approx(0.0)

    def test_rejects_non_square(self):
        with pytest.raises(ValidationError):
            hutchinson_trace(np.ones((2, 3)), m=5)

    def test_model_blocks_match_exact_hessian(self, tiny_mlp, tiny_data):
        weights = [b.weights for b in tiny_mlp.blocks]
        hessian, _ = exact_hessian(lambda: tiny_mlp.loss(tiny_data.inputs, tiny_data.labels), weights)
        m = 300
        report = hutchinson_trace(tiny_mlp, tiny_data, m=m, seed=1, batch_size=len(tiny_data))
        start = 0
        for block in tiny_mlp.blocks:
            part = hessian[start:start + block.n, start:start + block.n]
            start += block.n
            bound = 3 * np.sqrt(hutchinson_variance_predict(part) / m) + 1e-9
            assert abs(report.blocks[block.name].trace - np.trace(part)) <= bound

    def test_model_needs_dataset(self, tiny_mlp):
        with pytest.raises(ValidationError):
            hutchinson_trace(tiny_mlp)


class TestConvergence:
    def test_constant_stream_stops_at_window(self):
        result = convergence_monitor([2.5] * 100, tolerance=0.01, window=10)
        assert result.stopped
        assert result.iterations == 10

    def test_zero_tolerance_never_stops(self):
        result = convergence_monitor([1.0] * 50, tolerance=0.0, window=5)
        assert not result.stopped
        assert result.iterations == 50

    def test_max_iters_caps_the_stream(self):
        result = convergence_monitor(iter(np.random.default_rng(0).normal(1.0, 5.0, 1000)), 1e-6, 5, max_iters=30)
        assert result.iterations == 30

    def test_zero_mean_with_spread_uses_absolute_error(self):
        result = convergence_monitor([1.0, -1.0] * 20, tolerance=0.5, window=20)
        assert result.stopped
        assert result.iterations == 20
        assert result.fallback_blocks == ["value"]

    def test_alternating_stream_does_not_stop(self):
        # mean 1, windowed std ~1: the standard error at t=100 is still ~0.1
        result = convergence_monitor([0.0, 2.0] * 50, tolerance=0.01, window=20)
        assert not result.stopped
        assert result.iterations == 100

    def test_every_block_must_be_stable(self):
        monitor = ConvergenceMonitor(tolerance=0.01, window=3)
        stops = [monitor.update({"steady": 1.0, "noisy": v}) for v in (1.0, 10.0, 0.1, 5.0)]
        assert not any(stops)

    @pytest.mark.parametrize("kwargs", [{"tolerance": -0.1}, {"window": 1}])
    def test_invalid_arguments(self, kwargs):
        with pytest.raises(ValidationError):
            ConvergenceMonitor(**kwargs)


class TestTraceReport:
    def test_document_round_trip_and_scaling(self, tiny_mlp, tiny_data):
        report = ef_weight_trace(tiny_mlp, tiny_data, batch_size=4, tolerance=0.0, max_iters=3)
        restored = TraceReport.from_document(report.to_document())
        assert restored.traces() == report.traces()
        scaled = report.scaled(2.0)
        for name, value in report.traces().items():
            assert scaled.traces()[name] == pytest.approx(2 * value)
            assert scaled.blocks[name].normalized_variance == pytest.approx(report.blocks[name].normalized_variance)

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            TraceReport.from_document({"kind": "lanczos", "blocks": []})


class TestFIT:
    def test_zero_traces_give_zero(self):
        bits = BitConfig.uniform(["a", "b"], 3)
        report = fit_metric({"a": 0.0, "b": 0.0}, {"a": 0.0, "b": 0.0}, bits, two_layer_ranges())
        assert report.omega == 0.0

    def test_decomposition(self):
        ranges = two_layer_ranges()
        bits = BitConfig((LayerBits("a", 2, 4), LayerBits("b", 8, 3)))
        w, a = {"a": 2.0, "b": 0.5}, {"a": 0.1, "b": 4.0}
        report = fit_metric(w, a, bits, ranges)
        assert report.weight_terms["a"] == pytest.approx(2.0 * 1.0)
        assert report.activation_terms["a"] == pytest.approx(0.1 * 1.0)
        assert report.omega == sum(report.weight_terms.values()) + sum(report.activation_terms.values())
        with_twelfth = fit_metric(w, a, bits, ranges, include_twelfth=True)
        assert with_twelfth.omega == pytest.approx(report.omega / 12)

    def test_components(self):
        ranges, bits = two_layer_ranges(), BitConfig.uniform(["a", "b"], 4)
        w, a = {"a": 2.0, "b": 0.5}, {"a": 0.1, "b": 4.0}
        both = fit_metric(w, a, bits, ranges).omega
        weight_only = fit_metric(w, a, bits, ranges, components="weight").omega
        activation_only = fit_metric(w, a, bits, ranges, components="activation").omega
        assert both == pytest.approx(weight_only + activation_only)
        assert weight_only == pytest.approx(fit_metric(w, None, bits, ranges).omega)

    def test_ranking_ignores_trace_scale(self):
        ranges = two_layer_ranges()
        w, a = {"a": 3.0, "b": 0.2}, {"a": 0.5, "b": 1.5}
        configs = [BitConfig((LayerBits("a", wa, aa), LayerBits("b", wb, ab)))
                   for wa, aa, wb, ab in [(8, 8, 3, 3), (3, 3, 8, 8), (4, 6, 6, 4), (6, 3, 3, 6)]]

        def ranking(scale):
            scores = [fit_metric({k: v * scale for k, v in w.items()}, {k: v * scale for k, v in a.items()},
                                 c, ranges).omega for c in configs]
            return list(np.argsort(scores))

        assert ranking(1.0) == ranking(1e-6) == ranking(250.0)

    def test_missing_trace(self):
        with pytest.raises(ValidationError):
            fit_metric({"a": 1.0}, None, BitConfig.uniform(["a", "b"], 4), two_layer_ranges())

    def test_empirical_weight_noise(self, rng):
        values = rng.normal(size=500)
        scheme = QuantScheme(3, float(values.min()), float(values.max()))
        expected = np.mean((quantize_uniform(values, scheme) - values) ** 2)
        assert monte_carlo_noise(values, scheme) == pytest.approx(expected)
        ranges = RangeReport({"a": (scheme.theta_min, scheme.theta_max)}, {"a": (0.0, 1.0)})
        report = fit_metric({"a": 2.0}, None, BitConfig.uniform(["a"], 3), ranges, weights={"a": values})
        assert report.omega == pytest.approx(2.0 * expected)
        assert report.noise_model == "empirical"


class TestHeuristics:
    def test_quantization_range_closed_form(self):
        bits = BitConfig((LayerBits("a", 2, 4),))
        ranges = RangeReport({"a": (0.0, 3.0)}, {"a": (0.0, 15.0)})
        assert baseline_heuristics("QR_W", bits, ranges) == pytest.approx(3.0 / 9.0)
        assert baseline_heuristics("QR_A", bits, ranges) == pytest.approx(15.0 / 225.0)
        assert baseline_heuristics("QR", bits, ranges) == pytest.approx(1.0 / 3.0 + 1.0 / 15.0)

    def test_zero_width_range_contributes_nothing(self):
        bits = BitConfig((LayerBits("a", 4, 4),))
        ranges = RangeReport({"a": (0.5, 0.5)}, {})
        assert baseline_heuristics("QR", bits, ranges) == 0.0

    def test_noise_heuristic(self):
        bits = BitConfig((LayerBits("a", 2, 4),))
        ranges = RangeReport({"a": (0.0, 3.0)}, {"a": (0.0, 15.0)})
        assert baseline_heuristics("Noise", bits, ranges) == pytest.approx(2.0)

    def test_batchnorm_scales(self, tiny_bn_cnn):
        tiny_bn_cnn.params["bn1.gamma"].data = np.array([0.5, -1.5])
        ranges = RangeReport({"conv1": (0.0, 3.0), "fc": (0.0, 3.0)}, {"conv1": (0.0, 3.0), "fc": (0.0, 3.0)})
        bits = BitConfig.uniform(["conv1", "fc"], 2)
        assert baseline_heuristics("BN", bits, ranges, model=tiny_bn_cnn) == pytest.approx(2.0 / 1.0)

    def test_batchnorm_requires_batchnorm(self, tiny_cnn):
        with pytest.raises(ValidationError):
            baseline_heuristics("BN", BitConfig.uniform(tiny_cnn.block_names, 4), two_layer_ranges(), model=tiny_cnn)

    def test_fit_kinds_match_fit_metric(self):
        ranges, bits = two_layer_ranges(), BitConfig.uniform(["a", "b"], 3)
        w, a = {"a": 1.0, "b": 2.0}, {"a": 0.5, "b": 0.25}
        assert baseline_heuristics("FIT", bits, ranges, w, a) == pytest.approx(fit_metric(w, a, bits, ranges).omega)
        assert baseline_heuristics("FIT_A", bits, ranges, w, a) == pytest.approx(
            fit_metric(w, a, bits, ranges, components="activation").omega)

    def test_fit_family_follows_empirical_noise(self, rng):
        values = {"a": rng.normal(size=200), "b": rng.uniform(-1.0, 1.0, size=50)}
        ranges = RangeReport({k: (float(v.min()), float(v.max())) for k, v in values.items()},
                             {"a": (0.0, 2.0), "b": (0.0, 1.0)})
        bits, w, a = BitConfig.uniform(["a", "b"], 3), {"a": 2.0, "b": 0.5}, {"a": 0.1, "b": 1.0}
        empirical = baseline_heuristics("FIT", bits, ranges, w, a, weights=values)
        assert empirical == pytest.approx(fit_metric(w, a, bits, ranges, weights=values).omega)
        assert empirical != pytest.approx(baseline_heuristics("FIT", bits, ranges, w, a))
        assert baseline_heuristics("QR", bits, ranges, w, a, weights=values) == baseline_heuristics("QR", bits, ranges)

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            baseline_heuristics("Hessian",BitConfig.uniform(["a"], 4), two_layer_ranges())


class TestAgreement:
    @pytest.mark.parametrize("fixture", ["softmax_regression", "tiny_mlp"])
    def test_enumerated_fisher_equals_expected_hessian(self, fixture, request, tiny_data):
        model = request.getfixturevalue(fixture)
        report = fisher_hessian_agreement(model, tiny_data, 1, label_mode="enumerated")
        assert report.gap < 1e-8

    def test_sampled_gap_is_small_with_large_budget(self, softmax_regression, tiny_data):
        report = fisher_hessian_agreement(softmax_regression, tiny_data, 10_000, seed=0)
        assert report.gap <= 0.05

    def test_gap_shrinks_with_budget(self, softmax_regression, tiny_data):
        def decreasing(seed):
            gaps = [fisher_hessian_agreement(softmax_regression, tiny_data, budget, seed=seed).gap
                    for budget in (100, 1_000, 10_000)]
            return gaps[0] > gaps[1] > gaps[2]

        assert sum(decreasing(s) for s in range(10)) >= 8

    def test_given_labels_widen_the_gap(self, softmax_regression, tiny_data):
        head = softmax_regression.block("head")
        head.weights.data *= 4.0
        probs = F.softmax(softmax_regression.forward(tiny_data.inputs).data)
        contrary = Dataset(tiny_data.inputs, np.argmin(probs, axis=1), 3)
        realizable = fisher_hessian_agreement(softmax_regression, contrary, 10_000, seed=0, label_mode="model")
        given = fisher_hessian_agreement(softmax_regression, contrary, 10_000, seed=0, label_mode="given")
        assert given.gap > realizable.gap
        assert given.gap > 0.5

    def test_zero_hessian_is_indeterminate(self, softmax_regression):
        data = Dataset(np.zeros((4, 4)), np.array([0, 1, 2, 0]), 3)
        report = fisher_hessian_agreement(softmax_regression, data, 10, label_mode="given")
        assert report.indeterminate
        assert np.isnan(report.gap)

    def test_invalid_arguments(self, softmax_regression, tiny_data):
        with pytest.raises(ValidationError):
            fisher_hessian_agreement(softmax_regression, tiny_data, 0)
        with pytest.raises(ValidationError):
            fisher_hessian_agreement(softmax_regression, tiny_data, 10, label_mode="true")


class TestLocalGeometry:
    def test_kl_ratio_tends_to_one(self, tiny_mlp, tiny_data):
        gen = np.random.default_rng(0)
        direction = {b.name: gen.standard_normal(b.weights.shape) for b in tiny_mlp.blocks}
        near = kl_quadratic_check(tiny_mlp, tiny_data, direction, 1e-4)
        far = kl_quadratic_check(tiny_mlp, tiny_data, direction, 0.3)
        assert near.ratio == pytest.approx(1.0, abs=0.02)
        assert abs(near.ratio - 1.0) < abs(far.ratio - 1.0)

    def test_kl_direction_must_cover_blocks(self, tiny_mlp, tiny_data):
        with pytest.raises(ValidationError):
            kl_quadratic_check(tiny_mlp, tiny_data, {"fc1": np.zeros((5, 4))}, 1e-3)

    def test_perturbation_ratios_shrink_with_bits(self, tiny_cnn):
        fine = perturbation_ratios(tiny_cnn, BitConfig.uniform(tiny_cnn.block_names, 8))
        coarse = perturbation_ratios(tiny_cnn, BitConfig.uniform(tiny_cnn.block_names, 2))
        for name in tiny_cnn.block_names:
            assert fine[name]["median"] < coarse[name]["median"]
            assert fine[name]["fraction_below_one"] >= 0.9

    def test_all_zero_block(self, tiny_mlp):
        tiny_mlp.block("head").weights.data[:] = 0.0
        with pytest.raises(IndeterminateError):
            perturbation_ratios(tiny_mlp, BitConfig.uniform(tiny_mlp.block_names, 4))
