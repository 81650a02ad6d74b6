"""Metric and analytic cost-accounting tests."""

import numpy as np
import pytest

from spat.cost import (
    CostReport,
    MetricAccumulator,
    attention_params,
    build_cost_report,
    count_flops,
    count_params,
    dense_params,
    format_cost_report,
    format_horizon_csv,
    format_horizon_text,
    horizon_table,
    mae,
    matmul_flops,
    mse,
    reduction_percent,
)
from spat.errors import ShapeError
from spat.model import Forecaster, ModelConfig


def temporal_model(lookback=96, channels=7, layers=3, d_model=16, **kw):
    cfg = ModelConfig(mode="temporal_tokens", lookback=lookback, horizon=24,
                      channels=channels, d_model=d_model, d_ff=2 * d_model,
                      heads=2, layers=layers, patch_len=16, patch_stride=8, **kw)
    return Forecaster(cfg, seed=0)


def variate_model(lookback=96, channels=7, layers=3, d_model=16, **kw):
    cfg = ModelConfig(mode="variate_tokens", lookback=lookback, horizon=24,
                      channels=channels, d_model=d_model, d_ff=2 * d_model,
                      heads=2, layers=layers, **kw)
    return Forecaster(cfg, seed=0)


class TestParams:
    def test_single_linear_with_bias(self):
        assert dense_params(4, 3) == 15

    def test_attention_weight_count_closed_form(self):
        model = variate_model(d_model=16)
        report = count_params(model)
        assert report["block0.attention"] == attention_params(16)
        assert attention_params(16) == 4 * 16 * 16 + 4 * 16

    def test_pruning_removes_exactly_the_attention_scalars(self):
        model = variate_model(d_model=16)
        before = sum(count_params(model).values())
        model.blocks[1].remove_attention()
        after = sum(count_params(model).values())
        assert before - after == attention_params(16)

    def test_total_matches_stored_scalars(self):
        model = temporal_model()
        total = sum(p.data.size for _, p in model.named_parameters())
        assert sum(count_params(model).values()) == total

    def test_temporal_delta_consistent_with_reference_scale(self):
        # 3-layer temporal model at d_model=128: removing one attention
        # module drops ~66K scalars, the same relative magnitude as the
        # published 2.212M -> 2.146M full-scale reports.
        model = temporal_model(lookback=336, d_model=128)
        pruned = temporal_model(lookback=336, d_model=128)
        pruned.blocks[0].remove_attention()
        delta = (sum(count_params(model).values())
                 - sum(count_params(pruned).values()))
        assert delta == attention_params(128) == 66_048
        assert abs(delta - (2_212_000 - 2_146_000)) / 66_000 < 0.01


class TestFlops:
    def test_single_matmul(self):
        assert matmul_flops(1, 4, 3) == 24

    def test_totals_equal_breakdown_sum(self):
        report = build_cost_report(temporal_model())
        assert report.flops_total == sum(report.flops.values())
        assert report.params_total == sum(report.params.values())

    def test_temporal_flops_strictly_increase_with_lookback(self):
        totals = [build_cost_report(temporal_model(lookback=l)).flops_total
                  for l in (48, 96, 192, 336)]
        assert all(a < b for a, b in zip(totals, totals[1:]))

    def test_variate_flops_strictly_increase_with_channels(self):
        totals = [build_cost_report(variate_model(channels=c)).flops_total
                  for c in (3, 7, 14, 28)]
        assert all(a < b for a, b in zip(totals, totals[1:]))

    def test_variate_attention_flops_independent_of_lookback(self):
        subtotals = [build_cost_report(variate_model(lookback=l)).attention_flops()
                     for l in (48, 96, 192)]
        assert subtotals[0] == subtotals[1] == subtotals[2]

    def test_pruning_k_of_n_identical_blocks_scales_attention_subtotal(self):
        model = variate_model(layers=4)
        full = build_cost_report(model)
        model.blocks[0].remove_attention()
        model.blocks[2].remove_attention()
        half = build_cost_report(model)
        assert half.attention_flops() * 2 == full.attention_flops()

    def test_pruned_flops_and_params_strictly_decrease(self):
        model = temporal_model()
        base = build_cost_report(model)
        model.blocks[1].remove_attention()
        pruned = build_cost_report(model)
        assert pruned.flops_total < base.flops_total
        assert pruned.params_total < base.params_total
        cuts = pruned.reduction_vs(base)
        assert 0.0 < cuts["flops"] < 100.0
        assert 0.0 < cuts["params"] < 100.0

    def test_wrong_lookback_rejected(self):
        with pytest.raises(ShapeError):
            count_flops(temporal_model(lookback=96), (1, 48, 7))


class TestReductionArithmetic:
    def test_published_traffic_flops_reduction(self):
        # 1 - 28.678/34.226 must reproduce the published 16.210% figure
        assert abs(reduction_percent(34.226, 28.678) - 16.210) < 0.01

    def test_reduction_from_generated_reports(self):
        ref = CostReport(flops={"a": 34_226}, params={"a": 2_212})
        cur = CostReport(flops={"a": 28_678}, params={"a": 2_146})
        cuts = cur.reduction_vs(ref)
        assert abs(cuts["flops"] - 16.210) < 0.01
        assert abs(cuts["params"] - 2.984) < 0.01


class TestMetrics:
    def test_mae_zero_when_equal(self):
        assert mae(np.ones((2, 2)), np.ones((2, 2))) == 0.0

    def test_hand_values(self):
        assert mae(np.array([1.0, -1.0]), np.zeros(2)) == 1.0
        assert mse(np.array([1.0, -1.0]), np.zeros(2)) == 1.0

    def test_loop_oracle(self):
        rng = np.random.default_rng(3)
        pred, target = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 2))
        se = ae = 0.0
        for idx in np.ndindex(pred.shape):
            se += (pred[idx] - target[idx]) ** 2
            ae += abs(pred[idx] - target[idx])
        assert abs(mse(pred, target) - se / pred.size) < 1e-12
        assert abs(mae(pred, target) - ae / pred.size) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_nonnegative_and_zero_iff_exact(self):
        rng = np.random.default_rng(4)
        pred, target = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
        assert mse(pred, target) > 0.0 and mae(pred, target) > 0.0
        assert mse(target, target) == 0.0

    def test_accumulator_matches_pooled_mean(self):
        rng = np.random.default_rng(5)
        pred, target = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
        acc = MetricAccumulator()
        acc.add(pred[:4], target[:4])
        acc.add(pred[4:], target[4:])
        assert abs(acc.mse - mse(pred, target)) < 1e-12
        assert abs(acc.mae - mae(pred, target)) < 1e-12


class TestHorizonReport:
    def test_identical_rows_average_to_same_value(self):
        metrics = {"mse": 0.5, "mae": 0.4, "flops": 100.0, "params": 10.0}
        rows = horizon_table({h: dict(metrics) for h in (96, 192, 336, 720)})
        assert rows[-1]["horizon"] == "avg"
        assert rows[-1]["mse"] == 0.5 and rows[-1]["params"] == 10.0

    def test_average_is_arithmetic_mean(self):
        rows = horizon_table({
            24: {"mse": 1.0, "mae": 1.0, "flops": 2.0, "params": 4.0},
            48: {"mse": 3.0, "mae": 2.0, "flops": 4.0, "params": 8.0},
        })
        assert abs(rows[-1]["mse"] - 2.0) < 1e-12
        assert abs(rows[-1]["flops"] - 3.0) < 1e-12

    def test_missing_checkpoint_is_absent_row_not_crash(self):
        rows = horizon_table({
            96: {"mse": 1.0, "mae": 1.0, "flops": 1.0, "params": 1.0},
            192: None,
        })
        absent = [r for r in rows if r["horizon"] == 192][0]
        assert absent["mse"] is None
        assert rows[-1]["mse"] == 1.0
        text = format_horizon_text(rows)
        assert "absent" in text

    def test_csv_structure(self):
        rows = horizon_table({96: {"mse": 1.0, "mae": 2.0, "flops": 3.0,
                                   "params": 4.0}})
        csv_text = format_horizon_csv(rows)
        lines = csv_text.strip().splitlines()
        assert lines[0] == "horizon,mse,mae,flops,params"
        assert lines[1].startswith("96,")
        assert lines[-1].startswith("avg,")


class TestReportFormat:
    def test_stable_schema_and_sections(self):
        text = format_cost_report(build_cost_report(variate_model(layers=2)))
        lines = text.splitlines()
        assert lines[0] == "cost_report_version: 1"
        assert lines[1].startswith("flops_total:")
        assert any(ln.startswith("section block0.attention:") for ln in lines)
