import json
import math

import numpy as np
import pytest

from focalattn.attention import hcfa_bias
from focalattn.decoder import DecoderConfig, init_params
from focalattn.synthgen import ClassSpec, generate_dataset
from focalattn.trainer import (OptimState, TrainConfig, TrainingError, adam_step, cosine_lr,
                               evaluate, hcfa_two_stage, train_run)

SPECS = [ClassSpec(0.5, 0.3, 0.1), ClassSpec(0.3, 0.8, 0.5), ClassSpec(0.2, 0.3, 0.1)]
SMALL = DecoderConfig(num_classes=3, feature_dim=8, input_dim=4, num_layers=1, num_heads=2,
                      ffn_dim=8, iou_hidden_dim=4, seed=0)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_dataset(SPECS, (8, 8), 4, counts={"train": 4, "val": 2, "test": 2}, master_seed=1)


def test_config_defaults_and_validation():
    tc = TrainConfig()
    assert (tc.base_lr, tc.effective_bias_lr, tc.batch_size) == (1e-4, pytest.approx(1e-2), 4)
    assert (tc.gamma, tc.beta, tc.loss.lam) == (2.0, 0.8, 1e-4)
    assert TrainConfig(bias_lr=0.5).effective_bias_lr == 0.5
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(strategy="focal")


def test_adam_zero_grad_is_stationary():
    p = {"w": np.array([1.0, -2.0])}
    out = adam_step(p, {"w": np.zeros(2)}, OptimState(), {"base": 0.1})
    np.testing.assert_array_equal(out["w"], p["w"])


def test_adam_descends_on_square():
    p = {"x": np.array(1.0)}
    out = adam_step(p, {"x": 2 * p["x"]}, OptimState(), {"base": 0.1})
    assert out["x"] < 1.0
    assert out["x"] == pytest.approx(0.9)   # first bias-corrected step has size lr


def test_adam_converges_on_bowl():
    target = np.array([1.5, -0.7])
    scale = np.array([1.0, 10.0])
    p, st = {"x": np.zeros(2)}, OptimState()
    for k in range(500):
        g = 2 * scale * (p["x"] - target)
        p = adam_step(p, {"x": g}, st, {"base": cosine_lr(k, 500, 0.1, 1e-4)})
    assert np.max(np.abs(p["x"] - target)) <= 1e-3
    assert st.step == 500


def test_adam_bias_group_rate_and_freeze():
    p = {"w": np.array([0.0]), "delta": np.array([0.0])}
    g = {"w": np.array([1.0]), "delta": np.array([1.0])}
    out = adam_step(p, g, OptimState(), {"base": 0.01, "bias": 1.0})
    assert out["w"][0] == pytest.approx(-0.01)
    assert out["delta"][0] == pytest.approx(-1.0)
    out = adam_step(p, g, OptimState(), {"base": 0.01, "bias": 1.0}, frozen=("delta",))
    assert out["delta"][0] == 0.0


def test_adam_rejects_nonfinite_gradient():
    with pytest.raises(TrainingError, match="delta"):
        adam_step({"delta": np.zeros(2)}, {"delta": np.array([0.0, np.inf])}, OptimState(),
                  {"bias": 1.0})


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3
    assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)
    lrs = [cosine_lr(k, 40, 1.0) for k in range(41)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1e-3)


def test_two_epochs_two_rows(tiny_ds):
    _, rec = train_run(tiny_ds, SMALL, TrainConfig(epochs=2, base_lr=1e-3, strategy="dfa"))
    assert len(rec.rows) == 2
    assert [r["epoch"] for r in rec.rows] == [1, 2]
    assert all(f"delta_{c}" in rec.rows[0] for c in range(3))
    assert rec.rows[1]["lr"] < rec.rows[0]["lr"]
    assert rec.wall_clock_seconds > 0
    assert len(rec.delta_final) == 3


def test_no_delta_columns_without_learnable_bias(tiny_ds):
    _, rec = train_run(tiny_ds, SMALL, TrainConfig(epochs=1, strategy="cffa"))
    assert not any(k.startswith("delta_") for k in rec.rows[0])
    assert rec.delta_final is None
    assert rec.bias_values == pytest.approx(list(2 * np.log1p(-tiny_ds.empirical_frequencies)))


def test_zero_frozen_bias_matches_no_bias(tiny_ds):
    a_params, a = train_run(tiny_ds, SMALL, TrainConfig(epochs=3, base_lr=3e-3, strategy="none"))
    b_params, b = train_run(tiny_ds, SMALL, TrainConfig(epochs=3, base_lr=3e-3, strategy="dfa",
                                                        warm_start=False, freeze_bias=True))
    for ra, rb in zip(a.rows, b.rows):
        for key in ra:
            if key.startswith(("train_", "val_")):
                assert ra[key] == rb[key], key
    assert b.delta_final == [0.0, 0.0, 0.0]
    np.testing.assert_array_equal(a_params.arrays["prompts"], b_params.arrays["prompts"])


def test_runs_are_reproducible(tiny_ds):
    cfg = TrainConfig(epochs=2, base_lr=1e-3, strategy="dfa", seed=4)
    _, a = train_run(tiny_ds, SMALL, cfg)
    _, b = train_run(tiny_ds, SMALL, cfg)
    assert a.rows == b.rows
    assert a.test_metrics == b.test_metrics


def test_hcfa_needs_baseline_dice(tiny_ds):
    with pytest.raises(TrainingError):
        train_run(tiny_ds, SMALL, TrainConfig(epochs=1, strategy="hcfa"))


def test_hcfa_two_stage(tiny_ds):
    _, rec = hcfa_two_stage(tiny_ds, SMALL, TrainConfig(epochs=2, base_lr=3e-3))
    s1, s2 = rec.stages
    assert s1.strategy == "none" and s2.strategy == "hcfa"
    assert rec.wall_clock_seconds > s2.wall_clock_seconds
    assert rec.wall_clock_seconds == pytest.approx(s1.wall_clock_seconds + s2.wall_clock_seconds)
    expected = hcfa_bias(s1.best_val["dice"], 2.0).values
    np.testing.assert_allclose(rec.bias_values, expected)
    d = np.array(s1.best_val["dice"])
    for i in range(3):
        for j in range(3):
            if d[i] < d[j]:
                assert rec.bias_values[i] > rec.bias_values[j]


def test_evaluate_is_deterministic(tiny_ds):
    p = init_params(SMALL)
    a, b = evaluate(p, tiny_ds.val), evaluate(p, tiny_ds.val)
    np.testing.assert_array_equal(a["dice"], b["dice"])
    np.testing.assert_array_equal(a["iou"], b["iou"])


def test_overfit_tiny_set():
    specs = [ClassSpec(0.5, 0.1), ClassSpec(0.3, 0.1), ClassSpec(0.2, 0.1)]
    ds = generate_dataset(specs, (6, 6), 4, counts={"train": 2, "val": 1, "test": 1}, master_seed=2)
    params, _ = train_run(ds, SMALL, TrainConfig(epochs=150, batch_size=2, base_lr=1e-2))
    assert np.all(evaluate(params, ds.train)["dice"] >= 0.95)


def test_record_files(tmp_path, tiny_ds):
    _, rec = hcfa_two_stage(tiny_ds, SMALL, TrainConfig(epochs=1))
    rec.write(tmp_path, "run")
    summary = json.loads((tmp_path / "run.json").read_text())
    assert {"config", "final_metrics", "delta_final", "wall_clock_seconds"} <= set(summary)
    assert (tmp_path / "run.csv").exists()
    assert (tmp_path / "run.stage1.json").exists() and (tmp_path / "run.stage2.csv").exists()
    assert math.isfinite(summary["wall_clock_seconds"])
