"""Acceptance checks, one test per criterion.

Each test records a line ``[criterion k] PASS|FAIL: detail``.  The lines are
printed in the pytest terminal summary, or directly when this file is run as
a script.  The training-based criteria (5 to 9) share one set of runs built
from ``configs/disconnect.ini``.
"""
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from focalattn import autodiff as ad
from focalattn.attention import (BiasVector, cffa_bias, dfa_cold_start, dfa_warm_start, hcfa_bias,
                                 self_gating_diagnostic)
from focalattn.decoder import DecoderConfig, count_parameters, decoder_forward, forward, init_params
from focalattn.experiments import load_config, load_records, run_experiment, run_one
from focalattn.objectives import LossWeights, composite_loss, dice_metric, iou_metric

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "disconnect.ini"
RESULTS: dict[int, str] = {}
A, B, C, D = range(4)


def _record(k: int, ok: bool, detail: str) -> None:
    line = f"[criterion {k:2d}] {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS[k] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------- exact checks

def test_criterion_01_gradient_exactness(tiny_fixture):
    cfg, params, x, y = tiny_fixture
    assert (cfg.num_classes, x.shape[0], cfg.feature_dim) == (3, 16, 8)
    w = LossWeights(alpha=0.25, mu=0.0625, lam=1e-4)

    def f(t, v):
        return composite_loss(forward(cfg, v, x), y, w, v["delta"]).total

    t0 = time.perf_counter()
    worst, per = ad.finite_diff_check(f, params.trainable(), h=1e-4, return_details=True)
    elapsed = time.perf_counter() - t0
    groups = len(per)
    ok = worst <= 1e-4 and elapsed < 10 and "delta" in per
    _record(1, ok, f"max relative error {worst:.2e} over {groups} parameter groups "
                   f"(delta {per['delta']:.2e}) in {elapsed:.1f}s")


def test_criterion_02_formula_oracles():
    checks = [
        (cffa_bias([0.7, 0.2, 0.1], 2.0).values, [-2.407946, -0.446287, -0.210721]),
        (hcfa_bias([0.8, 0.6, 0.6], 2.0).values, [-1.021651, -0.713350, -0.713350]),
        (dfa_warm_start([0.9, 0.1], 2.0, 0.8).values, [-1.757780, 1.757780]),
    ]
    err = max(float(np.max(np.abs(np.asarray(got) - want))) for got, want in checks)
    _record(2, err <= 1e-6, f"max deviation from hand values {err:.1e}")


def test_criterion_03_self_gating_gap():
    w = np.array([[0.75], [0.25]])
    d1, e1, g1 = self_gating_diagnostic(np.array([[1.0], [0.0]]), w)
    d2, e2, _ = self_gating_diagnostic(np.ones((2, 1)), w)
    errs = [abs(d1[0] - 0.1875), abs(e1[0] - 0.1875), abs(g1[0]),
            float(np.max(np.abs(e2))), abs(d2[0] - 0.1875)]
    _record(3, max(errs) <= 1e-10,
            f"coincidence gap {abs(g1[0]):.1e}; uniform upstream exact {e2.tolist()} "
            f"vs diagonal {d2[0]:.4f}")


def test_criterion_04_noop_and_shift_invariance(tiny_fixture):
    cfg, params, x, _ = tiny_fixture
    none = decoder_forward(params.with_bias(BiasVector.zeros(3)), x)
    zero = decoder_forward(params.with_bias(dfa_cold_start(3)), x)
    noop = max(float(np.max(np.abs(none.mask_probs.value - zero.mask_probs.value))),
               float(np.max(np.abs(none.iou_pred.value - zero.iou_pred.value))))
    a = decoder_forward(params, x)
    b = decoder_forward(params.with_bias(BiasVector("dfa", params.bias.values + 3.1)), x)
    shift = max(float(np.max(np.abs(ha.weights.value - hb.weights.value)))
                for la, lb in zip(a.attention, b.attention) for ha, hb in zip(la, lb))
    shift = max(shift, float(np.max(np.abs(a.mask_probs.value - b.mask_probs.value))))
    _record(4, noop <= 1e-12 and shift <= 1e-12,
            f"none vs zero-delta {noop:.1e}; constant shift {shift:.1e}")


def test_criterion_10_parameter_count():
    cfg = DecoderConfig(num_classes=4)
    total_none, _ = count_parameters(init_params(cfg))
    total_dfa, extra = count_parameters(init_params(cfg, dfa_warm_start([0.55, 0.3, 0.1, 0.05])))
    diff = total_dfa - total_none
    _record(10, diff == 4 and extra == 4, f"DFA adds {diff} scalars for C=4 ({total_none} -> {total_dfa})")


def test_criterion_11_metric_identities():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        p = rng.uniform(size=(1, n)) < rng.uniform()
        t = rng.uniform(size=(1, n)) < rng.uniform()
        d, j = dice_metric(p, t), iou_metric(p, t)
        worst = max(worst, float(np.max(np.abs(d - 2 * j / (1 + j)))))
    target = np.array([[1, 1, 1, 1, 0, 0, 0, 0]])
    pred = np.array([[1, 1, 0, 0, 0, 0, 0, 0]])
    hand = dice_metric(pred, target)[0] == 2 * 2 / (2 + 4) and iou_metric(pred, target)[0] == 2 / 4
    _record(11, worst <= 1e-12 and hand, f"identity max error {worst:.1e} over 1000 pairs; "
                                         f"hand counts {'exact' if hand else 'mismatch'}")


# ---------------------------------------------------------------- training runs

@pytest.fixture(scope="module")
def comparison(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    cfg = load_config(CONFIG, out_dir=out, methods=("base+focal",))
    t0 = time.perf_counter()
    res = run_experiment(cfg)
    baseline_seconds = time.perf_counter() - t0
    assert res.ok, res.failures
    res = run_experiment(load_config(CONFIG, out_dir=out, methods=("dfa", "dfa-cold")))
    assert res.ok, res.failures
    return cfg, load_records(out), baseline_seconds


def _median(records, method, field, seeds, key="dice"):
    vals = [records[(method, s)][field] for s in seeds]
    if key is not None:
        vals = [v[key] for v in vals]
    return np.median(np.array(vals, dtype=float), axis=0)


def test_criterion_05_disconnect(comparison):
    cfg, recs, seconds = comparison
    base = _median(recs, "base+focal", "best_val", cfg.seeds)
    ok = base[C] > base[B] and seconds < 600
    _record(5, ok, f"base+focal median val Dice C {base[C]:.3f} vs B {base[B]:.3f} "
                   f"(all classes {np.round(base, 3).tolist()}); {seconds:.0f}s for 3 seeds")


def test_criterion_06_dfa_improves_hard_classes(comparison):
    cfg, recs, _ = comparison
    base = _median(recs, "base+focal", "best_val", cfg.seeds)
    dfa = _median(recs, "dfa", "best_val", cfg.seeds)
    ok = dfa[B] > base[B] and dfa[D] > base[D]
    _record(6, ok, f"median val Dice B dfa {dfa[B]:.4f} vs base {base[B]:.4f}; "
                   f"D dfa {dfa[D]:.4f} vs base {base[D]:.4f}")


def test_criterion_07_bias_tracks_difficulty(comparison):
    cfg, recs, _ = comparison
    delta = _median(recs, "dfa", "delta_final", cfg.seeds, key=None)
    corrs = [np.corrcoef(recs[("dfa", s)]["delta_final"],
                         recs[("base+focal", s)]["best_val"]["dice"])[0, 1] for s in cfg.seeds]
    corr = float(np.median(corrs))
    ok = delta[B] > delta[A] and delta[D] > delta[C] and corr < 0
    _record(7, ok, f"median delta {np.round(delta, 3).tolist()}; "
                   f"median corr(delta, baseline Dice) {corr:.3f}")


def test_criterion_08_warm_vs_cold(comparison):
    cfg, recs, _ = comparison
    spread = lambda m: float(np.median([np.ptp(recs[(m, s)]["delta_final"]) for s in cfg.seeds]))
    mean_dice = lambda m: float(np.median([np.mean(recs[(m, s)]["best_val"]["dice"]) for s in cfg.seeds]))
    sw, sc = spread("dfa"), spread("dfa-cold")
    dw, dc = mean_dice("dfa"), mean_dice("dfa-cold")
    ok = sw >= 3 * sc and dw >= dc
    _record(8, ok, f"median spread warm {sw:.3f} vs cold {sc:.3f} (ratio {sw / sc:.2f}, need 3); "
                   f"mean val Dice warm {dw:.4f} vs cold {dc:.4f}")


def test_criterion_09_efficiency(comparison, tmp_path):
    cfg, recs, _ = comparison
    seed = cfg.seeds[0]
    hcfa = run_one(load_config(CONFIG, out_dir=tmp_path), "hcfa", seed)
    s1, s2 = hcfa.stages
    assert len(s1.rows) == len(s2.rows) == recs[("dfa", seed)]["config"]["train"]["epochs"]
    dfa_seconds = recs[("dfa", seed)]["wall_clock_seconds"]
    ratio = dfa_seconds / hcfa.wall_clock_seconds
    _record(9, ratio <= 0.7, f"DFA {dfa_seconds:.1f}s vs HCFA two-stage {hcfa.wall_clock_seconds:.1f}s "
                             f"(ratio {ratio:.2f}) at {len(s1.rows)} epochs per stage")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
