"""Acceptance checklist: thirteen productized checks covering gradient
correctness, localization semantics, mining and prototype algebra, the
benchmark effect sizes, granularity ordering, blend-sweep shape, inference
cost, the multi-class extension, feature separation, and reproducibility.

Benchmark-scale training runs land in .acceptance_cache/ next to the
package root, keyed by their full config; a DONE marker makes reruns cheap
(delete the directory to retrain).  Every check prints one PASS/FAIL line.
"""

import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from advcp import tensor as T
from advcp.adversarial import (AdversarialFeatures, MultiClassPrototypes, PrototypeState,
                               advcp_loss, all_change_localization, mine_mask,
                               multilabel_mine, total_loss, update_prototype)
from advcp.cam import LocalizationMaps, compute_localization, predict
from advcp.data import SPLITS, SceneConfig, generate, write_dataset
from advcp.interpolate import upsample
from advcp.model import ArchConfig, build_classifier
from advcp.trainer import TrainConfig, evaluate, split_report, train

ROOT = Path(__file__).resolve().parents[1]
CACHE = ROOT / ".acceptance_cache"
SEEDS = (1, 2, 3)

# benchmark recipe shared by every cached run (treatment arms differ only
# in the fields their check varies)
RECIPE = dict(total_iters=2000, batch_size=16, lr=0.05, widths=(8, 16, 32),
              warmup_iters=500, eval_every=250)

IOU_GAIN_POINTS = 2.0          # required mean IoU improvement
NOISE_FP_DROP = 0.20           # required relative noise-region FP reduction
RUN_BUDGET_S = 45 * 60.0       # per-run wall budget
CORE_BUDGET_S = 8 * 45 * 60.0  # summed budget across the six benchmark runs
EVAL_TOLERANCE = 0.05          # inference-cost parity band


def _verdict(num: int, passed: bool, detail: str):
    print(f"[check {num:2d}/13] {'PASS' if passed else 'FAIL'}: {detail}")
    assert passed, detail


# ---------------------------------------------------------------- cache --

def _bench_data() -> Path:
    data = CACHE / "data"
    if not (data / "test" / "index.csv").exists():
        cfg = SceneConfig()
        for split in SPLITS:
            write_dataset(generate(cfg, split), data / split, with_masks=split != "train")
    return data


def _config_key(cfg: TrainConfig) -> str:
    return json.dumps({f: repr(getattr(cfg, f)) for f in sorted(cfg.__dataclass_fields__)})


def _ensure_run(name: str, **overrides) -> dict:
    """Train (or reuse) one cached benchmark run; returns its test-split
    report plus the recorded training wall time."""
    data = _bench_data()
    cfg = TrainConfig(**{**RECIPE, **overrides}).validate()
    run_dir = CACHE / name
    done = run_dir / "DONE"
    key = _config_key(cfg)
    if not (done.exists() and json.loads(done.read_text()).get("key") == key):
        if run_dir.exists():
            shutil.rmtree(run_dir)
        started = time.monotonic()
        train(cfg, data, run_dir)
        done.write_text(json.dumps({"key": key, "wall_s": time.monotonic() - started}))
    report = split_report(run_dir, "test", data)
    report["wall_s"] = json.loads(done.read_text())["wall_s"]
    report["run_dir"] = run_dir
    return report


def _arm(prefix: str, **overrides) -> list[dict]:
    return [_ensure_run(f"{prefix}_seed{s}", seed=s, **overrides) for s in SEEDS]


@pytest.fixture(scope="session")
def baseline_runs():
    return _arm("baseline", alpha=0.0)


@pytest.fixture(scope="session")
def advcp_runs():
    return _arm("advcp", alpha=1.0, prototype_blend=0.5)


def _mean(rows, key):
    return float(np.mean([r[key] for r in rows]))


# ------------------------------------------------- 1: gradient fidelity --

def test_1_gradients_match_finite_differences():
    started = time.monotonic()
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(3):
        n, c, s = 2, int(rng.integers(2, 4)), int(rng.integers(8, 13))
        w1, w2 = int(rng.integers(3, 6)), int(rng.integers(3, 6))
        labels = rng.integers(0, 2, n)
        values = [rng.normal(0, 1, (n, c, s, s)), rng.normal(0, 1, (n, c, s, s)),
                  rng.normal(0, 0.5, (w1, c, 3, 3)), rng.normal(0, 0.1, w1),
                  rng.normal(0, 0.5, (w2, w1, 3, 3)), rng.normal(0, 0.1, w2),
                  rng.normal(0, 0.5, (w2, 2)), rng.normal(0, 0.1, 2)]

        def run_net():
            with T.Tape() as tape:
                xs = [T.Tensor(v, requires_grad=True) for v in values]
                x1, x2, k1, b1, k2, b2, w, b = xs

                def enc(x):
                    h = T.relu(T.conv2d(x, k1, b1, stride=2, padding=1))
                    return T.relu(T.conv2d(h, k2, b2, stride=2, padding=1))

                feats = T.abs_diff(enc(x1), enc(x2))
                logits = T.linear(T.global_avg_pool(feats), w, b)
                loss = T.softmax_cross_entropy(logits, labels)
            return tape, loss, xs

        tape, loss, xs = run_net()
        loss.backward()
        grads = [x.grad.copy() for x in xs]
        tape.release()
        for vi, value in enumerate(values):
            flat = value.reshape(-1)
            for cidx in rng.choice(flat.size, size=min(8, flat.size), replace=False):
                keep = flat[cidx]
                flat[cidx] = keep + 1e-5
                t_up, up, _ = run_net()
                t_up.release()
                flat[cidx] = keep - 1e-5
                t_dn, down, _ = run_net()
                t_dn.release()
                flat[cidx] = keep
                fd = (float(up.values) - float(down.values)) / 2e-5
                got = grads[vi].reshape(-1)[cidx]
                scale = max(abs(fd), abs(got), 1e-8)
                worst = max(worst, abs(fd - got) / scale)
    elapsed = time.monotonic() - started
    _verdict(1, worst < 1e-4 and elapsed < 30.0,
             f"composite-net finite differences, max rel err {worst:.2e} in {elapsed:.1f}s")


# -------------------------------------- 2: localization oracle equality --

def _cam_oracle(features, weights, h, w):
    n, d, fh, fw = features.shape
    k = weights.shape[1]
    maps = np.zeros((n, k, h, w))
    for i in range(n):
        raw = np.zeros((k, fh, fw))
        for cls in range(k):
            for ch in range(d):
                raw[cls] += features[i, ch] * weights[ch, cls]
        raw = np.maximum(raw, 0.0)
        up = np.stack([upsample(raw[cls], h, w) for cls in range(k)])
        peak = max(up.max(), 1e-12)
        maps[i] = up / peak
    return maps


def test_2_localization_matches_loop_oracle():
    rng = np.random.default_rng(23)
    worst = 0.0
    allchange_exact = True
    for _ in range(20):
        model = build_classifier(ArchConfig(3, (4, 8), 8), int(rng.integers(1, 10_000)))
        for p in model.parameters():
            p.values = rng.normal(0, 0.5, p.values.shape)
        x1 = rng.random((2, 3, 16, 16))
        x2 = rng.random((2, 3, 16, 16))
        rec = model.forward(x1, x2)
        maps = compute_localization(rec, model, mode="weights")
        oracle = _cam_oracle(rec.features.values, model.head_weight.values, 16, 16)
        worst = max(worst, float(np.abs(maps.maps - oracle).max()))
        prompt = all_change_localization(rec, model, mode="weights")
        allchange_exact &= np.array_equal(prompt, maps.maps[:, 1])
    _verdict(2, worst < 1e-10 and allchange_exact,
             f"20 random models: max |vectorized - loop oracle| = {worst:.2e}; "
             f"all-change response bit-identical to changed channel")


# ------------------------------------------------------ 3: tie semantics --

def test_3_tie_goes_to_changed():
    levels = (0.0, 0.25, 0.5, 1.0)
    grid = [(c, u) for c in levels for u in levels]
    raw = np.zeros((len(grid), 2, 1, 1))
    for i, (c, u) in enumerate(grid):
        raw[i, 1, 0, 0] = c
        raw[i, 0, 0, 0] = u
    wrapped = LocalizationMaps(maps=raw, normalized=True, cam_mode="weights",
                               norm_scope="joint")
    pred = predict(wrapped)
    ok = all(int(pred[i, 0, 0]) == (1 if c >= u else 0) for i, (c, u) in enumerate(grid))
    zeros = LocalizationMaps(maps=np.zeros((1, 2, 3, 3)), normalized=True,
                             cam_mode="weights", norm_scope="joint")
    ok &= bool((predict(zeros) == 1).all())
    _verdict(3, ok, "ties (including all-zero maps) predict changed across the grid")


# ------------------------------------------------------- 4: mask mining --

def test_4_mask_equals_xor_oracle():
    rng = np.random.default_rng(4)
    cbin = rng.integers(0, 2, (10_000, 2, 2)).astype(np.uint8)
    pred = rng.integers(0, 2, (10_000, 2, 2)).astype(np.uint8)
    mask = mine_mask(cbin, pred, mode="xor", source="all").mask
    exact = np.array_equal(mask, np.bitwise_xor(cbin, pred))
    self_inverse = not mine_mask(cbin, cbin, mode="xor", source="all").mask.any()
    _verdict(4, exact and self_inverse,
             "mined mask equals the XOR oracle on 10^4 map pairs; self-inverse holds")


# ------------------------------------------------------------- 5: EWMA --

def test_5_prototype_time_constant():
    rng = np.random.default_rng(5)
    lam = 0.3
    state = PrototypeState(center=rng.normal(0, 1, 6), blend=lam, updates=0,
                           granularity="online_global")
    p0 = state.center.copy()
    feeds = [rng.normal(0, 1, 6) for _ in range(50)]
    for f in feeds:
        state = update_prototype(state, f, count=4)
    closed = (1 - lam) ** 50 * p0
    for i, f in enumerate(feeds, start=1):
        closed += lam * (1 - lam) ** (50 - i) * f
    err = float(np.abs(state.center - closed).max())

    one = update_prototype(PrototypeState(center=np.zeros(6), blend=1.0, updates=0,
                                          granularity="online_global"), feeds[0], 4)
    zero = update_prototype(PrototypeState(center=p0.copy(), blend=0.0, updates=0,
                                           granularity="online_global"), feeds[0], 4)
    skipped = update_prototype(state, np.ones(6) * 9.0, count=0)
    ok = (err < 1e-10 and np.array_equal(one.center, feeds[0])
          and np.array_equal(zero.center, p0)
          and np.array_equal(skipped.center, state.center))
    _verdict(5, ok, f"50-update closed form err {err:.2e}; blend 1 tracks the batch, "
                    f"blend 0 and empty batches leave the center fixed")


# ------------------------------------------- 6: loss gating and algebra --

def test_6_loss_recomposition_and_warmup():
    rng = np.random.default_rng(6)
    ok = True
    for _ in range(200):
        cls, adv = float(rng.uniform(0, 2)), float(rng.uniform(0, 2))
        alpha = float(rng.uniform(0, 3))
        at = total_loss(cls, adv, alpha, step=200, warmup_iters=200)
        ok &= at.total == cls + alpha * adv and at.applied
        before = total_loss(cls, adv, alpha, step=199, warmup_iters=200)
        ok &= before.total == cls and not before.applied
    empty = AdversarialFeatures(features=T.Tensor(np.zeros((0, 3))),
                                sample_idx=np.zeros(0, dtype=np.int64),
                                y_idx=np.zeros(0, dtype=np.int64),
                                x_idx=np.zeros(0, dtype=np.int64), count=0)
    ok &= float(advcp_loss(empty, np.zeros(3)).values) == 0.0
    filled = AdversarialFeatures(features=T.Tensor(np.ones((2, 3))),
                                 sample_idx=np.zeros(2, dtype=np.int64),
                                 y_idx=np.zeros(2, dtype=np.int64),
                                 x_idx=np.zeros(2, dtype=np.int64), count=2)
    ok &= float(advcp_loss(filled, np.zeros(3)).values) > 0.0
    _verdict(6, ok, "total equals cls + alpha*adv bit-exactly from the warmup step, "
                    "cls alone before it; rectification loss is zero iff mask empty")


# --------------------------------------------- 7: benchmark effect size --

def test_7_rectification_beats_baseline(baseline_runs, advcp_runs):
    base_iou = _mean(baseline_runs, "iou") * 100.0
    adv_iou = _mean(advcp_runs, "iou") * 100.0
    base_fp = _mean(baseline_runs, "noise_fp")
    adv_fp = _mean(advcp_runs, "noise_fp")
    drop = (base_fp - adv_fp) / base_fp if base_fp else 0.0
    walls = [r["wall_s"] for r in baseline_runs + advcp_runs]
    ok = (adv_iou - base_iou >= IOU_GAIN_POINTS and drop >= NOISE_FP_DROP
          and max(walls) <= RUN_BUDGET_S and sum(walls) <= CORE_BUDGET_S)
    _verdict(7, ok,
             f"mean test IoU {base_iou:.2f} -> {adv_iou:.2f} ({adv_iou - base_iou:+.2f}, "
             f"need +{IOU_GAIN_POINTS:.1f}); noise-region FP {base_fp:.0f} -> {adv_fp:.0f} "
             f"({drop * 100.0:.1f}% drop, need {NOISE_FP_DROP * 100.0:.0f}%); "
             f"max run {max(walls) / 60.0:.1f} min, sum {sum(walls) / 60.0:.1f} core-min")


# ------------------------------------------------ 8: granularity ladder --

def test_8_granularity_ordering(baseline_runs, advcp_runs):
    ladder = {"online_global": _mean(advcp_runs, "f1")}
    for gran in ("batch", "image", "frozen_global"):
        ladder[gran] = _mean(_arm(f"gran_{gran}", alpha=1.0, granularity=gran), "f1")
    base = _mean(baseline_runs, "f1")
    detail = ", ".join(f"{g}={ladder[g] * 100.0:.2f}%" for g in
                       ("online_global", "frozen_global", "batch", "image"))
    ok = (ladder["online_global"] >= ladder["batch"] >= ladder["image"]
          and ladder["online_global"] > base)
    _verdict(8, ok, f"mean test F1 {detail}; baseline={base * 100.0:.2f}%")


# ------------------------------------------------- 9: blend sweep shape --

def test_9_blend_interior_optimum(advcp_runs):
    mid = _mean(advcp_runs, "f1")
    lo = _mean(_arm("blend0", alpha=1.0, prototype_blend=0.0), "f1")
    hi = _mean(_arm("blend1", alpha=1.0, prototype_blend=1.0), "f1")
    ok = mid >= lo and mid >= hi
    _verdict(9, ok, f"mean test F1 over blend: 0.0={lo * 100.0:.2f}%  "
                    f"0.5={mid * 100.0:.2f}%  1.0={hi * 100.0:.2f}% (interior optimum)")


# --------------------------------------------- 10: inference invariance --

def test_10_inference_cost_and_isolation(baseline_runs, advcp_runs, monkeypatch):
    data = _bench_data()

    def timed_eval(run_dir):
        best = float("inf")
        for _ in range(3):
            started = time.monotonic()
            evaluate(run_dir, "val", data)
            best = min(best, time.monotonic() - started)
        return best

    t_base = timed_eval(baseline_runs[0]["run_dir"])
    t_adv = timed_eval(advcp_runs[0]["run_dir"])
    ratio = t_adv / t_base

    def forbidden(*_a, **_k):
        raise AssertionError("prototype machinery touched during inference")

    import advcp.trainer as trainer_mod
    monkeypatch.setattr(trainer_mod, "update_prototype", forbidden)
    monkeypatch.setattr(trainer_mod, "batch_unchanged_prototype", forbidden)
    monkeypatch.setattr(trainer_mod, "mine_mask", forbidden)
    monkeypatch.setattr(trainer_mod, "extract_features", forbidden)
    monkeypatch.setattr(trainer_mod.PrototypeState, "validate", forbidden)
    evaluate(advcp_runs[0]["run_dir"], "val", data)

    ok = abs(ratio - 1.0) <= EVAL_TOLERANCE
    _verdict(10, ok, f"eval wall ratio rectified/baseline = {ratio:.3f} "
                     f"(band +-{EVAL_TOLERANCE:.2f}); inference path never touches "
                     f"prototype or mining machinery")


# ------------------------------------------------ 11: multi-class masks --

def test_11_multilabel_hand_case():
    # three classes on a 1x2 grid: class 0 fires on the left pixel, class 2
    # on the right; only class 0 is annotated present
    maps = np.zeros((1, 3, 1, 2))
    maps[0, :, 0, 0] = (0.9, 0.2, 0.1)
    maps[0, :, 0, 1] = (0.1, 0.3, 0.8)
    labels = np.array([[1, 0, 0]])
    feats = np.arange(8, dtype=np.float64).reshape(1, 4, 1, 2)
    state = MultiClassPrototypes(class_count=3, class_centers=np.zeros((3, 4)),
                                 background_center=np.zeros(4))
    mask, loss = multilabel_mine(maps, labels, state, tau=0.5, features=feats)
    expect = np.zeros((1, 3, 1, 2), dtype=np.uint8)
    expect[0, 2, 0, 1] = 1  # class 2 activates only under the all-class prompt
    vec = feats[0, :, 0, 1]
    hand = float(vec @ vec)  # nearest center is the zero background vector
    _, empty_loss = multilabel_mine(maps, np.array([[1, 1, 1]]), state, 0.5, feats)
    ok = (np.array_equal(mask, expect) and abs(loss - hand) < 1e-12
          and empty_loss == 0.0)
    _verdict(11, ok, f"3-class toy: mined mask and loss {loss:.1f} match hand "
                     f"computation; all-present labels mine nothing")


# ------------------------------------------------ 12: feature geometry --

def test_12_noise_features_move_toward_unchanged(baseline_runs, advcp_runs):
    pairs = list(zip(baseline_runs, advcp_runs))
    dists = [(b["noise_mean_sq_distance"], a["noise_mean_sq_distance"]) for b, a in pairs]
    ok = all(a < b for b, a in dists)
    detail = "; ".join(f"seed{s} {b:.3g} -> {a:.3g}" for s, (b, a) in zip(SEEDS, dists))
    _verdict(12, ok, f"noise-pixel mean squared distance to unchanged center: {detail}")


# ------------------------------------------------- 13: reproducibility --

def test_13_bitwise_reproducibility(tiny_data, tmp_path):
    cfg = dict(total_iters=10, batch_size=4, widths=(4, 8), eval_every=5,
               warmup_iters=2, lr=0.05, seed=2)
    a = train(TrainConfig(**cfg), tiny_data, tmp_path / "a")
    b = train(TrainConfig(**cfg), tiny_data, tmp_path / "b")
    same = all((a.run_dir / n).read_bytes() == (b.run_dir / n).read_bytes()
               for n in ("train_log.csv", "model.ckpt", "best.ckpt", "prototype.json"))
    names = sorted(p.name for p in (a.run_dir / "metrics").iterdir())
    same &= all((a.run_dir / "metrics" / n).read_bytes()
                == (b.run_dir / "metrics" / n).read_bytes() for n in names)
    _verdict(13, same, "identical configs reproduce checkpoints, logs, and metrics "
                       "byte for byte")
