"""Training-loop behavior: artifacts, log schema, determinism, the warmup
gate, numeric guards, evaluation, and ablation sweeps.

Runs here use a small architecture on the shared tiny dataset so each
training call stays around a second.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from advcp.errors import ConfigError, NumericError
from advcp.model import load_checkpoint
from advcp.trainer import (TrainConfig, _poly_lr, ablate, coerce_field, evaluate,
                           read_snapshot, train, write_snapshot)


def _cfg(**kw):
    base = dict(total_iters=6, batch_size=4, lr=0.05, seed=3, eval_every=3,
                widths=(4, 8), alpha=1.0, warmup_iters=2)
    base.update(kw)
    return TrainConfig(**base)


def _read_log(run_dir):
    lines = (Path(run_dir) / "train_log.csv").read_text().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append({"step": int(parts[0]), "loss_cls": float(parts[1]),
                     "loss_adv": float(parts[2]), "loss_total": float(parts[3]),
                     "n_adv": int(parts[4]), "n_unchanged": int(parts[5]),
                     "prototype_norm": float(parts[6])})
    return header, rows


@pytest.fixture(scope="module")
def base_run(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "base"
    record = train(_cfg(), tiny_data, out)
    return record


def test_run_dir_artifacts(base_run):
    d = base_run.run_dir
    for name in ("config.snapshot", "train_log.csv", "model.ckpt", "best.ckpt",
                 "prototype.json"):
        assert (d / name).exists(), name
    evals = sorted(p.name for p in (d / "metrics").iterdir())
    assert evals == ["val_step000003.json", "val_step000006.json"]


def test_best_checkpoint_tracks_validation(base_run):
    f1s = {}
    for p in (base_run.run_dir / "metrics").glob("val_step*.json"):
        f1s[int(p.stem.split("step")[1])] = json.loads(p.read_text())["f1"]
    assert base_run.best_val_f1 == max(f1s.values())
    assert f1s[base_run.best_step] == base_run.best_val_f1


def test_log_schema_and_loss_recomposition(base_run):
    header, rows = _read_log(base_run.run_dir)
    assert header == ["step", "loss_cls", "loss_adv", "loss_total",
                      "n_adv", "n_unchanged", "prototype_norm"]
    cfg = base_run.config
    assert [r["step"] for r in rows] == list(range(cfg.total_iters))
    for r in rows:
        assert r["loss_cls"] >= 0.0 and r["loss_adv"] >= 0.0
        assert r["n_adv"] >= 0 and r["n_unchanged"] >= 0
        if r["step"] < cfg.warmup_iters:
            assert r["loss_total"] == r["loss_cls"]
        else:
            assert r["loss_total"] == r["loss_cls"] + cfg.alpha * r["loss_adv"]


def test_rectification_value_logged_before_warmup(base_run):
    # the auxiliary objective is measured from step 1 on even though the
    # warmup gate keeps it out of the update
    _, rows = _read_log(base_run.run_dir)
    assert rows[0]["loss_adv"] == 0.0 and rows[0]["n_adv"] == 0
    assert any(r["n_adv"] > 0 for r in rows if r["step"] < base_run.config.warmup_iters)


def test_training_is_deterministic(tiny_data, tmp_path):
    a = train(_cfg(total_iters=4), tiny_data, tmp_path / "a")
    b = train(_cfg(total_iters=4), tiny_data, tmp_path / "b")
    for name in ("train_log.csv", "model.ckpt", "best.ckpt", "prototype.json"):
        assert (a.run_dir / name).read_bytes() == (b.run_dir / name).read_bytes(), name
    assert a.best_val_f1 == b.best_val_f1 and a.best_step == b.best_step


def test_disabled_weight_matches_gated_out_run(tiny_data, tmp_path):
    # weight 0 and an unreachable warmup must produce identical runs: the
    # auxiliary loss is still mined and logged but never reaches the update
    off = train(_cfg(total_iters=5, alpha=0.0), tiny_data, tmp_path / "off")
    gated = train(_cfg(total_iters=5, alpha=1.0, warmup_iters=99), tiny_data, tmp_path / "gated")
    assert ((off.run_dir / "model.ckpt").read_bytes()
            == (gated.run_dir / "model.ckpt").read_bytes())
    _, rows_off = _read_log(off.run_dir)
    _, rows_gated = _read_log(gated.run_dir)
    for r_off, r_gated in zip(rows_off, rows_gated):
        assert r_off["loss_cls"] == r_gated["loss_cls"]
        assert r_off["loss_adv"] == r_gated["loss_adv"]


def test_updates_diverge_only_after_warmup(tiny_data, tmp_path):
    plain = train(_cfg(alpha=0.0), tiny_data, tmp_path / "plain")
    mixed = train(_cfg(alpha=1.0), tiny_data, tmp_path / "mixed")
    _, rows_plain = _read_log(plain.run_dir)
    _, rows_mixed = _read_log(mixed.run_dir)
    warmup = mixed.config.warmup_iters
    # the first gated update happens at step == warmup, after that step's
    # forward pass, so classification losses can first differ at warmup + 1
    for r_p, r_m in zip(rows_plain[:warmup + 1], rows_mixed[:warmup + 1]):
        assert r_p["loss_cls"] == r_m["loss_cls"]
    assert any(r_p["loss_cls"] != r_m["loss_cls"]
               for r_p, r_m in zip(rows_plain[warmup + 1:], rows_mixed[warmup + 1:]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exploding_update_raises_and_dumps(tiny_data, tmp_path):
    # lr large enough to overflow float64 activations; merely huge rates
    # saturate the softmax and stall instead of producing non-finite values
    out = tmp_path / "boom"
    with pytest.raises(NumericError):
        train(_cfg(lr=1e150, total_iters=4), tiny_data, out)
    dump = (out / "nan_dump.txt").read_text()
    assert "step" in dump and "error" in dump


def test_evaluate_reproduces_best_validation(base_run, tiny_data):
    summary = evaluate(base_run.run_dir, "val", tiny_data)
    assert summary["f1"] == base_run.best_val_f1
    assert (base_run.run_dir / "metrics_val.json").exists()


def test_evaluate_other_split_and_missing_checkpoint(base_run, tiny_data, tmp_path):
    summary = evaluate(base_run.run_dir, "test", tiny_data)
    assert set(summary) == {"tp", "fp", "fn", "tn", "precision", "recall",
                            "f1", "iou", "oa"}
    write_snapshot(_cfg(), tiny_data, tmp_path / "config.snapshot")
    with pytest.raises(ConfigError):
        evaluate(tmp_path, "val", tiny_data)


def test_prototype_artifact_online(base_run):
    payload = json.loads((base_run.run_dir / "prototype.json").read_text())
    assert payload["granularity"] == "online_global"
    assert payload["blend"] == base_run.config.prototype_blend
    assert len(payload["center"]) == base_run.config.feature_dim
    assert payload["updates"] >= 0


def test_frozen_prototype_never_updates_online(tiny_data, tmp_path):
    record = train(_cfg(granularity="frozen_global", total_iters=4),
                   tiny_data, tmp_path / "frozen")
    payload = json.loads((record.run_dir / "prototype.json").read_text())
    assert payload["granularity"] == "frozen_global"
    assert payload["updates"] == 0


def test_image_granularity_keeps_no_state(tiny_data, tmp_path):
    record = train(_cfg(granularity="image", total_iters=4), tiny_data, tmp_path / "img")
    payload = json.loads((record.run_dir / "prototype.json").read_text())
    assert payload["updates"] == 0
    assert all(v == 0.0 for v in payload["center"])


def test_contrastive_variant_tracks_changed_center(tiny_data, tmp_path):
    record = train(_cfg(loss_variant="contrastive", total_iters=4),
                   tiny_data, tmp_path / "contrast")
    payload = json.loads((record.run_dir / "prototype.json").read_text())
    assert len(payload["changed_center"]) == record.config.feature_dim


def test_snapshot_roundtrip(tiny_data, tmp_path):
    cfg = _cfg(widths=(4, 8), lr=0.03, granularity="batch")
    path = tmp_path / "config.snapshot"
    write_snapshot(cfg, tiny_data, path)
    loaded, data_dir = read_snapshot(path)
    assert loaded == cfg
    assert data_dir == Path(tiny_data)


def test_snapshot_rejects_malformed_input(tmp_path):
    with pytest.raises(ConfigError):
        read_snapshot(tmp_path / "missing.snapshot")
    bad = tmp_path / "bad.snapshot"
    bad.write_text("data_dir = /x\nno separator here\n")
    with pytest.raises(ConfigError):
        read_snapshot(bad)
    nodata = tmp_path / "nodata.snapshot"
    nodata.write_text("lr = 0.05\n")
    with pytest.raises(ConfigError):
        read_snapshot(nodata)


def test_coerce_field():
    assert coerce_field("lr", "0.25") == 0.25
    assert coerce_field("total_iters", "12") == 12
    assert coerce_field("widths", "4,8,16") == (4, 8, 16)
    assert coerce_field("granularity", "batch") == "batch"
    with pytest.raises(ConfigError):
        coerce_field("nonsense", "1")
    with pytest.raises(ConfigError):
        coerce_field("total_iters", "soon")


@pytest.mark.parametrize("field,value", [
    ("total_iters", 0), ("batch_size", 0), ("lr", 0.0), ("lr", float("nan")),
    ("lr_power", 0.0), ("momentum", 1.0), ("eval_every", 0), ("widths", ()),
    ("alpha", -0.5), ("prototype_blend", 1.5), ("warmup_iters", -1),
    ("tau_adv", 1.0), ("cam_mode", "sobel"), ("norm_scope", "global"),
    ("mask_mode", "and"), ("adv_source", "noisy"), ("granularity", "pixel"),
    ("loss_variant", "triplet"), ("adv_apply", "later"), ("contrast_margin", 0.0),
])
def test_config_validation(field, value):
    with pytest.raises(ConfigError):
        _cfg(**{field: value}).validate()


def test_contrastive_requires_running_prototype():
    with pytest.raises(ConfigError):
        _cfg(loss_variant="contrastive", granularity="image").validate()


def test_poly_schedule():
    cfg = _cfg(lr=0.2, lr_power=1.0, total_iters=10)
    assert _poly_lr(cfg, 0) == 0.2
    assert _poly_lr(cfg, 5) == pytest.approx(0.1)
    rates = [_poly_lr(cfg, s) for s in range(10)]
    assert all(a > b for a, b in zip(rates, rates[1:]))


def test_ablation_table(tiny_data, tmp_path):
    cfg = _cfg(total_iters=4, eval_every=2)
    rows = ablate(cfg, tiny_data, tmp_path, "lambda", [0.0, 1.0], [3])
    assert len(rows) == 6  # one run row plus mean and std per value
    assert (tmp_path / "lambda_0.0_seed3" / "best.ckpt").exists()
    table = (tmp_path / "ablation.csv").read_text().splitlines()
    assert table[0] == "param,value,seed,precision,recall,f1,iou,oa"
    assert len(table) == 7
    by_kind = {(r["value"], r["seed"]): r for r in rows}
    for value in ("0.0", "1.0"):
        run, mean, std = by_kind[(value, "3")], by_kind[(value, "mean")], by_kind[(value, "std")]
        for k in ("precision", "recall", "f1", "iou", "oa"):
            assert mean[k] == run[k]
            assert std[k] == 0.0


def test_ablation_rejects_unknown_parameter(tiny_data, tmp_path):
    with pytest.raises(ConfigError):
        ablate(_cfg(), tiny_data, tmp_path, "optimizer", ["adam"], [1])


def test_split_report_matches_brute_force(base_run, tiny_data):
    from advcp import tensor as T
    from advcp.data import load_dataset
    from advcp.metrics import region_false_positives
    from advcp.trainer import _batched_predictions, split_report

    report = split_report(base_run.run_dir, "val", tiny_data)
    assert report["fp"] >= report["noise_fp"] >= 0
    assert set(report) >= {"precision", "recall", "f1", "iou", "oa",
                           "noise_fp", "noise_count", "noise_mean_sq_distance"}

    model = load_checkpoint(base_run.run_dir / "best.ckpt")
    samples = load_dataset(Path(tiny_data) / "val")
    cfg = base_run.config
    noise_vecs, unchanged_vecs, noise_fp = [], [], 0
    for idx, rec, pred in _batched_predictions(model, samples, cfg):
        h, w = pred.shape[1:]
        feats = T.Tensor(rec.features.values)
        for j, i in enumerate(idx):
            noise_fp += region_false_positives(pred[j], samples[i].gt_mask,
                                               samples[i].noise_mask)
            for vecs, mask in ((noise_vecs, samples[i].noise_mask), (unchanged_vecs, pred[j] == 0)):
                ys, xs = np.nonzero(mask)
                if ys.size:
                    rows = T.bilinear_gather(feats, np.full(ys.shape, j, dtype=np.int64),
                                             ys, xs, h, w).values
                    vecs.extend(rows)
    assert report["noise_fp"] == noise_fp
    assert report["noise_count"] == len(noise_vecs)
    center = np.mean(unchanged_vecs, axis=0) if unchanged_vecs else np.zeros(cfg.feature_dim)
    expect = float(np.mean([(v - center) @ (v - center) for v in noise_vecs])) if noise_vecs else 0.0
    assert report["noise_mean_sq_distance"] == pytest.approx(expect, rel=1e-9)


def test_final_checkpoint_loads_and_infers(base_run, tiny_data):
    model = load_checkpoint(base_run.run_dir / "model.ckpt")
    from advcp.data import load_dataset
    samples = load_dataset(Path(tiny_data) / "val")
    x1 = np.stack([samples[0].x_t1]).astype(np.float64) / 255.0
    x2 = np.stack([samples[0].x_t2]).astype(np.float64) / 255.0
    rec = model.forward(x1, x2)
    assert np.isfinite(np.asarray(rec.change_prob)).all()
