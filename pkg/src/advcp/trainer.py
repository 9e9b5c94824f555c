"""Training loop, evaluation, and ablation sweeps.

One step: forward both temporal streams, classification loss, backward,
then add the adversarial rectification gradient once warmup has passed,
and finally an SGD-with-momentum update under polynomial LR decay.  By
default mining runs on a fresh forward after the update and its loss is
applied on the next step; "same_step" mines on the classification forward
pre-update instead.

Every artifact in a run directory is byte-deterministic for a given
config: logs carry full-precision floats and nothing records wall time.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .adversarial import (GRANULARITIES, LOSS_VARIANTS, MASK_MODES, MASK_SOURCES,
                          AdversarialFeatures, PrototypeState, batch_unchanged_prototype,
                          extract_features, mine_mask, total_loss, update_prototype,
                          variant_loss)
from .cam import CAM_MODES, NORM_SCOPES, binarize_changed, compute_localization, predict
from .data import PairedSample, load_dataset
from .errors import ConfigError, NumericError
from .metrics import (ConfusionCounts, accumulate, region_false_positives, summarize,
                      write_metrics_json)
from .model import ArchConfig, ChangeClassifier, build_classifier, load_checkpoint, save_checkpoint
from .tensor import Tensor

ADV_APPLY = ("next_step", "same_step")

_LOG_HEADER = "step,loss_cls,loss_adv,loss_total,n_adv,n_unchanged,prototype_norm"


@dataclass(frozen=True)
class TrainConfig:
    # optimisation
    total_iters: int = 3000
    batch_size: int = 16
    lr: float = 0.05
    lr_power: float = 0.9
    momentum: float = 0.9
    seed: int = 1
    eval_every: int = 200
    # architecture
    input_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64)
    # adversarial prompting
    alpha: float = 1.0
    prototype_blend: float = 0.5
    warmup_iters: int = 200
    tau_adv: float = 0.5
    cam_mode: str = "weights"
    norm_scope: str = "joint"
    mask_mode: str = "xor"
    adv_source: str = "all"
    granularity: str = "online_global"
    loss_variant: str = "center_accumulated"
    adv_apply: str = "next_step"
    contrast_margin: float = 1.0

    def validate(self):
        if self.total_iters < 1:
            raise ConfigError("total_iters must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not (np.isfinite(self.lr) and self.lr > 0.0):
            raise ConfigError("lr must be positive")
        if not 0.0 < self.lr_power <= 2.0:
            raise ConfigError("lr_power must lie in (0, 2]")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be at least 1")
        if self.input_channels < 1:
            raise ConfigError("input_channels must be at least 1")
        if not self.widths or any(int(w) < 1 for w in self.widths):
            raise ConfigError("widths must be a non-empty tuple of positive ints")
        if not (np.isfinite(self.alpha) and self.alpha >= 0.0):
            raise ConfigError("alpha must be finite and non-negative")
        if not 0.0 <= self.prototype_blend <= 1.0:
            raise ConfigError("prototype_blend must lie in [0, 1]")
        if self.warmup_iters < 0:
            raise ConfigError("warmup_iters must be non-negative")
        if not 0.0 < self.tau_adv < 1.0:
            raise ConfigError("tau_adv must lie strictly inside (0, 1)")
        if self.cam_mode not in CAM_MODES:
            raise ConfigError(f"unknown cam_mode {self.cam_mode!r}")
        if self.norm_scope not in NORM_SCOPES:
            raise ConfigError(f"unknown norm_scope {self.norm_scope!r}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"unknown mask_mode {self.mask_mode!r}")
        if self.adv_source not in MASK_SOURCES:
            raise ConfigError(f"unknown adv_source {self.adv_source!r}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"unknown loss_variant {self.loss_variant!r}")
        if self.adv_apply not in ADV_APPLY:
            raise ConfigError(f"unknown adv_apply {self.adv_apply!r}")
        if self.loss_variant == "contrastive" and self.granularity == "image":
            raise ConfigError("the contrastive variant requires a running prototype granularity")
        if self.contrast_margin <= 0.0:
            raise ConfigError("contrast_margin must be positive")
        return self

    @property
    def feature_dim(self) -> int:
        return int(self.widths[-1])

    def arch(self) -> ArchConfig:
        return ArchConfig(input_channels=self.input_channels,
                          widths=tuple(int(w) for w in self.widths),
                          feature_dim=int(self.widths[-1]))


@dataclass
class RunRecord:
    run_dir: Path
    config: TrainConfig
    best_val_f1: float
    best_step: int


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_snapshot(config: TrainConfig, data_dir, path):
    lines = [f"data_dir = {data_dir}"]
    for field in dataclasses.fields(config):
        lines.append(f"{field.name} = {_format_value(getattr(config, field.name))}")
    Path(path).write_text("\n".join(lines) + "\n")


def coerce_field(name: str, text: str):
    """Parse one TrainConfig field from its textual form."""
    hints = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    if name not in hints:
        raise ConfigError(f"unknown config key {name!r}")
    hint = hints[name]
    try:
        if hint == "int":
            return int(text)
        if hint == "float":
            return float(text)
        if hint.startswith("tuple"):
            return tuple(int(part) for part in text.split(",") if part)
    except ValueError:
        raise ConfigError(f"could not parse {name!r} from {text!r}") from None
    return text


def read_snapshot(path) -> tuple[TrainConfig, Path]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config snapshot {path}")
    fields = {}
    data_dir = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"malformed snapshot line {path}:{lineno}")
        key, value = key.strip(), value.strip()
        if key == "data_dir":
            data_dir = Path(value)
        else:
            fields[key] = coerce_field(key, value)
    if data_dir is None:
        raise ConfigError(f"snapshot {path} lacks a data_dir entry")
    return TrainConfig(**fields).validate(), data_dir


def _batch_arrays(samples: list[PairedSample], idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x1 = np.stack([samples[i].x_t1 for i in idx]).astype(np.float64) / 255.0
    x2 = np.stack([samples[i].x_t2 for i in idx]).astype(np.float64) / 255.0
    labels = np.array([samples[i].label for i in idx], dtype=np.int64)
    return x1, x2, labels


def _poly_lr(config: TrainConfig, step: int) -> float:
    return config.lr * (1.0 - step / config.total_iters) ** config.lr_power


def _sgd_step(params: list[Tensor], velocity: list[np.ndarray], lr: float, momentum: float):
    for p, v in zip(params, velocity):
        if p.grad is None:
            continue
        v *= momentum
        v += p.grad
        p.values = p.values - lr * v


@dataclass
class _Mined:
    loss: Tensor | None
    value: float
    n_adv: int
    n_unchanged: int
    proto_norm: float


_EMPTY_MINED = _Mined(loss=None, value=0.0, n_adv=0, n_unchanged=0, proto_norm=0.0)


def _localize(model, rec, config: TrainConfig, labels):
    """Maps plus the binarized changed-channel response to the all-change
    prompt.  With two classes both channels are always materialized, so the
    all-change response coincides with the changed channel."""
    maps = compute_localization(rec, model, mode=config.cam_mode,
                                target_labels=labels, norm_scope=config.norm_scope)
    return maps, binarize_changed(maps, config.tau_adv)


def _changed_mean(feature_values, pred) -> tuple[np.ndarray, int]:
    ns, ys, xs = np.nonzero(np.asarray(pred) == 1)
    if ns.size == 0:
        return np.zeros(feature_values.shape[1]), 0
    vecs = T.bilinear_gather(Tensor(feature_values), ns, ys, xs, pred.shape[1], pred.shape[2])
    return vecs.values.mean(axis=0), int(ns.size)


def _image_centers(feature_values, pred, mask: np.ndarray):
    """Per-sample unchanged means; drops mask bits of samples without any
    unchanged pixel.  Returns the pruned mask and a center row per bit."""
    n = mask.shape[0]
    d = feature_values.shape[1]
    centers = np.zeros((n, d))
    has_center = np.zeros(n, dtype=bool)
    pruned = mask.copy()
    for i in range(n):
        ys, xs = np.nonzero(pred[i] == 0)
        if ys.size == 0:
            pruned[i] = 0
            continue
        vecs = T.bilinear_gather(Tensor(feature_values), np.full(ys.shape, i, dtype=np.int64),
                                 ys, xs, pred.shape[1], pred.shape[2])
        centers[i] = vecs.values.mean(axis=0)
        has_center[i] = True
    return pruned, centers, has_center


class _ProtoTracker:
    """Owns the prototype state (and the optional changed-content twin)."""

    def __init__(self, config: TrainConfig):
        d = config.feature_dim
        self.config = config
        changed = np.zeros(d) if config.loss_variant == "contrastive" else None
        self.state = PrototypeState(center=np.zeros(d), blend=config.prototype_blend,
                                    updates=0, granularity=config.granularity,
                                    changed_center=changed)
        self.frozen_done = False

    def observe(self, feature_values, pred):
        if self.config.granularity == "image":
            return
        mean, count = batch_unchanged_prototype(feature_values, pred)
        self.state = update_prototype(self.state, mean, count)
        if self.state.changed_center is not None and self.config.granularity != "frozen_global":
            cmean, ccount = _changed_mean(feature_values, pred)
            if ccount:
                if self.config.granularity == "batch":
                    new = cmean
                else:
                    new = (1.0 - self.state.blend) * self.state.changed_center + self.state.blend * cmean
                self.state = replace(self.state, changed_center=new)

    def freeze_from_scan(self, unchanged_center, changed_center):
        self.state = replace(self.state, center=unchanged_center,
                             changed_center=(changed_center if self.state.changed_center
                                             is not None else None))
        self.frozen_done = True


def _mine(model, rec, config: TrainConfig, labels, tracker: _ProtoTracker) -> _Mined:
    maps, allchange_bin = _localize(model, rec, config, labels)
    pred = predict(maps)
    mask = mine_mask(allchange_bin, pred, mode=config.mask_mode,
                     source=config.adv_source, labels=labels)
    feature_values = rec.features.values
    if config.granularity == "image":
        pruned, centers, _ = _image_centers(feature_values, pred, mask.mask)
        adv = extract_features(rec.features, pruned)
        loss = T.pull_to_centers(adv.features, centers[adv.sample_idx]
                                 if adv.count else np.zeros((0, feature_values.shape[1])))
        proto_norm = 0.0
        n_unchanged = int(np.count_nonzero(pred == 0))
    else:
        tracker.observe(feature_values, pred)
        n_unchanged = int(np.count_nonzero(pred == 0))
        adv = extract_features(rec.features, mask.mask)
        loss = variant_loss(adv, tracker.state, config.loss_variant, config.contrast_margin)
        proto_norm = float(np.linalg.norm(tracker.state.center))
    loss.assert_finite("adversarial loss")
    return _Mined(loss=loss, value=float(loss.values), n_adv=adv.count,
                  n_unchanged=n_unchanged, proto_norm=proto_norm)


def _scan_prototype(model, samples, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """One pass over the training set collecting global unchanged (and
    changed) feature means under the current model."""
    d = config.feature_dim
    sums = np.zeros(d)
    count = 0
    csums = np.zeros(d)
    ccount = 0
    for start in range(0, len(samples), config.batch_size):
        idx = range(start, min(start + config.batch_size, len(samples)))
        x1, x2, labels = _batch_arrays(samples, idx)
        if config.cam_mode == "gradients":
            with T.Tape() as tape:
                rec = model.forward(x1, x2)
                maps, _ = _localize(model, rec, config, labels)
            tape.release()
        else:
            rec = model.forward(x1, x2)
            maps, _ = _localize(model, rec, config, labels)
        pred = predict(maps)
        for want, total_vec in ((0, sums), (1, csums)):
            ns, ys, xs = np.nonzero(pred == want)
            if ns.size == 0:
                continue
            vecs = T.bilinear_gather(Tensor(rec.features.values), ns, ys, xs,
                                     pred.shape[1], pred.shape[2])
            total_vec += vecs.values.sum(axis=0)
            if want == 0:
                count += ns.size
            else:
                ccount += ns.size
    unchanged = sums / count if count else np.zeros(d)
    changed = csums / ccount if ccount else np.zeros(d)
    return unchanged, changed


def _batched_predictions(model, samples, config: TrainConfig, batch_size=None):
    """Yield (batch indices, forward record, pixel prediction) per batch."""
    bs = batch_size or config.batch_size
    for start in range(0, len(samples), bs):
        idx = range(start, min(start + bs, len(samples)))
        x1, x2, _ = _batch_arrays(samples, idx)
        if config.cam_mode == "gradients":
            # gradient weighting needs a tape even at inference
            with T.Tape() as tape:
                rec = model.forward(x1, x2)
                pred_labels = (rec.logits.values[:, 1] >= rec.logits.values[:, 0]).astype(np.int64)
                maps = compute_localization(rec, model, mode="gradients",
                                            target_labels=pred_labels,
                                            norm_scope=config.norm_scope)
            tape.release()
        else:
            rec = model.forward(x1, x2)
            maps = compute_localization(rec, model, mode="weights",
                                        norm_scope=config.norm_scope)
        yield idx, rec, predict(maps)


def _infer_counts(model, samples, config: TrainConfig, batch_size=None) -> ConfusionCounts:
    counts = ConfusionCounts()
    for idx, _, pred in _batched_predictions(model, samples, config, batch_size):
        for j, i in enumerate(idx):
            if samples[i].gt_mask is None:
                raise ConfigError(f"sample {samples[i].sample_id} lacks a ground-truth mask")
            counts = counts + accumulate(pred[j], samples[i].gt_mask)
    return counts


def train(config: TrainConfig, data_dir, out_dir) -> RunRecord:
    """Run the full loop and fill ``out_dir`` with deterministic artifacts:
    config.snapshot, train_log.csv, metrics/*.json, model.ckpt (final),
    best.ckpt (best validation F1), prototype.json."""
    config.validate()
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics").mkdir(exist_ok=True)
    write_snapshot(config, data_dir, out_dir / "config.snapshot")

    train_samples = load_dataset(data_dir / "train")
    val_samples = load_dataset(data_dir / "val")
    model = build_classifier(config.arch(), config.seed)
    params = model.parameters()
    velocity = [np.zeros_like(p.values) for p in params]
    batch_rng = np.random.default_rng([config.seed, 0xBA7C4])
    tracker = _ProtoTracker(config)
    lag = 1 if config.adv_apply == "next_step" else 0
    pending = _EMPTY_MINED
    pending_tape: T.Tape | None = None
    best_f1 = -1.0
    best_step = -1
    best_params: list[np.ndarray] | None = None

    with open(out_dir / "train_log.csv", "w") as log:
        log.write(_LOG_HEADER + "\n")
        for step in range(config.total_iters):
            idx = batch_rng.integers(0, len(train_samples), size=config.batch_size)
            x1, x2, labels = _batch_arrays(train_samples, idx)
            if (config.granularity == "frozen_global" and not tracker.frozen_done
                    and step + lag >= config.warmup_iters):
                tracker.freeze_from_scan(*_scan_prototype(model, train_samples, config))

            try:
                with T.Tape() as main_tape:
                    rec = model.forward(x1, x2)
                    cls = T.softmax_cross_entropy(rec.logits, labels)
                    if not np.isfinite(cls.values):
                        raise NumericError(f"non-finite classification loss at step {step}")
                    mined = _mine(model, rec, config, labels, tracker) if lag == 0 else None
            except NumericError as exc:
                (out_dir / "nan_dump.txt").write_text(
                    f"step {step}\nerror {exc}\n"
                    f"batch {[train_samples[i].sample_id for i in idx]}\n")
                raise

            current = mined if lag == 0 else pending
            breakdown = total_loss(float(cls.values), current.value, config.alpha,
                                   step, config.warmup_iters)
            for p in params:
                p.zero_grad()
            cls.backward()
            if (breakdown.applied and config.alpha > 0.0 and current.loss is not None
                    and current.loss.tape is not None):
                current.loss.backward(seed=config.alpha)
            _sgd_step(params, velocity, _poly_lr(config, step), config.momentum)
            # consumed graphs would otherwise linger as reference cycles
            main_tape.release()
            if pending_tape is not None:
                pending_tape.release()
                pending_tape = None

            if lag == 1:
                try:
                    with T.Tape() as post_tape:
                        post = model.forward(x1, x2)
                        pending = _mine(model, post, config, labels, tracker)
                    pending_tape = post_tape
                except NumericError as exc:
                    (out_dir / "nan_dump.txt").write_text(
                        f"step {step}\nerror {exc}\n"
                        f"batch {[train_samples[i].sample_id for i in idx]}\n")
                    raise

            log.write(f"{step},{breakdown.cls_loss:.17g},{breakdown.adv_loss:.17g},"
                      f"{breakdown.total:.17g},{current.n_adv},{current.n_unchanged},"
                      f"{current.proto_norm:.17g}\n")

            if (step + 1) % config.eval_every == 0 or step == config.total_iters - 1:
                counts = _infer_counts(model, val_samples, config)
                payload = write_metrics_json(counts, out_dir / "metrics" / f"val_step{step + 1:06d}.json")
                if payload["f1"] > best_f1:
                    best_f1 = payload["f1"]
                    best_step = step + 1
                    best_params = [p.values.copy() for p in params]

        if pending_tape is not None:
            pending_tape.release()

    save_checkpoint(model, out_dir / "model.ckpt")
    assert best_params is not None
    final_values = [p.values for p in params]
    for p, values in zip(params, best_params):
        p.values = values
    save_checkpoint(model, out_dir / "best.ckpt")
    for p, values in zip(params, final_values):
        p.values = values
    proto_payload = {
        "granularity": config.granularity,
        "blend": config.prototype_blend,
        "updates": tracker.state.updates,
        "center": [float(v) for v in tracker.state.center],
    }
    if tracker.state.changed_center is not None:
        proto_payload["changed_center"] = [float(v) for v in tracker.state.changed_center]
    (out_dir / "prototype.json").write_text(json.dumps(proto_payload, indent=2, sort_keys=True) + "\n")
    return RunRecord(run_dir=out_dir, config=config, best_val_f1=best_f1, best_step=best_step)


def evaluate(run_dir, split: str, data_dir=None) -> dict:
    """Metrics of a finished run's best checkpoint on one split.  Reads the
    run's config snapshot; the split must carry ground-truth masks."""
    run_dir = Path(run_dir)
    config, snap_data = read_snapshot(run_dir / "config.snapshot")
    data_dir = Path(data_dir) if data_dir is not None else snap_data
    ckpt = run_dir / "best.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"missing checkpoint {ckpt}")
    model = load_checkpoint(ckpt)
    samples = load_dataset(data_dir / split)
    counts = _infer_counts(model, samples, config)
    return write_metrics_json(counts, run_dir / f"metrics_{split}.json")


def split_report(run_dir, split: str, data_dir=None) -> dict:
    """One-pass analysis of a finished run's best checkpoint on a split.

    Beyond the confusion summary this reports false positives inside the
    noise annotation and the mean squared distance from noise-region
    features to the model's unchanged-feature center, where the center
    averages features over every pixel the model itself calls unchanged.
    Feature sampling matches mining: full-resolution positions read from
    the upsampled feature grid.
    """
    run_dir = Path(run_dir)
    config, snap_data = read_snapshot(run_dir / "config.snapshot")
    data_dir = Path(data_dir) if data_dir is not None else snap_data
    ckpt = run_dir / "best.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"missing checkpoint {ckpt}")
    model = load_checkpoint(ckpt)
    samples = load_dataset(Path(data_dir) / split)
    d = config.feature_dim
    counts = ConfusionCounts()
    noise_fp = 0
    noise_sum = np.zeros(d)
    noise_sq = 0.0
    noise_count = 0
    unchanged_sum = np.zeros(d)
    unchanged_count = 0
    for idx, rec, pred in _batched_predictions(model, samples, config):
        h, w = pred.shape[1], pred.shape[2]
        regions = []
        for j, i in enumerate(idx):
            s = samples[i]
            if s.gt_mask is None or s.noise_mask is None:
                raise ConfigError(f"sample {s.sample_id} lacks region annotations")
            counts = counts + accumulate(pred[j], s.gt_mask)
            noise_fp += region_false_positives(pred[j], s.gt_mask, s.noise_mask)
            regions.append(s.noise_mask)
        features = Tensor(rec.features.values)
        ns, ys, xs = np.nonzero(np.stack(regions))
        if ns.size:
            vecs = T.bilinear_gather(features, ns, ys, xs, h, w).values
            noise_sum += vecs.sum(axis=0)
            noise_sq += float(np.sum(vecs * vecs))
            noise_count += ns.size
        uns, uys, uxs = np.nonzero(pred == 0)
        if uns.size:
            uvecs = T.bilinear_gather(features, uns, uys, uxs, h, w).values
            unchanged_sum += uvecs.sum(axis=0)
            unchanged_count += uns.size
    center = unchanged_sum / unchanged_count if unchanged_count else np.zeros(d)
    if noise_count:
        mean_vec = noise_sum / noise_count
        noise_msd = noise_sq / noise_count - 2.0 * float(center @ mean_vec) + float(center @ center)
    else:
        noise_msd = 0.0
    report = dict(summarize(counts))
    report.update({"tp": counts.tp, "fp": counts.fp, "fn": counts.fn, "tn": counts.tn,
                   "noise_fp": noise_fp, "noise_count": noise_count,
                   "noise_mean_sq_distance": noise_msd,
                   "unchanged_count": unchanged_count})
    return report


_ABLATE_ALIASES = {"lambda": "prototype_blend"}


def ablate(config: TrainConfig, data_dir, out_dir, param: str, values, seeds) -> list[dict]:
    """Train and test one run per (value, seed); returns and writes a table
    with one row per run plus mean/std rows per value."""
    field = _ABLATE_ALIASES.get(param, param)
    if field not in {f.name for f in dataclasses.fields(TrainConfig)}:
        raise ConfigError(f"unknown ablation parameter {param!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        coerced = coerce_field(field, str(value))
        per_seed = []
        for seed in seeds:
            cfg = replace(config, **{field: coerced, "seed": int(seed)}).validate()
            run_dir = out_dir / f"{param}_{value}_seed{seed}"
            train(cfg, data_dir, run_dir)
            summary = evaluate(run_dir, "test", data_dir)
            row = {"param": param, "value": str(value), "seed": str(seed)}
            row.update({k: summary[k] for k in ("precision", "recall", "f1", "iou", "oa")})
            rows.append(row)
            per_seed.append(row)
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            agg = {"param": param, "value": str(value), "seed": stat}
            for k in ("precision", "recall", "f1", "iou", "oa"):
                agg[k] = float(fn([r[k] for r in per_seed]))
            rows.append(agg)
    header = ["param", "value", "seed", "precision", "recall", "f1", "iou", "oa"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(row[h] if isinstance(row[h], str) else f"{row[h]:.17g}"
                              for h in header))
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    return rows
