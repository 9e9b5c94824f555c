"""Command-line interface.

Subcommands: gen-data, train, eval, ablate, export-heatmaps,
export-features.  Config files use "key = value" lines with # comments;
explicit flags override file values.  Exit codes: 0 success, 2 bad
configuration or input, 3 runtime/numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .adversarial import mine_mask
from .cam import predict, save_heatmaps
from .data import SPLITS, SceneConfig, generate, load_dataset, write_dataset
from .errors import ConfigError, NumericError
from .metrics import format_summary
from .model import load_checkpoint
from .trainer import (TrainConfig, _batch_arrays, _localize, ablate, evaluate,
                      read_snapshot, train, write_snapshot)


def _coerce(cls, name: str, text: str):
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    if name not in hints:
        raise ConfigError(f"unknown config key {name!r}")
    hint = hints[name]
    try:
        if hint == "int":
            return int(text)
        if hint == "float":
            return float(text)
        if hint.startswith("tuple"):
            parts = text.strip("() ").split(",")
            return tuple(int(p) for p in parts if p.strip())
    except ValueError:
        raise ConfigError(f"could not parse {name!r} from {text!r}") from None
    return text


def _read_config_file(cls, path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file {path}")
    fields = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"malformed config line {path}:{lineno}")
        key = key.strip()
        if cls is TrainConfig and key == "data_dir":
            fields["data_dir"] = value.strip()
            continue
        fields[key] = _coerce(cls, key, value.strip())
    return fields


_TRAIN_FLAGS = [
    # (flag, dest/config field, type, help)
    ("--alpha", "alpha", float, "adversarial loss weight"),
    ("--lambda", "prototype_blend", float, "prototype blend toward each batch mean"),
    ("--warmup", "warmup_iters", int, "steps before the adversarial term applies"),
    ("--iters", "total_iters", int, "total training steps"),
    ("--batch-size", "batch_size", int, "samples per step"),
    ("--lr", "lr", float, "base learning rate"),
    ("--lr-power", "lr_power", float, "polynomial decay power"),
    ("--momentum", "momentum", float, "SGD momentum"),
    ("--seed", "seed", int, "run seed"),
    ("--eval-every", "eval_every", int, "validation cadence in steps"),
    ("--widths", "widths", str, "encoder widths, e.g. 16,32,64"),
    ("--tau-adv", "tau_adv", float, "binarization threshold for mining"),
    ("--cam-mode", "cam_mode", str, "weights | gradients"),
    ("--norm-scope", "norm_scope", str, "joint | channel"),
    ("--mask-mode", "mask_mode", str, "xor | diff"),
    ("--adv-source", "adv_source", str, "all | unchanged_only"),
    ("--granularity", "granularity", str,
     "image | batch | frozen_global | online_global"),
    ("--loss-variant", "loss_variant", str,
     "center_accumulated | consistency | contrastive"),
    ("--adv-apply", "adv_apply", str, "next_step | same_step"),
    ("--margin", "contrast_margin", float, "contrastive push margin"),
]


def _add_train_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="key = value config file")
    for flag, field, typ, help_text in _TRAIN_FLAGS:
        parser.add_argument(flag, dest=f"cfg_{field}", type=typ, default=None, help=help_text)
    parser.add_argument("--no-advcp", action="store_true",
                        help="disable adversarial prompting (shorthand for --alpha 0)")


def _train_config(args) -> TrainConfig:
    fields = {}
    if args.config:
        file_fields = _read_config_file(TrainConfig, args.config)
        file_fields.pop("data_dir", None)
        fields.update(file_fields)
    for _, field, _, _ in _TRAIN_FLAGS:
        value = getattr(args, f"cfg_{field}")
        if value is not None:
            fields[field] = _coerce(TrainConfig, field, str(value))
    if args.no_advcp:
        fields["alpha"] = 0.0
    return TrainConfig(**fields).validate()


def _cmd_gen_data(args):
    fields = {}
    if args.config:
        fields.update(_read_config_file(SceneConfig, args.config))
    for flag_field in ("seed", "image_size", "train_size", "val_size", "test_size"):
        value = getattr(args, flag_field)
        if value is not None:
            fields[flag_field] = value
    if args.object_change_rate is not None:
        fields["object_change_rate"] = args.object_change_rate
    if args.distractor_max is not None:
        fields["distractor_count"] = (0, args.distractor_max)
    cfg = SceneConfig(**fields).validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)]
    (out / "config.snapshot").write_text("\n".join(lines) + "\n")
    counts = {}
    for split in SPLITS:
        samples = generate(cfg, split)
        write_dataset(samples, out / split, with_masks=split != "train")
        counts[split] = len(samples)
    print(f"wrote {counts['train']} train / {counts['val']} val / "
          f"{counts['test']} test pairs to {out}")


def _cmd_train(args):
    config = _train_config(args)
    record = train(config, args.data, args.out)
    print(f"run written to {record.run_dir} "
          f"(best val F1 {record.best_val_f1 * 100.0:.2f}% at step {record.best_step})")


def _cmd_eval(args):
    payload = evaluate(args.run, args.split, args.data)
    print(format_summary(payload))


def _cmd_ablate(args):
    config = _train_config(args)
    values = [v for v in args.values.split(",") if v]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    if not values or not seeds:
        raise ConfigError("ablate needs non-empty --values and --seeds")
    rows = ablate(config, args.data, args.out, args.param, values, seeds)
    width = max(len(r["value"]) for r in rows)
    for row in rows:
        print(f"{row['param']} {row['value']:>{width}} seed={row['seed']:>4} "
              f"f1={row['f1'] * 100.0:.2f}% iou={row['iou'] * 100.0:.2f}%")


def _run_inference(run_dir, split, data_dir, limit):
    run_dir = Path(run_dir)
    config, snap_data = read_snapshot(run_dir / "config.snapshot")
    data_dir = Path(data_dir) if data_dir is not None else snap_data
    model = load_checkpoint(run_dir / "best.ckpt")
    samples = load_dataset(Path(data_dir) / split)
    if limit is not None:
        if limit < 1:
            raise ConfigError("--n must be at least 1")
        samples = samples[:limit]
    return run_dir, config, model, samples


def _forward_maps(model, config, samples, idx):
    x1, x2, _ = _batch_arrays(samples, idx)
    if config.cam_mode == "gradients":
        with T.Tape() as tape:
            rec = model.forward(x1, x2)
            pred_labels = (rec.logits.values[:, 1] >= rec.logits.values[:, 0]).astype(np.int64)
            maps, cbin = _localize(model, rec, config, pred_labels)
        tape.release()
    else:
        rec = model.forward(x1, x2)
        pred_labels = (rec.logits.values[:, 1] >= rec.logits.values[:, 0]).astype(np.int64)
        maps, cbin = _localize(model, rec, config, pred_labels)
    return rec, maps, cbin, pred_labels


def _error_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    # white TP, red FP, blue FN, black TN
    img = np.zeros((*pred.shape, 3), dtype=np.uint8)
    p = pred.astype(bool)
    g = gt.astype(bool)
    img[p & g] = (255, 255, 255)
    img[p & ~g] = (220, 40, 40)
    img[~p & g] = (60, 90, 230)
    return img


def _cmd_export_heatmaps(args):
    run_dir, config, model, samples = _run_inference(args.run, args.split, args.data, args.n)
    out = Path(args.out) if args.out else run_dir / "heatmaps" / args.split
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for start in range(0, len(samples), config.batch_size):
        idx = range(start, min(start + config.batch_size, len(samples)))
        rec, maps, cbin, pred_labels = _forward_maps(model, config, samples, idx)
        pred = predict(maps)
        mask = mine_mask(cbin, pred, mode=config.mask_mode,
                         source=config.adv_source, labels=pred_labels)
        ids = [samples[i].sample_id for i in idx]
        save_heatmaps(maps, ids, out)
        for j, i in enumerate(idx):
            Image.fromarray(pred[j] * 255, mode="L").save(out / f"{ids[j]}_pred.png")
            Image.fromarray(mask.mask[j] * 255, mode="L").save(out / f"{ids[j]}_mined.png")
            if samples[i].gt_mask is not None:
                Image.fromarray(_error_map(pred[j], samples[i].gt_mask)).save(
                    out / f"{ids[j]}_error.png")
            written += 1
    print(f"wrote heatmaps for {written} samples to {out}")


def _cmd_export_features(args):
    run_dir, config, model, samples = _run_inference(args.run, args.split, args.data, args.n)
    out = Path(args.out) if args.out else run_dir / f"features_{args.split}.csv"
    rng = np.random.default_rng([config.seed, 0xFEA7])
    d = config.feature_dim
    header = ["sample_id", "y", "x", "mask_bit", "label"] + [f"feat_{k}" for k in range(d)]
    lines = [",".join(header)]
    for start in range(0, len(samples), config.batch_size):
        idx = range(start, min(start + config.batch_size, len(samples)))
        rec, maps, cbin, pred_labels = _forward_maps(model, config, samples, idx)
        pred = predict(maps)
        mask = mine_mask(cbin, pred, mode=config.mask_mode,
                         source=config.adv_source, labels=pred_labels).mask
        h, w = pred.shape[1:]
        ns, ys, xs = np.nonzero(mask)
        uns, uys, uxs = np.nonzero((mask == 0) & (pred == 0))
        keep = min(uns.size, max(ns.size, 64))
        if uns.size > keep:
            pick = rng.choice(uns.size, size=keep, replace=False)
            pick.sort()
            uns, uys, uxs = uns[pick], uys[pick], uxs[pick]
        for bit, (bs, bys, bxs) in ((1, (ns, ys, xs)), (0, (uns, uys, uxs))):
            if bs.size == 0:
                continue
            vecs = T.bilinear_gather(T.Tensor(rec.features.values), bs, bys, bxs, h, w)
            for row in range(bs.size):
                i = list(idx)[bs[row]]
                feat_text = ",".join(f"{v:.10g}" for v in vecs.values[row])
                lines.append(f"{samples[i].sample_id},{bys[row]},{bxs[row]},{bit},"
                             f"{samples[i].label},{feat_text}")
    Path(out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 1} feature rows to {out}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advcp",
                                     description="adversarial class prompting lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--train-size", dest="train_size", type=int)
    p.add_argument("--val-size", dest="val_size", type=int)
    p.add_argument("--test-size", dest="test_size", type=int)
    p.add_argument("--object-change-rate", dest="object_change_rate", type=float)
    p.add_argument("--distractor-max", dest="distractor_max", type=int)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train one run")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run")
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--data", type=Path)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="sweep one config field over values and seeds")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--seeds", default="1,2,3")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("export-heatmaps", help="dump per-sample localization PNGs")
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--data", type=Path)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_export_heatmaps)

    p = sub.add_parser("export-features", help="dump mined and unchanged feature vectors")
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--data", type=Path)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_export_features)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        args.func(args)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
