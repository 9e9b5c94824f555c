"""Procedural bi-temporal scene pairs with pixel ground truth.

Each sample is built from a per-sample PCG64 stream seeded by hashing
(master seed, split, index), so any sample can be regenerated alone and
split contents never depend on generation order.  Scenes share a textured
background; large dark building-like rectangles appear or vanish between
the two timestamps and define change.  Distractor patches where the
background texture is independently re-rolled in one timestamp hit both
classes at the same rate and are labeled noise: they are large, obvious
temporal differences of the same kind real benchmarks ignore (seasonal
vegetation turnover, harvested fields), and the image-level labels treat
them as background.  That forces a classifier to hold texture-change
evidence actively on the unchanged side of its decision, an anchor it
cannot drop even once the labels are easy, while its pixel maps still
leak onto the patches.  Distractors never touch real change: placement
keeps every box disjoint with a one-pixel margin.

Imaging drift (a patchy, strictly positive low-resolution brightness
field plus per-channel hue scaling) hits every pair with label-independent
strength.  Drift differences are texture-kind too, so the same learned
veto that absorbs the re-rolled patches shelters the background at large;
the patchiness spreads difference magnitudes over a continuum instead of
one global level per pair.

Images are quantized to uint8 RGB at generation time, so in-memory
samples equal their PNG round trip byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import interpolate
from .errors import ConfigError

SPLITS = ("train", "val", "test")

_PLACE_TRIES = 40
_MARGIN = 1


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    object_change_rate: float = 0.5
    max_changed_objects: int = 2
    object_size: tuple[int, int] = (10, 18)
    static_objects: tuple[int, int] = (0, 2)
    distractor_count: tuple[int, int] = (1, 3)
    distractor_size: tuple[int, int] = (6, 12)
    brightness_shift: float = 0.12
    hue_shift: float = 0.06
    drift_cells: int = 4
    texture_octaves: int = 3
    texture_cells: int = 4
    train_size: int = 2000
    val_size: int = 200
    test_size: int = 400
    seed: int = 42

    def validate(self):
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16")
        if not 0.0 <= self.object_change_rate <= 1.0:
            raise ConfigError("object_change_rate must lie in [0, 1]")
        if self.max_changed_objects < 1:
            raise ConfigError("max_changed_objects must be at least 1")
        for name in ("object_size", "static_objects", "distractor_count", "distractor_size"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} must be a (lo, hi) range with 0 <= lo <= hi")
        if self.object_size[1] >= self.image_size or self.distractor_size[1] >= self.image_size:
            raise ConfigError("object sizes must be smaller than image_size")
        if self.object_size[0] < 1 or self.distractor_size[0] < 1:
            raise ConfigError("object sizes must be at least 1 pixel")
        if not 0.0 <= self.brightness_shift <= 0.5:
            raise ConfigError("brightness_shift must lie in [0, 0.5]")
        if not 0.0 <= self.hue_shift <= 0.5:
            raise ConfigError("hue_shift must lie in [0, 0.5]")
        if self.texture_octaves < 1 or self.texture_cells < 1:
            raise ConfigError("texture_octaves and texture_cells must be at least 1")
        if self.drift_cells < 1:
            raise ConfigError("drift_cells must be at least 1")
        for name in ("train_size", "val_size", "test_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        return self


@dataclass
class PairedSample:
    sample_id: str
    x_t1: np.ndarray              # (3, s, s) uint8
    x_t2: np.ndarray              # (3, s, s) uint8
    label: int                    # 1 iff any real change pixel exists
    gt_mask: np.ndarray | None    # (s, s) bool, real change
    noise_mask: np.ndarray | None  # (s, s) bool, distractor change


def _sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}|{split}|{index}".encode()).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))


def _texture(rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    s = cfg.image_size
    acc = np.zeros((s, s))
    weight = 0.0
    for octave in range(cfg.texture_octaves):
        nodes = cfg.texture_cells * (2 ** octave) + 1
        lattice = rng.random((nodes, nodes))
        acc += interpolate.upsample(lattice, s, s) * (0.5 ** octave)
        weight += 0.5 ** octave
    acc /= weight
    tint = rng.uniform(0.9, 1.05, 3)
    return np.clip((0.25 + 0.5 * acc)[None, :, :] * tint[:, None, None], 0.0, 1.0)


def _place(rng: np.random.Generator, occupied: np.ndarray,
           size_range: tuple[int, int]) -> tuple[slice, slice] | None:
    s = occupied.shape[0]
    for _ in range(_PLACE_TRIES):
        bh = int(rng.integers(size_range[0], size_range[1] + 1))
        bw = int(rng.integers(size_range[0], size_range[1] + 1))
        y = int(rng.integers(0, s - bh + 1))
        x = int(rng.integers(0, s - bw + 1))
        y0, x0 = max(0, y - _MARGIN), max(0, x - _MARGIN)
        if occupied[y0:y + bh + _MARGIN, x0:x + bw + _MARGIN].any():
            continue
        occupied[y:y + bh, x:x + bw] = True
        return slice(y, y + bh), slice(x, x + bw)
    return None


def _first_fit(occupied: np.ndarray, size: int) -> tuple[slice, slice]:
    s = occupied.shape[0]
    for y in range(s - size + 1):
        for x in range(s - size + 1):
            y0, x0 = max(0, y - _MARGIN), max(0, x - _MARGIN)
            if not occupied[y0:y + size + _MARGIN, x0:x + size + _MARGIN].any():
                occupied[y:y + size, x:x + size] = True
                return slice(y, y + size), slice(x, x + size)
    raise ConfigError("scene too crowded to place a changed object")


def _building_color(rng: np.random.Generator) -> np.ndarray:
    gray = rng.uniform(0.03, 0.2)
    return np.clip(gray + rng.uniform(-0.03, 0.03, 3), 0.0, 1.0)


def _paint(img: np.ndarray, box: tuple[slice, slice], color: np.ndarray):
    img[:, box[0], box[1]] = color[:, None, None]


def generate_sample(cfg: SceneConfig, split: str, index: int) -> PairedSample:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    rng = _sample_rng(cfg.seed, split, index)
    s = cfg.image_size
    t1 = _texture(rng, cfg)
    t2 = t1.copy()
    occupied = np.zeros((s, s), dtype=bool)
    gt = np.zeros((s, s), dtype=bool)
    noise = np.zeros((s, s), dtype=bool)

    for _ in range(int(rng.integers(cfg.static_objects[0], cfg.static_objects[1] + 1))):
        box = _place(rng, occupied, cfg.object_size)
        if box is None:
            continue
        color = _building_color(rng)
        _paint(t1, box, color)
        _paint(t2, box, color)

    changed = rng.random() < cfg.object_change_rate
    if changed:
        placed = 0
        for _ in range(int(rng.integers(1, cfg.max_changed_objects + 1))):
            box = _place(rng, occupied, cfg.object_size)
            if box is None:
                continue
            _paint(t2 if rng.random() < 0.5 else t1, box, _building_color(rng))
            gt[box[0], box[1]] = True
            placed += 1
        if placed == 0:
            box = _first_fit(occupied, cfg.object_size[0])
            _paint(t2 if rng.random() < 0.5 else t1, box, _building_color(rng))
            gt[box[0], box[1]] = True

    alt = _texture(rng, cfg)
    for _ in range(int(rng.integers(cfg.distractor_count[0], cfg.distractor_count[1] + 1))):
        box = _place(rng, occupied, cfg.distractor_size)
        if box is None:
            continue
        target = t2 if rng.random() < 0.5 else t1
        target[:, box[0], box[1]] = alt[:, box[0], box[1]]
        noise[box[0], box[1]] = True

    # The brightness field is patchy so drift magnitude varies within a
    # scene, but strictly positive: a signed field would leave zero-crossing
    # seams where the pair is locally identical and carries no cue at all,
    # and the tie rule would flood those seams with change.  The floor keeps
    # the weakest patch legible to a small encoder.
    strength = rng.uniform(0.3, 1.0)
    field = rng.uniform(0.45, 1.0, (cfg.drift_cells + 1, cfg.drift_cells + 1))
    t2 = t2 + strength * cfg.brightness_shift * interpolate.upsample(field, s, s)
    t2 = t2 * (1.0 + strength * cfg.hue_shift * rng.uniform(-1.0, 1.0, 3))[:, None, None]
    q1 = np.round(np.clip(t1, 0.0, 1.0) * 255.0).astype(np.uint8)
    q2 = np.round(np.clip(t2, 0.0, 1.0) * 255.0).astype(np.uint8)
    return PairedSample(sample_id=f"{split}_{index:05d}", x_t1=q1, x_t2=q2,
                        label=int(gt.any()), gt_mask=gt, noise_mask=noise)


def generate(cfg: SceneConfig, split: str) -> list[PairedSample]:
    cfg.validate()
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    size = {"train": cfg.train_size, "val": cfg.val_size, "test": cfg.test_size}[split]
    return [generate_sample(cfg, split, i) for i in range(size)]


def write_dataset(samples: list[PairedSample], out_dir, with_masks: bool):
    """Dump samples as index.csv plus t1/, t2/ RGB PNGs and, when masks are
    kept, gt/ and noise/ binary PNGs."""
    out_dir = Path(out_dir)
    (out_dir / "t1").mkdir(parents=True, exist_ok=True)
    (out_dir / "t2").mkdir(parents=True, exist_ok=True)
    if with_masks:
        (out_dir / "gt").mkdir(exist_ok=True)
        (out_dir / "noise").mkdir(exist_ok=True)
    with open(out_dir / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"])
        for sample in samples:
            writer.writerow([sample.sample_id, sample.label])
    for sample in samples:
        Image.fromarray(sample.x_t1.transpose(1, 2, 0)).save(out_dir / "t1" / f"{sample.sample_id}.png")
        Image.fromarray(sample.x_t2.transpose(1, 2, 0)).save(out_dir / "t2" / f"{sample.sample_id}.png")
        if with_masks:
            for name, mask in (("gt", sample.gt_mask), ("noise", sample.noise_mask)):
                img = (mask.astype(np.uint8) * 255)
                Image.fromarray(img, mode="L").save(out_dir / name / f"{sample.sample_id}.png")


def _read_rgb(path: Path) -> np.ndarray:
    if not path.exists():
        raise ConfigError(f"missing image file {path}")
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return arr.transpose(2, 0, 1)


def _read_mask(path: Path) -> np.ndarray | None:
    if not path.exists():
        return None
    return np.asarray(Image.open(path).convert("L"), dtype=np.uint8) > 127


def load_dataset(data_dir) -> list[PairedSample]:
    """Read a split directory back into memory; images stay uint8."""
    data_dir = Path(data_dir)
    index = data_dir / "index.csv"
    if not index.exists():
        raise ConfigError(f"missing index file {index}")
    samples = []
    with open(index, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["id", "label"]:
        raise ConfigError(f"malformed index header in {index}")
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise ConfigError(f"malformed index row at {index}:{lineno}")
        sid, label_text = row
        try:
            label = int(label_text)
        except ValueError:
            raise ConfigError(f"non-integer label at {index}:{lineno}") from None
        if label not in (0, 1):
            raise ConfigError(f"label outside {{0, 1}} at {index}:{lineno}")
        samples.append(PairedSample(
            sample_id=sid,
            x_t1=_read_rgb(data_dir / "t1" / f"{sid}.png"),
            x_t2=_read_rgb(data_dir / "t2" / f"{sid}.png"),
            label=label,
            gt_mask=_read_mask(data_dir / "gt" / f"{sid}.png"),
            noise_mask=_read_mask(data_dir / "noise" / f"{sid}.png"),
        ))
    return samples


def to_float_pair(sample: PairedSample) -> tuple[np.ndarray, np.ndarray]:
    """Model-ready float64 images in [0, 1]."""
    return sample.x_t1.astype(np.float64) / 255.0, sample.x_t2.astype(np.float64) / 255.0
