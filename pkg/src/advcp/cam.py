"""Class localization maps from the classifier's fused feature maps.

Two weighting modes: "weights" multiplies features by the classification
head's per-class weight columns; "gradients" uses spatially averaged
logit gradients per class and per sample instead.  Maps are rectified,
bilinearly upsampled to the input resolution, then max-normalized per
sample, either jointly over both class channels (default, ordering
preserving) or per channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import interpolate
from . import tensor as T
from .errors import ConfigError
from .model import ChangeClassifier, ForwardRecord

_NORM_EPS = 1e-12

CAM_MODES = ("weights", "gradients")
NORM_SCOPES = ("joint", "channel")


@dataclass
class LocalizationMaps:
    maps: np.ndarray          # (n, 2, H, W); channel 0 unchanged, 1 changed
    normalized: bool
    cam_mode: str
    norm_scope: str


def compute_localization(record: ForwardRecord, model: ChangeClassifier,
                         mode: str = "weights", target_labels=None,
                         norm_scope: str = "joint") -> LocalizationMaps:
    """Per-class activation maps for one forward record.

    ``target_labels`` is required in gradients mode, where per-sample
    weights come from backpropagated logit gradients; with two classes the
    maps cover both channels regardless of the particular labels given.
    """
    if mode not in CAM_MODES:
        raise ConfigError(f"unknown cam mode {mode!r}")
    if norm_scope not in NORM_SCOPES:
        raise ConfigError(f"unknown norm scope {norm_scope!r}")
    feats = record.features.values
    n, d, fh, fw = feats.shape
    if mode == "weights":
        raw = np.einsum("ndhw,dk->nkhw", feats, model.head_weight.values)
    else:
        if target_labels is None:
            raise ConfigError("gradients mode requires target labels")
        if len(np.asarray(target_labels)) != n:
            raise ConfigError("target label count must match the batch")
        tape = record.logits.tape
        if tape is None:
            raise ConfigError("gradients mode requires a record captured on a live tape")
        raw = np.empty((n, 2, fh, fw))
        for cls in range(2):
            seed = np.zeros_like(record.logits.values)
            seed[:, cls] = 1.0
            gf = tape.gradient(record.logits, seed, [record.features])[0]
            w = gf.mean(axis=(2, 3))
            raw[:, cls] = np.einsum("nd,ndhw->nhw", w, feats)
    raw = np.maximum(raw, 0.0)
    up = interpolate.upsample(raw, *record.input_hw)
    if norm_scope == "joint":
        peak = up.max(axis=(1, 2, 3), keepdims=True)
    else:
        peak = up.max(axis=(2, 3), keepdims=True)
    maps = up / np.maximum(peak, _NORM_EPS)
    return LocalizationMaps(maps=maps, normalized=True, cam_mode=mode, norm_scope=norm_scope)


def predict(maps: LocalizationMaps) -> np.ndarray:
    """Pixelwise class decision: changed wherever its activation is at
    least the unchanged activation, so exact ties resolve to changed."""
    return (maps.maps[:, 1] >= maps.maps[:, 0]).astype(np.uint8)


def binarize_changed(maps: LocalizationMaps, tau: float) -> np.ndarray:
    """Threshold the changed-class channel of normalized maps at tau."""
    if not maps.normalized:
        raise ConfigError("binarize_changed expects normalized maps")
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ConfigError("binarize threshold must lie strictly inside (0, 1)")
    return (maps.maps[:, 1] >= tau).astype(np.uint8)


def save_heatmaps(maps: LocalizationMaps, sample_ids, out_dir) -> list:
    """One grayscale PNG per sample and class channel; returns the paths."""
    if len(sample_ids) != maps.maps.shape[0]:
        raise ConfigError("sample id count must match the maps")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, sid in enumerate(sample_ids):
        for ch, name in ((0, "unchanged"), (1, "changed")):
            img = np.round(np.clip(maps.maps[i, ch], 0.0, 1.0) * 255.0).astype(np.uint8)
            path = out_dir / f"{sid}_{name}.png"
            Image.fromarray(img, mode="L").save(path)
            written.append(path)
    return written
