"""Adversarial prompt mining and prototype-based rectification.

The mining step prompts the localizer with an all-change hypothesis,
binarizes that response, and XORs it against the current pixel decisions:
surviving bits are regions the model localizes only under the adversarial
prompt, i.e. likely false evidence.  Features at those positions are
pulled toward a running prototype of unchanged content, which costs
nothing at inference because the prototype machinery simply is not run.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .cam import LocalizationMaps, binarize_changed, compute_localization
from .errors import ConfigError
from .model import ChangeClassifier, ForwardRecord

MASK_MODES = ("xor", "diff")
MASK_SOURCES = ("all", "unchanged_only")
GRANULARITIES = ("image", "batch", "frozen_global", "online_global")
LOSS_VARIANTS = ("center_accumulated", "consistency", "contrastive")

FSCD_ALPHA = 0.1


@dataclass
class AdversarialMask:
    mask: np.ndarray          # (n, H, W) uint8
    mode: str
    source: str


@dataclass
class AdversarialFeatures:
    features: T.Tensor        # (count, d) interpolated feature vectors
    sample_idx: np.ndarray
    y_idx: np.ndarray
    x_idx: np.ndarray
    count: int


@dataclass
class PrototypeState:
    center: np.ndarray        # (d,) running unchanged-content prototype
    blend: float              # fraction of the newest batch mean blended in
    updates: int
    granularity: str
    changed_center: np.ndarray | None = None

    def validate(self):
        if not 0.0 <= self.blend <= 1.0:
            raise ConfigError("prototype blend must lie in [0, 1]")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        return self


@dataclass
class LossBreakdown:
    cls_loss: float
    adv_loss: float
    alpha: float
    applied: bool
    total: float


def all_change_localization(record: ForwardRecord, model: ChangeClassifier,
                            mode: str = "weights", norm_scope: str = "joint") -> np.ndarray:
    """Changed-class localization under an all-change prompt: every sample
    is treated as changed regardless of its actual or predicted label."""
    prompts = np.ones(record.logits.shape[0], dtype=np.int64)
    maps = compute_localization(record, model, mode=mode,
                                target_labels=prompts, norm_scope=norm_scope)
    return maps.maps[:, 1]


def mine_mask(allchange_bin: np.ndarray, pred: np.ndarray, mode: str = "xor",
              source: str = "all", labels=None) -> AdversarialMask:
    """Disagreement between the all-change response and the pixel decisions.

    "xor" keeps every disagreeing pixel; "diff" keeps only pixels active
    under the adversarial prompt but not predicted changed.  With source
    "unchanged_only", samples whose image label is 1 contribute nothing.
    """
    if mode not in MASK_MODES:
        raise ConfigError(f"unknown mask mode {mode!r}")
    if source not in MASK_SOURCES:
        raise ConfigError(f"unknown mask source {source!r}")
    a = np.asarray(allchange_bin)
    p = np.asarray(pred)
    if a.shape != p.shape:
        raise ConfigError("mask operands must share a shape")
    if not (np.isin(a, (0, 1)).all() and np.isin(p, (0, 1)).all()):
        raise ConfigError("mask operands must be binary")
    a = a.astype(np.uint8)
    p = p.astype(np.uint8)
    out = (a ^ p) if mode == "xor" else (a & (1 - p))
    if source == "unchanged_only":
        if labels is None:
            raise ConfigError("unchanged_only mining requires image labels")
        lab = np.asarray(labels).astype(np.int64)
        if lab.shape != (a.shape[0],):
            raise ConfigError("label count must match the batch")
        out = out.copy()
        out[lab == 1] = 0
    return AdversarialMask(mask=out, mode=mode, source=source)


def extract_features(features: T.Tensor, mask, grid_hw=None) -> AdversarialFeatures:
    """Feature vectors at every set mask bit, sampled bilinearly from the
    feature map as if it had been upsampled to the mask's resolution."""
    m = mask.mask if isinstance(mask, AdversarialMask) else np.asarray(mask)
    if m.ndim != 3:
        raise ConfigError("mask must be (n, h, w)")
    if m.shape[0] != features.shape[0]:
        raise ConfigError("mask batch size must match the features")
    grid_hw = grid_hw or m.shape[1:]
    if tuple(m.shape[1:]) != tuple(grid_hw):
        raise ConfigError("mask resolution must match the target grid")
    ns, ys, xs = np.nonzero(m)
    vecs = T.bilinear_gather(features, ns, ys, xs, grid_hw[0], grid_hw[1])
    return AdversarialFeatures(features=vecs, sample_idx=ns, y_idx=ys,
                               x_idx=xs, count=int(ns.size))


def batch_unchanged_prototype(feature_values, pred: np.ndarray) -> tuple[np.ndarray, int]:
    """Mean feature vector over all pixels predicted unchanged in a batch,
    at the prediction resolution; the zero vector when there are none."""
    fv = feature_values.values if isinstance(feature_values, T.Tensor) else np.asarray(feature_values)
    if fv.ndim != 4:
        raise ConfigError("feature values must be (n, d, h, w)")
    p = np.asarray(pred)
    if p.ndim != 3 or p.shape[0] != fv.shape[0]:
        raise ConfigError("prediction map must be (n, h, w) over the same batch")
    ns, ys, xs = np.nonzero(p == 0)
    if ns.size == 0:
        return np.zeros(fv.shape[1]), 0
    vecs = T.bilinear_gather(T.Tensor(fv), ns, ys, xs, p.shape[1], p.shape[2])
    return vecs.values.mean(axis=0), int(ns.size)


def update_prototype(state: PrototypeState, batch_mean: np.ndarray, count: int) -> PrototypeState:
    """Advance the running prototype by one batch.

    Batches with no unchanged pixels are skipped outright so an empty
    observation never drags the prototype toward zero.  online_global
    blends, batch replaces, frozen_global never moves here (it is set once
    by a training-set scan).
    """
    state.validate()
    batch_mean = np.asarray(batch_mean, dtype=np.float64)
    if batch_mean.shape != state.center.shape:
        raise ConfigError("batch mean dimensionality must match the prototype")
    if state.granularity == "image":
        raise ConfigError("image granularity keeps no running prototype")
    if state.granularity == "frozen_global" or count == 0:
        return state
    if state.granularity == "batch":
        return replace(state, center=batch_mean.copy(), updates=state.updates + 1)
    new = (1.0 - state.blend) * state.center + state.blend * batch_mean
    return replace(state, center=new, updates=state.updates + 1)


def advcp_loss(adv: AdversarialFeatures, prototype) -> T.Tensor:
    """Mean squared distance from mined features to the prototype center;
    exactly 0.0 with no gradient path when the mask was empty."""
    centers = prototype.center if isinstance(prototype, PrototypeState) else np.asarray(prototype)
    return T.pull_to_centers(adv.features, centers)


def variant_loss(adv: AdversarialFeatures, state: PrototypeState, kind: str,
                 margin: float = 1.0) -> T.Tensor:
    if kind not in LOSS_VARIANTS:
        raise ConfigError(f"unknown loss variant {kind!r}")
    if kind == "center_accumulated":
        return advcp_loss(adv, state)
    if kind == "consistency":
        return T.pairwise_spread(adv.features)
    if state.changed_center is None:
        raise ConfigError("contrastive variant requires a changed-content center")
    pull = advcp_loss(adv, state)
    push = T.hinge_to_center(adv.features, state.changed_center, margin)
    if adv.count == 0:
        return pull
    return T.add(pull, push)


def total_loss(cls_loss: float, adv_loss: float, alpha: float, step: int,
               warmup_iters: int) -> LossBreakdown:
    """Compose the training objective for one step.  The adversarial term
    enters only once ``step`` reaches the warmup length."""
    alpha = float(alpha)
    if not (np.isfinite(alpha) and alpha >= 0.0):
        raise ConfigError("alpha must be finite and non-negative")
    if warmup_iters < 0 or step < 0:
        raise ConfigError("step and warmup must be non-negative")
    applied = step >= warmup_iters
    cls_loss = float(cls_loss)
    adv_loss = float(adv_loss)
    total = cls_loss + alpha * adv_loss if applied else cls_loss
    return LossBreakdown(cls_loss=cls_loss, adv_loss=adv_loss, alpha=alpha,
                         applied=applied, total=total)


@dataclass
class MultiClassPrototypes:
    class_count: int
    class_centers: np.ndarray       # (k, d)
    background_center: np.ndarray   # (d,)

    def validate(self):
        if self.class_count < 2:
            raise ConfigError("multi-label mining needs at least 2 classes")
        if self.class_centers.shape != (self.class_count, self.background_center.shape[0]):
            raise ConfigError("class center table must be (class_count, d)")
        return self


def multilabel_mine(maps: np.ndarray, image_labels: np.ndarray,
                    state: MultiClassPrototypes, tau: float,
                    features: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class adversarial masks and their rectification loss.

    The all-class prompt response is the raw maps; the original response
    zeroes channels whose image label is 0.  Each surviving pixel is
    pulled toward the nearest center among the background and the classes
    actually present in its image; a sample with no labels at all can only
    match the background center.  Returns the masks and the mean squared
    distance, 0.0 when nothing was mined.
    """
    state.validate()
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 4 or maps.shape[1] != state.class_count:
        raise ConfigError("maps must be (n, class_count, h, w)")
    lab = np.asarray(image_labels)
    if lab.shape != maps.shape[:2]:
        raise ConfigError("image labels must be (n, class_count)")
    if not np.isin(lab, (0, 1)).all():
        raise ConfigError("image labels must be binary")
    if not 0.0 < float(tau) < 1.0:
        raise ConfigError("binarize threshold must lie strictly inside (0, 1)")
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 4 or feats.shape[0] != maps.shape[0] or feats.shape[2:] != maps.shape[2:]:
        raise ConfigError("features must be (n, d, h, w) on the map grid")
    allclass = maps >= tau
    original = (maps * lab[:, :, None, None]) >= tau
    mask = (allclass ^ original).astype(np.uint8)
    total = 0.0
    count = 0
    for ni, ki, yi, xi in zip(*np.nonzero(mask)):
        vec = feats[ni, :, yi, xi]
        centers = [state.background_center]
        centers.extend(state.class_centers[j] for j in range(state.class_count)
                       if lab[ni, j] == 1)
        dists = [float(((vec - c) ** 2).sum()) for c in centers]
        total += min(dists)
        count += 1
    return mask, (total / count if count else 0.0)


def fscd_weights(features: T.Tensor, pixel_scores: T.Tensor) -> np.ndarray:
    """Per-channel, per-location localization weights for the fully
    supervised extension: the gradient of the summed pixel score map with
    respect to the features, averaged over the score grid.  Scores may be
    (n, h, w) or a single-channel (n, 1, h, w) map as produced by a scoring
    convolution."""
    if features.ndim != 4:
        raise ConfigError("features must be (n, d, h, w)")
    ok3 = pixel_scores.ndim == 3
    ok4 = pixel_scores.ndim == 4 and pixel_scores.shape[1] == 1
    if not (ok3 or ok4) or pixel_scores.shape[0] != features.shape[0]:
        raise ConfigError("pixel scores must be (n, h, w) or (n, 1, h, w) over the same batch")
    tape = pixel_scores.tape
    if tape is None:
        raise ConfigError("fscd weights require scores recorded on a live tape")
    seed = np.ones_like(pixel_scores.values)
    grad = tape.gradient(pixel_scores, seed, [features])[0]
    hw = pixel_scores.shape[-2] * pixel_scores.shape[-1]
    return grad / hw
