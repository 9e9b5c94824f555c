"""Adversarial class prompting for weakly-supervised change detection."""

from .adversarial import (AdversarialFeatures, AdversarialMask, LossBreakdown,
                          MultiClassPrototypes, PrototypeState, advcp_loss,
                          all_change_localization, batch_unchanged_prototype,
                          extract_features, fscd_weights, mine_mask,
                          multilabel_mine, total_loss, update_prototype,
                          variant_loss)
from .cam import LocalizationMaps, binarize_changed, compute_localization, predict
from .data import PairedSample, SceneConfig, generate, load_dataset, write_dataset
from .errors import ConfigError, NumericError
from .metrics import ConfusionCounts, accumulate, summarize
from .model import (ArchConfig, ChangeClassifier, ForwardRecord, build_classifier,
                    load_checkpoint, save_checkpoint)
from .tensor import Tape, Tensor
from .trainer import RunRecord, TrainConfig, ablate, evaluate, train

__version__ = "0.1.0"
