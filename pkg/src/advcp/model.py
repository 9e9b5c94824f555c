"""Siamese change classifier: shared conv encoder, |a-b| fusion, GAP head.

Both temporal streams run the same parameter tensors, so one backward pass
accumulates gradients from both.  The fused pre-pool feature map is kept on
the forward record because localization and mining both read it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError

_MAGIC = b"ADVCP1"
_KERNEL = 3
_STRIDE = 2
_PAD = 1


@dataclass(frozen=True)
class ArchConfig:
    input_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64)
    feature_dim: int = 64

    def validate(self):
        if self.input_channels < 1:
            raise ConfigError("input_channels must be at least 1")
        if not self.widths or any(int(w) < 1 for w in self.widths):
            raise ConfigError("widths must be a non-empty tuple of positive ints")
        if self.feature_dim != self.widths[-1]:
            raise ConfigError("feature_dim must equal the last encoder width")
        return self


@dataclass
class ForwardRecord:
    features: T.Tensor            # fused (n, d, h, w) maps, pre-pool
    logits: T.Tensor              # (n, 2)
    change_prob: np.ndarray       # (n,) softmax probability of "changed"
    input_hw: tuple[int, int]


class ChangeClassifier:
    def __init__(self, arch: ArchConfig, conv_kernels, conv_biases, head_weight, head_bias):
        self.arch = arch
        self.conv_kernels = conv_kernels
        self.conv_biases = conv_biases
        self.head_weight = head_weight
        self.head_bias = head_bias

    def parameters(self) -> list[T.Tensor]:
        params = []
        for k, b in zip(self.conv_kernels, self.conv_biases):
            params.extend((k, b))
        params.extend((self.head_weight, self.head_bias))
        return params

    def encode(self, x: T.Tensor) -> T.Tensor:
        h = x
        for k, b in zip(self.conv_kernels, self.conv_biases):
            h = T.relu(T.conv2d(h, k, b, stride=_STRIDE, padding=_PAD))
        return h

    def forward(self, x_t1, x_t2) -> ForwardRecord:
        x1 = T.as_tensor(x_t1)
        x2 = T.as_tensor(x_t2)
        if x1.shape != x2.shape:
            raise ConfigError("the two temporal inputs must share a shape")
        if x1.ndim != 4 or x1.shape[1] != self.arch.input_channels:
            raise ConfigError(
                f"inputs must be (n, {self.arch.input_channels}, h, w), got {x1.shape}")
        feats = T.abs_diff(self.encode(x1), self.encode(x2))
        pooled = T.global_avg_pool(feats)
        logits = T.linear(pooled, self.head_weight, self.head_bias)
        z = logits.values - logits.values.max(axis=1, keepdims=True)
        ez = np.exp(z)
        prob = ez[:, 1] / ez.sum(axis=1)
        return ForwardRecord(features=feats, logits=logits, change_prob=prob,
                             input_hw=(x1.shape[2], x1.shape[3]))


def build_classifier(arch: ArchConfig, seed: int) -> ChangeClassifier:
    """Fresh model with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and
    zero biases, drawn in parameter declaration order from one PCG64 stream."""
    arch.validate()
    rng = np.random.default_rng(seed)
    kernels, biases = [], []
    cin = arch.input_channels
    for width in arch.widths:
        fan_in = cin * _KERNEL * _KERNEL
        bound = 1.0 / np.sqrt(fan_in)
        kernels.append(T.Tensor(rng.uniform(-bound, bound, (width, cin, _KERNEL, _KERNEL)),
                                requires_grad=True))
        biases.append(T.Tensor(np.zeros(width), requires_grad=True))
        cin = width
    bound = 1.0 / np.sqrt(arch.feature_dim)
    head_w = T.Tensor(rng.uniform(-bound, bound, (arch.feature_dim, 2)), requires_grad=True)
    head_b = T.Tensor(np.zeros(2), requires_grad=True)
    return ChangeClassifier(arch, kernels, biases, head_w, head_b)


def _descriptor(arch: ArchConfig) -> str:
    widths = ",".join(str(w) for w in arch.widths)
    return f"input_channels={arch.input_channels};widths={widths};feature_dim={arch.feature_dim}"


def _parse_descriptor(text: str) -> ArchConfig:
    fields = {}
    for part in text.split(";"):
        key, _, value = part.partition("=")
        fields[key] = value
    try:
        return ArchConfig(
            input_channels=int(fields["input_channels"]),
            widths=tuple(int(w) for w in fields["widths"].split(",")),
            feature_dim=int(fields["feature_dim"]),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed checkpoint descriptor: {text!r}") from exc


def save_checkpoint(model: ChangeClassifier, path):
    """Magic, length-prefixed descriptor, then raw little-endian float64
    parameter payloads in declaration order."""
    desc = _descriptor(model.arch).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p.values).astype("<f8").tobytes())


def load_checkpoint(path) -> ChangeClassifier:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(_MAGIC)] != _MAGIC:
        raise ConfigError(f"{path}: magic mismatch, not a checkpoint")
    off = len(_MAGIC)
    if len(blob) < off + 4:
        raise ConfigError(f"{path}: truncated checkpoint header")
    (dlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + dlen:
        raise ConfigError(f"{path}: truncated checkpoint descriptor")
    arch = _parse_descriptor(blob[off:off + dlen].decode("utf-8")).validate()
    off += dlen
    model = build_classifier(arch, seed=0)
    for p in model.parameters():
        nbytes = p.values.size * 8
        if len(blob) < off + nbytes:
            raise ConfigError(f"{path}: truncated checkpoint payload")
        p.values = np.frombuffer(blob[off:off + nbytes], dtype="<f8").reshape(p.values.shape).astype(np.float64)
        off += nbytes
    if off != len(blob):
        raise ConfigError(f"{path}: checkpoint payload size mismatch")
    return model
