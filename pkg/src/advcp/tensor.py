"""Dense float64 tensors with a define-by-run reverse-mode tape.

A Tape records one operation per op call while it is the innermost active
tape; nothing is recorded outside a ``with Tape():`` block, so inference
carries zero bookkeeping.  ``backward`` walks the records once in reverse
creation order and accumulates additively into ``grad``, which means
calling it twice doubles every gradient.

The heavy ops (conv2d and the masked bilinear gather) run compiled kernels
from ``_kernels`` with a pinned accumulation order; conv2d, linear and
global_avg_pool reproduce a straight nested-loop reference bit for bit.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as _k
from . import interpolate
from .errors import ConfigError, NumericError

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: "Tape" | None = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def assert_finite(self, what: str = "tensor"):
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"non-finite values in {what}")
        return self

    def zero_grad(self):
        self.grad = None

    def backward(self, seed: float = 1.0):
        if self.tape is None:
            raise ConfigError("backward requires a tensor recorded on a tape")
        self.tape.backward(self, seed)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs, output, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable ops for one backward sweep."""

    def __init__(self):
        self._records: list[_Record] = []
        self._produced: set[int] = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def release(self):
        """Drop every record, breaking the tensor/record reference cycles so
        the graph frees by refcount instead of waiting on the cycle
        collector.  Backward through already-released outputs is a no-op."""
        self._records.clear()
        self._produced.clear()

    def backward(self, root: Tensor, seed: float = 1.0):
        """Accumulate d(seed * root)/dt into ``t.grad`` for every tensor
        reachable from ``root`` that has ``requires_grad``."""
        if root.tape is not self:
            raise ConfigError("backward root was not recorded on this tape")
        if root.values.shape != ():
            raise ConfigError("backward root must be a scalar tensor")
        seed_arr = np.asarray(float(seed), dtype=np.float64)
        self._walk(root, seed_arr, write_grads=True, capture_ids=None)

    def gradient(self, output: Tensor, seed: np.ndarray, sources: list[Tensor]):
        """Functional vector-Jacobian product: returns d(seed . output)/ds
        for each source without touching any ``grad`` buffer.  Propagation
        stops at the sources, which are treated as graph inputs."""
        if output.tape is not self:
            raise ConfigError("gradient output was not recorded on this tape")
        seed_arr = np.asarray(seed, dtype=np.float64)
        if seed_arr.shape != output.values.shape:
            raise ConfigError("gradient seed shape must match the output shape")
        capture_ids = {id(s) for s in sources}
        captured = self._walk(output, seed_arr, write_grads=False, capture_ids=capture_ids)
        return [captured.get(id(s), np.zeros_like(s.values)) for s in sources]

    def _walk(self, start, seed, write_grads, capture_ids):
        flows: dict[int, np.ndarray] = {id(start): seed}
        captured: dict[int, np.ndarray] = {}
        if capture_ids and id(start) in capture_ids:
            return {id(start): seed}
        if write_grads and start.requires_grad:
            _acc_grad(start, seed)
        for rec in reversed(self._records):
            g = flows.pop(id(rec.output), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None:
                    continue
                if capture_ids is not None and id(t) in capture_ids:
                    prev = captured.get(id(t))
                    captured[id(t)] = gi if prev is None else prev + gi
                    continue
                if t.requires_grad or id(t) in self._produced:
                    prev = flows.get(id(t))
                    flows[id(t)] = gi if prev is None else prev + gi
                if write_grads and t.requires_grad:
                    _acc_grad(t, gi)
        return captured


def _acc_grad(t: Tensor, g: np.ndarray):
    t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _emit(inputs: tuple[Tensor, ...], out_values: np.ndarray, vjp) -> Tensor:
    out = Tensor(out_values)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape._records.append(_Record(inputs, out, vjp))
        tape._produced.add(id(out))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2d cross-correlation with zero padding, shared across a batch."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    _require(x.ndim == 4, "conv2d input must be (n, c, h, w)")
    _require(kernel.ndim == 4, "conv2d kernel must be (c_out, c_in, kh, kw)")
    _require(bias.ndim == 1, "conv2d bias must be a vector")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    _require(kcin == cin, f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    _require(bias.shape[0] == cout, "conv2d bias length must equal the output channel count")
    _require(isinstance(stride, int) and stride >= 1, "conv2d stride must be a positive int")
    _require(isinstance(padding, int) and padding >= 0, "conv2d padding must be a non-negative int")
    _require(kh <= h + 2 * padding and kw <= w + 2 * padding,
             "conv2d kernel larger than the padded input")
    if padding:
        xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
        xp[:, :, padding:padding + h, padding:padding + w] = x.values
    else:
        xp = np.ascontiguousarray(x.values)
    kv = np.ascontiguousarray(kernel.values)
    out = _k.conv2d_forward(xp, kv, np.ascontiguousarray(bias.values), stride)

    def vjp(g):
        gxp, gk = _k.conv2d_backward(xp, np.ascontiguousarray(g), kv, stride)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _emit((x, kernel, bias), out, vjp)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.values > 0.0

    def vjp(g):
        return (g * pos,)

    return _emit((x,), np.maximum(x.values, 0.0), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes, accumulated row-major."""
    x = as_tensor(x)
    _require(x.ndim == 4, "global_avg_pool input must be (n, d, h, w)")
    n, d, h, w = x.shape
    acc = np.zeros((n, d))
    for yy in range(h):
        for xx in range(w):
            acc += x.values[:, :, yy, xx]
    inv = 1.0 / (h * w)

    def vjp(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (n, d, h, w)),)

    return _emit((x,), acc * inv, vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias with the contraction accumulated in input order."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    _require(x.ndim == 2 and weight.ndim == 2 and bias.ndim == 1, "linear expects (n,d) x (d,k) + (k,)")
    _require(x.shape[1] == weight.shape[0], "linear dimension mismatch")
    _require(bias.shape[0] == weight.shape[1], "linear bias length mismatch")
    n, d = x.shape
    acc = np.zeros((n, weight.shape[1]))
    for di in range(d):
        acc += x.values[:, di:di + 1] * weight.values[di][None, :]
    out = acc + bias.values[None, :]

    def vjp(g):
        return g @ weight.values.T, x.values.T @ g, g.sum(axis=0)

    return _emit((x, weight, bias), out, vjp)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean NLL of integer labels under a softmax over exactly two logits."""
    logits = as_tensor(logits)
    _require(logits.ndim == 2 and logits.shape[1] == 2,
             "softmax_cross_entropy expects (n, 2) logits")
    lab = np.asarray(labels)
    _require(lab.shape == (logits.shape[0],), "label count must match the batch")
    _require(np.issubdtype(lab.dtype, np.integer) or np.all(lab == lab.astype(np.int64)),
             "labels must be integers")
    lab = lab.astype(np.int64)
    _require(bool(np.all((lab == 0) | (lab == 1))), "labels must lie in {0, 1}")
    lv = logits.values
    n = lv.shape[0]
    z = lv - lv.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(se)
    prob = ez / se
    val = np.asarray(np.add.reduce(-logp[np.arange(n), lab]) / n)

    def vjp(g):
        onehot = np.zeros_like(lv)
        onehot[np.arange(n), lab] = 1.0
        return ((prob - onehot) * (float(g) / n),)

    return _emit((logits,), val, vjp)


def abs_diff(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require(a.shape == b.shape, "abs_diff operands must share a shape")
    d = a.values - b.values
    s = np.sign(d)

    def vjp(g):
        gs = g * s
        return gs, -gs

    return _emit((a, b), np.abs(d), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require(a.shape == b.shape, "add operands must share a shape")

    def vjp(g):
        return g, g

    return _emit((a, b), a.values + b.values, vjp)


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    _require(np.isfinite(c), "scale factor must be finite")

    def vjp(g):
        return (g * c,)

    return _emit((x,), x.values * c, vjp)


def bilinear_gather(f: Tensor, sample_idx, y_idx, x_idx, out_h: int, out_w: int) -> Tensor:
    """Bilinearly sample one feature vector per (sample, y, x) pixel of an
    (out_h, out_w) grid laid over the feature map.  Equivalent to upsampling
    the whole map and indexing it, without materialising the upsample."""
    f = as_tensor(f)
    _require(f.ndim == 4, "bilinear_gather features must be (n, d, h, w)")
    n, d, h, w = f.shape
    ns = np.ascontiguousarray(np.asarray(sample_idx, dtype=np.int64))
    ys = np.ascontiguousarray(np.asarray(y_idx, dtype=np.int64))
    xs = np.ascontiguousarray(np.asarray(x_idx, dtype=np.int64))
    _require(ns.ndim == 1 and ns.shape == ys.shape == xs.shape,
             "bilinear_gather index arrays must be equal-length vectors")
    _require(out_h >= 1 and out_w >= 1, "bilinear_gather target grid must be non-empty")
    if ns.size:
        _require(bool((ns >= 0).all() and (ns < n).all()), "bilinear_gather sample index out of range")
        _require(bool((ys >= 0).all() and (ys < out_h).all()), "bilinear_gather row index out of range")
        _require(bool((xs >= 0).all() and (xs < out_w).all()), "bilinear_gather column index out of range")
    y0, y1, wy = interpolate.axis_tables(h, out_h)
    x0, x1, wx = interpolate.axis_tables(w, out_w)
    fv = np.ascontiguousarray(f.values)
    out = _k.gather_bilinear(fv, ns, ys, xs, y0, y1, wy, x0, x1, wx)

    def vjp(g):
        gf = _k.scatter_bilinear(np.ascontiguousarray(g), ns, ys, xs,
                                 y0, y1, wy, x0, x1, wx, n, d, h, w)
        return (gf,)

    return _emit((f,), out, vjp)


def pull_to_centers(feats: Tensor, centers: np.ndarray) -> Tensor:
    """Mean squared L2 distance from each row of ``feats`` to its center.

    ``centers`` is a plain array, either one shared (d,) vector or one row
    per feature; it is a constant, so gradient flows only into ``feats``.
    An empty feature set yields the constant 0.0 with no gradient path.
    """
    feats = as_tensor(feats)
    _require(feats.ndim == 2, "pull_to_centers features must be (m, d)")
    m, d = feats.shape
    if m == 0:
        return Tensor(np.asarray(0.0))
    centers = np.asarray(centers, dtype=np.float64)
    _require(centers.shape in ((d,), (m, d)),
             "centers must be one (d,) vector or one row per feature")
    diff = feats.values - centers
    val = np.asarray(np.add.reduce((diff * diff).ravel()) / m)

    def vjp(g):
        return (diff * (2.0 * float(g) / m),)

    return _emit((feats,), val, vjp)


def pairwise_spread(feats: Tensor) -> Tensor:
    """Mean squared distance over unordered row pairs, 0.0 below two rows."""
    feats = as_tensor(feats)
    _require(feats.ndim == 2, "pairwise_spread features must be (m, d)")
    m = feats.shape[0]
    if m < 2:
        return Tensor(np.asarray(0.0))
    mu = feats.values.mean(axis=0)
    cen = feats.values - mu
    val = np.asarray(2.0 * np.add.reduce((cen * cen).ravel()) / (m - 1))

    def vjp(g):
        return (cen * (4.0 * float(g) / (m - 1)),)

    return _emit((feats,), val, vjp)


def hinge_to_center(feats: Tensor, center: np.ndarray, margin: float) -> Tensor:
    """Mean squared hinge pushing each row at least ``margin`` from center."""
    feats = as_tensor(feats)
    _require(feats.ndim == 2, "hinge_to_center features must be (m, d)")
    m, d = feats.shape
    margin = float(margin)
    _require(margin > 0.0, "hinge margin must be positive")
    if m == 0:
        return Tensor(np.asarray(0.0))
    center = np.asarray(center, dtype=np.float64)
    _require(center.shape == (d,), "hinge center must be a (d,) vector")
    diff = feats.values - center
    dist = np.sqrt((diff * diff).sum(axis=1))
    gap = np.maximum(0.0, margin - dist)
    val = np.asarray(np.add.reduce(gap * gap) / m)

    def vjp(g):
        coef = np.zeros(m)
        active = (gap > 0.0) & (dist > 0.0)
        coef[active] = -2.0 * gap[active] / (dist[active] * m)
        return (diff * (coef * float(g))[:, None],)

    return _emit((feats,), val, vjp)
