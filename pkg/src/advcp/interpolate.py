"""Bilinear resampling helpers shared by the tensor ops and map handling.

Coordinates follow the half-pixel convention: output pixel i samples input
position (i + 0.5) * (n_in / n_out) - 0.5, clamped to the valid range.  A
1x1 input therefore upsamples to a constant map, exactly.

Every consumer evaluates the same four-term expression

    (1-fy)(1-fx)*a + (1-fy)fx*b + fy(1-fx)*c + fy*fx*d

in that order, so gathering single pixels and resampling a whole grid
agree bit for bit.
"""

import numpy as np

_TABLES: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def axis_tables(n_in: int, n_out: int):
    """Per-output-index source indices (lo, hi) and fractional weights."""
    key = (n_in, n_out)
    hit = _TABLES.get(key)
    if hit is not None:
        return hit
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, float(n_in - 1))
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    _TABLES[key] = (lo, hi, frac)
    return _TABLES[key]


def upsample(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample the trailing two axes of ``values`` to (out_h, out_w)."""
    h, w = values.shape[-2:]
    if (h, w) == (out_h, out_w):
        return values.copy()
    y0, y1, fy = axis_tables(h, out_h)
    x0, x1, fx = axis_tables(w, out_w)
    w00 = (1.0 - fy)[:, None] * (1.0 - fx)[None, :]
    w01 = (1.0 - fy)[:, None] * fx[None, :]
    w10 = fy[:, None] * (1.0 - fx)[None, :]
    w11 = fy[:, None] * fx[None, :]
    a = values[..., y0[:, None], x0[None, :]]
    b = values[..., y0[:, None], x1[None, :]]
    c = values[..., y1[:, None], x0[None, :]]
    d = values[..., y1[:, None], x1[None, :]]
    return w00 * a + w01 * b + w10 * c + w11 * d
