"""Numerical warrant for weight padding: padded FFN equals the raw FFN.

The raw feed-forward is f(I x U) x D with up-projection U, down-projection
D and elementwise activation f. Inserting zero column blocks after each TP
shard of U and matching zero row blocks in D leaves the product unchanged,
because every extra intermediate column meets a zero row of D (this holds
even when f(0) != 0). All math is float64; comparisons use a 1e-12
max-abs tolerance that covers summation-order effects only.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ShapeMismatch

Array = np.ndarray


def _identity(x: Array) -> Array:
    return x


def _relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def _silu(x: Array) -> Array:
    return x / (1.0 + np.exp(-x))


def _gelu_tanh(x: Array) -> Array:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


ACTIVATIONS = {
    "identity": _identity,
    "relu": _relu,
    "silu": _silu,
    "gelu_tanh": _gelu_tanh,
}


def _resolve(f):
    if callable(f):
        return f
    try:
        return ACTIVATIONS[f]
    except KeyError:
        raise ValueError(f"unknown activation {f!r}; options: {sorted(ACTIVATIONS)}")


def ffn(inp: Array, up: Array, down: Array, f="identity") -> Array:
    """f(inp x up) x down, shape (inp.rows, down.cols)."""
    act = _resolve(f)
    inp = np.asarray(inp, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    down = np.asarray(down, dtype=np.float64)
    if inp.ndim != 2 or up.ndim != 2 or down.ndim != 2:
        raise ShapeMismatch("operands must be 2-D")
    if inp.shape[1] != up.shape[0] or up.shape[1] != down.shape[0]:
        raise ShapeMismatch(
            f"incompatible shapes {inp.shape} x {up.shape} x {down.shape}")
    return act(inp @ up) @ down


def pad_weights(up: Array, down: Array, tp: int,
                pad_cols_per_shard: int) -> tuple[Array, Array]:
    """Insert a zero column block of the given width after each of the tp
    shards of `up`, and the matching zero row blocks in `down`."""
    up = np.asarray(up, dtype=np.float64)
    down = np.asarray(down, dtype=np.float64)
    if up.shape[1] != down.shape[0]:
        raise ShapeMismatch("up.cols must equal down.rows")
    if tp < 1 or up.shape[1] % tp != 0:
        raise ShapeMismatch(f"tp={tp} does not divide up.cols={up.shape[1]}")
    if pad_cols_per_shard < 0:
        raise ValueError("pad width must be >= 0")
    if pad_cols_per_shard == 0:
        return up, down
    shard = up.shape[1] // tp
    u_parts, d_parts = [], []
    for i in range(tp):
        u_parts.append(up[:, i * shard:(i + 1) * shard])
        u_parts.append(np.zeros((up.shape[0], pad_cols_per_shard)))
        d_parts.append(down[i * shard:(i + 1) * shard, :])
        d_parts.append(np.zeros((pad_cols_per_shard, down.shape[1])))
    return np.hstack(u_parts), np.vstack(d_parts)


def ffn_padded(inp: Array, up_p: Array, down_p: Array, f="identity") -> Array:
    """FFN over padded weights; equals the unpadded FFN on the same data."""
    return ffn(inp, up_p, down_p, f)


def shard_ffn(inp: Array, up_p: Array, down_p: Array, f="identity",
              tp: int = 1) -> tuple[list[Array], Array]:
    """Column/row-parallel evaluation: each worker takes one contiguous
    column block of up and row block of down; the all-reduce sum of the
    partial products equals the monolithic result."""
    up_p = np.asarray(up_p, dtype=np.float64)
    down_p = np.asarray(down_p, dtype=np.float64)
    if up_p.shape[1] != down_p.shape[0]:
        raise ShapeMismatch("up.cols must equal down.rows")
    if tp < 1 or up_p.shape[1] % tp != 0:
        raise ShapeMismatch(f"tp={tp} does not divide padded width {up_p.shape[1]}")
    width = up_p.shape[1] // tp
    partials = []
    for i in range(tp):
        u_i = up_p[:, i * width:(i + 1) * width]
        d_i = down_p[i * width:(i + 1) * width, :]
        partials.append(ffn(inp, u_i, d_i, f))
    total = partials[0].copy()
    for p in partials[1:]:
        total += p
    return partials, total
