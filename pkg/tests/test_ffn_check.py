import itertools

import numpy as np
import pytest

from tpmorph.errors import ShapeMismatch
from tpmorph.ffn_check import ACTIVATIONS, ffn, ffn_padded, pad_weights, shard_ffn

TOL = 1e-12


def triple_loop_ffn(inp, up, down, act):
    """Independent oracle: naive loops, fixed summation order."""
    n, k = inp.shape
    k2, m = up.shape
    assert k == k2
    mid = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += inp[i][t] * up[t][j]
            mid[i][j] = act(np.float64(s))
    m2, out_cols = down.shape
    assert m == m2
    out = np.zeros((n, out_cols))
    for i in range(n):
        for j in range(out_cols):
            s = 0.0
            for t in range(m):
                s += mid[i][t] * down[t][j]
            out[i][j] = s
    return out


def test_identity_weights_pass_through():
    inp = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(ffn(inp, np.eye(3), np.eye(3), "identity"), inp)


def test_ffn_matches_triple_loop_oracle():
    rng = np.random.default_rng(3)
    inp = rng.uniform(-1, 1, (2, 3))
    up = rng.uniform(-1, 1, (3, 4))
    down = rng.uniform(-1, 1, (4, 2))
    got = ffn(inp, up, down, "relu")
    want = triple_loop_ffn(inp, up, down, ACTIVATIONS["relu"])
    assert np.max(np.abs(got - want)) <= TOL


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ffn(np.ones((2, 3)), np.ones((4, 4)), np.ones((4, 2)))


def test_pad_zero_is_identity():
    up = np.ones((3, 8))
    down = np.ones((8, 2))
    u2, d2 = pad_weights(up, down, 4, 0)
    assert u2 is up and d2 is down


def test_pad_block_pattern():
    rng = np.random.default_rng(5)
    up = rng.uniform(-1, 1, (3, 8))
    down = rng.uniform(-1, 1, (8, 2))
    u2, d2 = pad_weights(up, down, 4, 1)
    assert u2.shape == (3, 12) and d2.shape == (12, 2)
    zero_idx = [2, 5, 8, 11]
    for j in zero_idx:
        assert np.all(u2[:, j] == 0)
        assert np.all(d2[j, :] == 0)
    keep = [c for c in range(12) if c not in zero_idx]
    assert np.array_equal(u2[:, keep], up)
    assert np.array_equal(d2[keep, :], down)


def test_padded_equals_raw_fixed_case():
    rng = np.random.default_rng(11)
    inp = rng.uniform(-1, 1, (4, 8))
    up = rng.uniform(-1, 1, (8, 16))
    down = rng.uniform(-1, 1, (16, 4))
    base = ffn(inp, up, down, "silu")
    u2, d2 = pad_weights(up, down, 4, 2)
    assert np.max(np.abs(ffn_padded(inp, u2, d2, "silu") - base)) <= TOL


def test_padded_equals_raw_even_when_f0_nonzero():
    # f(0) != 0 fills padded intermediate columns, but the zero rows of
    # the padded down projection cancel them in the product.
    shifted = lambda x: x + 1.0
    rng = np.random.default_rng(17)
    inp = rng.uniform(-1, 1, (3, 6))
    up = rng.uniform(-1, 1, (6, 8))
    down = rng.uniform(-1, 1, (8, 3))
    base = ffn(inp, up, down, shifted)
    u2, d2 = pad_weights(up, down, 2, 3)
    assert np.max(np.abs(ffn_padded(inp, u2, d2, shifted) - base)) <= TOL


def test_intermediate_width_and_output_shape():
    up = np.ones((3, 8))
    down = np.ones((8, 2))
    u2, d2 = pad_weights(up, down, 4, 3)
    assert u2.shape[1] == 8 + 4 * 3
    assert ffn_padded(np.ones((2, 3)), u2, d2).shape == (2, 2)


def test_randomized_equivalence_sweep():
    rng = np.random.default_rng(23)
    cases = list(itertools.product(
        [1, 2, 4], [0, 1, 2], sorted(ACTIVATIONS)))
    for tp, pad, act in cases:
        for _ in range(4):
            n = int(rng.integers(1, 5))
            k = int(rng.integers(1, 5))
            mid = tp * int(rng.integers(1, 4))
            out = int(rng.integers(1, 4))
            inp = rng.uniform(-1, 1, (n, k))
            up = rng.uniform(-1, 1, (k, mid))
            down = rng.uniform(-1, 1, (mid, out))
            base = ffn(inp, up, down, act)
            u2, d2 = pad_weights(up, down, tp, pad)
            assert np.max(np.abs(ffn_padded(inp, u2, d2, act) - base)) <= TOL
            partials, total = shard_ffn(inp, u2, d2, act, tp)
            assert len(partials) == tp
            assert np.max(np.abs(total - base)) <= TOL


def test_shard_sum_order_invariant():
    rng = np.random.default_rng(29)
    inp = rng.uniform(-1, 1, (4, 8))
    up = rng.uniform(-1, 1, (8, 16))
    down = rng.uniform(-1, 1, (16, 4))
    u2, d2 = pad_weights(up, down, 4, 2)
    partials, total = shard_ffn(inp, u2, d2, "silu", 4)
    reordered = sum(reversed(partials))
    assert np.max(np.abs(reordered - total)) <= TOL


def test_shard_tp1_equals_full():
    rng = np.random.default_rng(31)
    inp = rng.uniform(-1, 1, (2, 4))
    up = rng.uniform(-1, 1, (4, 6))
    down = rng.uniform(-1, 1, (6, 2))
    partials, total = shard_ffn(inp, up, down, "relu", 1)
    assert len(partials) == 1
    assert np.array_equal(total, ffn(inp, up, down, "relu"))
