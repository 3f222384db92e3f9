from fractions import Fraction

import pytest

from tpmorph.errors import MisalignedWithoutPadding
from tpmorph.models import BUILTIN_MODELS, get_model
from tpmorph.page_store import PAGE_SIZE_2MIB, PageSpace
from tpmorph.weight_plan import (
    TensorSpec,
    make_padding_plan,
    mlp_tensors,
    model_padding_overhead,
    naive_copy_extra_peak,
    padded_shard_pages,
    pages_per_tensor,
    plan_weight_scale_down,
    plan_weight_scale_up,
    shard_is_aligned,
)

GB = 10**9

QWEN = TensorSpec("qwen2.5-32b.up", 5120, 27648)
LLAMA70 = TensorSpec("llama-3.1-70b.up", 8192, 28672)
OSS120 = TensorSpec("gpt-oss-120b.up", 2880, 2880, num_experts=128)
OSS120_FUSED = TensorSpec("gpt-oss-120b.gate_up", 2880, 2880, num_experts=128,
                          role="gate_up_proj")
OSS20 = TensorSpec("gpt-oss-20b.up", 2880, 2880, num_experts=32)
OSS20_FUSED = TensorSpec("gpt-oss-20b.gate_up", 2880, 2880, num_experts=32,
                         role="gate_up_proj")


@pytest.mark.parametrize("spec,tp,expected", [
    (OSS120, 1, Fraction(2025, 2)),          # 1012.5
    (OSS120_FUSED, 1, Fraction(2025)),       # 2025
    (OSS120, 4, Fraction(2025, 8)),          # 253.125
    (OSS120_FUSED, 4, Fraction(2025, 4)),    # 506.25
    (OSS20, 1, Fraction(2025, 8)),           # 253.125
    (OSS20_FUSED, 1, Fraction(2025, 4)),     # 506.25
    (OSS20, 4, Fraction(4050, 64)),          # 63.28125
    (OSS20_FUSED, 4, Fraction(8100, 64)),    # 126.5625
    (LLAMA70, 1, Fraction(224)),
    (LLAMA70, 4, Fraction(56)),
    (QWEN, 1, Fraction(135)),
    (QWEN, 4, Fraction(135, 4)),             # 33.75
])
def test_pages_per_tensor_known_models(spec, tp, expected):
    assert pages_per_tensor(spec, tp) == expected


def test_pages_per_tensor_rational_identity():
    for spec in (QWEN, LLAMA70, OSS120, OSS20):
        for tp in (1, 2, 4):
            assert pages_per_tensor(spec, 1) == tp * pages_per_tensor(spec, tp)


def test_aligned_tensor_needs_no_padding():
    plan = make_padding_plan(LLAMA70, (1, 2, 4))
    assert plan.total_pad_bytes == 0
    assert plan.overhead_fraction == 0


def test_qwen_padding_quarter_page_per_boundary():
    plan = make_padding_plan(QWEN, (1, 2, 4))
    # each quarter shard of 33.75 pages pads up to 34 pages: 512 KiB each
    assert set(plan.pad_bytes_at.values()) == {PAGE_SIZE_2MIB // 4}
    assert len(plan.pad_bytes_at) == 4
    assert plan.overhead_fraction == Fraction(1, 135)
    assert padded_shard_pages(plan, 4) == 34
    assert padded_shard_pages(plan, 1) == 136


def test_padding_makes_every_tp_integral():
    for model in BUILTIN_MODELS.values():
        for spec in mlp_tensors(model):
            plan = make_padding_plan(spec, (1, 2, 4))
            for tp in (1, 2, 4):
                assert plan.padded_bytes % (tp * PAGE_SIZE_2MIB) == 0


def brute_force_min_pads(total_bytes, tp_set, page_size, element_bytes):
    """Scan pads upward per boundary (element granularity) until every
    boundary offset is page-aligned; independent of the greedy planner."""
    offs = sorted({total_bytes // tp * k for tp in tp_set
                   for k in range(1, tp + 1)})
    pads = []
    cum = 0
    for off in offs:
        pad = 0
        while (off + cum + pad) % page_size != 0:
            pad += element_bytes
            assert pad <= page_size
        pads.append(pad)
        cum += pad
    return pads


def test_padding_minimality_brute_force_small_pages():
    page = 4096
    for model in BUILTIN_MODELS.values():
        for spec in mlp_tensors(model):
            plan = make_padding_plan(spec, (1, 2, 4), page_size=page)
            oracle = brute_force_min_pads(spec.total_bytes, (1, 2, 4), page,
                                          spec.element_bytes)
            mine = [plan.pad_bytes_at.get(i, 0)
                    for i in range(1, len(oracle) + 1)]
            assert mine == oracle
            assert plan.total_pad_bytes == sum(oracle)


def test_model_level_overhead_bounds():
    for model in BUILTIN_MODELS.values():
        ov = float(model_padding_overhead(model, (1, 2, 4)))
        assert 0.0 <= ov <= 0.14


def test_naive_scale_up_peak_matches_qwen():
    model = get_model("qwen2.5-32b")
    extra = naive_copy_extra_peak(model, 1, 4)
    assert abs(extra - 15.58 * GB) < 0.1 * GB


def test_in_place_scale_up_zero_copy_and_frees():
    model = get_model("qwen2.5-32b")
    plans = plan_weight_scale_up(model, 1, 4, padded=True)
    assert len(plans) == model.num_layers
    for p in plans:
        assert p.kind == "in_place"
        assert p.copied_bytes == 0
        # three tensors per layer: each frees 136 - 34 = 102 pages
        assert p.freed_pages == 3 * (136 - 34)


def test_in_place_frees_match_pagespace_transitions():
    model = get_model("qwen2.5-32b")
    plan = plan_weight_scale_up(model, 1, 4, padded=True)[0]
    space = PageSpace(2 * GB + 400 * PAGE_SIZE_2MIB)
    total_pages = 3 * 136
    rng = space.alloc(total_pages * PAGE_SIZE_2MIB, "layer1")
    free_before = space.free_bytes
    from tpmorph.page_store import PageRange
    kept = total_pages - plan.freed_pages
    space.unmap(PageRange(rng.start_page + kept, plan.freed_pages, "layer1"))
    assert space.free_bytes - free_before == plan.freed_pages * PAGE_SIZE_2MIB


def test_aligned_model_in_place_without_padding():
    model = get_model("llama3-8b")
    plans = plan_weight_scale_up(model, 1, 4, padded=False)
    assert all(p.kind == "in_place" and p.copied_bytes == 0 for p in plans)


def test_misaligned_without_padding_raises():
    model = get_model("qwen2.5-32b")
    with pytest.raises(MisalignedWithoutPadding):
        plan_weight_scale_up(model, 1, 4, padded=False, kind="in_place")


def test_partial_swap_copies_positive():
    model = get_model("qwen2.5-32b")
    plans = plan_weight_scale_up(model, 1, 4, padded=False)
    for p in plans:
        assert p.kind == "partial_swap"
        assert p.copied_bytes > 0
        assert p.extra_peak_bytes > 0


def test_scale_down_identity_and_volume():
    model = get_model("qwen2.5-32b")
    assert plan_weight_scale_down(model, 4, 4) == []
    plans = plan_weight_scale_down(model, 4, 1)
    total_recv = sum(p.copied_bytes for p in plans)
    # each worker receives 3/4 of the MLP bytes (88% of weights)
    expect = 0.75 * 0.88 * 62.34 * GB
    assert abs(total_recv - expect) / expect < 0.001
    # staggered: per-step extra is one layer's shards, not all layers'
    assert plans[0].extra_peak_bytes < total_recv / (model.num_layers - 1)


def test_alignment_flags_match_table():
    assert not shard_is_aligned(QWEN, 4)
    assert shard_is_aligned(QWEN, 1)
    assert shard_is_aligned(LLAMA70, 4)
    assert not shard_is_aligned(OSS120, 1)
