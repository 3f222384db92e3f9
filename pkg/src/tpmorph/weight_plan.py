"""Per-tensor page footprints, alignment padding and weight repartition plans.

MLP tensors shard along the intermediate dimension when TP changes. A shard
whose byte size is not a page multiple strands fragments of pages on every
worker; padding inserted at the predetermined shard boundaries makes every
supported TP split page-aligned, so a scale-up can release pages in place
with zero copies. The unpadded baseline must instead partial-swap the
misaligned remainders.

Page counts are exact rationals (integer-pair arithmetic), never floats.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import MisalignedWithoutPadding
from .models import ModelConfig
from .page_store import PAGE_SIZE_2MIB, pages_needed


@dataclass(frozen=True)
class TensorSpec:
    name: str
    hidden_size: int
    inter_size: int
    num_experts: int = 1
    element_bytes: int = 2
    role: str = "up_proj"  # up_proj | gate_up_proj | down_proj

    def __post_init__(self):
        if min(self.hidden_size, self.inter_size, self.num_experts,
               self.element_bytes) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.role not in ("up_proj", "gate_up_proj", "down_proj"):
            raise ValueError(f"unknown role {self.role!r}")

    @property
    def total_bytes(self) -> int:
        base = (self.hidden_size * self.inter_size * self.num_experts
                * self.element_bytes)
        return base * 2 if self.role == "gate_up_proj" else base


def mlp_tensors(model: ModelConfig) -> list[TensorSpec]:
    """One transformer layer's shardable MLP tensor set."""
    common = dict(hidden_size=model.hidden_size, inter_size=model.inter_size,
                  num_experts=model.num_experts,
                  element_bytes=model.element_bytes)
    if model.fused_gate_up:
        return [TensorSpec(f"{model.name}.gate_up", role="gate_up_proj", **common),
                TensorSpec(f"{model.name}.down", role="down_proj", **common)]
    return [TensorSpec(f"{model.name}.gate", role="up_proj", **common),
            TensorSpec(f"{model.name}.up", role="up_proj", **common),
            TensorSpec(f"{model.name}.down", role="down_proj", **common)]


def pages_per_tensor(spec: TensorSpec, tp: int,
                     page_size: int = PAGE_SIZE_2MIB) -> Fraction:
    """Exact page count of one TP shard; integral iff the shard is aligned."""
    if tp < 1 or spec.inter_size % tp != 0:
        raise ValueError(f"tp={tp} does not divide inter_size={spec.inter_size}")
    return Fraction(spec.total_bytes, tp * page_size)


def shard_is_aligned(spec: TensorSpec, tp: int,
                     page_size: int = PAGE_SIZE_2MIB) -> bool:
    return pages_per_tensor(spec, tp, page_size).denominator == 1


@dataclass(frozen=True)
class PaddingPlan:
    tensor: TensorSpec
    tp_set: tuple[int, ...]
    page_size: int
    pad_bytes_at: dict[int, int]  # boundary index (1-based) -> inserted bytes
    total_pad_bytes: int

    @property
    def overhead_fraction(self) -> Fraction:
        return Fraction(self.total_pad_bytes, self.tensor.total_bytes)

    @property
    def padded_bytes(self) -> int:
        return self.tensor.total_bytes + self.total_pad_bytes

    def serialize(self) -> str:
        pads = " ".join(f"b{i}:{b}" for i, b in sorted(self.pad_bytes_at.items()))
        return (f"padding tensor={self.tensor.name} tp_set={list(self.tp_set)} "
                f"page={self.page_size} pads=[{pads}] "
                f"total={self.total_pad_bytes} "
                f"overhead={float(self.overhead_fraction):.6f}")


def _boundary_offsets(total_bytes: int, tp_set: tuple[int, ...]) -> list[int]:
    """Distinct unpadded byte offsets of every future shard end, sorted."""
    offs = set()
    for tp in tp_set:
        step = total_bytes // tp
        for k in range(1, tp + 1):
            offs.add(step * k)
    return sorted(offs)


def make_padding_plan(spec: TensorSpec, tp_set: tuple[int, ...],
                      page_size: int = PAGE_SIZE_2MIB) -> PaddingPlan:
    """Minimal zero padding making every shard boundary page-aligned.

    Pads go at the end of each future shard; walking the boundaries left
    to right, each pad is the unique residue that lands the running
    offset on a page edge, which is the minimum feasible per boundary.
    """
    for tp in tp_set:
        if spec.inter_size % tp != 0:
            raise ValueError(f"tp={tp} does not divide inter_size")
    offsets = _boundary_offsets(spec.total_bytes, tuple(sorted(set(tp_set))))
    pads: dict[int, int] = {}
    cum_pad = 0
    for idx, off in enumerate(offsets, 1):
        pad = (-(off + cum_pad)) % page_size
        if pad:
            pads[idx] = pad
        cum_pad += pad
    return PaddingPlan(spec, tuple(sorted(set(tp_set))), page_size, pads, cum_pad)


def padded_shard_pages(plan: PaddingPlan, tp: int) -> int:
    """Integral pages per shard of the padded tensor at degree tp."""
    if tp not in plan.tp_set:
        raise ValueError(f"tp={tp} not in plan tp_set {plan.tp_set}")
    padded = plan.padded_bytes
    assert padded % (tp * plan.page_size) == 0, "padding left a misaligned shard"
    return padded // (tp * plan.page_size)


def model_padding_overhead(model: ModelConfig, tp_set: tuple[int, ...],
                           page_size: int = PAGE_SIZE_2MIB) -> Fraction:
    """Total inserted pad bytes over total model weight bytes.

    Weight bytes derive from the per-layer MLP tensor sum and the MLP
    fraction of the model, keeping the ratio self-consistent.
    """
    tensors = mlp_tensors(model)
    pad = sum(make_padding_plan(t, tp_set, page_size).total_pad_bytes
              for t in tensors) * model.num_layers
    mlp_total = sum(t.total_bytes for t in tensors) * model.num_layers
    weights_total = Fraction(mlp_total) / Fraction(model.mlp_weight_fraction).limit_denominator(10**6)
    return Fraction(pad) / weights_total


@dataclass(frozen=True)
class WeightTransformPlan:
    kind: str  # "in_place" | "partial_swap" | "scale_down"
    layer: int
    copied_bytes: int
    freed_pages: int
    extra_peak_bytes: int


def _partial_swap_copies(spec: TensorSpec, tp_to: int, page_size: int) -> tuple[int, int]:
    """(total copied bytes, max per-shard copied bytes) for unaligned shards.

    Each kept shard must relocate the parts of itself living in pages it
    shares with neighboring shards.
    """
    shard = spec.total_bytes // tp_to
    total = 0
    worst = 0
    for i in range(tp_to):
        start = i * shard
        end = start + shard
        head = (-start) % page_size
        head = min(head, shard) if start % page_size else 0
        tail = end % page_size
        copied = min(head + tail, shard)
        total += copied
        worst = max(worst, copied)
    return total, worst


def plan_weight_scale_up(model: ModelConfig, tp_from: int, tp_to: int,
                         padded: bool = True, kind: str | None = None,
                         page_size: int = PAGE_SIZE_2MIB) -> list[WeightTransformPlan]:
    """Per-layer plans for raising the TP degree of resident MLP weights.

    Padded (or naturally aligned) weights release their non-kept shards
    in place with zero copies; unpadded misaligned weights fall back to
    the partial-swap baseline with copy and staging costs.
    """
    if tp_to <= tp_from:
        raise ValueError("scale-up requires tp_to > tp_from")
    tensors = mlp_tensors(model)
    aligned = all(shard_is_aligned(t, tp, page_size)
                  for t in tensors for tp in (tp_from, tp_to))
    if kind is None:
        kind = "in_place" if (padded or aligned) else "partial_swap"
    if kind == "in_place" and not padded and not aligned:
        raise MisalignedWithoutPadding(
            f"{model.name}: in-place scale-up needs padding at tp={tp_to}")

    plans = []
    for layer in range(1, model.num_layers + 1):
        if kind == "in_place":
            freed = 0
            for t in tensors:
                if padded:
                    p = make_padding_plan(t, (tp_from, tp_to), page_size)
                    freed += (padded_shard_pages(p, tp_from)
                              - padded_shard_pages(p, tp_to))
                else:
                    freed += int(pages_per_tensor(t, tp_from, page_size)
                                 - pages_per_tensor(t, tp_to, page_size))
            plans.append(WeightTransformPlan("in_place", layer, 0, freed, 0))
        else:
            copied = 0
            peak = 0
            freed = 0
            for t in tensors:
                c, w = _partial_swap_copies(t, tp_to, page_size)
                copied += c
                peak += w
                freed += int(pages_per_tensor(t, tp_from, page_size)
                             - pages_per_tensor(t, tp_to, page_size))
            plans.append(WeightTransformPlan("partial_swap", layer, copied,
                                             freed, peak))
    return plans


def plan_weight_scale_down(model: ModelConfig, tp_from: int, tp_to: int,
                           page_size: int = PAGE_SIZE_2MIB) -> list[WeightTransformPlan]:
    """Per-layer plans for lowering TP: each worker receives its missing
    MLP shards via all-to-all, charged layer by layer."""
    if tp_to == tp_from:
        return []
    if tp_to > tp_from:
        raise ValueError("scale-down requires tp_to < tp_from")
    layer_bytes = model.mlp_layer_bytes
    recv = layer_bytes // tp_to - layer_bytes // tp_from  # per worker
    plans = []
    for layer in range(1, model.num_layers + 1):
        peak = pages_needed(recv, page_size) * page_size
        plans.append(WeightTransformPlan("scale_down", layer, recv, 0, peak))
    return plans


def naive_copy_extra_peak(model: ModelConfig, tp_from: int, tp_to: int) -> int:
    """Whole-copy baseline: stage the full target shard before releasing
    the old block, costing an extra tp_from/tp_to of the model weights."""
    return model.weights_bytes * tp_from // tp_to
