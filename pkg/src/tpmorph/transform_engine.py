"""Orchestration of a full parallelism transformation for an instance group.

A transformation walks the model in reverse layer order (last layer first),
staggered so only `stagger_width` layers change per simulation step, and on
scale-up transforms each layer's MLP before its KV cache: weight pages are
released early to make room for the KV cache the merged instance will hold.
In-flight requests keep the old parallelism until they cross the moving
layer boundary, so they switch exactly once.

Step timing collapses interconnect and driver effects into a configurable
cost model; the overlap fraction removes the part hidden behind ongoing
decode computation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import IncompatibleGroup, OutOfMemory
from .models import ModelConfig
from .page_store import PAGE_SIZE_2MIB, PageRange, PageSpace, pages_needed
from .weight_plan import (
    WeightTransformPlan,
    make_padding_plan,
    mlp_tensors,
    padded_shard_pages,
    plan_weight_scale_down,
    plan_weight_scale_up,
)


@dataclass(frozen=True)
class CostModel:
    interconnect_bandwidth: float = 200e9  # bytes/second
    per_stage_latency: float = 5e-4        # seconds per all-to-all stage
    driver_call_cost: float = 2e-5         # seconds per map/unmap batch
    overlap_fraction: float = 0.9

    def __post_init__(self):
        if self.interconnect_bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must be in [0, 1]")

    def step_stall(self, nbytes: int, stages: int, driver_batches: int = 1) -> float:
        busy = (nbytes / self.interconnect_bandwidth
                + stages * self.per_stage_latency
                + driver_batches * self.driver_call_cost)
        return (1.0 - self.overlap_fraction) * busy


@dataclass(frozen=True)
class KvStepPlan:
    """Byte-level summary of one layer's KV migration phase."""
    bytes_moved: int
    stage_count: int
    peak_extra_bytes: int  # per worker


@dataclass(frozen=True)
class Step:
    layer: int
    phase: str  # "mlp" | "kv"
    plan: WeightTransformPlan | KvStepPlan
    earliest_step: int
    stall_s: float
    bytes_moved: int


@dataclass
class TransformationPlan:
    direction: str  # "scale_up" | "scale_down"
    tp_from: int
    tp_to: int
    steps: list[Step]
    peak_extra_bytes: dict[int, int] = field(default_factory=dict)

    @property
    def total_stall(self) -> float:
        return sum(s.stall_s for s in self.steps)

    @property
    def is_empty(self) -> bool:
        return not self.steps


def build_plan(group: list[str], tp_from: int, tp_to: int, model: ModelConfig,
               cost: CostModel, stagger_width: int = 1,
               kv_tokens_per_worker: list[int] | None = None,
               stage_count: int | None = None, padded: bool = True,
               page_size: int = PAGE_SIZE_2MIB) -> TransformationPlan:
    """Ordered per-layer step list for transforming `group`.

    Scale-up merges len(group) instances of degree tp_from into one of
    degree tp_to; scale-down splits one instance. GPU count must be
    conserved either way.
    """
    if stagger_width < 1:
        raise ValueError("stagger_width must be >= 1")
    if tp_from == tp_to:
        return TransformationPlan("scale_up", tp_from, tp_to, [])
    direction = "scale_up" if tp_to > tp_from else "scale_down"
    if direction == "scale_up":
        if len(group) * tp_from != tp_to:
            raise IncompatibleGroup(
                f"{len(group)} x TP{tp_from} cannot merge into TP{tp_to}")
        weight_plans = plan_weight_scale_up(model, tp_from, tp_to,
                                            padded=padded, page_size=page_size)
        workers = tp_to
    else:
        if len(group) != 1 or tp_from % tp_to != 0:
            raise IncompatibleGroup(
                f"TP{tp_from} cannot split into TP{tp_to} instances")
        weight_plans = plan_weight_scale_down(model, tp_from, tp_to,
                                              page_size=page_size)
        workers = tp_from
    by_layer = {p.layer: p for p in weight_plans}

    tokens = list(kv_tokens_per_worker or [0] * workers)
    if len(tokens) != workers:
        raise IncompatibleGroup(
            f"kv_tokens_per_worker needs {workers} entries, got {len(tokens)}")
    total_tokens = sum(tokens)
    tb = model.kv_bytes_per_token_per_layer
    stages = stage_count if stage_count is not None else max(1, tp_to * 2)
    if direction == "scale_up":
        kv_moved = sum(t * tb for t in tokens) * (tp_to - 1) // tp_to
        recv_worst = max((total_tokens - t) * tb // tp_to for t in tokens)
    else:
        kv_moved = total_tokens * tb * (tp_from - 1) // tp_from
        recv_worst = total_tokens * tb // tp_from
    kv_peak = -(-recv_worst // stages)

    steps: list[Step] = []
    for pos, layer in enumerate(range(model.num_layers, 0, -1)):
        earliest = pos // stagger_width
        wp = by_layer[layer]
        w_bytes = wp.copied_bytes
        steps.append(Step(layer, "mlp", wp, earliest,
                          cost.step_stall(w_bytes, stages=0), w_bytes))
        kv_plan = KvStepPlan(kv_moved, stages, kv_peak)
        steps.append(Step(layer, "kv", kv_plan, earliest,
                          cost.step_stall(kv_moved, stages=stages), kv_moved))

    peak = {}
    for w in range(1, workers + 1):
        weight_peak = max((s.plan.extra_peak_bytes for s in steps
                           if s.phase == "mlp"), default=0)
        peak[w] = weight_peak + kv_peak
    return TransformationPlan(direction, tp_from, tp_to, steps, peak)


def transformation_cost_summary(plan: TransformationPlan) -> dict:
    per_phase = {"mlp": 0, "kv": 0}
    for s in plan.steps:
        per_phase[s.phase] += s.bytes_moved
    return {
        "total_stall": plan.total_stall,
        "per_phase_bytes_moved": per_phase,
        "steps": len(plan.steps),
    }


@dataclass
class WorkerMemory:
    """One worker's page space plus its per-layer weight ranges."""
    space: PageSpace
    layer_ranges: dict[int, list[PageRange]]
    tp: int


def _padded_layer_pages(model: ModelConfig, tp: int, page_size: int) -> int:
    return sum(padded_shard_pages(make_padding_plan(t, model.supported_tp,
                                                    page_size), tp)
               for t in mlp_tensors(model))


def provision_worker(space: PageSpace, model: ModelConfig, tp: int,
                     page_size: int = PAGE_SIZE_2MIB,
                     activation_bytes: int = 0) -> WorkerMemory:
    """Map per-layer padded MLP weights (plus replicated non-MLP weights
    and a static activation reservation) into a fresh space."""
    ranges: dict[int, list[PageRange]] = {}
    for layer in range(1, model.num_layers + 1):
        pages = _padded_layer_pages(model, tp, page_size)
        ranges[layer] = [space.alloc(pages * page_size, f"w.L{layer}")]
    non_mlp = model.weights_bytes - model.mlp_bytes
    if non_mlp > 0:
        space.alloc(non_mlp, "w.shared")
    if activation_bytes > 0:
        space.reserve(activation_bytes, "activations")
    return WorkerMemory(space, ranges, tp)


@dataclass
class ExecutionResult:
    completed_layers: list[int]
    aborted: bool
    stall_schedule: list[tuple[int, float]]  # (earliest_step, stall seconds)

    @property
    def total_stall(self) -> float:
        return sum(s for _, s in self.stall_schedule)


def execute_plan(plan: TransformationPlan, workers: list[WorkerMemory],
                 current_step: int = 0) -> ExecutionResult:
    """Apply a plan to worker memories layer by layer.

    Each layer is atomic: on OOM mid-layer every allocation of that layer
    is rolled back and execution stops at the last completed layer.
    """
    completed: list[int] = []
    schedule: list[tuple[int, float]] = []
    if plan.is_empty:
        return ExecutionResult(completed, False, schedule)
    layers: dict[int, list[Step]] = {}
    order: list[int] = []
    for s in plan.steps:
        if s.layer not in layers:
            order.append(s.layer)
            layers[s.layer] = []
        layers[s.layer].append(s)

    for layer in order:
        undo: list[tuple[WorkerMemory, PageRange, str]] = []
        mark = len(schedule)
        try:
            for step in layers[layer]:
                if step.phase == "mlp":
                    for wm in workers:
                        _apply_mlp_step(plan, wm, layer, step.plan, undo)
                else:
                    for wm in workers:
                        _apply_kv_step(wm, layer, step.plan, undo)
                schedule.append((current_step + step.earliest_step, step.stall_s))
        except OutOfMemory:
            for wm, rng, action in reversed(undo):
                if action == "alloc":
                    wm.space.unmap(rng)
                    if rng in wm.layer_ranges.get(layer, []):
                        wm.layer_ranges[layer].remove(rng)
                else:
                    restored = wm.space.alloc(rng.length * wm.space.page_size,
                                              rng.owner_tag)
                    wm.layer_ranges.setdefault(layer, []).append(restored)
            return ExecutionResult(completed, True, schedule[:mark])
        completed.append(layer)
    for wm in workers:
        wm.tp = plan.tp_to
    return ExecutionResult(completed, False, schedule)


def _apply_mlp_step(plan: TransformationPlan, wm: WorkerMemory, layer: int,
                    wp: WeightTransformPlan, undo: list) -> None:
    if plan.direction == "scale_up":
        if wp.freed_pages == 0:
            return
        ranges = wm.layer_ranges[layer]
        rng = ranges[-1]
        kept = rng.length - wp.freed_pages
        if kept < 0:
            raise ValueError("plan frees more pages than resident")
        tail = PageRange(rng.start_page + kept, wp.freed_pages, rng.owner_tag)
        wm.space.unmap(tail)
        undo.append((wm, tail, "free"))
        if kept:
            ranges[-1] = PageRange(rng.start_page, kept, rng.owner_tag)
        else:
            ranges.pop()
    else:
        got = wm.space.alloc(max(wp.copied_bytes, 1), f"w.L{layer}")
        wm.layer_ranges.setdefault(layer, []).append(got)
        undo.append((wm, got, "alloc"))


def _apply_kv_step(wm: WorkerMemory, layer: int, kp: KvStepPlan,
                   undo: list) -> None:
    if kp.peak_extra_bytes <= 0:
        return
    buf = wm.space.alloc(kp.peak_extra_bytes, f"kvstage.L{layer}")
    # stage buffer is transient; the peak is captured by the high-water mark
    wm.space.unmap(buf)
