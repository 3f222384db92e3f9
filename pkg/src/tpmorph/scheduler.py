"""Transformation-aware request scheduling plus RR and LLF baselines.

The aware policy routes by input length (outputs contribute ~10% of total
sequence length, so admission uses a fixed expected-output ratio), prefers
instances already running at higher TP for long requests to avoid extra
transformations, keeps a low-usage TP1 group reserved for cheap future
merges while long traffic is live, and only splits a TP>1 instance when an
ideal split would leave every fragment below the load threshold.

Round-Robin cycles instance ids and Least-Load-First picks the smallest
load estimate; both trigger a scale-up only when their chosen instance
cannot fit the request.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import Unschedulable

#: output tokens as a fraction of input tokens (outputs are ~10.3% of the
#: total sequence length in production workloads)
OUTPUT_INPUT_RATIO = 0.103 / 0.897


@dataclass(frozen=True)
class Request:
    id: str
    arrival_time: float
    input_tokens: int
    output_tokens: int

    def __post_init__(self):
        if self.input_tokens < 1 or self.output_tokens < 1:
            raise ValueError("token counts must be >= 1")


@dataclass
class InstanceState:
    id: str
    tp: int
    gpu_ids: tuple[int, ...]
    kv_capacity_tokens: int
    throughput_capacity: float  # tokens/second at this TP
    host: int = 0
    kv_used_tokens: int = 0
    active_requests: list[str] = field(default_factory=list)
    transforming: bool = False
    reserved_for_transform: bool = False

    def __post_init__(self):
        if len(self.gpu_ids) != self.tp:
            raise ValueError("gpu count must equal tp")


@dataclass
class SchedulerConfig:
    policy: str = "gyges"  # gyges | rr | llf
    scale_down_threshold: float = 0.5
    expected_output_cap: int = 8192
    reserve_cooldown_s: float = 60.0
    max_concurrent: int = 64  # request-count pressure scale for load

    def __post_init__(self):
        if not 0.0 < self.scale_down_threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        if self.policy not in ("gyges", "rr", "llf"):
            raise ValueError(f"unknown policy {self.policy!r}")


@dataclass(frozen=True)
class Placement:
    instance_id: str


@dataclass(frozen=True)
class ScaleUpDecision:
    group: tuple[str, ...]
    target_tp: int


@dataclass(frozen=True)
class ScaleDownDecision:
    instance_id: str
    target_tp: int = 1


OVERLOAD = math.inf


def expected_output_tokens(input_tokens: int, cfg: SchedulerConfig) -> int:
    return min(cfg.expected_output_cap,
               max(1, round(OUTPUT_INPUT_RATIO * input_tokens)))


def expected_total_tokens(req: Request, cfg: SchedulerConfig) -> int:
    return req.input_tokens + expected_output_tokens(req.input_tokens, cfg)


def estimate_load(req: Request | None, inst: InstanceState,
                  cfg: SchedulerConfig) -> float:
    """Expected load after adding `req` (None = current load).

    Load is the max of KV utilization and request-count pressure; returns
    the overload sentinel (inf) when the KV cache cannot fit the request.
    """
    extra = expected_total_tokens(req, cfg) if req is not None else 0
    used = inst.kv_used_tokens + extra
    if used > inst.kv_capacity_tokens:
        return OVERLOAD
    kv_ratio = used / inst.kv_capacity_tokens
    count = len(inst.active_requests) + (1 if req is not None else 0)
    return max(kv_ratio, count / cfg.max_concurrent)


class Scheduler:
    """Sequential decision process driven by the simulation loop."""

    def __init__(self, cfg: SchedulerConfig,
                 kv_capacity_by_tp: dict[int, int]):
        self.cfg = cfg
        self.kv_capacity_by_tp = kv_capacity_by_tp
        self._rr_next = 0
        self.last_long_arrival: float | None = None

    # -- helpers ---------------------------------------------------------

    def is_long(self, req: Request) -> bool:
        return req.input_tokens > self.kv_capacity_by_tp[1]

    def _required_tp(self, req: Request) -> int:
        need = expected_total_tokens(req, self.cfg)
        for tp in sorted(self.kv_capacity_by_tp):
            if self.kv_capacity_by_tp[tp] >= need:
                return tp
        raise Unschedulable(
            f"{req.id}: {need} tokens exceed max-TP capacity")

    def _tp1_groups(self, instances: list[InstanceState],
                    size: int) -> list[tuple[str, ...]]:
        """Co-located TP1 groups of `size`, cheapest migration first."""
        by_host: dict[int, list[InstanceState]] = {}
        for inst in instances:
            if inst.tp == 1 and not inst.transforming:
                by_host.setdefault(inst.host, []).append(inst)
        groups = []
        for host, members in sorted(by_host.items()):
            members.sort(key=lambda i: (i.kv_used_tokens, i.id))
            while len(members) >= size:
                take, members = members[:size], members[size:]
                total = sum(i.kv_used_tokens for i in take)
                groups.append((total, tuple(i.id for i in take)))
        groups.sort()
        return [g for _, g in groups]

    def _scale_up_decision(self, req: Request,
                           instances: list[InstanceState]) -> ScaleUpDecision:
        target = self._required_tp(req)
        if target > 1:
            groups = self._tp1_groups(instances, target)
            if groups:
                return ScaleUpDecision(groups[0], target)
        raise Unschedulable(
            f"{req.id}: no instance fits and no TP1 group can merge to "
            f"TP{target}")

    def _fallback_placement(self, req: Request,
                            instances: list[InstanceState]) -> Placement:
        """Least-loaded feasible instance when a scale-up is impossible."""
        best = None
        for inst in instances:
            if inst.transforming:
                continue
            load = estimate_load(req, inst, self.cfg)
            if load is OVERLOAD or load == OVERLOAD:
                continue
            key = (load, inst.id)
            if best is None or key < best[0]:
                best = (key, inst)
        if best is None:
            raise Unschedulable(f"{req.id}: no feasible instance")
        return Placement(best[1].id)

    # -- policies --------------------------------------------------------

    def schedule_request(self, req: Request, instances: list[InstanceState],
                         now: float = 0.0) -> Placement | ScaleUpDecision:
        if self.is_long(req):
            self.last_long_arrival = now
        if self.cfg.policy == "rr":
            return self.baseline_rr(req, instances)
        if self.cfg.policy == "llf":
            return self.baseline_llf(req, instances)
        return self._schedule_aware(req, instances)

    def _schedule_aware(self, req: Request,
                        instances: list[InstanceState]) -> Placement | ScaleUpDecision:
        long_req = self.is_long(req)
        candidates = []
        for inst in sorted(instances, key=lambda i: i.id):
            if inst.transforming:
                continue
            if inst.reserved_for_transform and not long_req:
                # keep the reserved merge group free of new short traffic
                continue
            load = estimate_load(req, inst, self.cfg)
            if load == OVERLOAD:
                continue
            candidates.append((inst, load))
        if candidates:
            if long_req:
                # prefer instances already at higher TP to avoid another
                # transformation for consecutive long requests
                candidates.sort(key=lambda c: (-c[0].tp, c[1], c[0].id))
            else:
                # shorts stay on cheap low-TP instances so the merged
                # instance's capacity is kept for long-context traffic
                candidates.sort(key=lambda c: (c[0].tp, c[1], c[0].id))
            return Placement(candidates[0][0].id)
        try:
            return self._scale_up_decision(req, instances)
        except Unschedulable:
            if long_req:
                raise
            return self._fallback_placement(req, instances)

    def baseline_rr(self, req: Request,
                    instances: list[InstanceState]) -> Placement | ScaleUpDecision:
        order = sorted(instances, key=lambda i: i.id)
        avail = [i for i in order if not i.transforming]
        if not avail:
            raise Unschedulable(f"{req.id}: all instances transforming")
        chosen = avail[self._rr_next % len(avail)]
        self._rr_next += 1
        if estimate_load(req, chosen, self.cfg) == OVERLOAD:
            try:
                return self._scale_up_decision(req, instances)
            except Unschedulable:
                return self._fallback_placement(req, instances)
        return Placement(chosen.id)

    def baseline_llf(self, req: Request,
                     instances: list[InstanceState]) -> Placement | ScaleUpDecision:
        # least *current* load; the pick is unaware of the request's size
        scored = [(estimate_load(None, i, self.cfg), i.id, i)
                  for i in instances if not i.transforming]
        if not scored:
            raise Unschedulable(f"{req.id}: all instances transforming")
        scored.sort(key=lambda s: (s[0], s[1]))
        _, _, chosen = scored[0]
        if estimate_load(req, chosen, self.cfg) == OVERLOAD:
            try:
                return self._scale_up_decision(req, instances)
            except Unschedulable:
                return self._fallback_placement(req, instances)
        return Placement(chosen.id)

    # -- parallelism management -----------------------------------------

    def schedule_parallelism(self, inst: InstanceState,
                             instances: list[InstanceState],
                             long_active_or_pending: bool,
                             request_tokens: dict[str, int] | None = None,
                             ) -> ScaleDownDecision | None:
        """Safe scale-down check for one instance (aware policy only)."""
        if inst.tp <= 1 or inst.transforming:
            return None
        if long_active_or_pending:
            return None
        load = estimate_load(None, inst, self.cfg)
        if load >= self.cfg.scale_down_threshold / inst.tp:
            return None
        # ideal round-robin split: every fragment must stay under the
        # threshold at TP1 capacity, with no request too long for TP1
        tp1_cap = self.kv_capacity_by_tp[1]
        tokens = request_tokens or {}
        frags = [0] * inst.tp
        for k, rid in enumerate(sorted(inst.active_requests)):
            t = tokens.get(rid, 0)
            if t > tp1_cap:
                return None
            frags[k % inst.tp] += t
        if any(f / tp1_cap >= self.cfg.scale_down_threshold for f in frags):
            return None
        return ScaleDownDecision(inst.id, 1)

    def update_reserve(self, instances: list[InstanceState],
                       now: float) -> None:
        """Hold the cheapest TP1 merge group while long traffic is live."""
        active = (self.last_long_arrival is not None
                  and now - self.last_long_arrival <= self.cfg.reserve_cooldown_s)
        max_tp = max(self.kv_capacity_by_tp)
        has_headroom_high_tp = any(
            i.tp == max_tp and not i.transforming
            and i.kv_used_tokens < i.kv_capacity_tokens // 2
            for i in instances)
        for inst in instances:
            inst.reserved_for_transform = False
        if not active or has_headroom_high_tp:
            return
        groups = self._tp1_groups(instances, max_tp)
        if groups:
            chosen = set(groups[0])
            for inst in instances:
                if inst.id in chosen:
                    inst.reserved_for_transform = True
