"""Trace-driven discrete-event simulation of a transforming cluster.

Each instance runs a serial engine: an active prefill blocks decode, and
decode throughput is shared equally among the requests currently
generating. Parallelism transformations pause the whole instance group
for the plan's stall time, then atomically replace the members with the
merged (or split) instances, carrying queued and in-flight requests
across. Everything advances on a (time, sequence) heap, so a
(trace, config) pair fully determines the event log byte for byte.

KV admission is accounted in *expected* tokens -- the same estimate the
scheduler uses -- so placement decisions and capacity enforcement can
never disagree.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .errors import OutOfMemory, Unschedulable
from .models import ModelConfig
from .page_store import PageRange, PageSpace, PageState
from .scheduler import (
    InstanceState,
    Placement,
    Request,
    ScaleUpDecision,
    Scheduler,
    SchedulerConfig,
    expected_total_tokens,
)
from .transform_engine import CostModel, build_plan

DEFAULT_THROUGHPUT = {1: 448.0, 2: 670.0, 4: 767.0}
DEFAULT_KV_CAPACITY = {1: 3750, 2: 41250, 4: 120500}
#: 3.75K-token prefill finishes in ~1.9 s, inside the 10 s first-token target
DEFAULT_PREFILL_RATE_TP1 = 2000.0


def _default_prefill_rates() -> dict[int, float]:
    base = DEFAULT_THROUGHPUT[1]
    return {tp: DEFAULT_PREFILL_RATE_TP1 * thr / base
            for tp, thr in DEFAULT_THROUGHPUT.items()}


@dataclass(frozen=True)
class PerfModel:
    """Per-TP instance rates; defaults follow the reference deployment."""
    throughput_by_tp: dict[int, float] = field(
        default_factory=lambda: dict(DEFAULT_THROUGHPUT))
    prefill_rate_by_tp: dict[int, float] = field(
        default_factory=_default_prefill_rates)
    kv_capacity_by_tp: dict[int, int] = field(
        default_factory=lambda: dict(DEFAULT_KV_CAPACITY))

    def __post_init__(self):
        for d in (self.throughput_by_tp, self.prefill_rate_by_tp,
                  self.kv_capacity_by_tp):
            if any(v <= 0 for v in d.values()):
                raise ValueError("all rates and capacities must be positive")
        caps = [self.kv_capacity_by_tp[tp]
                for tp in sorted(self.kv_capacity_by_tp)]
        if caps != sorted(caps):
            raise ValueError("kv capacity must be monotone in TP")


@dataclass(frozen=True)
class ClusterConfig:
    model: ModelConfig
    hosts: int = 1
    gpus_per_host: int = 8
    gpu_memory_gb: float = 96.0


@dataclass
class RequestMetrics:
    request_id: str
    arrival_s: float
    placed_instance: str | None = None
    ttft_s: float | None = None
    tpot_s: float | None = None
    completed_s: float | None = None
    rejected: bool = False


@dataclass
class MetricsRecord:
    requests: list[RequestMetrics]
    duration_s: float
    window_s: float
    window_throughput: list[float]
    throughput_tps_mean: float
    transformation_count: int
    scale_up_count: int
    stall_total_s: float
    peak_gpu_bytes: int


@dataclass
class _Lifecycle:
    req: Request
    instance: str | None = None
    rejected: bool = False
    prefill_end: float | None = None
    completed: float | None = None
    emitted: float = 0.0


@dataclass
class _Engine:
    state: InstanceState
    prefill_queue: list[str] = field(default_factory=list)
    current_prefill: tuple[str, float] | None = None
    decoding: dict[str, float] = field(default_factory=dict)  # rid -> tokens left
    last_advance: float = 0.0
    pgen: int = 0  # invalidates scheduled prefill_end events
    dgen: int = 0  # invalidates scheduled decode_end events


class Simulator:
    """One deterministic run; use the module-level run() helper."""

    def __init__(self, trace: list[Request], cluster: ClusterConfig,
                 perf: PerfModel, sched_cfg: SchedulerConfig, cost: CostModel,
                 stagger_width: int = 1, horizon: float | None = None,
                 window_s: float = 10.0, scale_down_quiet_s: float = 120.0):
        self.cluster = cluster
        self.perf = perf
        self.cost = cost
        self.stagger_width = stagger_width
        self.horizon = horizon
        self.window_s = window_s
        self.scale_down_quiet_s = scale_down_quiet_s
        self.scheduler = Scheduler(sched_cfg, perf.kv_capacity_by_tp)

        self.heap: list = []
        self.seq = 0
        self.events: list[dict] = []
        self.segments: list[tuple[float, float, float]] = []  # (t0, t1, tokens)
        self.lifes: dict[str, _Lifecycle] = {}
        self.engines: dict[str, _Engine] = {}
        self.spaces: dict[int, PageSpace] = {}
        self.weight_ranges: dict[str, list[tuple[int, PageRange]]] = {}
        self.kv_ranges: dict[str, list[tuple[int, PageRange]]] = {}
        self.pending_transforms: dict[int, dict] = {}
        self.transform_seq = 0
        self.transform_count = 0
        self.scale_up_count = 0
        self.stall_total = 0.0
        self.last_time = 0.0

        gpu_bytes = int(cluster.gpu_memory_gb * 1e9)
        n_gpus = cluster.hosts * cluster.gpus_per_host
        for g in range(n_gpus):
            self.spaces[g] = PageSpace(gpu_bytes)
        self._next_instance = 0
        for g in range(n_gpus):
            self._create_instance((g,), host=g // cluster.gpus_per_host)
        for req in trace:
            self.lifes[req.id] = _Lifecycle(req)
            self._push(req.arrival_time, "arrival", request=req.id)
        if horizon is not None:
            self._push(horizon, "end")

    # -- plumbing --------------------------------------------------------

    def _push(self, t: float, kind: str, **payload) -> None:
        heapq.heappush(self.heap, (t, self.seq, kind, payload))
        self.seq += 1

    def _log(self, t: float, event: str, **fields) -> None:
        entry = {"t": round(t, 6), "event": event}
        entry.update(fields)
        self.events.append(entry)

    def _states(self) -> list[InstanceState]:
        return [self.engines[k].state for k in sorted(self.engines)]

    def _create_instance(self, gpu_ids: tuple[int, ...], host: int,
                         kv_used: int = 0,
                         active: list[str] | None = None) -> _Engine:
        tp = len(gpu_ids)
        iid = f"i{self._next_instance:04d}"
        self._next_instance += 1
        state = InstanceState(iid, tp, gpu_ids,
                              self.perf.kv_capacity_by_tp[tp],
                              self.perf.throughput_by_tp[tp], host=host,
                              kv_used_tokens=kv_used)
        state.active_requests = list(active or [])
        per_gpu = self.cluster.model.weights_bytes // tp
        self.weight_ranges[iid] = [
            (g, self.spaces[g].alloc(per_gpu, f"w.{iid}")) for g in gpu_ids]
        engine = _Engine(state, last_advance=self.last_time)
        self.engines[iid] = engine
        return engine

    def _destroy_instance(self, iid: str) -> None:
        for g, rng in self.weight_ranges.pop(iid):
            self.spaces[g].unmap(rng)
        del self.engines[iid]

    def _alloc_kv(self, rid: str, total_tokens: int, engine: _Engine) -> None:
        per_gpu = (total_tokens * self.cluster.model.kv_bytes_per_token
                   // engine.state.tp)
        self.kv_ranges[rid] = [
            (g, self.spaces[g].alloc(per_gpu, f"kv.{rid}", PageState.KV))
            for g in engine.state.gpu_ids]

    def _free_kv(self, rid: str) -> None:
        for g, rng in self.kv_ranges.pop(rid, []):
            self.spaces[g].unmap(rng)

    def _accounted_tokens(self, rid: str) -> int:
        return expected_total_tokens(self.lifes[rid].req, self.scheduler.cfg)

    # -- engine mechanics ------------------------------------------------

    def _running(self, e: _Engine) -> bool:
        return e.current_prefill is None and not e.state.transforming

    def _advance(self, e: _Engine, now: float) -> None:
        dt = now - e.last_advance
        if dt > 0 and e.decoding and self._running(e):
            per = self.perf.throughput_by_tp[e.state.tp] / len(e.decoding)
            emitted = 0.0
            for rid in e.decoding:
                take = min(e.decoding[rid], per * dt)
                e.decoding[rid] -= take
                self.lifes[rid].emitted += take
                emitted += take
            if emitted > 0:
                self.segments.append((e.last_advance, now, emitted))
        e.last_advance = now

    def _reschedule_decode(self, e: _Engine, now: float) -> None:
        e.dgen += 1
        if not e.decoding or not self._running(e):
            return
        per = self.perf.throughput_by_tp[e.state.tp] / len(e.decoding)
        rid = min(e.decoding, key=lambda r: (e.decoding[r], r))
        self._push(now + e.decoding[rid] / per, "decode_end",
                   instance=e.state.id, request=rid, gen=e.dgen)

    def _start_prefill_if_idle(self, e: _Engine, now: float) -> None:
        if e.state.transforming or e.current_prefill or not e.prefill_queue:
            return
        self._advance(e, now)
        e.dgen += 1  # decode pauses for the whole prefill
        rid = e.prefill_queue.pop(0)
        req = self.lifes[rid].req
        dur = req.input_tokens / self.perf.prefill_rate_by_tp[e.state.tp]
        e.current_prefill = (rid, now + dur)
        self._push(now + dur, "prefill_end", instance=e.state.id,
                   request=rid, gen=e.pgen)
        self._log(now, "prefill_start", request=rid, instance=e.state.id)

    def _abort_prefill(self, e: _Engine, now: float) -> None:
        if e.current_prefill is not None:
            rid, _ = e.current_prefill
            e.prefill_queue.insert(0, rid)  # restarts after the transform
            e.current_prefill = None
            e.pgen += 1

    # -- request lifecycle -----------------------------------------------

    def _admit(self, req: Request, iid: str, now: float) -> None:
        e = self.engines[iid]
        life = self.lifes[req.id]
        total = expected_total_tokens(req, self.scheduler.cfg)
        try:
            self._alloc_kv(req.id, total, e)
        except OutOfMemory:
            life.rejected = True
            self._log(now, "reject", request=req.id, reason="oom")
            return
        e.state.kv_used_tokens += total
        e.state.active_requests.append(req.id)
        life.instance = iid
        e.prefill_queue.append(req.id)
        self._log(now, "place", request=req.id, instance=iid)
        self._start_prefill_if_idle(e, now)

    def _on_arrival(self, now: float, rid: str) -> None:
        life = self.lifes[rid]
        self._log(now, "arrival", request=rid,
                  input_tokens=life.req.input_tokens,
                  output_tokens=life.req.output_tokens)
        if self.scheduler.cfg.policy == "gyges":
            self.scheduler.update_reserve(self._states(), now)
        try:
            decision = self.scheduler.schedule_request(
                life.req, self._states(), now)
        except Unschedulable:
            life.rejected = True
            self._log(now, "reject", request=rid, reason="unschedulable")
            return
        if isinstance(decision, Placement):
            self._admit(life.req, decision.instance_id, now)
        else:
            self._begin_scale_up(decision, life.req, now)

    def _on_prefill_end(self, now: float, iid: str, rid: str, gen: int) -> None:
        e = self.engines.get(iid)
        if e is None or gen != e.pgen or e.current_prefill is None:
            return
        if e.current_prefill[0] != rid:
            return
        self._advance(e, now)
        e.current_prefill = None
        life = self.lifes[rid]
        life.prefill_end = now
        e.decoding[rid] = float(life.req.output_tokens)
        self._log(now, "prefill_end", request=rid, instance=iid)
        self._start_prefill_if_idle(e, now)
        self._reschedule_decode(e, now)

    def _on_decode_end(self, now: float, iid: str, rid: str, gen: int) -> None:
        e = self.engines.get(iid)
        if e is None or gen != e.dgen or rid not in e.decoding:
            return
        self._advance(e, now)
        e.decoding.pop(rid)
        life = self.lifes[rid]
        life.emitted = float(life.req.output_tokens)  # clamp float dust
        life.completed = now
        e.state.kv_used_tokens -= self._accounted_tokens(rid)
        e.state.active_requests.remove(rid)
        self._free_kv(rid)
        self._log(now, "decode_end", request=rid, instance=iid)
        self._reschedule_decode(e, now)
        self._maybe_scale_down(now)

    # -- transformations -------------------------------------------------

    def _begin_transform(self, kind: str, members: list[str], tp_from: int,
                         tp_to: int, now: float, pending_req: Request | None,
                         ) -> None:
        engines = [self.engines[m] for m in members]
        tokens = []
        for e in engines:
            per_worker = e.state.kv_used_tokens // e.state.tp
            tokens.extend([per_worker] * e.state.tp)
        plan = build_plan(members if kind == "scale_up" else [members[0]],
                          tp_from, tp_to, self.cluster.model, self.cost,
                          stagger_width=self.stagger_width,
                          kv_tokens_per_worker=tokens)
        stall = plan.total_stall
        self.transform_count += 1
        if kind == "scale_up":
            self.scale_up_count += 1
        self.stall_total += stall
        peak = max(plan.peak_extra_bytes.values(), default=0)
        for e in engines:
            self._advance(e, now)
            self._abort_prefill(e, now)
            e.state.transforming = True
            e.dgen += 1
            for g in e.state.gpu_ids:
                if peak <= 0:
                    continue
                try:
                    buf = self.spaces[g].alloc(peak, "transform.stage")
                    self.spaces[g].unmap(buf)  # transient; records the peak
                except OutOfMemory:
                    pass
        tid = self.transform_seq
        self.transform_seq += 1
        self.pending_transforms[tid] = {
            "kind": kind, "members": members, "tp_to": tp_to,
            "request": pending_req}
        self._log(now, "transform_start", kind=kind, members=members,
                  tp_from=tp_from, tp_to=tp_to, stall_s=round(stall, 6))
        self._push(now + stall, "transform_end", tid=tid)

    def _begin_scale_up(self, decision: ScaleUpDecision, req: Request,
                        now: float) -> None:
        self._begin_transform("scale_up", list(decision.group), 1,
                              decision.target_tp, now, req)

    def _maybe_scale_down(self, now: float) -> None:
        if self.scheduler.cfg.policy != "gyges":
            return
        long_live = self._long_traffic_live(now)
        tokens = {rid: self._accounted_tokens(rid)
                  for rid, life in self.lifes.items()
                  if life.instance and life.completed is None}
        for iid in sorted(self.engines):
            st = self.engines[iid].state
            decision = self.scheduler.schedule_parallelism(
                st, self._states(), long_live, request_tokens=tokens)
            if decision is not None:
                self._begin_transform("scale_down", [iid], st.tp,
                                      decision.target_tp, now, None)
                return  # one transformation at a time keeps things legible

    def _long_traffic_live(self, now: float) -> bool:
        tp1_cap = self.perf.kv_capacity_by_tp[1]
        for life in self.lifes.values():
            if (life.instance and life.completed is None
                    and life.req.input_tokens > tp1_cap):
                return True
        last = self.scheduler.last_long_arrival
        return last is not None and now - last <= self.scale_down_quiet_s

    def _on_transform_end(self, now: float, tid: int) -> None:
        info = self.pending_transforms.pop(tid)
        members = info["members"]
        engines = [self.engines[m] for m in members]
        for e in engines:
            self._advance(e, now)
        carried = []
        for e in engines:
            for rid in e.state.active_requests:
                carried.append((rid, e.decoding.get(rid),
                                rid in e.prefill_queue))
        queue_order = []
        for e in engines:
            queue_order.extend(e.prefill_queue)
        queue_order.sort(key=lambda r: (self.lifes[r].req.arrival_time, r))
        gpu_ids = tuple(sorted(g for e in engines for g in e.state.gpu_ids))
        host = engines[0].state.host
        for rid, _, _ in carried:
            self._free_kv(rid)
        for m in members:
            self._destroy_instance(m)

        if info["kind"] == "scale_up":
            new_ids = [self._spawn(gpu_ids, host, carried, queue_order, now)]
        else:
            new_ids = []
            frags: list[list[tuple]] = [[] for _ in gpu_ids]
            order = sorted(r for r, _, _ in carried)
            by_rid = {r: (r, d, q) for r, d, q in carried}
            for k, rid in enumerate(order):
                frags[k % len(gpu_ids)].append(by_rid[rid])
            for g, frag in zip(gpu_ids, frags):
                frag_q = [r for r in queue_order
                          if any(r == fr[0] for fr in frag)]
                new_ids.append(self._spawn((g,), host, frag, frag_q, now))
        self._log(now, "transform_end", kind=info["kind"], members=members,
                  instances=new_ids)
        if info["request"] is not None:
            self._admit(info["request"], new_ids[0], now)
        for iid in new_ids:
            e = self.engines[iid]
            self._start_prefill_if_idle(e, now)
            self._reschedule_decode(e, now)

    def _spawn(self, gpu_ids: tuple[int, ...], host: int, carried: list,
               queue: list[str], now: float) -> str:
        kv_used = sum(self._accounted_tokens(r) for r, _, _ in carried)
        e = self._create_instance(gpu_ids, host, kv_used=kv_used,
                                  active=[r for r, _, _ in carried])
        e.last_advance = now
        for rid, remaining, _ in carried:
            self.lifes[rid].instance = e.state.id
            self._alloc_kv(rid, self._accounted_tokens(rid), e)
            if remaining is not None:
                e.decoding[rid] = remaining
        e.prefill_queue = list(queue)
        return e.state.id

    # -- main loop -------------------------------------------------------

    def run(self) -> tuple[MetricsRecord, list[dict]]:
        while self.heap:
            t, _, kind, payload = heapq.heappop(self.heap)
            if self.horizon is not None and t > self.horizon:
                break
            self.last_time = max(self.last_time, t)
            if kind == "arrival":
                self._on_arrival(t, payload["request"])
            elif kind == "prefill_end":
                self._on_prefill_end(t, payload["instance"],
                                     payload["request"], payload["gen"])
            elif kind == "decode_end":
                self._on_decode_end(t, payload["instance"],
                                    payload["request"], payload["gen"])
            elif kind == "transform_end":
                self._on_transform_end(t, payload["tid"])
            elif kind == "end":
                for iid in sorted(self.engines):
                    self._advance(self.engines[iid], t)
                self._log(t, "end")
                break
        duration = self.horizon if self.horizon is not None else self.last_time
        return self._metrics(duration), self.events

    def _metrics(self, duration: float) -> MetricsRecord:
        requests = []
        total_emitted = 0.0
        for rid in sorted(self.lifes):
            life = self.lifes[rid]
            total_emitted += life.emitted
            ttft = tpot = None
            if life.prefill_end is not None:
                ttft = life.prefill_end - life.req.arrival_time
            if life.completed is not None and life.prefill_end is not None:
                tpot = ((life.completed - life.prefill_end)
                        / life.req.output_tokens)
            requests.append(RequestMetrics(
                rid, life.req.arrival_time, life.instance, ttft, tpot,
                life.completed, life.rejected))
        n_windows = max(1, -(-int(duration * 1e6) // int(self.window_s * 1e6)))
        windows = [0.0] * n_windows
        for t0, t1, tokens in self.segments:
            self._spread(windows, t0, min(t1, duration), tokens)
        peak = max((s.high_water_mark for s in self.spaces.values()), default=0)
        mean = total_emitted / duration if duration > 0 else 0.0
        return MetricsRecord(requests, duration, self.window_s,
                             [w / self.window_s for w in windows], mean,
                             self.transform_count, self.scale_up_count,
                             self.stall_total, peak)

    def _spread(self, windows: list[float], t0: float, t1: float,
                tokens: float) -> None:
        if t1 <= t0:
            return
        rate = tokens / (t1 - t0)
        w = self.window_s
        k = int(t0 // w)
        while k * w < t1 and k < len(windows):
            lo, hi = max(t0, k * w), min(t1, (k + 1) * w)
            if hi > lo:
                windows[k] += rate * (hi - lo)
            k += 1


def run(trace: list[Request], cluster: ClusterConfig, perf: PerfModel,
        sched_cfg: SchedulerConfig, cost: CostModel, stagger_width: int = 1,
        horizon: float | None = None, window_s: float = 10.0,
        scale_down_quiet_s: float = 120.0) -> tuple[MetricsRecord, list[dict]]:
    """Simulate `trace` on a fresh cluster and return metrics + event log."""
    sim = Simulator(trace, cluster, perf, sched_cfg, cost,
                    stagger_width=stagger_width, horizon=horizon,
                    window_s=window_s, scale_down_quiet_s=scale_down_quiet_s)
    return sim.run()
