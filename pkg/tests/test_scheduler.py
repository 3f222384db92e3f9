import pytest

from tpmorph.errors import Unschedulable
from tpmorph.scheduler import (
    OVERLOAD,
    InstanceState,
    Placement,
    Request,
    ScaleDownDecision,
    ScaleUpDecision,
    Scheduler,
    SchedulerConfig,
    estimate_load,
)

CAPS = {1: 3750, 2: 41250, 4: 120500}
TPS = {1: 448.0, 2: 670.0, 4: 767.0}


def inst(i, tp=1, host=0, used=0, active=(), reserved=False):
    gpus = tuple(range(i * tp, i * tp + tp))
    st = InstanceState(f"i{i}", tp, gpus, CAPS[tp], TPS[tp], host=host,
                       kv_used_tokens=used, reserved_for_transform=reserved)
    st.active_requests = list(active)
    return st


def sched(policy="gyges", **kw):
    return Scheduler(SchedulerConfig(policy=policy, **kw), CAPS)


def short(rid="s1", tokens=1000, t=0.0):
    return Request(rid, t, tokens, 115)


def long_req(rid="l1", tokens=50_000, t=0.0):
    return Request(rid, t, tokens, 5742)


def test_short_request_lowest_id_when_idle():
    s = sched()
    out = s.schedule_request(short(), [inst(3), inst(1), inst(2)])
    assert out == Placement("i1")


def test_long_request_triggers_tp4_scale_up():
    s = sched()
    instances = [inst(k, host=0) for k in range(8)]
    out = s.schedule_request(long_req(), instances)
    assert isinstance(out, ScaleUpDecision)
    assert out.target_tp == 4  # 41.25K of TP2 is short of ~55K expected
    assert len(out.group) == 4


def test_second_long_prefers_existing_tp4():
    s = sched()
    instances = [inst(k) for k in range(4)]
    tp4 = inst(9, tp=4, used=55_000, active=["l1"])
    out = s.schedule_request(long_req("l2"), instances + [tp4])
    assert out == Placement("i9")


def test_long_request_beyond_max_capacity_unschedulable():
    s = sched()
    with pytest.raises(Unschedulable):
        s.schedule_request(Request("x", 0, 130_000, 1), [inst(k) for k in range(8)])


def test_estimate_load_monotone_and_overload():
    cfg = SchedulerConfig()
    empty = inst(0)
    assert estimate_load(None, empty, cfg) == 0.0
    boundary = inst(1, used=CAPS[1] - 100)
    assert estimate_load(short(tokens=1000), boundary, cfg) == OVERLOAD
    lo, hi = inst(2, used=375), inst(3, used=2250)
    r = short(tokens=200)
    assert estimate_load(r, lo, cfg) < estimate_load(r, hi, cfg)


def test_reserved_instances_skip_short_requests():
    s = sched()
    instances = [inst(0, reserved=True), inst(1, reserved=True), inst(2)]
    out = s.schedule_request(short(), instances)
    assert out == Placement("i2")


def test_reserved_instances_accept_long_requests_via_scale_up():
    s = sched()
    instances = [inst(k, reserved=k < 4) for k in range(8)]
    out = s.schedule_request(long_req(), instances)
    assert isinstance(out, ScaleUpDecision)


def test_rr_cycles_in_id_order():
    s = sched("rr")
    instances = [inst(k) for k in range(3)]
    seq = [s.schedule_request(short(f"s{n}"), instances).instance_id
           for n in range(6)]
    assert seq == ["i0", "i1", "i2", "i0", "i1", "i2"]


def test_llf_picks_least_current_load():
    s = sched("llf")
    out = s.schedule_request(short(), [inst(0, used=3375), inst(1, used=375)])
    assert out == Placement("i1")


def test_rr_scale_up_when_chosen_cannot_fit():
    s = sched("rr")
    instances = [inst(k) for k in range(4)]
    out = s.schedule_request(long_req(), instances)
    assert isinstance(out, ScaleUpDecision)


def test_scale_down_requires_tp_above_one():
    s = sched()
    assert s.schedule_parallelism(inst(0), [inst(0)], False) is None


def test_scale_down_on_low_load():
    s = sched()
    tp4 = inst(0, tp=4, used=3000, active=["a", "b"])
    out = s.schedule_parallelism(tp4, [tp4], False,
                                 request_tokens={"a": 1500, "b": 1500})
    assert out == ScaleDownDecision("i0", 1)


def test_scale_down_blocked_by_long_request():
    s = sched()
    tp4 = inst(0, tp=4, used=3000, active=["l"])
    assert s.schedule_parallelism(tp4, [tp4], True) is None


def test_scale_down_blocked_by_unsplittable_fragment():
    s = sched()
    tp4 = inst(0, tp=4, used=5000, active=["a"])
    out = s.schedule_parallelism(tp4, [tp4], False,
                                 request_tokens={"a": 5000})
    assert out is None  # the single request exceeds TP1 capacity


def test_scale_down_blocked_by_load_above_threshold():
    s = sched()
    tp4 = inst(0, tp=4, used=30_000, active=["a"])
    assert s.schedule_parallelism(tp4, [tp4], False,
                                  request_tokens={"a": 30_000}) is None


def test_update_reserve_marks_cheapest_group():
    s = sched()
    instances = [inst(k, used=100 * k) for k in range(8)]
    s.last_long_arrival = 100.0
    s.update_reserve(instances, now=110.0)
    reserved = {i.id for i in instances if i.reserved_for_transform}
    assert reserved == {"i0", "i1", "i2", "i3"}
    # cool-down expiry clears reservations
    s.update_reserve(instances, now=200.0)
    assert not any(i.reserved_for_transform for i in instances)


def test_update_reserve_skipped_when_tp4_has_headroom():
    s = sched()
    instances = [inst(k) for k in range(4)] + [inst(9, tp=4, used=10_000)]
    s.last_long_arrival = 0.0
    s.update_reserve(instances, now=10.0)
    assert not any(i.reserved_for_transform for i in instances)


def test_determinism_same_inputs_same_decisions():
    for policy in ("gyges", "rr", "llf"):
        outs = []
        for _ in range(2):
            s = sched(policy)
            instances = [inst(k) for k in range(4)]
            outs.append([s.schedule_request(short(f"r{n}"), instances)
                         for n in range(10)])
        assert outs[0] == outs[1]
