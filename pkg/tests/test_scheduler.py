import pytest
from hypothesis import given, settings, strategies as st

from hdasim.archspec import HardwareConfig, with_fields
from hdasim.kernels import default_curve
from hdasim.scheduler import (LATENCY, THROUGHPUT, Assignment, BatchState, ScheduleError,
                              StepPlan, gemm_split_ratio, plan_step, split_times, step_latency)
from hdasim.workload import OpKind, kv_cache_bytes, lower_to_ops, streamed_weight_bytes


def decode_step(spec, cfg, ctx):
    g = lower_to_ops(spec, "decode", len(ctx), ctx)
    plan = plan_step(BatchState([(i, c) for i, c in enumerate(ctx)]), cfg, g, None)
    return plan, step_latency(plan, cfg)


def test_split_ratio(ref_cfg):
    assert gemm_split_ratio(ref_cfg) == pytest.approx(256 / (4096 + 256))
    assert gemm_split_ratio(HardwareConfig(sa_rows=0, sa_cols=0)) == 1.0
    assert gemm_split_ratio(HardwareConfig(mt_width=0, mt_lanes=0)) == 0.0
    with pytest.raises(ScheduleError):
        gemm_split_ratio(HardwareConfig(sa_rows=0, sa_cols=0, mt_width=0, mt_lanes=0))


def test_batch_state_validation():
    with pytest.raises(ScheduleError):
        BatchState([(1, 10)], prefill_req=(1, 0, 10))
    with pytest.raises(ScheduleError):
        BatchState([], prefill_req=(2, 0, 600), chunk_size=512)
    assert BatchState([(1, 3), (2, 4)], prefill_req=(3, 0, 100)).tokens_in_flight == 102


def test_decode_matches_streaming_oracle(llama8b, ref_cfg):
    # batch 1: every weight and the KV cache cross DRAM once at the 90% ceiling
    plan, lat = decode_step(llama8b, ref_cfg, [128])
    assert plan.mode == LATENCY and plan.dram_owner == "mt_exclusive"
    assert not plan.split_assignments and not plan.sa_assignments
    layer = 4096 * 6144 + 4096 * 4096 + 4096 * 2 * 14336 + 14336 * 4096
    nbytes = 2 * (32 * layer + 4096 * 128256) + kv_cache_bytes(llama8b, 1, 129)
    # norm weights are the only other streamed parameters
    assert streamed_weight_bytes(llama8b) - (nbytes - kv_cache_bytes(llama8b, 1, 129)) == 65 * 8192
    assert lat.dram_bytes == pytest.approx(nbytes, rel=1e-6)
    assert lat.seconds == pytest.approx(nbytes / (0.9 * ref_cfg.dram_bw), rel=0.01)
    assert lat.seconds == pytest.approx(8.35e-3, rel=0.01)


def test_batching_amortizes_weights(llama8b, ref_cfg):
    _, one = decode_step(llama8b, ref_cfg, [128])
    _, many = decode_step(llama8b, ref_cfg, [128] * 16)
    assert many.seconds < 1.1 * one.seconds
    assert many.seconds / 16 < one.seconds / 10


def test_tbt_monotone_in_batch(llama8b, ref_cfg):
    times = [decode_step(llama8b, ref_cfg, [128] * b)[1].seconds for b in range(16, 151, 2)]
    assert all(a <= b for a, b in zip(times, times[1:]))
    assert times[0] == pytest.approx(8.55e-3, rel=0.02)
    assert times[-1] == pytest.approx(11.40e-3, rel=0.02)


@pytest.mark.parametrize("m", [2048, 4096, 8192])
def test_split_balances_engines(llama8b, ref_cfg, m):
    g = lower_to_ops(llama8b, "prefill", 1, [m])
    for op in g.ops:
        if op.is_matmul:
            t_sa, t_mt = split_times(Assignment(op, "split", "dram"), ref_cfg, default_curve(),
                                     gemm_split_ratio(ref_cfg))
            assert 0.8 < t_sa / t_mt < 1.25


def test_pure_prefill_is_throughput_mode(llama8b, ref_cfg):
    g = lower_to_ops(llama8b, "prefill", 1, [512])
    plan = plan_step(BatchState([], prefill_req=(0, 0, 512)), ref_cfg, None, g)
    assert plan.mode == THROUGHPUT and not plan.deferred
    lat = step_latency(plan, ref_cfg)
    assert lat.seconds == pytest.approx(21.8e-3, rel=0.02)


def test_mixed_step_defers_dram_prefill(llama8b, ref_cfg):
    gd = lower_to_ops(llama8b, "decode", 4, [100] * 4)
    gp = lower_to_ops(llama8b, "prefill", 1, [256])
    state = BatchState([(i, 100) for i in range(4)], prefill_req=(9, 0, 256))
    plan = plan_step(state, ref_cfg, gd, gp)
    assert plan.mode == LATENCY
    # resident attention overlaps decode; projections wait for DRAM
    assert plan.sa_assignments and all(a.source == "global_mem" for a in plan.sa_assignments)
    assert {a.op.name for a in plan.deferred} == {"qkv", "o_proj", "ffn_up", "ffn_down"}
    lat = step_latency(plan, ref_cfg)
    assert lat.decode_done_s == pytest.approx(lat.seconds - lat.phases["deferred"])
    _, alone = decode_step(llama8b, ref_cfg, [100] * 4)
    assert lat.decode_done_s >= alone.seconds


def test_concurrent_phase_is_max(llama8b, ref_cfg):
    gd = lower_to_ops(llama8b, "decode", 2, [50, 60])
    gp = lower_to_ops(llama8b, "prefill", 1, [128])
    plan = plan_step(BatchState([(0, 50), (1, 60)], prefill_req=(2, 0, 128)), ref_cfg, gd, gp)
    only_mt = StepPlan(plan.mode, plan.mt_assignments, [], plan.gemm_split, plan.dram_owner)
    only_sa = StepPlan(plan.mode, [], plan.sa_assignments, plan.gemm_split, plan.dram_owner)
    a = step_latency(only_mt, ref_cfg).phases["concurrent"]
    b = step_latency(only_sa, ref_cfg).phases["concurrent"]
    assert step_latency(plan, ref_cfg).phases["concurrent"] == pytest.approx(max(a, b))


def test_empty_plan_costs_nothing(ref_cfg):
    lat = step_latency(StepPlan(LATENCY, [], [], 0.0, "mt_exclusive"), ref_cfg)
    assert (lat.seconds, lat.mt_busy, lat.sa_busy, lat.dram_bytes) == (0, 0, 0, 0)
    with pytest.raises(ScheduleError):
        plan_step(BatchState(), ref_cfg, None, None)


def test_mt_only_and_sa_only(llama8b):
    mt_only = HardwareConfig(sa_rows=0, sa_cols=0, mt_width=64, mt_lanes=64)
    plan, lat = decode_step(llama8b, mt_only, [64])
    assert not plan.sa_assignments and lat.sa_busy == 0
    sa_only = HardwareConfig(mt_width=0, mt_lanes=0)
    plan, lat = decode_step(llama8b, sa_only, [64])
    assert plan.mode == THROUGHPUT and lat.mt_busy == 0 and lat.seconds > 0


@settings(max_examples=40, deadline=None)
@given(ctx=st.lists(st.integers(1, 4000), min_size=0, max_size=8),
       chunk=st.one_of(st.none(), st.tuples(st.integers(0, 2048), st.integers(1, 512))),
       frac=st.floats(0, 1))
def test_plan_invariants(llama8b, ref_cfg, ctx, chunk, frac):
    if not ctx and chunk is None:
        return
    gd = lower_to_ops(llama8b, "decode", len(ctx), ctx) if ctx else None
    gp = None
    state = BatchState([(i, c) for i, c in enumerate(ctx)])
    if chunk is not None:
        start, length = chunk
        gp = lower_to_ops(llama8b, "prefill", 1, [length], [start])
        state = BatchState(state.decode_reqs, prefill_req=(99, start, length),
                           chunk_resident_fraction=frac)
    plan = plan_step(state, ref_cfg, gd, gp)
    # every non-vector op is placed, and weights are fully covered
    placed = plan.mt_assignments + plan.sa_assignments + plan.split_assignments + plan.deferred
    for g in (gd, gp):
        if g is None:
            continue
        for op in g.ops:
            if op.kind == OpKind.VECTOR:
                continue
            cover = sum(a.fraction for a in placed if a.op is op)
            assert cover == pytest.approx(1.0)
    if gd is not None:
        # SA never touches DRAM while the trees own it
        if plan.mode == LATENCY:
            assert plan.sa_dram_bytes() == 0
    lat = step_latency(plan, ref_cfg)
    assert lat.mt_busy <= lat.seconds + 1e-12
    assert lat.sa_busy <= lat.seconds + 1e-12
    assert lat.dram_bytes <= lat.seconds * ref_cfg.dram_bw * 1.0001
    assert 0 <= lat.decode_done_s <= lat.seconds


def test_multi_device_adds_sync(llama70b):
    cfg = HardwareConfig(device_count=8, p2p_bw=64e9)
    _, lat = decode_step(llama70b, cfg, [1024] * 16)
    assert lat.sync_s > 0
    one = with_fields(cfg, device_count=1, p2p_bw=0)
    g = lower_to_ops(llama70b, "decode", 1, [10])
    plan = plan_step(BatchState([(0, 10)]), one, g, None)
    assert plan.syncs == []
