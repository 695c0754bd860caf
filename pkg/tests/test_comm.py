import pytest
from hypothesis import given, settings, strategies as st

from hdasim.comm import (CommError, SyncPlan, min_link_bw_for_overlap, overlapped_latency,
                         pp_partition, sync_point_latency, sync_traffic, tp_partition)
from hdasim.workload import OpKind, lower_to_ops

KB = 1024


@pytest.mark.parametrize("method", ["all_gather", "all_reduce"])
def test_single_device_sends_nothing(method):
    assert sync_traffic(SyncPlan(method, 1, 16 * KB)) == 0


def test_all_gather_traffic_bounded_by_payload():
    for n in range(2, 17):
        b = sync_traffic(SyncPlan("all_gather", n, 16 * KB))
        assert b == pytest.approx(16 * KB * (n - 1) / n)
        assert b <= 16 * KB


def test_all_reduce_traffic_grows_linearly():
    assert sync_traffic(SyncPlan("all_reduce", 8, 16 * KB)) == 112 * KB
    assert sync_traffic(SyncPlan("all_reduce", 16, 16 * KB)) == 240 * KB
    vals = [sync_traffic(SyncPlan("all_reduce", n, 16 * KB)) for n in range(2, 17)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_megatron_block_needs_two_points():
    with pytest.raises(CommError):
        SyncPlan("megatron", 2, 100, sync_points_per_layer=1)
    p = SyncPlan("megatron", 4, 100, sync_points_per_layer=2)
    assert sync_traffic(p) == pytest.approx(75 + 300)


def test_bad_plans():
    with pytest.raises(CommError):
        SyncPlan("ring", 2, 1)
    with pytest.raises(CommError):
        SyncPlan("all_gather", 0, 1)
    with pytest.raises(CommError):
        overlapped_latency(1.0, 1.0, 0.0)


def test_overlapped_latency_examples():
    assert overlapped_latency(1e-4, 0.0, 1e9) == 1e-4
    # link moves 40 us worth of bytes; the last 1/16 chunk is exposed
    assert overlapped_latency(100e-6, 40e3, 1e9) == pytest.approx(102.5e-6)
    assert overlapped_latency(10e-6, 40e3, 1e9) == pytest.approx(42.5e-6)


@settings(max_examples=200, deadline=None)
@given(c=st.floats(0, 1), b=st.floats(0, 1e9), bw=st.floats(1e6, 1e12))
def test_overlapped_latency_bounds(c, b, bw):
    t = overlapped_latency(c, b, bw)
    assert t >= max(c, b / bw) - 1e-15
    assert t <= c + b / bw + 1e-12


def test_min_link_bw_closed_form():
    # max(c, x) + x/16 <= 1.02 c  with x = bytes/bw  gives  bw >= bytes / (0.32 c)
    bw = min_link_bw_for_overlap(1e-3, 1e6)
    assert bw == pytest.approx(1e6 / (0.32 * 1e-3), rel=0.01)
    assert bw >= 1e6 / (0.32 * 1e-3)
    assert min_link_bw_for_overlap(1e-3, 0) == 0
    with pytest.raises(CommError):
        min_link_bw_for_overlap(0, 1)


def test_halving_compute_doubles_bandwidth():
    a = min_link_bw_for_overlap(2e-3, 1e6)
    b = min_link_bw_for_overlap(1e-3, 1e6)
    assert b / a == pytest.approx(2, rel=0.02)


@settings(max_examples=60, deadline=None)
@given(c1=st.floats(1e-6, 1), c2=st.floats(1e-6, 1), b=st.floats(1, 1e9))
def test_min_link_bw_monotone_in_compute(c1, c2, b):
    lo, hi = sorted((c1, c2))
    assert min_link_bw_for_overlap(hi, b) <= min_link_bw_for_overlap(lo, b) * 1.02


def test_sync_point_latency():
    g = SyncPlan("all_gather", 4, 4096)
    assert sync_point_latency(SyncPlan("all_gather", 1, 4096), 1e-3, 1e9) == 0
    # hidden behind compute: only the fixed latency and the tail remain
    t = sync_point_latency(g, 1e-3, 1e9, sync_latency_s=3e-6)
    assert t == pytest.approx(3e-6 + 3072 / 1e9 / 16)
    r = SyncPlan("all_reduce", 4, 4096)
    assert sync_point_latency(r, 1e-3, 1e9, sync_latency_s=0) == pytest.approx(3 * 4096 / 1e9)


def test_tp_partition_identity(llama8b):
    g = lower_to_ops(llama8b, "decode", 1, [128])
    part = tp_partition(g, 1)
    assert part.graph is g and part.syncs == []


def test_tp_partition_shards_columns(llama8b):
    g = lower_to_ops(llama8b, "decode", 1, [128])
    part = tp_partition(g, 4, "all_gather")
    by = {o.name: o for o in part.graph.ops}
    assert (by["o_proj"].k, by["o_proj"].n) == (4096, 1024)
    assert by["qkv"].n == 6144 // 4
    after = {s.after: s for s in part.syncs}
    assert after["o_proj"].payload_bytes == 4096 * 2
    assert all(s.kind == "gather" for s in part.syncs)


def test_megatron_partition_has_two_sync_points(llama8b):
    g = lower_to_ops(llama8b, "decode", 2, [128, 64])
    part = tp_partition(g, 2, "megatron")
    assert len(part.syncs) == 2
    assert {s.kind for s in part.syncs} == {"gather", "reduce"}
    by = {o.name: o for o in part.graph.ops}
    assert by["o_proj"].k == 2048 and by["ffn_up"].n == g.ops[[o.name for o in g.ops].index("ffn_up")].n // 2


@settings(max_examples=40, deadline=None)
@given(devices=st.integers(1, 16), method=st.sampled_from(["all_gather", "all_reduce", "megatron"]),
       batch=st.integers(1, 4))
def test_tp_partition_conserves_work(llama8b, devices, method, batch):
    g = lower_to_ops(llama8b, "decode", batch, [100] * batch)
    part = tp_partition(g, devices, method)
    orig = sum(o.flops for o in g.ops if o.kind != OpKind.VECTOR)
    new = sum(o.flops for o in part.graph.ops if o.kind != OpKind.VECTOR) * devices
    assert new == pytest.approx(orig * (1 + part.padding_waste))
    assert part.padding_waste >= 0
    w0 = sum(o.weight_bytes for o in g.ops)
    w1 = sum(o.weight_bytes for o in part.graph.ops) * devices
    assert w1 >= w0


def test_pp_partition(llama8b):
    g = lower_to_ops(llama8b, "decode", 1, [10])
    stages = pp_partition(g, 3)
    per_stage = [next(o.repeat for o in s.ops if o.name == "qkv") for s in stages]
    assert per_stage == [11, 11, 10]
    assert sum(s.flops for s in stages) == g.flops
    assert any(o.name == "lm_head" for o in stages[-1].ops)
    with pytest.raises(CommError):
        pp_partition(g, 33)
