import json
import math
import warnings
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from hdasim.archspec import HardwareConfig, die_area, reference_design, with_fields
from hdasim.kernels import sa_prefetch_bw_to_hide
from hdasim.search import (CORE_COUNTS, SearchConstraints, SearchError, allocate_compute_units,
                           decode_p2p_requirement, derive_interconnect, evaluate_and_iterate,
                           mt_macs_required, mt_shape, prefill_score, reuse_factor)
from hdasim.servesim import SloSpec
from hdasim.workload import load_model_spec

A100 = dict(area_budget_mm2=826, dram_bw=2e12, dram_cap=80e9, sram_budget_bytes=80 * 2**20)
ROWS = [(200, 40)]


def constraints(**kw):
    d = dict(A100, sim_duration_s=10.0)
    d.update(kw)
    return SearchConstraints(**d)


def mha_spec():
    return load_model_spec({"name": "mha", "num_layers": 2, "hidden": 1024, "num_heads": 8,
                            "num_kv_heads": 8, "ffn_dim": 2048, "vocab": 1000, "max_seq": 2048})


def test_reuse_and_mt_allocation(llama8b):
    c = constraints()
    # 4 query heads per KV head, 3 requests share a streamed prefix
    assert reuse_factor(llama8b, c) == 12
    assert mt_macs_required(c, llama8b) == 8000
    assert mt_shape(8000, 32) == (16, 16)
    assert 16 * 16 * 32 == 8192


def test_minimum_mt_macs_without_reuse():
    c = constraints(batch_max=1)
    assert reuse_factor(mha_spec(), c) == 1
    # 2 TB/s / (1.5 GHz x 2 B)
    assert mt_macs_required(c, mha_spec()) == 667


@settings(max_examples=100, deadline=None)
@given(bw=st.floats(1e11, 1e13), freq=st.floats(5e8, 3e9), batch=st.integers(1, 256))
def test_mt_macs_drain_dram(llama8b, bw, freq, batch):
    c = constraints(dram_bw=bw, freq_hz=freq, batch_max=batch)
    macs = mt_macs_required(c, llama8b)
    assert macs * freq * 2 >= bw * reuse_factor(llama8b, c) * (1 - 1e-12)
    for cores in CORE_COUNTS:
        lanes, width = mt_shape(macs, cores)
        assert lanes * width * cores >= macs
        assert lanes <= width


def test_candidates_fit_and_are_ranked(llama8b):
    c = constraints()
    cands = allocate_compute_units(c, llama8b)
    assert cands
    assert all(die_area(x) <= c.area_budget_mm2 for x in cands)
    assert all(x.sa_rows % 32 == 0 and x.sa_cols % 32 == 0 for x in cands)

    def geo(cfg):
        s = prefill_score(cfg, llama8b, c.chunk_size)
        return math.exp(sum(map(math.log, s)) / len(s))

    scores = [geo(x) for x in cands]
    assert scores[0] == min(scores)
    best = cands[0]
    assert (best.sa_rows, best.sa_cols, best.core_count) == (96, 96, 32)
    assert (best.mt_lanes, best.mt_width) == (16, 16)
    assert best.local_mem_bytes == 2 * 2**20 and best.global_mem_bytes == 16 * 2**20


def test_more_area_never_hurts_best_candidate(llama8b):
    def best(area):
        c = constraints(area_budget_mm2=area)
        x = allocate_compute_units(c, llama8b)[0]
        s = prefill_score(x, llama8b, c.chunk_size)
        return math.exp(sum(map(math.log, s)) / len(s))

    vals = [best(a) for a in (500, 650, 826, 1000)]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(vals, vals[1:]))


def test_tight_budget_falls_back_to_mac_trees(llama8b):
    c = constraints(area_budget_mm2=270)
    with pytest.warns(UserWarning, match="MAC-tree-only"):
        cands = allocate_compute_units(c, llama8b)
    assert all(not x.has_sa for x in cands)


def test_budget_below_minimum(llama8b):
    with pytest.raises(SearchError, match="below"):
        allocate_compute_units(constraints(area_budget_mm2=250), llama8b)


def test_constraint_validation(tmp_path):
    with pytest.raises(SearchError):
        constraints(max_iterations=0)
    with pytest.raises(SearchError, match="unknown"):
        SearchConstraints.from_dict(dict(A100, bogus=1))
    with pytest.raises(SearchError, match="missing"):
        SearchConstraints.from_dict({"dram_bw": 1})
    p = tmp_path / "c.json"
    p.write_text("{\n  \"dram_bw\": ,\n}")
    with pytest.raises(SearchError, match="line 2"):
        SearchConstraints.load(p)
    c = constraints(slo=SloSpec.unbounded())
    assert SearchConstraints.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_interconnect_single_device(llama8b):
    c = constraints()
    res = derive_interconnect(allocate_compute_units(c, llama8b)[0], llama8b, c)
    assert res.p2p == 0 and res.config.p2p_bw == 0
    assert res.config.noc_bw == max(math.ceil(res.noc_gemv / 1e9), math.ceil(res.noc_prefetch / 1e9)) * 1e9
    assert res.noc_feasible


def test_noc_ceiling_flag(llama8b):
    c = constraints(noc_ceiling=1e9)
    res = derive_interconnect(allocate_compute_units(c, llama8b)[0], llama8b, c)
    assert not res.noc_feasible


def test_prefetch_requirement_falls_with_longer_streams():
    cfg = reference_design()
    vals = [sa_prefetch_bw_to_hide(cfg, m) for m in (128, 256, 512, 1024, 2048)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    big = with_fields(cfg, sa_rows=128, sa_cols=128)
    assert sa_prefetch_bw_to_hide(big, 512) >= sa_prefetch_bw_to_hide(cfg, 512)


def test_p2p_for_70b_on_eight_devices(llama70b):
    cfg = with_fields(reference_design(), device_count=8, tp_method="all_gather")
    bw = decode_p2p_requirement(cfg, llama70b, 16, 1024)
    assert 16e9 <= bw <= 64e9
    assert bw == pytest.approx(36.2e9, rel=0.02)
    assert decode_p2p_requirement(reference_design(), llama70b, 16, 1024) == 0


def test_trivial_constraints_converge_in_one_iteration(llama8b):
    c = constraints(slo=SloSpec(5.0, 1.0))
    cands = allocate_compute_units(c, llama8b)[:3]
    res = evaluate_and_iterate(cands, c, llama8b, ROWS)
    assert len(res.iterations) == 1
    assert res.met_user and res.met_vendor and res.deficit is None
    assert res.max_rate > 0 and res.report is not None


def test_user_failure_grows_mac_trees(llama8b):
    c = constraints(slo=SloSpec(5.0, 1e-4), max_iterations=2)
    cands = allocate_compute_units(c, llama8b)[:1]
    res = evaluate_and_iterate(cands, c, llama8b, ROWS)
    assert not res.met_user and not res.met_vendor
    assert res.iterations[0]["action"].startswith("grow MAC tree")
    assert res.config.mt_lanes == 2 * cands[0].mt_lanes or res.deficit.startswith("area")
    assert res.deficit


def test_vendor_deficit_names_bandwidth(llama8b):
    c = constraints(slo=SloSpec(5.0, 1.0), vendor_target_rps=1e4, max_iterations=1)
    res = evaluate_and_iterate(allocate_compute_units(c, llama8b)[:1], c, llama8b, ROWS)
    assert res.met_user and not res.met_vendor
    assert res.deficit.startswith("dram_bw")


def test_empty_candidates(llama8b):
    with pytest.raises(SearchError):
        evaluate_and_iterate([], constraints(), llama8b, ROWS)
