"""Three-step architecture search.

1. allocate MAC-tree MACs from DRAM bandwidth and data reuse, spend the
   remaining area on systolic arrays, size memories, rank candidates;
2. derive NoC and P2P bandwidths that keep communication hidden;
3. simulate serving and iterate: more MAC tree on latency (user) failures,
   bigger systolic arrays on throughput (vendor) failures.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import comm, scheduler
from .archspec import (AreaCostParams, ConfigError, HardwareConfig, default_area_params, die_area,
                       validate_config)
from .kernels import BandwidthCurve, default_curve, sa_gemm_cycles, sa_prefetch_bw_to_hide
from .memmodel import SramSizingError, size_memories
from .servesim import (DEFAULT_TRACE, Policy, QoSReport, SloSpec, StepCostModel, generate_requests,
                       load_trace, max_rate_under_slo, run_simulation)
from .workload import ModelSpec, OpKind, lower_to_ops

MIB = 1024 * 1024
SA_DIMS = (32, 64, 96, 128)
CORE_COUNTS = (8, 16, 32, 64, 128)


class SearchError(ValueError):
    pass


@dataclass(frozen=True)
class SearchConstraints:
    area_budget_mm2: float
    dram_bw: float
    dram_cap: float
    sram_budget_bytes: int
    slo: SloSpec = field(default_factory=SloSpec)
    vendor_target_rps: float | None = None
    vendor_target_tps: float | None = None
    max_iterations: int = 8
    batch_max: int = 32
    freq_hz: float = 1.5e9
    device_count: int = 1
    tp_method: str = "all_gather"
    kv_share_cap: int = 3
    reuse_cap: int = 16
    noc_ceiling: float = 1e12
    reference_context: int = 1024
    sim_duration_s: float = 30.0
    chunk_size: int = scheduler.DEFAULT_CHUNK

    def __post_init__(self):
        p = []
        for name in ("area_budget_mm2", "dram_bw", "dram_cap", "sram_budget_bytes", "freq_hz",
                     "sim_duration_s"):
            if not getattr(self, name) > 0:
                p.append(f"{name} must be > 0")
        if self.max_iterations < 1:
            p.append("max_iterations must be >= 1")
        if self.batch_max < 1 or self.device_count < 1:
            p.append("batch_max and device_count must be >= 1")
        if p:
            raise SearchError("; ".join(p))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slo"] = self.slo.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConstraints":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise SearchError(f"unknown constraint field(s): {', '.join(unknown)}")
        missing = [k for k in ("area_budget_mm2", "dram_bw", "dram_cap", "sram_budget_bytes")
                   if k not in d]
        if missing:
            raise SearchError(f"missing constraint field(s): {', '.join(missing)}")
        if "slo" in d:
            d["slo"] = SloSpec.from_dict(d["slo"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SearchConstraints":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise SearchError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(data)


@dataclass
class SearchResult:
    config: HardwareConfig
    met_user: bool
    met_vendor: bool
    report: QoSReport | None
    deficit: str | None
    iterations: list
    max_rate: float = 0.0
    steps: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "met_user": self.met_user,
                "met_vendor": self.met_vendor, "max_rate_rps": self.max_rate,
                "deficit": self.deficit,
                "report": None if self.report is None else self.report.to_dict(),
                "iterations": self.iterations}


# ---------------------------------------------------------------------------
# step 1


def reuse_factor(spec: ModelSpec, c: SearchConstraints) -> float:
    """How many MACs each streamed element feeds in a decode step.

    GQA/MQA: a KV element serves every query head of its group, and a batch of
    requests sharing a prefix lets a few requests share it too (capped by
    ``kv_share_cap``).  MoE: an expert's weights serve every token routed to it.
    """
    gqa = spec.gqa_group * min(c.batch_max, c.kv_share_cap)
    moe = 1.0
    if spec.moe_experts > 1:
        moe = c.batch_max * spec.moe_active / spec.moe_experts
    return min(max(gqa, moe, 1.0), c.reuse_cap)


def mt_macs_required(c: SearchConstraints, spec: ModelSpec) -> int:
    elems_per_cycle = c.dram_bw / (c.freq_hz * spec.dtype_bytes)
    return math.ceil(elems_per_cycle * reuse_factor(spec, c))


def mt_shape(total_macs: int, cores: int) -> tuple:
    """(lanes, width) per core: a power-of-two product covering the share, width >= lanes."""
    per_core = max(1, math.ceil(total_macs / cores))
    e = math.ceil(math.log2(per_core))
    return 2 ** (e // 2), 2 ** (e - e // 2)


def _base_config(c: SearchConstraints) -> HardwareConfig:
    return HardwareConfig(freq_hz=c.freq_hz, dram_bw=c.dram_bw, dram_cap=c.dram_cap,
                          device_count=c.device_count, tp_method=c.tp_method,
                          p2p_bw=HardwareConfig.p2p_bw if c.device_count > 1 else 0.0)


def representative_gemms(spec: ModelSpec, chunk: int) -> list:
    """Prefill shapes used for ranking: QKV projection, FFN up, LM head."""
    return [(chunk, spec.hidden, spec.qkv_width), (chunk, spec.hidden, spec.ffn_in_width),
            (chunk, spec.hidden, spec.vocab)]


def prefill_score(cfg: HardwareConfig, spec: ModelSpec, chunk: int,
                  curve: BandwidthCurve | None = None) -> list:
    curve = curve or default_curve()
    bw = curve.u_max * cfg.dram_bw
    return [sa_gemm_cycles(cfg, m, k, n, bw, spec.dtype_bytes, cores=cfg.core_count).cycles
            / cfg.freq_hz for m, k, n in representative_gemms(spec, chunk)]


def rank_candidates(cfgs: list, spec: ModelSpec, chunk: int, area_params=None) -> list:
    """Sort by geometric mean of prefill GEMM latency normalized per shape, then area."""
    if not cfgs:
        return []
    scores = np.array([prefill_score(cfg, spec, chunk) if cfg.has_sa else [math.inf] * 3
                       for cfg in cfgs])
    best = np.min(scores, axis=0)
    with np.errstate(invalid="ignore"):
        geo = np.exp(np.mean(np.log(scores / best), axis=1))
    order = sorted(range(len(cfgs)),
                   key=lambda i: (geo[i], die_area(cfgs[i], area_params)))
    return [cfgs[i] for i in order]


def with_memories(cfg: HardwareConfig, spec: ModelSpec, c: SearchConstraints) -> HardwareConfig:
    local, glob = size_memories(spec, cfg, c.batch_max, c.sram_budget_bytes)
    return replace(cfg, local_mem_bytes=local, global_mem_bytes=glob)


def allocate_compute_units(constraints: SearchConstraints, spec: ModelSpec,
                           area_params: AreaCostParams | None = None) -> list:
    """Ranked candidate configurations (memories sized, interconnect not yet derived)."""
    c = constraints
    params = area_params or default_area_params()
    mt_total = mt_macs_required(c, spec)
    base = _base_config(c)
    sa_cands, mt_only = [], []
    for cores in CORE_COUNTS:
        lanes, width = mt_shape(mt_total, cores)
        mt_cfg = replace(base, core_count=cores, mt_lanes=lanes, mt_width=width,
                         sa_rows=0, sa_cols=0)
        try:
            mt_cfg = with_memories(mt_cfg, spec, c)
        except SramSizingError:
            continue
        if die_area(mt_cfg, params) > c.area_budget_mm2:
            continue
        mt_only.append(mt_cfg)
        for rows in SA_DIMS:
            for cols in SA_DIMS:
                cfg = replace(mt_cfg, sa_rows=rows, sa_cols=cols)
                if die_area(cfg, params) <= c.area_budget_mm2:
                    sa_cands.append(validate_config(cfg))
    if sa_cands:
        return rank_candidates(sa_cands, spec, c.chunk_size, params)
    if mt_only:
        warnings.warn("no systolic array fits the area budget after MAC-tree allocation; "
                      "emitting MAC-tree-only candidates", stacklevel=2)
        return sorted(mt_only, key=lambda cfg: die_area(cfg, params))
    raise SearchError(f"area budget {c.area_budget_mm2} mm^2 is below the smallest MAC-tree-only "
                      f"design for {mt_total} MAC-tree MACs")


# ---------------------------------------------------------------------------
# step 2


@dataclass
class InterconnectResult:
    config: HardwareConfig
    noc_gemv: float
    noc_prefetch: float
    p2p: float
    noc_feasible: bool


def noc_gemv_requirement(cfg: HardwareConfig, spec: ModelSpec, batch: int, context: int,
                         curve: BandwidthCurve | None = None) -> float:
    """Per-core NoC bandwidth hiding the all-gather of every MAC-tree GEMV output."""
    if cfg.core_count == 1 or not cfg.has_mt:
        return 0.0
    curve = curve or default_curve()
    g = lower_to_ops(spec, "decode", batch, [context] * batch, merge_attention=True)
    mt_only = replace(cfg, sa_rows=0, sa_cols=0)
    need = 0.0
    workload = sum(op.flops for op in g.ops if op.kind != OpKind.VECTOR)
    for op in g.ops:
        if not op.is_matmul:
            continue
        a = scheduler.Assignment(op, "mt", "dram")
        t = scheduler._mt_time(a, mt_only, curve, workload) / op.repeat
        payload = op.m * op.n * op.dtype_bytes
        traffic = comm.sync_traffic(comm.SyncPlan("all_gather", cfg.core_count, payload))
        need = max(need, comm.min_link_bw_for_overlap(t, traffic))
    return need


def decode_p2p_requirement(cfg: HardwareConfig, spec: ModelSpec, batch: int, context: int,
                           curve: BandwidthCurve | None = None) -> float:
    """Smallest device link bandwidth keeping a decode step's syncs hidden."""
    if cfg.device_count == 1:
        return 0.0
    cost = StepCostModel(spec, cfg, curve)
    plan, lat = cost([context] * batch)
    compute = lat.seconds - lat.sync_s
    traffic = sum(comm.sync_traffic(s) * s.repeat for s in plan.syncs)
    return comm.min_link_bw_for_overlap(compute, traffic)


def derive_interconnect(candidate: HardwareConfig, spec: ModelSpec,
                        constraints: SearchConstraints) -> InterconnectResult:
    c = constraints
    gemv = noc_gemv_requirement(candidate, spec, c.batch_max, c.reference_context)
    prefetch = 0.0
    if candidate.has_sa:
        prefetch = sa_prefetch_bw_to_hide(candidate, c.chunk_size, spec.dtype_bytes)
    noc = max(gemv, prefetch)
    # round up to whole GB/s so configs stay readable
    noc = math.ceil(noc / 1e9) * 1e9 if noc > 0 else 1e9
    p2p = 0.0
    if candidate.device_count > 1:
        probe = replace(candidate, noc_bw=noc, p2p_bw=max(candidate.p2p_bw, 1e9))
        p2p = math.ceil(decode_p2p_requirement(probe, spec, c.batch_max,
                                               c.reference_context) / 1e9) * 1e9
        p2p = max(p2p, 1e9)
    cfg = replace(candidate, noc_bw=noc, p2p_bw=p2p)
    return InterconnectResult(config=cfg, noc_gemv=gemv, noc_prefetch=prefetch, p2p=p2p,
                              noc_feasible=noc <= c.noc_ceiling)


# ---------------------------------------------------------------------------
# step 3


def _summary(cfg):
    return (f"SA {cfg.sa_rows}x{cfg.sa_cols}, MT {cfg.mt_lanes}x{cfg.mt_width}, "
            f"{cfg.core_count} cores, local {cfg.local_mem_bytes // 1024} KiB, "
            f"global {cfg.global_mem_bytes / MIB:.0f} MiB")


def _bandwidth_bound_rate(spec, cfg, c, rows, curve):
    """Requests/s with unlimited compute: decode limited purely by DRAM streaming."""
    mean_in = float(np.mean([i for i, _ in rows]))
    mean_out = float(np.mean([o for _, o in rows]))
    g = lower_to_ops(spec, "decode", c.batch_max,
                     [min(spec.max_seq - 1, int(mean_in + mean_out / 2))] * c.batch_max,
                     merge_attention=True)
    nbytes = sum(op.weight_bytes for op in g.ops) / cfg.device_count
    step = nbytes / (curve.u_max * cfg.dram_bw)
    return c.batch_max / step / mean_out


def _vendor_met(rate, c, mean_tokens):
    ok = True
    if c.vendor_target_rps is not None:
        ok &= rate >= c.vendor_target_rps
    if c.vendor_target_tps is not None:
        ok &= rate * mean_tokens >= c.vendor_target_tps
    return bool(ok)


def _vendor_rps(c, mean_tokens):
    targets = []
    if c.vendor_target_rps is not None:
        targets.append(c.vendor_target_rps)
    if c.vendor_target_tps is not None:
        targets.append(c.vendor_target_tps / mean_tokens)
    return max(targets) if targets else 0.0


def evaluate_and_iterate(candidates: list, constraints: SearchConstraints, spec: ModelSpec,
                         workload=None, seed: int = 0,
                         area_params: AreaCostParams | None = None,
                         curve: BandwidthCurve | None = None) -> SearchResult:
    """Simulate the best candidate and adjust it until both sides are satisfied."""
    if not candidates:
        raise SearchError("no candidates to evaluate")
    c = constraints
    params = area_params or default_area_params()
    curve = curve or default_curve()
    rows = load_trace(workload or DEFAULT_TRACE) \
        if workload is None or isinstance(workload, (str, Path)) else list(workload)
    mean_tokens = float(np.mean([o for _, o in rows]))
    policy = Policy(chunk_size=c.chunk_size)

    # vendor failures climb to candidates with more systolic-array MACs
    pool = sorted(candidates, key=lambda cfg: (cfg.sa_macs, -die_area(cfg, params)))
    current = candidates[0]
    log = []
    rate = None
    met_user = met_vendor = False
    deficit = None
    cfg = current
    for it in range(1, c.max_iterations + 1):
        inter = derive_interconnect(current, spec, c)
        cfg = inter.config
        rate = max_rate_under_slo(spec, cfg, c.slo, rows, seed, c.sim_duration_s, policy,
                                  curve=curve)
        met_user = rate.rate > 0
        met_vendor = met_user and _vendor_met(rate.rate, c, mean_tokens)
        entry = {"iteration": it, "config": _summary(cfg), "area_mm2": die_area(cfg, params),
                 "noc_bw": cfg.noc_bw, "p2p_bw": cfg.p2p_bw, "noc_feasible": inter.noc_feasible,
                 "max_rate_rps": rate.rate, "met_user": met_user, "met_vendor": met_vendor,
                 "violating": rate.violating, "action": "accept"}
        log.append(entry)
        if met_user and met_vendor and inter.noc_feasible:
            break
        nxt = None
        if not met_user:
            grown = replace(current, mt_lanes=current.mt_lanes * 2)
            if die_area(grown, params) <= c.area_budget_mm2:
                nxt, entry["action"] = grown, "grow MAC tree (user SLO missed)"
            else:
                deficit = (f"area: doubling MAC-tree lanes needs {die_area(grown, params):.0f} mm^2 "
                           f"(budget {c.area_budget_mm2:.0f}); SLO violated by {rate.violating}")
        else:
            bigger = [p for p in pool if p.sa_macs > current.sa_macs
                      and die_area(replace(p, mt_lanes=current.mt_lanes, mt_width=current.mt_width),
                                   params) <= c.area_budget_mm2]
            if not inter.noc_feasible:
                entry["action"] = "NoC above ceiling; move to next candidate"
            if bigger:
                p = bigger[0]
                nxt = replace(p, mt_lanes=current.mt_lanes, mt_width=current.mt_width)
                if inter.noc_feasible:
                    entry["action"] = "grow systolic arrays (vendor target missed)"
            else:
                deficit = _vendor_deficit(spec, cfg, c, rows, curve, rate.rate, mean_tokens, params)
        entry["deficit"] = deficit
        if nxt is None:
            if deficit is None:
                deficit = "NoC bandwidth above the feasibility ceiling for every candidate"
            break
        current = nxt
    else:
        if not (met_user and met_vendor):
            deficit = deficit or f"no converged design within {c.max_iterations} iterations"

    if met_user and met_vendor:
        deficit = None
    # report at the vendor's operating point when there is one, else at the achieved rate
    target = _vendor_rps(c, mean_tokens)
    report_rate = target if met_vendor and target > 0 else rate.rate
    report, steps = None, []
    if report_rate > 0:
        reqs = generate_requests(rows, report_rate, c.sim_duration_s, seed, max_seq=spec.max_seq)
        if reqs:
            sim = run_simulation(reqs, spec, cfg, policy, c.slo, curve)
            report, steps = sim.report, sim.steps
    return SearchResult(config=cfg, met_user=met_user, met_vendor=met_vendor, report=report,
                        deficit=deficit, iterations=log, max_rate=rate.rate, steps=steps)


def _vendor_deficit(spec, cfg, c, rows, curve, achieved, mean_tokens, params):
    target = _vendor_rps(c, mean_tokens)
    bw_rate = _bandwidth_bound_rate(spec, cfg, c, rows, curve)
    if target > bw_rate:
        factor = target / bw_rate
        return (f"dram_bw: target {target:.2f} req/s exceeds the bandwidth-bound "
                f"{bw_rate:.2f} req/s; needs about {factor:.2f}x DRAM bandwidth "
                f"({factor * c.dram_bw / 1e12:.2f} TB/s)")
    sa_area = cfg.sa_macs * params.area_per_sa_mac
    extra = sa_area * (target / max(achieved, 1e-9) - 1)
    return (f"area: achieved {achieved:.2f} of {target:.2f} req/s; roughly {extra:.0f} mm^2 more "
            f"systolic-array area needed (budget {c.area_budget_mm2:.0f} mm^2)")


def run_search(constraints: SearchConstraints, spec: ModelSpec, workload=None, seed: int = 0,
               area_params: AreaCostParams | None = None) -> SearchResult:
    cands = allocate_compute_units(constraints, spec, area_params)
    return evaluate_and_iterate(cands, constraints, spec, workload, seed, area_params)


__all__ = ["SearchConstraints", "SearchResult", "SearchError", "allocate_compute_units",
           "derive_interconnect", "evaluate_and_iterate", "run_search", "reuse_factor",
           "mt_macs_required", "mt_shape", "rank_candidates", "decode_p2p_requirement",
           "noc_gemv_requirement", "ConfigError"]
