"""Per-step engine assignment for the heterogeneous (systolic array + MAC tree) chip.

Latency mode
    The MAC trees own all DRAM bandwidth and run the decode GEMVs and attention.
    Concurrently the systolic arrays may only touch work whose operands already
    sit in global memory (prefill attention over resident KV).  Prefill work that
    needs DRAM waits until the decode work of the step is done.
Throughput mode
    GEMMs are split by columns between the arrays and the trees using the
    compile-time ratio of their MAC counts, sharing DRAM bandwidth.

A step therefore runs up to three phases back to back: split GEMMs, the
concurrent MT/SA phase, and the deferred prefill work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import comm
from .archspec import HardwareConfig
from .kernels import BandwidthCurve, default_curve, mt_latency, sa_gemm_cycles
from .workload import OperatorGraph, OpKind

LATENCY = "latency"
THROUGHPUT = "throughput"

DEFAULT_CHUNK = 512
# on-chip gathers between cores have no fixed handshake cost worth modeling
NOC_SYNC_LATENCY_S = 0.0
# a decode projection leaves the MAC trees only when splitting is faster (ties stay on MT)
SPLIT_MARGIN = 1e-6


class ScheduleError(ValueError):
    pass


@dataclass
class BatchState:
    """Work admitted for one step.

    ``decode_reqs`` holds ``(request id, tokens already in the KV cache)``.
    ``prefill_req`` is ``(request id, chunk_start, chunk_len)``.  The two
    residency fields say how much of the prefill request's KV is in global
    memory: bytes of earlier chunks, and the fraction of this chunk that fits.
    """

    decode_reqs: list = field(default_factory=list)
    prefill_req: tuple | None = None
    prefill_past_resident: int = 0
    chunk_resident_fraction: float = 1.0
    chunk_size: int = DEFAULT_CHUNK

    def __post_init__(self):
        if self.prefill_req is not None:
            rid, start, length = self.prefill_req
            if any(r == rid for r, _ in self.decode_reqs):
                raise ScheduleError(f"request {rid} is both decoding and prefilling")
            if not 1 <= length <= self.chunk_size:
                raise ScheduleError(f"chunk of {length} tokens outside [1, {self.chunk_size}]")
            if start < 0:
                raise ScheduleError("chunk_start must be >= 0")

    @property
    def tokens_in_flight(self) -> int:
        n = len(self.decode_reqs)
        if self.prefill_req is not None:
            n += self.prefill_req[2]
        return n


@dataclass
class Assignment:
    op: object
    engine: str  # "mt", "sa" or "split"
    source: str  # "dram", "global_mem" or "none"
    fraction: float = 1.0

    @property
    def dram_bytes(self) -> float:
        if self.source != "dram":
            return 0.0
        return self.op.weight_bytes * self.fraction


@dataclass
class StepPlan:
    mode: str
    mt_assignments: list
    sa_assignments: list
    gemm_split: float
    dram_owner: str
    deferred: list = field(default_factory=list)
    split_assignments: list = field(default_factory=list)
    syncs: list = field(default_factory=list)
    devices: int = 1

    def sa_dram_bytes(self) -> float:
        return sum(a.dram_bytes for a in self.sa_assignments)


@dataclass
class StepLatency:
    seconds: float
    mt_busy: float
    sa_busy: float
    dram_bytes: float
    sync_s: float = 0.0
    phases: dict = field(default_factory=dict)

    @property
    def decode_done_s(self) -> float:
        """Offset at which the step's decode tokens are complete (before deferred prefill)."""
        return self.seconds - self.phases.get("deferred", 0.0)


def gemm_split_ratio(cfg: HardwareConfig) -> float:
    """Share of GEMM columns given to the MAC trees."""
    total = cfg.mt_macs + cfg.sa_macs
    if total == 0:
        raise ScheduleError("configuration has no compute units")
    return cfg.mt_macs / total


def _streaming_flops(graph):
    return sum(op.flops for op in graph.ops if op.kind != OpKind.VECTOR)


def _bulk_bw(cfg, curve):
    # bulk weight streams (SA prefetch, split GEMMs) run at the measured ceiling
    return curve.u_max * cfg.dram_bw


def _mt_time(a: Assignment, cfg, curve, workload):
    op = a.op
    return a.fraction * mt_latency(cfg, curve, op.macs, op.weight_bytes, a.source,
                                   workload_flops=workload)


def _sa_attention_shape(op):
    kv_heads = max(op.heads // op.reuse, 1)
    rows = op.m * op.reuse
    # query heads of a group are stacked as rows; KV heads side by side as columns
    return rows, op.k, op.n * kv_heads


def _sa_time(a: Assignment, cfg, curve):
    op = a.op
    if op.is_attention:
        m, k, n = _sa_attention_shape(op)
    else:
        m, k, n = op.m, op.k, op.n
    bw = math.inf if a.source != "dram" else _bulk_bw(cfg, curve)
    bw = min(bw, cfg.noc_bw * cfg.core_count)
    res = sa_gemm_cycles(cfg, m, k, n, bw, op.dtype_bytes, cores=cfg.core_count)
    return a.fraction * op.repeat * res.cycles / cfg.freq_hz


def split_times(a: Assignment, cfg, curve, split):
    """(SA seconds, MT seconds) for a column-split GEMM."""
    op = a.op
    if not cfg.has_mt:
        split = 0.0
    if not cfg.has_sa:
        split = 1.0
    bulk = _bulk_bw(cfg, curve)
    t_sa = t_mt = 0.0
    n_mt = op.n * split
    n_sa = op.n - n_mt
    if n_sa > 0:
        share = n_sa / op.n
        bw = min(bulk * share, cfg.noc_bw * cfg.core_count)
        res = sa_gemm_cycles(cfg, op.m, op.k, math.ceil(n_sa), bw, op.dtype_bytes,
                             cores=cfg.core_count)
        t_sa = a.fraction * op.repeat * res.cycles / cfg.freq_hz
    if n_mt > 0:
        share = n_mt / op.n
        macs = op.macs * share * a.fraction
        nbytes = op.weight_bytes * share * a.fraction
        t_mt = max(nbytes / (bulk * share), macs / (cfg.mt_macs * cfg.freq_hz))
    return t_sa, t_mt


def plan_step(state: BatchState, cfg: HardwareConfig, graph_decode: OperatorGraph | None,
              graph_prefill: OperatorGraph | None, curve: BandwidthCurve | None = None) -> StepPlan:
    """Assign the step's kernels to engines; see the module docstring for the rules."""
    if graph_decode is None and graph_prefill is None:
        raise ScheduleError("nothing to schedule")
    if not (cfg.has_mt or cfg.has_sa):
        raise ScheduleError("no engine can run matrix operations")
    curve = curve or default_curve()
    split = gemm_split_ratio(cfg)

    syncs = []
    if cfg.device_count > 1:
        if graph_decode is not None:
            part = comm.tp_partition(graph_decode, cfg.device_count, cfg.tp_method)
            graph_decode, syncs = part.graph, syncs + part.syncs
        if graph_prefill is not None:
            part = comm.tp_partition(graph_prefill, cfg.device_count, cfg.tp_method)
            graph_prefill, syncs = part.graph, syncs + part.syncs

    mt, sa, splits, deferred = [], [], [], []
    mixed = graph_decode is not None and graph_prefill is not None

    if graph_decode is not None:
        workload = _streaming_flops(graph_decode)
        for op in graph_decode.ops:
            if op.kind == OpKind.VECTOR:
                continue
            if op.is_attention:
                if cfg.has_mt:
                    mt.append(Assignment(op, "mt", "dram"))
                else:
                    splits.append(Assignment(op, "sa", "dram"))
                continue
            a_mt = Assignment(op, "mt", "dram")
            a_split = Assignment(op, "split", "dram")
            if not cfg.has_sa:
                mt.append(a_mt)
            elif not cfg.has_mt:
                splits.append(a_split)
            else:
                t_mt = _mt_time(a_mt, cfg, curve, workload)
                t_split = max(split_times(a_split, cfg, curve, split))
                if t_split < (1 - SPLIT_MARGIN) * t_mt:
                    splits.append(a_split)
                else:
                    mt.append(a_mt)

    if graph_prefill is not None:
        frac = _prefill_resident_fraction(state, graph_prefill)
        for op in graph_prefill.ops:
            if op.kind == OpKind.VECTOR:
                continue
            if op.is_matmul:
                a = Assignment(op, "split", "dram")
                (deferred if mixed else splits).append(a)
                continue
            engine = "sa" if cfg.has_sa else "mt"
            if frac > 0:
                sa_or_mt = sa if engine == "sa" else mt
                sa_or_mt.append(Assignment(op, engine, "global_mem", frac))
            if frac < 1:
                a = Assignment(op, engine, "dram", 1 - frac)
                if mixed:
                    deferred.append(a)
                elif engine == "sa":
                    sa.append(a)
                else:
                    mt.append(a)
        if mixed and not cfg.has_sa:
            # without arrays the resident attention has to wait for the trees too
            deferred = [a for a in mt if a.op in graph_prefill.ops] + deferred
            mt = [a for a in mt if a.op not in graph_prefill.ops]

    mode = THROUGHPUT if splits or graph_decode is None else LATENCY
    return StepPlan(mode=mode, mt_assignments=mt, sa_assignments=sa, gemm_split=split,
                    dram_owner="mt_exclusive" if mode == LATENCY else "shared",
                    deferred=deferred, split_assignments=splits, syncs=syncs,
                    devices=cfg.device_count)


def _prefill_resident_fraction(state, graph_prefill):
    if state is None or state.prefill_req is None:
        return 1.0
    _, start, length = state.prefill_req
    total = start + length
    if total == 0:
        return 1.0
    # resident share of the request's KV, measured in tokens
    per_tok = _kv_bytes_per_token(graph_prefill)
    past_tokens = min(state.prefill_past_resident / per_tok, start) if per_tok else start
    resident = past_tokens + length * state.chunk_resident_fraction
    return min(1.0, resident / total)


def _kv_bytes_per_token(graph):
    for op in graph.ops:
        if op.kind == OpKind.ATTN_SCORE:
            kv_heads = max(op.heads // op.reuse, 1)
            return 2 * kv_heads * op.k * op.dtype_bytes * op.repeat
    return 0


def step_latency(plan: StepPlan, cfg: HardwareConfig, curves: BandwidthCurve | None = None) -> StepLatency:
    """Wall time of a planned step plus per-engine busy time and DRAM bytes."""
    curve = curves or default_curve()
    empty = not (plan.mt_assignments or plan.sa_assignments or plan.split_assignments
                 or plan.deferred)
    if empty:
        return StepLatency(0.0, 0.0, 0.0, 0.0)

    workload = sum(a.op.flops * a.fraction
                   for a in plan.mt_assignments + plan.split_assignments
                   if a.source == "dram")
    mt_busy = sa_busy = 0.0
    dram = 0.0
    op_time = {}

    def run_split(assignments):
        nonlocal mt_busy, sa_busy, dram
        total = 0.0
        for a in assignments:
            if a.engine == "split":
                t_sa, t_mt = split_times(a, cfg, curve, plan.gemm_split)
            elif a.engine == "sa":
                t_sa, t_mt = _sa_time(a, cfg, curve), 0.0
            else:
                t_sa, t_mt = 0.0, _mt_time(a, cfg, curve, workload)
            t = max(t_sa, t_mt)
            sa_busy += t_sa
            mt_busy += t_mt
            dram += a.dram_bytes
            op_time[a.op.name] = op_time.get(a.op.name, 0.0) + t
            total += t
        return total

    t_split = run_split(plan.split_assignments)

    t_mt = 0.0
    for a in plan.mt_assignments:
        t = _mt_time(a, cfg, curve, workload)
        op_time[a.op.name] = op_time.get(a.op.name, 0.0) + t
        t_mt += t
        dram += a.dram_bytes
    t_sa = 0.0
    for a in plan.sa_assignments:
        t_sa += _sa_time(a, cfg, curve)
        dram += a.dram_bytes
    mt_busy += t_mt
    sa_busy += t_sa
    t_concurrent = max(t_mt, t_sa)

    t_deferred = run_split(plan.deferred)

    noc = _noc_sync(plan, cfg, op_time)
    sync = _p2p_sync(plan, cfg, op_time)
    total = t_split + t_concurrent + t_deferred + noc + sync
    return StepLatency(seconds=total, mt_busy=mt_busy, sa_busy=sa_busy, dram_bytes=dram,
                       sync_s=sync + noc,
                       phases={"split": t_split, "concurrent": t_concurrent,
                               "deferred": t_deferred})


def _noc_sync(plan, cfg, op_time):
    """Exposed on-chip all-gather of MAC-tree GEMV outputs across cores."""
    if cfg.core_count == 1:
        return 0.0
    total = 0.0
    for a in plan.mt_assignments:
        op = a.op
        if not op.is_matmul:
            continue
        payload = op.m * op.n * op.dtype_bytes
        sp = comm.SyncPlan("all_gather", cfg.core_count, payload)
        per_layer = op_time.get(op.name, 0.0) / op.repeat
        total += op.repeat * comm.sync_point_latency(sp, per_layer, cfg.noc_bw,
                                                     NOC_SYNC_LATENCY_S)
    return total


def _p2p_sync(plan, cfg, op_time):
    total = 0.0
    for sp in plan.syncs:
        key = sp.after
        if key == "context":
            t = sum(v for k, v in op_time.items() if k.startswith("context"))
        else:
            t = op_time.get(key, 0.0)
        total += sp.repeat * comm.sync_point_latency(sp, t / sp.repeat, cfg.p2p_bw)
    return total
