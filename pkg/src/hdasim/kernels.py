"""Latency models for the three engines.

* weight-stationary systolic array (GEMM), tile-by-tile with double-buffered
  weight prefetch;
* MAC tree (GEMV / dot products) fed straight from DRAM, whose achievable
  bandwidth follows a logarithmic utilization curve of the streamed workload;
* vector unit, checked rather than timed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

from .archspec import HardwareConfig
from .workload import OperatorGraph, OpKind

DATA_DIR = Path(__file__).parent / "data"

COMPUTE_BOUND = "compute"
PREFETCH_BOUND = "prefetch"


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class BandwidthCurve:
    """u(w) = min(u_max, a + b*ln(w)) for w >= w_floor, u_min below it."""

    a: float
    b: float
    u_max: float = 0.90
    u_min: float = 0.2
    w_floor: float = 0.0
    note: str = ""

    def __post_init__(self):
        if not 0 < self.u_min <= self.u_max <= 1:
            raise KernelError(f"need 0 < u_min <= u_max <= 1 (got {self.u_min}, {self.u_max})")
        if self.b < 0:
            raise KernelError("curve slope b must be >= 0 for a monotone fit")

    def utilization(self, workload_flops: float) -> float:
        if workload_flops <= 0 or workload_flops < self.w_floor:
            return self.u_min
        u = self.a + self.b * math.log(workload_flops)
        return min(self.u_max, max(self.u_min, u))

    @classmethod
    def fit(cls, small: tuple, large: tuple, u_max=0.90, u_min=0.2, note="") -> "BandwidthCurve":
        """Fit the log curve through two (workload_flops, utilization) anchors."""
        (w1, u1), (w2, u2) = small, large
        if not 0 < w1 < w2:
            raise KernelError("anchors must satisfy 0 < w_small < w_large")
        b = (u2 - u1) / math.log(w2 / w1)
        a = u1 - b * math.log(w1)
        w_floor = math.exp((u_min - a) / b) if b > 0 else 0.0
        return cls(a=a, b=b, u_max=u_max, u_min=u_min, w_floor=w_floor, note=note)

    @classmethod
    def flat(cls, u: float) -> "BandwidthCurve":
        return cls(a=u, b=0.0, u_max=u, u_min=u, note="constant utilization")

    @classmethod
    def load(cls, path) -> "BandwidthCurve":
        return cls(**json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def default_curve() -> BandwidthCurve:
    return BandwidthCurve.load(DATA_DIR / "mt_bandwidth_curve.json")


@dataclass(frozen=True)
class SaResult:
    cycles: float
    bound: str
    tiles: int
    stream_cycles: int
    load_cycles: float
    utilization: float


def _load_cycles(rows, cols, dtype_bytes, freq_hz, prefetch_bw):
    if prefetch_bw <= 0:
        raise KernelError("prefetch bandwidth must be > 0")
    if math.isinf(prefetch_bw):
        return 0.0
    return rows * cols * dtype_bytes * freq_hz / prefetch_bw


def sa_gemm_cycles(cfg: HardwareConfig, m: int, k: int, n: int, prefetch_bw: float,
                   dtype_bytes: int = 2, cores: int = 1) -> SaResult:
    """Cycles for an (m x k) @ (k x n) GEMM on weight-stationary arrays.

    Weight tiles of ``sa_rows x sa_cols`` are spread over ``cores`` arrays, each
    prefetching from ``prefetch_bw / cores``.  A tile streams for
    ``m + rows + cols - 2`` cycles; the next tile's weights load in the
    background, so a tile costs ``max(stream, load)`` and only the first load is
    exposed.
    """
    if not cfg.has_sa:
        raise KernelError("configuration has no systolic array")
    if min(m, k, n) < 1:
        raise KernelError("GEMM dims must be >= 1")
    rows, cols = cfg.sa_rows, cfg.sa_cols
    tiles = math.ceil(k / rows) * math.ceil(n / cols)
    per_core = math.ceil(tiles / cores)
    stream = m + rows + cols - 2
    load = _load_cycles(rows, cols, dtype_bytes, cfg.freq_hz, prefetch_bw / cores)
    cycles = per_core * max(stream, load) + load
    bound = PREFETCH_BOUND if load > stream else COMPUTE_BOUND
    util = m * k * n / (cycles * rows * cols * cores)
    return SaResult(cycles=cycles, bound=bound, tiles=tiles, stream_cycles=stream,
                    load_cycles=load, utilization=util)


def sa_prefetch_bw_to_hide(cfg: HardwareConfig, m: int, dtype_bytes: int = 2) -> float:
    """Per-array weight bandwidth that keeps prefetch behind an m-row stream."""
    stream = m + cfg.sa_rows + cfg.sa_cols - 2
    return cfg.sa_rows * cfg.sa_cols * dtype_bytes * cfg.freq_hz / stream


def mt_effective_bandwidth(curve: BandwidthCurve, dram_bw: float, workload_flops: float) -> float:
    if workload_flops < 0:
        raise KernelError("workload must be >= 0")
    return curve.utilization(workload_flops) * dram_bw


def mt_gemv_latency(cfg: HardwareConfig, curve: BandwidthCurve, k: int, n: int, reuse: int = 1,
                    weight_source: str = "dram", *, m: int = 1, dtype_bytes: int = 2,
                    workload_flops: float | None = None, bw_share: float = 1.0,
                    core_share: float = 1.0) -> float:
    """Seconds for the MAC trees to consume a ``k x n`` operand for ``m`` rows.

    ``reuse`` consumers share each streamed element, so only ``k*n/reuse``
    elements come from the source.  DRAM-sourced data is limited by the curve's
    effective bandwidth (looked up at ``workload_flops``, default this op's own
    FLOPs); on-chip global memory is never the bottleneck.
    """
    if not cfg.has_mt:
        raise KernelError("configuration has no MAC tree")
    if reuse < 1:
        raise KernelError("reuse must be >= 1")
    nbytes = k * n * dtype_bytes / reuse
    macs = m * k * n
    return mt_latency(cfg, curve, macs, nbytes, weight_source, workload_flops=workload_flops,
                      bw_share=bw_share, core_share=core_share)


def mt_latency(cfg, curve, macs, nbytes, weight_source="dram", *, workload_flops=None,
               bw_share=1.0, core_share=1.0) -> float:
    if weight_source == "dram" and nbytes > cfg.dram_cap:
        raise KernelError(f"operand of {nbytes:.3g} B exceeds DRAM capacity {cfg.dram_cap:.3g} B")
    mac_time = macs / (cfg.mt_macs * core_share * cfg.freq_hz)
    if weight_source != "dram" or nbytes == 0:
        return mac_time
    w = 2 * macs if workload_flops is None else workload_flops
    bw = mt_effective_bandwidth(curve, cfg.dram_bw, w) * bw_share
    return max(nbytes / bw, mac_time)


def mt_crossover_rows(cfg: HardwareConfig, curve: BandwidthCurve, dtype_bytes: int,
                      workload_flops: float) -> float:
    """Row count at which a DRAM-streamed GEMV on the MAC trees turns MAC-bound."""
    bw = mt_effective_bandwidth(curve, cfg.dram_bw, workload_flops)
    return cfg.mt_macs * cfg.freq_hz * dtype_bytes / bw


@dataclass(frozen=True)
class VectorCheck:
    ok: bool
    fraction: float
    threshold: float


def vector_unit_check(graph: OperatorGraph, cfg: HardwareConfig | None = None,
                      threshold: float = 0.05) -> VectorCheck:
    """Vector work is assumed hidden under matmul latency unless its FLOP share is large."""
    total = graph.flops
    vec = sum(op.flops for op in graph.ops if op.kind == OpKind.VECTOR)
    frac = vec / total if total else 0.0
    return VectorCheck(ok=frac <= threshold, fraction=frac, threshold=threshold)
