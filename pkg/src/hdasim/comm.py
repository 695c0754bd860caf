"""NoC and P2P traffic for tensor-parallel execution.

The same formulas cover cores on one chip (``core_count``, ``noc_bw``) and
devices in a node (``device_count``, ``p2p_bw``).

all_gather
    each participant owns ``1/N`` of the final result and sends it to the others;
    the results are final sums, so transfers pipeline behind the producing op.
all_reduce
    each participant holds a partial sum of the whole output and broadcasts it
    (naive, not ring); nothing can leave before the partial sum is complete.
megatron
    per decoder block, one gather leg after the attention half and one reduce
    leg after the FFN half.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .workload import OperatorGraph, OpKind

METHODS = ("all_gather", "all_reduce", "megatron")

DEFAULT_TAIL_FRACTION = 1 / 16
DEFAULT_OVERLAP_EPS = 0.02
# fixed cost of one synchronization (link latency + handshake)
DEFAULT_SYNC_LATENCY_S = 3e-6


class CommError(ValueError):
    pass


@dataclass(frozen=True)
class SyncPlan:
    method: str
    devices: int
    payload_bytes: int
    sync_points_per_layer: int = 1
    after: str = ""
    leg: str = ""  # "gather" or "reduce"; empty means the method's full sync
    repeat: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise CommError(f"unknown sync method {self.method!r}")
        if self.devices < 1:
            raise CommError("devices must be >= 1")
        if self.payload_bytes < 0:
            raise CommError("payload must be >= 0")
        if self.method == "megatron" and not self.leg and self.sync_points_per_layer != 2:
            raise CommError("a full megatron block has exactly 2 sync points")

    @property
    def overlappable(self) -> bool:
        return self.kind == "gather"

    @property
    def kind(self) -> str:
        if self.leg:
            return self.leg
        return {"all_gather": "gather", "all_reduce": "reduce"}.get(self.method, "both")


def gather_bytes(payload, devices):
    return payload * (devices - 1) / devices


def reduce_bytes(payload, devices):
    return payload * (devices - 1)


def sync_traffic(plan: SyncPlan) -> float:
    """Bytes each participant sends for one sync point (one block for megatron)."""
    if plan.devices == 0:
        raise CommError("devices must be >= 1")
    if plan.devices == 1:
        return 0.0
    kind = plan.kind
    if kind == "gather":
        return gather_bytes(plan.payload_bytes, plan.devices)
    if kind == "reduce":
        return reduce_bytes(plan.payload_bytes, plan.devices)
    return gather_bytes(plan.payload_bytes, plan.devices) + reduce_bytes(plan.payload_bytes,
                                                                         plan.devices)


def overlapped_latency(compute_s: float, comm_bytes: float, link_bw: float,
                       tail_fraction: float = DEFAULT_TAIL_FRACTION) -> float:
    """Pipelined compute + transfer: the slower side plus the last chunk's transfer.

    Never worse than running the two back to back.
    """
    if link_bw <= 0:
        raise CommError("link bandwidth must be > 0")
    comm_s = comm_bytes / link_bw
    return min(max(compute_s, comm_s) + tail_fraction * comm_s, compute_s + comm_s)


def min_link_bw_for_overlap(per_step_compute: float, per_step_comm_bytes: float,
                            eps: float = DEFAULT_OVERLAP_EPS,
                            tail_fraction: float = DEFAULT_TAIL_FRACTION,
                            rel_precision: float = 0.01) -> float:
    """Smallest link bandwidth keeping the step within ``(1+eps)`` of pure compute."""
    if per_step_compute <= 0:
        raise CommError("per-step compute time must be > 0")
    if per_step_comm_bytes <= 0:
        return 0.0
    target = (1 + eps) * per_step_compute

    def ok(bw):
        return overlapped_latency(per_step_compute, per_step_comm_bytes, bw, tail_fraction) <= target

    lo = hi = per_step_comm_bytes / per_step_compute
    while not ok(hi):
        hi *= 2
    while ok(lo):
        lo /= 2
    while hi / lo - 1 > rel_precision:
        mid = math.sqrt(lo * hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def sync_point_latency(plan: SyncPlan, compute_s: float, link_bw: float,
                       sync_latency_s: float = DEFAULT_SYNC_LATENCY_S,
                       tail_fraction: float = DEFAULT_TAIL_FRACTION) -> float:
    """Latency one sync point adds on top of the compute it follows.

    Gather legs pipeline behind the producing op; reduce legs are fully exposed.
    """
    if plan.devices == 1:
        return 0.0
    kind = plan.kind
    if kind == "both":
        g = replace(plan, leg="gather", sync_points_per_layer=1)
        r = replace(plan, leg="reduce", sync_points_per_layer=1)
        return (sync_point_latency(g, compute_s, link_bw, sync_latency_s, tail_fraction)
                + sync_point_latency(r, 0.0, link_bw, sync_latency_s, tail_fraction))
    nbytes = sync_traffic(plan)
    if kind == "gather":
        exposed = overlapped_latency(compute_s, nbytes, link_bw, tail_fraction) - compute_s
    else:
        exposed = nbytes / link_bw
    return sync_latency_s + exposed


# which projection each sync follows, and the width of the synchronized activation
def _sync_layout(graph: OperatorGraph, method: str, spec_widths: dict):
    if method == "all_gather":
        return [("context", "gather", spec_widths["attn"]), ("o_proj", "gather", spec_widths["h"]),
                ("ffn_up", "gather", spec_widths["ffn"]), ("ffn_down", "gather", spec_widths["h"])]
    if method == "all_reduce":
        return [("qkv", "reduce", spec_widths["qkv"]), ("o_proj", "reduce", spec_widths["h"]),
                ("ffn_up", "reduce", spec_widths["ffn_in"]), ("ffn_down", "reduce", spec_widths["h"])]
    return [("o_proj", "gather", spec_widths["h"]), ("ffn_down", "reduce", spec_widths["h"])]


# how each op is sharded per method: "n" columns, "k" rows of the weight, or heads
_SPLIT = {
    "all_gather": {"qkv": "n", "o_proj": "n", "ffn_up": "n", "ffn_down": "n", "lm_head": "n"},
    "all_reduce": {"qkv": "k", "o_proj": "k", "ffn_up": "k", "ffn_down": "k", "lm_head": "n"},
    "megatron": {"qkv": "n", "o_proj": "k", "ffn_up": "n", "ffn_down": "k", "lm_head": "n"},
}


@dataclass
class Partition:
    graph: OperatorGraph
    syncs: list
    padding_waste: float


def tp_partition(graph: OperatorGraph, devices: int, method: str = "all_gather",
                 widths: dict | None = None) -> Partition:
    """Shard every matmul across ``devices`` and insert the method's sync points.

    Attention ops are split by heads.  Vector ops are replicated.  Indivisible
    dims are padded up; ``padding_waste`` is the extra matmul FLOP fraction.
    """
    if method not in METHODS:
        raise CommError(f"unknown TP method {method!r}")
    if devices < 1:
        raise CommError("devices must be >= 1")
    if devices == 1:
        return Partition(graph=graph, syncs=[], padding_waste=0.0)

    split = _SPLIT[method]
    ops = []
    orig = padded = 0
    for op in graph.ops:
        new = op
        if op.is_matmul:
            axis = split.get(op.name, "n")
            if axis == "n":
                new = replace(op, n=math.ceil(op.n / devices))
            else:
                new = replace(op, k=math.ceil(op.k / devices))
        elif op.is_attention:
            new = replace(op, heads=math.ceil(op.heads / devices))
        elif op.name.startswith("softmax"):
            new = replace(op, vector_flops=math.ceil(op.vector_flops / devices))
        if op.kind != OpKind.VECTOR:
            orig += op.flops
            padded += new.flops * devices
        ops.append(new)

    if widths is None:
        widths = _widths_from_graph(graph)
    rows = sum(o.m for o in graph.ops if o.name == "qkv")
    dt = graph.ops[0].dtype_bytes
    repeat = next(o.repeat for o in graph.ops if o.name == "qkv")
    layout = _sync_layout(graph, method, widths)
    syncs = [SyncPlan(method=method, devices=devices, payload_bytes=rows * w * dt,
                      sync_points_per_layer=len(layout), after=after, leg=leg, repeat=repeat)
             for after, leg, w in layout]
    part = OperatorGraph(ops=ops, stage=graph.stage, batch=graph.batch,
                         seq_context=graph.seq_context, tensors=graph.tensors, past=graph.past)
    return Partition(graph=part, syncs=syncs,
                     padding_waste=(padded - orig) / orig if orig else 0.0)


def _widths_from_graph(graph: OperatorGraph) -> dict:
    by = {o.name: o for o in graph.ops}
    qkv, o_proj, up, down = by["qkv"], by["o_proj"], by["ffn_up"], by["ffn_down"]
    return {"h": qkv.k, "qkv": qkv.n, "attn": o_proj.k, "ffn": down.k, "ffn_in": up.n}


def pp_partition(graph: OperatorGraph, stages: int) -> list:
    """Assign contiguous layer blocks to pipeline stages.

    Every stage still runs its layers one after the other, so per-token latency
    is the sum over stages; only throughput improves.
    """
    if stages < 1:
        raise CommError("stages must be >= 1")
    layers = next(o.repeat for o in graph.ops if o.name == "qkv")
    if stages > layers:
        raise CommError(f"{stages} stages for {layers} layers")
    base, extra = divmod(layers, stages)
    out = []
    for s in range(stages):
        count = base + (1 if s < extra else 0)
        ops = [replace(o, repeat=count) for o in graph.ops if o.repeat == layers]
        if s == stages - 1:
            ops += [o for o in graph.ops if o.repeat != layers]
        out.append(OperatorGraph(ops=ops, stage=graph.stage, batch=graph.batch,
                                 seq_context=graph.seq_context, tensors=graph.tensors,
                                 past=graph.past))
    return out
