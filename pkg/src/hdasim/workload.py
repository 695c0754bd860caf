"""Transformer workload descriptions and their lowering into kernel operations.

A :class:`ModelSpec` describes the decoder stack.  :func:`lower_to_ops` turns one
scheduler step worth of work (a prefill chunk or a batched decode step) into an
:class:`OperatorGraph` whose ops carry enough shape information for the kernel
latency models and the local-memory footprint model.

Decoder layers are identical, so each op describes one layer and carries
``repeat = num_layers``.  Per-request attention ops are emitted once per request.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

# FLOPs per element for the vector-unit work
NORM_FLOPS = 4
SOFTMAX_FLOPS = 5
ADD_FLOPS = 1
ACT_FLOPS = 4


class WorkloadError(ValueError):
    pass


class Stage(str, Enum):
    PREFILL = "prefill"
    DECODE = "decode"


class OpKind(str, Enum):
    GEMM = "GEMM"
    GEMV = "GEMV"
    ATTN_SCORE = "AttentionScore"
    ATTN_CONTEXT = "AttentionContext"
    VECTOR = "VectorOp"


@dataclass(frozen=True)
class ModelSpec:
    name: str
    num_layers: int
    hidden: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    ffn_dim: int
    vocab: int
    max_seq: int
    moe_experts: int = 1
    moe_active: int = 1
    dtype_bytes: int = 2
    gated_ffn: bool = True

    def __post_init__(self):
        problems = []
        for name in ("num_layers", "hidden", "num_heads", "num_kv_heads", "head_dim",
                     "ffn_dim", "vocab", "max_seq", "moe_experts", "moe_active"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        if self.num_kv_heads >= 1 and self.num_heads % self.num_kv_heads:
            problems.append(f"num_heads ({self.num_heads}) not divisible by "
                            f"num_kv_heads ({self.num_kv_heads})")
        if self.head_dim * self.num_heads != self.hidden:
            problems.append(f"head_dim*num_heads ({self.head_dim * self.num_heads}) "
                            f"!= hidden ({self.hidden})")
        if self.moe_active > self.moe_experts:
            problems.append(f"moe_active ({self.moe_active}) > moe_experts ({self.moe_experts})")
        if self.dtype_bytes not in (1, 2, 4):
            problems.append(f"dtype_bytes must be 1, 2 or 4 (got {self.dtype_bytes})")
        if problems:
            raise WorkloadError(f"invalid model '{self.name}': " + "; ".join(problems))

    @property
    def gqa_group(self) -> int:
        """Query heads sharing one KV head."""
        return self.num_heads // self.num_kv_heads

    @property
    def qkv_width(self) -> int:
        return (self.num_heads + 2 * self.num_kv_heads) * self.head_dim

    @property
    def attn_width(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def ffn_in_width(self) -> int:
        return 2 * self.ffn_dim if self.gated_ffn else self.ffn_dim

    @property
    def kv_bytes_per_token(self) -> int:
        return 2 * self.num_layers * self.num_kv_heads * self.head_dim * self.dtype_bytes

    def to_dict(self) -> dict:
        return asdict(self)


_REQUIRED = ("name", "num_layers", "hidden", "num_heads", "num_kv_heads", "ffn_dim",
             "vocab", "max_seq")


def load_model_spec(descriptor) -> ModelSpec:
    """Build a validated ModelSpec from a dict, JSON text, or a path to a JSON file.

    ``head_dim`` is derived as ``hidden // num_heads`` when absent.  A dense model
    (``moe_experts`` 1 or missing) always gets ``moe_active = 1``.
    """
    if isinstance(descriptor, Path) or (isinstance(descriptor, str)
                                        and not descriptor.lstrip().startswith("{")):
        path = Path(descriptor)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise WorkloadError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    elif isinstance(descriptor, str):
        try:
            data = json.loads(descriptor)
        except json.JSONDecodeError as exc:
            raise WorkloadError(f"model descriptor: line {exc.lineno}: {exc.msg}") from exc
    else:
        data = dict(descriptor)

    missing = [k for k in _REQUIRED if k not in data]
    if missing:
        raise WorkloadError(f"model descriptor missing field(s): {', '.join(missing)}")
    known = {f.name for f in fields(ModelSpec)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise WorkloadError(f"model descriptor has unknown field(s): {', '.join(unknown)}")

    data = dict(data)
    if data["num_kv_heads"] == 0:
        raise WorkloadError("num_kv_heads must be >= 1 (got 0)")
    if "head_dim" not in data:
        if data["num_heads"] <= 0:
            raise WorkloadError("num_heads must be >= 1")
        data["head_dim"] = data["hidden"] // data["num_heads"]
    if data.get("moe_experts", 1) == 1:
        data["moe_active"] = 1
    for key, value in data.items():
        if key not in ("name", "gated_ffn") and not isinstance(value, int):
            raise WorkloadError(f"field '{key}' must be an integer (got {value!r})")
    return ModelSpec(**data)


@dataclass(slots=True)
class KernelOp:
    """One kernel for one decoder layer (``repeat`` layers in total).

    For projections ``m`` is the number of token rows, ``k x n`` the weight.  For
    attention ops ``m`` is the query rows per head, ``heads`` the query heads and
    ``reuse`` how many query heads consume each streamed KV element.
    """

    name: str
    kind: OpKind
    m: int
    k: int
    n: int
    weight_source: str = "none"
    shared_across_batch: bool = False
    reuse: int = 1
    heads: int = 1
    repeat: int = 1
    request: int | None = None
    past: int = 0
    causal: bool = False
    weight_copies: int = 1
    mac_copies: int = 1
    vector_flops: int = 0
    dtype_bytes: int = 2
    inputs: tuple = ()
    outputs: tuple = ()

    @property
    def is_attention(self) -> bool:
        return self.kind in (OpKind.ATTN_SCORE, OpKind.ATTN_CONTEXT)

    @property
    def is_matmul(self) -> bool:
        return self.kind in (OpKind.GEMM, OpKind.GEMV)

    def macs_per_layer(self) -> int:
        if self.kind == OpKind.VECTOR:
            return 0
        if self.is_attention and self.causal:
            # query row i sees past + i + 1 keys
            pairs = self.m * self.past + self.m * (self.m + 1) // 2
            inner = self.k if self.kind == OpKind.ATTN_SCORE else self.n
            return self.heads * pairs * inner
        return self.heads * self.mac_copies * self.m * self.k * self.n

    @property
    def macs(self) -> int:
        return self.repeat * self.macs_per_layer()

    @property
    def flops(self) -> int:
        if self.kind == OpKind.VECTOR:
            return self.repeat * self.vector_flops
        return 2 * self.macs

    def weight_bytes_per_layer(self) -> int:
        """Bytes streamed from the weight source (weights, or KV for attention)."""
        if self.weight_source == "none":
            return 0
        if self.is_attention:
            return self.heads * self.k * self.n * self.dtype_bytes // self.reuse
        return self.weight_copies * self.k * self.n * self.dtype_bytes

    @property
    def weight_bytes(self) -> int:
        return self.repeat * self.weight_bytes_per_layer()


@dataclass
class OperatorGraph:
    ops: list
    stage: Stage
    batch: int
    seq_context: list
    tensors: dict = field(default_factory=dict)  # activation name -> bytes
    past: list = field(default_factory=list)

    @property
    def flops(self) -> int:
        return sum(op.flops for op in self.ops)

    def flops_by_kind(self) -> dict:
        out = {}
        for op in self.ops:
            out[op.kind] = out.get(op.kind, 0) + op.flops
        return out

    def attention_share(self) -> dict:
        """FLOP share and DRAM byte share of the attention ops."""
        total_f = self.flops
        total_b = sum(op.weight_bytes for op in self.ops)
        attn_f = sum(op.flops for op in self.ops
                     if op.is_attention or op.name.startswith("softmax"))
        attn_b = sum(op.weight_bytes for op in self.ops if op.is_attention)
        return {"flop_share": attn_f / total_f if total_f else 0.0,
                "byte_share": attn_b / total_b if total_b else 0.0}


def lower_to_ops(spec: ModelSpec, stage, batch: int, seq_lens: Sequence[int],
                 past_lens: Sequence[int] | None = None,
                 merge_attention: bool = False) -> OperatorGraph:
    """Lower one step of work to kernel ops.

    Decode: ``seq_lens[r]`` is the number of tokens already in request r's KV
    cache; the step appends one token and attends over ``seq_lens[r] + 1``.
    Prefill: ``seq_lens[r]`` is the number of prompt tokens processed in this
    step and ``past_lens[r]`` (default 0) the tokens processed by earlier chunks.

    ``merge_attention`` (decode only) folds the per-request attention ops into
    one score/softmax/context triple over the summed context.  Bytes, MACs and
    FLOPs are unchanged; the serving simulator uses it to keep steps O(1).
    """
    stage = Stage(stage)
    seq_lens = [int(s) for s in seq_lens]
    if batch < 1 or batch != len(seq_lens):
        raise WorkloadError(f"batch ({batch}) must equal len(seq_lens) ({len(seq_lens)}) >= 1")
    past = [0] * batch if past_lens is None else [int(p) for p in past_lens]
    if len(past) != batch:
        raise WorkloadError("past_lens must have one entry per request")

    if stage == Stage.DECODE:
        if past_lens is not None and any(past):
            raise WorkloadError("past_lens only applies to prefill")
        q_rows = [1] * batch
        ctx = [s + 1 for s in seq_lens]
        past = list(seq_lens)
    else:
        if any(s < 1 for s in seq_lens):
            raise WorkloadError("prefill chunks must hold at least one token")
        q_rows = seq_lens
        ctx = [p + s for p, s in zip(past, seq_lens)]
    for c in ctx:
        if c > spec.max_seq:
            raise WorkloadError(f"sequence length {c} exceeds max_seq {spec.max_seq}")

    L = spec.num_layers
    dt = spec.dtype_bytes
    h = spec.hidden
    rows = sum(q_rows)
    proj_kind = OpKind.GEMV if stage == Stage.DECODE else OpKind.GEMM
    experts_streamed = 1
    if spec.moe_experts > 1:
        experts_streamed = min(spec.moe_experts, rows * spec.moe_active)

    tensors = {
        "x": rows * h * dt,
        "n1": rows * h * dt,
        "qkv": rows * spec.qkv_width * dt,
        "attn": rows * spec.attn_width * dt,
        "o": rows * h * dt,
        "x2": rows * h * dt,
        "n2": rows * h * dt,
        "u": rows * spec.ffn_dim * dt,
        "d": rows * h * dt,
        "x_out": rows * h * dt,
    }

    def proj(name, k, n, inp, out, **kw):
        return KernelOp(name, proj_kind, rows, k, n, weight_source="dram",
                        shared_across_batch=True, repeat=L, dtype_bytes=dt,
                        inputs=inp, outputs=out, **kw)

    def vec(name, flops, inp, out):
        return KernelOp(name, OpKind.VECTOR, rows, 0, 0, repeat=L, vector_flops=flops,
                        dtype_bytes=dt, inputs=inp, outputs=out)

    ops = [
        vec("attn_norm", NORM_FLOPS * rows * h, ("x",), ("n1",)),
        proj("qkv", h, spec.qkv_width, ("n1",), ("qkv",)),
    ]
    if merge_attention and stage == Stage.PREFILL:
        raise WorkloadError("merge_attention only applies to decode")
    attn_groups = [(r, q_rows[r], ctx[r], past[r]) for r in range(batch)]
    if merge_attention:
        attn_groups = [(None, 1, sum(ctx), 0)]
    for r, q, c, p in attn_groups:
        score = "s" if r is None else f"s{r}"
        tag = "_all" if r is None else str(r)
        tensors[score] = 0  # sized by the memory model's tile configuration
        causal = stage == Stage.PREFILL
        common = dict(weight_source="dram", heads=spec.num_heads, reuse=spec.gqa_group,
                      repeat=L, request=r, dtype_bytes=dt, causal=causal, past=p)
        ops.append(KernelOp(f"score{tag}", OpKind.ATTN_SCORE, q, spec.head_dim, c,
                            inputs=("qkv",), outputs=(score,), **common))
        if causal:
            pairs = q * p + q * (q + 1) // 2
        else:
            pairs = c
        ops.append(vec(f"softmax{tag}", SOFTMAX_FLOPS * spec.num_heads * pairs,
                       (score,), (score,)))
        ops.append(KernelOp(f"context{tag}", OpKind.ATTN_CONTEXT, q, c,
                            spec.head_dim, inputs=(score, "qkv"), outputs=("attn",),
                            **common))
    ffn_kw = {}
    if spec.moe_experts > 1:
        ffn_kw = dict(weight_copies=experts_streamed, mac_copies=spec.moe_active)
    ops += [
        proj("o_proj", spec.attn_width, h, ("attn",), ("o",)),
        vec("attn_residual", ADD_FLOPS * rows * h, ("x", "o"), ("x2",)),
        vec("ffn_norm", NORM_FLOPS * rows * h, ("x2",), ("n2",)),
        proj("ffn_up", h, spec.ffn_in_width, ("n2",), ("u",), **ffn_kw),
        vec("ffn_act", ACT_FLOPS * rows * spec.ffn_dim, ("u",), ("u",)),
        proj("ffn_down", spec.ffn_dim, h, ("u",), ("d",), **ffn_kw),
        vec("ffn_residual", ADD_FLOPS * rows * h, ("x2", "d"), ("x_out",)),
    ]
    if stage == Stage.DECODE:
        tensors["nf"] = rows * h * dt
        tensors["logits"] = rows * spec.vocab * dt
        ops.append(KernelOp("final_norm", OpKind.VECTOR, rows, 0, 0, repeat=1,
                            vector_flops=NORM_FLOPS * rows * h, dtype_bytes=dt,
                            inputs=("x_out",), outputs=("nf",)))
        ops.append(KernelOp("lm_head", OpKind.GEMV, rows, h, spec.vocab, weight_source="dram",
                            shared_across_batch=True, repeat=1, dtype_bytes=dt,
                            inputs=("nf",), outputs=("logits",)))
    return OperatorGraph(ops=ops, stage=stage, batch=batch, seq_context=ctx,
                         tensors=tensors, past=past)


def _layer_params(spec: ModelSpec, experts: int) -> int:
    h = spec.hidden
    attn = h * spec.qkv_width + spec.attn_width * h
    ffn = experts * (h * spec.ffn_in_width + spec.ffn_dim * h)
    router = h * spec.moe_experts if spec.moe_experts > 1 else 0
    return attn + ffn + router + 2 * h  # two norm vectors


def weight_bytes(spec: ModelSpec) -> int:
    """Total parameter bytes: embeddings, decoder layers (all experts), final norm, LM head."""
    params = (2 * spec.vocab * spec.hidden + spec.hidden
              + spec.num_layers * _layer_params(spec, spec.moe_experts))
    return params * spec.dtype_bytes


def streamed_weight_bytes(spec: ModelSpec, tokens: int = 1) -> int:
    """Weight bytes read from DRAM by one decode step over ``tokens`` rows.

    The embedding table is a gather and is not streamed; MoE layers stream only
    the experts touched by the step.
    """
    experts = 1
    if spec.moe_experts > 1:
        experts = min(spec.moe_experts, tokens * spec.moe_active)
    params = spec.vocab * spec.hidden + spec.hidden + spec.num_layers * _layer_params(spec, experts)
    return params * spec.dtype_bytes


def kv_cache_bytes(spec: ModelSpec, batch: int, seq: int) -> int:
    if seq > spec.max_seq:
        raise WorkloadError(f"seq {seq} exceeds max_seq {spec.max_seq}")
    return (2 * spec.num_layers * spec.num_kv_heads * spec.head_dim * seq * batch
            * spec.dtype_bytes)


def dram_read_fraction_kv(spec: ModelSpec, batch: int, seq: int) -> float:
    """Share of one decode step's DRAM reads that is KV cache."""
    if batch < 1:
        raise WorkloadError("batch must be >= 1")
    kv = kv_cache_bytes(spec, batch, seq)
    if kv == 0:
        return 0.0
    return kv / (kv + streamed_weight_bytes(spec, batch))


def step_flops(spec: ModelSpec, stage, seq_lens: Iterable[int]) -> int:
    seq_lens = list(seq_lens)
    return lower_to_ops(spec, stage, len(seq_lens), seq_lens).flops


FIXTURE_DIR = Path(__file__).parent / "data" / "models"


def fixture_model(name: str) -> ModelSpec:
    """Load a shipped model descriptor (``llama3_8b``, ``llama3_70b``, ``yi_34b``)."""
    return load_model_spec(FIXTURE_DIR / f"{name}.json")
