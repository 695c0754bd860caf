"""Local-memory footprints, local/global SRAM sizing and global-memory KV residency.

Each core holds the full activation rows it works on (cores split weight
columns and gather results), so footprints below are per core.  The LM head's
logits are the exception: each core keeps only its vocab slice.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

from .workload import ModelSpec, Stage

KIB = 1024
MIB = 1024 * 1024
STAT_BYTES = 4  # running max / denominator kept in fp32


class SramSizingError(ValueError):
    pass


@dataclass(frozen=True)
class TileConfig:
    """Attention score tiling and prefill row tiling.

    With ``decompose`` the score matrix is processed ``rows x cols`` at a time
    with running max/denominator vectors; without it a full ``rows x seq`` slab
    is live.  Prefill activations are tiled ``prefill_rows`` tokens at a time.
    """

    rows: int = 64
    cols: int = 256
    decompose: bool = True
    prefill_rows: int = 16
    double_buffer: float = 1.0


@dataclass
class MemFootprint:
    per_op: list
    peak_bytes: int
    lm_head_bytes: int
    attention_bytes: int

    def table(self) -> str:
        lines = ["op,bytes"] + [f"{name},{b}" for name, b in self.per_op]
        return "\n".join(lines) + "\n"


def score_tile_bytes(spec: ModelSpec, seq: int, tile: TileConfig) -> int:
    if tile.decompose:
        return (tile.rows * tile.cols * spec.dtype_bytes
                + 2 * tile.rows * STAT_BYTES)
    return tile.rows * seq * spec.dtype_bytes


def local_mem_usage(spec: ModelSpec, cfg, stage, batch: int, seq: int,
                    tile_cfg: TileConfig | None = None) -> MemFootprint:
    """Per-op live activation bytes for one decoder layer plus the LM head.

    ``batch`` request rows (decode) or one ``prefill_rows`` token tile (prefill).
    Raises when a single token's activations do not fit ``cfg.local_mem_bytes``.
    """
    tile = tile_cfg or TileConfig()
    stage = Stage(stage)
    dt = spec.dtype_bytes
    rows = batch if stage == Stage.DECODE else min(tile.prefill_rows, max(seq, 1))

    if cfg is not None:
        one = _layer_peak(spec, 1, score_tile_bytes(spec, seq, tile)) * tile.double_buffer
        if one > cfg.local_mem_bytes:
            raise SramSizingError(f"single-token activations ({one:.0f} B) exceed local memory "
                               f"({cfg.local_mem_bytes} B)")

    h = rows * spec.hidden * dt
    qkv = rows * spec.qkv_width * dt
    attn = rows * spec.attn_width * dt
    u = rows * spec.ffn_dim * dt
    tile_b = score_tile_bytes(spec, seq, tile)
    mult = tile.double_buffer

    per_op = [
        ("attn_norm", h + h),
        ("qkv", h + h + qkv),
        ("attention", h + qkv + attn + tile_b),
        ("o_proj", h + attn + h),
        ("attn_residual", 3 * h),
        ("ffn_norm", 2 * h),
        ("ffn_up", 2 * h + u),
        ("ffn_act", h + u),
        ("ffn_down", h + u + h),
        ("ffn_residual", 3 * h),
    ]
    per_op = [(name, int(b * mult)) for name, b in per_op]
    peak = max(b for _, b in per_op)
    attention = dict(per_op)["attention"]
    lm = 0
    if stage == Stage.DECODE:
        lm = batch * spec.vocab * dt
        per_op.append(("final_norm", int(2 * h * mult)))
        per_op.append(("lm_head", int((h + lm) * mult)))
    return MemFootprint(per_op=per_op, peak_bytes=peak, lm_head_bytes=lm,
                        attention_bytes=attention)


def _layer_peak(spec, rows, tile_b):
    dt = spec.dtype_bytes
    h = rows * spec.hidden * dt
    return max(h + rows * spec.qkv_width * dt + rows * spec.attn_width * dt + tile_b,
               2 * h + rows * spec.ffn_dim * dt,
               2 * h + rows * spec.qkv_width * dt)


def round_pow2(nbytes: int, granularity: int = 256 * KIB) -> int:
    if nbytes <= granularity:
        return granularity
    size = granularity
    while size < nbytes:
        size *= 2
    return size


def size_memories(spec: ModelSpec, cfg_partial, batch_max: int, sram_budget: int,
                  tile_cfg: TileConfig | None = None, granularity: int = 256 * KIB):
    """(local, global) bytes: local covers the worst op, the rest becomes global memory."""
    tile = tile_cfg or TileConfig()
    cores = cfg_partial.core_count
    need = 0
    for stage in (Stage.DECODE, Stage.PREFILL):
        fp = local_mem_usage(spec, None, stage, batch_max, spec.max_seq, tile)
        need = max(need, fp.peak_bytes, math.ceil(fp.lm_head_bytes / cores))
    local = round_pow2(need, granularity)
    remaining = sram_budget - local * cores
    if remaining < 0:
        raise SramSizingError(f"SRAM budget {sram_budget} B below {cores} x {local} B local memory")
    return local, remaining


@dataclass
class GlobalKvState:
    """FIFO residency of KV chunks in global memory."""

    capacity: int
    resident_bytes: int = 0
    hit_bytes: int = 0
    miss_bytes: int = 0
    chunks: OrderedDict = field(default_factory=OrderedDict)
    _next_key: int = 0

    def store(self, nbytes: int, key=None) -> int:
        """Insert a chunk, evicting oldest chunks as needed.  Returns bytes kept."""
        if nbytes < 0:
            raise SramSizingError("chunk size must be >= 0")
        if key is None:
            key = self._next_key
            self._next_key += 1
        kept = min(nbytes, self.capacity)
        while self.resident_bytes + kept > self.capacity and self.chunks:
            _, old = self.chunks.popitem(last=False)
            self.resident_bytes -= old
        if kept:
            self.chunks[key] = self.chunks.get(key, 0) + kept
            self.resident_bytes += kept
        return kept

    def read(self, key, nbytes: int) -> int:
        """Account a read of ``nbytes`` of a chunk; returns bytes served on-chip."""
        hit = min(nbytes, self.chunks.get(key, 0))
        self.hit_bytes += hit
        self.miss_bytes += nbytes - hit
        return hit

    def drop(self, key):
        old = self.chunks.pop(key, 0)
        self.resident_bytes -= old


def global_kv_account(state: GlobalKvState, chunk_kv_bytes: int, key=None):
    """Store a freshly produced chunk and read it back for its own attention.

    Returns ``(state, fraction of the chunk served on-chip)``.
    """
    if chunk_kv_bytes < 0:
        raise SramSizingError("chunk size must be >= 0")
    if key is None:
        key = state._next_key
        state._next_key += 1
    state.store(chunk_kv_bytes, key)
    hit = state.read(key, chunk_kv_bytes)
    frac = hit / chunk_kv_bytes if chunk_kv_bytes else 1.0
    return state, frac
