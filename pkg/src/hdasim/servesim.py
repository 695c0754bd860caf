"""Discrete-event serving simulator.

Requests arrive as a Poisson process with lengths drawn from a trace.  The
machine runs one scheduler step at a time: every decoding request emits one
token per step and at most one prefill chunk rides along.  Each request's
output tokens all come from decode steps (the LM head runs only there), so a
request whose prompt is fully prefilled waits for the next decode step to get
its first token.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import scheduler
from .archspec import HardwareConfig
from .kernels import BandwidthCurve, default_curve
from .memmodel import GlobalKvState
from .workload import ModelSpec, lower_to_ops, weight_bytes

DATA_DIR = Path(__file__).parent / "data"
DEFAULT_TRACE = DATA_DIR / "traces" / "chatbot_synthetic.csv"


class ServeError(ValueError):
    pass


@dataclass
class Request:
    id: int
    arrival_s: float
    input_len: int
    output_len: int
    first_token_s: float | None = None
    finish_s: float | None = None
    per_token_times: list = field(default_factory=list)
    prefill_done_s: float | None = None

    @property
    def done(self) -> bool:
        return self.finish_s is not None

    def ttft(self) -> float:
        return self.first_token_s - self.arrival_s

    def tbt_gaps(self) -> list:
        # the first gap runs from the end of prefill to the first token
        times = [self.prefill_done_s] + self.per_token_times
        return [b - a for a, b in zip(times, times[1:])]


@dataclass(frozen=True)
class SloSpec:
    ttft_limit_s: float = 2.0
    tbt_limit_s: float = 0.2
    tbt_percentile: float = 99.0
    attainment_target: float = 0.99

    def __post_init__(self):
        if self.ttft_limit_s <= 0 or self.tbt_limit_s <= 0:
            raise ServeError("SLO limits must be > 0")
        if not 0 < self.attainment_target <= 1:
            raise ServeError("attainment target must be in (0, 1]")
        if not 0 < self.tbt_percentile <= 100:
            raise ServeError("TBT percentile must be in (0, 100]")

    @classmethod
    def unbounded(cls, attainment_target=0.99):
        return cls(math.inf, math.inf, attainment_target=attainment_target)

    def to_dict(self):
        return {k: (None if isinstance(v, float) and math.isinf(v) else v)
                for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        d = {k: (math.inf if v is None and k.endswith("_s") else v) for k, v in d.items()}
        return cls(**d)


@dataclass(frozen=True)
class Policy:
    max_batch: int = 256
    chunk_size: int = scheduler.DEFAULT_CHUNK
    warmup_frac: float = 0.1
    # how long past the last arrival the simulation may run before stopping
    drain_s: float | None = None

    def __post_init__(self):
        if self.max_batch < 1 or self.chunk_size < 1:
            raise ServeError("max_batch and chunk_size must be >= 1")
        if not 0 <= self.warmup_frac < 1:
            raise ServeError("warmup_frac must be in [0, 1)")


@dataclass
class Dist:
    mean: float
    p50: float
    p99: float
    count: int

    @classmethod
    def of(cls, values):
        if len(values) == 0:
            return cls(math.nan, math.nan, math.nan, 0)
        a = np.asarray(values, dtype=float)
        return cls(float(a.mean()), float(np.percentile(a, 50)), float(np.percentile(a, 99)),
                   len(a))


@dataclass
class QoSReport:
    ttft: Dist
    tbt: Dist
    e2e: Dist
    throughput_rps: float
    throughput_tps: float
    engine_utilization: dict
    dram_bw_utilization: float
    slo_attainment: float | None
    completed: int
    in_flight: int
    admitted: int
    measured: int
    violations: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _clean(asdict(self))


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


@dataclass
class StepRecord:
    start_s: float
    seconds: float
    mode: str
    mt_busy: float
    sa_busy: float
    dram_bytes: float
    decode_batch: int
    prefill_tokens: int


@dataclass
class SimResult:
    report: QoSReport
    steps: list
    requests: list


# ---------------------------------------------------------------------------
# traces and request generation


def load_trace(path) -> list:
    """Rows of ``(input_len, output_len)`` from a CSV with that header."""
    path = Path(path)
    rows = []
    with path.open(newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"input_len", "output_len"} <= set(reader.fieldnames):
            raise ServeError(f"{path}: header must contain input_len,output_len")
        for lineno, row in enumerate(reader, start=2):
            try:
                i, o = int(row["input_len"]), int(row["output_len"])
            except (TypeError, ValueError):
                raise ServeError(f"{path}:{lineno}: non-integer length in {row}") from None
            if i < 1 or o < 1:
                raise ServeError(f"{path}:{lineno}: lengths must be >= 1")
            rows.append((i, o))
    if not rows:
        raise ServeError(f"{path}: trace is empty")
    return rows


def save_trace(rows, path):
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["input_len", "output_len"])
        w.writerows(rows)


def ingest_chat_export(jsonl_path, chars_per_token: float = 4.0) -> list:
    """Turn a chat-dataset export (one JSON object with ``messages`` per line)
    into trace rows.  The last assistant turn is the output; everything before it
    is the prompt.  Token counts are estimated from character counts."""
    rows = []
    for lineno, line in enumerate(Path(jsonl_path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            msgs = json.loads(line)["messages"]
        except (json.JSONDecodeError, KeyError, TypeError):
            raise ServeError(f"{jsonl_path}:{lineno}: expected an object with 'messages'") from None
        last = max((i for i, m in enumerate(msgs) if m.get("role") == "assistant"), default=None)
        if last is None or last == 0:
            continue
        prompt = sum(len(m.get("content", "")) for m in msgs[:last])
        reply = len(msgs[last].get("content", ""))
        rows.append((max(1, round(prompt / chars_per_token)),
                     max(1, round(reply / chars_per_token))))
    return rows


def generate_requests(source, rate_rps: float, duration_s: float, seed: int,
                      max_seq: int | None = None) -> list:
    """Poisson arrivals over ``[0, duration_s)`` with lengths sampled from ``source``.

    ``source`` is a trace path, a list of ``(input_len, output_len)`` rows, or
    ``None`` for the shipped synthetic chatbot trace.  With ``max_seq`` lengths
    are clipped so a request never outgrows the model's context.
    """
    if rate_rps <= 0:
        raise ServeError("rate must be > 0")
    if duration_s <= 0:
        raise ServeError("duration must be > 0")
    if source is None:
        source = DEFAULT_TRACE
    rows = load_trace(source) if isinstance(source, (str, Path)) else list(source)
    if not rows:
        raise ServeError("trace is empty")
    rng = np.random.default_rng(seed)
    out = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / rate_rps)
        if t >= duration_s:
            break
        i, o = rows[int(rng.integers(len(rows)))]
        if max_seq is not None:
            i = min(i, max_seq - 1)
            o = min(o, max_seq - i)
        out.append(Request(id=len(out), arrival_s=float(t), input_len=int(i), output_len=int(o)))
    return out


# ---------------------------------------------------------------------------
# step cost


class StepCostModel:
    """Latency of one step given decode contexts and an optional prefill chunk."""

    def __init__(self, spec: ModelSpec, cfg: HardwareConfig, curve: BandwidthCurve | None = None):
        self.spec = spec
        self.cfg = cfg
        self.curve = curve or default_curve()

    def __call__(self, decode_ctx, prefill=None, past_resident=0, chunk_frac=1.0,
                 chunk_size=scheduler.DEFAULT_CHUNK):
        gd = gp = None
        if decode_ctx:
            gd = lower_to_ops(self.spec, "decode", len(decode_ctx), decode_ctx,
                              merge_attention=True)
        if prefill is not None:
            _, start, length = prefill
            gp = lower_to_ops(self.spec, "prefill", 1, [length], [start])
        state = scheduler.BatchState(decode_reqs=[], prefill_req=prefill,
                                     prefill_past_resident=past_resident,
                                     chunk_resident_fraction=chunk_frac, chunk_size=chunk_size)
        plan = scheduler.plan_step(state, self.cfg, gd, gp, self.curve)
        return plan, scheduler.step_latency(plan, self.cfg, self.curve)


def check_capacity(spec: ModelSpec, cfg: HardwareConfig):
    per_device = weight_bytes(spec) / cfg.device_count
    if per_device > cfg.dram_cap:
        raise ServeError(f"model weights ({weight_bytes(spec) / 1e9:.1f} GB) do not fit "
                         f"{cfg.device_count} x {cfg.dram_cap / 1e9:.1f} GB of DRAM")


class _Engine:
    """Mutable simulation state shared by the event loop."""

    def __init__(self, requests, spec, cfg, policy, cost):
        self.spec, self.cfg, self.policy, self.cost = spec, cfg, policy, cost
        self.waiting = deque()
        self.prefilling = None  # [request, tokens done]
        self.decoding = []
        self.generated = {}
        self.steps = []
        self.kv_per_token_dev = spec.kv_bytes_per_token / cfg.device_count
        self.kv_layer_per_token_dev = self.kv_per_token_dev / spec.num_layers
        self.kv_budget = cfg.dram_cap - weight_bytes(spec) / cfg.device_count
        self.kv_used = 0.0
        self.globalmem = GlobalKvState(capacity=cfg.global_mem_bytes)
        self.chunk_keys = {}

    def has_work(self):
        return bool(self.decoding or self.prefilling or self.waiting)

    def _kv_reserve(self, req):
        return (req.input_len + req.output_len) * self.kv_per_token_dev

    def _pick_prefill(self):
        if self.prefilling is not None:
            return
        if not self.waiting:
            return
        if len(self.decoding) + 1 > self.policy.max_batch:
            return
        req = self.waiting[0]
        need = self._kv_reserve(req)
        if self.kv_used + need > self.kv_budget and self.decoding:
            return
        self.waiting.popleft()
        self.kv_used += need
        self.prefilling = [req, 0]

    def run_step(self, now):
        """Compose and cost one step starting at ``now``; returns its duration."""
        self._pick_prefill()
        decode_ctx = [r.input_len + self.generated[r.id] for r in self.decoding]
        prefill = None
        past_res = 0
        frac = 1.0
        if self.prefilling is not None:
            req, done = self.prefilling
            length = min(self.policy.chunk_size, req.input_len - done)
            prefill = (req.id, done, length)
            keys = self.chunk_keys.get(req.id, [])
            past_res = sum(self.globalmem.chunks.get(k, 0) for k in keys)
            # attention of a layer needs only that layer's chunk KV on chip
            layer_chunk = length * self.kv_layer_per_token_dev
            frac = min(1.0, self.globalmem.capacity / layer_chunk) if layer_chunk else 1.0
        if not decode_ctx and prefill is None:
            return None
        plan, lat = self.cost(decode_ctx, prefill, past_res, frac, self.policy.chunk_size)
        self.steps.append(StepRecord(start_s=now, seconds=lat.seconds, mode=plan.mode,
                                     mt_busy=lat.mt_busy, sa_busy=lat.sa_busy,
                                     dram_bytes=lat.dram_bytes, decode_batch=len(decode_ctx),
                                     prefill_tokens=0 if prefill is None else prefill[2]))
        self._pending = prefill
        # decode tokens are ready once the decode phase ends; deferred prefill runs after
        self._emit = now + lat.decode_done_s
        return lat.seconds

    def finish_step(self, now):
        """Apply the effects of the step that just ended at ``now``."""
        still = []
        emit = self._emit
        for r in self.decoding:
            self.generated[r.id] += 1
            r.per_token_times.append(emit)
            if r.first_token_s is None:
                r.first_token_s = emit
            if self.generated[r.id] == r.output_len:
                r.finish_s = emit
                self.kv_used -= self._kv_reserve(r)
            else:
                still.append(r)
        self.decoding = still
        prefill = self._pending
        self._pending = None
        if prefill is not None:
            req = self.prefilling[0]
            _, start, length = prefill
            key = (req.id, start)
            self.globalmem.store(int(length * self.kv_per_token_dev), key)
            self.globalmem.read(key, int(length * self.kv_per_token_dev))
            self.chunk_keys.setdefault(req.id, []).append(key)
            self.prefilling[1] += length
            if self.prefilling[1] == req.input_len:
                req.prefill_done_s = now
                for k in self.chunk_keys.pop(req.id, []):
                    self.globalmem.drop(k)
                self.generated[req.id] = 0
                self.decoding.append(req)
                self.prefilling = None


def run_simulation(requests, spec: ModelSpec, cfg: HardwareConfig, policy: Policy | None = None,
                   slo: SloSpec | None = None, curve: BandwidthCurve | None = None,
                   cost: StepCostModel | None = None) -> SimResult:
    """Event-driven run over ``requests`` (mutated in place with their timelines)."""
    policy = policy or Policy()
    check_capacity(spec, cfg)
    for r in requests:
        if r.input_len + r.output_len > spec.max_seq:
            raise ServeError(f"request {r.id} needs {r.input_len + r.output_len} tokens of "
                             f"context, model allows {spec.max_seq}")
    cost = cost or StepCostModel(spec, cfg, curve)
    eng = _Engine(requests, spec, cfg, policy, cost)

    last_arrival = max((r.arrival_s for r in requests), default=0.0)
    drain = policy.drain_s if policy.drain_s is not None else max(30.0, 0.25 * last_arrival)
    horizon = last_arrival + drain

    ARRIVAL, STEP_DONE = 0, 1
    events = [(r.arrival_s, ARRIVAL, i, r) for i, r in enumerate(requests)]
    heapq.heapify(events)
    seq = len(events)
    busy = False
    now = 0.0
    while events:
        now, kind, _, payload = heapq.heappop(events)
        if now > horizon:
            break
        if kind == ARRIVAL:
            eng.waiting.append(payload)
        else:
            eng.finish_step(now)
            busy = False
        # same-time arrivals join before the next step starts
        if not busy and not (events and events[0][0] == now and events[0][1] == ARRIVAL):
            dt = eng.run_step(now)
            if dt is not None:
                heapq.heappush(events, (now + dt, STEP_DONE, seq, None))
                seq += 1
                busy = True
    end = min(now, horizon) if requests else 0.0
    report = build_report(requests, eng.steps, cfg, end, last_arrival, policy, slo)
    return SimResult(report=report, steps=eng.steps, requests=requests)


# ---------------------------------------------------------------------------
# reporting


def request_meets_slo(r: Request, slo: SloSpec):
    """``(ok, name of the first violated metric or None)``."""
    if not r.done:
        return False, "unfinished"
    if r.ttft() > slo.ttft_limit_s:
        return False, "ttft"
    gaps = r.tbt_gaps()
    if gaps and np.percentile(gaps, slo.tbt_percentile) > slo.tbt_limit_s:
        return False, "tbt"
    return True, None


def utilization_report(steps, cfg: HardwareConfig, wall_s: float | None = None) -> dict:
    """Busy time over wall time per engine, and streamed bytes over DRAM capacity."""
    if wall_s is None:
        wall_s = (steps[-1].start_s + steps[-1].seconds) if steps else 0.0
    if wall_s <= 0:
        return {"sa": 0.0, "mt": 0.0, "dram_bw": 0.0}
    sa = sum(s.sa_busy for s in steps)
    mt = sum(s.mt_busy for s in steps)
    nbytes = sum(s.dram_bytes for s in steps)
    return {"sa": min(1.0, sa / wall_s), "mt": min(1.0, mt / wall_s),
            "dram_bw": min(1.0, nbytes / (cfg.dram_bw * wall_s))}


def build_report(requests, steps, cfg, end_s, last_arrival, policy, slo) -> QoSReport:
    warm = policy.warmup_frac * last_arrival
    window = [r for r in requests if r.arrival_s >= warm]
    done = [r for r in window if r.done]
    completed_all = sum(1 for r in requests if r.done)
    admitted = len(requests)

    ttft = [r.ttft() for r in done]
    # per-request mean gap, then distribution across requests
    tbt = [float(np.mean(g)) for g in (r.tbt_gaps() for r in done) if g]
    e2e = [r.finish_s - r.arrival_s for r in done]

    span = end_s - warm
    tokens = sum(sum(1 for t in r.per_token_times if t >= warm) for r in requests)
    fin = sum(1 for r in requests if r.done and r.finish_s >= warm)
    util = utilization_report(steps, cfg, end_s)

    attain = None
    violations = {}
    if slo is not None:
        ok = 0
        for r in window:
            good, why = request_meets_slo(r, slo)
            ok += good
            if why:
                violations[why] = violations.get(why, 0) + 1
        attain = ok / len(window) if window else 1.0
    return QoSReport(ttft=Dist.of(ttft), tbt=Dist.of(tbt), e2e=Dist.of(e2e),
                     throughput_rps=fin / span if span > 0 else 0.0,
                     throughput_tps=tokens / span if span > 0 else 0.0,
                     engine_utilization={"sa": util["sa"], "mt": util["mt"]},
                     dram_bw_utilization=util["dram_bw"], slo_attainment=attain,
                     completed=completed_all, in_flight=admitted - completed_all,
                     admitted=admitted, measured=len(window), violations=violations)


def write_step_trace(steps, path):
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["start_s", "seconds", "mode", "mt_busy", "sa_busy", "dram_bytes",
                    "decode_batch", "prefill_tokens"])
        for s in steps:
            w.writerow([f"{s.start_s:.9g}", f"{s.seconds:.9g}", s.mode, f"{s.mt_busy:.9g}",
                        f"{s.sa_busy:.9g}", f"{s.dram_bytes:.9g}", s.decode_batch,
                        s.prefill_tokens])


# ---------------------------------------------------------------------------
# rate search


@dataclass
class RateResult:
    rate: float
    attainment: float
    violating: str | None
    evaluations: list


def capacity_rate(spec: ModelSpec, cfg: HardwareConfig, rows, policy: Policy | None = None,
                  curve: BandwidthCurve | None = None) -> float:
    """Requests/s the machine sustains with a full decode batch and chunked prefill."""
    policy = policy or Policy()
    rows = load_trace(rows) if isinstance(rows, (str, Path)) else list(rows)
    mean_in = float(np.mean([i for i, _ in rows]))
    mean_out = float(np.mean([o for _, o in rows]))
    cost = StepCostModel(spec, cfg, curve)
    ctx = min(spec.max_seq - 1, int(mean_in + mean_out / 2))
    batch = policy.max_batch
    _, lat = cost([ctx] * batch)
    decode_tps = batch / lat.seconds
    chunk = min(policy.chunk_size, int(mean_in))
    _, lat_p = cost(None, (0, 0, chunk))
    prefill_s_per_req = lat_p.seconds * mean_in / chunk
    # each request costs mean_out decode token-slots plus its prefill time
    return 1.0 / (mean_out / decode_tps + prefill_s_per_req)


def max_rate_under_slo(spec: ModelSpec, cfg: HardwareConfig, slo: SloSpec, workload_source=None,
                       seed: int = 0, duration_s: float = 60.0, policy: Policy | None = None,
                       rel_precision: float = 0.02, curve: BandwidthCurve | None = None) -> RateResult:
    """Largest Poisson rate whose measured SLO attainment meets the target."""
    policy = policy or Policy()
    rows = load_trace(workload_source or DEFAULT_TRACE) \
        if workload_source is None or isinstance(workload_source, (str, Path)) \
        else list(workload_source)
    cost = StepCostModel(spec, cfg, curve)
    evals = []

    def attain(rate):
        reqs = generate_requests(rows, rate, duration_s, seed, max_seq=spec.max_seq)
        if not reqs:
            return 1.0, None
        rep = run_simulation(reqs, spec, cfg, policy, slo, cost=cost).report
        worst = max(rep.violations, key=rep.violations.get) if rep.violations else None
        evals.append((rate, rep.slo_attainment))
        return rep.slo_attainment, worst

    cap = capacity_rate(spec, cfg, rows, policy, curve)
    # a near-idle machine: roughly one request in flight at a time
    floor_rate = max(cap * 1e-3, 2.0 / duration_s)
    a, why = attain(floor_rate)
    if a < slo.attainment_target:
        return RateResult(rate=0.0, attainment=a, violating=why, evaluations=evals)
    lo, hi = floor_rate, cap
    a_hi, _ = attain(hi)
    while a_hi >= slo.attainment_target:
        lo, hi = hi, hi * 2
        a_hi, _ = attain(hi)
    best = a
    while hi / lo - 1 > rel_precision:
        mid = math.sqrt(lo * hi)
        a_mid, _ = attain(mid)
        if a_mid >= slo.attainment_target:
            lo, best = mid, a_mid
        else:
            hi = mid
    return RateResult(rate=lo, attainment=best, violating=None, evaluations=evals)


def sequential_floor(spec, cfg, req_in, req_out, policy=None, curve=None):
    """Isolated-request latency: prefill all chunks then ``req_out`` decode steps."""
    policy = policy or Policy()
    cost = StepCostModel(spec, cfg, curve)
    t = 0.0
    done = 0
    while done < req_in:
        length = min(policy.chunk_size, req_in - done)
        t += cost(None, (0, done, length))[1].seconds
        done += length
    ttft = t
    for j in range(req_out):
        t += cost([req_in + j])[1].seconds
        if j == 0:
            ttft = t
    return ttft, t


__all__ = ["Request", "SloSpec", "Policy", "QoSReport", "Dist", "StepRecord", "SimResult",
           "generate_requests", "run_simulation", "max_rate_under_slo", "utilization_report",
           "load_trace", "save_trace", "ingest_chat_export", "StepCostModel", "RateResult",
           "capacity_rate", "check_capacity"]
