"""Independent reference implementations used to derive expected test values.

None of these import the code paths they check beyond plain data types.
"""

from __future__ import annotations

import numpy as np


def systolic_ws_simulate(a, w):
    """Cycle-level weight-stationary array: ``w`` (rows x cols) pinned in PEs,
    activations ``a`` (m x rows) enter skewed from the left, partial sums flow
    down.  Returns ``(a @ w, cycles until the last output leaves the array)``."""
    m, rows = a.shape
    rows_w, cols = w.shape
    assert rows == rows_w
    act = np.zeros((rows, cols))  # activation register in each PE
    act_valid = np.full((rows, cols), -1)  # which input row the activation belongs to
    psum = np.zeros((rows, cols))
    psum_row = np.full((rows, cols), -1)
    out = np.zeros((m, cols))
    got = np.zeros((m, cols), dtype=bool)
    cycle = 0
    while not got.all():
        new_act = np.zeros_like(act)
        new_valid = np.full_like(act_valid, -1)
        new_psum = np.zeros_like(psum)
        new_prow = np.full_like(psum_row, -1)
        for i in range(rows):
            for j in range(cols):
                if j == 0:
                    t = cycle - i  # row i of the input is skewed by i cycles
                    x, tv = (a[t, i], t) if 0 <= t < m else (0.0, -1)
                else:
                    x, tv = act[i, j - 1], act_valid[i, j - 1]
                if tv < 0:
                    continue
                if i == 0:
                    p = 0.0
                else:
                    assert psum_row[i - 1, j] == tv
                    p = psum[i - 1, j]
                new_act[i, j], new_valid[i, j] = x, tv
                new_psum[i, j], new_prow[i, j] = p + x * w[i, j], tv
        act, act_valid, psum, psum_row = new_act, new_valid, new_psum, new_prow
        for j in range(cols):
            t = psum_row[rows - 1, j]
            if t >= 0:
                out[t, j] = psum[rows - 1, j]
                got[t, j] = True
        cycle += 1
    return out, cycle


def tiled_ws_cycles(m, k, n, rows, cols):
    """Run every weight tile through the cycle simulator back to back."""
    rng = np.random.default_rng(0)
    a = rng.standard_normal((m, k))
    b = rng.standard_normal((k, n))
    total = 0
    c = np.zeros((m, n))
    for k0 in range(0, k, rows):
        for n0 in range(0, n, cols):
            wt = np.zeros((rows, cols))
            blk = b[k0:k0 + rows, n0:n0 + cols]
            wt[:blk.shape[0], :blk.shape[1]] = blk
            at = np.zeros((m, rows))
            at[:, :min(rows, k - k0)] = a[:, k0:k0 + rows]
            o, cyc = systolic_ws_simulate(at, wt)
            c[:, n0:n0 + cols] += o[:, :blk.shape[1]]
            total += cyc
    assert np.allclose(c, a @ b)
    return total


def liveness_walk(ops, sizes):
    """Per-op live bytes: every tensor produced earlier (or never produced, i.e.
    a layer input) that some later op still reads, plus the op's own operands."""
    produced_at = {}
    for i, (_, ins, outs) in enumerate(ops):
        for t in outs:
            produced_at.setdefault(t, i)
    last_use = {}
    for i, (_, ins, outs) in enumerate(ops):
        for t in ins + outs:
            last_use[t] = i
    out = []
    for i, (name, ins, outs) in enumerate(ops):
        live = set(ins) | set(outs)
        for t, last in last_use.items():
            born = produced_at.get(t, -1)
            if born < i and last > i:
                live.add(t)
        out.append((name, sum(sizes[t] for t in live)))
    return out


def decode_step_flops(params_matmul, num_layers, num_heads, head_dim, contexts,
                      hidden, ffn_dim, vocab):
    """Hand count of one decode step's FLOPs.

    Matmuls: 2 FLOPs per weight per request.  Attention: QK^T and PV each cost
    2*heads*head_dim*ctx per layer.  Vector work: norms 4/elem, softmax 5/score,
    residual adds 1/elem, activation 4/elem.
    """
    b = len(contexts)
    mm = 2 * params_matmul * b
    attn = sum(2 * 2 * num_layers * num_heads * head_dim * c for c in contexts)
    vec_layer = b * (4 * hidden * 2 + 1 * hidden * 2 + 4 * ffn_dim)
    soft = sum(5 * num_heads * c for c in contexts) * num_layers
    final = 4 * hidden * b
    return mm + attn + vec_layer * num_layers + soft + final


class HandSteppedServer:
    """Step-at-a-time reference for the serving loop.

    Rules: FIFO admission; at each step boundary all arrivals up to ``now`` are
    queued; at most one request is in prefill, one chunk per step; a request
    whose prompt finishes decodes from the next step on, one token per step.
    If the machine is idle the clock jumps to the next arrival.  ``cost``
    returns ``(step seconds, offset at which decode tokens are out)``.
    """

    def __init__(self, cost, chunk, max_batch=256):
        self.cost = cost
        self.chunk = chunk
        self.max_batch = max_batch

    def run(self, reqs):
        pending = sorted(reqs, key=lambda r: (r.arrival_s, r.id))
        queue, decoding = [], []
        pre = None  # [req, done]
        gen = {}
        timeline = {r.id: [] for r in reqs}
        prefill_done = {}
        now = 0.0
        while pending or queue or decoding or pre:
            while pending and pending[0].arrival_s <= now:
                queue.append(pending.pop(0))
            if pre is None and queue and len(decoding) + 1 <= self.max_batch:
                pre = [queue.pop(0), 0]
            if not decoding and pre is None:
                now = pending[0].arrival_s
                continue
            ctx = [r.input_len + gen[r.id] for r in decoding]
            chunk = None
            if pre is not None:
                r, done = pre
                chunk = (r.id, done, min(self.chunk, r.input_len - done))
            dt, emit = self.cost(ctx, chunk)
            start = now
            now = start + dt
            keep = []
            for r in decoding:
                gen[r.id] += 1
                timeline[r.id].append(start + emit)
                if gen[r.id] < r.output_len:
                    keep.append(r)
            decoding = keep
            if chunk is not None:
                pre[1] += chunk[2]
                if pre[1] == pre[0].input_len:
                    prefill_done[pre[0].id] = now
                    gen[pre[0].id] = 0
                    decoding.append(pre[0])
                    pre = None
        return timeline, prefill_done
