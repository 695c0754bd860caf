"""Command-line entry point: ``hdasim search | simulate | sweep``.

Exit codes: 0 success (and, for search, both requirement sides met),
2 invalid input, 3 infeasible search.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__, comm
from .archspec import ConfigError, HardwareConfig, reference_design, validate_config
from .kernels import KernelError
from .memmodel import SramSizingError
from .search import SearchConstraints, SearchError, run_search
from .servesim import (DEFAULT_TRACE, Policy, ServeError, SloSpec, StepCostModel, check_capacity,
                       generate_requests, load_trace, run_simulation, write_step_trace)
from .workload import FIXTURE_DIR, WorkloadError, load_model_spec

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INFEASIBLE = 3

SWEEP_AXES = ("batch", "seq", "devices", "rate")


@dataclass
class RunManifest:
    subcommand: str
    inputs: dict
    seed: int
    out_dir: str
    tool_version: str = __version__
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _load_model(arg):
    path = Path(arg)
    if not path.exists() and (FIXTURE_DIR / f"{arg}.json").exists():
        path = FIXTURE_DIR / f"{arg}.json"
    return load_model_spec(path), str(path)


def _load_hw(arg):
    if arg is None:
        return reference_design(), "reference_design"
    return HardwareConfig.load(arg), str(arg)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, float) and not math.isfinite(o):
        return None
    return str(o)


def _csv_with_manifest(path, manifest, header, rows):
    with Path(path).open("w", newline="") as f:
        f.write("# manifest: " + json.dumps(manifest.to_dict(), sort_keys=True) + "\n")
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def cmd_search(args) -> int:
    spec, model_path = _load_model(args.model)
    constraints = SearchConstraints.load(args.constraints)
    trace = args.trace or DEFAULT_TRACE
    rows = load_trace(trace)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_search(constraints, spec, rows, args.seed)
    manifest = RunManifest("search", {"model": model_path, "constraints": str(args.constraints),
                                      "trace": str(trace)}, args.seed, str(out),
                           config=constraints.to_dict())
    doc = result.to_dict()
    doc["manifest"] = manifest.to_dict()
    _write_json(out / "search_result.json", doc)
    result.config.save(out / "hw_config.json")
    if result.iterations:
        keys = sorted({k for e in result.iterations for k in e})
        _csv_with_manifest(out / "iterations.csv", manifest, keys,
                           [[e.get(k, "") for k in keys] for e in result.iterations])
    if result.steps:
        write_step_trace(result.steps, out / "step_trace.csv")
    print(f"config: {result.iterations[-1]['config'] if result.iterations else ''}")
    print(f"max rate under SLO: {result.max_rate:.2f} req/s; user met: {result.met_user}; "
          f"vendor met: {result.met_vendor}")
    if result.deficit:
        print(f"deficit: {result.deficit}")
    return EXIT_OK if result.met_user and result.met_vendor else EXIT_INFEASIBLE


def cmd_simulate(args) -> int:
    if args.rate is None or not args.rate > 0:
        raise ServeError("--rate must be > 0")
    spec, model_path = _load_model(args.model)
    cfg, hw_path = _load_hw(args.hw)
    check_capacity(spec, cfg)
    trace = args.trace or DEFAULT_TRACE
    slo = SloSpec.from_dict(json.loads(Path(args.slo).read_text())) if args.slo else SloSpec()
    reqs = generate_requests(trace, args.rate, args.duration, args.seed, max_seq=spec.max_seq)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = run_simulation(reqs, spec, cfg, Policy(max_batch=args.max_batch), slo)
    manifest = RunManifest("simulate", {"model": model_path, "hw": hw_path, "trace": str(trace)},
                           args.seed, str(out),
                           config={"hw": cfg.to_dict(), "rate": args.rate,
                                   "duration": args.duration, "slo": slo.to_dict(),
                                   "max_batch": args.max_batch})
    doc = sim.report.to_dict()
    doc["manifest"] = manifest.to_dict()
    _write_json(out / "report.json", doc)
    write_step_trace(sim.steps, out / "step_trace.csv")
    r = sim.report
    print(f"requests {r.admitted}, completed {r.completed}, TTFT mean {r.ttft.mean:.4f} s, "
          f"TBT mean {r.tbt.mean:.4f} s, SLO attainment {r.slo_attainment:.3f}")
    return EXIT_OK


def _parse_values(text, axis):
    vals = [v for v in text.replace(",", " ").split() if v]
    if not vals:
        raise ServeError("--values is empty")
    conv = float if axis == "rate" else int
    try:
        return [conv(v) for v in vals]
    except ValueError:
        raise ServeError(f"--values: cannot parse {text!r} for axis {axis}") from None


def sweep_rows(spec, cfg, axis, values, batch=16, seq=1024, seed=0, duration=30.0, trace=None):
    """One result row per value: latency and utilization columns."""
    rows = []
    for v in values:
        if axis == "rate":
            reqs = generate_requests(trace or DEFAULT_TRACE, v, duration, seed,
                                     max_seq=spec.max_seq)
            r = run_simulation(reqs, spec, cfg).report
            rows.append([v, r.ttft.mean, r.tbt.mean, r.engine_utilization["mt"],
                         r.engine_utilization["sa"], r.dram_bw_utilization, r.throughput_tps])
            continue
        b, s, c = batch, seq, cfg
        if axis == "batch":
            b = v
        elif axis == "seq":
            s = v
        if v < 1:
            raise ServeError(f"{axis} values must be >= 1")
        if axis == "devices":
            c = validate_config(replace(cfg, device_count=v))
            check_capacity(spec, c)
        cost = StepCostModel(spec, c)
        _, dec = cost([s] * b)
        ttft = 0.0
        done = 0
        while done < s:
            length = min(Policy().chunk_size, s - done)
            ttft += cost(None, (0, done, length))[1].seconds
            done += length
        ttft += dec.seconds
        t = dec.seconds
        rows.append([v, ttft, t, dec.mt_busy / t, dec.sa_busy / t,
                     dec.dram_bytes / (c.dram_bw * t), b / t])
    return rows


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise ServeError(f"--axis must be one of {SWEEP_AXES}")
    values = _parse_values(args.values or "", args.axis)
    spec, model_path = _load_model(args.model)
    cfg, hw_path = _load_hw(args.hw)
    if args.axis != "devices":
        check_capacity(spec, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = sweep_rows(spec, cfg, args.axis, values, args.batch, args.seq, args.seed,
                      args.duration, args.trace)
    manifest = RunManifest("sweep", {"model": model_path, "hw": hw_path,
                                     "trace": str(args.trace or DEFAULT_TRACE)},
                           args.seed, str(out),
                           config={"hw": cfg.to_dict(), "axis": args.axis, "values": values,
                                   "batch": args.batch, "seq": args.seq})
    header = [args.axis, "ttft_s", "tbt_s", "mt_util", "sa_util", "dram_util", "tokens_per_s"]
    _csv_with_manifest(out / f"sweep_{args.axis}.csv", manifest, header,
                       [[f"{x:.9g}" if isinstance(x, float) else x for x in r] for r in rows])
    for r in rows:
        print(f"{args.axis}={r[0]}: TTFT {r[1]:.4f} s, TBT {r[2]:.4f} s")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="hdasim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--model", required=True, help="model JSON file or shipped fixture name")
        sp.add_argument("--trace", help="CSV with input_len,output_len (default: synthetic chatbot)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("search", help="run the three-step architecture search")
    common(s)
    s.add_argument("--constraints", required=True)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("simulate", help="simulate serving on one hardware config")
    common(s)
    s.add_argument("--hw", help="hardware JSON (default: reference design)")
    s.add_argument("--rate", type=float, required=True, help="requests per second")
    s.add_argument("--duration", type=float, default=60.0)
    s.add_argument("--slo", help="SLO JSON (ttft_limit_s, tbt_limit_s, ...)")
    s.add_argument("--max-batch", type=int, default=256)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="sweep one axis and tabulate latency/utilization")
    common(s)
    s.add_argument("--hw")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma separated values")
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--seq", type=int, default=1024)
    s.add_argument("--duration", type=float, default=30.0)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, WorkloadError, ServeError, SearchError, SramSizingError, KernelError,
            comm.CommError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
