"""Command-line driver: ``silo opt``, ``silo run`` and ``silo bench``."""

from __future__ import annotations

import argparse
import json
import random
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from silo import interp
from silo.dataflow import body_graph, to_dot
from silo.dsl import parse, print_program
from silo.errors import SiloError
from silo.ir import Loop, Program
from silo.lower import emit_report, lower, run_compiled
from silo.memsched import schedule_report
from silo.pipeline import PRESETS, passes_for, run_passes

EXIT_OK, EXIT_INVALID, EXIT_REFUSED = 0, 1, 2


# ---------------------------------------------------------------------------
# configuration files


def read_config(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; quotes are stripped."""
    out: dict[str, str] = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("_", "-")] = value.strip("\"'")
    return out


def _parse_sets(items: Sequence[str] | None) -> dict[str, int]:
    out = {}
    for item in items or ():
        name, _, value = item.partition("=")
        if not name or not value:
            raise ValueError(f"--set expects NAME=INT, got {item!r}")
        out[name.strip()] = int(value)
    return out


def _load(path: str) -> Program:
    return parse(Path(path).read_text())


def _complete_params(program: Program, given: dict[str, int], seed: int) -> dict[str, int]:
    rng = random.Random(seed)
    out: dict[str, int] = {}
    for p in program.params:
        if p.name in given:
            out[p.name] = given[p.name]
        else:
            lo = p.lower.evaluate(out) if p.lower is not None else 1
            out[p.name] = max(lo, min(lo + rng.randint(0, 3), 32))
    extra = set(given) - set(out)
    if extra:
        raise ValueError(f"unknown parameters {sorted(extra)}")
    return out


def _compare(expect: dict, got: dict, names, rtol: float = 1e-12) -> list[str]:
    bad = []
    for n in names:
        a, b = np.asarray(expect[n]), np.asarray(got[n])
        if a.dtype.kind == "f":
            ok = a.shape == b.shape and bool(np.all(np.isclose(a, b, rtol=rtol, atol=0.0, equal_nan=True)))
        else:
            ok = np.array_equal(a, b)
        if not ok:
            bad.append(n)
    return bad


# ---------------------------------------------------------------------------
# opt


def _top_nests_parallel(program: Program) -> list[str]:
    """Ids of top-level loop nests without any parallel loop."""
    missing = []
    for n in program.body:
        if isinstance(n, Loop) and not any(lp.parallel for lp in _loops_in(n)):
            missing.append(n.id)
    return missing


def _loops_in(loop: Loop):
    yield loop
    for n in loop.body:
        if isinstance(n, Loop):
            yield from _loops_in(n)


def cmd_opt(args: argparse.Namespace) -> int:
    try:
        program = _load(args.file)
    except (SiloError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    originals = {lp.id for lp in program.loops()}
    passes = passes_for(args.parallelize, args.memsched, args.config)
    result = run_passes(program, passes, collect_records=True)
    out = result.program

    if args.require_parallel:
        missing = [lid for lid in _top_nests_parallel(out) if lid in originals]
        if missing:
            reasons = [d for d in result.decisions if d.get("loop") in missing and d.get("reason")]
            print(f"refused: no parallel loop in nest(s) {', '.join(missing)}", file=sys.stderr)
            for d in reasons:
                print(f"  {d['loop']}: {d['reason']}", file=sys.stderr)
            return EXIT_REFUSED

    c_path = Path(args.output) if args.output else Path(args.file + ".out.c")
    c_path.write_text(lower(out))
    report_extra = {
        "passes": list(result.passes),
        "log": result.log,
        "decisions": result.decisions,
        "eliminated": [r.to_json() for r in result.eliminated()],
        "dependences_before": [r.to_json() for r in result.records_before],
        "memory_schedules": schedule_report(out),
    }
    report_path = Path(args.report) if args.report else Path(args.file + ".report.json")
    report_path.write_text(emit_report(out, report_extra))
    if args.emit_silo:
        Path(args.emit_silo).write_text(print_program(out))

    if args.report_deps:
        print(json.dumps({"before": report_extra["dependences_before"],
                          "after": [r.to_json() for r in result.records_after],
                          "eliminated": report_extra["eliminated"]}, indent=2))
    if args.report_sync:
        plans = [d for d in result.decisions if d.get("schedule") == "doacross"]
        print(json.dumps(plans, indent=2))
    if args.report_sched:
        print(json.dumps(report_extra["memory_schedules"], indent=2, sort_keys=True))
    if args.dump_dataflow:
        for lp in out.loops():
            print(to_dot(body_graph(out, lp)))

    sched = ", ".join(f"{lp.id}={lp.schedule}" for lp in out.loops() if lp.schedule != "sequential") or "all sequential"
    print(f"{args.file}: passes [{', '.join(result.passes) or 'none'}]; {sched}; "
          f"{len(out.pointers)} pointer(s), {sum(len(lp.prefetch) for lp in out.loops())} prefetch hint(s)")
    print(f"wrote {c_path} and {report_path}")

    if args.check:
        params = _complete_params(program, _parse_sets(args.set), args.rand_seed)
        data = interp.random_inputs(program, params, args.rand_seed)
        want = interp.run(program, params, data)
        got = interp.run(out, params, data)
        bad = _compare(want, got, program.live_outs())
        print(f"check {params}: {'ok' if not bad else 'MISMATCH in ' + ', '.join(bad)}")
        if bad:
            return EXIT_INVALID
    return EXIT_OK


# ---------------------------------------------------------------------------
# run


def _read_inputs(program: Program, params: dict[str, int], directory: Path, seed: int) -> dict[str, np.ndarray]:
    data = interp.random_inputs(program, params, seed)
    sizes = interp.allocate(program, params)
    for c in program.containers:
        dt = np.float64 if c.dtype == "f64" else np.int64
        binf, csvf = directory / f"{c.name}.bin", directory / f"{c.name}.csv"
        if binf.exists():
            arr = np.fromfile(binf, dtype=dt)
        elif csvf.exists():
            arr = np.loadtxt(csvf, delimiter=",", dtype=dt, ndmin=1).ravel()
        else:
            continue
        if arr.size != sizes[c.name]:
            raise ValueError(f"{c.name}: file has {arr.size} values, container needs {sizes[c.name]}")
        data[c.name] = arr
    return data


def cmd_run(args: argparse.Namespace) -> int:
    try:
        program = _load(args.file)
    except (SiloError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    params = _complete_params(program, _parse_sets(args.set), args.rand_seed)
    if args.preset != "off":
        program = run_passes(program, PRESETS[args.preset]).program
    data = (
        _read_inputs(program, params, Path(args.inputs), args.rand_seed)
        if args.inputs
        else interp.random_inputs(program, params, args.rand_seed)
    )
    try:
        if args.workers > 1:
            out = interp.pipelined_run(program, args.workers, params, data, seed=args.rand_seed)
        else:
            out = interp.run(program, params, data)
    except SiloError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(f"params {params}")
    for name in program.live_outs():
        arr = out[name]
        print(f"{name}: {arr.size} values, sum {float(np.sum(arr)):.17g}")
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        for name in program.live_outs():
            if args.format == "csv":
                np.savetxt(d / f"{name}.csv", out[name][None, :], delimiter=",", fmt="%.17g")
            else:
                out[name].tofile(d / f"{name}.bin")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def check_kernel(program: Program, presets: Sequence[str], seeds: int, compiled: bool, workers: Sequence[int] = (4,)) -> list[str]:
    """Run every preset against the untransformed oracle; return failures."""
    failures = []
    transformed = {name: run_passes(program, PRESETS[name]).program for name in presets}
    for seed in range(seeds):
        params = interp.random_params(program, random.Random(seed))
        data = interp.random_inputs(program, params, seed)
        want = interp.run(program, params, data)
        for name, prog in transformed.items():
            got = interp.run(prog, params, data)
            bad = _compare(want, got, program.live_outs())
            for w in workers:
                if any(lp.parallel for lp in prog.loops()):
                    piped = interp.pipelined_run(prog, w, params, data, seed=seed)
                    bad += [f"{n} (pipelined x{w})" for n in _compare(want, piped, program.live_outs())]
            if compiled:
                got_c = run_compiled(prog, params, data)
                bad += [f"{n} (C)" for n in _compare(want, got_c, program.live_outs())]
            if bad:
                failures.append(f"preset {name}, seed {seed}, params {params}: {', '.join(bad)}")
    return failures


def cmd_bench(args: argparse.Namespace) -> int:
    root = Path(args.directory)
    files = sorted(root.glob("*.silo")) if root.is_dir() else [root]
    presets = args.presets.split(",") if args.presets else list(PRESETS)
    status = EXIT_OK
    for f in files:
        try:
            program = parse(f.read_text())
        except SiloError as exc:
            print(f"{f.name}: parse error: {exc}")
            status = EXIT_INVALID
            continue
        t0 = time.perf_counter()
        summary = []
        for name in presets:
            prog = run_passes(program, PRESETS[name]).program
            sched = "".join({"sequential": "s", "doall": "p", "doacross": "x"}[lp.schedule] for lp in prog.loops())
            summary.append(f"{name}:{sched}")
        line = f"{f.name:28s} {' '.join(summary)}"
        if args.check:
            failures = check_kernel(program, presets, args.seeds, args.compile)
            line += f"  check {'ok' if not failures else 'FAILED'} ({time.perf_counter() - t0:.1f}s)"
            print(line)
            for msg in failures:
                print(f"    {msg}")
            if failures:
                status = EXIT_INVALID
        else:
            print(line)
    return status


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # exit status 2 is reserved for refused transformations
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="silo", description="Symbolic loop-nest optimizer.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    opt = sub.add_parser("opt", help="optimize a kernel and emit C")
    opt.add_argument("file")
    opt.add_argument("--parallelize", choices=("off", "doall", "doacross"), default="off")
    opt.add_argument("--memsched", choices=("off", "prefetch", "ptrinc", "all"), default="off")
    opt.add_argument("--config", help="preset (1, 2, off, all, ...) or path to a key=value config file")
    opt.add_argument("--report-deps", action="store_true", help="print dependence records as JSON")
    opt.add_argument("--report-sync", action="store_true", help="print synchronization plans as JSON")
    opt.add_argument("--report-sched", action="store_true", help="print memory schedules as JSON")
    opt.add_argument("--dump-dataflow", action="store_true", help="print loop-body dataflow graphs (DOT)")
    opt.add_argument("--require-parallel", action="store_true", help="exit 2 unless every nest is parallel")
    opt.add_argument("--set", action="append", metavar="NAME=INT", help="parameter value for --check")
    opt.add_argument("--check", action="store_true", help="compare against the untransformed program")
    opt.add_argument("--rand-seed", type=int, default=0)
    opt.add_argument("-o", "--output", help="C output path (default <input>.out.c)")
    opt.add_argument("--report", help="JSON report path (default <input>.report.json)")
    opt.add_argument("--emit-silo", metavar="PATH", help="also write the transformed kernel as DSL text")
    opt.set_defaults(func=cmd_opt)

    run = sub.add_parser("run", help="interpret a kernel")
    run.add_argument("file")
    run.add_argument("--set", action="append", metavar="NAME=INT")
    run.add_argument("--rand-seed", type=int, default=0)
    run.add_argument("--preset", choices=tuple(PRESETS), default="off")
    run.add_argument("--workers", type=int, default=1, help="simulate parallel loops with this many workers")
    run.add_argument("--inputs", help="directory of <container>.bin or <container>.csv files")
    run.add_argument("--out", help="directory for live-out containers")
    run.add_argument("--format", choices=("bin", "csv"), default="bin")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="run corpus kernels through every preset")
    bench.add_argument("directory")
    bench.add_argument("--check", action="store_true", help="verify against the interpreter oracle")
    bench.add_argument("--compile", action="store_true", help="also compile and run the emitted C")
    bench.add_argument("--seeds", type=int, default=3)
    bench.add_argument("--presets", help=f"comma-separated subset of {','.join(PRESETS)}")
    bench.set_defaults(func=cmd_bench)
    return ap


def _apply_config(argv: list[str]) -> list[str]:
    """Expand ``--config=<file>`` into the flags it lists."""
    out = []
    for k, a in enumerate(argv):
        value = None
        if a.startswith("--config="):
            value = a.split("=", 1)[1]
        elif a == "--config" and k + 1 < len(argv):
            value = argv[k + 1]
        if value is not None and Path(value).is_file():
            for key, v in read_config(value).items():
                if v.lower() in ("true", "yes", "1") and key in ("report-deps", "report-sync", "report-sched",
                                                                   "dump-dataflow", "require-parallel", "check"):
                    out.append(f"--{key}")
                elif v.lower() in ("false", "no", "0"):
                    continue
                elif key == "set":
                    out.extend(f"--set={s.strip()}" for s in v.split(","))
                else:
                    out.append(f"--{key}={v}")
            if a == "--config":
                argv[k + 1] = "\0"
            continue
        if a != "\0":
            out.append(a)
    return out


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        try:
            args = build_parser().parse_args(_apply_config(argv))
        except SystemExit as stop:  # usage errors and --help
            return stop.code if isinstance(stop.code, int) else EXIT_INVALID
        return args.func(args)
    except (SiloError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
