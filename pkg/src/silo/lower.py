"""Lowering to C11 with OpenMP, plus helpers to compile and call the result.

Emission rules:

* sequential loops become plain ``for`` loops;
* ``doall`` loops iterate over a trip counter under ``omp parallel for``;
* ``doacross`` loops do the same with ``schedule(static, 1)`` and a flag per
  point of the synchronization channel; a release stores the flag with
  release ordering and a wait spins on acquire loads;
* prefetch hints become ``__builtin_prefetch`` right after the loop header;
* pointer plans become pointer declarations, increments and resets, and the
  scheduled accesses index the pointer by a constant.
"""

from __future__ import annotations

import ctypes
import hashlib
import json
import os
import subprocess
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from silo.errors import UnloweredSchedule
from silo.ir import (
    Access,
    Bin,
    Call,
    Container,
    Loop,
    Neg,
    Num,
    Op,
    Program,
    Ref,
    Release,
    Statement,
    Val,
    Wait,
    is_countable,
    walk,
)

__all__ = ["LowerOptions", "compile_shared", "emit_report", "lower", "run_compiled"]

_C_KEYWORDS = frozenset(
    """auto break case char const continue default do double else enum extern float for goto if inline
    int long register restrict return short signed sizeof static struct switch typedef union unsigned
    void volatile while main free malloc calloc exp log sqrt fabs fmax fmin labs""".split()
)

_PRELUDE = r"""#include <math.h>
#include <sched.h>
#include <stdlib.h>
#ifdef _OPENMP
#include <omp.h>
#endif

static inline long silo_log2(long x) { long r = -1; while (x > 0) { x >>= 1; r++; } return r; }
static inline long silo_ceildiv(long a, long b) {
  long q = a / b, r = a % b;
  return (r != 0 && ((r > 0) == (b > 0))) ? q + 1 : q;
}
static inline long silo_min(long a, long b) { return a < b ? a : b; }
static inline long silo_max(long a, long b) { return a > b ? a : b; }
static inline long silo_trips(long start, long end, long stride) {
  if (stride > 0) return start < end ? silo_ceildiv(end - start, stride) : 0;
  return start > end ? silo_ceildiv(start - end, -stride) : 0;
}
/* position of v in the iteration space, or -1 when it is not visited */
static inline long silo_slot(long v, long start, long stride, long trips) {
  long d = v - start;
  if (d % stride != 0) return -1;
  long t = d / stride;
  return (t >= 0 && t < trips) ? t : -1;
}
static inline void silo_wait(const int *flag) {
  while (!__atomic_load_n(flag, __ATOMIC_ACQUIRE)) sched_yield();
}
static inline void silo_release(int *flag) { __atomic_store_n(flag, 1, __ATOMIC_RELEASE); }

void silo_set_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(n);
#else
  (void)n;
#endif
}
"""


class LowerOptions:
    """Knobs for emission.  ``prefetch_locality`` is the temporal-locality
    argument given to ``__builtin_prefetch`` when a hint has no level."""

    def __init__(self, kernel_name: str = "silo_kernel", prefetch_locality: int = 2, comments: bool = True):
        self.kernel_name = kernel_name
        self.prefetch_locality = prefetch_locality
        self.comments = comments


def _ctype(dtype: str) -> str:
    return "double" if dtype == "f64" else "long"


class _Emitter:
    def __init__(self, program: Program, opts: LowerOptions):
        self.p = program
        self.opts = opts
        self.lines: list[str] = []
        self.scope: dict[str, Container] = {c.name: c for c in program.containers}
        self.plans = {pp.id: pp for pp in program.pointers}
        self.init_at: dict[str, list] = {}
        self.step_at: dict[str, list] = {}
        for pp in program.pointers:
            self.init_at.setdefault(pp.init_loop, []).append(pp)
            for st in pp.steps:
                self.step_at.setdefault(st.loop, []).append((pp, st))
        self.tmp = 0
        self.channel_ctx: list[dict] = []
        self.in_parallel = False
        self._check_names()

    def _check_names(self) -> None:
        names = set(self.p.param_names) | {c.name for c in self.p.containers}
        for lp in self.p.loops():
            names.add(lp.var)
            names |= {c.name for c in lp.locals}
        bad = sorted(n for n in names if n in _C_KEYWORDS or n.startswith("silo_"))
        if bad:
            raise UnloweredSchedule(f"identifiers {bad} clash with C keywords or emitted helpers")

    def fresh(self, base: str) -> str:
        self.tmp += 1
        return f"silo_{base}{self.tmp}"

    def emit(self, depth: int, text: str) -> None:
        self.lines.append("  " * depth + text)

    # -- operations ---------------------------------------------------------
    def op_type(self, op: Op, reads) -> str:
        if isinstance(op, Num):
            return "f" if isinstance(op.value, float) else "i"
        if isinstance(op, Ref):
            return "f" if self.scope[reads[op.index].container].dtype == "f64" else "i"
        if isinstance(op, Val):
            return "i"
        if isinstance(op, Neg):
            return self.op_type(op.arg, reads)
        if isinstance(op, Bin):
            ts = {self.op_type(op.left, reads), self.op_type(op.right, reads)}
            return "f" if "f" in ts else "i"
        if isinstance(op, Call):
            if op.name in ("exp", "sqrt", "log"):
                return "f"
            return "f" if "f" in {self.op_type(a, reads) for a in op.args} else "i"
        raise UnloweredSchedule(f"no lowering rule for operation {op!r}")

    def op_c(self, op: Op, reads) -> str:
        if isinstance(op, Num):
            return repr(op.value) if isinstance(op.value, float) else f"{op.value}L"
        if isinstance(op, Ref):
            return self.access_c(reads[op.index])
        if isinstance(op, Val):
            return f"({op.expr.to_c()})"
        if isinstance(op, Neg):
            return f"(-{self.op_c(op.arg, reads)})"
        if isinstance(op, Bin):
            return f"({self.op_c(op.left, reads)} {op.op} {self.op_c(op.right, reads)})"
        if isinstance(op, Call):
            args = [self.op_c(a, reads) for a in op.args]
            t = self.op_type(op, reads)
            if op.name in ("exp", "sqrt", "log"):
                return f"{op.name}((double){args[0]})"
            if op.name == "abs":
                return f"{'fabs' if t == 'f' else 'labs'}({args[0]})"
            if t == "f":
                return f"f{op.name}((double){args[0]}, (double){args[1]})"
            return f"silo_{op.name}({args[0]}, {args[1]})"
        raise UnloweredSchedule(f"no lowering rule for operation {op!r}")

    def access_c(self, a: Access) -> str:
        c = self.scope[a.container]
        if c.scalar:
            return c.name
        if a.schedule is not None:
            if a.schedule.pointer not in self.plans:
                raise UnloweredSchedule(f"access to {a.container} uses unknown pointer {a.schedule.pointer}")
            return f"silo_ptr_{a.schedule.pointer}[{a.schedule.delta}]"
        return f"{c.name}[{a.offset.to_c()}]"

    # -- structure --------------------------------------------------------------
    def body(self, depth: int, nodes, loop: Loop | None) -> None:
        if loop is not None:
            for c in loop.locals:
                self.scope[c.name] = c
                if c.scalar:
                    self.emit(depth, f"{_ctype(c.dtype)} {c.name};")
                else:
                    self.emit(depth, f"{_ctype(c.dtype)} {c.name}[{c.extent().to_c()}];")
            for h in loop.prefetch:
                rw = 1 if h.rw == "write" else 0
                if h.container not in self.scope:
                    raise UnloweredSchedule(f"prefetch of unknown container {h.container}")
                locality = h.level if h.level is not None else self.opts.prefetch_locality
                self.emit(depth, f"__builtin_prefetch(&{h.container}[{h.offset.to_c()}], {rw}, {locality});")
        for n in nodes:
            if isinstance(n, Statement):
                if self.opts.comments:
                    self.emit(depth, f"/* {n.id} */")
                self.emit(depth, f"{self.access_c(n.write)} = {self.op_c(n.op, n.reads)};")
            elif isinstance(n, Loop):
                for pp in self.init_at.get(n.id, ()):
                    ct = _ctype(self.scope[pp.container].dtype)
                    self.emit(depth, f"{ct} *silo_ptr_{pp.id} = {pp.container} + ({pp.init_offset.to_c()});")
                self.loop(depth, n)
                for pp, st in self.step_at.get(n.id, ()):
                    if st.reset is None:
                        continue
                    dec = f"silo_ptr_{pp.id} -= {st.reset.to_c()};"
                    if st.reset_guard:
                        cond = f"silo_trips({n.start.to_c()}, {n.end.to_c()}, {n.stride.to_c()}) > 0"
                        self.emit(depth, f"if ({cond}) {dec}")
                    else:
                        self.emit(depth, dec)
            elif isinstance(n, Wait):
                self.wait(depth, n)
            elif isinstance(n, Release):
                self.release(depth, n)
            else:
                raise UnloweredSchedule(f"no lowering rule for node {type(n).__name__}")
        if loop is not None:
            for pp, st in self.step_at.get(loop.id, ()):
                if st.increment is not None:
                    self.emit(depth, f"silo_ptr_{pp.id} += {st.increment.to_c()};")

    def loop(self, depth: int, lp: Loop) -> None:
        if lp.schedule not in ("sequential", "doall", "doacross"):
            raise UnloweredSchedule(f"loop {lp.id} has unknown schedule {lp.schedule!r}")
        if lp.parallel and not self.in_parallel:
            self.parallel_loop(depth, lp)
            return
        v, s, e = lp.var, lp.stride, lp.end
        lit = s.as_int()
        if self.opts.comments:
            self.emit(depth, f"/* {lp.id} */")
        if lit is not None and lit != 0:
            cmp = "<" if lit > 0 else ">"
            self.emit(depth, f"for (long {v} = {lp.start.to_c()}; {v} {cmp} {e.to_c()}; {v} += {lit}) {{")
            self.body(depth + 1, lp.body, lp)
            self.emit(depth, "}")
            return
        step = self.fresh("s")
        self.emit(depth, f"for (long {v} = {lp.start.to_c()};;) {{")
        self.emit(depth + 1, f"long {step} = {s.to_c()};")
        self.emit(depth + 1, f"if ({step} > 0 ? !({v} < {e.to_c()}) : !({v} > {e.to_c()})) break;")
        self.body(depth + 1, lp.body, lp)
        self.emit(depth + 1, f"{v} += {step};")
        self.emit(depth, "}")

    def parallel_loop(self, depth: int, lp: Loop) -> None:
        if not is_countable(lp):
            raise UnloweredSchedule(f"parallel loop {lp.id} is not countable")
        n0 = self.fresh("n")
        t = self.fresh("t")
        self.emit(depth, f"/* {lp.id}: {lp.schedule} */")
        self.emit(depth, "{")
        d = depth + 1
        self.emit(d, f"long {n0} = silo_trips({lp.start.to_c()}, {lp.end.to_c()}, {lp.stride.to_c()});")
        ctx: dict = {}
        if lp.schedule == "doacross":
            chain = {lp.var: lp}
            for node, _ in walk(lp.body):
                if isinstance(node, Loop):
                    chain.setdefault(node.var, node)
            chans = []
            for node, _ in walk(lp.body):
                if isinstance(node, (Wait, Release)) and tuple(node.channel) not in chans:
                    chans.append(tuple(node.channel))
            for ch in chans:
                if ch[0] != lp.var:
                    raise UnloweredSchedule(f"channel {ch} does not start at pipelined loop {lp.id}")
                dims = []
                for var in ch:
                    src = chain.get(var)
                    if src is None:
                        raise UnloweredSchedule(f"channel variable {var} has no loop in {lp.id}")
                    if var == lp.var:
                        dims.append((src, n0))
                    else:
                        nk = self.fresh("n")
                        self.emit(
                            d, f"long {nk} = silo_trips({src.start.to_c()}, {src.end.to_c()}, {src.stride.to_c()});"
                        )
                        dims.append((src, nk))
                flags = self.fresh("flags")
                size = " * ".join(n for _, n in dims)
                self.emit(d, f"int *{flags} = calloc((size_t)({size}) + 1, sizeof(int));")
                ctx[ch] = (flags, dims)
            self.emit(d, "#pragma omp parallel for schedule(static, 1)")
        else:
            self.emit(d, "#pragma omp parallel for schedule(static)")
        self.emit(d, f"for (long {t} = 0; {t} < {n0}; {t}++) {{")
        self.emit(d + 1, f"long {lp.var} = {lp.start.to_c()} + {t} * ({lp.stride.to_c()});")
        self.channel_ctx.append(ctx)
        self.in_parallel = True
        self.body(d + 1, lp.body, lp)
        self.in_parallel = False
        self.channel_ctx.pop()
        self.emit(d, "}")
        for flags, _ in ctx.values():
            self.emit(d, f"free({flags});")
        self.emit(depth, "}")

    def _channel(self, channel) -> tuple:
        ctx = self.channel_ctx[-1] if self.channel_ctx else {}
        if tuple(channel) not in ctx:
            raise UnloweredSchedule(f"synchronization on {tuple(channel)} outside a doacross loop")
        return ctx[tuple(channel)]

    def _slot_index(self, flags_dims, vector: list[str], depth: int) -> tuple[list[str], str]:
        _, dims = flags_dims
        names = []
        for (src, n), val in zip(dims, vector):
            w = self.fresh("w")
            self.emit(depth, f"long {w} = silo_slot({val}, {src.start.to_c()}, {src.stride.to_c()}, {n});")
            names.append(w)
        lin = names[0]
        for (_, n), w in zip(dims[1:], names[1:]):
            lin = f"({lin}) * {n} + {w}"
        return names, lin

    def wait(self, depth: int, w: Wait) -> None:
        fd = self._channel(w.channel)
        self.emit(depth, "{")
        names, lin = self._slot_index(fd, [e.to_c() for e in w.vector], depth + 1)
        cond = " && ".join(f"{n} >= 0" for n in names)
        self.emit(depth + 1, f"if ({cond}) silo_wait(&{fd[0]}[{lin}]);")
        self.emit(depth, "}")

    def release(self, depth: int, r: Release) -> None:
        fd = self._channel(r.channel)
        self.emit(depth, "{")
        _, lin = self._slot_index(fd, list(r.channel), depth + 1)
        self.emit(depth + 1, f"silo_release(&{fd[0]}[{lin}]);")
        self.emit(depth, "}")

    def generate(self) -> str:
        args = [f"long {p.name}" for p in self.p.params]
        for c in self.p.containers:
            if not c.internal:
                args.append(f"{_ctype(c.dtype)} *{c.name}")
        self.lines.append(_PRELUDE)
        self.emit(0, f"void {self.opts.kernel_name}({', '.join(args) or 'void'}) {{")
        internal = [c for c in self.p.containers if c.internal]
        for c in internal:
            ct = _ctype(c.dtype)
            self.emit(1, f"{ct} *{c.name} = malloc(sizeof({ct}) * (size_t)({c.extent().to_c()}) + 1);")
        self.body(1, self.p.body, None)
        for c in internal:
            self.emit(1, f"free({c.name});")
        self.emit(0, "}")
        return "\n".join(self.lines) + "\n"


def lower(program: Program, opts: LowerOptions | None = None) -> str:
    """C source for ``program``.  Identical input gives byte-identical text."""
    return _Emitter(program, opts or LowerOptions()).generate()


# ---------------------------------------------------------------------------
# reports


def emit_report(program: Program, extra: Mapping | None = None) -> str:
    """JSON summary: per loop schedule, dependence records, sync markers and
    the number of memory schedules attached."""
    from silo.dependence import classify
    from silo.errors import SiloError

    per_ptr_loop: dict[str, int] = {}
    for pp in program.pointers:
        for st in pp.steps:
            per_ptr_loop[st.loop] = per_ptr_loop.get(st.loop, 0) + 1
    loops = []
    for lp in program.loops():
        try:
            records = [r.to_json() for r in classify(lp, program)]
        except (SiloError, ValueError) as exc:
            records = [{"kind": "error", "detail": str(exc)}]
        waits = [
            {"channel": list(n.channel), "vector": [str(e) for e in n.vector]}
            for n, _ in walk(lp.body)
            if isinstance(n, Wait)
        ]
        releases = sum(1 for n, _ in walk(lp.body) if isinstance(n, Release))
        loops.append(
            {
                "loop": lp.id,
                "var": lp.var,
                "schedule": lp.schedule,
                "dependences": records,
                "sync": {"waits": waits, "releases": releases},
                "prefetch_hints": len(lp.prefetch),
                "pointer_steps": per_ptr_loop.get(lp.id, 0),
            }
        )
    out = {"loops": loops, "pointers": len(program.pointers)}
    if extra:
        out.update(extra)
    return json.dumps(out, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# compile and call


_BUILD_DIR = Path(tempfile.gettempdir()) / "silo-build"
_LIBS: dict[str, ctypes.CDLL] = {}


def compile_shared(source: str, cc: str | None = None, openmp: bool = True) -> ctypes.CDLL:
    """Compile ``source`` into a shared library (cached by content hash)."""
    cc = cc or os.environ.get("CC", "gcc")
    flags = ["-O2", "-std=gnu11", "-ffp-contract=off", "-shared", "-fPIC"]
    if openmp:
        flags.append("-fopenmp")
    digest = hashlib.sha256((source + cc + " ".join(flags)).encode()).hexdigest()[:20]
    if digest in _LIBS:
        return _LIBS[digest]
    _BUILD_DIR.mkdir(parents=True, exist_ok=True)
    so = _BUILD_DIR / f"k{digest}.so"
    if not so.exists():
        src = _BUILD_DIR / f"k{digest}.c"
        src.write_text(source)
        tmp = so.with_suffix(f".{os.getpid()}.tmp")
        proc = subprocess.run([cc, *flags, str(src), "-o", str(tmp), "-lm"], capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(f"C compilation failed:\n{proc.stderr}")
        os.replace(tmp, so)
    lib = ctypes.CDLL(str(so))
    _LIBS[digest] = lib
    return lib


def run_compiled(
    program: Program,
    params: Mapping[str, int],
    data: Mapping[str, np.ndarray],
    threads: int | None = None,
    source: str | None = None,
) -> dict[str, np.ndarray]:
    """Lower, compile and execute; returns final contents of non-internal containers."""
    from silo.interp import allocate

    source = source if source is not None else lower(program)
    lib = compile_shared(source)
    if threads is not None:
        lib.silo_set_threads(ctypes.c_int(threads))
    sizes = allocate(program, params)
    args: list = [ctypes.c_long(params[p.name]) for p in program.params]
    arrays: dict[str, np.ndarray] = {}
    for c in program.containers:
        if c.internal:
            continue
        dt = np.float64 if c.dtype == "f64" else np.int64
        if c.name in data:
            arr = np.ascontiguousarray(np.array(data[c.name], dtype=dt).ravel())
        else:
            arr = np.zeros(sizes[c.name], dtype=dt)
        if arr.size != sizes[c.name]:
            raise ValueError(f"{c.name}: expected {sizes[c.name]} elements, got {arr.size}")
        arrays[c.name] = arr
        ctype = ctypes.c_double if c.dtype == "f64" else ctypes.c_long
        args.append(arr.ctypes.data_as(ctypes.POINTER(ctype)))
    fn = getattr(lib, "silo_kernel")
    fn.restype = None
    fn(*args)
    return arrays
