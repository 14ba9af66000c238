"""Reference interpreter and brute-force oracles.

Programs are translated to Python source (one nested function per kernel)
and executed on flat Python lists, which keeps the oracle fast enough for
randomized sweeps.  Arithmetic mirrors C: integer division truncates toward
zero, writes convert to the container's element type, and float operations
are plain IEEE doubles.

``pipelined_run`` turns every parallel loop body into a generator that
yields after each statement; a seeded scheduler interleaves several
simulated workers and honors wait/release markers.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from silo.errors import Deadlock, NonTerminating, OutOfBounds
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
    walk,
)
from silo.symexpr import OPAQUE_FUNCS, Opaque, SymExpr

__all__ = [
    "PointerMismatch",
    "address_trace",
    "allocate",
    "pipelined_run",
    "random_inputs",
    "random_params",
    "run",
]

DEFAULT_BUDGET = 10**8


class PointerMismatch(AssertionError):
    """A pointer-scheduled access disagrees with its direct offset."""


# ---------------------------------------------------------------------------
# runtime helpers visible to generated code


def _fdiv(a, b):
    try:
        return a / b
    except ZeroDivisionError:
        a = float(a)
        if a != a or a == 0.0:
            return math.nan
        return math.copysign(math.inf, a) * math.copysign(1.0, b)


def _idiv(a, b):
    q = abs(a) // abs(b)
    return q if (a >= 0) == (b >= 0) else -q


def _exp(x):
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def _log(x):
    if x < 0 or x != x:
        return math.nan
    if x == 0:
        return -math.inf
    return math.log(x)


def _sqrt(x):
    return math.nan if x < 0 or x != x else math.sqrt(x)


def _fmax(a, b):
    if a != a:
        return b
    if b != b:
        return a
    return a if a >= b else b


def _fmin(a, b):
    if a != a:
        return b
    if b != b:
        return a
    return a if a <= b else b


def _nonempty(start, end, stride):
    return start < end if stride > 0 else start > end


def _values(start, end, stride):
    out = []
    v = start
    if stride == 0:
        raise NonTerminating("zero stride")
    while (v < end) if stride > 0 else (v > end):
        out.append(v)
        v += stride
    return out


@dataclass
class _Runtime:
    budget: int
    trace: list | None = None
    pipelined: bool = False
    workers: int = 1
    rng: random.Random | None = None
    count: int = 0
    channels: dict = field(default_factory=dict)

    def tick(self, n: int = 1) -> None:
        self.count += n
        if self.count > self.budget:
            raise NonTerminating(f"iteration budget {self.budget} exceeded")

    def oob(self, name, what):
        raise OutOfBounds(f"{name}: {what}")

    def pmismatch(self, pid, got, want):
        raise PointerMismatch(f"pointer {pid}: pointer offset {got} != direct offset {want}")

    # -- channels ---------------------------------------------------------
    def open(self, key, spaces):
        self.channels[key] = (tuple(set(s) for s in spaces), set())

    def release(self, key, vec):
        self.channels[key][1].add(vec)

    def released(self, key, vec):
        spaces, done = self.channels[key]
        if any(v not in s for v, s in zip(vec, spaces)):
            return True  # outside the iteration space: vacuous
        return vec in done

    def seq_wait(self, key, vec):
        if not self.released(key, vec):
            raise Deadlock(f"wait on {vec} of channel {key[1]} which has not been released")

    # -- scheduling -------------------------------------------------------
    def parallel(self, iters, body) -> None:
        if not self.pipelined or self.workers <= 1:
            for v in iters:
                self.tick()
                for tag in body(v):
                    if tag is not None:
                        self.seq_wait(*tag)
            return
        pending = list(iters)
        pending.reverse()
        active: list[list] = []  # [generator, pending wait or None]
        while pending or active:
            while pending and len(active) < self.workers:
                self.tick()
                active.append([body(pending.pop()), None])
            runnable = [w for w in active if w[1] is None or self.released(*w[1])]
            if not runnable:
                raise Deadlock("every simulated worker is blocked on a wait")
            w = self.rng.choice(runnable)
            w[1] = None
            try:
                tag = next(w[0])
                if tag is not None:
                    w[1] = tag
            except StopIteration:
                active.remove(w)


_HELPERS = {
    "_fdiv": _fdiv,
    "_idiv": _idiv,
    "_exp": _exp,
    "_log": _log,
    "_sqrt": _sqrt,
    "_fmax": _fmax,
    "_fmin": _fmin,
    "_fabs": abs,
    "_nonempty": _nonempty,
    "_values": _values,
    "_NAN": math.nan,
    "PointerMismatch": PointerMismatch,
}
for _name, (_arity, _fn) in OPAQUE_FUNCS.items():
    _HELPERS[f"_F_{_name}"] = _fn


# ---------------------------------------------------------------------------
# code generation


def _py_atom(atom) -> str:
    if isinstance(atom, str):
        return f"v_{atom}"
    return f"_F_{atom.name}({', '.join(py_expr(a) for a in atom.args)})"


def py_expr(e: SymExpr) -> str:
    if e.is_zero:
        return "0"
    parts = []
    for mono, c in e.sorted_terms():
        factors = [_py_atom(a) for a, p in mono for _ in range(p)]
        if c != 1 or not factors:
            factors.insert(0, f"({c})")
        parts.append("*".join(factors))
    return "(" + " + ".join(parts) + ")"


class _Gen:
    def __init__(self, program: Program, trace: bool, pipelined: bool, check_pointers: bool):
        self.p = program
        self.trace = trace
        self.pipelined = pipelined
        self.check_pointers = check_pointers
        self.lines: list[str] = []
        self.tmp = 0
        self.inside_parallel = False
        self.scope: dict[str, Container] = {c.name: c for c in program.containers}
        self.pointers = {pp.id: pp for pp in program.pointers}
        self.init_at: dict[str, list] = {}
        self.step_at: dict[str, list] = {}
        for pp in program.pointers:
            self.init_at.setdefault(pp.init_loop, []).append(pp)
            for st in pp.steps:
                self.step_at.setdefault(st.loop, []).append((pp, st))

    def fresh(self, base: str) -> str:
        self.tmp += 1
        return f"_{base}{self.tmp}"

    def emit(self, depth: int, text: str) -> None:
        self.lines.append("    " * depth + text)

    # -- types ------------------------------------------------------------
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
        raise TypeError(op)

    def op_src(self, op: Op, reads, addr: list[str]) -> str:
        if isinstance(op, Num):
            return repr(op.value)
        if isinstance(op, Ref):
            a = reads[op.index]
            c = self.scope[a.container]
            if c.scalar:
                return f"s_{c.name}"
            return f"c_{c.name}[{addr[op.index]}]"
        if isinstance(op, Val):
            return py_expr(op.expr)
        if isinstance(op, Neg):
            return f"(-{self.op_src(op.arg, reads, addr)})"
        if isinstance(op, Bin):
            left = self.op_src(op.left, reads, addr)
            right = self.op_src(op.right, reads, addr)
            if op.op == "/":
                fn = "_fdiv" if self.op_type(op, reads) == "f" else "_idiv"
                return f"{fn}({left}, {right})"
            return f"({left} {op.op} {right})"
        if isinstance(op, Call):
            args = [self.op_src(a, reads, addr) for a in op.args]
            t = self.op_type(op, reads)
            if op.name in ("exp", "sqrt", "log"):
                return f"_{op.name}(float({args[0]}))"
            if op.name == "abs":
                return f"abs({args[0]})"
            if op.name in ("max", "min"):
                if t == "f":
                    return f"_f{op.name}(float({args[0]}), float({args[1]}))"
                return f"{op.name}({args[0]}, {args[1]})"
        raise TypeError(op)

    # -- accesses -----------------------------------------------------------
    def address(self, depth: int, a: Access, sid: str) -> str:
        c = self.scope[a.container]
        if c.scalar:
            return ""
        var = self.fresh("a")
        direct = py_expr(a.offset)
        if a.schedule is not None:
            ref = a.schedule
            self.emit(depth, f"{var} = _p_{ref.pointer} + ({ref.delta})")
            if self.check_pointers:
                want = self.fresh("w")
                self.emit(depth, f"{want} = {direct}")
                self.emit(depth, f"if {var} != {want}: _rt.pmismatch({ref.pointer!r}, {var}, {want})")
        else:
            self.emit(depth, f"{var} = {direct}")
        if a.index is not None and len(a.index) == c.ndim and c.ndim > 1:
            for d, (idx, dim) in enumerate(zip(a.index, c.dims)):
                t = self.fresh("t")
                self.emit(depth, f"{t} = {py_expr(idx)}")
                self.emit(
                    depth,
                    f"if not (0 <= {t} < {py_expr(dim)}): _rt.oob({c.name!r}, 'subscript {d} = %d in {sid}' % {t})",
                )
        self.emit(depth, f"if not (0 <= {var} < len(c_{c.name})): _rt.oob({c.name!r}, 'offset %d in {sid}' % {var})")
        if self.trace:
            self.emit(depth, f"_rt.trace.append(({sid!r}, {c.name!r}, {var}, {a.kind!r}))")
        return var

    # -- nodes ----------------------------------------------------------------
    def body(self, depth: int, nodes, loop: Loop | None) -> None:
        if loop is not None:
            for c in loop.locals:
                self.scope[c.name] = c
                if c.scalar:
                    self.emit(depth, f"s_{c.name} = _NAN")
                else:
                    self.emit(depth, f"c_{c.name} = [_NAN] * ({py_expr(c.extent())})")
        emitted = False
        for n in nodes:
            emitted = True
            if isinstance(n, Statement):
                self.statement(depth, n)
            elif isinstance(n, Loop):
                for pp in self.init_at.get(n.id, ()):
                    self.emit(depth, f"_p_{pp.id} = {py_expr(pp.init_offset)}")
                self.loop(depth, n)
                for pp, st in self.step_at.get(n.id, ()):
                    if st.reset is not None:
                        if st.reset_guard:
                            cond = f"_nonempty({py_expr(n.start)}, {py_expr(n.end)}, {py_expr(n.stride)})"
                            self.emit(depth, f"if {cond}: _p_{pp.id} -= {py_expr(st.reset)}")
                        else:
                            self.emit(depth, f"_p_{pp.id} -= {py_expr(st.reset)}")
            elif isinstance(n, Wait):
                key = self.channel_key(n.channel)
                vec = "(" + "".join(f"{py_expr(e)}, " for e in n.vector) + ")"
                if self.inside_parallel:
                    self.emit(depth, f"yield ({key}, {vec})")
                else:
                    self.emit(depth, f"_rt.seq_wait({key}, {vec})")
            elif isinstance(n, Release):
                key = self.channel_key(n.channel)
                vec = "(" + "".join(f"v_{v}, " for v in n.channel) + ")"
                self.emit(depth, f"_rt.release({key}, {vec})")
        if loop is not None:
            for pp, st in self.step_at.get(loop.id, ()):
                if st.increment is not None:
                    self.emit(depth, f"_p_{pp.id} += {py_expr(st.increment)}")
        if not emitted:
            self.emit(depth, "pass")

    def channel_key(self, channel) -> str:
        return repr((self.current_parallel, tuple(channel)))

    def statement(self, depth: int, s: Statement) -> None:
        addr = [self.address(depth, a, s.id) for a in s.reads]
        value = self.op_src(s.op, s.reads, addr)
        w = s.write
        c = self.scope[w.container]
        t = self.op_type(s.op, s.reads)
        if c.dtype == "f64" and t == "i":
            value = f"float({value})"
        elif c.dtype == "i64" and t == "f":
            value = f"int({value})"
        if c.scalar:
            if self.trace:
                self.emit(depth, f"_rt.trace.append(({s.id!r}, {c.name!r}, 0, 'write'))")
            self.emit(depth, f"s_{c.name} = {value}")
        else:
            waddr = self.address(depth, w, s.id)
            self.emit(depth, f"c_{c.name}[{waddr}] = {value}")
        if self.inside_parallel and self.pipelined:
            self.emit(depth, "yield None")

    def loop(self, depth: int, lp: Loop) -> None:
        var = f"v_{lp.var}"
        if lp.parallel and not self.inside_parallel:
            self.parallel_loop(depth, lp)
            return
        lit = lp.stride.as_int()
        if lit is not None and lit != 0 and not lp.stride.depends_on(lp.var):
            rng = self.fresh("r")
            self.emit(depth, f"{rng} = range({py_expr(lp.start)}, {py_expr(lp.end)}, {lit})")
            self.emit(depth, f"_rt.tick(len({rng}))")
            self.emit(depth, f"for {var} in {rng}:")
            self.body(depth + 1, lp.body, lp)
            return
        step = self.fresh("s")
        self.emit(depth, f"{var} = {py_expr(lp.start)}")
        self.emit(depth, "while True:")
        self.emit(depth + 1, f"{step} = {py_expr(lp.stride)}")
        self.emit(depth + 1, f"if {step} == 0: raise NonTerminating('zero stride in loop {lp.id}')")
        self.emit(depth + 1, f"if not (({var} < {py_expr(lp.end)}) if {step} > 0 else ({var} > {py_expr(lp.end)})): break")
        self.emit(depth + 1, "_rt.tick()")
        self.body(depth + 1, lp.body, lp)
        self.emit(depth + 1, f"{var} = {var} + {step}")

    def parallel_loop(self, depth: int, lp: Loop) -> None:
        fn = self.fresh("body")
        iters = self.fresh("it")
        self.emit(depth, f"{iters} = _values({py_expr(lp.start)}, {py_expr(lp.end)}, {py_expr(lp.stride)})")
        prev = getattr(self, "current_parallel", None)
        self.current_parallel = lp.id
        # channel spaces for every distinct channel used inside
        channels = {}
        chain_loops = {lp.var: lp}
        for node, anc in walk(lp.body):
            if isinstance(node, Loop):
                chain_loops.setdefault(node.var, node)
            if isinstance(node, (Wait, Release)):
                channels[tuple(node.channel)] = True
        for ch in channels:
            spaces = []
            for v in ch:
                if v == lp.var:
                    spaces.append(iters)
                else:
                    inner = chain_loops[v]
                    spaces.append(f"_values({py_expr(inner.start)}, {py_expr(inner.end)}, {py_expr(inner.stride)})")
            self.emit(depth, f"_rt.open({(lp.id, ch)!r}, ({', '.join(spaces)},))")
        self.emit(depth, f"def {fn}(v_{lp.var}):")
        self.inside_parallel = True
        self.body(depth + 1, lp.body, lp)
        self.emit(depth + 1, "if False: yield None")
        self.inside_parallel = False
        self.current_parallel = prev
        self.emit(depth, f"_rt.parallel({iters}, {fn})")

    def generate(self) -> str:
        self.current_parallel = None
        self.emit(0, "def _kernel(_P, _D, _rt):")
        for p in self.p.params:
            self.emit(1, f"v_{p.name} = _P[{p.name!r}]")
        for c in self.p.containers:
            self.emit(1, f"c_{c.name} = _D[{c.name!r}]")
        for pp in self.init_at.get(None, ()):
            self.emit(1, f"_p_{pp.id} = {py_expr(pp.init_offset)}")
        self.body(1, self.p.body, None)
        return "\n".join(self.lines) + "\n"


_CACHE: dict = {}


def _compile(program: Program, trace: bool, pipelined: bool, check_pointers: bool) -> Callable:
    key = (program, trace, pipelined, check_pointers)
    fn = _CACHE.get(key)
    if fn is None:
        src = _Gen(program, trace, pipelined, check_pointers).generate()
        ns = dict(_HELPERS)
        ns["NonTerminating"] = NonTerminating
        exec(compile(src, f"<silo:{id(program)}>", "exec"), ns)  # noqa: S102 - generated from the IR
        fn = ns["_kernel"]
        if len(_CACHE) > 256:
            _CACHE.clear()
        _CACHE[key] = fn
    return fn


def python_source(program: Program, pipelined: bool = False) -> str:
    """Generated interpreter source, for debugging."""
    return _Gen(program, False, pipelined, True).generate()


# ---------------------------------------------------------------------------
# data handling


def allocate(program: Program, params: Mapping[str, int]) -> dict[str, int]:
    """Flat element count of every global container under ``params``."""
    return {c.name: c.extent().evaluate(params) for c in program.containers}


def random_params(program: Program, rng: random.Random, spread: int = 3, cap: int = 32) -> dict[str, int]:
    """Sample each parameter as its lower bound plus a small random amount."""
    out: dict[str, int] = {}
    for p in program.params:
        lo = p.lower.evaluate(out) if p.lower is not None else 1
        out[p.name] = min(max(lo, lo + rng.randint(0, spread)), max(lo, cap))
    return out


def random_inputs(program: Program, params: Mapping[str, int], seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    sizes = allocate(program, params)
    out = {}
    for c in program.containers:
        if c.internal:
            continue
        n = sizes[c.name]
        if c.dtype == "f64":
            out[c.name] = rng.uniform(0.5, 1.5, n)
        else:
            out[c.name] = rng.integers(-9, 10, n, dtype=np.int64)
    return out


def _prepare(program: Program, params: Mapping[str, int], data: Mapping[str, np.ndarray] | None):
    sizes = allocate(program, params)
    lists = {}
    for c in program.containers:
        n = sizes[c.name]
        if n < 0:
            raise OutOfBounds(f"{c.name} has negative extent {n}")
        if data is not None and c.name in data and not c.internal:
            arr = np.asarray(data[c.name])
            if arr.size != n:
                raise ValueError(f"{c.name}: expected {n} elements, got {arr.size}")
            lists[c.name] = arr.ravel().tolist()
        elif c.dtype == "f64":
            lists[c.name] = [math.nan if c.internal else 0.0] * n
        else:
            lists[c.name] = [0] * n
    return lists


def _finish(program: Program, lists) -> dict[str, np.ndarray]:
    out = {}
    for c in program.containers:
        dtype = np.float64 if c.dtype == "f64" else np.int64
        out[c.name] = np.array(lists[c.name], dtype=dtype)
    return out


def run(
    program: Program,
    params: Mapping[str, int],
    data: Mapping[str, np.ndarray] | None = None,
    budget: int = DEFAULT_BUDGET,
    check_pointers: bool = True,
) -> dict[str, np.ndarray]:
    """Sequential execution; returns the final contents of every global container."""
    _check_params(program, params)
    lists = _prepare(program, params, data)
    rt = _Runtime(budget)
    _compile(program, False, False, check_pointers)(dict(params), lists, rt)
    return _finish(program, lists)


def address_trace(
    program: Program, params: Mapping[str, int], data: Mapping[str, np.ndarray] | None = None, budget: int = DEFAULT_BUDGET
) -> list[tuple[str, str, int, str]]:
    """Every touched (statement, container, address, kind) in execution order."""
    _check_params(program, params)
    lists = _prepare(program, params, data)
    rt = _Runtime(budget, trace=[])
    _compile(program, True, False, True)(dict(params), lists, rt)
    return rt.trace


def pipelined_run(
    program: Program,
    workers: int,
    params: Mapping[str, int],
    data: Mapping[str, np.ndarray] | None = None,
    seed: int = 0,
    budget: int = DEFAULT_BUDGET,
) -> dict[str, np.ndarray]:
    """Simulate parallel loops with ``workers`` interleaved workers."""
    _check_params(program, params)
    lists = _prepare(program, params, data)
    rt = _Runtime(budget, pipelined=True, workers=workers, rng=random.Random(seed))
    _compile(program, False, True, True)(dict(params), lists, rt)
    return _finish(program, lists)


def _check_params(program: Program, params: Mapping[str, int]) -> None:
    missing = [p.name for p in program.params if p.name not in params]
    if missing:
        raise KeyError(f"unbound parameters {missing}")
    for p in program.params:
        if p.lower is not None and params[p.name] < p.lower.evaluate(params):
            raise ValueError(f"parameter {p.name}={params[p.name]} violates its lower bound {p.lower}")
