"""Loop-nest intermediate representation.

All node types are frozen dataclasses; passes build new trees instead of
mutating.  Loop semantics follow C: ``for (v = start; v < end; v += stride)``
for positive strides and ``v > end`` for negative ones, with the stride
re-evaluated every iteration (so ``stride = v`` doubles the variable).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Mapping, Union

from silo.errors import NonTerminating, NotCountable
from silo.symexpr import Facts, SymExpr, compile_expr, const

__all__ = [
    "Access",
    "Bin",
    "Call",
    "Container",
    "Loop",
    "Neg",
    "Node",
    "Num",
    "Param",
    "PointerPlan",
    "PointerRef",
    "PointerStep",
    "PrefetchHint",
    "Program",
    "Ref",
    "Release",
    "Statement",
    "Val",
    "Wait",
    "facts_for",
    "is_countable",
    "loop_iteration_values",
    "row_major_strides",
    "validate",
]

FLOAT_FUNCS = ("exp", "sqrt", "log", "abs", "max", "min")


# ---------------------------------------------------------------------------
# declarations


@dataclass(frozen=True)
class Param:
    name: str
    lower: SymExpr | None = None  # inclusive lower bound, may use earlier params


@dataclass(frozen=True)
class Container:
    """A data container.

    ``transient`` containers are not live-out and may be privatized away.
    ``internal`` containers were introduced by a transformation and are
    allocated by the generated kernel.  ``scalar`` marks a loop-local
    register-like value (one element, accessed without subscripts).
    """

    name: str
    dtype: str
    dims: tuple[SymExpr, ...]
    strides: tuple[SymExpr, ...]
    transient: bool = False
    internal: bool = False
    scalar: bool = False

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def linearize(self, index: tuple[SymExpr, ...]) -> SymExpr:
        if len(index) == self.ndim:
            out = const(0)
            for idx, stride in zip(index, self.strides):
                out = out + idx * stride
            return out
        if len(index) == 1:
            return index[0]
        raise ValueError(f"{self.name} expects {self.ndim} subscripts, got {len(index)}")

    def extent(self) -> SymExpr:
        """One past the largest valid linear offset."""
        out = const(1)
        for d, s in zip(self.dims, self.strides):
            out = out + (d - 1) * s
        return out


def row_major_strides(dims: tuple[SymExpr, ...]) -> tuple[SymExpr, ...]:
    strides = []
    acc = const(1)
    for d in reversed(dims):
        strides.append(acc)
        acc = acc * d
    return tuple(reversed(strides))


# ---------------------------------------------------------------------------
# memory schedules


@dataclass(frozen=True)
class PrefetchHint:
    """Prefetch of ``container[offset]`` at the top of loop ``loop``'s body."""

    container: str
    offset: SymExpr
    rw: str  # read | write
    loop: str
    level: int = 2
    source: tuple[str, str, int] = ("", "read", 0)  # (statement, kind, position)
    source_offset: SymExpr = field(default_factory=lambda: const(0))


@dataclass(frozen=True)
class PointerStep:
    """Per-loop pointer update.  ``None`` amounts are omitted."""

    loop: str
    increment: SymExpr | None
    reset: SymExpr | None
    reset_guard: bool = False  # reset only if the loop ran at least once


@dataclass(frozen=True)
class PointerPlan:
    id: str
    container: str
    init_loop: str  # pointer is initialized immediately before this loop
    init_offset: SymExpr
    steps: tuple[PointerStep, ...]  # innermost loop first
    base_offset: SymExpr = field(default_factory=lambda: const(0))


@dataclass(frozen=True)
class PointerRef:
    pointer: str
    delta: int = 0


# ---------------------------------------------------------------------------
# statements


@dataclass(frozen=True)
class Access:
    container: str
    offset: SymExpr
    kind: str  # read | write
    index: tuple[SymExpr, ...] | None = None
    schedule: PointerRef | None = None

    def with_offset(self, offset: SymExpr, index: tuple[SymExpr, ...] | None = None) -> "Access":
        return replace(self, offset=offset, index=index)


@dataclass(frozen=True)
class Num:
    value: Union[int, float]


@dataclass(frozen=True)
class Ref:
    index: int  # position in Statement.reads


@dataclass(frozen=True)
class Val:
    expr: SymExpr


@dataclass(frozen=True)
class Bin:
    op: str
    left: "Op"
    right: "Op"


@dataclass(frozen=True)
class Neg:
    arg: "Op"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple["Op", ...]


Op = Union[Num, Ref, Val, Bin, Neg, Call]


@dataclass(frozen=True)
class Statement:
    id: str
    reads: tuple[Access, ...]
    write: Access
    op: Op
    pos: tuple[int, int] | None = field(default=None, compare=False)

    @property
    def writes(self) -> tuple[Access, ...]:
        return (self.write,)

    def accesses(self) -> Iterator[tuple[int, Access]]:
        """Reads then the write; the index is the position used in access keys."""
        for i, a in enumerate(self.reads):
            yield i, a
        yield 0, self.write


@dataclass(frozen=True)
class Wait:
    channel: tuple[str, ...]  # loop variables, outermost first
    vector: tuple[SymExpr, ...]


@dataclass(frozen=True)
class Release:
    channel: tuple[str, ...]


@dataclass(frozen=True)
class Loop:
    id: str
    var: str
    start: SymExpr
    end: SymExpr
    stride: SymExpr
    body: tuple["Node", ...]
    schedule: str = "sequential"  # sequential | doall | doacross
    locals: tuple[Container, ...] = ()
    prefetch: tuple[PrefetchHint, ...] = ()
    pos: tuple[int, int] | None = field(default=None, compare=False)

    @property
    def parallel(self) -> bool:
        return self.schedule != "sequential"


Node = Union[Statement, Loop, Wait, Release]


@dataclass(frozen=True)
class Program:
    params: tuple[Param, ...]
    containers: tuple[Container, ...]
    body: tuple[Node, ...]
    pointers: tuple[PointerPlan, ...] = ()

    # -- lookup -------------------------------------------------------------
    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    def container(self, name: str) -> Container:
        for c in self.containers:
            if c.name == name:
                return c
        for loop in self.loops():
            for c in loop.locals:
                if c.name == name:
                    return c
        raise KeyError(name)

    def has_container(self, name: str) -> bool:
        try:
            self.container(name)
            return True
        except KeyError:
            return False

    def local_owner(self, name: str) -> Loop | None:
        for loop in self.loops():
            if any(c.name == name for c in loop.locals):
                return loop
        return None

    def loops(self) -> list[Loop]:
        return [n for n, _ in walk(self.body) if isinstance(n, Loop)]

    def statements(self) -> list[Statement]:
        return [n for n, _ in walk(self.body) if isinstance(n, Statement)]

    def loop(self, loop_id: str) -> Loop:
        for loop in self.loops():
            if loop.id == loop_id:
                return loop
        raise KeyError(loop_id)

    def statement(self, stmt_id: str) -> Statement:
        for s in self.statements():
            if s.id == stmt_id:
                return s
        raise KeyError(stmt_id)

    def ancestors(self, node_id: str) -> tuple[Loop, ...]:
        for node, anc in walk(self.body):
            if getattr(node, "id", None) == node_id:
                return anc
        raise KeyError(node_id)

    def pointer(self, pid: str) -> PointerPlan:
        for p in self.pointers:
            if p.id == pid:
                return p
        raise KeyError(pid)

    # -- rewriting ----------------------------------------------------------
    def replace_node(self, node_id: str, new: Node | tuple[Node, ...]) -> "Program":
        """Replace the node with id ``node_id`` by one node or a sequence."""
        seq = new if isinstance(new, tuple) else (new,)
        found = False

        def rewrite(body):
            nonlocal found
            out = []
            for n in body:
                if getattr(n, "id", None) == node_id:
                    found = True
                    out.extend(seq)
                elif isinstance(n, Loop):
                    out.append(replace(n, body=rewrite(n.body)))
                else:
                    out.append(n)
            return tuple(out)

        body = rewrite(self.body)
        if not found:
            raise KeyError(node_id)
        return replace(self, body=body)

    def map_statements(self, fn: Callable[[Statement], Statement]) -> "Program":
        def rewrite(body):
            out = []
            for n in body:
                if isinstance(n, Statement):
                    out.append(fn(n))
                elif isinstance(n, Loop):
                    out.append(replace(n, body=rewrite(n.body)))
                else:
                    out.append(n)
            return tuple(out)

        return replace(self, body=rewrite(self.body))

    def live_outs(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.containers if not c.transient and not c.internal)

    def fresh_name(self, base: str) -> str:
        taken = {c.name for c in self.containers}
        for loop in self.loops():
            taken |= {c.name for c in loop.locals}
            taken.add(loop.var)
        taken |= set(self.param_names)
        if base not in taken:
            return base
        k = 0
        while f"{base}{k}" in taken:
            k += 1
        return f"{base}{k}"

    def fresh_id(self, base: str) -> str:
        taken = {getattr(n, "id", None) for n, _ in walk(self.body)}
        if base not in taken:
            return base
        k = 0
        while f"{base}_{k}" in taken:
            k += 1
        return f"{base}_{k}"


def walk(body: tuple[Node, ...], ancestors: tuple[Loop, ...] = ()) -> Iterator[tuple[Node, tuple[Loop, ...]]]:
    """Preorder traversal yielding (node, enclosing loops outermost first)."""
    for n in body:
        yield n, ancestors
        if isinstance(n, Loop):
            yield from walk(n.body, ancestors + (n,))


def op_refs(op: Op) -> Iterator[int]:
    if isinstance(op, Ref):
        yield op.index
    elif isinstance(op, Bin):
        yield from op_refs(op.left)
        yield from op_refs(op.right)
    elif isinstance(op, Neg):
        yield from op_refs(op.arg)
    elif isinstance(op, Call):
        for a in op.args:
            yield from op_refs(a)


def op_symbols(op: Op) -> set[str]:
    if isinstance(op, Val):
        return set(op.expr.free_symbols)
    if isinstance(op, Bin):
        return op_symbols(op.left) | op_symbols(op.right)
    if isinstance(op, Neg):
        return op_symbols(op.arg)
    if isinstance(op, Call):
        out: set[str] = set()
        for a in op.args:
            out |= op_symbols(a)
        return out
    return set()


# ---------------------------------------------------------------------------
# facts and iteration


def facts_for(program: Program, loops: tuple[Loop, ...] = ()) -> Facts:
    """Sign facts from parameter bounds and the given loops' starts.

    A loop variable gets ``var >= start`` when its stride is provably
    positive.  Loops must be ordered outermost first.
    """
    facts = Facts(params=frozenset(program.param_names))
    for p in program.params:
        if p.lower is not None:
            facts = facts.with_lower(p.name, p.lower)
    for loop in loops:
        if facts.is_positive(loop.stride) and not loop.start.depends_on(loop.var):
            facts = facts.with_lower(loop.var, loop.start)
    return facts


def is_countable(loop: Loop) -> bool:
    """Start, end and stride are opaque-free polynomials and the stride does
    not depend on the loop's own variable."""
    for e in (loop.start, loop.end, loop.stride):
        if e.has_opaque or e.depends_on(loop.var):
            return False
    return True


def stride_sign(loop: Loop, facts: Facts) -> int | None:
    s = facts.sign(loop.stride)
    return s if s != 0 else None


def loop_iteration_values(loop: Loop, env: Mapping[str, int], budget: int = 10**6) -> list[int]:
    """Concrete values taken by ``loop.var`` under ``env``."""
    needed = (loop.start.free_symbols | loop.end.free_symbols | loop.stride.free_symbols) - {loop.var}
    missing = needed - set(env)
    if missing:
        raise NotCountable(f"loop {loop.id} depends on unbound symbols {sorted(missing)}")
    start = compile_expr(loop.start)(env)
    end = compile_expr(loop.end)(env)
    stride_fn = compile_expr(loop.stride)
    local = dict(env)
    out = []
    v = start
    while True:
        local[loop.var] = v
        step = stride_fn(local)
        if step == 0:
            raise NonTerminating(f"loop {loop.id} has zero stride at {loop.var}={v}")
        if (step > 0 and v >= end) or (step < 0 and v <= end):
            return out
        out.append(v)
        if len(out) > budget:
            raise NonTerminating(f"loop {loop.id} exceeds the iteration budget {budget}")
        v = v + step


# ---------------------------------------------------------------------------
# validation


def validate(program: Program) -> list[str]:
    """Return a list of diagnostics; empty iff the program is well formed."""
    diags: list[str] = []
    params = set()
    for p in program.params:
        if p.name in params:
            diags.append(f"parameter {p.name} declared twice")
        if p.lower is not None:
            unknown = p.lower.free_symbols - params
            if unknown:
                diags.append(f"bound of parameter {p.name} uses undeclared {sorted(unknown)}")
        params.add(p.name)

    names = set()
    for c in program.containers:
        if c.name in names:
            diags.append(f"container {c.name} declared twice")
        names.add(c.name)
        diags.extend(_check_container(c, params))

    def check_expr(e: SymExpr, scope: set[str], where: str) -> None:
        unbound = e.free_symbols - scope
        if unbound:
            diags.append(f"{where}: symbol(s) {sorted(unbound)} not in scope")

    def visit(body: tuple[Node, ...], scope: set[str], loops: tuple[Loop, ...], visible: dict[str, Container]):
        if not body:
            where = f"loop {loops[-1].id}" if loops else "program"
            diags.append(f"{where}: empty body")
        for n in body:
            if isinstance(n, Loop):
                if n.var in scope:
                    diags.append(f"loop {n.id}: variable {n.var} redefines an enclosing symbol")
                for e, what in ((n.start, "start"), (n.end, "end")):
                    check_expr(e, scope, f"loop {n.id} {what}")
                check_expr(n.stride, scope | {n.var}, f"loop {n.id} stride")
                if n.stride.is_zero:
                    diags.append(f"loop {n.id}: stride is zero")
                inner = dict(visible)
                for c in n.locals:
                    if c.name in inner:
                        diags.append(f"container {c.name} declared twice")
                    inner[c.name] = c
                    diags.extend(_check_container(c, scope | {n.var}))
                if n.schedule not in ("sequential", "doall", "doacross"):
                    diags.append(f"loop {n.id}: unknown schedule {n.schedule}")
                visit(n.body, scope | {n.var}, loops + (n,), inner)
            elif isinstance(n, Statement):
                for i, a in enumerate(n.reads):
                    if a.kind != "read":
                        diags.append(f"{n.id}: read access {i} has kind {a.kind}")
                if n.write.kind != "write":
                    diags.append(f"{n.id}: write access has kind {n.write.kind}")
                for _, a in n.accesses():
                    c = visible.get(a.container)
                    if c is None:
                        diags.append(f"{n.id}: container {a.container} not declared in scope")
                        continue
                    check_expr(a.offset, scope, f"{n.id} access {a.container}")
                    if a.index is not None:
                        if len(a.index) not in (c.ndim, 1) and not c.scalar:
                            diags.append(f"{n.id}: {a.container} has {c.ndim} dims, got {len(a.index)} subscripts")
                        elif len(a.index) and not (c.linearize(a.index) - a.offset).is_zero:
                            diags.append(f"{n.id}: offset of {a.container} disagrees with its subscripts")
                refs = sorted(op_refs(n.op))
                if refs != list(range(len(n.reads))):
                    diags.append(f"{n.id}: operation must reference each read exactly once")
                unbound = op_symbols(n.op) - scope
                if unbound:
                    diags.append(f"{n.id}: symbol(s) {sorted(unbound)} not in scope")
            elif isinstance(n, (Wait, Release)):
                enclosing = [lp.var for lp in loops]
                if not set(n.channel) <= set(enclosing):
                    diags.append(f"sync marker channel {n.channel} is not enclosing")
                if isinstance(n, Wait):
                    if len(n.vector) != len(n.channel):
                        diags.append(f"wait vector length differs from channel {n.channel}")
                    for e in n.vector:
                        check_expr(e, scope, "wait vector")

    visit(program.body, set(params), (), {c.name: c for c in program.containers})
    ids = [getattr(n, "id") for n, _ in walk(program.body) if isinstance(n, (Loop, Statement))]
    dup = {i for i in ids if ids.count(i) > 1}
    for i in sorted(dup):
        diags.append(f"identifier {i} used more than once")
    return diags


def _check_container(c: Container, scope: set[str]) -> list[str]:
    out = []
    if not c.dims:
        out.append(f"container {c.name} has no dimensions")
    if len(c.strides) != len(c.dims):
        out.append(f"container {c.name}: {len(c.strides)} strides for {len(c.dims)} dims")
    if c.dtype not in ("f64", "i64"):
        out.append(f"container {c.name}: unknown element type {c.dtype}")
    for e in c.dims + c.strides:
        unbound = e.free_symbols - scope
        if unbound:
            out.append(f"container {c.name}: symbol(s) {sorted(unbound)} not in scope")
    return out
