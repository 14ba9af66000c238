"""DOALL marking and DOACROSS pipelining with wait/release markers.

A pipelined loop synchronizes on *channels*: a channel is the chain of
loops from the pipelined loop down to the deepest loop enclosing both the
reading and the producing statement.  ``wait[k, i](k - 1, i)`` blocks until
iteration ``(k - 1, i)`` of that chain has executed ``release[k, i]``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from silo.dataflow import (
    BodyDataflowGraph,
    PropagatedRange,
    Range,
    build_body_graph,
    collide,
    footprint,
    loop_boxes,
    range_box,
)
from silo.dependence import DependenceRecord, classify
from silo.errors import NoPipelineBenefit, NotPipelinable
from silo.ir import Loop, Node, Program, Release, Statement, Wait, facts_for, is_countable, walk
from silo.symexpr import SymExpr, sym

__all__ = [
    "IterationVector",
    "SyncPlan",
    "SyncPoint",
    "apply_doacross",
    "code_motion",
    "detect_doall",
    "parallelize",
    "place_release",
    "plan_sync",
    "sync_points",
]


@dataclass(frozen=True)
class IterationVector:
    loops: tuple[str, ...]  # loop variables, outermost first
    entries: tuple[SymExpr, ...]

    def deltas(self, strides: tuple[SymExpr, ...]) -> tuple[SymExpr, ...]:
        from silo.symexpr import _divide_exact

        out = []
        for var, e, s in zip(self.loops, self.entries, strides):
            out.append(_divide_exact(sym(var) - e, s))
        return tuple(out)

    def __str__(self) -> str:
        return "(" + ", ".join(str(e) for e in self.entries) + ")"


@dataclass(frozen=True)
class SyncPoint:
    read: tuple  # access key of the guarded read
    vector: IterationVector
    resolving_writes: tuple[tuple, ...]
    body_loop: str  # deepest channel loop; waits and releases go into its body
    guarded_item: str  # node of that body containing the read
    write_items: tuple[str, ...]

    @property
    def statement(self) -> str:
        return self.read[0]


@dataclass(frozen=True)
class SyncPlan:
    loop: str
    waits: tuple[tuple[str, str, IterationVector], ...]  # (body loop, guarded item, vector)
    releases: tuple[tuple[str, tuple[str, ...], str | None], ...]  # (body loop, channel, after item | None)
    orders: tuple[tuple[str, tuple[str, ...]], ...]  # body loop -> item order after code motion

    def to_json(self) -> dict:
        return {
            "loop": self.loop,
            "waits": [
                {"body": b, "before": item, "channel": list(v.loops), "vector": [str(e) for e in v.entries]}
                for b, item, v in self.waits
            ],
            "releases": [
                {"body": b, "channel": list(ch), "after": after if after else "end-of-body"}
                for b, ch, after in self.releases
            ],
        }


def detect_doall(loop: Loop, program: Program) -> bool:
    return not classify(loop, program)


def _chain(program: Program, node_id: str, top: Loop) -> tuple[Loop, ...]:
    anc = program.ancestors(node_id)
    ids = [lp.id for lp in anc]
    return anc[ids.index(top.id):]


def sync_points(loop: Loop, program: Program) -> list[SyncPoint]:
    """Iteration vectors for every loop-carried read of ``loop``."""
    loop = program.loop(loop.id)
    records = classify(loop, program)
    bad = sorted({r.kind for r in records if r.kind != "RAW"})
    if bad:
        raise NotPipelinable(f"loop {loop.id} still has {', '.join(bad)} dependencies")
    outer = program.ancestors(loop.id)
    points: dict[tuple, SyncPoint] = {}
    for rec in records:
        point = _sync_point(rec, loop, outer, program)
        key = (point.read, point.vector)
        if key in points:
            prev = points[key]
            merged = tuple(sorted(set(prev.resolving_writes) | set(point.resolving_writes)))
            items = tuple(dict.fromkeys(prev.write_items + point.write_items))
            points[key] = replace(prev, resolving_writes=merged, write_items=items)
        else:
            points[key] = point
    return sorted(points.values(), key=lambda p: (p.read, str(p.vector)))


def _sync_point(rec: DependenceRecord, loop: Loop, outer: tuple[Loop, ...], program: Program) -> SyncPoint:
    read_key, write_key = rec.sink, rec.source
    rstmt, wstmt = program.statement(read_key[0]), program.statement(write_key[0])
    rchain, wchain = _chain(program, rstmt.id, loop), _chain(program, wstmt.id, loop)
    common = []
    for a, b in zip(rchain, wchain):
        if a.id != b.id:
            break
        common.append(a)
    facts = facts_for(program, outer + tuple(common))
    for lp in common[1:]:
        inner_vars = {x.var for x in common[: common.index(lp)]}
        if not is_countable(lp) or (lp.start.free_symbols | lp.end.free_symbols | lp.stride.free_symbols) & inner_vars:
            raise NotPipelinable(f"channel loop {lp.id} is not rectangular")
    for lp in common:
        if facts.sign(lp.stride) not in (1, -1):
            raise NotPipelinable(f"stride sign of loop {lp.id} is unknown")

    def entry(stmt: Statement, key, chain):
        a = stmt.reads[key[2]] if key[1] == "read" else stmt.write
        e = PropagatedRange(a.container, a.offset, key[1], a.index, origin=key)
        return footprint(e, reversed(chain[len(common):]))

    r_e, w_e = entry(rstmt, read_key, rchain), entry(wstmt, write_key, wchain)
    shared = loop_boxes(outer + tuple(common), facts)
    pivots = {lp.var: range_box(Range.of(lp), facts) for lp in common}
    col = collide(r_e, w_e, facts, shared, pivots)
    if not col.exact or col.status == "none":
        raise NotPipelinable(f"no iteration vector for {read_key}")
    unknowns = col.unknowns
    channel: list[Loop] = []
    entries: list[SymExpr] = []
    for lp in common:
        name = f"{lp.var}'"
        val = col.values.get(name)
        if val is None or val.free_symbols & unknowns:
            break
        channel.append(lp)
        entries.append(val)
    if not channel:
        raise NotPipelinable(f"read {read_key} has no determined source iteration in {loop.id}")
    vec = IterationVector(tuple(lp.var for lp in channel), tuple(entries))
    d0 = vec.deltas((loop.stride,))[0]
    if d0 is None or not facts.is_positive(d0):
        raise NotPipelinable(f"vector {vec} does not point to an earlier iteration")
    body_loop = channel[-1]
    return SyncPoint(
        read_key,
        vec,
        (write_key,),
        body_loop.id,
        _item_in(program, rstmt.id, body_loop),
        (_item_in(program, wstmt.id, body_loop),),
    )


def _item_in(program: Program, node_id: str, body_loop: Loop) -> str:
    chain = program.ancestors(node_id)
    ids = [lp.id for lp in chain]
    pos = ids.index(body_loop.id)
    return chain[pos + 1].id if pos + 1 < len(chain) else node_id


# ---------------------------------------------------------------------------
# code motion and release placement


def code_motion(graph: BodyDataflowGraph, guarded: set[str]) -> list[str]:
    """Topological order that postpones wait-guarded items as long as possible."""
    if not guarded:
        return list(graph.nodes)
    preds = {n: set() for n in graph.nodes}
    for e in graph.edges:
        preds[e.consumer].add(e.producer)
    placed: list[str] = []
    remaining = list(graph.nodes)
    while remaining:
        ready = [n for n in remaining if preds[n] <= set(placed)]
        pick = next((n for n in ready if n not in guarded), ready[0])
        placed.append(pick)
        remaining.remove(pick)
    return placed


def place_release(graph: BodyDataflowGraph, resolving: set[str], guarded: set[str]) -> str | None:
    """Item after which to release, or None for end of body."""
    post = [w for w in resolving if all(graph.post_dominates(w, o) for o in resolving)]
    if post:
        return post[0]
    if graph.nodes and graph.nodes[0] in guarded:
        raise NoPipelineBenefit("first item is guarded and no resolving write post-dominates the others")
    return None


def _reordered_graph(graph: BodyDataflowGraph, order: list[str]) -> BodyDataflowGraph:
    succ = {n: frozenset([order[i + 1]]) if i + 1 < len(order) else frozenset() for i, n in enumerate(order)}
    return BodyDataflowGraph(
        graph.loop, tuple(order), graph.items, graph.reads, graph.writes, graph.edges, succ, graph.facts
    )


def plan_sync(loop: Loop, program: Program) -> SyncPlan:
    loop = program.loop(loop.id)
    points = sync_points(loop, program)
    if not points:
        raise NotPipelinable(f"loop {loop.id} carries no RAW dependency to pipeline")
    waits, releases, orders = [], [], []
    by_body: dict[str, list[SyncPoint]] = {}
    for p in points:
        by_body.setdefault(p.body_loop, []).append(p)
    for body_id, pts in by_body.items():
        body_loop = program.loop(body_id)
        graph = build_body_graph(body_loop, facts_for(program, program.ancestors(body_id) + (body_loop,)))
        guarded = {p.guarded_item for p in pts}
        order = code_motion(graph, guarded)
        moved = _reordered_graph(graph, order)
        resolving = {w for p in pts for w in p.write_items}
        after = place_release(moved, resolving, guarded)
        channel = pts[0].vector.loops
        vectors: dict[IterationVector, str] = {}
        for p in pts:
            if p.vector.loops != channel:
                raise NotPipelinable("points of one body disagree on the channel")
            cur = vectors.get(p.vector)
            if cur is None or order.index(p.guarded_item) < order.index(cur):
                vectors[p.vector] = p.guarded_item
        for vec, item in sorted(vectors.items(), key=lambda kv: (order.index(kv[1]), str(kv[0]))):
            waits.append((body_id, item, vec))
        releases.append((body_id, channel, after))
        orders.append((body_id, tuple(order)))
    return SyncPlan(loop.id, tuple(waits), tuple(releases), tuple(orders))


def apply_doacross(loop: Loop, program: Program, plan: SyncPlan | None = None) -> Program:
    """Reorder bodies, insert markers and mark ``loop`` as doacross."""
    plan = plan or plan_sync(loop, program)
    for body_id, order in plan.orders:
        body_loop = program.loop(body_id)
        items = {getattr(n, "id", None): n for n in body_loop.body}
        new_body: list[Node] = []
        for nid in order:
            for b, item, vec in plan.waits:
                if b == body_id and item == nid:
                    new_body.append(Wait(vec.loops, vec.entries))
            new_body.append(items[nid])
            for b, ch, after in plan.releases:
                if b == body_id and after == nid:
                    new_body.append(Release(ch))
        for b, ch, after in plan.releases:
            if b == body_id and after is None:
                new_body.append(Release(ch))
        program = program.replace_node(body_id, replace(body_loop, body=tuple(new_body)))
    top = program.loop(plan.loop)
    return program.replace_node(top.id, replace(top, schedule="doacross"))


# ---------------------------------------------------------------------------
# driver


def parallelize(program: Program, mode: str = "doall") -> tuple[Program, list[dict]]:
    """Mark the outermost parallelizable loop of every nest.

    ``mode`` is ``off``, ``doall`` or ``doacross`` (which also allows doall).
    Returns the new program and a list of per-loop decisions.
    """
    if mode not in ("off", "doall", "doacross"):
        raise ValueError(f"unknown parallelization mode {mode!r}")
    decisions: list[dict] = []
    if mode == "off":
        return program, decisions

    def visit(body: tuple[Node, ...]) -> None:
        nonlocal program
        for n in body:
            if not isinstance(n, Loop):
                continue
            lp = program.loop(n.id)
            if lp.parallel:
                decisions.append({"loop": lp.id, "schedule": lp.schedule, "reason": "given"})
                continue
            if detect_doall(lp, program):
                program = program.replace_node(lp.id, replace(lp, schedule="doall"))
                decisions.append({"loop": lp.id, "schedule": "doall"})
                continue
            if mode == "doacross":
                try:
                    plan = plan_sync(lp, program)
                    program = apply_doacross(lp, program, plan)
                    decisions.append({"loop": lp.id, "schedule": "doacross", "plan": plan.to_json()})
                    continue
                except NotPipelinable as exc:
                    decisions.append({"loop": lp.id, "schedule": "sequential", "reason": str(exc)})
            else:
                decisions.append({"loop": lp.id, "schedule": "sequential", "reason": "dependencies"})
            visit(program.loop(lp.id).body)

    visit(program.body)
    return program, decisions


def strip_schedules(program: Program) -> Program:
    """Sequential copy of ``program`` without sync markers."""

    def clean(body):
        out = []
        for n in body:
            if isinstance(n, (Wait, Release)):
                continue
            if isinstance(n, Loop):
                n = replace(n, schedule="sequential", body=clean(n.body))
            out.append(n)
        return tuple(out)

    return replace(program, body=clean(program.body))
