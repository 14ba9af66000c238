"""Loop-carried dependence classification and elimination.

``classify`` compares every externally visible read/write pair of one loop
iteration against the same accesses in another iteration ``v'`` of the loop.
Solving the collision system for ``v'`` yields the iteration distance
``delta = (v - v') / stride``: positive means the other access ran earlier.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

from silo.dataflow import (
    PropagatedRange,
    Range,
    body_graph,
    collide,
    externally_visible,
    footprint,
    loop_boxes,
    propagate,
    range_box,
    ranges_intersect,
)
from silo.errors import UnresolvableDependency
from silo.ir import (
    Access,
    Container,
    Loop,
    Program,
    Ref,
    Statement,
    facts_for,
    is_countable,
    walk,
)
from silo.symexpr import DeltaSolution, Facts, SymExpr, _divide_exact, const, sym

__all__ = [
    "DependenceRecord",
    "classify",
    "eliminate_dependencies",
    "privatize_dead_writes",
    "resolve_input_deps",
    "rewrite_accesses",
]


@dataclass(frozen=True)
class DependenceRecord:
    kind: str  # RAW | WAR | WAW | unknown
    container: str
    source: tuple
    sink: tuple
    loop: str
    delta: DeltaSolution | None = None

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "container": self.container,
            "delta": None if self.delta is None else str(self.delta.value),
            "conditional": bool(self.delta and self.delta.conditional),
            "loop": self.loop,
            "source": "/".join(map(str, self.source)),
            "sink": "/".join(map(str, self.sink)),
        }


def _loop_context(loop: Loop, program: Program) -> tuple[tuple[Loop, ...], Facts]:
    anc = program.ancestors(loop.id)
    return anc, facts_for(program, anc + (loop,))


def _pair_records(x: PropagatedRange, y: PropagatedRange, loop: Loop, facts: Facts, shared, pivot) -> list[DependenceRecord]:
    """Records for access ``x`` in iteration v against ``y`` in iteration v'."""
    col = collide(x, y, facts, shared, {loop.var: pivot})
    if col.status == "none":
        return []
    both_writes = x.kind == "write" and y.kind == "write"

    def rec(kind, delta=None, src=None, dst=None):
        src = src or (y.origin if kind in ("RAW", "WAW") else x.origin)
        dst = dst or (x.origin if kind in ("RAW", "WAW") else y.origin)
        return DependenceRecord(kind, x.container, src, dst, loop.id, delta)

    unknown = [rec("unknown")]
    if not col.exact:
        return unknown
    vp = f"{loop.var}'"
    if vp in col.free:
        # the collision does not pin the other iteration
        constrained = any(v.depends_on(loop.var) for v in col.values.values()) or any(
            r.depends_on(loop.var) for r in col.residuals
        )
        if constrained:
            return unknown
        one = DeltaSolution(const(1), "past", invariant=True)
        if both_writes:
            return [rec("WAW", one)]
        return [rec("RAW", one), rec("WAR", replace(one, direction="future"))]
    if vp not in col.values:
        return unknown
    dist = sym(loop.var) - col.values[vp]
    if dist.free_symbols & col.unknowns or dist.depends_on(loop.var):
        return unknown
    if dist.is_zero:
        return []
    delta = _divide_exact(dist, loop.stride)
    if delta is None:
        lit_d, lit_s = dist.as_int(), loop.stride.as_int()
        if lit_d is not None and lit_s is not None:
            return []  # the other access never lands on an iteration of the loop
        return unknown
    sign = facts.sign(delta)
    if sign is None:
        return unknown
    conditional = delta.as_int() is None
    mag = delta if sign > 0 else -delta
    if both_writes:
        return [rec("WAW", DeltaSolution(mag, "past", conditional))]
    read_first = x.kind == "read"
    # sign > 0: y ran in an earlier iteration
    if (sign > 0) == read_first:
        return [rec("RAW", DeltaSolution(mag, "past", conditional))]
    return [rec("WAR", DeltaSolution(mag, "future", conditional))]


def classify(loop: Loop, program: Program) -> list[DependenceRecord]:
    """Inter-iteration dependence records carried by ``loop``."""
    loop = program.loop(loop.id)
    anc, facts = _loop_context(loop, program)
    ext = externally_visible(loop, facts)
    shared = loop_boxes(anc + (loop,), facts)
    pivot = range_box(Range.of(loop), facts) if is_countable(loop) else None
    records: list[DependenceRecord] = []
    writes = list(ext.writes)
    for r in ext.reads:
        for w in writes:
            if r.container == w.container:
                records.extend(_pair_records(r, w, loop, facts, shared, pivot))
    for i, w1 in enumerate(writes):
        for w2 in writes[i:]:
            if w1.container == w2.container:
                records.extend(_pair_records(w1, w2, loop, facts, shared, pivot))
    seen, out = set(), []
    for rec in records:
        key = (rec.kind, rec.container, rec.source, rec.sink, str(rec.delta))
        if key not in seen:
            seen.add(key)
            out.append(rec)
    out.sort(key=lambda r: (r.container, r.kind, r.source, r.sink))
    return out


# ---------------------------------------------------------------------------
# access rewriting helpers


def rewrite_accesses(program: Program, mapping: dict[tuple, Access]) -> Program:
    def fix(stmt: Statement) -> Statement:
        reads = tuple(mapping.get((stmt.id, "read", i), a) for i, a in enumerate(stmt.reads))
        write = mapping.get((stmt.id, "write", 0), stmt.write)
        if reads == stmt.reads and write is stmt.write:
            return stmt
        return replace(stmt, reads=reads, write=write)

    return program.map_statements(fix)


def _accesses_in(body, container: str):
    """(key, access, statement, ancestors) in execution order, reads before the write."""
    out = []
    for node, anc in walk(body):
        if isinstance(node, Statement):
            for i, a in enumerate(node.reads):
                if a.container == container:
                    out.append(((node.id, "read", i), a, node, anc))
            if node.write.container == container:
                out.append(((node.id, "write", 0), node.write, node, anc))
    return out


def _entry(key, access: Access) -> PropagatedRange:
    return PropagatedRange(access.container, access.offset, key[1], access.index, origin=key)


def _uses_container(program: Program, name: str) -> bool:
    return bool(_accesses_in(program.body, name))


def _drop_container(program: Program, name: str) -> Program:
    return replace(program, containers=tuple(c for c in program.containers if c.name != name))


# ---------------------------------------------------------------------------
# privatization


def privatize_dead_writes(loop: Loop, program: Program) -> Program:
    """Replace dead transient writes and their dominated reads by loop-local scalars."""
    loop = program.loop(loop.id)
    records = classify(loop, program)
    targets = sorted({r.container for r in records if r.kind == "WAW"})
    blocked = {r.container for r in records if r.kind == "unknown"}
    anc, facts = _loop_context(loop, program)
    for name in targets:
        if name in blocked:
            continue
        try:
            c = program.container(name)
        except KeyError:
            continue
        if not c.transient or c.scalar or name not in {x.name for x in program.containers}:
            continue
        new = _privatize_one(program, program.loop(loop.id), c, facts)
        if new is not None:
            program = new
    return program


def _privatize_one(program: Program, loop: Loop, c: Container, facts: Facts) -> Program | None:
    inside_keys = {k for k, *_ in _accesses_in(loop.body, c.name)}
    everything = _accesses_in(program.body, c.name)
    anc_l = program.ancestors(loop.id)
    inner = [(k, a, s, anc) for k, a, s, anc in everything if k in inside_keys]
    order = {getattr(n, "id", None): pos for pos, (n, _) in enumerate(walk(program.body))}
    enclosing = {lp.id for lp in anc_l}

    def may_observe(stmt: Statement, anc) -> bool:
        # a read that runs before the loop and is not re-executed by a
        # shared enclosing loop can never see the loop's writes
        return order[stmt.id] > order[loop.id] or any(lp.id in enclosing for lp in anc)

    outside_reads = [
        (k, a, s, anc)
        for k, a, s, anc in everything
        if k not in inside_keys and k[1] == "read" and may_observe(s, anc)
    ]
    full = {k: footprint(_entry(k, a), reversed(anc)) for k, a, s, anc in everything}
    for k, a, s, anc in inner:
        if k[1] != "write":
            continue
        for ko, *_ in outside_reads:
            if ranges_intersect(full[k], full[ko], facts) != "no":
                return None

    # group by home loop and offset class
    groups: dict[tuple, list] = {}
    for k, a, s, anc in inner:
        # innermost enclosing loop (within the privatized subtree) whose
        # variable selects the element; accesses invariant in all of them
        # belong to the privatized loop itself
        home = loop
        inside = anc[[lp.id for lp in anc].index(loop.id):]
        for lp in reversed(inside):
            if a.offset.depends_on(lp.var) or (a.index and any(x.depends_on(lp.var) for x in a.index)):
                home = lp
                break
        groups.setdefault((home.id, a.offset, a.index), []).append((k, a, s, anc))
    for (home_id, _, _), members in groups.items():
        k0, a0, s0, anc0 = members[0]
        if k0[1] != "write" or anc0[-1].id != home_id:
            return None
    keys = list(groups)
    for i, g1 in enumerate(keys):
        for g2 in keys[i + 1:]:
            for k1, *_ in groups[g1]:
                for k2, *_ in groups[g2]:
                    if ranges_intersect(full[k1], full[k2], facts) != "no":
                        return None

    mapping: dict[tuple, Access] = {}
    new_locals: dict[str, list[Container]] = {}
    for n, key in enumerate(keys):
        home_id = key[0]
        sname = program.fresh_name(f"{c.name}_p{n}")
        scalar = Container(sname, c.dtype, (const(1),), (const(1),), transient=True, scalar=True)
        new_locals.setdefault(home_id, []).append(scalar)
        for k, a, s, anc in groups[key]:
            mapping[k] = Access(sname, const(0), a.kind, ())
    program = rewrite_accesses(program, mapping)
    for home_id, scalars in new_locals.items():
        home = program.loop(home_id)
        program = program.replace_node(home_id, replace(home, locals=home.locals + tuple(scalars)))
    if not _uses_container(program, c.name):
        program = _drop_container(program, c.name)
    return program


# ---------------------------------------------------------------------------
# input dependency resolution


def resolve_input_deps(loop: Loop, program: Program) -> Program:
    """Copy containers read ahead of their overwrite and read from the copy."""
    loop = program.loop(loop.id)
    records = classify(loop, program)
    war = sorted({r.container for r in records if r.kind == "WAR"})
    if not war:
        return program
    anc, facts = _loop_context(loop, program)
    ext = externally_visible(loop, facts)
    graph = body_graph(program, loop)
    for name in war:
        others = [r for r in records if r.container == name and r.kind != "WAR"]
        if others:
            kinds = sorted({r.kind for r in others})
            raise UnresolvableDependency(f"{name} in loop {loop.id} also has {', '.join(kinds)} dependencies")
        c = program.container(name)
        if c.scalar or program.local_owner(name) is not None:
            raise UnresolvableDependency(f"{name} is loop-local")
        exposed = [r for r in ext.reads if r.container == name]
        _check_same_iteration(graph, exposed, name, facts, loop)
        copy_name = program.fresh_name(f"{name}_copy")
        copy = Container(copy_name, c.dtype, c.dims, c.strides, transient=True, internal=True)
        nests = _copy_nests(program, loop, c, copy, propagate(exposed, loop))
        mapping = {}
        for r in exposed:
            stmt = program.statement(r.origin[0])
            a = stmt.reads[r.origin[2]]
            mapping[r.origin] = replace(a, container=copy_name, schedule=None)
        program = rewrite_accesses(program, mapping)
        program = replace(program, containers=program.containers + (copy,))
        # ids of inserted nodes must stay unique for subsequent containers
        program = program.replace_node(loop.id, tuple(nests) + (program.loop(loop.id),))
    return program


def _check_same_iteration(graph, exposed, name, facts, loop) -> None:
    node_of = {}
    for n in graph.nodes:
        for r in graph.reads[n]:
            node_of[r.origin] = n
    shared = loop_boxes((loop,), facts)
    for r in exposed:
        y = node_of[r.origin]
        for x in graph.nodes:
            if x == y and isinstance(graph.items[x], Statement):
                break
            for w in graph.writes[x]:
                if w.container == name and collide(w, r, facts, shared).status != "none":
                    raise UnresolvableDependency(
                        f"read {r.origin} of {name} may observe a write of the same iteration"
                    )
            if x == y:
                break


def _copy_nests(program: Program, loop: Loop, c: Container, copy: Container, entries) -> list[Loop]:
    nests: list[Loop] = []
    taken_ids: set[str] = set()

    def fresh_id(base):
        k = 0
        while True:
            cand = f"{base}{k}"
            if cand not in taken_ids:
                try:
                    program.loop(cand)
                except KeyError:
                    try:
                        program.statement(cand)
                    except KeyError:
                        taken_ids.add(cand)
                        return cand
            k += 1

    scope = set(program.param_names) | {lp.var for lp in program.loops()} | {x.name for x in program.containers}

    def fresh_var(base):
        k = 0
        while f"{base}{k}" in scope:
            k += 1
        scope.add(f"{base}{k}")
        return f"{base}{k}"

    if any(e.approx == "whole" for e in entries):
        shapes = [None]
    else:
        shapes = []
        seen = set()
        for e in entries:
            key = e.canonical()
            if key not in seen:
                seen.add(key)
                shapes.append(e)
    for e in shapes:
        if e is None:
            vars_ = [fresh_var("c") for _ in c.dims]
            ranges = [Range(v, const(0), d, const(1)) for v, d in zip(vars_, c.dims)]
            index = tuple(sym(v) for v in vars_)
            offset = c.linearize(index)
        else:
            ren = {r.var: sym(fresh_var(r.var + "c")) for r in e.ranges}
            ranges = [r.subs(ren) for r in e.ranges]
            index = None if e.index is None else tuple(x.subs(ren) for x in e.index)
            offset = e.offset.subs(ren)
        sid = fresh_id(f"cp_{c.name}_")
        stmt = Statement(
            sid,
            (Access(c.name, offset, "read", index),),
            Access(copy.name, offset, "write", index),
            Ref(0),
        )
        node = stmt
        for r in reversed(ranges):
            node = Loop(fresh_id(f"{loop.id}_cp"), r.var, r.start, r.end, r.stride, (node,))
        nests.append(node)
    return nests


# ---------------------------------------------------------------------------
# driver


def eliminate_dependencies(program: Program, privatize: bool = True, resolve_war: bool = True) -> tuple[Program, list[str]]:
    """Apply privatization and copy-based WAR resolution at every loop."""
    log: list[str] = []
    order = [lp.id for lp in program.loops()]
    for lid in order:
        try:
            lp = program.loop(lid)
        except KeyError:
            continue
        if privatize:
            new = privatize_dead_writes(lp, program)
            if new != program:
                log.append(f"privatized in {lid}")
                program = new
        if resolve_war:
            try:
                new = resolve_input_deps(program.loop(lid), program)
            except UnresolvableDependency as exc:
                log.append(f"war not resolved in {lid}: {exc}")
                new = program
            if new != program:
                log.append(f"copied war containers before {lid}")
                program = new
    return program, log


def records_for(program: Program, loops: Iterable[Loop] | None = None) -> list[DependenceRecord]:
    out = []
    for lp in loops if loops is not None else program.loops():
        out.extend(classify(lp, program))
    return out
