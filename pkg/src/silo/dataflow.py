"""Per-body dataflow graphs, externally visible access sets and footprint propagation.

Accesses are tracked as :class:`PropagatedRange` entries: an offset expression
plus the loop ranges its variables sweep.  A body-level entry has no ranges;
summarizing a child loop adds that loop's range to every entry whose offset
(or an inner range bound) mentions the loop variable.

The collision solver shared with :mod:`silo.dependence` lives here as well:
two entries are renamed apart, equated (per dimension when subscripts are
available), solved as a linear system and then checked against interval
boxes built from the loop bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Mapping

from silo.ir import Loop, Node, Program, Release, Statement, Wait, facts_for, is_countable
from silo.symexpr import (
    Facts,
    NonAffineSystem,
    SymExpr,
    prove_injective,
    solve_affine,
    sym,
)

__all__ = [
    "AccessKey",
    "BodyDataflowGraph",
    "Collision",
    "Edge",
    "ExternalSets",
    "PropagatedRange",
    "Range",
    "build_body_graph",
    "collide",
    "dominators",
    "externally_visible",
    "footprint",
    "post_dominators",
    "propagate",
    "ranges_intersect",
    "self_contained_reads",
    "to_dot",
]

AccessKey = tuple  # (statement id, kind, position)


@dataclass(frozen=True)
class Range:
    var: str
    start: SymExpr
    end: SymExpr
    stride: SymExpr

    @classmethod
    def of(cls, loop: Loop) -> "Range":
        return cls(loop.var, loop.start, loop.end, loop.stride)

    def subs(self, mapping: Mapping[str, SymExpr]) -> "Range":
        return Range(
            str(mapping.get(self.var, sym(self.var))),
            self.start.subs(mapping),
            self.end.subs(mapping),
            self.stride.subs(mapping),
        )

    def bounds(self) -> SymExpr:
        return self.start + self.end + self.stride


@dataclass(frozen=True)
class PropagatedRange:
    """Offset of one access together with the loop ranges it sweeps.

    ``ranges`` are ordered outermost first.  ``approx == 'whole'`` means the
    entry stands for every element of the container.
    """

    container: str
    offset: SymExpr
    kind: str
    index: tuple[SymExpr, ...] | None = None
    ranges: tuple[Range, ...] = ()
    approx: str = "exact"
    origin: AccessKey | None = None

    @property
    def range_vars(self) -> tuple[str, ...]:
        return tuple(r.var for r in self.ranges)

    def whole(self) -> "PropagatedRange":
        return replace(self, ranges=(), approx="whole")

    def canonical(self) -> tuple:
        """Alpha-renamed form used to compare footprints for equality."""
        mapping = {r.var: sym(f"__r{k}") for k, r in enumerate(self.ranges)}
        ranges = tuple(r.subs(mapping) for r in self.ranges)
        idx = None if self.index is None else tuple(e.subs(mapping) for e in self.index)
        return (self.container, self.offset.subs(mapping), idx, ranges, self.approx)


@dataclass(frozen=True)
class ExternalSets:
    reads: tuple[PropagatedRange, ...]
    writes: tuple[PropagatedRange, ...]

    def containers(self) -> set[str]:
        return {e.container for e in self.reads + self.writes}


@dataclass(frozen=True)
class Edge:
    producer: str
    consumer: str
    container: str
    offset: SymExpr
    kind: str  # RAW | WAR | WAW (within one iteration)


@dataclass
class BodyDataflowGraph:
    loop: Loop | None
    nodes: tuple[str, ...]
    items: dict[str, Node]
    reads: dict[str, tuple[PropagatedRange, ...]]
    writes: dict[str, tuple[PropagatedRange, ...]]
    edges: tuple[Edge, ...]
    succ: dict[str, frozenset[str]]
    facts: Facts
    dom: dict[str, frozenset[str]] = field(default_factory=dict)
    postdom: dict[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.dom:
            self.dom = dominators(self.nodes, self.succ)
        if not self.postdom:
            self.postdom = post_dominators(self.nodes, self.succ)

    def dominates(self, a: str, b: str) -> bool:
        return a in self.dom[b]

    def post_dominates(self, a: str, b: str) -> bool:
        return a in self.postdom[b]

    def preds(self, node: str) -> set[str]:
        return {e.producer for e in self.edges if e.consumer == node}


# ---------------------------------------------------------------------------
# dominance (generic over a successor map; entry is the first node)


def _preds(nodes, succ):
    pred = {n: set() for n in nodes}
    for n in nodes:
        for s in succ.get(n, ()):
            pred[s].add(n)
    return pred


def _fixpoint(nodes, pred, entry):
    every = frozenset(nodes)
    dom = {n: every for n in nodes}
    if entry is None:
        return dom
    dom[entry] = frozenset([entry])
    changed = True
    while changed:
        changed = False
        for n in nodes:
            if n == entry:
                continue
            ps = [dom[p] for p in pred[n]]
            new = (frozenset.intersection(*ps) if ps else frozenset()) | {n}
            if new != dom[n]:
                dom[n] = new
                changed = True
    return dom


def dominators(nodes: Iterable[str], succ: Mapping[str, Iterable[str]]) -> dict[str, frozenset[str]]:
    nodes = list(nodes)
    return _fixpoint(nodes, _preds(nodes, succ), nodes[0] if nodes else None)


def post_dominators(nodes: Iterable[str], succ: Mapping[str, Iterable[str]]) -> dict[str, frozenset[str]]:
    nodes = list(nodes)
    exits = [n for n in nodes if not succ.get(n)]
    # reverse graph with a virtual exit joining every sink
    virtual = "__exit__"
    rsucc = {virtual: set(exits)}
    for n in nodes:
        rsucc.setdefault(n, set())
        for s in succ.get(n, ()):
            rsucc.setdefault(s, set()).add(n)
    order = [virtual] + nodes
    dom = _fixpoint(order, _preds(order, rsucc), virtual)
    return {n: dom[n] - {virtual} for n in nodes}


# ---------------------------------------------------------------------------
# access sets


def statement_sets(stmt: Statement) -> tuple[tuple[PropagatedRange, ...], tuple[PropagatedRange, ...]]:
    reads = tuple(
        PropagatedRange(a.container, a.offset, "read", a.index, origin=(stmt.id, "read", i))
        for i, a in enumerate(stmt.reads)
    )
    w = stmt.write
    writes = (PropagatedRange(w.container, w.offset, "write", w.index, origin=(stmt.id, "write", 0)),)
    return reads, writes


def propagate(entries: Iterable[PropagatedRange], loop: Loop) -> tuple[PropagatedRange, ...]:
    """Extend per-iteration entries of ``loop``'s body to whole-loop footprints."""
    countable = is_countable(loop)
    out = []
    for e in entries:
        if e.approx == "whole":
            out.append(e)
            continue
        uses = e.offset.depends_on(loop.var) or any(r.bounds().depends_on(loop.var) for r in e.ranges)
        if e.index is not None:
            uses = uses or any(x.depends_on(loop.var) for x in e.index)
        if not uses:
            out.append(e)
        elif countable:
            out.append(replace(e, ranges=(Range.of(loop),) + e.ranges))
        else:
            out.append(e.whole())
    return tuple(out)


def node_sets(node: Node, facts: Facts) -> tuple[tuple[PropagatedRange, ...], tuple[PropagatedRange, ...]]:
    if isinstance(node, Statement):
        return statement_sets(node)
    if isinstance(node, Loop):
        ext = externally_visible(node, facts)
        return propagate(ext.reads, node), propagate(ext.writes, node)
    return (), ()


def _node_id(node: Node, k: int) -> str:
    return getattr(node, "id", None) or f"__marker{k}"


def build_body_graph(loop: Loop, facts: Facts) -> BodyDataflowGraph:
    """Dataflow graph of one iteration of ``loop``'s body.

    ``facts`` should include sign facts for ``loop`` and its ancestors.
    Sync markers are skipped; child loops become single summarized nodes.
    """
    nodes, items, reads, writes = [], {}, {}, {}
    for k, n in enumerate(loop.body):
        if isinstance(n, (Wait, Release)):
            continue
        nid = _node_id(n, k)
        nodes.append(nid)
        items[nid] = n
        reads[nid], writes[nid] = node_sets(n, facts)
    boxes = _loop_boxes((loop,), facts)
    edges = []
    for i, x in enumerate(nodes):
        for y in nodes[i + 1:]:
            seen = set()
            for kind, srcs, dsts in (
                ("RAW", writes[x], reads[y]),
                ("WAR", reads[x], writes[y]),
                ("WAW", writes[x], writes[y]),
            ):
                for s in srcs:
                    for d in dsts:
                        if s.container != d.container:
                            continue
                        key = (kind, s.container)
                        if key in seen:
                            continue
                        if collide(s, d, facts, boxes).status != "none":
                            seen.add(key)
                            edges.append(Edge(x, y, s.container, s.offset, kind))
    succ = {n: frozenset([nodes[i + 1]]) if i + 1 < len(nodes) else frozenset() for i, n in enumerate(nodes)}
    return BodyDataflowGraph(loop, tuple(nodes), items, reads, writes, tuple(edges), succ, facts)


def self_contained_reads(graph: BodyDataflowGraph) -> set[AccessKey]:
    """Reads fed by a dominating write of an equal, injective footprint."""
    out = set()
    var = graph.loop.var if graph.loop is not None else None
    for y in graph.nodes:
        for r in graph.reads[y]:
            if r.approx != "exact" or var is None:
                continue
            if not prove_injective(r.offset, var, graph.facts):
                continue
            key = _footprint_key(r)
            for x in graph.nodes:
                if x == y or not graph.dominates(x, y):
                    continue
                if any(_footprint_key(w) == key for w in graph.writes[x]):
                    out.add(r.origin)
                    break
    return out


def _footprint_key(e: PropagatedRange) -> tuple:
    container, offset, _index, ranges, approx = e.canonical()
    return (container, offset, ranges, approx)


@lru_cache(maxsize=4096)
def externally_visible(loop: Loop, facts: Facts) -> ExternalSets:
    """Per-iteration externally visible reads and writes of ``loop``'s body."""
    graph = build_body_graph(loop, facts.with_lower(loop.var, loop.start) if facts.is_positive(loop.stride) else facts)
    contained = self_contained_reads(graph)
    local = {c.name for c in loop.locals}
    reads, writes = [], []
    for n in graph.nodes:
        for r in graph.reads[n]:
            if r.container in local or r.origin in contained:
                continue
            reads.append(r)
        for w in graph.writes[n]:
            if w.container not in local:
                writes.append(w)
    return ExternalSets(tuple(reads), tuple(writes))


def body_graph(program: Program, loop: Loop) -> BodyDataflowGraph:
    """Convenience wrapper using the facts implied by ``loop``'s position."""
    anc = program.ancestors(loop.id)
    return build_body_graph(loop, facts_for(program, anc + (loop,)))


def footprint(entry: PropagatedRange, loops: Iterable[Loop]) -> PropagatedRange:
    """Propagate one entry outward through ``loops`` (innermost first)."""
    out = (entry,)
    for lp in loops:
        out = propagate(out, lp)
    return out[0]


# ---------------------------------------------------------------------------
# collision solving


@dataclass
class Collision:
    """Outcome of equating two footprints.

    ``status`` is ``none`` when no common address exists (proved) and
    ``maybe`` otherwise.  ``exact`` is False when the system could not be
    solved (whole-container entries, non-affine equations); ``values`` and
    ``free`` then carry no information.
    """

    status: str
    exact: bool = False
    values: dict[str, SymExpr] = field(default_factory=dict)
    free: frozenset[str] = frozenset()
    residuals: list[SymExpr] = field(default_factory=list)
    unknowns: frozenset[str] = frozenset()


Box = tuple  # (lo, hi) inclusive, or None when unknown


def range_box(r: Range, facts: Facts) -> Box | None:
    sign = facts.sign(r.stride)
    if sign == 1:
        return (r.start, r.end - 1)
    if sign == -1:
        return (r.end + 1, r.start)
    return None


def _loop_boxes(loops: Iterable[Loop], facts: Facts) -> dict[str, Box]:
    out = {}
    for lp in loops:
        if is_countable(lp):
            b = range_box(Range.of(lp), facts)
            if b is not None:
                out[lp.var] = b
    return out


def loop_boxes(loops: Iterable[Loop], facts: Facts) -> dict[str, Box]:
    return _loop_boxes(loops, facts)


def prove_nonneg(e: SymExpr, boxes: Mapping[str, Box], facts: Facts, order: list[str]) -> bool:
    """Prove ``e >= 0`` for all values of the boxed variables.

    Boxed variables are eliminated innermost first (``order`` lists them
    outermost first) by substituting the bound that minimizes ``e``.
    """
    for _ in range(4 * len(order) + 4):
        present = [v for v in reversed(order) if v in boxes and e.depends_on(v)]
        if not present:
            return facts.is_nonneg(e)
        v = present[0]
        if e.degree_in(v) != 1:
            return False
        coeff = _coeff_of(e, v)
        if any(coeff.depends_on(u) for u in boxes):
            return False
        s = facts.sign(coeff)
        if s is None or s == 0:
            return False
        lo, hi = boxes[v]
        e = e.subs({v: lo if s > 0 else hi})
    return False


def _coeff_of(e: SymExpr, v: str) -> SymExpr:
    terms = {}
    for mono, c in e.terms.items():
        powers = dict(mono)
        if powers.get(v) == 1:
            rest = tuple((a, p) for a, p in mono if a != v)
            terms[rest] = terms.get(rest, 0) + c
    return SymExpr(terms)


def _provably_outside(e: SymExpr, box: Box, boxes, facts, order) -> bool:
    lo, hi = box
    return prove_nonneg(e - hi - 1, boxes, facts, order) or prove_nonneg(lo - e - 1, boxes, facts, order)


def _integer_infeasible(value: SymExpr) -> bool:
    from fractions import Fraction

    const_part = value.constant_term
    others = [c for m, c in value.terms.items() if m]
    return isinstance(const_part, Fraction) and all(isinstance(c, int) for c in others)


def collide(
    a: PropagatedRange,
    b: PropagatedRange,
    facts: Facts,
    shared_boxes: Mapping[str, Box] | None = None,
    pivots: Mapping[str, Box | None] | None = None,
) -> Collision:
    """Decide whether ``a`` and ``b`` can touch a common address.

    Symbols other than range variables are shared between both sides.
    ``pivots`` maps shared loop variables that must be renamed apart in
    ``b`` (the loops whose iterations are being compared) to their boxes.
    The renamed copy of pivot ``v`` in ``b`` is called ``v'``.
    """
    if a.container != b.container:
        return Collision("none", exact=True)
    if a.approx == "whole" or b.approx == "whole":
        return Collision("maybe")
    shared_boxes = dict(shared_boxes or {})
    pivots = dict(pivots or {})
    ra = {r.var: sym(f"{r.var}'a") for r in a.ranges}
    rb = {r.var: sym(f"{r.var}'b") for r in b.ranges}
    for v in pivots:
        rb.setdefault(v, sym(f"{v}'"))

    boxes: dict[str, Box] = dict(shared_boxes)
    order: list[str] = list(shared_boxes)
    for v, box in pivots.items():
        name = str(rb[v])
        if box is not None:
            boxes[name] = tuple(x.subs(rb) for x in box)
        order.append(name)
    for side, ren in ((a, ra), (b, rb)):
        for r in side.ranges:
            rr = r.subs(ren)
            order.append(rr.var)
            box = range_box(rr, facts)
            if box is not None:
                boxes[rr.var] = box

    unknowns = [str(x) for x in ra.values()] + [str(x) for x in rb.values()]
    if a.index == () or b.index == ():
        eqs = [a.offset.subs(ra) - b.offset.subs(rb)]
    elif a.index is not None and b.index is not None and len(a.index) == len(b.index) and len(a.index) > 1:
        eqs = [x.subs(ra) - y.subs(rb) for x, y in zip(a.index, b.index)]
    else:
        eqs = [a.offset.subs(ra) - b.offset.subs(rb)]
    try:
        sol = solve_affine(eqs, unknowns)
    except NonAffineSystem:
        return Collision("maybe", unknowns=frozenset(unknowns))
    if not sol.consistent:
        return Collision("none", exact=True)
    for v in sol.values.values():
        if _integer_infeasible(v):
            return Collision("none", exact=True)
    for u, v in sol.values.items():
        if u in boxes and _provably_outside(v, boxes[u], boxes, facts, order):
            return Collision("none", exact=True)
    for r in sol.residuals:
        if prove_nonneg(r - 1, boxes, facts, order) or prove_nonneg(-r - 1, boxes, facts, order):
            return Collision("none", exact=True)
    return Collision("maybe", True, sol.values, sol.free, sol.residuals, frozenset(unknowns))


def ranges_intersect(
    a: PropagatedRange, b: PropagatedRange, facts: Facts | None = None, shared_boxes: Mapping[str, Box] | None = None
) -> str:
    """``no`` when disjointness is proved, ``yes`` for whole-container entries, else ``unknown``."""
    if a.container != b.container:
        return "no"
    if a.approx == "whole" or b.approx == "whole":
        return "yes"
    c = collide(a, b, facts or Facts(), shared_boxes)
    return "no" if c.status == "none" else "unknown"


# ---------------------------------------------------------------------------
# DOT output


def to_dot(graph: BodyDataflowGraph) -> str:
    name = graph.loop.id if graph.loop is not None else "root"
    lines = [f'digraph "{name}" {{']
    for n in graph.nodes:
        shape = "box" if isinstance(graph.items[n], Loop) else "ellipse"
        lines.append(f'  "{n}" [shape={shape}];')
    for e in graph.edges:
        lines.append(f'  "{e.producer}" -> "{e.consumer}" [label="{e.kind} {e.container}[{e.offset}]"];')
    lines.append("}")
    return "\n".join(lines)
