"""Memory schedules: software prefetch hints and pointer incrementation.

Schedules annotate the program without changing what it computes.  Prefetch
hints live on the loop whose header they follow; pointer plans live on the
program and accesses refer to them through ``PointerRef``.
"""

from __future__ import annotations

import json
from dataclasses import replace
from typing import Callable

from silo.errors import NotApplicable
from silo.ir import (
    Access,
    Loop,
    PointerPlan,
    PointerRef,
    PointerStep,
    PrefetchHint,
    Program,
    Statement,
    facts_for,
    is_countable,
    walk,
)
from silo.symexpr import SymExpr, func, sym, symbolic_equal

__all__ = [
    "AccessSite",
    "final_value",
    "merge_constant_offsets",
    "plan_pointer_increment",
    "plan_pointers",
    "plan_prefetch",
    "schedule_report",
    "strip_memory_schedules",
]


def _start_substituted(f: SymExpr, loops: tuple[Loop, ...]) -> SymExpr:
    """Replace each loop's variable by its start, innermost loop first."""
    for lp in reversed(loops):
        if f.depends_on(lp.var):
            f = f.subs({lp.var: lp.start})
    return f


def _accesses(s: Statement):
    for pos, a in enumerate(s.reads):
        yield "read", pos, a
    yield "write", 0, s.write


# ---------------------------------------------------------------------------
# prefetch


def _prefetch_owner(f: SymExpr, anc: tuple[Loop, ...]) -> int | None:
    """Index in ``anc`` of the loop a hint for offset ``f`` belongs to.

    A loop qualifies when its variable appears in ``f`` and its start
    expression uses the variable of an enclosing loop; the hint goes to the
    innermost such enclosing loop over all qualifying loops.
    """
    best = None
    for x, lp in enumerate(anc):
        if not f.depends_on(lp.var):
            continue
        for y in range(x - 1, -1, -1):
            if lp.start.depends_on(anc[y].var):
                best = y if best is None else max(best, y)
                break
    return best


def plan_prefetch(program: Program, level: int = 2) -> Program:
    """Attach prefetch hints after the headers of loops where an inner loop's
    start jumps with the enclosing iteration."""
    hints: dict[str, list[PrefetchHint]] = {}
    seen: set[tuple[str, str]] = set()
    for node, anc in walk(program.body):
        if not isinstance(node, Statement):
            continue
        for kind, pos, a in _accesses(node):
            c = program.container(a.container)
            if c.scalar:
                continue
            owner = _prefetch_owner(a.offset, anc)
            if owner is None:
                continue
            loop = anc[owner]
            if loop.parallel or (loop.id, a.container) in seen:
                continue
            seen.add((loop.id, a.container))
            first = _start_substituted(a.offset, anc[owner + 1 :])
            nxt = first.subs({loop.var: sym(loop.var) + loop.stride})
            hints.setdefault(loop.id, []).append(
                PrefetchHint(a.container, nxt, kind, loop.id, level, (node.id, kind, pos), first)
            )
    for lid, hs in hints.items():
        lp = program.loop(lid)
        program = program.replace_node(lid, replace(lp, prefetch=lp.prefetch + tuple(hs)))
    return program


# ---------------------------------------------------------------------------
# pointer incrementation


def final_value(loop: Loop) -> SymExpr:
    """Value of the loop variable after the last iteration of a nonempty loop."""
    lit = loop.stride.as_int()
    if lit in (1, -1):
        return loop.end
    return loop.start + func("ceildiv", loop.end - loop.start, loop.stride) * loop.stride


class AccessSite:
    """One access together with the loops around its statement."""

    def __init__(self, stmt: Statement, kind: str, pos: int, access: Access, anc: tuple[Loop, ...]):
        self.stmt = stmt
        self.kind = kind
        self.pos = pos
        self.access = access
        self.anc = anc

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.stmt.id, self.kind, self.pos)


def plan_pointer_increment(program: Program, site: AccessSite, pid: str) -> PointerPlan:
    """Pointer plan realizing ``site.access.offset`` incrementally.

    Only loops nested below the innermost parallel ancestor take part.  A
    loop is involved when its variable occurs in the offset after every
    deeper involved loop's variable was replaced by that loop's start.
    """
    f = site.access.offset
    if not any(f.depends_on(lp.var) for lp in site.anc):
        raise NotApplicable(f"offset {f} of {site.access.container} uses no loop variable")
    par = max((k for k, lp in enumerate(site.anc) if lp.parallel), default=-1)
    chain = site.anc[par + 1 :]
    g = f
    involved: list[tuple[int, Loop, SymExpr]] = []  # innermost first
    for k in range(len(chain) - 1, -1, -1):
        lp = chain[k]
        if g.depends_on(lp.var):
            if not is_countable(lp):
                raise NotApplicable(f"loop {lp.id} is not countable")
            involved.append((k, lp, g))
            g = g.subs({lp.var: lp.start})
    if not involved:
        raise NotApplicable(f"offset {f} only varies with parallel loops")
    facts = facts_for(program, site.anc)

    steps: list[PointerStep] = []
    for n, (k, lp, gl) in enumerate(involved):
        var = sym(lp.var)
        inc = gl.subs({lp.var: var + lp.stride}) - gl
        reset = guard = None
        if n + 1 < len(involved):
            reset = gl.subs({lp.var: final_value(lp)}) - gl.subs({lp.var: lp.start})
            sgn = facts.sign(lp.stride)
            span = (lp.end - lp.start) if sgn == 1 else (lp.start - lp.end)
            guard = not (sgn in (1, -1) and facts.is_positive(span))
        steps.append(PointerStep(lp.id, inc, reset, bool(guard)))

    # reset followed by the parent's increment cancels when both agree
    for n in range(len(steps) - 1):
        k, lp, _ = involved[n]
        pk = involved[n + 1][0]
        cur, parent = steps[n], steps[n + 1]
        if (
            pk == k - 1
            and cur.reset is not None
            and not cur.reset_guard
            and parent.increment is not None
            and symbolic_equal(cur.reset, parent.increment)
        ):
            steps[n] = replace(cur, reset=None)
            steps[n + 1] = replace(parent, increment=None)
    return PointerPlan(pid, site.access.container, involved[-1][1].id, g, tuple(steps), f)


def _targets(program: Program, want: Callable[[AccessSite], bool] | None):
    local_names = {c.name for lp in program.loops() for c in lp.locals}
    for node, anc in walk(program.body):
        if not isinstance(node, Statement) or not anc:
            continue
        for kind, pos, a in _accesses(node):
            c = program.container(a.container)
            if c.scalar or a.container in local_names or a.schedule is not None:
                continue
            site = AccessSite(node, kind, pos, a, anc)
            if want is None or want(site):
                yield site


def _constant_difference(a: SymExpr, b: SymExpr) -> int | None:
    return (a - b).as_int()


def plan_pointers(
    program: Program,
    want: Callable[[AccessSite], bool] | None = None,
    merge: bool = True,
) -> Program:
    """Pointer-increment every targeted array access inside loops.

    With ``merge`` accesses to one container within the same innermost loop
    whose offsets differ by an integer constant share a single pointer.
    """
    groups: list[tuple[AccessSite, list[AccessSite]]] = []
    for site in _targets(program, want):
        if merge:
            for base, members in groups:
                if (
                    base.access.container == site.access.container
                    and base.anc[-1].id == site.anc[-1].id
                    and _constant_difference(site.access.offset, base.access.offset) is not None
                ):
                    members.append(site)
                    break
            else:
                groups.append((site, [site]))
        else:
            groups.append((site, [site]))

    plans: list[PointerPlan] = list(program.pointers)
    taken = {p.id for p in plans}
    refs: dict[tuple[str, str, int], PointerRef] = {}
    counter: dict[str, int] = {}
    for _, members in groups:
        base = min(members, key=lambda s: abs(s.access.offset.constant_term))
        n = counter.get(base.access.container, 0)
        while f"{base.access.container}{n}" in taken:
            n += 1
        pid = f"{base.access.container}{n}"
        try:
            plan = plan_pointer_increment(program, base, pid)
        except NotApplicable:
            continue
        counter[base.access.container] = n + 1
        taken.add(pid)
        plans.append(plan)
        for m in members:
            refs[m.key] = PointerRef(pid, _constant_difference(m.access.offset, base.access.offset))

    def rewrite(s: Statement) -> Statement:
        reads = tuple(
            replace(a, schedule=refs[(s.id, "read", k)]) if (s.id, "read", k) in refs else a
            for k, a in enumerate(s.reads)
        )
        write = s.write
        if (s.id, "write", 0) in refs:
            write = replace(write, schedule=refs[(s.id, "write", 0)])
        return replace(s, reads=reads, write=write)

    out = program.map_statements(rewrite)
    return replace(out, pointers=tuple(plans))


def merge_constant_offsets(program: Program) -> Program:
    """Fold pointer plans whose accesses differ by a constant into one.

    Plans are merged when they cover the same container, sit in the same
    innermost loop and their base offsets differ by an integer.
    """
    by_loop: dict[str, str] = {}
    for node, anc in walk(program.body):
        if isinstance(node, Statement) and anc:
            for _, _, a in _accesses(node):
                if a.schedule is not None:
                    by_loop[a.schedule.pointer] = anc[-1].id
    kept: list[PointerPlan] = []
    remap: dict[str, tuple[str, int]] = {}
    for plan in program.pointers:
        for k in kept:
            d = _constant_difference(plan.base_offset, k.base_offset)
            if k.container == plan.container and by_loop.get(k.id) == by_loop.get(plan.id) and d is not None:
                remap[plan.id] = (k.id, d)
                break
        else:
            kept.append(plan)

    def fix(a: Access) -> Access:
        if a.schedule is None or a.schedule.pointer not in remap:
            return a
        pid, d = remap[a.schedule.pointer]
        return replace(a, schedule=PointerRef(pid, a.schedule.delta + d))

    out = program.map_statements(
        lambda s: replace(s, reads=tuple(fix(a) for a in s.reads), write=fix(s.write))
    )
    return replace(out, pointers=tuple(kept))


def strip_memory_schedules(program: Program) -> Program:
    def clear(body):
        out = []
        for n in body:
            if isinstance(n, Loop):
                out.append(replace(n, prefetch=(), body=clear(n.body)))
            elif isinstance(n, Statement):
                out.append(
                    replace(
                        n,
                        reads=tuple(replace(a, schedule=None) for a in n.reads),
                        write=replace(n.write, schedule=None),
                    )
                )
            else:
                out.append(n)
        return tuple(out)

    return replace(program, body=clear(program.body), pointers=())


def schedule_report(program: Program) -> dict:
    """JSON-ready summary of every planned memory schedule."""
    prefetch = []
    for lp in program.loops():
        for h in lp.prefetch:
            prefetch.append(
                {
                    "loop": h.loop,
                    "container": h.container,
                    "offset": str(h.offset),
                    "first_access_offset": str(h.source_offset),
                    "rw": h.rw,
                    "level": h.level,
                    "source": list(h.source),
                }
            )
    uses: dict[str, list] = {}
    for s in program.statements():
        for kind, pos, a in _accesses(s):
            if a.schedule is not None:
                uses.setdefault(a.schedule.pointer, []).append(
                    {"statement": s.id, "kind": kind, "position": pos, "access_offset": a.schedule.delta}
                )
    pointers = []
    for p in program.pointers:
        pointers.append(
            {
                "pointer": p.id,
                "container": p.container,
                "init_before": p.init_loop,
                "init_offset": str(p.init_offset),
                "per_loop": [
                    {
                        "loop": st.loop,
                        "delta_i": None if st.increment is None else str(st.increment),
                        "delta_r": None if st.reset is None else str(st.reset),
                        "reset_guarded": st.reset_guard,
                    }
                    for st in p.steps
                ],
                "accesses": uses.get(p.id, []),
            }
        )
    return {"prefetch": prefetch, "pointers": pointers}


def schedule_report_json(program: Program) -> str:
    return json.dumps(schedule_report(program), indent=2, sort_keys=True)

