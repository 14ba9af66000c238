from dataclasses import replace

import pytest

from silo.dsl import parse
from silo.errors import NotApplicable
from silo.interp import PointerMismatch, random_inputs, run
from silo.ir import Loop, walk
from silo.memsched import (
    AccessSite,
    final_value,
    merge_constant_offsets,
    plan_pointer_increment,
    plan_pointers,
    plan_prefetch,
    schedule_report,
    strip_memory_schedules,
)
from silo.pipeline import PRESETS, run_passes
from silo.symexpr import const, func, parse_expr, sym, symbolic_equal

from conftest import CORPUS_FILES, load, same_outputs, sample_params

SI, SJ, J = sym("SI"), sym("SJ"), sym("J")


def _site(program, stmt_id, kind="read", pos=0):
    stmt = program.statement(stmt_id)
    access = stmt.reads[pos] if kind == "read" else stmt.write
    return AccessSite(stmt, kind, pos, access, program.ancestors(stmt_id))


def test_padded_scale_plan():
    prog = load("padded_scale.silo")
    plan = plan_pointer_increment(prog, _site(prog, "S0"), "A0")
    inner, outer = plan.steps
    assert (inner.loop, outer.loop) == ("L1", "L0")
    assert symbolic_equal(inner.increment, SJ)
    assert symbolic_equal(outer.increment, 2 * SI)
    assert symbolic_equal(inner.reset, (J - 2) * SJ)
    assert outer.reset is None
    assert not inner.reset_guard  # J > 2 proves the j-loop nonempty
    assert plan.init_loop == "L0"
    assert plan.init_offset == 2 * SJ


def test_padded_report_strings():
    rep = schedule_report(plan_pointers(load("padded_scale.silo")))
    a = next(p for p in rep["pointers"] if p["container"] == "A")
    per = {s["loop"]: s for s in a["per_loop"]}
    assert parse_expr(per["L1"]["delta_i"]) == SJ
    assert parse_expr(per["L0"]["delta_i"]) == 2 * SI
    assert parse_expr(per["L1"]["delta_r"]) == SJ * (J - 2)


def test_final_value():
    lp = Loop("L", "i", const(0), sym("N"), const(1), ())
    assert final_value(lp) == sym("N")
    lp2 = Loop("L", "i", const(0), sym("N"), const(2), ())
    assert final_value(lp2) == 2 * func("ceildiv", sym("N"), 2)
    for n in range(1, 12):
        assert final_value(lp2).evaluate({"N": n}) == max(range(0, n, 2)) + 2


def test_stencil_accesses_share_one_pointer():
    prog = plan_pointers(load("laplace.silo"))
    s0 = prog.statement("S0")
    same_row = [a.schedule for a in s0.reads if a.schedule.pointer == "inp0"]
    assert sorted(r.delta for r in same_row) == [-1, 0, 1]
    # rows above and below differ by the symbolic pitch, so they get their own
    assert len({a.schedule.pointer for a in s0.reads}) == 3


def test_merge_after_the_fact_matches_planned_merge():
    prog = load("laplace.silo")
    merged = merge_constant_offsets(plan_pointers(prog, merge=False))
    direct = plan_pointers(prog)
    assert len(merged.pointers) == len(direct.pointers)
    refs = lambda p: sorted((a.schedule.delta for a in p.statement("S0").reads))  # noqa: E731
    assert refs(merged) == refs(direct)


def test_loop_invariant_offset_is_not_applicable():
    prog = parse(
        "param N: int > 0\narray a[f64](N)\narray b[f64](N)\nfor i = 0 : N : 1 { a[0] = a[0] + b[i] }"
    )
    with pytest.raises(NotApplicable):
        plan_pointer_increment(prog, _site(prog, "s0"), "a0")
    out = plan_pointers(prog)
    assert {p.container for p in out.pointers} == {"b"}


def test_offsets_only_varying_with_parallel_loops_are_not_applicable():
    prog = parse("param N: int > 0\narray a[f64](N)\ndoall for i = 0 : N : 1 { a[i] = 1.0 }")
    with pytest.raises(NotApplicable):
        plan_pointer_increment(prog, _site(prog, "s0", "write"), "a0")


def test_uncountable_loop_is_not_applicable():
    prog = load("doubling_stride.silo")
    out = plan_pointers(prog)
    assert out.pointers == ()


def test_reset_omitted_for_contiguous_rows():
    prog = parse(
        """
        param I: int > 0
        param J: int > 0
        array A[f64](I, J)
        for i = 0 : I : 1 {
          for j = 0 : J : 1 { A[i, j] = 1.0 }
        }
        """
    )
    plan = plan_pointer_increment(prog, _site(prog, "s0", "write"), "A0")
    inner, outer = plan.steps
    assert inner.increment == 1 and inner.reset is None
    assert outer.increment is None


def test_guarded_reset_when_loop_may_be_empty():
    rep = schedule_report(plan_pointers(load("triangle.silo")))
    a = next(p for p in rep["pointers"] if p["container"] == "A")
    inner = a["per_loop"][0]
    assert inner["reset_guarded"] is True
    assert parse_expr(inner["delta_r"]) == sym("N") - sym("i")


def test_pointer_init_sits_below_parallel_loop():
    prog = run_passes(load("matmul.silo"), PRESETS["all"]).program
    par = [lp.id for lp in prog.loops() if lp.parallel]
    assert par
    for plan in prog.pointers:
        anc_ids = [lp.id for lp in prog.ancestors(plan.init_loop)]
        assert par[0] in anc_ids


@pytest.mark.parametrize("name", CORPUS_FILES)
@pytest.mark.parametrize("preset", ["ptrinc", "all"])
def test_pointer_walk_matches_direct_offsets(name, preset):
    """The interpreter checks every pointer dereference against the direct offset."""
    prog = load(name)
    out = run_passes(prog, PRESETS[preset]).program
    for seed in range(4):
        params = sample_params(prog, seed)
        data = random_inputs(prog, params, seed)
        expect = run(prog, params, {n: v.copy() for n, v in data.items()})
        got = run(out, params, {n: v.copy() for n, v in data.items()}, check_pointers=True)
        assert same_outputs(expect, got, prog.live_outs()) == []


def test_triangle_prefetch_hint():
    prog = plan_prefetch(load("triangle.silo"))
    hints = [(lp.id, h) for lp in prog.loops() for h in lp.prefetch]
    assert len(hints) == 1
    lid, h = hints[0]
    i, N = sym("i"), sym("N")
    assert lid == "L0" and h.container == "A" and h.rw == "read"
    assert h.source_offset == i * (N + 1)
    assert h.offset == (i + 1) * (N + 1)


def test_tiled_matmul_prefetch_hints():
    prog = plan_prefetch(load("tiled_matmul.silo"))
    got = {(lp.id, h.container) for lp in prog.loops() for h in lp.prefetch}
    assert got == {("L1", "C"), ("L2", "A"), ("L2", "B")}


def test_no_hints_without_jumping_starts():
    for name in ("matmul.silo", "laplace.silo", "padded_scale.silo"):
        prog = plan_prefetch(load(name))
        assert not any(lp.prefetch for lp in prog.loops())


def test_prefetch_skips_parallel_owners():
    prog = run_passes(load("triangle.silo"), PRESETS["all"]).program
    assert prog.loop("L0").parallel
    assert not prog.loop("L0").prefetch


@pytest.mark.parametrize("name", CORPUS_FILES)
def test_prefetch_invariants(name):
    prog = plan_prefetch(load(name))
    for node, anc in walk(prog.body):
        if not isinstance(node, Loop):
            continue
        for h in node.prefetch:
            stmt_anc = prog.ancestors(h.source[0])
            # never attached to the access's innermost loop
            assert stmt_anc[-1].id != node.id
            assert symbolic_equal(h.offset, h.source_offset.subs({node.var: sym(node.var) + node.stride}))


def test_strip_removes_all_schedules():
    prog = run_passes(load("tiled_matmul.silo"), PRESETS["all"]).program
    clean = strip_memory_schedules(prog)
    assert clean.pointers == ()
    assert not any(lp.prefetch for lp in clean.loops())
    assert all(a.schedule is None for s in clean.statements() for _, a in s.accesses())


def test_corrupted_plan_is_caught():
    prog = plan_pointers(load("padded_scale.silo"))
    bad_plan = prog.pointers[0]
    inner = replace(bad_plan.steps[0], increment=bad_plan.steps[0].increment + 1)
    broken = replace(prog, pointers=(replace(bad_plan, steps=(inner,) + bad_plan.steps[1:]),) + prog.pointers[1:])
    params = sample_params(prog, 0)
    with pytest.raises(PointerMismatch):
        run(broken, params, random_inputs(prog, params, 0), check_pointers=True)
