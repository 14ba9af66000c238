from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from silo.dsl import parse
from silo.errors import NonTerminating, NotCountable
from silo.ir import (
    Loop,
    Statement,
    facts_for,
    is_countable,
    loop_iteration_values,
    row_major_strides,
    validate,
)
from silo.symexpr import const, func, sym

from conftest import load


def _loop(start, end, stride, var="i"):
    body = ()
    return Loop("L", var, const(0) + start, const(0) + end, const(0) + stride, body)


def test_iteration_values_strided():
    assert loop_iteration_values(_loop(0, 5, 2), {}) == [0, 2, 4]


def test_iteration_values_doubling():
    assert loop_iteration_values(_loop(1, 10, sym("i")), {}) == [1, 2, 4, 8]


def test_iteration_values_descending():
    assert loop_iteration_values(_loop(sym("K") - 2, -1, -1, var="k"), {"K": 5}) == [3, 2, 1, 0]


def test_iteration_values_empty():
    assert loop_iteration_values(_loop(5, 5, 1), {}) == []
    assert loop_iteration_values(_loop(0, 5, -1), {}) == []


def test_zero_stride_does_not_terminate():
    with pytest.raises(NonTerminating):
        loop_iteration_values(_loop(0, 5, sym("s")), {"s": 0})
    # the doubling loop from zero never moves
    with pytest.raises(NonTerminating):
        loop_iteration_values(_loop(0, 5, sym("i")), {})


def test_unbound_loop_bound():
    with pytest.raises(NotCountable):
        loop_iteration_values(_loop(0, sym("N"), 1), {})


@given(st.integers(-20, 20), st.integers(-20, 20), st.integers(-5, 5).filter(bool))
def test_iteration_values_match_range(start, end, stride):
    assert loop_iteration_values(_loop(start, end, stride), {}) == list(range(start, end, stride))


def test_countable():
    assert is_countable(_loop(0, sym("N"), 2))
    assert not is_countable(_loop(1, sym("N"), sym("i")))
    assert not is_countable(_loop(0, func("log2", sym("N")), 1))


def test_row_major_strides():
    N, M, K = sym("N"), sym("M"), sym("K")
    assert row_major_strides((N, M, K)) == (M * K, K, const(1))


def test_container_extent_and_linearize():
    prog = load("padded_scale.silo")
    a = prog.container("A")
    I, J, SI, SJ = (sym(n) for n in ("I", "J", "SI", "SJ"))
    assert a.extent() == (I - 1) * SI + (J - 1) * SJ + 1
    assert a.linearize((sym("i"), sym("j"))) == SI * sym("i") + SJ * sym("j")


def test_facts_from_parameters_and_loops():
    prog = load("mixed_deps.silo")
    k_loop = prog.body[0]
    facts = facts_for(prog, (k_loop,))
    assert facts.is_positive(sym("N"))
    assert facts.is_positive(sym("K") - 2)
    assert facts.is_positive(sym("k"))


def test_corpus_is_valid(corpus_program):
    _, prog = corpus_program
    assert validate(prog) == []


def test_validate_reports_problems():
    prog = parse("param N: int > 0\narray a[f64](N)\nfor i = 0 : N : 1 { a[i] = 1.0 }")
    loop = prog.body[0]
    st_ = loop.body[0]
    bad_offset = replace(st_, write=replace(st_.write, offset=sym("i") + 1))
    broken = replace(prog, body=(replace(loop, body=(bad_offset,)),))
    assert any("disagrees" in d for d in validate(broken))

    unbound = replace(prog, body=(replace(loop, end=sym("M")),))
    assert any("not in scope" in d for d in validate(unbound))

    empty = replace(prog, body=(replace(loop, body=()),))
    assert any("empty body" in d for d in validate(empty))

    twice = replace(prog, body=(loop, loop))
    assert any("more than once" in d for d in validate(twice))

    zero = replace(prog, body=(replace(loop, stride=const(0)),))
    assert any("stride is zero" in d for d in validate(zero))


def test_rewriting_helpers():
    prog = load("mixed_deps.silo")
    s1 = prog.statement("S1")
    renamed = prog.replace_node("S1", replace(s1, id="T1"))
    assert [s.id for s in renamed.statements()] == ["T1", "S2", "S3"]
    with pytest.raises(KeyError):
        prog.replace_node("nope", s1)
    assert prog.ancestors("S2") == (prog.loop("L0"), prog.loop("L1"))
    assert prog.fresh_name("A") == "A0"
    assert prog.fresh_name("Z") == "Z"
    assert prog.fresh_id("S1") == "S1_0"
    assert prog.live_outs() == ("B", "C")
    assert isinstance(prog.statement("S3"), Statement)
