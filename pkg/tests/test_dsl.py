import pytest

from silo.dsl import parse, print_program
from silo.errors import DSLSyntaxError, DuplicateContainer, UnboundSymbol
from silo.ir import Loop, Release, Statement, Wait
from silo.memsched import strip_memory_schedules
from silo.pipeline import PRESETS, run_passes
from silo.symexpr import sym

from conftest import load


def test_corpus_round_trips(corpus_program):
    _, prog = corpus_program
    text = print_program(prog)
    again = parse(text)
    assert again == prog
    assert print_program(again) == text


@pytest.mark.parametrize("preset", ["config2", "all"])
def test_transformed_programs_round_trip(corpus_program, preset):
    _, prog = corpus_program
    # schedules, sync markers and scalars survive printing; memory schedules
    # have no textual form and are compared after stripping
    transformed = strip_memory_schedules(run_passes(prog, PRESETS[preset]).program)
    assert parse(print_program(transformed)) == transformed


def test_strided_layout_is_kept():
    prog = load("padded_scale.silo")
    a = prog.container("A")
    assert a.strides == (sym("SI"), sym("SJ"))
    s0 = prog.statement("S0")
    assert s0.reads[0].offset == sym("SI") * sym("i") + sym("SJ") * sym("j")


def test_row_major_default_and_linear_offset():
    prog = parse(
        """
        param N: int > 0
        param M: int > 0
        array A[f64](N, M)
        for i = 0 : N : 1 {
          for j = 0 : M : 1 { A[i, j] = A[@i*M + j] + 1.0 }
        }
        """
    )
    st = prog.statements()[0]
    assert st.write.offset == st.reads[0].offset
    assert st.reads[0].index is None


def test_parameter_bounds():
    prog = parse("param N: int > 2\nparam M: int >= N\narray a[f64](M)\nfor i = 0 : N : 1 { a[i] = 1.0 }")
    assert prog.params[0].lower == 3
    assert prog.params[1].lower == sym("N")


def test_labels_and_auto_ids():
    prog = parse("param N: int > 0\narray a[f64](N)\nouter: for i = 0 : N : 1 { a[i] = 1.0\n X: a[i] = 2.0 }")
    assert prog.body[0].id == "outer"
    assert [s.id for s in prog.statements()] == ["s0", "X"]


def test_sync_markers_and_schedules_parse():
    prog = parse(
        """
        param N: int > 1
        array a[f64](N)
        doacross for i = 1 : N : 1 {
          wait[i](i - 1)
          a[i] = a[i - 1] + 1.0
          release[i]
        }
        """
    )
    loop = prog.body[0]
    assert isinstance(loop, Loop) and loop.schedule == "doacross"
    assert isinstance(loop.body[0], Wait) and loop.body[0].vector == (sym("i") - 1,)
    assert isinstance(loop.body[1], Statement)
    assert isinstance(loop.body[2], Release)


def test_loop_local_scalar():
    prog = parse(
        """
        param N: int > 0
        array a[f64](N)
        for i = 0 : N : 1 {
          scalar t[f64]
          t = 2.0
          a[i] = t * t
        }
        """
    )
    loop = prog.body[0]
    assert loop.locals[0].scalar
    assert prog.statements()[1].reads[0].index == ()


def test_comments_are_ignored():
    prog = parse("# heading\nparam N: int > 0 # trailing\narray a[f64](N)\nfor i = 0 : N : 1 { a[i] = 1.0 } # end")
    assert len(prog.statements()) == 1


@pytest.mark.parametrize(
    "text, exc",
    [
        ("param N: int > 0\narray a[f64](N)\n", DSLSyntaxError),
        ("param N: int > 0\narray a[f64](N)\nfor i = 0 : N : 1 { }", DSLSyntaxError),
        ("param N: int > 0\narray a[f64](N)\nfor i = 0 : M : 1 { a[i] = 1.0 }", UnboundSymbol),
        ("param N: int > 0\narray a[f64](N)\nfor i = 0 : N : 1 { b[i] = 1.0 }", UnboundSymbol),
        ("param N: int > 0\narray a[f64](N)\nfor i = 0 : N : 1 { a[i] = a[q] }", UnboundSymbol),
        ("param N: int > 0\narray a[f64](N)\narray a[f64](N)\nfor i = 0 : N : 1 { a[i] = 1.0 }", DuplicateContainer),
        ("param N: int > 0\narray a[f64](N)\nfor i = 0 : N : 1 { for i = 0 : N : 1 { a[i] = 1.0 } }", DSLSyntaxError),
        ("param N: int > 0\narray a[f32](N)\nfor i = 0 : N : 1 { a[i] = 1.0 }", DSLSyntaxError),
        ("param N: int > 0\narray a[f64](N)\nfor i = 0 : N : 1 { a[i] = 1.0 +  }", DSLSyntaxError),
        ("param N: int > 0\narray a[f64](N)\nfor i = 0 : N : 1 { X: a[i] = 1.0\n X: a[i] = 2.0 }", DSLSyntaxError),
        ("param N: int > 0\narray a[f64](N)\nfor i = 0 : N : 1 { wait[j](i) }", UnboundSymbol),
    ],
)
def test_malformed_programs_are_rejected(text, exc):
    with pytest.raises(exc):
        parse(text)


def test_syntax_errors_carry_positions():
    with pytest.raises(DSLSyntaxError) as info:
        parse("param N: int > 0\narray a[f64](N)\nfor i = 0 : N { a[i] = 1.0 }")
    assert info.value.line == 3
