import json
import re
from dataclasses import replace

import pytest

from silo.dependence import eliminate_dependencies
from silo.dsl import parse
from silo.errors import UnloweredSchedule
from silo.interp import random_inputs, run
from silo.ir import PointerRef, Release, Wait
from silo.lower import LowerOptions, emit_report, lower, run_compiled
from silo.parallelize import apply_doacross
from silo.pipeline import PRESETS, run_passes

from conftest import CORPUS_FILES, HAVE_CC, load, same_outputs, sample_params

needs_cc = pytest.mark.skipif(not HAVE_CC, reason="no C compiler")


def _pipelined_mixed():
    prog, _ = eliminate_dependencies(load("mixed_deps.silo"))
    return apply_doacross(prog.loop("L0"), prog)


@pytest.mark.parametrize("name", CORPUS_FILES)
def test_lowering_is_deterministic(name):
    prog = run_passes(load(name), PRESETS["all"]).program
    assert lower(prog) == lower(prog)
    again = run_passes(load(name), PRESETS["all"]).program
    assert lower(again) == lower(prog)


def test_pipelined_mixed_has_one_wait_and_one_release():
    src = lower(_pipelined_mixed())
    body = src.split("silo_kernel(")[1]
    assert len(re.findall(r"\bsilo_wait\(", body)) == 1
    assert len(re.findall(r"\bsilo_release\(", body)) == 1
    assert "calloc" in body and "free(" in body
    assert "#pragma omp parallel for" in body


def test_padded_scale_text():
    src = lower(run_passes(load("padded_scale.silo"), PRESETS["ptrinc"]).program)
    assert "double *silo_ptr_A0 = A + (2*SJ);" in src
    assert "silo_ptr_A0 += SJ;" in src
    assert "silo_ptr_A0 -= SJ*(J - 2);" in src
    assert "silo_ptr_A0 += 2*SI;" in src
    assert "silo_ptr_B0[0] = (silo_ptr_A0[0] * 2.0);" in src


def test_guarded_reset_text():
    src = lower(run_passes(load("triangle.silo"), PRESETS["ptrinc"]).program)
    assert re.search(r"if \(silo_trips\([^)]*\) > 0\) silo_ptr_A0 -= ", src)


def test_prefetch_text():
    src = lower(run_passes(load("triangle.silo"), PRESETS["prefetch"]).program)
    assert "__builtin_prefetch(&A[N*i + i + N + 1], 0, 2);" in src


def test_options():
    prog = load("matmul.silo")
    src = lower(prog, LowerOptions(kernel_name="mm", comments=False))
    assert "void mm(" in src
    assert "/* S0 */" not in src


def test_marker_outside_pipelined_loop_is_refused():
    prog = _pipelined_mixed()
    seq = prog.replace_node("L0", replace(prog.loop("L0"), schedule="sequential"))
    with pytest.raises(UnloweredSchedule):
        lower(seq)


def test_unknown_pointer_is_refused():
    prog = load("matmul.silo")
    s0 = prog.statement("S0")
    bad = prog.replace_node("S0", replace(s0, write=replace(s0.write, schedule=PointerRef("ghost", 0))))
    with pytest.raises(UnloweredSchedule):
        lower(bad)


def test_reserved_names_are_refused():
    prog = parse("param N: int > 0\narray static[f64](N)\nfor i = 0 : N : 1 { static[i] = 1.0 }", check=False)
    with pytest.raises(UnloweredSchedule):
        lower(prog)


def test_report_json():
    prog = run_passes(load("vadv.silo"), PRESETS["all"]).program
    rep = json.loads(emit_report(prog, {"input": "vadv.silo"}))
    loops = {lp["loop"]: lp for lp in rep["loops"]}
    assert loops["forward"]["schedule"] == "doacross"
    assert loops["forward"]["sync"]["waits"] == [{"channel": ["k", "i", "j"], "vector": ["k - 1", "i", "j"]}]
    assert loops["forward"]["sync"]["releases"] == 1
    assert rep["input"] == "vadv.silo"


@needs_cc
@pytest.mark.parametrize("name", CORPUS_FILES)
def test_compiled_kernels_match_interpreter(name):
    prog = load(name)
    out = run_passes(prog, PRESETS["all"]).program
    params = sample_params(prog, 11)
    data = random_inputs(prog, params, 11)
    expect = run(prog, params, {n: v.copy() for n, v in data.items()})
    for threads in (1, 4):
        got = run_compiled(out, params, {n: v.copy() for n, v in data.items()}, threads=threads)
        assert same_outputs(expect, got, prog.live_outs()) == [], (name, threads)


@needs_cc
def test_compiled_doacross_with_many_threads():
    prog = _pipelined_mixed()
    params = {"N": 7, "K": 30}
    data = random_inputs(prog, params, 2)
    expect = run(prog, params, {n: v.copy() for n, v in data.items()})
    for _ in range(5):
        got = run_compiled(prog, params, {n: v.copy() for n, v in data.items()}, threads=8)
        assert same_outputs(expect, got, prog.live_outs()) == []


def test_every_marker_is_lowered():
    prog = run_passes(load("vadv.silo"), PRESETS["config2"]).program
    src = lower(prog)
    waits = sum(isinstance(n, Wait) for lp in prog.loops() for n in lp.body)
    releases = sum(isinstance(n, Release) for lp in prog.loops() for n in lp.body)
    assert src.count("silo_wait(&") == waits
    assert src.count("silo_release(&") == releases
