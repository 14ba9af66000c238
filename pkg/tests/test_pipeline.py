import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from silo.interp import pipelined_run, random_inputs, run
from silo.pipeline import PASS_ORDER, PRESETS, passes_for, run_passes

from conftest import CORPUS_FILES, load, same_outputs, sample_params

PROGRAMS = {name: load(name) for name in CORPUS_FILES}


def test_presets():
    assert PRESETS["config1"] == ("privatize", "resolve-war", "doall")
    assert PRESETS["config2"] == PRESETS["config1"] + ("doacross",)
    assert set(PRESETS["all"]) == set(PASS_ORDER)


def test_passes_for_switches():
    assert passes_for("doacross", "off") == PRESETS["config2"]
    assert passes_for("off", "all") == ("prefetch", "ptrinc")
    assert passes_for(config=1) == PRESETS["config1"]
    assert passes_for("doall", "ptrinc", config=2) == PRESETS["config2"] + ("ptrinc",)
    with pytest.raises(ValueError):
        passes_for(config=7)
    with pytest.raises(ValueError):
        passes_for("sideways")


def test_unknown_pass_is_rejected():
    with pytest.raises(ValueError):
        run_passes(PROGRAMS["matmul.silo"], ["vectorize"])


def test_request_order_does_not_matter():
    prog = PROGRAMS["vadv.silo"]
    a = run_passes(prog, ["ptrinc", "doacross", "privatize", "doall", "resolve-war", "prefetch"])
    b = run_passes(prog, PRESETS["all"])
    assert a.program == b.program
    assert a.passes == PASS_ORDER


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(CORPUS_FILES),
    st.lists(st.sampled_from(PASS_ORDER), unique=True),
    st.integers(0, 10_000),
)
def test_any_pass_subset_preserves_semantics(name, passes, seed):
    prog = PROGRAMS[name]
    out = run_passes(prog, passes).program
    params = sample_params(prog, seed, spread=3)
    data = random_inputs(prog, params, seed)
    expect = run(prog, params, {n: v.copy() for n, v in data.items()})
    got = run(out, params, {n: v.copy() for n, v in data.items()})
    assert same_outputs(expect, got, prog.live_outs()) == []
    piped = pipelined_run(out, 3, params, {n: v.copy() for n, v in data.items()}, seed=seed)
    assert same_outputs(expect, piped, prog.live_outs()) == []
