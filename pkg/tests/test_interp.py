import math
import random

import numpy as np
import pytest

from silo.dsl import parse
from silo.errors import Deadlock, NonTerminating, OutOfBounds
from silo.interp import address_trace, allocate, pipelined_run, python_source, random_params, run
from silo.pipeline import PRESETS, run_passes

from conftest import load


def test_laplace_hand_computed():
    prog = load("laplace.silo")
    params = {"N": 3, "M": 3, "SI": 3}
    inp = np.arange(9, dtype=float) ** 2
    out = np.full(9, -1.0)
    res = run(prog, params, {"inp": inp, "out": out})
    expect = np.full(9, -1.0)
    expect[4] = 4 * 16 - 1 - 49 - 9 - 25  # centre minus its four neighbours
    assert res["out"].tolist() == expect.tolist()
    assert res["inp"].tolist() == inp.tolist()


def test_laplace_padding_is_untouched():
    prog = load("laplace.silo")
    params = {"N": 4, "M": 3, "SI": 5}
    trace = address_trace(prog, params)
    written = sorted({a for _, c, a, k in trace if c == "out" and k == "write"})
    assert written == [6, 11]


def test_zero_trip_loop_leaves_data_alone():
    prog = parse("param N: int >= 0\narray a[f64](N + 1)\nfor i = 0 : N : 1 { a[i] = 7.0 }")
    res = run(prog, {"N": 0}, {"a": np.array([3.0])})
    assert res["a"].tolist() == [3.0]


def test_doubling_loop():
    prog = load("doubling_stride.silo")
    res = run(prog, {"n": 10}, {"a": np.ones(10)})
    assert res["a"].tolist() == [0.0] * 4 + [1.0] * 6


def test_outer_variable_stride():
    prog = load("outer_variable_stride.silo")
    params = random_params(prog, random.Random(0), spread=8)
    res = run(prog, params, {"b": np.zeros(allocate(prog, params)["b"], dtype=np.int64)})
    expect = np.zeros_like(res["b"])
    for i in range(1, params["N"]):
        for j in range(0, params["M"], i):
            expect[j] += i
    assert res["b"].tolist() == expect.tolist()


def test_address_trace_padded():
    prog = load("padded_scale.silo")
    trace = address_trace(prog, {"I": 3, "J": 4, "SJ": 1, "SI": 4})
    reads = [a for s, c, a, k in trace if c == "A"]
    writes = [a for s, c, a, k in trace if c == "B"]
    assert reads == [2, 3, 10, 11]
    assert writes == reads


def test_out_of_bounds_is_reported():
    prog = parse("param N: int > 0\narray a[f64](N)\nfor i = 0 : N : 1 { a[i + 1] = 1.0 }")
    with pytest.raises(OutOfBounds):
        run(prog, {"N": 3})


def test_out_of_bounds_per_dimension():
    # linear offset stays in range but the column index does not
    prog = parse("param N: int > 1\narray a[f64](N, N)\nfor i = 0 : N : 1 { a[0, i + 1] = 1.0 }")
    with pytest.raises(OutOfBounds):
        run(prog, {"N": 3})


def test_parameter_bounds_are_checked():
    prog = load("mixed_deps.silo")
    with pytest.raises(ValueError):
        run(prog, {"N": 1, "K": 2})
    with pytest.raises(KeyError):
        run(prog, {"N": 1})


def test_integer_division_truncates_like_c():
    prog = parse(
        """
        array a[i64](4)
        for i = 0 : 1 : 1 {
          a[2] = a[0] / a[1]
          a[3] = a[1] / a[0]
        }
        """
    )
    res = run(prog, {}, {"a": np.array([-7, 2, 0, 0], dtype=np.int64)})
    assert res["a"].tolist()[2:] == [-3, 0]


def test_float_division_follows_ieee():
    prog = parse("array a[f64](4)\nfor i = 0 : 1 : 1 {\n a[2] = a[0] / a[1]\n a[3] = a[1] / a[1]\n}")
    res = run(prog, {}, {"a": np.array([-1.0, 0.0, 0.0, 0.0])})
    assert res["a"][2] == -math.inf
    assert math.isnan(res["a"][3])


def test_functions():
    prog = parse("array a[f64](6)\nfor i = 0 : 1 : 1 {\n a[1] = exp(a[0])\n a[2] = sqrt(a[0])\n a[3] = max(a[0], 2.0)\n a[4] = abs(-a[0])\n a[5] = log(a[0])\n}")
    res = run(prog, {}, {"a": np.array([4.0, 0, 0, 0, 0, 0])})
    assert res["a"].tolist() == [4.0, math.exp(4.0), 2.0, 4.0, 4.0, math.log(4.0)]


def test_budget_stops_runaway_loops():
    prog = parse("param N: int > 0\narray a[f64](1)\nfor i = 0 : N : 1 { a[0] = a[0] + 1.0 }")
    with pytest.raises(NonTerminating):
        run(prog, {"N": 10_000}, budget=100)


def test_sequential_run_rejects_unsatisfiable_waits():
    prog = parse(
        """
        param N: int > 2
        array a[f64](N)
        doacross for i = 0 : N : 1 {
          wait[i](i + 1)
          a[i] = 1.0
          release[i]
        }
        """
    )
    with pytest.raises(Deadlock):
        run(prog, {"N": 4})


def test_pipelined_simulation_interleaves_workers():
    prog = run_passes(load("vadv.silo"), PRESETS["config2"]).program
    src = python_source(prog, pipelined=True)
    assert "yield" in src
    params = {"I": 2, "J": 2, "K": 6}
    base = run(prog, params)
    for workers in (1, 2, 5):
        got = pipelined_run(prog, workers, params, seed=workers)
        assert np.array_equal(base["utens_stage"], got["utens_stage"], equal_nan=True)


def test_internal_containers_start_as_nan():
    prog = run_passes(load("mixed_deps.silo"), PRESETS["config2"]).program
    res = run(prog, {"N": 2, "K": 4})
    # the copy only covers columns 2 .. K-1, so column 0 was never written
    assert math.isnan(res["C_copy"][0])
    assert not math.isnan(res["C_copy"][2])
