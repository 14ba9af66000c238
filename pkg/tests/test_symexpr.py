import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from silo.symexpr import (
    Facts,
    NonAffineSystem,
    NonLinearInDelta,
    SymExpr,
    compile_expr,
    const,
    func,
    parse_expr,
    prove_injective,
    simplify,
    solve_affine,
    solve_delta,
    substitute,
    sym,
    symbolic_equal,
)
from silo.errors import DSLSyntaxError

i, j, k, N, M, J, SI, SJ = (sym(n) for n in ("i", "j", "k", "N", "M", "J", "SI", "SJ"))


# ---------------------------------------------------------------------------
# canonical form


def test_identity_collapses_to_zero():
    assert simplify((J - 2) * SJ + 2 * SJ - J * SJ).is_zero


def test_like_terms_combine():
    assert simplify(3 * i + 2 * i - i) == 4 * i


def test_shift_difference_of_strided_offset():
    f = SJ * j
    assert simplify(f.subs({"j": j + 1}) - f) == SJ


def test_equality_ignores_construction_order():
    assert i * M + j == j + M * i
    assert hash(i * M + j) == hash(j + M * i)


def test_int_comparison():
    assert (i - i + 3) == 3
    assert (i + 1).as_int() is None
    assert const(7).as_int() == 7


def test_free_symbols_reach_into_opaque_arguments():
    e = func("log2", i + N) + j
    assert e.free_symbols == {"i", "j", "N"}
    assert e.has_opaque


def test_powers_and_degree():
    e = (i + 1) ** 2
    assert e == i * i + 2 * i + 1
    assert e.degree_in("i") == 2


@pytest.mark.parametrize(
    "text, expect",
    [
        ("SJ*(J - 2)", SJ * (J - 2)),
        ("2*SI", 2 * SI),
        ("i*K + k - 1", i * sym("K") + k - 1),
        ("-(N - 1)", 1 - N),
        ("log2(i)", func("log2", i)),
        ("ceildiv(N, 4)", func("ceildiv", N, 4)),
        ("i**2", i * i),
    ],
)
def test_parse_expr(text, expect):
    assert parse_expr(text) == expect


def test_parse_expr_rejects_division():
    with pytest.raises(DSLSyntaxError):
        parse_expr("N / 2")


def test_printing_factors_common_terms():
    assert str(SJ * (J - 2)) == "SJ*(J - 2)"
    assert str(2 * SI) == "2*SI"
    assert str(k - 1) == "k - 1"
    assert str(const(0)) == "0"


def test_printed_form_reparses():
    for e in [SJ * (J - 2), i * N + j - 3, -(i * i) + 2 * N, func("max", i, N) + 1]:
        assert parse_expr(str(e)) == e


# ---------------------------------------------------------------------------
# substitution


def test_substitute_start_value():
    assert substitute(SI * i + SJ * j, "j", 2) == SI * i + 2 * SJ


def test_substitute_identity():
    e = SI * i + SJ * j + 4
    assert substitute(e, "j", j) == e


def test_substitute_inside_opaque_is_evaluable():
    e = substitute(func("log2", i), "i", 8)
    assert e.has_opaque
    assert e.evaluate({}) == 3


def test_simultaneous_substitution():
    e = i + 2 * j
    assert e.subs({"i": j, "j": i}) == j + 2 * i


# ---------------------------------------------------------------------------
# symbolic equality


def test_symbolic_equal_examples():
    assert symbolic_equal(k, k + 1 - 1)
    assert not symbolic_equal(SJ * j, SI * j)
    assert symbolic_equal(i * M + j, j + M * i)


def test_symbolic_equal_agrees_with_random_evaluation():
    rng = random.Random(0)
    a, b = i * M + j, j + M * i
    for _ in range(100):
        env = {"i": rng.randint(-50, 50), "j": rng.randint(-50, 50), "M": rng.randint(-50, 50)}
        assert a.evaluate(env) == b.evaluate(env)


# ---------------------------------------------------------------------------
# delta equations


def _idx(ii, kk, K=sym("K")):
    return ii * K + kk


def test_delta_from_shifted_column():
    d = solve_delta(_idx(i, k - 1), _idx(i, k), "k", 1, "past")
    assert d is not None and d.value == 1 and d.direction == "past"


def test_delta_future_direction():
    d = solve_delta(_idx(i, k + 1), _idx(i, k), "k", 1, "future")
    assert d is not None and d.value == 1 and d.direction == "future"


def test_delta_zero_is_excluded():
    assert solve_delta(_idx(i, k), _idx(i, k), "k", 1, "past") is None
    assert solve_delta(2 * i + N, 2 * i + N, "i", 3, "future") is None


def test_delta_parity_has_no_solution():
    assert solve_delta(2 * i, 2 * i + 1, "i", 1, "past") is None
    assert solve_delta(2 * i, 2 * i + 1, "i", 1, "future") is None
    # brute-force cross-check
    assert not any(2 * a == 2 * b + 1 for a in range(64) for b in range(64))


def test_delta_respects_stride():
    # A[i] read, A[i - 4] written, stride 2: two iterations back
    d = solve_delta(i - 4, i, "i", 2, "past")
    assert d.value == 2
    # an odd distance never lands on another iteration of a stride-2 loop
    assert solve_delta(i - 3, i, "i", 2, "past") is None


def test_symbolic_delta_needs_positivity():
    facts = Facts().with_lower("T", 1)
    d = solve_delta(i - sym("T"), i, "i", 1, "past", facts)
    assert d is not None and d.conditional and d.value == sym("T")
    assert solve_delta(i - sym("T"), i, "i", 1, "past") is None


def test_delta_nonlinear_raises():
    with pytest.raises(NonLinearInDelta):
        solve_delta(i * i, i * i, "i", 1, "past")
    with pytest.raises(NonLinearInDelta):
        solve_delta(func("log2", i), func("log2", i), "i", 1, "past")


def test_delta_invariant_offset():
    d = solve_delta(N + 1, N + 1, "i", 1, "past")
    assert d is not None and d.invariant


# ---------------------------------------------------------------------------
# injectivity


def test_injective_affine_with_positive_slope():
    facts = Facts().with_lower("SI", 1)
    assert prove_injective(SI * i + 2 * SJ, "i", facts)


def test_injectivity_is_conservative():
    assert not prove_injective(func("log2", i), "i")
    assert not prove_injective(0 * i + 7, "i")
    assert not prove_injective(i * i, "i")
    assert not prove_injective(SI * i, "i")  # SI may be zero without facts


# ---------------------------------------------------------------------------
# facts


def test_facts_prove_products_of_bounded_symbols():
    facts = Facts().with_lower("N", 1).with_lower("M", 2)
    assert facts.is_positive(N * M - 1)
    assert facts.is_nonneg(M - 2)
    assert facts.sign(-N) == -1
    assert facts.sign(N - M) is None
    assert facts.sign(const(0)) == 0


def test_facts_with_loop_variable_lower_bound():
    facts = Facts().with_lower("N", 1).with_lower("i", N)
    assert facts.is_nonneg(i - N)
    assert facts.is_positive(i)


# ---------------------------------------------------------------------------
# affine systems


def test_solve_affine_two_unknowns():
    sol = solve_affine([sym("x") + sym("y") - 3 * N, sym("x") - sym("y") - N], ["x", "y"])
    assert sol.consistent
    assert sol.values["x"] == 2 * N and sol.values["y"] == N


def test_solve_affine_inconsistent():
    sol = solve_affine([sym("x") - 1, sym("x") - 2], ["x"])
    assert not sol.consistent


def test_solve_affine_free_unknown():
    sol = solve_affine([sym("x") - sym("y")], ["x", "y"])
    assert sol.consistent and len(sol.free) == 1


def test_solve_affine_rejects_symbolic_coefficients():
    with pytest.raises(NonAffineSystem):
        solve_affine([N * sym("x") - 1], ["x"])


def test_solve_affine_grouping_splits_identities():
    # x*1 + (y - 2)*i == 0 for every i forces x = 0, y = 2
    sol = solve_affine([sym("x") + (sym("y") - 2) * i], ["x", "y"], group_by=["i"])
    assert sol.consistent and sol.values == {"x": const(0), "y": const(2)}


# ---------------------------------------------------------------------------
# properties

NAMES = ("i", "j", "N", "M")


@st.composite
def expr_trees(draw, depth=3):
    """A SymExpr together with a plain Python evaluator for it."""
    if depth == 0 or draw(st.booleans()):
        if draw(st.booleans()):
            c = draw(st.integers(-6, 6))
            return const(c), (lambda env, c=c: c)
        n = draw(st.sampled_from(NAMES))
        return sym(n), (lambda env, n=n: env[n])
    op = draw(st.sampled_from(["+", "-", "*", "max", "log2"]))
    a, fa = draw(expr_trees(depth - 1))
    if op == "log2":
        arg = a * a + 1
        return func("log2", arg), (lambda env: (fa(env) ** 2 + 1).bit_length() - 1)
    b, fb = draw(expr_trees(depth - 1))
    if op == "+":
        return a + b, (lambda env: fa(env) + fb(env))
    if op == "-":
        return a - b, (lambda env: fa(env) - fb(env))
    if op == "*":
        return a * b, (lambda env: fa(env) * fb(env))
    return func("max", a, b), (lambda env: max(fa(env), fb(env)))


envs = st.fixed_dictionaries({n: st.integers(-20, 20) for n in NAMES})


@settings(max_examples=200, deadline=None)
@given(expr_trees(), envs)
def test_canonical_form_evaluates_like_the_tree(tree, env):
    e, f = tree
    assert e.evaluate(env) == f(env)
    assert compile_expr(e)(env) == f(env)
    assert simplify(simplify(e)) == simplify(e)
    if e.as_int() is not None:
        assert hash(e) == hash(e.as_int())


@settings(max_examples=150, deadline=None)
@given(expr_trees(), expr_trees(), envs)
def test_distinct_canonical_forms_evaluate_differently_somewhere(t1, t2, env):
    a, b = t1[0], t2[0]
    if a == b:
        assert a.evaluate(env) == b.evaluate(env)
        return
    if a.has_opaque or b.has_opaque:
        return  # opaque atoms are uninterpreted, so no claim
    rng = random.Random(repr(a.key) + repr(b.key))
    assert any(
        a.evaluate(e) != b.evaluate(e)
        for e in ({n: rng.randint(-1000, 1000) for n in NAMES} for _ in range(50))
    )


@settings(max_examples=100, deadline=None)
@given(expr_trees(), expr_trees(), envs)
def test_substitution_commutes_with_evaluation(t1, t2, env):
    e, _ = t1
    r, _ = t2
    lhs = e.subs({"i": r}).evaluate(env)
    rhs = e.evaluate(dict(env, i=r.evaluate(env)))
    assert lhs == rhs


@settings(max_examples=100, deadline=None)
@given(expr_trees(depth=2), expr_trees(depth=2), expr_trees(depth=2))
def test_symbolic_equal_is_an_equivalence(t1, t2, t3):
    a, b, c = t1[0], t2[0], t3[0]
    assert symbolic_equal(a, a)
    assert symbolic_equal(a, b) == symbolic_equal(b, a)
    if symbolic_equal(a, b) and symbolic_equal(b, c):
        assert symbolic_equal(a, c)


affine = st.tuples(st.integers(-4, 4), st.integers(-4, 4), st.integers(-8, 8))  # (var, N, const)


def _affine(coeffs, var="i"):
    a, b, c = coeffs
    return a * sym(var) + b * N + c


@settings(max_examples=300, deadline=None)
@given(affine, affine, st.sampled_from([1, 2, 3, -1, -2]), st.sampled_from(["past", "future"]))
def test_solve_delta_is_sound(fc, gc, stride, direction):
    f, g = _affine(fc), _affine(gc)
    d = solve_delta(f, g, "i", stride, direction)
    if d is None or d.invariant:
        return
    dv = d.value.as_int()
    assert dv is not None and dv > 0
    sgn = -1 if direction == "past" else 1
    for n_val in (1, 5, 17):
        for v in range(64):
            env = {"i": v, "N": n_val}
            shifted = {"i": v + sgn * dv * stride, "N": n_val}
            assert f.evaluate(env) == g.evaluate(shifted)


@settings(max_examples=300, deadline=None)
@given(affine, st.integers(1, 16), st.sampled_from([1, 2, 3, -1, -3]))
def test_solve_delta_finds_planted_shift(fc, d, stride):
    f = _affine(fc)
    if fc[0] == 0:
        return  # invariant offsets have no unique distance
    g = f.subs({"i": sym("i") + d * stride})  # f(v) == g(v - d*stride)
    sol = solve_delta(f, g, "i", stride, "past")
    assert sol is not None and sol.value == d
    assert solve_delta(g, f, "i", stride, "future").value == d


def test_brute_force_uniform_shift_table():
    """Every literal pair with a uniform shift up to 16 is found."""
    for a, c1, c2 in itertools.product(range(1, 4), range(-6, 7), range(-6, 7)):
        f, g = a * i + c1, a * i + c2
        shifts = [d for d in range(1, 17) if all(f.evaluate({"i": v}) == g.evaluate({"i": v - d}) for v in range(64))]
        sol = solve_delta(f, g, "i", 1, "past")
        if shifts:
            assert sol is not None and sol.value == shifts[0]
        else:
            assert sol is None
