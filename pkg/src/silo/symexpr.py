"""Canonical symbolic integer expressions.

A :class:`SymExpr` is a multivariate polynomial with integer coefficients
over program symbols and *opaque* terms (uninterpreted integer functions
such as ``log2(i)``).  Construction always normalizes, so two expressions
are symbolically equal exactly when their canonical forms compare equal.

Rational coefficients only appear transiently inside the linear solvers;
they never leak out of :func:`solve_delta`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Union

from silo._lex import DSLSyntaxError, TokenStream

__all__ = [
    "AffineSolution",
    "DeltaSolution",
    "Facts",
    "NonAffineSystem",
    "NonLinearInDelta",
    "Opaque",
    "SymExpr",
    "const",
    "func",
    "parse_expr",
    "prove_injective",
    "simplify",
    "solve_affine",
    "solve_delta",
    "substitute",
    "sym",
    "symbolic_equal",
]

Coeff = Union[int, Fraction]


def _floor_log2(x: int) -> int:
    if x <= 0:
        raise ValueError(f"log2 of non-positive value {x}")
    return x.bit_length() - 1


def _ceildiv(a: int, b: int) -> int:
    if b == 0:
        raise ZeroDivisionError("ceildiv by zero")
    return -((-a) // b)


# name -> (arity, evaluator)
OPAQUE_FUNCS: dict[str, tuple[int, Callable[..., int]]] = {
    "log2": (1, _floor_log2),
    "ceildiv": (2, _ceildiv),
    "min": (2, min),
    "max": (2, max),
}


class NonLinearInDelta(ValueError):
    """The shift unknown appears non-linearly after expansion."""


class NonAffineSystem(ValueError):
    """An unknown of a linear system has a non-constant coefficient."""


# --------------------------------------------------------------------------
# atoms and monomials


@dataclass(frozen=True)
class Opaque:
    """Uninterpreted integer function applied to symbolic arguments."""

    name: str
    args: tuple["SymExpr", ...]

    @property
    def key(self) -> tuple:
        return (1, self.name, tuple(a.key for a in self.args))

    def __str__(self) -> str:
        return f"{self.name}({', '.join(str(a) for a in self.args)})"


Atom = Union[str, Opaque]
Monomial = tuple  # tuple[tuple[Atom, int], ...], sorted by atom key


def _atom_key(atom: Atom) -> tuple:
    return (0, atom) if isinstance(atom, str) else atom.key


def _mono_key(mono: Monomial) -> tuple:
    return tuple((_atom_key(a), p) for a, p in mono)


def _mono_degree(mono: Monomial) -> int:
    return sum(p for _, p in mono)


def _mono_order(mono: Monomial) -> tuple:
    # graded order, used for printing and polynomial division
    return (_mono_degree(mono), _mono_key(mono))


def _mono_mul(a: Monomial, b: Monomial) -> Monomial:
    if not a:
        return b
    if not b:
        return a
    powers: dict[Atom, int] = {}
    for atom, p in a:
        powers[atom] = p
    for atom, p in b:
        powers[atom] = powers.get(atom, 0) + p
    return tuple(sorted(powers.items(), key=lambda ap: _atom_key(ap[0])))


def _mono_div(a: Monomial, b: Monomial) -> Monomial | None:
    """a / b if b divides a, else None."""
    powers = dict(a)
    for atom, p in b:
        have = powers.get(atom, 0)
        if have < p:
            return None
        if have == p:
            del powers[atom]
        else:
            powers[atom] = have - p
    return tuple(sorted(powers.items(), key=lambda ap: _atom_key(ap[0])))


def _norm(c: Coeff) -> Coeff:
    if isinstance(c, Fraction) and c.denominator == 1:
        return int(c.numerator)
    return c


# --------------------------------------------------------------------------
# expressions


class SymExpr:
    """Immutable canonical polynomial; see module docstring."""

    __slots__ = ("_terms", "_hash", "_key")

    def __init__(self, terms: Mapping[Monomial, Coeff] | None = None):
        clean = {}
        for mono, c in (terms or {}).items():
            c = _norm(c)
            if c != 0:
                clean[mono] = c
        self._terms: dict[Monomial, Coeff] = clean
        self._key = tuple(sorted(((_mono_key(m), c) for m, c in clean.items())))
        # constants hash like the numbers they compare equal to
        if not clean:
            self._hash = hash(0)
        elif len(clean) == 1 and () in clean:
            self._hash = hash(clean[()])
        else:
            self._hash = hash(self._key)

    # -- constructors -----------------------------------------------------
    @staticmethod
    def lift(value: "SymExpr | int | Fraction | str") -> "SymExpr":
        if isinstance(value, SymExpr):
            return value
        if isinstance(value, bool):
            raise TypeError("bool is not a symbolic integer")
        if isinstance(value, (int, Fraction)):
            return SymExpr({(): value})
        if isinstance(value, str):
            return parse_expr(value)
        raise TypeError(f"cannot convert {type(value).__name__} to SymExpr")

    # -- structure ----------------------------------------------------------
    @property
    def terms(self) -> Mapping[Monomial, Coeff]:
        return self._terms

    @property
    def key(self) -> tuple:
        return self._key

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other: object) -> bool:
        if isinstance(other, (int, Fraction)) and not isinstance(other, bool):
            other = SymExpr.lift(other)
        if not isinstance(other, SymExpr):
            return NotImplemented
        return self._key == other._key

    def __ne__(self, other: object) -> bool:
        eq = self.__eq__(other)
        return eq if eq is NotImplemented else not eq

    @property
    def is_zero(self) -> bool:
        return not self._terms

    @property
    def is_constant(self) -> bool:
        return all(not m for m in self._terms)

    @property
    def constant_term(self) -> Coeff:
        return self._terms.get((), 0)

    def as_int(self) -> int | None:
        """Integer value if this is an integer literal."""
        if self.is_constant:
            c = self.constant_term
            if isinstance(c, int):
                return c
        return None

    @property
    def has_fractions(self) -> bool:
        return any(isinstance(c, Fraction) for c in self._terms.values())

    def atoms(self) -> set[Atom]:
        out: set[Atom] = set()
        for mono in self._terms:
            for atom, _ in mono:
                out.add(atom)
        return out

    @property
    def free_symbols(self) -> frozenset[str]:
        out: set[str] = set()
        for atom in self.atoms():
            if isinstance(atom, str):
                out.add(atom)
            else:
                for arg in atom.args:
                    out |= arg.free_symbols
        return frozenset(out)

    def depends_on(self, name: str) -> bool:
        return name in self.free_symbols

    @property
    def has_opaque(self) -> bool:
        return any(isinstance(a, Opaque) for a in self.atoms())

    def degree_in(self, name: str) -> int:
        deg = 0
        for mono in self._terms:
            for atom, p in mono:
                if atom == name:
                    deg = max(deg, p)
        return deg

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        other = SymExpr.lift(other)
        terms = dict(self._terms)
        for mono, c in other._terms.items():
            terms[mono] = terms.get(mono, 0) + c
        return SymExpr(terms)

    __radd__ = __add__

    def __neg__(self):
        return SymExpr({m: -c for m, c in self._terms.items()})

    def __sub__(self, other):
        return self + (-SymExpr.lift(other))

    def __rsub__(self, other):
        return SymExpr.lift(other) - self

    def __mul__(self, other):
        other = SymExpr.lift(other)
        terms: dict[Monomial, Coeff] = {}
        for m1, c1 in self._terms.items():
            for m2, c2 in other._terms.items():
                m = _mono_mul(m1, m2)
                terms[m] = terms.get(m, 0) + c1 * c2
        return SymExpr(terms)

    __rmul__ = __mul__

    def __pow__(self, n: int):
        if not isinstance(n, int) or n < 0:
            raise ValueError("only non-negative integer powers are supported")
        out = SymExpr.lift(1)
        for _ in range(n):
            out = out * self
        return out

    def scale(self, c: Coeff) -> "SymExpr":
        return SymExpr({m: v * c for m, v in self._terms.items()})

    # -- substitution and evaluation --------------------------------------
    def subs(self, mapping: Mapping[str, "SymExpr | int"]) -> "SymExpr":
        """Simultaneous substitution of symbols, also inside opaque args."""
        if not mapping:
            return self
        repl = {k: SymExpr.lift(v) for k, v in mapping.items()}
        out = SymExpr()
        for mono, c in self._terms.items():
            term = SymExpr.lift(c)
            for atom, p in mono:
                if isinstance(atom, str):
                    base = repl.get(atom)
                    if base is None:
                        base = SymExpr({((atom, 1),): 1})
                else:
                    base = func(atom.name, *(a.subs(repl) for a in atom.args))
                term = term * (base**p)
            out = out + term
        return out

    def evaluate(self, env: Mapping[str, int]) -> int:
        total: Coeff = 0
        for mono, c in self._terms.items():
            val: Coeff = c
            for atom, p in mono:
                if isinstance(atom, str):
                    try:
                        v = env[atom]
                    except KeyError:
                        raise KeyError(f"unbound symbol {atom!r}") from None
                else:
                    arity, fn = OPAQUE_FUNCS[atom.name]
                    v = fn(*(a.evaluate(env) for a in atom.args))
                val = val * (v**p)
            total += val
        total = _norm(total)
        if isinstance(total, Fraction):
            raise ValueError(f"{self} does not evaluate to an integer")
        return int(total)

    # -- printing -----------------------------------------------------------
    def __repr__(self) -> str:
        return f"SymExpr({str(self)!r})"

    def __str__(self) -> str:
        return _format(self, _fmt_atom_plain)

    def to_c(self) -> str:
        return _format(self, _fmt_atom_c, expand_powers=True)

    def sorted_terms(self) -> list[tuple[Monomial, Coeff]]:
        return sorted(self._terms.items(), key=lambda mc: _mono_order(mc[0]), reverse=True)


def sym(name: str) -> SymExpr:
    return SymExpr({((name, 1),): 1})


def const(value: int) -> SymExpr:
    return SymExpr.lift(value)


def func(name: str, *args: "SymExpr | int") -> SymExpr:
    """Opaque term ``name(args)``.  Never folded automatically."""
    if name not in OPAQUE_FUNCS:
        raise ValueError(f"unknown opaque function {name!r}")
    arity, _ = OPAQUE_FUNCS[name]
    if len(args) != arity:
        raise ValueError(f"{name} expects {arity} argument(s), got {len(args)}")
    atom = Opaque(name, tuple(SymExpr.lift(a) for a in args))
    return SymExpr({((atom, 1),): 1})


def simplify(e: SymExpr | int) -> SymExpr:
    """Canonical form; expressions are kept canonical, so this is a re-normalization."""
    e = SymExpr.lift(e)
    return SymExpr(e.terms)


def substitute(e: SymExpr, s: str, r: SymExpr | int) -> SymExpr:
    return SymExpr.lift(e).subs({s: r})


def symbolic_equal(a: SymExpr | int, b: SymExpr | int) -> bool:
    return (SymExpr.lift(a) - SymExpr.lift(b)).is_zero


# --------------------------------------------------------------------------
# printing helpers


def _fmt_atom_plain(atom: Atom) -> str:
    return atom if isinstance(atom, str) else str(atom)


def _fmt_atom_c(atom: Atom) -> str:
    if isinstance(atom, str):
        return atom
    return f"silo_{atom.name}({', '.join(a.to_c() for a in atom.args)})"


def _fmt_mono(mono: Monomial, fmt_atom, expand_powers: bool) -> list[str]:
    parts = []
    for atom, p in mono:
        s = fmt_atom(atom)
        if p == 1:
            parts.append(s)
        elif expand_powers:
            parts.extend([s] * p)
        else:
            parts.append(f"{s}**{p}")
    return parts


def _fmt_sum(e: SymExpr, fmt_atom, expand_powers: bool) -> str:
    if e.is_zero:
        return "0"
    out = []
    for idx, (mono, c) in enumerate(e.sorted_terms()):
        neg = c < 0
        mag = -c if neg else c
        factors = _fmt_mono(mono, fmt_atom, expand_powers)
        if mag != 1 or not factors:
            factors.insert(0, str(mag))
        body = "*".join(factors)
        if idx == 0:
            out.append(f"-{body}" if neg else body)
        else:
            out.append(f" - {body}" if neg else f" + {body}")
    return "".join(out)


def _format(e: SymExpr, fmt_atom, expand_powers: bool = False) -> str:
    terms = e.terms
    if len(terms) < 2 or e.has_fractions:
        return _fmt_sum(e, fmt_atom, expand_powers)
    # pull out a common monomial factor and integer content: SJ*(J - 2)
    monos = list(terms)
    common = dict(monos[0])
    for mono in monos[1:]:
        powers = dict(mono)
        common = {a: min(p, powers.get(a, 0)) for a, p in common.items()}
        common = {a: p for a, p in common.items() if p > 0}
    content = 0
    for c in terms.values():
        content = math.gcd(content, int(c))
    if all(c < 0 for c in terms.values()):
        content = -content
    if not common and content == 1:
        return _fmt_sum(e, fmt_atom, expand_powers)
    cmono = tuple(sorted(common.items(), key=lambda ap: _atom_key(ap[0])))
    rest = SymExpr({_mono_div(m, cmono): Fraction(c, content) for m, c in terms.items()})
    head = SymExpr({cmono: content})
    return f"{_fmt_sum(head, fmt_atom, expand_powers)}*({_fmt_sum(rest, fmt_atom, expand_powers)})"


# --------------------------------------------------------------------------
# python code generation for fast evaluation


def _py_atom(atom: Atom) -> str:
    if isinstance(atom, str):
        return f"e[{atom!r}]"
    args = ", ".join(to_python(a) for a in atom.args)
    return f"_F[{atom.name!r}]({args})"


def to_python(e: SymExpr) -> str:
    if e.is_zero:
        return "0"
    parts = []
    for mono, c in e.sorted_terms():
        if isinstance(c, Fraction):
            raise ValueError("cannot compile rational expression")
        factors = [_py_atom(a) for a, p in mono for _ in range(p)]
        if c != 1 or not factors:
            factors.insert(0, f"({c})")
        parts.append("*".join(factors))
    return " + ".join(parts)


_OPAQUE_EVAL = {name: fn for name, (_, fn) in OPAQUE_FUNCS.items()}


@lru_cache(maxsize=None)
def compile_expr(e: SymExpr) -> Callable[[Mapping[str, int]], int]:
    """Compile to a Python callable taking an environment mapping."""
    src = f"lambda e: {to_python(e)}"
    return eval(src, {"_F": _OPAQUE_EVAL})  # noqa: S307 - generated from canonical terms


# --------------------------------------------------------------------------
# parsing


class ExprParser:
    """Recursive-descent parser for integer index expressions."""

    def __init__(self, stream: TokenStream):
        self.ts = stream

    def parse(self) -> SymExpr:
        return self.expr()

    def expr(self) -> SymExpr:
        out = self.term()
        while True:
            if self.ts.accept("+"):
                out = out + self.term()
            elif self.ts.accept("-"):
                out = out - self.term()
            else:
                return out

    def term(self) -> SymExpr:
        out = self.unary()
        while self.ts.at("*"):
            self.ts.next()
            out = out * self.unary()
        if self.ts.at("/"):
            raise self.ts.error("division is not allowed in index expressions")
        return out

    def unary(self) -> SymExpr:
        if self.ts.accept("-"):
            return -self.unary()
        if self.ts.accept("+"):
            return self.unary()
        return self.power()

    def power(self) -> SymExpr:
        base = self.atom()
        if self.ts.accept("**"):
            tok = self.ts.next()
            if tok.kind != "NUM" or not tok.text.isdigit():
                raise self.ts.error("exponent must be a non-negative integer", tok)
            base = base ** int(tok.text)
        return base

    def atom(self) -> SymExpr:
        tok = self.ts.peek()
        if tok.kind == "NUM":
            self.ts.next()
            if not tok.text.isdigit():
                raise DSLSyntaxError(f"expected integer literal, got {tok.text!r}", tok.line, tok.col)
            return const(int(tok.text))
        if tok.kind == "NAME":
            self.ts.next()
            if self.ts.at("("):
                return self.call(tok)
            return self.symbol(tok)
        if self.ts.accept("("):
            inner = self.expr()
            self.ts.expect(")")
            return inner
        raise self.ts.error(f"unexpected {tok.text or 'end of input'!r} in expression", tok)

    def call(self, name_tok) -> SymExpr:
        if name_tok.text not in OPAQUE_FUNCS:
            raise DSLSyntaxError(f"unknown function {name_tok.text!r}", name_tok.line, name_tok.col)
        self.ts.expect("(")
        args = [self.expr()]
        while self.ts.accept(","):
            args.append(self.expr())
        self.ts.expect(")")
        try:
            return func(name_tok.text, *args)
        except ValueError as exc:
            raise DSLSyntaxError(str(exc), name_tok.line, name_tok.col) from None

    def symbol(self, tok) -> SymExpr:
        return sym(tok.text)


def parse_expr(text: str) -> SymExpr:
    ts = TokenStream.from_text(text)
    out = ExprParser(ts).parse()
    if ts.peek().kind != "EOF":
        raise ts.error(f"trailing input {ts.peek().text!r}")
    return out


# --------------------------------------------------------------------------
# sign facts


@dataclass(frozen=True)
class Facts:
    """Inclusive lower bounds on symbols, in dependency order.

    ``params`` names the program parameters; everything else that appears in
    an expression is treated as a loop variable by the analyses.
    """

    lower: tuple[tuple[str, SymExpr], ...] = ()
    params: frozenset[str] = frozenset()

    def with_lower(self, name: str, bound: SymExpr | int) -> "Facts":
        return Facts(self.lower + ((name, SymExpr.lift(bound)),), self.params)

    def with_params(self, names: Iterable[str]) -> "Facts":
        return Facts(self.lower, self.params | frozenset(names))

    def is_nonneg(self, e: SymExpr | int) -> bool:
        e = SymExpr.lift(e)
        fresh = set()
        for name, bound in reversed(self.lower):
            if e.depends_on(name):
                shifted = f"{name}__nn"
                fresh.add(shifted)
                e = e.subs({name: bound + sym(shifted)})
        for mono, c in e.terms.items():
            if c < 0:
                return False
            for atom, p in mono:
                if not (isinstance(atom, str) and atom in fresh) and p % 2:
                    return False
        return True

    def is_positive(self, e: SymExpr | int) -> bool:
        return self.is_nonneg(SymExpr.lift(e) - 1)

    def sign(self, e: SymExpr | int) -> int | None:
        """+1, -1 or 0 when provable, else None."""
        e = SymExpr.lift(e)
        if e.is_zero:
            return 0
        if self.is_positive(e):
            return 1
        if self.is_positive(-e):
            return -1
        return None


# --------------------------------------------------------------------------
# delta solving


@dataclass(frozen=True)
class DeltaSolution:
    """Iteration distance of a shifted-equality solution.

    ``conditional`` marks a symbolic value whose positivity was proven from
    declared parameter bounds rather than read off a literal; ``invariant``
    marks an equation that holds for every shift (loop-invariant offsets),
    in which case ``value`` is the closest iteration, 1.
    """

    value: SymExpr
    direction: str
    conditional: bool = False
    invariant: bool = False

    def __str__(self) -> str:
        return str(self.value)


_DELTA = "__delta"


def _divide_exact(b: SymExpr, a: SymExpr) -> SymExpr | None:
    """Polynomial quotient b / a if a divides b with integer coefficients."""
    if a.is_zero:
        return None
    if a.is_constant:
        q = b.scale(Fraction(1, 1) / a.constant_term)
        return None if q.has_fractions else q
    lead_mono, lead_c = a.sorted_terms()[0]
    rem = b
    quot = SymExpr()
    for _ in range(10_000):
        if rem.is_zero:
            return None if quot.has_fractions else quot
        mono, c = rem.sorted_terms()[0]
        m = _mono_div(mono, lead_mono)
        if m is None:
            return None
        t = SymExpr({m: Fraction(c) / lead_c})
        quot = quot + t
        rem = rem - t * a
    return None


def _split_by(e: SymExpr, names: frozenset[str]) -> dict[Monomial, SymExpr]:
    """Group terms by their monomial restricted to ``names``."""
    groups: dict[Monomial, dict] = {}
    for mono, c in e.terms.items():
        key = tuple((a, p) for a, p in mono if isinstance(a, str) and a in names)
        rest = tuple((a, p) for a, p in mono if not (isinstance(a, str) and a in names))
        groups.setdefault(key, {})
        groups[key][rest] = groups[key].get(rest, 0) + c
    return {k: SymExpr(v) for k, v in groups.items()}


def solve_delta(
    f: SymExpr,
    g: SymExpr,
    var: str,
    stride: SymExpr | int,
    direction: str,
    facts: Facts | None = None,
) -> DeltaSolution | None:
    """Solve ``f(var) == g(var -/+ delta*stride)`` for a positive delta.

    ``direction='past'`` shifts ``g`` backwards (read-after-write),
    ``'future'`` forwards (write-after-read).  The equality must hold as an
    identity in ``var``; every other symbol is a fixed value.  Returns None
    when there is no solution, when the only solution is delta = 0, or when
    positivity cannot be proven.  Raises :class:`NonLinearInDelta` if delta
    enters non-linearly.
    """
    if direction not in ("past", "future"):
        raise ValueError(f"direction must be 'past' or 'future', not {direction!r}")
    facts = facts or Facts()
    f, g, stride = SymExpr.lift(f), SymExpr.lift(g), SymExpr.lift(stride)
    step = sym(_DELTA) * stride
    shift = sym(var) + step if direction == "future" else sym(var) - step
    h = f - g.subs({var: shift})

    opaque_syms = [(a, SymExpr({((a, 1),): 1}).free_symbols) for a in h.atoms() if isinstance(a, Opaque)]
    for atom, syms in opaque_syms:
        if _DELTA in syms:
            raise NonLinearInDelta(f"shift appears inside {atom}")
    if any(var in syms for _, syms in opaque_syms):
        # not a polynomial identity in var; nothing provable
        return None
    if h.degree_in(_DELTA) > 1:
        raise NonLinearInDelta(f"shift appears with degree {h.degree_in(_DELTA)}")

    equations = []
    for _, coeff in _split_by(h, frozenset([var])).items():
        parts = _split_by(coeff, frozenset([_DELTA]))
        a = parts.get(((_DELTA, 1),), SymExpr())
        b = parts.get((), SymExpr())
        equations.append((a, b))

    if all(a.is_zero for a, _ in equations):
        if all(b.is_zero for _, b in equations):
            return DeltaSolution(const(1), direction, invariant=True)
        return None

    a0, b0 = next((a, b) for a, b in equations if not a.is_zero)
    delta = _divide_exact(-b0, a0)
    if delta is None:
        return None
    for a, b in equations:
        if not (a * delta + b).is_zero:
            return None
    lit = delta.as_int()
    if lit is not None:
        return DeltaSolution(delta, direction) if lit > 0 else None
    if facts.is_positive(delta):
        return DeltaSolution(delta, direction, conditional=True)
    return None


def prove_injective(f: SymExpr, var: str, facts: Facts | None = None) -> bool:
    """True only if ``f`` is affine in ``var`` with a provably nonzero slope."""
    facts = facts or Facts()
    f = SymExpr.lift(f)
    if f.degree_in(var) != 1:
        return False
    for atom in f.atoms():
        if isinstance(atom, Opaque) and var in SymExpr({((atom, 1),): 1}).free_symbols:
            return False
    slope = _split_by(f, frozenset([var])).get(((var, 1),), SymExpr())
    if slope.is_zero:
        return False
    return facts.sign(slope) in (1, -1)


# --------------------------------------------------------------------------
# general affine systems


@dataclass
class AffineSolution:
    """Result of :func:`solve_affine`.

    ``values`` maps pivot unknowns to expressions over the known symbols and
    the ``free`` unknowns.  ``residuals`` are non-constant expressions that
    must vanish for the system to be consistent; a nonzero constant residual
    makes ``consistent`` False.
    """

    consistent: bool
    values: dict[str, SymExpr]
    free: frozenset[str]
    residuals: list[SymExpr]


def solve_affine(
    equations: Iterable[SymExpr],
    unknowns: Iterable[str],
    group_by: Iterable[str] = (),
) -> AffineSolution:
    """Gauss-Jordan elimination for ``expr == 0`` equations linear in ``unknowns``.

    Symbols in ``group_by`` are treated as indeterminates: each equation is
    split into one equation per monomial in them (polynomial identity).
    Every unknown must have a rational constant coefficient after grouping,
    otherwise :class:`NonAffineSystem` is raised.
    """
    unknowns = list(dict.fromkeys(unknowns))
    uset = frozenset(unknowns)
    group = frozenset(group_by) - uset
    rows: list[tuple[dict[str, Fraction], SymExpr]] = []
    for eq in equations:
        eq = SymExpr.lift(eq)
        for atom in eq.atoms():
            if isinstance(atom, Opaque) and SymExpr({((atom, 1),): 1}).free_symbols & uset:
                raise NonAffineSystem(f"unknown inside opaque term {atom}")
        for _, part in _split_by(eq, group).items():
            coeffs: dict[str, Fraction] = {}
            rhs_terms: dict = {}
            for mono, c in part.terms.items():
                hit = [(a, p) for a, p in mono if isinstance(a, str) and a in uset]
                if not hit:
                    rhs_terms[mono] = rhs_terms.get(mono, 0) - c
                    continue
                if len(hit) > 1 or hit[0][1] != 1 or len(mono) != 1:
                    raise NonAffineSystem(f"non-constant coefficient in term {SymExpr({mono: c})}")
                u = hit[0][0]
                coeffs[u] = coeffs.get(u, Fraction(0)) + Fraction(c)
            coeffs = {u: c for u, c in coeffs.items() if c != 0}
            rows.append((coeffs, SymExpr(rhs_terms)))

    pivots: dict[str, int] = {}
    work = [(dict(c), r) for c, r in rows]
    r_idx = 0
    for u in unknowns:
        sel = next((i for i in range(r_idx, len(work)) if work[i][0].get(u)), None)
        if sel is None:
            continue
        work[r_idx], work[sel] = work[sel], work[r_idx]
        coeffs, rhs = work[r_idx]
        piv = coeffs[u]
        coeffs = {k: v / piv for k, v in coeffs.items()}
        rhs = rhs.scale(Fraction(1) / piv)
        work[r_idx] = (coeffs, rhs)
        for i in range(len(work)):
            if i == r_idx:
                continue
            ci, ri = work[i]
            factor = ci.get(u)
            if not factor:
                continue
            merged = dict(ci)
            for k, v in coeffs.items():
                merged[k] = merged.get(k, Fraction(0)) - factor * v
            merged = {k: v for k, v in merged.items() if v != 0}
            work[i] = (merged, ri - rhs.scale(factor))
        pivots[u] = r_idx
        r_idx += 1

    consistent = True
    residuals = []
    for coeffs, rhs in work[r_idx:]:
        if rhs.is_zero:
            continue
        if rhs.is_constant:
            consistent = False
        else:
            residuals.append(rhs)
    free = frozenset(u for u in unknowns if u not in pivots)
    values = {}
    for u, i in pivots.items():
        coeffs, rhs = work[i]
        val = rhs
        for k, v in coeffs.items():
            if k != u:
                val = val - sym(k).scale(v)
        values[u] = val
    return AffineSolution(consistent, values, free, residuals)
