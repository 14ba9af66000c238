"""Textual front end: ``parse`` DSL source into a Program and ``print_program`` back.

The grammar is documented in ``docs/grammar.ebnf``.  A short example::

    param N: int > 0
    param K: int > 2
    array A[f64](N) transient
    array B[f64](N, K)
    for k = 1 : K - 1 : 1 {
      for i = 0 : N : 1 {
        S1: A[i] = B[i, k - 1] * 0.5
        S3: B[i, k] = A[i] + 1.0
      }
    }
"""

from __future__ import annotations

from dataclasses import dataclass, field

from silo._lex import DSLSyntaxError, Token, TokenStream
from silo.errors import DuplicateContainer, UnboundSymbol
from silo.ir import (
    FLOAT_FUNCS,
    Access,
    Bin,
    Call,
    Container,
    Loop,
    Neg,
    Node,
    Num,
    Op,
    Param,
    Program,
    Ref,
    Release,
    Statement,
    Val,
    Wait,
    row_major_strides,
    validate,
)
from silo.symexpr import ExprParser, SymExpr, const, sym

__all__ = ["parse", "print_program", "print_op"]

KEYWORDS = frozenset(
    {"param", "array", "scalar", "for", "doall", "doacross", "wait", "release", "transient", "internal", "int"}
)


class _ScopedExprParser(ExprParser):
    def __init__(self, ts: TokenStream, scope: set[str]):
        super().__init__(ts)
        self.scope = scope

    def symbol(self, tok: Token) -> SymExpr:
        if tok.text not in self.scope:
            raise UnboundSymbol(f"unbound symbol {tok.text!r} at line {tok.line}, col {tok.col}")
        return sym(tok.text)


@dataclass
class _Frame:
    vars: set[str]
    containers: dict[str, Container]
    locals: list[Container] = field(default_factory=list)


class _Parser:
    def __init__(self, text: str):
        self.ts = TokenStream.from_text(text)
        self.params: list[Param] = []
        self.containers: list[Container] = []
        self.frames: list[_Frame] = [_Frame(set(), {})]
        self.loop_count = 0
        self.stmt_count = 0
        self.ids: set[str] = set()

    # -- scope helpers ------------------------------------------------------
    @property
    def scope(self) -> set[str]:
        out = {p.name for p in self.params}
        for f in self.frames:
            out |= f.vars
        return out

    def lookup(self, name: str) -> Container | None:
        for f in reversed(self.frames):
            if name in f.containers:
                return f.containers[name]
        return None

    def expr(self, scope: set[str] | None = None) -> SymExpr:
        return _ScopedExprParser(self.ts, self.scope if scope is None else scope).parse()

    def exprlist(self, closer: str) -> list[SymExpr]:
        out = [self.expr()]
        while self.ts.accept(","):
            out.append(self.expr())
        if not self.ts.at(closer):
            raise self.ts.error(f"expected {closer!r}")
        return out

    def claim_id(self, ident: str, tok: Token) -> str:
        if ident in self.ids:
            raise DSLSyntaxError(f"identifier {ident!r} used more than once", tok.line, tok.col)
        self.ids.add(ident)
        return ident

    # -- top level ----------------------------------------------------------
    def program(self) -> Program:
        body: list[Node] = []
        while self.ts.peek().kind != "EOF":
            if self.ts.at("param"):
                if body:
                    raise self.ts.error("parameters must be declared before loops and statements")
                self.param()
            elif self.ts.at("array"):
                self.declare(self.array(), self.ts.peek())
            else:
                body.append(self.item())
        if not body:
            raise self.ts.error("program has no loops or statements")
        prog = Program(tuple(self.params), tuple(self.containers), tuple(body))
        return prog

    def param(self) -> None:
        self.ts.expect("param")
        tok = self.ts.expect_name()
        if tok.text in KEYWORDS:
            raise self.ts.error(f"{tok.text!r} is reserved", tok)
        if tok.text in {p.name for p in self.params}:
            raise DSLSyntaxError(f"parameter {tok.text!r} declared twice", tok.line, tok.col)
        self.ts.expect(":")
        self.ts.expect("int")
        lower = None
        if self.ts.accept(">="):
            lower = self.expr()
        elif self.ts.accept(">"):
            lower = self.expr() + 1
        self.params.append(Param(tok.text, lower))

    def array(self, scalar: bool = False) -> Container:
        self.ts.next()  # array | scalar
        tok = self.ts.expect_name()
        if tok.text in KEYWORDS:
            raise self.ts.error(f"{tok.text!r} is reserved", tok)
        self.ts.expect("[")
        dt = self.ts.expect_name()
        if dt.text not in ("f64", "i64"):
            raise DSLSyntaxError(f"unknown element type {dt.text!r}", dt.line, dt.col)
        self.ts.expect("]")
        if scalar:
            dims: tuple[SymExpr, ...] = (const(1),)
            strides: tuple[SymExpr, ...] = (const(1),)
        else:
            self.ts.expect("(")
            dims = tuple(self.exprlist_until((";", ")")))
            if self.ts.accept(";"):
                strides = tuple(self.exprlist(")"))
                if len(strides) != len(dims):
                    raise self.ts.error(f"{len(strides)} strides given for {len(dims)} dimensions")
            else:
                strides = row_major_strides(dims)
            self.ts.expect(")")
        flags = {"transient": False, "internal": False}
        while self.ts.at("transient") or self.ts.at("internal"):
            flags[self.ts.next().text] = True
        return Container(tok.text, dt.text, dims, strides, scalar=scalar, **flags)

    def exprlist_until(self, closers: tuple[str, ...]) -> list[SymExpr]:
        out = [self.expr()]
        while self.ts.accept(","):
            out.append(self.expr())
        if not any(self.ts.at(c) for c in closers):
            raise self.ts.error(f"expected one of {closers}")
        return out

    def declare(self, c: Container, tok: Token) -> None:
        if self.lookup(c.name) is not None or any(x.name == c.name for x in self.containers):
            raise DuplicateContainer(f"container {c.name!r} declared more than once (line {tok.line})")
        frame = self.frames[-1]
        frame.containers[c.name] = c
        if len(self.frames) == 1:
            self.containers.append(c)
        else:
            frame.locals.append(c)

    # -- body items ---------------------------------------------------------
    def item(self) -> Node:
        tok = self.ts.peek()
        if self.ts.at("wait"):
            self.ts.next()
            channel = self.channel()
            self.ts.expect("(")
            vec = self.exprlist(")")
            self.ts.expect(")")
            if len(vec) != len(channel):
                raise self.ts.error("wait vector length must match its channel", tok)
            self.ts.accept(";")
            return Wait(channel, tuple(vec))
        if self.ts.at("release"):
            self.ts.next()
            channel = self.channel()
            self.ts.accept(";")
            return Release(channel)
        label = None
        if tok.kind == "NAME" and self.ts.at(":", 1):
            label = tok
            self.ts.next()
            self.ts.next()
        if self.ts.at("for") or self.ts.at("doall") or self.ts.at("doacross"):
            return self.loop(label)
        return self.statement(label)

    def channel(self) -> tuple[str, ...]:
        self.ts.expect("[")
        names = [self.ts.expect_name()]
        while self.ts.accept(","):
            names.append(self.ts.expect_name())
        self.ts.expect("]")
        enclosing = set().union(*(f.vars for f in self.frames))
        for n in names:
            if n.text not in enclosing:
                raise UnboundSymbol(f"channel variable {n.text!r} is not an enclosing loop (line {n.line})")
        return tuple(n.text for n in names)

    def loop(self, label: Token | None) -> Loop:
        head = self.ts.peek()
        schedule = "sequential"
        if self.ts.at("doall") or self.ts.at("doacross"):
            schedule = self.ts.next().text
        self.ts.expect("for")
        auto = f"L{self.loop_count}"
        self.loop_count += 1
        loop_id = self.claim_id(label.text if label else auto, label or head)
        var_tok = self.ts.expect_name()
        var = var_tok.text
        if var in KEYWORDS:
            raise self.ts.error(f"{var!r} is reserved", var_tok)
        if var in self.scope:
            raise DSLSyntaxError(f"loop variable {var!r} shadows an enclosing symbol", var_tok.line, var_tok.col)
        self.ts.expect("=")
        start = self.expr()
        self.ts.expect(":")
        end = self.expr()
        self.ts.expect(":")
        stride = self.expr(self.scope | {var})
        self.ts.expect("{")
        self.frames.append(_Frame({var}, {}))
        body: list[Node] = []
        while not self.ts.at("}"):
            if self.ts.peek().kind == "EOF":
                raise self.ts.error("unterminated loop body")
            if self.ts.at("array") or self.ts.at("scalar"):
                tok = self.ts.peek()
                self.declare(self.array(scalar=self.ts.at("scalar")), tok)
                continue
            body.append(self.item())
        close = self.ts.expect("}")
        frame = self.frames.pop()
        if not body:
            raise DSLSyntaxError("loop body is empty", close.line, close.col)
        return Loop(
            loop_id, var, start, end, stride, tuple(body), schedule,
            locals=tuple(frame.locals), pos=(head.line, head.col),
        )

    def statement(self, label: Token | None) -> Statement:
        tok = self.ts.peek()
        auto = f"s{self.stmt_count}"
        self.stmt_count += 1
        reads: list[Access] = []
        target = self.access("write", reads_sink=None)
        self.ts.expect("=")
        op = self.rhs(reads)
        self.ts.accept(";")
        sid = self.claim_id(label.text if label else auto, label or tok)
        return Statement(sid, tuple(reads), target, op, pos=(tok.line, tok.col))

    def access(self, kind: str, reads_sink: list[Access] | None) -> Access:
        tok = self.ts.expect_name()
        c = self.lookup(tok.text)
        if c is None:
            raise UnboundSymbol(f"unknown container {tok.text!r} at line {tok.line}, col {tok.col}")
        if c.scalar:
            if self.ts.at("["):
                raise self.ts.error(f"scalar {c.name!r} takes no subscripts")
            return Access(c.name, const(0), kind, ())
        if not self.ts.at("["):
            raise self.ts.error(f"array {c.name!r} needs subscripts")
        self.ts.expect("[")
        if self.ts.accept("@"):
            offset = self.expr()
            self.ts.expect("]")
            return Access(c.name, offset, kind, None)
        idx = tuple(self.exprlist("]"))
        self.ts.expect("]")
        if len(idx) != c.ndim and len(idx) != 1:
            raise DSLSyntaxError(f"{c.name!r} has {c.ndim} dimensions, got {len(idx)} subscripts", tok.line, tok.col)
        return Access(c.name, c.linearize(idx), kind, idx)

    # -- right-hand sides ------------------------------------------------
    def rhs(self, reads: list[Access]) -> Op:
        out = self.rterm(reads)
        while self.ts.at("+") or self.ts.at("-"):
            op = self.ts.next().text
            out = Bin(op, out, self.rterm(reads))
        return out

    def rterm(self, reads: list[Access]) -> Op:
        out = self.runary(reads)
        while self.ts.at("*") or self.ts.at("/"):
            op = self.ts.next().text
            out = Bin(op, out, self.runary(reads))
        return out

    def runary(self, reads: list[Access]) -> Op:
        if self.ts.accept("-"):
            if self.ts.peek().kind == "NUM":
                n = self.number()
                return Num(-n.value)
            return Neg(self.runary(reads))
        return self.ratom(reads)

    def number(self) -> Num:
        tok = self.ts.next()
        text = tok.text
        if any(ch in text for ch in ".eE"):
            return Num(float(text))
        return Num(int(text))

    def ratom(self, reads: list[Access]) -> Op:
        tok = self.ts.peek()
        if tok.kind == "NUM":
            return self.number()
        if self.ts.accept("("):
            inner = self.rhs(reads)
            self.ts.expect(")")
            return inner
        if tok.kind != "NAME":
            raise self.ts.error(f"unexpected {tok.text or 'end of input'!r} in expression")
        if self.ts.at("(", 1):
            if tok.text not in FLOAT_FUNCS:
                raise DSLSyntaxError(f"unknown function {tok.text!r}", tok.line, tok.col)
            self.ts.next()
            self.ts.expect("(")
            args = [self.rhs(reads)]
            while self.ts.accept(","):
                args.append(self.rhs(reads))
            self.ts.expect(")")
            want = 2 if tok.text in ("max", "min") else 1
            if len(args) != want:
                raise DSLSyntaxError(f"{tok.text} takes {want} argument(s)", tok.line, tok.col)
            return Call(tok.text, tuple(args))
        if self.lookup(tok.text) is not None:
            reads.append(self.access("read", reads))
            return Ref(len(reads) - 1)
        if tok.text in self.scope:
            self.ts.next()
            return Val(sym(tok.text))
        raise UnboundSymbol(f"unbound name {tok.text!r} at line {tok.line}, col {tok.col}")


def parse(text: str, check: bool = True) -> Program:
    """Parse DSL text.  Raises DSLSyntaxError, UnboundSymbol or DuplicateContainer."""
    prog = _Parser(text).program()
    if check:
        diags = validate(prog)
        if diags:
            raise DSLSyntaxError("; ".join(diags), 0, 0)
    return prog


# ---------------------------------------------------------------------------
# printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def print_op(op: Op, reads: tuple[Access, ...], prog: Program | None = None, prec: int = 0) -> str:
    if isinstance(op, Num):
        s = repr(op.value) if isinstance(op.value, float) else str(op.value)
        return f"({s})" if op.value < 0 else s
    if isinstance(op, Ref):
        return _print_access(reads[op.index], prog)
    if isinstance(op, Val):
        s = str(op.expr)
        return s if s.isidentifier() else f"({s})"
    if isinstance(op, Neg):
        return f"-{print_op(op.arg, reads, prog, 3)}"
    if isinstance(op, Call):
        return f"{op.name}({', '.join(print_op(a, reads, prog) for a in op.args)})"
    if isinstance(op, Bin):
        p = _PREC[op.op]
        left = print_op(op.left, reads, prog, p)
        right = print_op(op.right, reads, prog, p + 1)
        s = f"{left} {op.op} {right}"
        return f"({s})" if p < prec else s
    raise TypeError(op)


def _print_access(a: Access, prog: Program | None) -> str:
    if a.index == ():
        return a.container
    if a.index is None:
        return f"{a.container}[@{a.offset}]"
    return f"{a.container}[{', '.join(str(i) for i in a.index)}]"


def _print_container(c: Container, keyword: str = "array") -> str:
    if c.scalar:
        s = f"scalar {c.name}[{c.dtype}]"
    else:
        dims = ", ".join(str(d) for d in c.dims)
        s = f"{keyword} {c.name}[{c.dtype}]({dims}"
        if c.strides != row_major_strides(c.dims):
            s += "; " + ", ".join(str(x) for x in c.strides)
        s += ")"
    if c.transient:
        s += " transient"
    if c.internal:
        s += " internal"
    return s


def print_program(prog: Program) -> str:
    lines: list[str] = []
    for p in prog.params:
        lines.append(f"param {p.name}: int" + (f" >= {p.lower}" if p.lower is not None else ""))
    for c in prog.containers:
        lines.append(_print_container(c))
    counters = {"loop": 0, "stmt": 0}

    def emit(body, depth):
        pad = "  " * depth
        for n in body:
            if isinstance(n, Loop):
                auto = f"L{counters['loop']}"
                counters["loop"] += 1
                label = "" if n.id == auto else f"{n.id}: "
                sched = "" if n.schedule == "sequential" else f"{n.schedule} "
                lines.append(f"{pad}{label}{sched}for {n.var} = {n.start} : {n.end} : {n.stride} {{")
                for c in n.locals:
                    lines.append(f"{pad}  {_print_container(c)}")
                emit(n.body, depth + 1)
                lines.append(f"{pad}}}")
            elif isinstance(n, Statement):
                auto = f"s{counters['stmt']}"
                counters["stmt"] += 1
                label = "" if n.id == auto else f"{n.id}: "
                lines.append(f"{pad}{label}{_print_access(n.write, prog)} = {print_op(n.op, n.reads, prog)}")
            elif isinstance(n, Wait):
                vec = ", ".join(str(v) for v in n.vector)
                lines.append(f"{pad}wait[{', '.join(n.channel)}]({vec})")
            elif isinstance(n, Release):
                lines.append(f"{pad}release[{', '.join(n.channel)}]")

    emit(prog.body, 0)
    return "\n".join(lines) + "\n"
