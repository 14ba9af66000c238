"""Tokenizer and token stream shared by the expression and DSL parsers."""

from __future__ import annotations

import re
from dataclasses import dataclass

__all__ = ["DSLSyntaxError", "Token", "TokenStream", "tokenize"]


class DSLSyntaxError(SyntaxError):
    """Syntax error carrying a 1-based line and column."""

    def __init__(self, msg: str, line: int = 0, col: int = 0):
        super().__init__(f"{msg} (line {line}, col {col})")
        self.msg = msg
        self.line = line
        self.col = col
        self.lineno = line
        self.offset = col


@dataclass(frozen=True)
class Token:
    kind: str  # NUM, NAME, OP, EOF
    text: str
    line: int
    col: int


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\*\*|>=|<=|==|[-+*/(),;:\[\]{}=<>@])
    """,
    re.VERBOSE,
)


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    line = 1
    line_start = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            raise DSLSyntaxError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        chunk = m.group()
        if kind == "num":
            tokens.append(Token("NUM", chunk, line, col))
        elif kind == "name":
            tokens.append(Token("NAME", chunk, line, col))
        elif kind == "op":
            tokens.append(Token("OP", chunk, line, col))
        nl = chunk.count("\n")
        if nl:
            line += nl
            line_start = pos + chunk.rindex("\n") + 1
        pos = m.end()
    col = pos - line_start + 1
    tokens.append(Token("EOF", "", line, col))
    return tokens


class TokenStream:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    @classmethod
    def from_text(cls, text: str) -> "TokenStream":
        return cls(tokenize(text))

    def peek(self, offset: int = 0) -> Token:
        idx = min(self.pos + offset, len(self.tokens) - 1)
        return self.tokens[idx]

    def next(self) -> Token:
        tok = self.peek()
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def at(self, text: str, offset: int = 0) -> bool:
        tok = self.peek(offset)
        return tok.kind in ("OP", "NAME") and tok.text == text

    def accept(self, text: str) -> bool:
        if self.at(text):
            self.pos += 1
            return True
        return False

    def expect(self, text: str) -> Token:
        tok = self.peek()
        if not self.at(text):
            got = tok.text or "end of input"
            raise DSLSyntaxError(f"expected {text!r}, got {got!r}", tok.line, tok.col)
        return self.next()

    def expect_name(self) -> Token:
        tok = self.peek()
        if tok.kind != "NAME":
            got = tok.text or "end of input"
            raise DSLSyntaxError(f"expected identifier, got {got!r}", tok.line, tok.col)
        return self.next()

    def error(self, msg: str, tok: Token | None = None) -> DSLSyntaxError:
        tok = tok or self.peek()
        return DSLSyntaxError(msg, tok.line, tok.col)
