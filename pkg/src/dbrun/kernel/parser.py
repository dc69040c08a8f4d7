"""Tokenizer and recursive-descent parser for kernel signatures and bodies.

Body grammar::

    body    := NAME '=' expr [';']
    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | primary
    primary := NUMBER | NAME | FUNC '(' expr (',' expr)* ')' | '(' expr ')'
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

CONCRETE_TYPES = {"float32": "float32", "float64": "float64"}
FUNCTIONS = {"abs": 1, "exp": 1, "log": 1, "tanh": 1, "min": 2, "max": 2}


class KernelSyntaxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class KernelCompileError(ValueError):
    pass


@dataclass(frozen=True)
class ParamDecl:
    type_spec: str
    name: str

    @property
    def is_generic(self) -> bool:
        return self.type_spec not in CONCRETE_TYPES


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Name:
    id: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


@dataclass(frozen=True)
class Assign:
    target: str
    value: "Expr"


Expr = Union[Num, Name, Neg, BinOp, Call]

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/=(),;])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    offset: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise KernelSyntaxError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup != "ws":
            tokens.append(Token(m.lastgroup, m.group(), pos))
        pos = m.end()
    tokens.append(Token("eof", "", len(text)))
    return tokens


def parse_signature(text: str) -> list[ParamDecl]:
    """Parse ``"float32 x, T y"`` into parameter declarations."""
    tokens = tokenize(text)
    decls: list[ParamDecl] = []
    if tokens[0].kind == "eof":
        return decls
    i = 0
    seen = set()
    while True:
        type_tok, name_tok = tokens[i], tokens[i + 1] if i + 1 < len(tokens) else tokens[-1]
        if type_tok.kind != "name":
            raise KernelSyntaxError("expected a type specifier", type_tok.offset)
        spec = type_tok.text
        if spec not in CONCRETE_TYPES and not re.fullmatch(r"[A-Z]", spec):
            raise KernelSyntaxError(f"unknown type specifier {spec!r}", type_tok.offset)
        if name_tok.kind != "name":
            raise KernelSyntaxError("expected a parameter name", name_tok.offset)
        if name_tok.text in seen:
            raise KernelSyntaxError(f"duplicate parameter name {name_tok.text!r}", name_tok.offset)
        seen.add(name_tok.text)
        decls.append(ParamDecl(spec, name_tok.text))
        sep = tokens[i + 2]
        if sep.kind == "eof":
            return decls
        if sep.text != ",":
            raise KernelSyntaxError("expected ',' between parameters", sep.offset)
        i += 3


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.pos = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, text: str) -> Token:
        if self.tok.text != text or self.tok.kind == "eof":
            found = self.tok.text or "end of input"
            raise KernelSyntaxError(f"expected {text!r}, found {found!r}", self.tok.offset)
        return self.advance()

    def body(self) -> Assign:
        target = self.tok
        if target.kind != "name":
            raise KernelSyntaxError("expected an assignment target", target.offset)
        self.advance()
        self.expect("=")
        value = self.expr()
        if self.tok.text == ";":
            self.advance()
        if self.tok.kind != "eof":
            if self.tok.text == "=" or self._looks_like_assignment():
                raise KernelSyntaxError("only one assignment is allowed", self.tok.offset)
            raise KernelSyntaxError(f"unexpected {self.tok.text!r}", self.tok.offset)
        return Assign(target.text, value)

    def _looks_like_assignment(self) -> bool:
        nxt = self.tokens[self.pos + 1] if self.pos + 1 < len(self.tokens) else None
        return self.tok.kind == "name" and nxt is not None and nxt.text == "="

    def expr(self) -> Expr:
        node = self.term()
        while self.tok.text in ("+", "-") and self.tok.kind == "op":
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.tok.text in ("*", "/") and self.tok.kind == "op":
            op = self.advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.tok.text == "-" and self.tok.kind == "op":
            self.advance()
            return Neg(self.unary())
        return self.primary()

    def primary(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Num(float(tok.text))
        if tok.kind == "name":
            self.advance()
            if self.tok.text != "(":
                return Name(tok.text)
            arity = FUNCTIONS.get(tok.text)
            if arity is None:
                raise KernelSyntaxError(f"unknown function {tok.text!r}", tok.offset)
            self.advance()
            args = [self.expr()]
            while self.tok.text == ",":
                self.advance()
                args.append(self.expr())
            self.expect(")")
            if len(args) != arity:
                raise KernelSyntaxError(f"{tok.text}() takes {arity} argument(s), got {len(args)}", tok.offset)
            return Call(tok.text, tuple(args))
        if tok.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        found = tok.text or "end of input"
        raise KernelSyntaxError(f"unexpected {found!r}", tok.offset)


def parse_expr(text: str) -> Assign:
    """Parse a kernel body such as ``"w = x * y + z"``."""
    return _Parser(text).body()


def to_source(node) -> str:
    """Render an AST back to body text that parses to an equal tree."""
    if isinstance(node, Assign):
        return f"{node.target} = {to_source(node.value)}"
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Name):
        return node.id
    if isinstance(node, Neg):
        inner = to_source(node.operand)
        return f"-{inner}"
    if isinstance(node, BinOp):
        return f"({to_source(node.left)} {node.op} {to_source(node.right)})"
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_source(a) for a in node.args)})"
    raise TypeError(f"not a kernel AST node: {node!r}")


def names(node) -> set[str]:
    if isinstance(node, Name):
        return {node.id}
    if isinstance(node, Neg):
        return names(node.operand)
    if isinstance(node, BinOp):
        return names(node.left) | names(node.right)
    if isinstance(node, Call):
        out: set[str] = set()
        for a in node.args:
            out |= names(a)
        return out
    if isinstance(node, Assign):
        return names(node.value)
    return set()
