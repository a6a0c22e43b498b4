"""Equation trees over measure terms.

One small expression language is shared by three consumers: template
matching of equations across books (after renaming point labels), rule
canonicalization, and numeric evaluation inside the solver. Grammar:

    equation := expr '=' expr
    expr     := term (('+'|'-') term)*
    term     := factor (('*'|'/') factor)*
    factor   := atom ('^' atom)?
    atom     := number | name | name '(' args ')' | '(' expr ')' | '-' atom

Unicode operators (×, ·, −, ÷, ², ³) are normalized during tokenization.
Names that are short uppercase letter runs are treated as point-label
symbols and participate in template renaming.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

_LABEL_RE = re.compile(r"[A-Z]{1,4}$")
_NUM_RE = re.compile(r"\d+(?:\.\d+)?")
_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")

_UNICODE_OPS = {
    "×": "*",
    "·": "*",
    "⋅": "*",
    "−": "-",
    "–": "-",
    "÷": "/",
    "²": "^2",
    "³": "^3",
    "°": "",
    "⁢": "",
}


class EquationError(ValueError):
    """Raised for unparseable equation text."""


@dataclass(frozen=True)
class Num:
    value: float

    def __str__(self) -> str:
        if self.value == int(self.value):
            return str(int(self.value))
        return repr(self.value)


@dataclass(frozen=True)
class Sym:
    """A measure-term atom: a bare label or a function application."""

    name: str
    args: tuple["Node", ...] = ()

    def __str__(self) -> str:
        if not self.args:
            return self.name
        return f"{self.name}({', '.join(str(a) for a in self.args)})"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Node"
    right: "Node"

    def __str__(self) -> str:
        return f"({self.left} {self.op} {self.right})"


@dataclass(frozen=True)
class Equation:
    left: "Node"
    right: "Node"

    def __str__(self) -> str:
        return f"{self.left} = {self.right}"


Node = Num | Sym | BinOp


def _lex(text: str) -> list[str]:
    for u, a in _UNICODE_OPS.items():
        text = text.replace(u, a)
    tokens: list[str] = []
    i = 0
    while i < len(text):
        c = text[i]
        if c.isspace():
            i += 1
            continue
        m = _NUM_RE.match(text, i)
        if m:
            tokens.append(m.group())
            i = m.end()
            continue
        m = _NAME_RE.match(text, i)
        if m:
            tokens.append(m.group())
            i = m.end()
            continue
        if c in "+-*/^=(),":
            tokens.append(c)
            i += 1
            continue
        raise EquationError(f"unexpected character {c!r} in equation {text!r}")
    return tokens


class _Parser:
    def __init__(self, tokens: list[str]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> str | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, expect: str | None = None) -> str:
        tok = self.peek()
        if tok is None:
            raise EquationError("unexpected end of equation")
        if expect is not None and tok != expect:
            raise EquationError(f"expected {expect!r}, got {tok!r}")
        self.pos += 1
        return tok

    def equation(self) -> Equation:
        left = self.expr()
        self.take("=")
        right = self.expr()
        if self.peek() is not None:
            raise EquationError(f"trailing tokens after equation: {self.tokens[self.pos:]}")
        return Equation(left, right)

    def expr(self) -> Node:
        node = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while True:
            nxt = self.peek()
            if nxt in ("*", "/"):
                op = self.take()
                node = BinOp(op, node, self.factor())
            elif nxt is not None and (nxt[0].isdigit() or _NAME_RE.match(nxt)) and not isinstance(node, BinOp):
                # implicit multiplication such as "2 AB" or "0.5 x"
                node = BinOp("*", node, self.factor())
            else:
                return node

    def factor(self) -> Node:
        node = self.atom()
        if self.peek() == "^":
            self.take()
            node = BinOp("^", node, self.atom())
        return node

    def atom(self) -> Node:
        tok = self.peek()
        if tok is None:
            raise EquationError("unexpected end of equation")
        if tok == "-":
            self.take()
            inner = self.atom()
            if isinstance(inner, Num):
                return Num(-inner.value)
            return BinOp("*", Num(-1.0), inner)
        if tok == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        if _NUM_RE.fullmatch(tok):
            self.take()
            return Num(float(tok))
        if _NAME_RE.fullmatch(tok):
            self.take()
            if self.peek() == "(":
                self.take("(")
                args: list[Node] = []
                if self.peek() != ")":
                    args.append(self.expr())
                    while self.peek() == ",":
                        self.take(",")
                        args.append(self.expr())
                self.take(")")
                return Sym(tok, tuple(args))
            return Sym(tok)
        raise EquationError(f"unexpected token {tok!r}")


def parse_equation(text: str) -> Equation:
    return _Parser(_lex(text)).equation()


def is_point_label(name: str) -> bool:
    return bool(_LABEL_RE.fullmatch(name))


def _walk(node: Node):
    yield node
    if isinstance(node, BinOp):
        yield from _walk(node.left)
        yield from _walk(node.right)
    elif isinstance(node, Sym):
        for a in node.args:
            yield from _walk(a)


def iter_symbols(eq: Equation | Node):
    """All Sym nodes, including those nested inside function arguments."""
    nodes = [eq.left, eq.right] if isinstance(eq, Equation) else [eq]
    for root in nodes:
        for n in _walk(root):
            if isinstance(n, Sym):
                yield n


def iter_atoms(eq: Equation | Node):
    """Maximal measure terms: Sym nodes not nested inside another Sym."""
    stack = [eq.left, eq.right] if isinstance(eq, Equation) else [eq]
    while stack:
        node = stack.pop()
        if isinstance(node, Sym):
            yield node
        elif isinstance(node, BinOp):
            stack.append(node.left)
            stack.append(node.right)


def rename_labels(eq: Equation, mapping: dict[str, str]) -> Equation:
    """Substitute point-label symbol names; other names are untouched."""

    def rn(node: Node) -> Node:
        if isinstance(node, Num):
            return node
        if isinstance(node, Sym):
            name = mapping.get(node.name, node.name) if is_point_label(node.name) else node.name
            return Sym(name, tuple(rn(a) for a in node.args))
        return BinOp(node.op, rn(node.left), rn(node.right))

    return Equation(rn(eq.left), rn(eq.right))


def canonical_template(eq: Equation, label_map: dict[str, str] | None = None) -> str:
    """Serialize with point labels renamed in first-occurrence order.

    Passing a shared ``label_map`` lets a caller canonicalize several
    equations (or a whole rule) under one consistent renaming.
    """
    mapping: dict[str, str] = {} if label_map is None else label_map

    def visit(node: Node) -> str:
        if isinstance(node, Num):
            return str(node)
        if isinstance(node, Sym):
            name = node.name
            if is_point_label(name):
                if name not in mapping:
                    mapping[name] = f"L{len(mapping) + 1}"
                name = mapping[name]
            if not node.args:
                return name
            return f"{name}({','.join(visit(a) for a in node.args)})"
        return f"({visit(node.left)}{node.op}{visit(node.right)})"

    return f"{visit(eq.left)}={visit(eq.right)}"


def template_match(text1: str, text2: str) -> bool:
    """True iff two equation strings share a template up to label renaming.

    Unparseable input never raises; it simply cannot match anything.
    """
    try:
        e1 = parse_equation(text1)
        e2 = parse_equation(text2)
    except EquationError:
        return False
    return canonical_template(e1) == canonical_template(e2)


# ---------------------------------------------------------------------------
# numeric evaluation


class Inconsistent(Exception):
    """A fully bound equation that fails its tolerance check."""


class NotApplicable(Exception):
    """The equation cannot be used (too many unknowns, unsupported form)."""


def atom_key(node: Sym) -> str:
    """Canonical binding key for a measure atom."""
    return str(node)


def unknown_atoms(eq: Equation, bindings: dict[str, float]) -> list[str]:
    seen: list[str] = []
    for sym in iter_atoms(eq):
        key = atom_key(sym)
        if key not in bindings and key not in seen:
            seen.append(key)
    return seen


def _eval(node: Node, bindings: dict[str, float]) -> float:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Sym):
        key = atom_key(node)
        if key not in bindings:
            raise NotApplicable(f"unbound atom {key}")
        return bindings[key]
    a = _eval(node.left, bindings)
    b = _eval(node.right, bindings)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if node.op == "/":
        if b == 0:
            raise Inconsistent("division by zero")
        return a / b
    if node.op == "^":
        return a**b
    raise NotApplicable(f"unsupported operator {node.op}")


def _contains(node: Node, key: str) -> bool:
    if isinstance(node, Num):
        return False
    if isinstance(node, Sym):
        if atom_key(node) == key:
            return True
        return False
    return _contains(node.left, key) or _contains(node.right, key)


def _isolate(node: Node, target: float, key: str, bindings: dict[str, float]) -> float:
    """Solve node == target for the single occurrence of ``key``."""
    if isinstance(node, Sym) and atom_key(node) == key:
        return target
    if not isinstance(node, BinOp):
        raise NotApplicable("unknown does not occur where expected")
    in_left = _contains(node.left, key)
    in_right = _contains(node.right, key)
    if in_left and in_right:
        raise NotApplicable("unknown occurs on both sides of an operator")
    if node.op == "+":
        if in_left:
            return _isolate(node.left, target - _eval(node.right, bindings), key, bindings)
        return _isolate(node.right, target - _eval(node.left, bindings), key, bindings)
    if node.op == "-":
        if in_left:
            return _isolate(node.left, target + _eval(node.right, bindings), key, bindings)
        return _isolate(node.right, _eval(node.left, bindings) - target, key, bindings)
    if node.op == "*":
        if in_left:
            other = _eval(node.right, bindings)
        else:
            other = _eval(node.left, bindings)
        if other == 0:
            raise NotApplicable("cannot divide by zero coefficient")
        inner = node.left if in_left else node.right
        return _isolate(inner, target / other, key, bindings)
    if node.op == "/":
        if in_left:
            return _isolate(node.left, target * _eval(node.right, bindings), key, bindings)
        num = _eval(node.left, bindings)
        if target == 0:
            raise NotApplicable("cannot solve denominator for zero target")
        return _isolate(node.right, num / target, key, bindings)
    if node.op == "^":
        if in_right:
            raise NotApplicable("unknown exponents unsupported")
        exponent = _eval(node.right, bindings)
        if exponent == 2:
            if target < 0:
                raise Inconsistent("negative value under square root")
            return _isolate(node.left, math.sqrt(target), key, bindings)
        if exponent == 1:
            return _isolate(node.left, target, key, bindings)
        if exponent == 3:
            return _isolate(node.left, math.copysign(abs(target) ** (1 / 3), target), key, bindings)
        raise NotApplicable(f"unsupported exponent {exponent}")
    raise NotApplicable(f"unsupported operator {node.op}")


def solve_equation(
    eq: Equation, bindings: dict[str, float], rel_tol: float = 1e-6
) -> tuple[str, float] | None:
    """Evaluate an equation against measure bindings.

    Returns ``(atom, value)`` when exactly one atom was unbound and could be
    isolated; ``None`` when the equation is fully bound and consistent.
    Raises Inconsistent for a fully bound equation outside tolerance and
    NotApplicable when the equation cannot be used.
    """
    unknowns = unknown_atoms(eq, bindings)
    if len(unknowns) > 1:
        raise NotApplicable(f"{len(unknowns)} unbound atoms")
    if not unknowns:
        lhs = _eval(eq.left, bindings)
        rhs = _eval(eq.right, bindings)
        scale = max(abs(lhs), abs(rhs), 1.0)
        if abs(lhs - rhs) > rel_tol * scale:
            raise Inconsistent(f"{lhs} != {rhs}")
        return None
    key = unknowns[0]
    occurrences = sum(1 for s in iter_atoms(eq) if atom_key(s) == key)
    if occurrences > 1:
        raise NotApplicable("unknown occurs more than once")
    if _contains(eq.left, key):
        return key, _isolate(eq.left, _eval(eq.right, bindings), key, bindings)
    return key, _isolate(eq.right, _eval(eq.left, bindings), key, bindings)
