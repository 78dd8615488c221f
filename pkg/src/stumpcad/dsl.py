"""Textual language for CSG expressions.

Grammar (whitespace-insensitive, ``#`` starts a line comment)::

    expr := prim | op
    op   := ("union" | "intersection" | "difference") "(" expr ("," expr)+ ")"
          | "complement" "(" expr ")"
          | ("translate" | "rotate") "(" num "," num "," num "," expr ")"
    prim := "box(" num "," num "," num ")"
          | "sphere(r=" num ")" | "cylinder(r=" num ")" | "cone(angle=" num ")"

``rotate`` takes XYZ Euler angles in degrees (x applied first, then y, then
z, about fixed axes, matching OpenSCAD). Transform wrappers do not
survive parsing: they are folded into the poses of the primitives beneath
them, so the AST is operations over posed leaves only. ``union``,
``intersection`` and ``difference`` accept two or more children and fold
left into binary nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import csg, geometry
from .geometry import Kind, Pose, Primitive


class CsgParseError(Exception):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col


@dataclass
class _Token:
    kind: str  # 'name' | 'num' | 'punct' | 'eof'
    text: str
    line: int
    col: int


def _tokenize(source: str) -> list[_Token]:
    tokens = []
    line, col = 1, 1
    i, n = 0, len(source)
    while i < n:
        ch = source[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and source[i] != "\n":
                i += 1
            continue
        if ch.isalpha() or ch == "_":
            start = i
            while i < n and (source[i].isalnum() or source[i] == "_"):
                i += 1
            text = source[start:i]
            tokens.append(_Token("name", text, line, col))
            col += i - start
            continue
        if ch.isdigit() or ch in "+-." and _num_ahead(source, i):
            start = i
            i += 1
            while i < n and (source[i].isdigit() or source[i] in ".eE" or
                             (source[i] in "+-" and source[i - 1] in "eE")):
                i += 1
            text = source[start:i]
            try:
                float(text)
            except ValueError:
                raise CsgParseError(f"bad number {text!r}", line, col) from None
            tokens.append(_Token("num", text, line, col))
            col += i - start
            continue
        if ch in "(),=":
            tokens.append(_Token("punct", ch, line, col))
            i += 1
            col += 1
            continue
        raise CsgParseError(f"unexpected character {ch!r}", line, col)
    tokens.append(_Token("eof", "", line, col))
    return tokens


def _num_ahead(source: str, i: int) -> bool:
    j = i + 1 if source[i] in "+-" else i
    return j < len(source) and (source[j].isdigit() or
                                (source[j] == "." and j + 1 < len(source) and source[j + 1].isdigit()))


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0
        self.prims: list[Primitive] = []

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def take(self, kind: str, text: str | None = None) -> _Token:
        tok = self.tokens[self.pos]
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text if text is not None else kind
            raise CsgParseError(f"expected {want!r}, found {tok.text or 'end of input'!r}",
                                tok.line, tok.col)
        self.pos += 1
        return tok

    def number(self) -> float:
        return float(self.take("num").text)

    def expr(self) -> csg.CsgExpr:
        tok = self.peek()
        if tok.kind != "name":
            raise CsgParseError(f"expected an expression, found {tok.text or 'end of input'!r}",
                                tok.line, tok.col)
        name = tok.text
        if name in ("union", "intersection", "difference"):
            return self.nary(name)
        if name == "complement":
            self.take("name")
            self.take("punct", "(")
            child = self.expr()
            self.take("punct", ")")
            return csg.Complement(child)
        if name in ("translate", "rotate"):
            return self.transform(name)
        if name in ("box", "sphere", "cylinder", "cone"):
            return self.primitive(name)
        raise CsgParseError(f"unknown construct {name!r}", tok.line, tok.col)

    def nary(self, name: str) -> csg.CsgExpr:
        tok = self.take("name")
        self.take("punct", "(")
        children = [self.expr()]
        while self.peek().text == ",":
            self.take("punct", ",")
            children.append(self.expr())
        self.take("punct", ")")
        if len(children) < 2:
            raise CsgParseError(f"{name} needs at least 2 children, got {len(children)}",
                                tok.line, tok.col)
        node = {"union": csg.Union, "intersection": csg.Intersection,
                "difference": csg.Difference}[name]
        out = children[0]
        for child in children[1:]:
            out = node(out, child)
        return out

    def transform(self, name: str) -> csg.CsgExpr:
        self.take("name")
        self.take("punct", "(")
        nums = []
        for _ in range(3):
            nums.append(self.number())
            self.take("punct", ",")
        child = self.expr()
        self.take("punct", ")")
        if name == "translate":
            r, t = np.array([1.0, 0, 0, 0]), np.array(nums)
        else:
            r, t = geometry.quat_from_euler_xyz_deg(*nums), np.zeros(3)
        for node in csg.walk(child):
            if isinstance(node, csg.Leaf):
                prim = self.prims[node.index]
                self.prims[node.index] = Primitive(prim.kind, prim.q,
                                                   geometry.compose(r, t, prim.pose))
        return child

    def primitive(self, name: str) -> csg.CsgExpr:
        tok = self.take("name")
        self.take("punct", "(")
        if name == "box":
            q = [self.number()]
            for _ in range(2):
                self.take("punct", ",")
                q.append(self.number())
            kind = Kind.BOX
        else:
            key = "r" if name in ("sphere", "cylinder") else "angle"
            ktok = self.take("name")
            if ktok.text != key:
                raise CsgParseError(f"{name} takes {key}=<num>, found {ktok.text!r}",
                                    ktok.line, ktok.col)
            self.take("punct", "=")
            q = [self.number()]
            kind = Kind[name.upper()]
        self.take("punct", ")")
        try:
            prim = Primitive(kind, np.array(q), Pose())
        except ValueError as exc:
            raise CsgParseError(str(exc), tok.line, tok.col) from None
        self.prims.append(prim)
        return csg.Leaf(len(self.prims) - 1)


def parse_csg(source: str) -> tuple[csg.CsgExpr, list[Primitive]]:
    """Parse a CSG program into an expression over a primitive table.

    Primitives land in the table in source order. Raises
    :class:`CsgParseError` with line/column on lexical, syntax, arity and
    parameter-sign errors.
    """
    parser = _Parser(_tokenize(source))
    expr = parser.expr()
    tok = parser.peek()
    if tok.kind != "eof":
        raise CsgParseError(f"trailing input {tok.text!r}", tok.line, tok.col)
    return expr, parser.prims


def _fmt(v: float) -> str:
    s = format(float(v), ".10g")
    return "0" if s in ("-0", "-0.0") else s


def format_csg(expr: csg.CsgExpr, prims: list[Primitive]) -> str:
    """Canonical text for an expression; inverse of :func:`parse_csg`.

    Leaf poses print as ``translate(..., rotate(..., prim))`` wrappers.
    Binary chains of the same operation print in variadic form.
    """

    def prim_text(p: Primitive) -> str:
        if p.kind is Kind.BOX:
            body = f"box({_fmt(p.q[0])}, {_fmt(p.q[1])}, {_fmt(p.q[2])})"
        elif p.kind is Kind.SPHERE:
            body = f"sphere(r={_fmt(p.q[0])})"
        elif p.kind is Kind.CYLINDER:
            body = f"cylinder(r={_fmt(p.q[0])})"
        else:
            body = f"cone(angle={_fmt(p.q[0])})"
        if not np.allclose(p.pose.r, [1, 0, 0, 0], atol=0, rtol=0):
            ax, ay, az = geometry.euler_xyz_deg_from_quat(p.pose.r)
            body = f"rotate({_fmt(ax)}, {_fmt(ay)}, {_fmt(az)}, {body})"
        if np.any(p.pose.t != 0):
            t = p.pose.t
            body = f"translate({_fmt(t[0])}, {_fmt(t[1])}, {_fmt(t[2])}, {body})"
        return body

    def flatten(node, op_type):
        if isinstance(node, op_type):
            return flatten(node.left, op_type) + flatten(node.right, op_type)
        return [node]

    def rec(node: csg.CsgExpr) -> str:
        if isinstance(node, csg.Leaf):
            return prim_text(prims[node.index])
        if isinstance(node, (csg.Union, csg.Intersection)):
            name = "union" if isinstance(node, csg.Union) else "intersection"
            parts = [rec(c) for c in flatten(node, type(node))]
            return f"{name}({', '.join(parts)})"
        if isinstance(node, csg.Difference):
            # left-fold sugar: difference(a, b, c) == difference(difference(a, b), c)
            parts = []
            cur = node
            while isinstance(cur, csg.Difference):
                parts.append(rec(cur.right))
                cur = cur.left
            parts.append(rec(cur))
            return f"difference({', '.join(reversed(parts))})"
        if isinstance(node, csg.Complement):
            return f"complement({rec(node.child)})"
        raise TypeError(f"cannot format {node!r} (no DSL syntax)")

    return rec(expr)
