"""Text syntax for expressions and operators.

Expressions:  `+ - * / ^`, integer literals, declared variable names,
`exp(...)`, `ln(...)`, antiderivative nodes `int(f, x)`, and function
applications `F(x)`, `F''(x)`, `phi(x, x*y - z)`, `phi_{1,0}(x, y)`.
Identifiers starting with an underscore are free constants.

Operators: sums of normal-ordered terms, coefficients written to the left
of derivation monomials, e.g. `Dx*Dy + x*Dx*Dz - Dz`, `2/(x+y)^2*Dx`.
Powers of derivations: `Dx^2`.  parse/print round-trips are the identity
on normalized forms.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import sympy as sp
from sympy import S
from sympy.printing.str import StrPrinter

from .expr import Context, function_symbol
from .operators import LinearOperator

__all__ = [
    "ParseError",
    "parse_expression",
    "parse_operator",
    "print_expression",
    "print_operator",
]


class ParseError(ValueError):
    """Syntax error, carrying the offending position."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at position {pos})")
        self.pos = pos


@dataclass
class Token:
    kind: str  # "int" | "name" | "op" | "end"
    text: str
    pos: int
    orders: tuple[int, ...] | None = None  # derivative annotation on names
    primes: int = 0


_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_INT_RE = re.compile(r"\d+")
_WS_RE = re.compile(r"\s*")


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    i = 0
    n = len(text)
    while True:
        i = _WS_RE.match(text, i).end()
        if i >= n:
            tokens.append(Token("end", "", i))
            return tokens
        ch = text[i]
        m = _INT_RE.match(text, i)
        if m:
            tokens.append(Token("int", m.group(), i))
            i = m.end()
            continue
        m = _NAME_RE.match(text, i)
        if m:
            name = m.group()
            j = m.end()
            orders = None
            if name.endswith("_") and j < n and text[j] == "{":
                name = name[:-1]
                j += 1
                nums = []
                while True:
                    mm = _INT_RE.match(text, j)
                    if not mm:
                        raise ParseError("expected integer in derivative annotation", j)
                    nums.append(int(mm.group()))
                    j = mm.end()
                    if j < n and text[j] == ",":
                        j += 1
                        continue
                    if j < n and text[j] == "}":
                        j += 1
                        break
                    raise ParseError("expected ',' or '}' in derivative annotation", j)
                orders = tuple(nums)
            primes = 0
            while j < n and text[j] == "'":
                primes += 1
                j += 1
            tokens.append(Token("name", name, i, orders, primes))
            i = j
            continue
        if ch in "+-*/^(),":
            tokens.append(Token("op", ch, i))
            i += 1
            continue
        raise ParseError(f"unexpected character {ch!r}", i)


class _Parser:
    """Precedence-climbing parser; also used factor-wise by the operator grammar."""

    def __init__(self, tokens: list[Token], ctx: Context):
        self.tokens = tokens
        self.ctx = ctx
        self.i = 0

    def peek(self) -> Token:
        return self.tokens[self.i]

    def pop(self) -> Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect_op(self, text: str) -> Token:
        t = self.pop()
        if t.kind != "op" or t.text != text:
            raise ParseError(f"expected {text!r}, got {t.text!r}", t.pos)
        return t

    # -- expressions ---------------------------------------------------
    def parse_expression(self, min_prec: int = 0) -> sp.Expr:
        left = self._prefix()
        while True:
            t = self.peek()
            if t.kind != "op":
                break
            prec = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 30}.get(t.text)
            if prec is None or prec < min_prec:
                break
            self.pop()
            if t.text == "^":
                right = self.parse_expression(30)  # right associative
                if not right.is_Integer:
                    raise ParseError("exponent must be an integer literal", t.pos)
                left = left**right
            else:
                right = self.parse_expression(prec + 1)
                if t.text == "+":
                    left = left + right
                elif t.text == "-":
                    left = left - right
                elif t.text == "*":
                    left = left * right
                else:
                    left = left / right
        return left

    def _prefix(self) -> sp.Expr:
        t = self.pop()
        if t.kind == "int":
            return sp.Integer(int(t.text))
        if t.kind == "op" and t.text == "(":
            inner = self.parse_expression(0)
            self.expect_op(")")
            return inner
        if t.kind == "op" and t.text == "-":
            return -self.parse_expression(25)
        if t.kind == "op" and t.text == "+":
            return self.parse_expression(25)
        if t.kind == "name":
            if self.peek().kind == "op" and self.peek().text == "(":
                return self._application(t)
            return self._name_atom(t)
        raise ParseError(f"unexpected token {t.text!r}", t.pos)

    def _name_atom(self, t: Token) -> sp.Expr:
        if t.orders is not None or t.primes:
            raise ParseError("derivative annotation needs an application", t.pos)
        if t.text == "I":
            return sp.I
        if t.text == "pi":
            return sp.pi
        if t.text.startswith("_"):
            return sp.Symbol(t.text)
        try:
            return self.ctx.var(t.text)
        except KeyError:
            raise ParseError(f"unknown variable {t.text!r}", t.pos) from None

    def _application(self, t: Token) -> sp.Expr:
        self.expect_op("(")
        args = [self.parse_expression(0)]
        while self.peek().kind == "op" and self.peek().text == ",":
            self.pop()
            args.append(self.parse_expression(0))
        self.expect_op(")")
        name = t.text
        if name in ("exp", "ln", "int") and (t.orders is not None or t.primes):
            raise ParseError(f"{name} takes no derivative annotation", t.pos)
        if name == "exp":
            if len(args) != 1:
                raise ParseError("exp takes one argument", t.pos)
            return sp.exp(args[0])
        if name == "ln":
            if len(args) != 1:
                raise ParseError("ln takes one argument", t.pos)
            return sp.log(args[0])
        if name == "int":
            if len(args) != 2 or not args[1].is_Symbol:
                raise ParseError("int takes (integrand, variable)", t.pos)
            return sp.Integral(args[0], args[1])
        orders = t.orders
        if t.primes:
            if orders is not None:
                raise ParseError("cannot mix primes with an annotation", t.pos)
            if len(args) != 1:
                raise ParseError("primes require a one-argument function", t.pos)
            orders = (t.primes,)
        if orders is not None and len(orders) != len(args):
            raise ParseError("annotation length must match the argument count", t.pos)
        cls = function_symbol(name, len(args), orders)
        return cls(*args)

    # -- operators -----------------------------------------------------
    def parse_operator(self) -> LinearOperator:
        variables = self.ctx.variables
        n = len(variables)
        terms: dict[tuple[int, ...], sp.Expr] = {}

        def add_term(sign, coeff, index):
            key = tuple(index)
            terms[key] = terms.get(key, S.Zero) + sign * coeff

        sign = S.One
        t = self.peek()
        if t.kind == "op" and t.text in "+-":
            self.pop()
            sign = S.NegativeOne if t.text == "-" else S.One
        while True:
            coeff, index = self._operator_term()
            add_term(sign, coeff, index)
            t = self.peek()
            if t.kind == "op" and t.text in "+-":
                self.pop()
                sign = S.NegativeOne if t.text == "-" else S.One
                continue
            if t.kind == "end":
                break
            raise ParseError(f"unexpected token {t.text!r}", t.pos)
        return LinearOperator(variables, terms)

    def _d_atom(self, t: Token) -> int | None:
        """Index of the variable when the token is a derivation atom Dv."""
        if t.kind != "name" or t.orders is not None or t.primes:
            return None
        if not t.text.startswith("D") or len(t.text) < 2:
            return None
        name = t.text[1:]
        for pos, v in enumerate(self.ctx.variables):
            if v.name == name:
                # not an application like Dx(...)
                if self.peek().kind == "op" and self.peek().text == "(":
                    raise ParseError("derivation atoms are not applied with parentheses", t.pos)
                return pos
        raise ParseError(f"unknown variable {t.text!r}", t.pos)

    def _operator_term(self) -> tuple[sp.Expr, list[int]]:
        variables = self.ctx.variables
        coeff = S.One
        index = [0] * len(variables)
        seen_d = False
        while True:
            t = self.peek()
            if t.kind == "name" and t.text.startswith("D") and len(t.text) >= 2 and t.orders is None and not t.primes:
                tok = self.pop()
                pos = self._d_atom(tok)
                if pos is None:
                    raise ParseError(f"unknown variable {tok.text!r}", tok.pos)
                power = 1
                if self.peek().kind == "op" and self.peek().text == "^":
                    caret = self.pop()
                    p = self.parse_expression(30)
                    if not (p.is_Integer and p >= 0):
                        raise ParseError("derivation powers must be nonnegative integers", caret.pos)
                    power = int(p)
                index[pos] += power
                seen_d = True
            else:
                if seen_d:
                    raise ParseError(
                        "coefficients must be written to the left of derivations", t.pos
                    )
                coeff = coeff * self.parse_expression(21)
            t = self.peek()
            if t.kind == "op" and t.text == "*":
                self.pop()
                continue
            if t.kind == "op" and t.text == "/":
                if seen_d:
                    raise ParseError("division must appear among the coefficient factors", t.pos)
                self.pop()
                coeff = coeff / self.parse_expression(21)
                t = self.peek()
                if t.kind == "op" and t.text == "*":
                    self.pop()
                    continue
            break
        return coeff, index


def parse_expression(text: str, ctx: Context) -> sp.Expr:
    p = _Parser(tokenize(text), ctx)
    e = p.parse_expression(0)
    t = p.peek()
    if t.kind != "end":
        raise ParseError(f"unexpected trailing input {t.text!r}", t.pos)
    return e


def parse_operator(text: str, ctx: Context) -> LinearOperator:
    p = _Parser(tokenize(text), ctx)
    return p.parse_operator()


class _FieldPrinter(StrPrinter):
    """Round-trippable rendering: `^` powers, ln, int-nodes."""

    def _print_Pow(self, expr, rational=False):
        if not expr.exp.is_Integer:
            raise ValueError(f"non-integer exponent in {expr}; outside the coefficient field")
        from sympy.printing.precedence import precedence

        base = self.parenthesize(expr.base, precedence(expr))
        if expr.exp < 0:
            return f"{base}^({expr.exp})"
        return f"{base}^{expr.exp}"

    def _print_log(self, expr):
        return f"ln({self._print(expr.args[0])})"

    def _print_Integral(self, expr):
        if len(expr.limits) != 1 or len(expr.limits[0]) != 1:
            raise ValueError("only indefinite antiderivative nodes are printable")
        return f"int({self._print(expr.function)}, {self._print(expr.limits[0][0])})"


_printer = _FieldPrinter()


def _display_term(t: sp.Expr) -> sp.Expr:
    try:
        return sp.factor(t)
    except (sp.PolynomialError, ValueError):
        return t


def print_expression(e) -> str:
    e = sp.sympify(e)
    shown = sp.Add(*[_display_term(t) for t in sp.Add.make_args(e)], evaluate=False) if e.is_Add else _display_term(e)
    return _printer.doprint(shown)


def print_operator(op: LinearOperator) -> str:
    if op.is_zero_operator:
        return "0"
    names = [v.name for v in op.variables]

    def term_string(index, coeff) -> str:
        dparts = []
        for name, k in zip(names, index):
            if k == 1:
                dparts.append(f"D{name}")
            elif k > 1:
                dparts.append(f"D{name}^{k}")
        dtext = "*".join(dparts)
        if not dtext:
            return print_expression(coeff)
        if coeff == 1:
            return dtext
        if coeff == -1:
            return f"-{dtext}"
        ctext = print_expression(coeff)
        if coeff.is_Add:
            ctext = f"({ctext})"
        return f"{ctext}*{dtext}"

    ordered = sorted(op.terms.items(), key=lambda kv: (-sum(kv[0]), tuple(-i for i in kv[0])))
    pieces = [term_string(i, c) for i, c in ordered]
    out = pieces[0]
    for p in pieces[1:]:
        if p.startswith("-"):
            out += f" - {p[1:]}"
        else:
            out += f" + {p}"
    return out
