"""Exact scalar arithmetic for the operator algebra.

The coefficient field is: rational functions of the declared independent
variables over Q, extended by formal exp/ln and by unevaluated
antiderivative nodes.  Arbitrary function symbols (with per-argument
derivative annotations) stand for the free functions of general solutions.
Everything is exact rational arithmetic; no floating point is used except
as a last-resort rejection test on foreign nodes.

Canonical form, in brief: arguments of exp/ln/function/antiderivative
nodes are normalized recursively; logarithms are expanded over factors;
exponentials are combined per product; the rational structure on top of
these generators is put into cancelled p/q form.  Distinct normalized
generators are treated as algebraically independent, which is sound for
the verification-by-substitution workloads of this package.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import sympy as sp
from sympy import S, Symbol

__all__ = [
    "Context",
    "DegenerateInputError",
    "InconclusiveZeroTest",
    "AppliedArbitrary",
    "function_symbol",
    "normalize",
    "diff",
    "is_zero",
    "integrate_heuristic",
    "antiderivative",
    "fresh_parameter",
    "monomials",
    "collect_linear",
    "arbitrary_applications",
    "random_rational",
    "sample_point",
    "eval_at",
    "random_witnesses",
    "instantiate_arbitrary",
    "close_integrals",
]


class DegenerateInputError(ValueError):
    """Division by an expression that normalizes to zero."""


class InconclusiveZeroTest(Exception):
    """Zero test could neither certify zero nor produce a nonzero witness."""


@dataclass(frozen=True)
class Context:
    """The fixed set of independent variables of one problem."""

    variables: tuple[Symbol, ...]

    @classmethod
    def of(cls, *names: str) -> "Context":
        if len(set(names)) != len(names):
            raise ValueError("variable names must be unique")
        return cls(tuple(Symbol(n) for n in names))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    def var(self, name: str) -> Symbol:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(f"unknown variable {name!r}")

    def __len__(self) -> int:
        return len(self.variables)


# ---------------------------------------------------------------------------
# Arbitrary function symbols with derivative annotations.
# ---------------------------------------------------------------------------

class AppliedArbitrary(sp.Function):
    """An applied arbitrary function, annotated by derivative orders per slot.

    Differentiation bumps the annotation rather than producing sympy
    Derivative/Subs nodes, so chain-rule output stays first-class and
    printable:  F -> F' -> F'' for one argument, phi -> phi_{1,0} for two.
    """

    base_name: str = ""
    slots: int = 1
    orders: tuple[int, ...] = (0,)

    @classmethod
    def eval(cls, *args):
        if len(args) != cls.slots:
            raise TypeError(
                f"{cls.base_name} expects {cls.slots} argument(s), got {len(args)}"
            )
        return None

    def fdiff(self, argindex=1):
        cls = type(self)
        orders = list(cls.orders)
        orders[argindex - 1] += 1
        bumped = function_symbol(cls.base_name, cls.slots, tuple(orders))
        return bumped(*self.args)


_ARB_REGISTRY: dict[tuple[str, int, tuple[int, ...]], type] = {}


def _display_name(base: str, slots: int, orders: tuple[int, ...]) -> str:
    if slots == 1:
        return base + "'" * orders[0]
    if any(orders):
        return base + "_{" + ",".join(str(d) for d in orders) + "}"
    return base


def function_symbol(name: str, arity: int = 1, orders: tuple[int, ...] | None = None) -> type:
    """Return the (cached) applied-function class for `name` with `arity` slots."""
    if arity < 1:
        raise ValueError("arity must be positive")
    orders = tuple(orders) if orders is not None else (0,) * arity
    if len(orders) != arity or any(d < 0 for d in orders):
        raise ValueError("bad derivative annotation")
    key = (name, arity, orders)
    cls = _ARB_REGISTRY.get(key)
    if cls is None:
        cls = type(
            _display_name(name, arity, orders),
            (AppliedArbitrary,),
            {"base_name": name, "slots": arity, "orders": orders},
        )
        _ARB_REGISTRY[key] = cls
    return cls


def arbitrary_applications(e: sp.Expr) -> list[sp.Expr]:
    """All applied arbitrary-function subexpressions, deterministically ordered."""
    apps = {a for a in sp.preorder_traversal(e) if isinstance(a, AppliedArbitrary)}
    return sorted(apps, key=sp.default_sort_key)


_PARAM_COUNTER = itertools.count()


def fresh_parameter(prefix: str = "_c") -> Symbol:
    """A fresh constant symbol (not an independent variable)."""
    return Symbol(f"{prefix}{next(_PARAM_COUNTER)}")


# ---------------------------------------------------------------------------
# Normalization and zero testing.
# ---------------------------------------------------------------------------

def _normalize_inner(e: sp.Expr) -> sp.Expr:
    """Normalize arguments of generator nodes (exp/ln/functions/integrals)."""
    if isinstance(e, AppliedArbitrary):
        return type(e)(*[normalize(a) for a in e.args])
    if isinstance(e, sp.Integral):
        return sp.Integral(normalize(e.function), *e.limits)
    if isinstance(e, sp.exp):
        return sp.exp(normalize(e.args[0]))
    if e.func is sp.log:
        return _canonical_log(normalize(e.args[0]))
    if e.args:
        return e.func(*[_normalize_inner(a) for a in e.args])
    return e


def _canonical_log(arg: sp.Expr) -> sp.Expr:
    """ln over the factored argument: ln(c * prod f_i^m_i) -> ln c + sum m_i ln f_i.

    Keeps ln-generators multiplicatively independent so cancellation-based
    zero testing stays sound (formal logarithm; no branch bookkeeping).
    """
    num, den = sp.fraction(arg)
    pieces, content = [], S.One
    for part, sign in ((num, 1), (den, -1)):
        if part.is_Rational:
            content *= part**sign
            continue
        try:
            c, factors = sp.factor_list(part)
        except sp.PolynomialError:
            return sp.log(arg)
        if not c.is_Rational:
            return sp.log(arg)
        content *= c**sign
        for f, m in factors:
            pieces.append(sign * m * sp.log(f))
    if content != 1:
        if content.is_Rational and content > 0:
            for prime, m in sp.factorrat(content).items():
                pieces.append(m * sp.log(prime))
        else:
            pieces.append(sp.log(content))
    return sp.Add(*pieces)


def normalize(e) -> sp.Expr:
    """Canonical form of an expression of the coefficient field.

    Idempotent; maps every rational-function representation of zero to 0.
    Raises DegenerateInputError if a division by (normalized) zero occurs.
    """
    e = sp.sympify(e)
    e = _normalize_inner(e)
    for _ in range(4):
        prev = e
        e = sp.expand_log(e, force=True)
        e = sp.expand(e)
        e = sp.powsimp(e, combine="exp")
        e = sp.cancel(e)
        if e == prev:
            break
    if e.has(sp.zoo, sp.nan, sp.oo, -sp.oo):
        raise DegenerateInputError(f"degenerate input: division by zero in {prev}")
    return e


def diff(e, v: Symbol, n: int = 1) -> sp.Expr:
    """Exact partial derivative (chain rule on function symbols, exp, ln;
    antiderivative nodes differentiate to their integrand / under the sign)."""
    return sp.diff(sp.sympify(e), v, n)


_ALLOWED_FUNCS = (sp.exp, sp.log, sp.Integral)


def _canonical_nodes_only(e: sp.Expr) -> bool:
    for node in sp.preorder_traversal(e):
        if isinstance(node, (sp.Symbol, sp.Integer, sp.Rational)):
            continue
        if node is sp.I or node is sp.pi:
            continue
        if isinstance(node, (sp.Add, sp.Mul)):
            continue
        if isinstance(node, sp.Pow):
            if not node.exp.is_Integer:
                return False
            continue
        if isinstance(node, AppliedArbitrary) or isinstance(node, _ALLOWED_FUNCS):
            continue
        if isinstance(node, sp.Tuple):
            continue
        return False
    return True


def is_zero(e, seed: int = 0) -> bool:
    """Decide whether `e` represents the zero function.

    Canonical normalization decides membership in the supported field
    (distinct normalized generators count as independent).  For foreign
    nodes the test falls back to randomized evaluation, which can only
    certify *non*-zero; if no witness is found, InconclusiveZeroTest is
    raised rather than silently answering.
    """
    n = normalize(e)
    if n == 0:
        return True
    if _canonical_nodes_only(n):
        return False
    if _nonzero_witness(n, seed) is not None:
        return False
    raise InconclusiveZeroTest(
        f"cannot decide zero-ness of {n}: symbolic collection failed and "
        "sampling produced no nonzero witness"
    )


def _nonzero_witness(e: sp.Expr, seed: int, trials: int = 5):
    rng = random.Random(seed)
    inst = instantiate_arbitrary(e, random_witnesses(e, rng))
    inst = close_integrals(inst)
    syms = sorted(inst.free_symbols, key=sp.default_sort_key)
    for _ in range(trials):
        point = sample_point(syms, rng)
        try:
            val = inst.subs(point, simultaneous=True)
        except (ZeroDivisionError, ValueError):
            continue
        if val.has(sp.zoo, sp.nan):
            continue
        val = sp.cancel(val)
        if val.is_Rational:
            if val != 0:
                return point
            continue
        approx = val.evalf(50)
        if approx.is_Number and abs(approx) > sp.Float("1e-30"):
            return point
    return None


# ---------------------------------------------------------------------------
# Heuristic antiderivative.
# ---------------------------------------------------------------------------

def antiderivative(e, v: Symbol) -> sp.Expr:
    """An unevaluated antiderivative node (always legal, still differentiable)."""
    return sp.Integral(sp.sympify(e), v)


def integrate_heuristic(e, v: Symbol) -> sp.Expr:
    """Antiderivative of `e` with respect to `v` for three closed classes:

    polynomials in v; rational functions of v whose denominator splits into
    linear-in-v factors with v-free roots; p(v)*exp(w) with w linear in v.
    Everything else stays an unevaluated antiderivative node.  Closed
    results are verified by differentiation before being returned.
    """
    e = normalize(e)
    pieces = [_integrate_term(t, v) for t in sp.Add.make_args(e)]
    return normalize(sp.Add(*pieces))


def _integrate_term(term: sp.Expr, v: Symbol) -> sp.Expr:
    const_factors, core_factors = [], []
    for f in sp.Mul.make_args(term):
        (core_factors if f.has(v) else const_factors).append(f)
    const = sp.Mul(*const_factors)
    core = sp.Mul(*core_factors)
    if not core_factors:
        return const * v

    closed = _integrate_core(core, v)
    if closed is None:
        return const * sp.Integral(core, v)
    if normalize(sp.diff(closed, v) - core) != 0:
        return const * sp.Integral(core, v)
    return const * closed


def _integrate_core(core: sp.Expr, v: Symbol):
    if core.is_polynomial(v):
        try:
            return sp.Poly(core, v).integrate(v).as_expr()
        except sp.PolynomialError:
            return None

    num, den = sp.fraction(sp.cancel(core))
    if den.has(v) and num.is_polynomial(v) and den.is_polynomial(v):
        try:
            _, factors = sp.factor_list(den, v)
        except sp.PolynomialError:
            factors = None
        if factors is not None and all(sp.degree(f, v) <= 1 for f, _ in factors):
            try:
                res = sp.integrate(core, v)
            except Exception:
                return None
            if not res.has(sp.Integral, sp.Piecewise, sp.atan, sp.RootSum, sp.I):
                return res
        return None

    exps = [f for f in sp.Mul.make_args(core) if isinstance(f, sp.exp)]
    if len(exps) == 1:
        w = exps[0].args[0]
        q = normalize(sp.diff(w, v))
        p = sp.Mul(*[f for f in sp.Mul.make_args(core) if f is not exps[0]])
        if q != 0 and not q.has(v) and p.is_polynomial(v):
            # repeated integration by parts: e^w * sum_i (-1)^i p^(i) / q^(i+1)
            total, sign, deriv, power = S.Zero, S.One, p, 1
            while True:
                total += sign * deriv / q**power
                deriv = sp.diff(deriv, v)
                if deriv == 0:
                    break
                sign, power = -sign, power + 1
            return exps[0] * total
    return None


def close_integrals(e: sp.Expr) -> sp.Expr:
    """Attempt to evaluate every antiderivative node; keep those that resist."""
    e = sp.sympify(e)
    for _ in range(8):
        targets = [n for n in sp.preorder_traversal(e) if isinstance(n, sp.Integral)]
        if not targets:
            return e
        replaced = False
        for node in targets:
            inner = close_integrals(node.function)
            var = node.limits[0][0] if node.limits else None
            result = integrate_heuristic(inner, var)
            if not isinstance(result, sp.Integral):
                e = e.xreplace({node: result})
                replaced = True
        if not replaced:
            return e
    return e


# ---------------------------------------------------------------------------
# Randomized evaluation and polynomial witnesses.
# ---------------------------------------------------------------------------

def random_rational(rng: random.Random, num: int = 9, den: int = 4) -> sp.Rational:
    return sp.Rational(rng.randint(-num, num), rng.randint(1, den))


def sample_point(variables: Sequence[Symbol], rng: random.Random) -> dict:
    return {v: random_rational(rng) for v in variables}


def eval_at(e, point: dict) -> sp.Expr:
    """Exact evaluation at a rational point; degenerate denominators raise."""
    val = sp.sympify(e).subs(point, simultaneous=True)
    val = sp.cancel(val)
    if val.has(sp.zoo, sp.nan):
        raise DegenerateInputError(f"evaluation hit a pole at {point}")
    return val


def random_witnesses(e: sp.Expr, rng: random.Random, degree: int = 3) -> dict:
    """Random polynomial witnesses for every arbitrary function base in `e`."""
    witnesses: dict[str, tuple[tuple[Symbol, ...], sp.Expr]] = {}
    for app in arbitrary_applications(e):
        cls = type(app)
        if cls.base_name in witnesses:
            continue
        slots = tuple(Symbol(f"_s{i}") for i in range(cls.slots))
        mons = monomials(slots, degree, include_const=True)
        body = sp.Add(*[random_rational(rng, 5, 3) * m for m in mons])
        witnesses[cls.base_name] = (slots, body)
    return witnesses


def instantiate_arbitrary(e: sp.Expr, witnesses: dict) -> sp.Expr:
    """Replace arbitrary-function applications by concrete bodies.

    Derivative annotations are honoured: the body is differentiated per
    slot before substituting the actual arguments, so F and F' stay
    consistent.
    """

    def wanted(node):
        return isinstance(node, AppliedArbitrary) and type(node).base_name in witnesses

    def build(node):
        cls = type(node)
        slots, body = witnesses[cls.base_name]
        val = body
        for s, d in zip(slots, cls.orders):
            val = sp.diff(val, s, d)
        return val.subs(dict(zip(slots, node.args)), simultaneous=True)

    return sp.sympify(e).replace(wanted, build)


def monomials(variables: Sequence[Symbol], max_degree: int, include_const: bool = False) -> list[sp.Expr]:
    """All monomials in `variables` of total degree <= max_degree."""
    out = []
    n = len(variables)
    for total in range(0 if include_const else 1, max_degree + 1):
        for exps in _compositions(total, n):
            out.append(sp.Mul(*[v**k for v, k in zip(variables, exps)]))
    return out


def _compositions(total: int, parts: int) -> Iterable[tuple[int, ...]]:
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for rest in _compositions(total - head, parts - 1):
            yield (head,) + rest


def collect_linear(e: sp.Expr, gens: Sequence[sp.Expr]) -> tuple[dict, sp.Expr]:
    """Write `e` as sum(coeff[g]*g) + rest, requiring linearity in `gens`.

    Raises ValueError when `e` is not affine-linear in the generators.
    """
    e = sp.sympify(e)
    dummies = {g: sp.Dummy() for g in gens}
    subbed = e.xreplace(dummies)
    coeffs: dict[sp.Expr, sp.Expr] = {}
    rest = subbed
    for g, d in dummies.items():
        c = sp.expand(rest).coeff(d, 1)
        rest = sp.expand(rest - c * d)
        if rest.has(d) or c.has(d):
            raise ValueError(f"expression is not linear in {g}")
        coeffs[g] = normalize(c)
    for d in dummies.values():
        if rest.has(d):
            raise ValueError("expression is not linear in the generators")
    return coeffs, normalize(rest)
