"""Linear partial differential operators: composition, commutators,
application, principal symbols and symbol factorization.

Operators are stored in normal-ordered form (coefficients to the left of
the derivation monomials), as a mapping from derivative multi-indices to
exact scalar coefficients.  All coefficient arithmetic goes through
expr.normalize, so structural equality of the stored dictionaries is
canonical equality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Iterable, Mapping, Sequence

import sympy as sp
from sympy import S, Symbol

from .expr import diff, is_zero, normalize

__all__ = [
    "UnsupportedOrderError",
    "NotFactorableError",
    "DegenerateFactorError",
    "GenericityError",
    "SpanDecompositionError",
    "LinearOperator",
    "FirstOrderOperator",
    "SymbolPolynomial",
    "compose",
    "commutator",
    "principal_symbol",
    "factor_symbol",
    "decompose_in_frame",
    "decompose_in_span",
]


class UnsupportedOrderError(ValueError):
    """Operation defined only for a specific operator order."""


class NotFactorableError(ValueError):
    """Principal symbol does not factor over the coefficient field."""


class DegenerateFactorError(ValueError):
    """Principal symbol factors with a repeated (proportional) factor."""


class GenericityError(ValueError):
    """A frame whose coefficient matrix is identically singular."""


class SpanDecompositionError(ValueError):
    """A vector field that does not lie in the requested span."""


MultiIndex = tuple[int, ...]


def _mi_add(a: MultiIndex, b: MultiIndex) -> MultiIndex:
    return tuple(x + y for x, y in zip(a, b))


def _mi_binom(a: MultiIndex, b: MultiIndex) -> int:
    n = 1
    for x, y in zip(a, b):
        n *= comb(x, y)
    return n


def _sub_indices(a: MultiIndex) -> Iterable[MultiIndex]:
    ranges = [range(x + 1) for x in a]
    idx = [0] * len(a)
    while True:
        yield tuple(idx)
        for pos in range(len(a)):
            idx[pos] += 1
            if idx[pos] <= a[pos]:
                break
            idx[pos] = 0
        else:
            return


def diff_multi(e: sp.Expr, variables: Sequence[Symbol], index: MultiIndex) -> sp.Expr:
    for v, k in zip(variables, index):
        if k:
            e = diff(e, v, k)
    return e


class LinearOperator:
    """sum over multi-indices I of  coeff_I * D^I  on the declared variables."""

    def __init__(self, variables: Sequence[Symbol], terms: Mapping[MultiIndex, sp.Expr]):
        self.variables = tuple(variables)
        n = len(self.variables)
        clean: dict[MultiIndex, sp.Expr] = {}
        for idx, c in terms.items():
            idx = tuple(int(i) for i in idx)
            if len(idx) != n or any(i < 0 for i in idx):
                raise ValueError(f"bad multi-index {idx}")
            c = normalize(c)
            if c != 0:
                clean[idx] = clean.get(idx, S.Zero) + c
        self.terms = {i: c for i, c in clean.items() if normalize(c) != 0}

    # -- constructors -------------------------------------------------
    @classmethod
    def zero(cls, variables: Sequence[Symbol]) -> "LinearOperator":
        return cls(variables, {})

    @classmethod
    def identity(cls, variables: Sequence[Symbol]) -> "LinearOperator":
        return cls(variables, {(0,) * len(variables): S.One})

    @classmethod
    def from_scalar(cls, variables: Sequence[Symbol], e) -> "LinearOperator":
        return cls(variables, {(0,) * len(variables): sp.sympify(e)})

    @classmethod
    def derivation(cls, variables: Sequence[Symbol], v: Symbol, power: int = 1) -> "LinearOperator":
        idx = tuple(power if w == v else 0 for w in variables)
        if sum(idx) != power:
            raise ValueError(f"{v} is not one of the declared variables")
        return cls(variables, {idx: S.One})

    # -- structure ----------------------------------------------------
    @property
    def order(self) -> int:
        return max((sum(i) for i in self.terms), default=0)

    @property
    def is_zero_operator(self) -> bool:
        return not self.terms

    def coeff(self, index: Sequence[int]) -> sp.Expr:
        return self.terms.get(tuple(index), S.Zero)

    def degree_terms(self, degree: int) -> dict[MultiIndex, sp.Expr]:
        return {i: c for i, c in self.terms.items() if sum(i) == degree}

    # -- arithmetic ---------------------------------------------------
    def _require_same_vars(self, other: "LinearOperator"):
        if self.variables != other.variables:
            raise ValueError("operators live on different variable sets")

    def __add__(self, other: "LinearOperator") -> "LinearOperator":
        self._require_same_vars(other)
        merged = dict(self.terms)
        for i, c in other.terms.items():
            merged[i] = merged.get(i, S.Zero) + c
        return LinearOperator(self.variables, merged)

    def __sub__(self, other: "LinearOperator") -> "LinearOperator":
        return self + (-other)

    def __neg__(self) -> "LinearOperator":
        return self.scale(S.NegativeOne)

    def scale(self, c) -> "LinearOperator":
        c = sp.sympify(c)
        return LinearOperator(self.variables, {i: c * e for i, e in self.terms.items()})

    def __rmul__(self, c):
        return self.scale(c)

    def compose(self, other: "LinearOperator") -> "LinearOperator":
        """self after other, by the generalized Leibniz rule."""
        self._require_same_vars(other)
        out: dict[MultiIndex, sp.Expr] = {}
        for I, a in self.terms.items():
            for J, b in other.terms.items():
                for K in _sub_indices(I):
                    rest = tuple(i - k for i, k in zip(I, K))
                    c = a * _mi_binom(I, K) * diff_multi(b, self.variables, rest)
                    if c == 0:
                        continue
                    key = _mi_add(K, J)
                    out[key] = out.get(key, S.Zero) + c
        return LinearOperator(self.variables, out)

    def apply(self, u) -> sp.Expr:
        u = sp.sympify(u)
        total = S.Zero
        for I, c in self.terms.items():
            total += c * diff_multi(u, self.variables, I)
        return normalize(total)

    # -- comparison / display ------------------------------------------
    def __eq__(self, other) -> bool:
        if not isinstance(other, LinearOperator):
            return NotImplemented
        return self.variables == other.variables and self.terms == other.terms

    def __repr__(self) -> str:
        from .syntax import print_operator

        return f"LinearOperator({print_operator(self)!r})"

    def __str__(self) -> str:
        from .syntax import print_operator

        return print_operator(self)


def compose(a: LinearOperator, b: LinearOperator) -> LinearOperator:
    return a.compose(b)


class FirstOrderOperator:
    """b_1*D_1 + ... + b_n*D_n + b_0, with the pure case b_0 = 0."""

    def __init__(self, variables: Sequence[Symbol], vector: Mapping[Symbol, sp.Expr], scalar=S.Zero):
        self.variables = tuple(variables)
        vec = {}
        for v in self.variables:
            c = normalize(vector.get(v, S.Zero))
            if c != 0:
                vec[v] = c
        self.vector = vec
        self.scalar = normalize(scalar)

    @classmethod
    def derivation(cls, variables: Sequence[Symbol], v: Symbol) -> "FirstOrderOperator":
        return cls(variables, {v: S.One})

    @property
    def is_pure(self) -> bool:
        return self.scalar == 0

    @property
    def is_trivial(self) -> bool:
        return not self.vector and self.scalar == 0

    def vector_coeff(self, v: Symbol) -> sp.Expr:
        return self.vector.get(v, S.Zero)

    def apply_derivation(self, u) -> sp.Expr:
        """The vector-field part acting on a scalar."""
        u = sp.sympify(u)
        return normalize(sp.Add(*[c * diff(u, v) for v, c in self.vector.items()]))

    def apply(self, u) -> sp.Expr:
        u = sp.sympify(u)
        return normalize(self.apply_derivation(u) + self.scalar * u)

    def to_linear(self) -> LinearOperator:
        n = len(self.variables)
        terms: dict[MultiIndex, sp.Expr] = {}
        for pos, v in enumerate(self.variables):
            c = self.vector.get(v)
            if c is not None:
                idx = tuple(1 if j == pos else 0 for j in range(n))
                terms[idx] = c
        if self.scalar != 0:
            terms[(0,) * n] = self.scalar
        return LinearOperator(self.variables, terms)

    # -- arithmetic ---------------------------------------------------
    def __add__(self, other: "FirstOrderOperator") -> "FirstOrderOperator":
        if self.variables != other.variables:
            raise ValueError("operators live on different variable sets")
        vec = {v: self.vector_coeff(v) + other.vector_coeff(v) for v in self.variables}
        return FirstOrderOperator(self.variables, vec, self.scalar + other.scalar)

    def __sub__(self, other: "FirstOrderOperator") -> "FirstOrderOperator":
        return self + other.scale(S.NegativeOne)

    def scale(self, c) -> "FirstOrderOperator":
        c = sp.sympify(c)
        vec = {v: c * e for v, e in self.vector.items()}
        return FirstOrderOperator(self.variables, vec, c * self.scalar)

    def __rmul__(self, c):
        return self.scale(c)

    def plus_scalar(self, c) -> "FirstOrderOperator":
        return FirstOrderOperator(self.variables, self.vector, self.scalar + sp.sympify(c))

    def proportional_to(self, other: "FirstOrderOperator") -> bool:
        """Whether the vector parts are proportional over the field."""
        pairs = [(self.vector_coeff(v), other.vector_coeff(v)) for v in self.variables]
        for (a1, b1) in pairs:
            for (a2, b2) in pairs:
                if normalize(a1 * b2 - a2 * b1) != 0:
                    return False
        return True

    def normalized(self) -> tuple["FirstOrderOperator", sp.Expr]:
        """Scale so the leading nonzero coefficient (in variable order) is 1."""
        for v in self.variables:
            c = self.vector.get(v)
            if c is not None:
                return self.scale(1 / c), c
        raise ValueError("cannot normalize an operator with zero vector part")

    def __eq__(self, other) -> bool:
        if not isinstance(other, FirstOrderOperator):
            return NotImplemented
        return (
            self.variables == other.variables
            and self.vector == other.vector
            and self.scalar == other.scalar
        )

    def __repr__(self) -> str:
        return f"FirstOrderOperator({str(self.to_linear())!r})"

    def __str__(self) -> str:
        return str(self.to_linear())


def commutator(a: FirstOrderOperator, b: FirstOrderOperator) -> FirstOrderOperator:
    """[a, b] = a b - b a, again first order (second-order parts cancel).

    Works for operators with zeroth-order parts as well:
    [A + a0, B + b0] = [A, B] + A(b0) - B(a0).
    """
    if a.variables != b.variables:
        raise ValueError("operators live on different variable sets")
    vec = {
        v: a.apply_derivation(b.vector_coeff(v)) - b.apply_derivation(a.vector_coeff(v))
        for v in a.variables
    }
    scalar = a.apply_derivation(b.scalar) - b.apply_derivation(a.scalar)
    result = FirstOrderOperator(a.variables, vec, scalar)
    # the defining property, checked exactly
    residual = a.to_linear().compose(b.to_linear()) - b.to_linear().compose(a.to_linear()) - result.to_linear()
    if not residual.is_zero_operator:
        raise AssertionError(f"commutator second-order parts failed to cancel: {residual}")
    return result


class SymbolPolynomial:
    """Homogeneous degree-2 polynomial in the formal commuting symbols xi_i."""

    def __init__(self, variables: Sequence[Symbol], coeffs: Mapping[MultiIndex, sp.Expr]):
        self.variables = tuple(variables)
        n = len(self.variables)
        clean = {}
        for idx, c in coeffs.items():
            idx = tuple(int(i) for i in idx)
            if len(idx) != n or sum(idx) != 2 or any(i < 0 for i in idx):
                raise ValueError(f"symbol polynomial must be homogeneous of degree 2, got {idx}")
            c = normalize(c)
            if c != 0:
                clean[idx] = clean.get(idx, S.Zero) + c
        self.coeffs = {i: c for i, c in clean.items() if normalize(c) != 0}

    @classmethod
    def product_of(cls, a: FirstOrderOperator, b: FirstOrderOperator) -> "SymbolPolynomial":
        if not (a.is_pure and b.is_pure):
            raise ValueError("symbol product needs pure first-order operators")
        n = len(a.variables)
        out: dict[MultiIndex, sp.Expr] = {}
        for i, v in enumerate(a.variables):
            for j, w in enumerate(a.variables):
                c = a.vector_coeff(v) * b.vector_coeff(w)
                if c == 0:
                    continue
                idx = tuple((1 if k == i else 0) + (1 if k == j else 0) for k in range(n))
                out[idx] = out.get(idx, S.Zero) + c
        return cls(a.variables, out)

    @property
    def is_zero(self) -> bool:
        return not self.coeffs

    def coeff(self, index: Sequence[int]) -> sp.Expr:
        return self.coeffs.get(tuple(index), S.Zero)

    def __sub__(self, other: "SymbolPolynomial") -> sp.Expr:
        merged = dict(self.coeffs)
        for i, c in other.coeffs.items():
            merged[i] = merged.get(i, S.Zero) - c
        diffp = object.__new__(SymbolPolynomial)
        diffp.variables = self.variables
        diffp.coeffs = {i: normalize(c) for i, c in merged.items() if normalize(c) != 0}
        return diffp

    def as_expression(self, xi: Sequence[Symbol]) -> sp.Expr:
        total = S.Zero
        for idx, c in self.coeffs.items():
            total += c * sp.Mul(*[s**k for s, k in zip(xi, idx)])
        return total

    def __eq__(self, other) -> bool:
        if not isinstance(other, SymbolPolynomial):
            return NotImplemented
        return self.variables == other.variables and self.coeffs == other.coeffs

    def __repr__(self) -> str:
        xi = [Symbol(f"xi{i+1}") for i in range(len(self.variables))]
        return f"SymbolPolynomial({self.as_expression(xi)})"


def principal_symbol(op: LinearOperator) -> SymbolPolynomial:
    """Degree-2 part of an order-2 operator with D_i replaced by xi_i."""
    if op.order != 2:
        raise UnsupportedOrderError(f"principal symbol needs order 2, got {op.order}")
    return SymbolPolynomial(op.variables, op.degree_terms(2))


def _sqrt_expression(e: sp.Expr) -> sp.Expr | None:
    """Heuristic exact square root of a field element, or None."""
    e = normalize(e)
    if e == 0:
        return S.Zero
    num, den = sp.fraction(e)
    parts = []
    for part, sign in ((num, 1), (den, -1)):
        if part.is_Rational:
            root = sp.sqrt(abs(part))
            if part < 0 or not root.is_Rational:
                return None
            parts.append(root**sign)
            continue
        try:
            c, factors = sp.factor_list(part)
        except sp.PolynomialError:
            return None
        if not c.is_Rational or c < 0:
            return None
        root = sp.sqrt(c)
        if not root.is_Rational:
            return None
        parts.append(root**sign)
        for f, m in factors:
            if m % 2:
                return None
            parts.append(f ** (sign * m // 2))
    return normalize(sp.Mul(*parts))


def _form_to_operator(variables, lin: Mapping[int, sp.Expr]) -> FirstOrderOperator:
    return FirstOrderOperator(variables, {variables[i]: c for i, c in lin.items()})


def factor_symbol(s: SymbolPolynomial) -> tuple[FirstOrderOperator, FirstOrderOperator]:
    """Split s into two linear factors over the field, exactly.

    Returns pure first-order operators whose symbol product equals s.  The
    first factor is monic in the pivot symbol; the second carries the
    scale.  Raises NotFactorableError / DegenerateFactorError.
    """
    variables = s.variables
    n = len(variables)
    if n not in (2, 3):
        raise ValueError("symbol factorization supports 2 or 3 variables")
    if s.is_zero:
        raise NotFactorableError("zero symbol")

    def e(i):
        return tuple(1 if j == i else 0 for j in range(n))

    squares = [s.coeff(_mi_add(e(i), e(i))) for i in range(n)]
    pivots = [i for i in range(n) if squares[i] != 0]

    if pivots:
        p = pivots[0]
        A = squares[p]
        B = {i: s.coeff(_mi_add(e(p), e(i))) for i in range(n) if i != p}
        C = {
            (i, j): s.coeff(_mi_add(e(i), e(j)))
            for i in range(n)
            for j in range(i, n)
            if i != p and j != p
        }
        others = [i for i in range(n) if i != p]
        # discriminant of s as a quadratic in xi_p: a quadratic form in the rest
        disc = {}
        for i in others:
            for j in others:
                if i > j:
                    continue
                d = B.get(i, S.Zero) * B.get(j, S.Zero) * (1 if i == j else 2)
                d -= 4 * A * C.get((i, j), S.Zero)
                disc[(i, j)] = normalize(d)
        root = _sqrt_quadratic_form(disc, others)
        if root is None:
            raise NotFactorableError("discriminant is not a perfect square over the field")
        if all(c == 0 for c in root.values()):
            raise DegenerateFactorError("repeated factor (zero discriminant)")
        f1 = {p: S.One}
        f2 = {p: A}
        for i in others:
            f1[i] = normalize((B.get(i, S.Zero) + root.get(i, S.Zero)) / (2 * A))
            f2[i] = normalize((B.get(i, S.Zero) - root.get(i, S.Zero)) / 2)
        s1 = _form_to_operator(variables, f1)
        s2 = _form_to_operator(variables, f2)
    else:
        # no square terms: one factor contains the pivot, the other does not
        p = None
        for i in range(n):
            if any(s.coeff(_mi_add(e(i), e(j))) != 0 for j in range(n) if j != i):
                p = i
                break
        if p is None:
            raise NotFactorableError("symbol has no usable cross terms")
        lin = {j: s.coeff(_mi_add(e(p), e(j))) for j in range(n) if j != p}
        rest = {
            (i, j): s.coeff(_mi_add(e(i), e(j)))
            for i in range(n)
            for j in range(i, n)
            if i != p and j != p and s.coeff(_mi_add(e(i), e(j))) != 0
        }
        g = _divide_form(rest, lin, [i for i in range(n) if i != p])
        if g is None:
            raise NotFactorableError("cross-term part is not divisible by the linear factor")
        f1 = {p: S.One}
        f1.update(g)
        s1 = _form_to_operator(variables, f1)
        s2 = _form_to_operator(variables, lin)

    if s1.proportional_to(s2):
        raise DegenerateFactorError("repeated factor")
    check = SymbolPolynomial.product_of(s1, s2) - s
    if not check.is_zero:
        raise AssertionError("internal error: factor product mismatch")
    return s1, s2


def _sqrt_quadratic_form(disc: Mapping[tuple[int, int], sp.Expr], others: list[int]):
    """Square root of a quadratic form as a linear form, or None."""
    root: dict[int, sp.Expr] = {}
    if len(others) == 1:
        i = others[0]
        r = _sqrt_expression(disc.get((i, i), S.Zero))
        if r is None:
            return None
        root[i] = r
        return root
    i, j = others
    dii = disc.get((i, i), S.Zero)
    djj = disc.get((j, j), S.Zero)
    dij = disc.get((i, j), S.Zero)
    if dii != 0:
        ei = _sqrt_expression(dii)
        if ei is None:
            return None
        ej = normalize(dij / (2 * ei))
        if normalize(ej * ej - djj) != 0:
            return None
    else:
        if dij != 0:
            return None
        ei = S.Zero
        ej = _sqrt_expression(djj)
        if ej is None:
            return None
    root[i] = ei
    root[j] = ej
    return root


def _divide_form(rest: Mapping[tuple[int, int], sp.Expr], lin: Mapping[int, sp.Expr], others: list[int]):
    """g with  g * lin == rest  as quadratic forms in `others`, or None."""
    if not rest:
        return {i: S.Zero for i in others}
    xi = {i: Symbol(f"_xi{i}") for i in others}
    rest_expr = sp.Add(
        *[c * xi[i] * xi[j] for (i, j), c in rest.items()]
    )
    lin_expr = sp.Add(*[c * xi[i] for i, c in lin.items()])
    quo = sp.cancel(rest_expr / lin_expr)
    g: dict[int, sp.Expr] = {}
    residue = quo
    for i in others:
        c = normalize(sp.expand(quo).coeff(xi[i], 1))
        if any(c.has(x) for x in xi.values()):
            return None
        g[i] = c
        residue = residue - c * xi[i]
    if normalize(sp.expand(residue)) != 0:
        return None
    return g


def decompose_in_frame(
    w: FirstOrderOperator, basis: Sequence[FirstOrderOperator]
) -> tuple[sp.Expr, sp.Expr, sp.Expr]:
    """Coefficients (c1, c2, c3) with w = c1*B1 + c2*B2 + c3*B3 as vector fields."""
    if len(basis) != 3:
        raise ValueError("frame decomposition needs exactly three basis operators")
    variables = w.variables
    mat = sp.Matrix([[b.vector_coeff(v) for b in basis] for v in variables])
    det = normalize(mat.det())
    if det == 0:
        raise GenericityError("frame coefficient matrix is identically singular")
    rhs = sp.Matrix([w.vector_coeff(v) for v in variables])
    sol = mat.adjugate() * rhs
    out = tuple(normalize(c / det) for c in sol)
    for v in variables:
        resid = w.vector_coeff(v) - sum(c * b.vector_coeff(v) for c, b in zip(out, basis))
        if normalize(resid) != 0:
            raise AssertionError("frame decomposition residual nonzero")
    return out


def decompose_in_span(
    w: FirstOrderOperator, pair: Sequence[FirstOrderOperator]
) -> tuple[sp.Expr, sp.Expr]:
    """Coefficients (c1, c2) with w = c1*A + c2*B, or SpanDecompositionError."""
    a, b = pair
    variables = w.variables
    rows = list(variables)
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            vi, vj = rows[i], rows[j]
            det = normalize(
                a.vector_coeff(vi) * b.vector_coeff(vj) - a.vector_coeff(vj) * b.vector_coeff(vi)
            )
            if det == 0:
                continue
            c1 = normalize(
                (w.vector_coeff(vi) * b.vector_coeff(vj) - w.vector_coeff(vj) * b.vector_coeff(vi)) / det
            )
            c2 = normalize(
                (a.vector_coeff(vi) * w.vector_coeff(vj) - a.vector_coeff(vj) * w.vector_coeff(vi)) / det
            )
            for v in variables:
                resid = w.vector_coeff(v) - c1 * a.vector_coeff(v) - c2 * b.vector_coeff(v)
                if normalize(resid) != 0:
                    raise SpanDecompositionError(
                        "vector field does not lie in the span of the pair"
                    )
            return c1, c2
    raise SpanDecompositionError("the pair is proportional; span is one-dimensional")
