"""Heuristic solver for first-order linear equations  W(u) = rhs.

Catalog: coordinate fields (single derivation, any coefficient), fields
with a complete set of polynomial invariants found by linear ansatz, and
(optionally) rational invariants built from quotients of semi-invariants
of affine fields.  Outside the catalog the equation is reported as
unsupported together with its characteristic ODE system, which is the
honest certificate of what remains to be solved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import sympy as sp
from sympy import S, Symbol

from .expr import (
    function_symbol,
    integrate_heuristic,
    is_zero,
    monomials,
    normalize,
)
from .operators import FirstOrderOperator

__all__ = ["FirstOrderSolution", "solve_first_order"]


@dataclass
class FirstOrderSolution:
    """Outcome of the heuristic: either a general solution or 'unsupported'."""

    status: str  # "solved" | "unsupported"
    general: sp.Expr | None = None
    particular: sp.Expr | None = None
    invariants: tuple[sp.Expr, ...] = ()
    arbitrary: type | None = None
    reduced_ode: str | None = None

    @property
    def supported(self) -> bool:
        return self.status == "solved"


def solve_first_order(
    w: FirstOrderOperator,
    rhs=S.Zero,
    *,
    func_name: str = "F",
    invariant_degree: int = 3,
    rational_invariants: bool = False,
) -> FirstOrderSolution:
    rhs = normalize(rhs)
    variables = w.variables
    b0 = w.scalar

    if not w.vector:
        if b0 == 0:
            raise ValueError("zero operator has no solution theory")
        return FirstOrderSolution("solved", general=normalize(rhs / b0), particular=normalize(rhs / b0))

    support = [v for v in variables if v in w.vector]

    if len(support) == 1:
        tau = support[0]
        invariants = tuple(v for v in variables if v != tau)
        return _assemble_coordinate(w, rhs, tau, invariants, func_name)

    invariants = _polynomial_invariants(w, invariant_degree)
    if len(invariants) < len(variables) - 1 and rational_invariants:
        invariants = _extend_with_semi_invariants(w, invariants)
    if len(invariants) < len(variables) - 1:
        return _unsupported(w)

    if rhs == 0 and b0 == 0:
        arb = function_symbol(func_name, len(invariants))
        return FirstOrderSolution(
            "solved", general=arb(*invariants), particular=S.Zero,
            invariants=invariants, arbitrary=arb,
        )
    return _assemble_rectified(w, rhs, invariants, func_name)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _assemble_coordinate(w, rhs, tau, invariants, func_name) -> FirstOrderSolution:
    c = w.vector[tau]
    g = integrate_heuristic(w.scalar / c, tau)
    arb = function_symbol(func_name, max(len(invariants), 1))
    args = invariants if invariants else (tau,)  # 1-variable edge case
    weight = sp.exp(-g) if g != 0 else S.One
    particular = S.Zero
    if rhs != 0:
        particular = normalize(weight * integrate_heuristic(sp.exp(g) * rhs / c, tau))
    general = normalize(particular + weight * arb(*args))
    if not is_zero(w.apply(general) - rhs):
        return _unsupported(w)
    return FirstOrderSolution(
        "solved", general=general, particular=particular,
        invariants=tuple(invariants), arbitrary=arb,
    )


def _assemble_rectified(w, rhs, invariants, func_name) -> FirstOrderSolution:
    """Straighten the field through a transversal variable with constant speed."""
    variables = w.variables
    for tau in variables:
        c = normalize(w.vector_coeff(tau))
        if c == 0 or not c.is_Rational:
            continue
        others = [v for v in variables if v != tau]
        s_syms = [Symbol(f"_s{i}") for i in range(len(invariants))]
        eqs = [inv - s for inv, s in zip(invariants, s_syms)]
        try:
            sols = sp.solve(eqs, others, dict=True)
        except Exception:
            continue
        if len(sols) != 1:
            continue
        sub = {v: sols[0][v] for v in others if v in sols[0]}
        if len(sub) != len(others):
            continue
        b0t = normalize(w.scalar.subs(sub, simultaneous=True))
        rhst = normalize(rhs.subs(sub, simultaneous=True))
        g = integrate_heuristic(b0t / c, tau)
        if g.has(sp.Integral):
            continue
        particular_t = S.Zero
        if rhst != 0:
            particular_t = integrate_heuristic(sp.exp(g) * rhst / c, tau)
            if particular_t.has(sp.Integral):
                continue
        arb = function_symbol(func_name, len(invariants))
        weight = sp.exp(-g) if g != 0 else S.One
        back = dict(zip(s_syms, invariants))
        general_t = weight * (particular_t + arb(*s_syms))
        general = normalize(general_t.subs(back, simultaneous=True))
        if not is_zero(w.apply(general) - rhs):
            continue
        particular = normalize((weight * particular_t).subs(back, simultaneous=True))
        return FirstOrderSolution(
            "solved", general=general, particular=particular,
            invariants=tuple(invariants), arbitrary=arb,
        )
    # no rectification: homogeneous case may still close via a polynomial ansatz
    if rhs == 0:
        g = _gauge_ansatz(w)
        if g is not None:
            arb = function_symbol(func_name, len(invariants))
            general = normalize(sp.exp(-g) * arb(*invariants))
            if is_zero(w.apply(general)):
                return FirstOrderSolution(
                    "solved", general=general, particular=S.Zero,
                    invariants=tuple(invariants), arbitrary=arb,
                )
    return _unsupported(w)


def _unsupported(w: FirstOrderOperator) -> FirstOrderSolution:
    variables = w.variables
    bs = [w.vector_coeff(v) for v in variables]
    if len(variables) == 2:
        ode = f"d{variables[1]}/d{variables[0]} = ({bs[1]})/({bs[0]})"
    else:
        ode = " = ".join(f"d{v}/({b})" for v, b in zip(variables, bs))
    return FirstOrderSolution("unsupported", reduced_ode=ode)


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------

def _cleared_vector(w: FirstOrderOperator) -> dict:
    """Vector field with denominators cleared (same characteristics)."""
    dens = [sp.fraction(sp.cancel(c))[1] for c in w.vector.values()]
    common = S.One
    for d in dens:
        common = sp.lcm(common, d)
    return {v: normalize(c * common) for v, c in w.vector.items()}


def _polynomial_invariants(w: FirstOrderOperator, max_degree: int) -> tuple[sp.Expr, ...]:
    variables = w.variables
    needed = len(variables) - 1
    vec = _cleared_vector(w)
    if any(not c.is_polynomial(*variables) for c in vec.values()):
        return ()
    found: list[sp.Expr] = []
    for degree in range(1, max_degree + 1):
        mons = monomials(variables, degree)
        images = [sp.Add(*[c * sp.diff(m, v) for v, c in vec.items()]) for m in mons]
        image_polys = [sp.Poly(img, *variables) for img in images]
        basis = sorted({m for p in image_polys for m in p.as_dict()})
        mat = sp.Matrix(
            [[p.as_dict().get(bm, S.Zero) for p in image_polys] for bm in basis]
            or [[S.Zero] * len(mons)]
        )
        for vecn in mat.nullspace():
            cand = _primitive(sp.Add(*[c * m for c, m in zip(vecn, mons)]), variables)
            if cand == 0:
                continue
            if _independent(found + [cand], variables):
                found.append(cand)
                if len(found) == needed:
                    return tuple(found)
    return tuple(found)


def _primitive(p: sp.Expr, variables) -> sp.Expr:
    """Clear rational content; fix sign by the leading coefficient."""
    p = sp.expand(p)
    if p == 0:
        return p
    poly = sp.Poly(p, *variables)
    _, prim = poly.primitive()
    if prim.LC() < 0:
        prim = -prim
    return prim.as_expr()


def _independent(invs, variables) -> bool:
    jac = sp.Matrix([[sp.diff(i, v) for v in variables] for i in invs])
    k = len(invs)
    if k > len(variables):
        return False
    for cols in _combinations(len(variables), k):
        minor = jac[:, list(cols)].det()
        if normalize(minor) != 0:
            return True
    return False


def _combinations(n, k):
    import itertools

    return itertools.combinations(range(n), k)


def _extend_with_semi_invariants(w: FirstOrderOperator, found) -> tuple[sp.Expr, ...]:
    """Quotients of same-eigenvalue semi-invariant affine forms (affine fields)."""
    variables = w.variables
    vec = _cleared_vector(w)
    if any(sp.total_degree(sp.Poly(c, *variables)) > 1 for c in vec.values()):
        return tuple(found)
    basis = [S.One] + list(variables)

    def apply_field(e):
        return sp.expand(sp.Add(*[c * sp.diff(e, v) for v, c in vec.items()]))

    mat = sp.zeros(len(basis), len(basis))
    for j, m in enumerate(basis):
        img = apply_field(m)
        poly = sp.Poly(img, *variables) if img != 0 else None
        for i, bm in enumerate(basis):
            if poly is None:
                continue
            if bm == 1:
                mat[i, j] = img.subs({v: 0 for v in variables})
            else:
                mat[i, j] = sp.expand(img).coeff(bm)
    found = list(found)
    eigen = mat.eigenvects()
    for lam, _, vects in eigen:
        if not lam.is_Rational or lam == 0:
            continue
        forms = []
        for vv in vects:
            form = sp.expand(sp.Add(*[c * m for c, m in zip(vv, basis)]))
            if form != 0:
                forms.append(form)
        for i in range(len(forms)):
            for j in range(len(forms)):
                if i == j:
                    continue
                cand = sp.cancel(forms[i] / forms[j])
                if cand.free_symbols and _independent(found + [cand], variables):
                    found.append(cand)
                    if len(found) == len(variables) - 1:
                        return tuple(found)
    return tuple(found)


def _gauge_ansatz(w: FirstOrderOperator, max_degree: int = 3):
    """Polynomial g with  X(g) = b0, so exp(-g) gauges the zeroth part away."""
    variables = w.variables
    b0 = w.scalar
    mons = monomials(variables, max_degree, include_const=False)
    coeffs = [Symbol(f"_g{i}") for i in range(len(mons))]
    g = sp.Add(*[c * m for c, m in zip(coeffs, mons)])
    resid = sp.together(w.apply_derivation(g) - b0)
    num = sp.expand(sp.fraction(resid)[0])
    eqs = [e for e in _poly_equations(num, variables) if e != 0]
    if not eqs:
        sol = [{}]
    else:
        try:
            sol = sp.solve(eqs, coeffs, dict=True)
        except Exception:
            return None
    if not sol:
        return None
    assignment = {c: sol[0].get(c, S.Zero) for c in coeffs}
    g = normalize(g.subs(assignment))
    if normalize(w.apply_derivation(g) - b0) != 0:
        return None
    return g


def _poly_equations(num: sp.Expr, variables) -> list[sp.Expr]:
    """Coefficient equations of a polynomial identity num == 0 in `variables`."""
    try:
        poly = sp.Poly(num, *variables)
    except sp.PolynomialError:
        return [num]
    return list(poly.coeffs())
