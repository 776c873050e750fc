"""The classical cascade for strictly hyperbolic operators in the plane:
characteristic forms, the two invariants, the two transformations, chain
execution, and closed-form solution construction with verification.

Conventions.  A form stores the monic equation (the operator divided by
the product of the factor scales), its characteristic operators X1, X2
normalized to leading coefficient 1, both orderings of the lower-order
coefficients (sharing the zeroth one), and the commutation coefficients
P, Q with [X1, X2] = P*X1 + Q*X2.  Transformed invariants are always
recomputed from the constructed operator; the printed closed formulas are
only cross-checked in the test suite.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import sympy as sp
from sympy import S, Symbol

from .expr import (
    close_integrals,
    collect_linear,
    diff,
    function_symbol,
    instantiate_arbitrary,
    integrate_heuristic,
    is_zero,
    normalize,
    random_witnesses,
    InconclusiveZeroTest,
)
from .firstorder import solve_first_order
from .operators import (
    DegenerateFactorError,
    FirstOrderOperator,
    LinearOperator,
    NotFactorableError,
    SpanDecompositionError,
    UnsupportedOrderError,
    commutator,
    decompose_in_span,
    factor_symbol,
    principal_symbol,
)

__all__ = [
    "HyperbolicityError",
    "TransformUndefinedError",
    "NotTerminatedError",
    "UnsupportedCharacteristicsError",
    "LaplaceInvariants",
    "CharacteristicForm",
    "ChainLink",
    "ChainReport",
    "SolutionCertificate",
    "VerificationReport",
    "characteristic_form",
    "laplace_invariants",
    "partial_factorization_residuals",
    "x1_transform",
    "x2_transform",
    "transformed_h_formula",
    "gauge_transform",
    "run_chain",
    "build_solution",
    "verify_solution",
]


class HyperbolicityError(ValueError):
    """Symbol not factorable with distinct factors over the field."""


class TransformUndefinedError(ValueError):
    """Requested transformation needs a nonzero invariant."""


class NotTerminatedError(ValueError):
    """Chain did not terminate on any side within the budget."""


class UnsupportedCharacteristicsError(ValueError):
    """Characteristic operators outside the straightenable catalog."""


@dataclass(frozen=True)
class LaplaceInvariants:
    h: sp.Expr
    k: sp.Expr


@dataclass(frozen=True)
class CharacteristicForm:
    x1: FirstOrderOperator
    x2: FirstOrderOperator
    a1: sp.Expr
    a2: sp.Expr
    a3: sp.Expr
    ab1: sp.Expr
    ab2: sp.Expr
    p: sp.Expr
    q: sp.Expr
    scale: sp.Expr
    operator: LinearOperator  # the monic equation actually transformed
    source: LinearOperator


def characteristic_form(op: LinearOperator) -> CharacteristicForm:
    if op.order != 2:
        raise UnsupportedOrderError(f"characteristic form needs order 2, got {op.order}")
    try:
        f1, f2 = factor_symbol(principal_symbol(op))
    except (NotFactorableError, DegenerateFactorError) as exc:
        raise HyperbolicityError(str(exc)) from exc
    x1, g1 = f1.normalized()
    x2, g2 = f2.normalized()
    scale = normalize(g1 * g2)
    monic = op.scale(1 / scale)
    rem = monic - x1.to_linear().compose(x2.to_linear())
    if rem.order > 1:
        raise AssertionError("second-order part failed to cancel against X1 X2")
    n = len(op.variables)
    a3 = rem.coeff((0,) * n)
    rem_vec = FirstOrderOperator(
        op.variables,
        {v: rem.coeff(tuple(1 if w == v else 0 for w in op.variables)) for v in op.variables},
    )
    try:
        a1, a2 = decompose_in_span(rem_vec, (x1, x2))
        p, q = decompose_in_span(commutator(x1, x2), (x1, x2))
    except SpanDecompositionError as exc:
        raise HyperbolicityError(
            f"operator does not admit a characteristic form: {exc}"
        ) from exc
    ab1 = normalize(a1 + p)
    ab2 = normalize(a2 + q)
    form = CharacteristicForm(
        x1=x1, x2=x2, a1=normalize(a1), a2=normalize(a2), a3=normalize(a3),
        ab1=ab1, ab2=ab2, p=normalize(p), q=normalize(q),
        scale=scale, operator=monic, source=op,
    )
    for residual in _reconstruction_residuals(form):
        if not residual.is_zero_operator:
            raise AssertionError(f"characteristic form reconstruction failed: {residual}")
    return form


def _reconstruction_residuals(f: CharacteristicForm) -> tuple[LinearOperator, LinearOperator]:
    variables = f.operator.variables
    ident = LinearOperator.identity(variables)
    first = (
        f.x1.to_linear().compose(f.x2.to_linear())
        + f.a1 * f.x1.to_linear() + f.a2 * f.x2.to_linear() + f.a3 * ident
    )
    second = (
        f.x2.to_linear().compose(f.x1.to_linear())
        + f.ab1 * f.x1.to_linear() + f.ab2 * f.x2.to_linear() + f.a3 * ident
    )
    return f.operator - first, f.operator - second


def laplace_invariants(f: CharacteristicForm) -> LaplaceInvariants:
    h = normalize(f.x1.apply_derivation(f.a1) + f.a1 * f.a2 - f.a3)
    k = normalize(f.x2.apply_derivation(f.ab2) + f.ab1 * f.ab2 - f.a3)
    return LaplaceInvariants(h, k)


def partial_factorization_residuals(f: CharacteristicForm) -> tuple[LinearOperator, LinearOperator]:
    """L - [(X1+a2)(X2+a1) - h]  and  L - [(X2+ab1)(X1+ab2) - k], both zero."""
    inv = laplace_invariants(f)
    variables = f.operator.variables
    ident = LinearOperator.identity(variables)
    first = (
        f.x1.plus_scalar(f.a2).to_linear().compose(f.x2.plus_scalar(f.a1).to_linear())
        - inv.h * ident
    )
    second = (
        f.x2.plus_scalar(f.ab1).to_linear().compose(f.x1.plus_scalar(f.ab2).to_linear())
        - inv.k * ident
    )
    return f.operator - first, f.operator - second


def x1_transform(f: CharacteristicForm) -> CharacteristicForm:
    """Transformed equation annihilating v = (X2 + a1) u, via the first system."""
    inv = laplace_invariants(f)
    if is_zero(inv.h):
        raise TransformUndefinedError(
            "h = 0: the operator already factors; no transformation is defined"
        )
    left = f.x2.plus_scalar(f.a1 - f.x2.apply_derivation(inv.h) / inv.h)
    right = f.x1.plus_scalar(f.a2)
    op1 = left.to_linear().compose(right.to_linear()) - inv.h * LinearOperator.identity(
        f.operator.variables
    )
    out = characteristic_form(op1)
    if not is_zero(laplace_invariants(out).k - inv.h):
        raise AssertionError("transformed operator lost the k = h identity")
    if not (out.x1 == f.x1 and out.x2 == f.x2):
        raise AssertionError("transformation changed the characteristic operators")
    return out


def x2_transform(f: CharacteristicForm) -> CharacteristicForm:
    """Mirror transformation annihilating w = (X1 + ab2) u, via the second system."""
    inv = laplace_invariants(f)
    if is_zero(inv.k):
        raise TransformUndefinedError(
            "k = 0: the operator already factors; no transformation is defined"
        )
    left = f.x1.plus_scalar(f.ab2 - f.x1.apply_derivation(inv.k) / inv.k)
    right = f.x2.plus_scalar(f.ab1)
    op1 = left.to_linear().compose(right.to_linear()) - inv.k * LinearOperator.identity(
        f.operator.variables
    )
    out = characteristic_form(op1)
    if not is_zero(laplace_invariants(out).h - inv.k):
        raise AssertionError("transformed operator lost the h = k identity")
    return out


def transformed_h_formula(f: CharacteristicForm) -> sp.Expr:
    """The closed printed formula for the transformed h (first display line).

    Kept as a cross-check only; the authoritative value is recomputed from
    the constructed operator.
    """
    inv = laplace_invariants(f)
    lnh = sp.log(inv.h)
    return normalize(
        f.x1.apply_derivation(2 * f.a1 - f.p)
        - f.x2.apply_derivation(f.a2)
        - f.x1.apply_derivation(f.x2.apply_derivation(lnh))
        + f.q * f.x2.apply_derivation(lnh)
        - f.a3
        + (f.a1 - f.p) * (f.a2 - f.q)
    )


def gauge_transform(op: LinearOperator, lam) -> LinearOperator:
    """Conjugation u -> lam*u: the operator (1/lam) . L . lam."""
    lam = sp.sympify(lam)
    return op.compose(LinearOperator.from_scalar(op.variables, lam)).scale(1 / lam)


@dataclass(frozen=True)
class ChainLink:
    index: int
    form: CharacteristicForm
    invariants: LaplaceInvariants


@dataclass
class ChainReport:
    links: dict[int, ChainLink]
    h_zero_index: int | None  # N: first index >= 0 with h vanishing
    k_zero_index: int | None  # K: first index >= 0 with k of link(-K) vanishing
    max_steps: int
    source: LinearOperator

    @property
    def terminated(self) -> bool:
        return self.h_zero_index is not None or self.k_zero_index is not None

    @property
    def two_sided(self) -> bool:
        return self.h_zero_index is not None and self.k_zero_index is not None

    def link(self, index: int) -> ChainLink:
        return self.links[index]


def run_chain(op: LinearOperator, max_steps: int = 10) -> ChainReport:
    """Extend the chain in both directions until a zero invariant or budget."""
    seed = characteristic_form(op)
    links: dict[int, ChainLink] = {0: ChainLink(0, seed, laplace_invariants(seed))}

    h_zero = None
    form = seed
    for i in range(max_steps + 1):
        link = links[i]
        if is_zero(link.invariants.h):
            h_zero = i
            break
        if i == max_steps:
            break
        form = x1_transform(link.form)
        links[i + 1] = ChainLink(i + 1, form, laplace_invariants(form))

    k_zero = None
    for j in range(max_steps + 1):
        link = links[-j] if j else links[0]
        if is_zero(link.invariants.k):
            k_zero = j
            break
        if j == max_steps:
            break
        form = x2_transform(link.form)
        links[-(j + 1)] = ChainLink(-(j + 1), form, laplace_invariants(form))

    return ChainReport(links=links, h_zero_index=h_zero, k_zero_index=k_zero,
                       max_steps=max_steps, source=op)


@dataclass
class SolutionCertificate:
    solution: sp.Expr
    f_name: str
    g_name: str
    f_coefficients: list[tuple[int, sp.Expr]] | None
    g_coefficients: list[tuple[int, sp.Expr]] | None
    quadrature_free: bool
    provenance: dict


@dataclass
class VerificationReport:
    status: str  # "verified" | "failed" | "inconclusive"
    residual: sp.Expr
    detail: str = ""


def _is_coordinate_pair(f: CharacteristicForm) -> bool:
    variables = f.operator.variables
    if len(variables) != 2:
        return False
    dx = FirstOrderOperator.derivation(variables, variables[0])
    dy = FirstOrderOperator.derivation(variables, variables[1])
    return f.x1 == dx and f.x2 == dy


def build_solution(report: ChainReport, f_name: str = "F", g_name: str = "G") -> SolutionCertificate:
    """Closed-form general solution from a terminated chain.

    Two-sided termination gives the quadrature-free shape
    u = sum_i c_i F^(i)(x) + sum_j d_j G^(j)(y); one-sided termination keeps
    one free function inside a quadrature.  The end equation is solved from
    its factored (triangular) system and pushed back through the
    differential substitutions, level by level.
    """
    N, K = report.h_zero_index, report.k_zero_index
    if N is None and K is None:
        raise NotTerminatedError(
            f"chain did not terminate within {report.max_steps} steps on either side"
        )
    seed = report.links[0].form
    if not _is_coordinate_pair(seed):
        return _invariant_coordinates_solution(report, f_name, g_name)

    x, y = seed.operator.variables
    fcls = function_symbol(f_name, 1)
    gcls = function_symbol(g_name, 1)

    u_f = u_g = None
    if N is not None:
        end = report.links[N].form
        gy = integrate_heuristic(end.a1, y)
        v = sp.exp(-gy) * fcls(x) if gy != 0 else fcls(x)
        if K is None:
            # keep the full general solution of the factored end equation:
            # the second free function rides inside a quadrature
            gx = integrate_heuristic(end.a2, x)
            s = sp.exp(-gx) * gcls(y) if gx != 0 else gcls(y)
            quad = sp.Integral(normalize(sp.exp(gy) * s), y)
            v = v + (sp.exp(-gy) * quad if gy != 0 else quad)
        for i in range(N - 1, -1, -1):
            link = report.links[i]
            v = normalize((diff(v, x) + link.form.a2 * v) / link.invariants.h)
        u_f = v
    if K is not None:
        end = report.links[-K].form if K else report.links[0].form
        gx = integrate_heuristic(end.ab2, x)
        w = sp.exp(-gx) * gcls(y) if gx != 0 else gcls(y)
        if N is None:
            gy = integrate_heuristic(end.ab1, y)
            s = sp.exp(-gy) * fcls(x) if gy != 0 else fcls(x)
            quad = sp.Integral(normalize(sp.exp(gx) * s), x)
            w = w + (sp.exp(-gx) * quad if gx != 0 else quad)
        for j in range(K - 1, -1, -1):
            link = report.links[-j] if j else report.links[0]
            w = normalize((diff(w, y) + link.form.ab1 * w) / link.invariants.k)
        u_g = w

    f_coeffs = g_coeffs = None
    if u_f is not None and N is not None:
        u_f, f_coeffs = _normalize_side(u_f, fcls, x, N, quadrature_free=(K is not None))
    if u_g is not None and K is not None:
        u_g, g_coeffs = _normalize_side(u_g, gcls, y, K, quadrature_free=(N is not None))

    u = normalize((u_f if u_f is not None else S.Zero) + (u_g if u_g is not None else S.Zero))
    return SolutionCertificate(
        solution=u,
        f_name=f_name,
        g_name=g_name,
        f_coefficients=f_coeffs,
        g_coefficients=g_coeffs,
        quadrature_free=not u.has(sp.Integral),
        provenance={
            "method": "cascade",
            "h_zero_index": N,
            "k_zero_index": K,
            "operator": report.source,
        },
    )


def _normalize_side(u_part, cls, var, top_order, quadrature_free):
    """Collect coefficients of the derivative stack; scale the top one to 1
    when it is a nonzero rational constant."""
    gens = [function_symbol(cls.base_name, 1, (i,))(var) for i in range(top_order + 1)]
    if u_part.has(sp.Integral) and not quadrature_free:
        return u_part, None
    try:
        coeffs, rest = collect_linear(u_part, gens)
    except ValueError:
        return u_part, None
    if rest != 0 and not quadrature_free:
        return u_part, None
    top = coeffs.get(gens[-1], S.Zero)
    if top.is_Rational and top not in (S.Zero, S.One):
        u_part = normalize(u_part / top)
        coeffs = {g: normalize(c / top) for g, c in coeffs.items()}
    pairs = [(i, coeffs[g]) for i, g in enumerate(gens) if coeffs.get(g, S.Zero) != 0]
    return u_part, pairs


def _invariant_coordinates_solution(report, f_name, g_name) -> SolutionCertificate:
    """Non-coordinate characteristics: only the doubly factored case (both
    invariants zero, no lower-order obstruction) is straightened here."""
    N, K = report.h_zero_index, report.k_zero_index
    seed = report.links[0].form
    if not (N == 0 and K == 0 and is_zero(seed.a1) and is_zero(seed.ab2)):
        raise UnsupportedCharacteristicsError(
            "characteristic operators are not coordinate derivations; only the "
            "doubly factored case is straightened for general characteristics"
        )
    sol_f = solve_first_order(seed.x2, func_name=f_name)
    sol_g = solve_first_order(seed.x1, func_name=g_name)
    if not (sol_f.supported and sol_g.supported):
        raise UnsupportedCharacteristicsError(
            "characteristic operators are outside the straightenable catalog"
        )
    u = normalize(sol_f.general + sol_g.general)
    return SolutionCertificate(
        solution=u,
        f_name=f_name,
        g_name=g_name,
        f_coefficients=[(0, S.One)],
        g_coefficients=[(0, S.One)],
        quadrature_free=not u.has(sp.Integral),
        provenance={
            "method": "characteristic-invariants",
            "h_zero_index": N,
            "k_zero_index": K,
            "operator": report.source,
        },
    )


def verify_solution(op: LinearOperator, cert: SolutionCertificate, seed: int = 0) -> VerificationReport:
    """Certify apply(L, u) == 0, exactly.

    With quadrature nodes present, free functions are additionally
    instantiated with random polynomial witnesses (degree <= 3) so all
    quadratures close, and the residual is re-checked exactly.
    """
    residual = op.apply(cert.solution)
    try:
        ok = is_zero(residual, seed)
    except InconclusiveZeroTest as exc:
        return VerificationReport("inconclusive", residual, str(exc))
    if not ok:
        return VerificationReport("failed", residual, "nonzero residual")
    detail = "symbolic residual is zero"
    if cert.solution.has(sp.Integral):
        rng = random.Random(seed)
        witnesses = random_witnesses(cert.solution, rng, degree=3)
        inst = close_integrals(instantiate_arbitrary(cert.solution, witnesses))
        if inst.has(sp.Integral):
            return VerificationReport(
                "inconclusive", residual, "witness quadratures failed to close"
            )
        wres = op.apply(inst)
        try:
            wok = is_zero(wres, seed)
        except InconclusiveZeroTest as exc:
            return VerificationReport("inconclusive", wres, str(exc))
        if not wok:
            return VerificationReport("failed", wres, "witness residual nonzero")
        detail += "; polynomial-witness quadrature check passed"
    return VerificationReport("verified", S.Zero, detail)
