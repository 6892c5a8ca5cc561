"""Hamiltonian normal forms by Lie transforms, and the resonant scaling pipeline.

The homological operator of a quadratic part ``H2`` is ``A S = {H2, S}``.  At
each degree the homogeneous part ``P`` splits as ``N - A S = P`` with ``N`` in
the kernel of the adjoint ``A*`` for the Fischer product ``<x^a, x^b> = a! d_ab``,
so the new degree-``l`` term after the Lie transform ``exp(ad_S)`` is ``N``.

For the double-zero / elliptic resonance ``H2 = p1^2/2 + (w0/2)(q2^2 + p2^2)``
the normal form only depends on ``(q1, q2^2 + p2^2)``.  The scaling step turns
it into the three-parameter model

    H = -q1 p1 + (c3 / 2^(3/2)) (q1 + p1)^3 + (w / 2 eps^2) I2
        + nu Q((q1 + p1) / sqrt 2, I2) + mu nu eps^N0 R(x)

in the Jordan chart where ``q1`` is the stable and ``p1`` the unstable direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq

from .integrators import ConvergenceError, gauss_step
from .poly_core import (
    CANONICAL,
    CanonicalMap,
    ContractError,
    PolySeries,
    compose_many,
    evaluate_many,
    get_basis,
    majorant,
    phase_variables,
    poisson_bracket,
    SparseEvaluator,
)

SQRT2 = math.sqrt(2.0)
DEFAULT_C3 = 2.0 * SQRT2


class DegenerateHypothesisError(ContractError):
    """A nondegeneracy coefficient vanishes."""


class WrongHalfError(ContractError):
    """The parameter lies on the side of the bifurcation without saddle-centres."""


class SingularSystemError(RuntimeError):
    """Homological system inconsistent beyond tolerance."""


class RadiusTooLargeError(RuntimeError):
    """Picard iteration for a Lie flow does not contract at the requested point."""


# ---------------------------------------------------------------------------------------
# quadratic parts and homological equations
# ---------------------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticPart:
    """Quadratic Hamiltonian ``H2`` with its linear vector field ``L0 x = J grad H2``."""

    H2: PolySeries
    L0: np.ndarray

    @classmethod
    def from_series(cls, H2: PolySeries) -> "QuadraticPart":
        H2 = H2.homogeneous_part(2)
        hess = hessian_matrix(H2)
        return cls(H2, CANONICAL.matrix @ hess)

    @property
    def key(self) -> tuple:
        return tuple((e, float(v) if not isinstance(v, Fraction) else v) for e, v in self.H2.terms.items())


def hessian_matrix(H2: PolySeries) -> np.ndarray:
    """Symmetric matrix B with ``H2 = x^T B x / 2``."""
    B = np.zeros((H2.nvars, H2.nvars))
    for e, v in H2.homogeneous_part(2).terms.items():
        idx = [i for i, k in enumerate(e) for _ in range(k)]
        i, j = idx
        if i == j:
            B[i, i] += 2 * float(v)
        else:
            B[i, j] += float(v)
            B[j, i] += float(v)
    return B


def quadratic_from_matrix(B: np.ndarray, max_degree: int, dtype=float) -> PolySeries:
    x = phase_variables(max_degree, dtype=dtype)
    out = PolySeries.zero(4, max_degree, dtype=dtype)
    for i in range(4):
        for j in range(4):
            if B[i, j] != 0:
                out = out + (x[i] * x[j]) * (B[i, j] / 2)
    return out


def resonant_quadratic(omega0, max_degree: int = 2, exact: bool = False) -> QuadraticPart:
    """``p1^2/2 + (omega0/2)(q2^2 + p2^2)``: nilpotent block plus elliptic pair."""
    half = Fraction(1, 2) if exact else 0.5
    w = Fraction(omega0) if exact else float(omega0)
    H2 = PolySeries.from_terms(
        {(0, 0, 2, 0): half, (0, 2, 0, 0): w * half, (0, 0, 0, 2): w * half},
        4, max_degree, dtype=object if exact else float,
    )
    return QuadraticPart.from_series(H2)


def elliptic_quadratic(omegas: Sequence[float], max_degree: int = 2) -> QuadraticPart:
    """Sum of two harmonic oscillators with frequencies ``omegas``."""
    w1, w2 = omegas
    H2 = PolySeries.from_terms(
        {(2, 0, 0, 0): w1 / 2, (0, 0, 2, 0): w1 / 2, (0, 2, 0, 0): w2 / 2, (0, 0, 0, 2): w2 / 2},
        4, max_degree,
    )
    return QuadraticPart.from_series(H2)


def _operator_matrix(H2: PolySeries, degree: int, exact: bool):
    """Matrix of ``S -> {H2, S}`` on the degree-``degree`` monomial block."""
    basis = get_basis(4, degree)
    sl = basis.slices[degree]
    n = sl.stop - sl.start
    H2d = H2.with_max_degree(degree)
    cols = []
    for k in range(n):
        e = tuple(int(v) for v in basis.exps[sl.start + k])
        mono = PolySeries.from_terms({e: Fraction(1) if exact else 1.0}, 4, degree, dtype=object if exact else float)
        cols.append(poisson_bracket(H2d, mono).coeffs[sl])
    if exact:
        return [[cols[j][i] for j in range(n)] for i in range(n)], basis, sl
    return np.array(cols, dtype=float).T, basis, sl


@lru_cache(maxsize=64)
def _float_solver(h2_key: tuple, degree: int):
    H2 = PolySeries.from_terms(dict(h2_key), 4, 2)
    A, basis, sl = _operator_matrix(H2, degree, exact=False)
    d = np.sqrt(basis.factorials[sl])
    Ahat = d[:, None] * A / d[None, :]
    U, sig, Vt = np.linalg.svd(Ahat)
    if sig.size == 0 or sig[0] == 0:
        rank = 0
    else:
        rank = int(np.sum(sig > 1e-10 * sig[0]))
    return A, d, U[:, :rank], sig[:rank], Vt[:rank].T


def homological_matrix(Q: QuadraticPart, degree: int) -> np.ndarray:
    """Matrix of the homological operator on one homogeneous block (float)."""
    return _float_solver(Q.key, degree)[0]


def homological_decompose(P: PolySeries, Q: QuadraticPart, mode: str = "float", tol: float = 1e-9):
    """Split a homogeneous ``P`` as ``N - {H2, S} = P`` with ``N`` in ker of the adjoint.

    ``N`` is the Fischer-orthogonal projection of ``P`` on the kernel of the
    adjoint operator; ``S`` is the minimum-norm solution, hence orthogonal to
    the kernel of the operator.
    """
    degree = P.support_degree()
    if degree < 0:
        return P, PolySeries.zero(4, P.max_degree, dtype=P.dtype)
    if not P.is_homogeneous(degree) or degree < 2:
        raise ContractError("homological_decompose needs a homogeneous series of degree >= 2")
    if mode == "rational" or P.exact:
        return _decompose_exact(P, Q, degree)
    A, d, Ur, sr, Vr = _float_solver(Q.key, degree)
    sl = P.basis.slices[degree]
    p = np.real_if_close(P.coeffs[sl])
    phat = d * p
    rng_part = Ur @ (Ur.T @ phat)
    nhat = phat - rng_part
    shat = -(Vr @ ((Ur.T @ phat) / sr))
    n_blk = nhat / d
    s_blk = shat / d
    resid = n_blk - A @ s_blk - p
    scale = max(1.0, float(np.max(np.abs(p))))
    if np.max(np.abs(resid)) > tol * scale:
        raise SingularSystemError(f"homological residual {np.max(np.abs(resid)):.3e} at degree {degree}")
    cN = np.zeros(P.basis.size, dtype=n_blk.dtype)
    cS = np.zeros(P.basis.size, dtype=s_blk.dtype)
    cN[sl] = n_blk
    cS[sl] = s_blk
    return PolySeries(cN, P.basis), PolySeries(cS, P.basis)


def homological_decompose_perturbed(P: PolySeries, Q: QuadraticPart, H2_full: PolySeries):
    """Normal-form split of ``P`` when the quadratic part is ``H2_full = Q.H2 + (kernel terms)``.

    Finds ``S`` in the solution space of the unperturbed operator with
    ``N = P + {H2_full, S}`` in the normal-form space of ``Q``, by one square
    linear solve.  Reduces to :func:`homological_decompose` when ``H2_full = Q.H2``.
    """
    degree = P.support_degree()
    if degree < 0:
        return P, PolySeries.zero(4, P.max_degree, dtype=P.dtype)
    A0, d, Ur, sr, Vr = _float_solver(Q.key, degree)
    A1, _, sl = _operator_matrix(H2_full.homogeneous_part(2).astype(float), degree, exact=False)
    A1hat = d[:, None] * A1 / d[None, :]
    phat = d * np.real_if_close(P.coeffs[sl])
    c = np.linalg.solve(Ur.T @ A1hat @ Vr, -(Ur.T @ phat))
    s_blk = (Vr @ c) / d
    n_blk = P.coeffs[sl] + A1 @ s_blk
    cN = np.zeros(P.basis.size)
    cS = np.zeros(P.basis.size)
    cN[sl] = n_blk
    cS[sl] = s_blk
    return PolySeries(cN, P.basis), PolySeries(cS, P.basis)


def _decompose_exact(P: PolySeries, Q: QuadraticPart, degree: int):
    import sympy

    H2 = Q.H2.astype(object) if not Q.H2.exact else Q.H2
    rows, basis, sl = _operator_matrix(H2, degree, exact=True)
    A = sympy.Matrix([[sympy.Rational(v.numerator, v.denominator) for v in r] for r in rows])
    w = [sympy.Integer(int(f)) for f in basis.factorials[sl]]
    W = sympy.diag(*w)
    Winv = sympy.diag(*[1 / v for v in w])
    Pexact = P.astype(object)
    p = sympy.Matrix([sympy.Rational(v.numerator, v.denominator) for v in Pexact.coeffs[sl]])
    # N = P - A z with A^T W (P - A z) = 0
    M1 = A.T * W * A
    z, params = M1.gauss_jordan_solve(A.T * W * p)
    z = z.subs({s: 0 for s in params})
    nvec = p - A * z
    # S = W^-1 A^T u with A W^-1 A^T u = N - P
    M2 = A * Winv * A.T
    u, params = M2.gauss_jordan_solve(nvec - p)
    u = u.subs({s: 0 for s in params})
    svec = Winv * A.T * u
    if any(v != 0 for v in (nvec - A * svec - p)):
        raise SingularSystemError("exact homological solve is inconsistent")
    cN = np.array([Fraction(0)] * P.basis.size, dtype=object)
    cS = np.array([Fraction(0)] * P.basis.size, dtype=object)
    for k in range(sl.stop - sl.start):
        cN[sl.start + k] = Fraction(int(sympy.fraction(nvec[k])[0]), int(sympy.fraction(nvec[k])[1]))
        cS[sl.start + k] = Fraction(int(sympy.fraction(svec[k])[0]), int(sympy.fraction(svec[k])[1]))
    return PolySeries(cN, P.basis), PolySeries(cS, P.basis)


def adjoint_invariant_residual(N: PolySeries, Q: QuadraticPart) -> float:
    """Max coefficient of ``{H2 o (-J), N}``; zero exactly for a normal form."""
    Jm = CANONICAL.matrix
    x = phase_variables(max(N.max_degree, 2), dtype=object if N.exact else float)
    if N.exact:
        Jint = [[int(v) for v in row] for row in (-Jm)]
        subs = [sum((x[j] * Jint[i][j] for j in range(4) if Jint[i][j] != 0), PolySeries.zero(4, max(N.max_degree, 2), dtype=object)) for i in range(4)]
        H2 = Q.H2 if Q.H2.exact else Q.H2.astype(object)
    else:
        subs = [sum((x[j] * (-Jm[i, j]) for j in range(4) if Jm[i, j] != 0), PolySeries.zero(4, max(N.max_degree, 2))) for i in range(4)]
        H2 = Q.H2
    H2J = H2.with_max_degree(max(N.max_degree, 2)).compose(subs)
    return poisson_bracket(H2J, N.with_max_degree(max(N.max_degree, 2))).norm()


# ---------------------------------------------------------------------------------------
# Lie transforms
# ---------------------------------------------------------------------------------------


def lie_operator(G: PolySeries, S: PolySeries, max_terms: int = 200) -> PolySeries:
    """``G o phi_S`` as the series ``sum_k ad_S^k G / k!`` with ``ad_S G = {G, S}``."""
    out = G
    term = G
    exact = G.exact or S.exact
    for k in range(1, max_terms):
        term = poisson_bracket(term, S)
        term = term / k
        if term.norm() == 0:
            return out
        out = out + term
        if not exact and term.norm() < 1e-17 * max(1.0, out.norm()):
            return out
    if exact:
        raise ContractError("Lie series did not terminate; use a generator of degree >= 3")
    return out


def _gradient_field(S: PolySeries):
    grads = S.gradient()
    Jm = CANONICAL.matrix

    def f(_t, x):
        g = np.stack(evaluate_many(grads, x), axis=-1)
        return g @ Jm.T

    return f, grads


def _lipschitz_bound(grads: list[PolySeries], radius: float) -> float:
    total = 0.0
    pt = np.full(4, radius)
    for g in grads:
        for v in range(4):
            total += float(majorant(g.derivative(v))(pt))
    return total


def lie_transform_flow(S: PolySeries, x, t: float = 1.0, stages: int = 4, tol: float = 1e-13,
                       max_substeps: int = 4096) -> np.ndarray:
    """Time-``t`` Hamiltonian flow of ``S`` (``x' = J grad S``) at one or many points.

    Gauss collocation with Picard-iterated stages; the step count follows from
    a majorant bound of the Lipschitz constant, and doubles on non-contraction.
    """
    x = np.asarray(x)
    if S.norm() == 0 or t == 0:
        return x.copy()
    if S.exact:
        S = S.astype(float)
    f, grads = _gradient_field(S)
    radius = float(np.max(np.abs(x))) if x.size else 0.0
    lip = _lipschitz_bound(grads, 2 * radius + 1e-300)
    n = max(1, int(np.ceil(abs(t) * lip / 0.05)))
    while n <= max_substeps:
        h = t / n
        y = x.astype(np.result_type(x.dtype, float))
        try:
            for k in range(n):
                y = gauss_step(f, k * h, y, h, stages=stages, tol=tol)
                if not np.all(np.isfinite(y)):
                    raise ConvergenceError("non-finite state")
            return y
        except (ConvergenceError, FloatingPointError):
            n *= 2
    raise RadiusTooLargeError(f"Lie flow does not contract at radius {radius:.3e}")


# ---------------------------------------------------------------------------------------
# the normal-form pipeline
# ---------------------------------------------------------------------------------------


@dataclass
class NormalFormResult:
    """Output of :func:`normal_form_pipeline`.

    ``N`` is the normal-form tail (degrees 2..n) beyond ``quadratic.H2``;
    ``generators`` lists the Lie generators in the order applied;
    ``transform`` maps new coordinates to old ones.
    """

    N: PolySeries
    S_list: list[PolySeries]
    transform: CanonicalMap
    remainder_degree: int
    quadratic: QuadraticPart
    linear: np.ndarray
    transformed: PolySeries
    residuals: dict = field(default_factory=dict)

    @property
    def degree(self) -> int:
        return self.remainder_degree - 1

    @property
    def remainder(self) -> PolySeries:
        """Terms of the transformed Hamiltonian above the normalised degree."""
        return self.transformed - self.transformed.truncate(self.degree)


def normal_form_pipeline(
    H: PolySeries,
    n: int,
    quadratic: QuadraticPart | None = None,
    mode: str = "float",
    work_degree: int | None = None,
    max_sweeps: int = 60,
    tol: float = 1e-14,
) -> NormalFormResult:
    """Normalise ``H`` through degree ``n`` around the quadratic part ``quadratic``.

    The quadratic part of ``H`` may differ from ``quadratic.H2`` (parameter
    dependent terms); it is normalised first by linear symplectic changes.
    Series are carried to ``work_degree`` (default ``n + 2``) so the remainder
    above degree ``n`` is reported.
    """
    if n < 2:
        raise ContractError("normalisation degree must be at least 2")
    exact = mode == "rational"
    work = max(work_degree or n + 2, n + 1)
    if exact:
        H = H.astype(object)
    H = H.with_max_degree(work)
    if H.coefficient((0, 0, 0, 0)) != 0 or any(H.coefficient(e) != 0 for e in np.eye(4, dtype=int)):
        raise ContractError("H must vanish to second order at the origin")
    if quadratic is None:
        quadratic = QuadraticPart.from_series(H.homogeneous_part(2))
    H20 = quadratic.H2.with_max_degree(work)
    if exact:
        H20 = H20.astype(object)
    x = phase_variables(work, dtype=object if exact else float)
    comps = list(x)
    M = np.eye(4)
    residuals: dict = {}

    # degree 2: linear symplectic corrections until H2 - H20 lies in the kernel of the adjoint
    P2 = H.homogeneous_part(2) - H20.homogeneous_part(2)
    if P2.norm() > 0:
        if exact:
            N2, S2 = homological_decompose(P2, quadratic, mode="rational")
            if (P2 - N2).norm() != 0:
                raise ContractError("exact mode cannot normalise parameter-dependent quadratic terms")
        else:
            for _ in range(max_sweeps):
                P2 = H.homogeneous_part(2) - H20.homogeneous_part(2)
                N2, S2 = homological_decompose(P2, quadratic)
                if S2.norm() < tol:
                    break
                E = expm(CANONICAL.matrix @ hessian_matrix(S2))
                subs = [sum((x[j] * E[i, j] for j in range(4) if E[i, j] != 0), PolySeries.zero(4, work))
                        for i in range(4)]
                H = H.compose(subs)
                comps = [c.compose(subs) for c in comps]
                M = M @ E
            else:
                raise SingularSystemError("quadratic normalisation did not converge")
    generators: list[PolySeries] = []
    # parameter-dependent quadratic terms left in the kernel perturb the operator
    perturbed = not exact and (H.homogeneous_part(2) - H20.homogeneous_part(2)).norm() > 0
    for ell in range(3, n + 1):
        for sweep in range(max_sweeps):
            P = H.homogeneous_part(ell)
            if perturbed:
                N_l, S_l = homological_decompose_perturbed(P, quadratic, H.homogeneous_part(2))
            else:
                N_l, S_l = homological_decompose(P, quadratic, mode=mode)
            if S_l.norm() == 0 or (not exact and S_l.norm() < tol):
                break
            generators.append(S_l)
            H = lie_operator(H, S_l)
            comps = [lie_operator(c, S_l) for c in comps]
            if exact:
                break
        else:
            raise SingularSystemError(f"degree {ell} normalisation did not converge")
    N = H.truncate(n) - H20
    residuals["adjoint_invariance"] = adjoint_invariant_residual(N, quadratic)
    residuals["degree_n_plus_1"] = H.homogeneous_part(n + 1).norm()
    float_gens = [g.astype(float) if g.exact else g for g in generators]
    M_fixed = M.copy()

    def pointwise(y):
        y = np.asarray(y)
        for g in reversed(float_gens):
            y = lie_transform_flow(g, y)
        return y @ M_fixed.T

    transform = CanonicalMap(comps, pointwise=pointwise, label="lie-composition")
    return NormalFormResult(N=N, S_list=generators, transform=transform, remainder_degree=n + 1,
                            quadratic=quadratic, linear=M, transformed=H, residuals=residuals)


def rotational_symmetrize_check(N: PolySeries, quadratic: QuadraticPart, n_samples: int = 8,
                                seed: int = 0, tol: float = 1e-10) -> bool:
    """True iff ``N`` is invariant under the flow of the adjoint linear field.

    Both the bracket criterion and sampled invariance ``N(exp(t L0^T) x) = N(x)``
    are required.
    """
    if N.norm() == 0:
        return True
    scale = max(1.0, N.norm())
    if adjoint_invariant_residual(N, quadratic) > tol * scale:
        return False
    rng = np.random.default_rng(seed)
    Nf = N.astype(float) if N.exact else N
    pts = rng.normal(size=(n_samples, 4)) * 0.5
    base = Nf(pts)
    for t in rng.uniform(-2, 2, size=4):
        E = expm(t * quadratic.L0.T)
        if np.max(np.abs(Nf(pts @ E.T) - base)) > tol * scale * 10:
            return False
    return True


# ---------------------------------------------------------------------------------------
# the resonant family: configuration, scaling and the three-parameter model
# ---------------------------------------------------------------------------------------


@dataclass
class ModelConfig:
    """Coefficients of the unfolding ``H_lambda`` around the resonance.

    ``H_lambda = p1^2/2 + (omega0/2) I2 - (c10 lambda / 2) q1^2 + c20 q1^3 + extra``
    where each extra term is ``{"exponents": [q1, q2, p1, p2], "coefficient": c,
    "lambda_power": k}`` contributing ``c lambda^k x^exponents``.
    """

    omega0: float = 1.0
    c10: float = 1.0
    c20: float = 1.0
    extra_coefficients: list = field(default_factory=list)
    n: int = 5
    N0: int = 5
    rho0: float | None = None
    mode: str = "float"
    c3: float = DEFAULT_C3
    remainder_degree: int | None = None

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known - {"k0"}
        if unknown:
            raise ContractError(f"unknown model keys: {sorted(unknown)}")
        kw = {k: v for k, v in data.items() if k in known}
        if "k0" in data:
            k0 = int(data["k0"])
            kw.setdefault("n", 2 * k0 + 3)
            kw.setdefault("N0", 4 * k0 + 1)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.c10 == 0:
            raise DegenerateHypothesisError("c10 = 0: the parameter does not unfold the resonance")
        if self.c20 == 0:
            raise DegenerateHypothesisError("c20 = 0: degenerate cubic coefficient")
        if self.omega0 == 0:
            raise DegenerateHypothesisError("omega0 = 0: no elliptic pair")
        if self.n < 3 or self.N0 < 1:
            raise ContractError("need n >= 3 and N0 >= 1")
        if self.mode not in ("float", "rational"):
            raise ContractError("mode must be 'float' or 'rational'")
        for term in self.extra_coefficients:
            e = term.get("exponents")
            if e is None or len(e) != 4 or sum(e) < 2:
                raise ContractError(f"bad extra term {term!r}")
            if sum(e) == 2 and int(term.get("lambda_power", 0)) == 0:
                raise ContractError("quadratic extra terms must carry a positive lambda power")


def original_hamiltonian(cfg: ModelConfig, lam: float, max_degree: int | None = None) -> PolySeries:
    """The unfolding ``H_lambda`` as a series in ``(q1, q2, p1, p2)``."""
    exact = cfg.mode == "rational"
    deg = max_degree or max(4, max((sum(t["exponents"]) for t in cfg.extra_coefficients), default=3))

    def num(v):
        return Fraction(str(v)) if exact else float(v)

    lam_v = num(lam)
    terms: dict = {}

    def add(e, v):
        terms[e] = terms.get(e, 0) + v

    add((0, 0, 2, 0), num(0.5))
    add((0, 2, 0, 0), num(cfg.omega0) * num(0.5))
    add((0, 0, 0, 2), num(cfg.omega0) * num(0.5))
    add((2, 0, 0, 0), -num(cfg.c10) * lam_v * num(0.5))
    add((3, 0, 0, 0), num(cfg.c20))
    for t in cfg.extra_coefficients:
        k = int(t.get("lambda_power", 0))
        add(tuple(int(v) for v in t["exponents"]), num(t["coefficient"]) * lam_v**k)
    return PolySeries.from_terms(terms, 4, deg, dtype=object if exact else float)


def normal_form_for(cfg: ModelConfig, lam: float, n: int | None = None, work_degree: int | None = None) -> NormalFormResult:
    n = n or cfg.n
    H = original_hamiltonian(cfg, lam)
    quad = resonant_quadratic(cfg.omega0, exact=cfg.mode == "rational")
    return normal_form_pipeline(H, n, quadratic=quad, mode=cfg.mode,
                                work_degree=work_degree or cfg.remainder_degree or n + 2)


def action_coefficients(N_full: PolySeries, tol: float = 1e-9) -> dict[tuple[int, int], float]:
    """Read a normal form as ``sum a_jk q1^j I2^k``; raises if other monomials survive."""
    coeffs: dict[tuple[int, int], float] = {}
    for e, v in N_full.terms.items():
        if e[2] == 0 and e[3] == 0 and e[1] % 2 == 0:
            j, k = e[0], e[1] // 2
            coeffs[(j, k)] = float(v)
    x = phase_variables(N_full.max_degree)
    I2 = x[1] * x[1] + x[3] * x[3]
    rebuilt = PolySeries.zero(4, N_full.max_degree)
    for (j, k), v in coeffs.items():
        rebuilt = rebuilt + (x[0] ** j) * (I2**k) * v
    resid = N_full.astype(float) - rebuilt if N_full.exact else N_full - rebuilt
    p1_part = {e: v for e, v in N_full.terms.items() if e[2] > 0}
    if resid.norm() > tol * max(1.0, N_full.norm()):
        raise ContractError(f"normal form is not a function of (q1, I2): residual {resid.norm():.3e}, "
                            f"{len(p1_part)} p1 terms")
    return coeffs


@dataclass
class ScaledModel:
    """Rescaled normal form in the underlined chart.

    ``H' = (p^2 - q^2)/2 + c3 q^3 + (omega/2 eps^2) I2 + eps^2 Q(q, I2) + eps^(4n-8) R(x)``
    with ``Q`` stored as a two-variable series in ``(q, I2)`` and ``R`` as a
    four-variable series in the underlined coordinates ``(q, q2, p, p2)``.
    """

    eps: float
    lam: float
    omega: float
    c2: float
    c3: float
    scale_a: float
    N_poly: PolySeries
    remainder: PolySeries
    cutoff_radius: float
    n: int
    coefficients: dict = field(default_factory=dict)

    @property
    def rotation_rate(self) -> float:
        """Angular speed of the elliptic block: ``omega / eps^2``."""
        return self.omega / self.eps**2


def homoclinic_radius(c3: float) -> float:
    """Largest distance to the origin along the cubic homoclinic loop."""
    from .dynamics import analytic_homoclinic

    t = np.linspace(-12, 12, 4001)
    q, p = analytic_homoclinic(t, c3)
    return float(np.max(np.hypot(q, p)))


def default_cutoff_radius(c3: float) -> float:
    return 2.5 * homoclinic_radius(c3)


def scale_and_reparametrize(nf: NormalFormResult, lam: float, c3: float = DEFAULT_C3,
                            rho0: float | None = None) -> ScaledModel:
    """Rescale the normal form computed at parameter ``lam``.

    With ``eps^4 = c1(lam)`` (the negative of twice the ``q1^2`` coefficient) and
    the scaling ``q1 = a eps^4 q, p1 = a eps^6 p, (q2, p2) = a eps^5 (.)``, time
    ``eps^2 t`` and energy divided by ``a^2 eps^12``, the cubic coefficient
    becomes ``c2 a``; ``a = c3 / c2`` makes it ``c3``.
    """
    if lam == 0:
        raise ContractError("lambda = 0 gives eps = 0: the scaling divides by eps")
    full = nf.quadratic.H2.with_max_degree(nf.N.max_degree) + nf.N
    full = full.astype(float) if full.exact else full
    kinetic = float(full.coefficient((0, 0, 2, 0)))
    if abs(kinetic - 0.5) > 1e-12:
        raise ContractError(f"kinetic coefficient {kinetic} differs from 1/2")
    full = full - PolySeries.from_terms({(0, 0, 2, 0): kinetic}, 4, full.max_degree)
    coeffs = action_coefficients(full)
    c1 = -2.0 * coeffs.get((2, 0), 0.0)
    omega = 2.0 * coeffs.get((0, 1), 0.0)
    c2 = coeffs.get((3, 0), 0.0)
    if c2 == 0:
        raise DegenerateHypothesisError("the cubic normal-form coefficient vanishes")
    if c1 <= 0:
        raise WrongHalfError(f"c1(lambda) = {c1:.3e} <= 0: no saddle-centre on this side")
    eps = c1**0.25
    a = c3 / c2
    n = nf.degree
    skeleton = {(2, 0), (0, 1), (3, 0)}
    q_terms = {}
    for (j, k), v in coeffs.items():
        if (j, k) in skeleton or (j, k) == (0, 0):
            continue
        power = 2 * (2 * j + 5 * k - 6) - 2
        if power < 0:
            raise ContractError(f"normal-form term q^{j} I^{k} is not small after scaling")
        q_terms[(j, k)] = v * a ** (j + 2 * k - 2) * eps**power
    N_poly = PolySeries.from_terms(q_terms, 2, n) if q_terms else PolySeries.zero(2, n)
    rem = nf.remainder.astype(float) if nf.remainder.exact else nf.remainder
    r_terms = {}
    for e, v in rem.terms.items():
        d = sum(e)
        power = 2 * (2 * e[0] + 3 * e[2]) + 5 * (e[1] + e[3]) - 12 - (4 * n - 8)
        r_terms[e] = float(v) * a ** (d - 2) * eps**power
    R = PolySeries.from_terms(r_terms, 4, rem.max_degree) if r_terms else PolySeries.zero(4, rem.max_degree)
    return ScaledModel(eps=eps, lam=lam, omega=omega, c2=c2, c3=c3, scale_a=a, N_poly=N_poly,
                       remainder=R, cutoff_radius=rho0 or default_cutoff_radius(c3), n=n,
                       coefficients={"c1": c1, **{f"a_{j}{k}": v for (j, k), v in coeffs.items()}})


def epsilon_of_lambda(cfg: ModelConfig, lam: float) -> float:
    """``c1(lambda)^(1/4)`` read from the normalised quadratic part."""
    nf = normal_form_for(cfg, lam, n=3, work_degree=3)
    full = nf.quadratic.H2.with_max_degree(3) + nf.N
    c1 = -2.0 * float(full.coefficient((2, 0, 0, 0)))
    if c1 <= 0:
        raise WrongHalfError(f"c1(lambda) = {c1:.3e} <= 0")
    return c1**0.25


def lambda_for_epsilon(cfg: ModelConfig, eps: float) -> float:
    """Invert ``eps^4 = c1(lambda)`` near ``lambda = eps^4 / c10``."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    if cfg.c10 == 0:
        raise DegenerateHypothesisError("c10 = 0")
    float_cfg = ModelConfig(**{**cfg.__dict__, "mode": "float"})

    def g(lam):
        nf = normal_form_for(float_cfg, lam, n=3, work_degree=3)
        full = nf.quadratic.H2.with_max_degree(3) + nf.N
        return -2.0 * float(full.coefficient((2, 0, 0, 0))) - eps**4

    guess = eps**4 / cfg.c10
    lo, hi = guess * 0.5, guess * 1.5
    for _ in range(20):
        if g(lo) * g(hi) < 0:
            break
        lo, hi = lo * 0.5, hi * 1.5
    return brentq(g, lo, hi, xtol=1e-15, rtol=1e-14)


def scaled_model_for_epsilon(cfg: ModelConfig, eps: float) -> ScaledModel:
    lam = lambda_for_epsilon(cfg, eps)
    float_cfg = ModelConfig(**{**cfg.__dict__, "mode": "float"})
    nf = normal_form_for(float_cfg, lam)
    return scale_and_reparametrize(nf, lam, c3=cfg.c3, rho0=cfg.rho0)


# ---------------------------------------------------------------------------------------
# the model Hamiltonian with cutoff
# ---------------------------------------------------------------------------------------


def _glue(x):
    out = np.zeros_like(x, dtype=float)
    pos = x > 0
    out[pos] = np.exp(-1.0 / x[pos])
    return out


def cutoff(r, rho0: float):
    """Smooth bump: 1 for ``|r| <= rho0^2/4``, 0 for ``|r| >= rho0^2``; returns (T, dT/dr)."""
    r = np.asarray(r, dtype=float)
    lo, hi = rho0**2 / 4, rho0**2
    s = np.clip((np.abs(r) - lo) / (hi - lo), 0.0, 1.0)
    g1, g0 = _glue(1 - s), _glue(s)
    den = g1 + g0
    T = g1 / den
    with np.errstate(divide="ignore", invalid="ignore"):
        dg1 = np.where(1 - s > 0, g1 / (1 - s) ** 2, 0.0)
        dg0 = np.where(s > 0, g0 / s**2, 0.0)
    dT_ds = (-dg1 * g0 - g1 * dg0) / den**2
    inside = (s > 0) & (s < 1)
    dT = np.where(inside, dT_ds * np.sign(r) / (hi - lo), 0.0)
    return T, dT


class HamiltonianModel:
    """``H(x) = T(q1^2) T(p1^2) T(I2) * [poly(x)]`` for the three-parameter family.

    The polynomial is

        -q1 p1 + c3 (q1 + p1)^3 / 2^(3/2) + (omega / 2 eps^2) I2
        + nu_hat Q((q1 + p1)/sqrt 2, I2) + mu nu_hat eps^N0 R(x).
    """

    def __init__(self, eps: float, nu_hat: float, mu: float, N0: int, omega: float,
                 c3: float = DEFAULT_C3, Q: PolySeries | None = None, R: PolySeries | None = None,
                 rho0: float | None = None, max_degree: int | None = None):
        if eps <= 0:
            raise ContractError("eps must be positive")
        self.eps = float(eps)
        self.nu_hat = float(nu_hat)
        self.mu = float(mu)
        self.N0 = int(N0)
        self.omega = float(omega)
        self.c3 = float(c3)
        self.Q = Q if Q is not None else PolySeries.zero(2, 3)
        self.R = R if R is not None else PolySeries.zero(4, 3)
        self.rho0 = float(rho0) if rho0 is not None else default_cutoff_radius(c3)
        deg = max_degree or max(3, 2 * self.Q.max_degree, self.R.max_degree)
        self.degree = deg
        self._build(deg)

    @property
    def Omega(self) -> float:
        """Rotation rate ``omega / eps^2`` of the elliptic block."""
        return self.omega / self.eps**2

    @property
    def params(self) -> tuple[float, float, float]:
        return (self.eps, self.nu_hat, self.mu)

    def with_params(self, nu_hat: float | None = None, mu: float | None = None) -> "HamiltonianModel":
        return HamiltonianModel(self.eps, self.nu_hat if nu_hat is None else nu_hat,
                                self.mu if mu is None else mu, self.N0, self.omega, self.c3,
                                self.Q, self.R, self.rho0, self.degree)

    def _build(self, deg: int) -> None:
        q1, q2, p1, p2 = phase_variables(deg)
        s = (q1 + p1) * (1 / SQRT2)
        I2 = q2 * q2 + p2 * p2
        skel = -(q1 * p1) + (s**3) * self.c3
        Qx = self.Q.with_max_degree(deg).compose([s, I2]) if self.Q.norm() > 0 else PolySeries.zero(4, deg)
        Rx = self.R.with_max_degree(deg)
        self.r_scale = self.mu * self.nu_hat * self.eps**self.N0
        rest = skel + Qx * self.nu_hat + Rx * self.r_scale
        self.rest_poly = rest
        self.rotation_poly = I2 * (self.Omega / 2)
        self.poly = rest + self.rotation_poly
        self._q_eval = SparseEvaluator(self.Q) if self.nu_hat != 0 and self.Q.norm() > 0 else None
        self._r_eval = SparseEvaluator(self.R) if self.r_scale != 0 and self.R.norm() > 0 else None

    def _rest(self, x):
        """Value and gradient of the polynomial without the rotation term, before the cutoff."""
        q1, q2, p1, p2 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        s = (q1 + p1) / SQRT2
        val = -q1 * p1 + self.c3 * s**3
        ds = 3 * self.c3 * s**2
        dI = np.zeros_like(s)
        if self._q_eval is not None:
            I2 = q2 * q2 + p2 * p2
            qv, qg = self._q_eval.value_and_gradient(np.stack([s, I2], axis=-1))
            val = val + self.nu_hat * qv
            ds = ds + self.nu_hat * qg[..., 0]
            dI = dI + self.nu_hat * qg[..., 1]
        g = np.stack([-p1 + ds / SQRT2, 2 * q2 * dI, -q1 + ds / SQRT2, 2 * p2 * dI], axis=-1)
        if self._r_eval is not None:
            rv, rg = self._r_eval.value_and_gradient(x)
            val = val + self.r_scale * rv
            g = g + self.r_scale * rg
        return val, g

    # evaluation with the cutoff ---------------------------------------------------------
    def _cut(self, x):
        flat = self.rho0**2 / 4
        if max(np.max(np.abs(x[..., 0])), np.max(np.abs(x[..., 2]))) ** 2 <= flat and \
                np.max(x[..., 1] ** 2 + x[..., 3] ** 2) <= flat:
            return np.ones(x.shape[:-1]), np.zeros(x.shape)
        T1, d1 = cutoff(x[..., 0] ** 2, self.rho0)
        T2, d2 = cutoff(x[..., 2] ** 2, self.rho0)
        I2 = x[..., 1] ** 2 + x[..., 3] ** 2
        T3, d3 = cutoff(I2, self.rho0)
        T = T1 * T2 * T3
        dT = np.stack([d1 * T2 * T3 * 2 * x[..., 0], T1 * T2 * d3 * 2 * x[..., 1],
                       T1 * d2 * T3 * 2 * x[..., 2], T1 * T2 * d3 * 2 * x[..., 3]], axis=-1)
        return T, dT

    def energy(self, x, cut: bool = True) -> np.ndarray:
        x = np.asarray(x)
        if np.iscomplexobj(x):
            return self.poly(x)
        val = self._rest(x)[0] + (self.Omega / 2) * (x[..., 1] ** 2 + x[..., 3] ** 2)
        if not cut:
            return val
        T, _ = self._cut(x)
        return T * val

    def gradient(self, x, rest: bool = False) -> np.ndarray:
        """Gradient of ``H`` (or of ``H - (Omega/2) I2`` when ``rest``) with the cutoff."""
        x = np.asarray(x)
        if np.iscomplexobj(x):
            return np.stack(evaluate_many((self.rest_poly if rest else self.poly).gradient(), x), axis=-1)
        val, g = self._rest(x)
        rot = np.zeros_like(g)
        rot[..., 1] = self.Omega * x[..., 1]
        rot[..., 3] = self.Omega * x[..., 3]
        T, dT = self._cut(x)
        if np.all(T == 1.0):
            return g if rest else g + rot
        full_val = val + (self.Omega / 2) * (x[..., 1] ** 2 + x[..., 3] ** 2)
        out = T[..., None] * (g + rot) + full_val[..., None] * dT
        return out - rot if rest else out

    def vector_field(self, x, rest: bool = False) -> np.ndarray:
        return self.gradient(x, rest=rest) @ CANONICAL.matrix.T

    def I2(self, x) -> np.ndarray:
        x = np.asarray(x)
        return x[..., 1] ** 2 + x[..., 3] ** 2

    def describe(self) -> dict:
        return {"eps": self.eps, "nu_hat": self.nu_hat, "mu": self.mu, "N0": self.N0,
                "omega": self.omega, "c3": self.c3, "rho0": self.rho0, "Omega": self.Omega}


def three_parameter_model(scaled: ScaledModel, nu_hat: float, mu: float, N0: int) -> HamiltonianModel:
    """The model ``H(x, eps, nu_hat, mu)`` in the Jordan chart.

    ``nu_hat = 0`` is the cubic normal form, ``mu = 0`` the degree-n normal form,
    and ``(eps^2, eps^(4n-8-N0-2))`` the full truncated system.
    """
    if N0 < 1 or scaled.n < 3:
        raise ContractError("need N0 >= 1 and n >= 3")
    R = jordan_chart(scaled.remainder)
    return HamiltonianModel(scaled.eps, nu_hat, mu, N0, scaled.omega, scaled.c3, scaled.N_poly, R,
                            scaled.cutoff_radius, max_degree=max(3, 2 * scaled.N_poly.max_degree, R.max_degree))


def full_system_parameters(scaled: ScaledModel, N0: int) -> tuple[float, float]:
    """``(nu_hat, mu)`` reproducing the complete truncated system."""
    eps = scaled.eps
    return eps**2, eps ** (4 * scaled.n - 8 - (N0 + 2))


def jordan_chart(R_under: PolySeries) -> PolySeries:
    """Pull back a series from the underlined chart to the Jordan chart."""
    q1, q2, p1, p2 = phase_variables(R_under.max_degree)
    subs = [(q1 + p1) * (1 / SQRT2), q2, (p1 - q1) * (1 / SQRT2), p2]
    return R_under.compose(subs)


def underline_from_jordan(x: np.ndarray) -> np.ndarray:
    """``(q1, q2, p1, p2)`` -> underlined ``(q, q2, p, p2)``."""
    x = np.asarray(x)
    out = x.copy()
    out[..., 0] = (x[..., 0] + x[..., 2]) / SQRT2
    out[..., 2] = (x[..., 2] - x[..., 0]) / SQRT2
    return out


def jordan_from_underline(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    out = y.copy()
    out[..., 0] = (y[..., 0] - y[..., 2]) / SQRT2
    out[..., 2] = (y[..., 0] + y[..., 2]) / SQRT2
    return out
