"""Local canonical normalisation near the saddle-centre.

Around the origin of the model Hamiltonian

    H = -q1 p1 + (Omega / 2)(q2^2 + p2^2) + higher order

we build a real canonical chart ``F`` with ``H(F(xi, eta)) = K(xi1 eta1, xi2^2 + eta2^2)``.

Construction (all inside the graded algebra):

1. complexify the elliptic pair with ``P = [[1, i], [i, 1]] / sqrt 2`` so the
   quadratic part is ``a x1 y1 + b x2 y2`` with ``a = -1`` and ``b = -i Omega``;
2. solve for a generating function ``W(x, eta) = x . eta + W'`` degree by degree:
   ``H(x, d_x W) = K(d_eta W * eta)``; the operator ``a D1 + b D2`` is diagonal on
   monomials with eigenvalue ``a (m1 - n1) + b (m2 - n2)``;
3. invert the implicit map by series reversion;
4. compose with an action-dependent torus reparametrisation fixed by the
   uniqueness criterion (Q);
5. conjugate back by ``P`` and read ``K`` in ``(xi1 eta1, xi2^2 + eta2^2)``.

Variables of local charts are ordered ``(xi1, xi2, eta1, eta2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .birkhoff_nf import HamiltonianModel
from .poly_core import (
    CANONICAL,
    CanonicalMap,
    ContractError,
    PolySeries,
    compose_many,
    diagonal_bracket,
    evaluate_many,
    get_basis,
    majorant,
)

SQRT2 = math.sqrt(2.0)
# complex coordinates X = P x on the elliptic pair (indices 1 and 3)
P_BLOCK = np.array([[1.0, 1j], [1j, 1.0]]) / SQRT2
P_INV_BLOCK = np.array([[1.0, -1j], [-1j, 1.0]]) / SQRT2


class RealnessError(RuntimeError):
    """The realified chart keeps imaginary coefficients above tolerance."""


class ImplicitSolveError(RuntimeError):
    """Pointwise inversion of the generating-function map did not converge."""


# ---------------------------------------------------------------------------------------
# complexification
# ---------------------------------------------------------------------------------------


def _pair_substitution(block: np.ndarray, max_degree: int) -> list[PolySeries]:
    """Series for ``u -> M u`` acting on the pair (1, 3) and the identity elsewhere."""
    v = [PolySeries.variable(i, 4, max_degree, dtype=complex) for i in range(4)]
    return [v[0], v[1] * block[0, 0] + v[3] * block[0, 1], v[2], v[1] * block[1, 0] + v[3] * block[1, 1]]


def complexify(H: PolySeries) -> PolySeries:
    """``H(P^-1 X)``: the Hamiltonian in complex coordinates ``X = P x``."""
    return H.astype(complex).compose(_pair_substitution(P_INV_BLOCK, H.max_degree))


def realify(Hc: PolySeries, tol: float = 1e-12) -> PolySeries:
    """Inverse of :func:`complexify`; returns a real series or raises on imaginary residue."""
    out = Hc.astype(complex).compose(_pair_substitution(P_BLOCK, Hc.max_degree))
    return _to_real(out, tol)


def _to_real(f: PolySeries, tol: float) -> PolySeries:
    scale = max(1.0, float(np.max(np.abs(f.coeffs)))) if f.coeffs.size else 1.0
    im = float(np.max(np.abs(np.imag(f.coeffs)))) if f.coeffs.size else 0.0
    if im > tol * scale:
        raise RealnessError(f"imaginary residue {im:.3e}")
    return PolySeries(np.real(f.coeffs).astype(float).copy(), f.basis)


def apply_pair(block: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    out = x.astype(complex).copy()
    out[..., 1] = block[0, 0] * x[..., 1] + block[0, 1] * x[..., 3]
    out[..., 3] = block[1, 0] * x[..., 1] + block[1, 1] * x[..., 3]
    return out


def diagonal_rates(Hc: PolySeries, tol: float = 1e-12) -> tuple[complex, complex]:
    """``(a, b)`` with quadratic part ``a x1 y1 + b x2 y2``; raises on any other quadratic term."""
    q = Hc.homogeneous_part(2)
    a = complex(q.coefficient((1, 0, 1, 0)))
    b = complex(q.coefficient((0, 1, 0, 1)))
    rest = q - PolySeries.from_terms({(1, 0, 1, 0): a, (0, 1, 0, 1): b}, 4, q.max_degree, dtype=complex)
    if rest.norm() > tol * max(1.0, abs(a), abs(b)):
        raise ContractError("quadratic part is not of the form a x1 y1 + b x2 y2")
    if abs(a.imag) > tol or abs(a) == 0 or abs(b.real) > tol * max(1.0, abs(b)) or abs(b) == 0:
        raise ContractError("need a real nonzero and b purely imaginary nonzero")
    return a, b


# ---------------------------------------------------------------------------------------
# generating function
# ---------------------------------------------------------------------------------------


@dataclass
class GeneratingFunction:
    """``W(x1, x2, eta1, eta2) = x1 eta1 + x2 eta2 + W'``; ``W`` holds the full series."""

    W: PolySeries
    max_degree: int

    @property
    def tail(self) -> PolySeries:
        return self.W - self.W.homogeneous_part(2)


def _w_substitution(K: PolySeries, W: PolySeries) -> list[PolySeries]:
    """``(d_eta1 W * eta1, d_eta2 W * eta2)`` as series in (x, eta)."""
    return [W.derivative(2).mul_variable(2), W.derivative(3).mul_variable(3)]


def _generating_residual(Hc: PolySeries, K: PolySeries, W: PolySeries) -> PolySeries:
    """``H(x, d_x W) - K(d_eta W * eta)`` in the mixed variables."""
    d = W.max_degree
    x1, x2 = (PolySeries.variable(i, 4, d, dtype=complex) for i in (0, 1))
    lhs = Hc.with_max_degree(d).compose([x1, x2, W.derivative(0), W.derivative(1)])
    rhs = K.with_max_degree(d).compose(_w_substitution(K, W)) if K.norm() > 0 else PolySeries.zero(4, d, dtype=complex)
    return lhs - rhs


def solve_generating_function(Hc: PolySeries, max_degree: int) -> tuple[GeneratingFunction, PolySeries]:
    """Solve ``H(x, d_x W) = K(d_eta W * eta)`` through degree ``max_degree`` of ``W``.

    Returns ``(W, K)`` with ``K`` a series in ``(w1, w2) = (xi1 eta1, xi2 eta2)``.
    """
    if max_degree < 2:
        raise ContractError("max_degree must be at least 2")
    a, b = diagonal_rates(Hc)
    kdeg = max_degree // 2
    W = PolySeries.from_terms({(1, 0, 1, 0): 1.0, (0, 1, 0, 1): 1.0}, 4, max_degree, dtype=complex)
    K = PolySeries.from_terms({(1, 0): a, (0, 1): b}, 2, max(kdeg, 1), dtype=complex)
    basis = get_basis(4, max_degree)
    exps = basis.exps
    eig = a * (exps[:, 0] - exps[:, 2]) + b * (exps[:, 1] - exps[:, 3])
    resonant = (exps[:, 0] == exps[:, 2]) & (exps[:, 1] == exps[:, 3])
    for N in range(3, max_degree + 1):
        Wn = W.with_max_degree(N)
        Kn = K.with_max_degree(N // 2)
        E = _generating_residual(Hc, Kn, Wn).homogeneous_part(N)
        sl = basis.slices[N]
        e = np.zeros(basis.size, dtype=complex)
        e[sl] = E.with_max_degree(max_degree).coeffs[sl]
        res = np.zeros(basis.size, dtype=bool)
        res[sl] = resonant[sl]
        if np.any(res):
            kc = K.coeffs.copy()
            kb = K.basis
            for i in np.nonzero(res)[0]:
                m = (int(exps[i, 0]), int(exps[i, 1]))
                kc[kb.index[m]] += e[i]
            K = PolySeries(kc, kb)
        nonres = np.zeros(basis.size, dtype=bool)
        nonres[sl] = ~resonant[sl]
        if np.any(nonres & (eig == 0)):
            raise AssertionError("zero eigenvalue on a non-resonant monomial")
        wc = W.coeffs.copy()
        wc[nonres] -= e[nonres] / eig[nonres]
        W = PolySeries(wc, basis)
    return GeneratingFunction(W, max_degree), K


def generating_residual(Hc: PolySeries, gf: GeneratingFunction, K: PolySeries) -> PolySeries:
    """Full residual of the generating equation; zero through ``gf.max_degree``."""
    return _generating_residual(Hc, K, gf.W)


# ---------------------------------------------------------------------------------------
# series reversion and pointwise evaluation of the implicit map
# ---------------------------------------------------------------------------------------


def implicit_map_series(gf: GeneratingFunction, degree: int | None = None) -> list[PolySeries]:
    """Components ``(x1, x2, y1, y2)`` as series in ``(xi, eta)`` by reversion of
    ``x = xi - d_eta W'(x, eta)``, ``y = eta + d_x W'(x, eta)``."""
    d = degree or gf.max_degree - 1
    Wt = gf.tail.with_max_degree(d + 1)
    dx = [Wt.derivative(0), Wt.derivative(1)]
    de = [Wt.derivative(2), Wt.derivative(3)]
    v = [PolySeries.variable(i, 4, d, dtype=complex) for i in range(4)]
    X = [v[0], v[1]]
    for _ in range(d):
        subs = [X[0], X[1], v[2], v[3]]
        dvals = compose_many([s.with_max_degree(d) for s in de], subs)
        X_new = [v[0] - dvals[0], v[1] - dvals[1]]
        if all((xn - xo).norm() == 0 for xn, xo in zip(X_new, X)):
            break
        X = X_new
    subs = [X[0], X[1], v[2], v[3]]
    yvals = compose_many([s.with_max_degree(d) for s in dx], subs)
    return [X[0], X[1], v[2] + yvals[0], v[3] + yvals[1]]


def invert_series_map(components: Sequence[PolySeries]) -> list[PolySeries]:
    """Compositional inverse of a near-identity map ``id + N`` by fixed-point reversion."""
    d = components[0].max_degree
    dtype = np.result_type(*[c.dtype for c in components])
    v = [PolySeries.variable(i, 4, d, dtype=dtype) for i in range(4)]
    lin = [c.homogeneous_part(1) for c in components]
    for i in range(4):
        if (lin[i] - v[i]).norm() > 1e-12:
            raise ContractError("map is not tangent to the identity")
    Nl = [c - c.truncate(1) for c in components]
    G = list(v)
    for _ in range(d):
        vals = compose_many(Nl, G)
        G_new = [v[i] - vals[i] for i in range(4)]
        if all((gn - go).norm() == 0 for gn, go in zip(G_new, G)):
            break
        G = G_new
    return G


class _ImplicitEvaluator:
    """Pointwise map ``(xi, eta) -> (x, y)`` and its inverse from the generating function."""

    def __init__(self, gf: GeneratingFunction, tol: float = 1e-15, max_iter: int = 400):
        Wt = gf.tail
        self.dx = [Wt.derivative(0), Wt.derivative(1)]
        self.de = [Wt.derivative(2), Wt.derivative(3)]
        self.tol = tol
        self.max_iter = max_iter

    def _mixed(self, x, eta):
        return np.stack([x[..., 0], x[..., 1], eta[..., 0], eta[..., 1]], axis=-1)

    def forward(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        xi, eta = z[..., :2], z[..., 2:]
        x = xi.copy()
        for _ in range(self.max_iter):
            m = self._mixed(x, eta)
            corr = np.stack(evaluate_many(self.de, m), axis=-1)
            x_new = xi - corr
            if np.max(np.abs(x_new - x), initial=0.0) <= self.tol * (1 + np.max(np.abs(z), initial=0.0)):
                x = x_new
                break
            x = x_new
        else:
            raise ImplicitSolveError("implicit map iteration did not converge")
        m = self._mixed(x, eta)
        y = eta + np.stack(evaluate_many(self.dx, m), axis=-1)
        return np.concatenate([x, y], axis=-1)

    def backward(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=complex)
        x, y = w[..., :2], w[..., 2:]
        eta = y.copy()
        for _ in range(self.max_iter):
            m = self._mixed(x, eta)
            corr = np.stack(evaluate_many(self.dx, m), axis=-1)
            eta_new = y - corr
            if np.max(np.abs(eta_new - eta), initial=0.0) <= self.tol * (1 + np.max(np.abs(w), initial=0.0)):
                eta = eta_new
                break
            eta = eta_new
        else:
            raise ImplicitSolveError("inverse implicit map iteration did not converge")
        m = self._mixed(x, eta)
        xi = x + np.stack(evaluate_many(self.de, m), axis=-1)
        return np.concatenate([xi, eta], axis=-1)


# ---------------------------------------------------------------------------------------
# the uniqueness criterion
# ---------------------------------------------------------------------------------------


def series_exp(f: PolySeries) -> PolySeries:
    """``exp(f)`` truncated at ``f.max_degree``."""
    c0 = complex(f.coefficient((0,) * f.nvars))
    g = f - PolySeries.constant(c0, f.nvars, f.max_degree, dtype=f.dtype)
    out = PolySeries.constant(1.0, f.nvars, f.max_degree, dtype=f.dtype)
    term = out
    for k in range(1, f.max_degree + 1):
        term = term * g / k
        if term.norm() == 0:
            break
        out = out + term
    return out * np.exp(c0)


def _brackets(comps: Sequence[PolySeries]) -> list[PolySeries]:
    """``[phi1/xi1], [phi2/xi2], [psi1/eta1], [psi2/eta2]``."""
    offs = [(1, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0), (0, 0, 0, 1)]
    return [diagonal_bracket(c, offset=o) for c, o in zip(comps, offs)]


def criterion_Q_residual(comps: Sequence[PolySeries]) -> PolySeries:
    """``w1([phi1/xi1] - [psi1/eta1]) + i w2([phi2/xi2] - [psi2/eta2])`` as a series in (w1, w2)."""
    A1, A2, B1, B2 = _brackets(comps)
    d = max(A1.max_degree, A2.max_degree, B1.max_degree, B2.max_degree)
    A1, A2, B1, B2 = (s.with_max_degree(d).astype(complex) for s in (A1, A2, B1, B2))
    return (A1 - B1).mul_variable(0) + (A2 - B2).mul_variable(1) * 1j


def torus_reparametrization(S: PolySeries, degree: int) -> list[PolySeries]:
    """Components of ``Phi = (e^{S1} xi1, e^{S2} xi2, e^{-S1} eta1, e^{-S2} eta2)``, ``S_i = d_wi S``.

    ``Phi`` is the time-one flow of ``S(xi1 eta1, xi2 eta2)`` and preserves both products.
    """
    v = [PolySeries.variable(i, 4, degree, dtype=complex) for i in range(4)]
    w = [v[0] * v[2], v[1] * v[3]]
    Si = [S.derivative(0), S.derivative(1)]
    Ei = [series_exp(s) for s in Si]
    Fi = [series_exp(-s) for s in Si]
    up = [e.with_max_degree(degree).compose(w) if e.max_degree <= degree else e.compose(w) for e in Ei]
    dn = [e.with_max_degree(degree).compose(w) for e in Fi]
    up = [u.with_max_degree(degree) for u in up]
    return [up[0] * v[0], up[1] * v[1], dn[0] * v[2], dn[1] * v[3]]


def solve_criterion_Q(comps: Sequence[PolySeries], max_iter: int = 60, tol: float = 1e-15) -> PolySeries:
    """``S(w1, w2)`` with ``S(0, 0) = 0`` making ``F o Phi_S`` satisfy criterion (Q)."""
    A1, A2, B1, B2 = [s.astype(complex) for s in _brackets(comps)]
    d = A1.max_degree + 1
    A1, A2, B1, B2 = (s.with_max_degree(d) for s in (A1, A2, B1, B2))
    b2 = get_basis(2, d)
    eig = 2.0 * (b2.exps[:, 0] + 1j * b2.exps[:, 1])
    scale = max(float(np.max(np.abs(s.coeffs))) for s in (A1, A2, B1, B2))

    def residual(S):
        S1, S2 = S.derivative(0), S.derivative(1)
        return ((series_exp(S1) * A1 - series_exp(-S1) * B1).mul_variable(0)
                + (series_exp(S2) * A2 - series_exp(-S2) * B2).mul_variable(1) * 1j)

    # each sweep fixes one more degree of S
    S = PolySeries.zero(2, d, dtype=complex)
    nz = eig != 0
    for _ in range(min(max_iter, d + 2)):
        G = residual(S)
        step = np.zeros(b2.size, dtype=complex)
        step[nz] = G.coeffs[nz] / eig[nz]
        S = S - PolySeries(step, b2)
    G = residual(S)
    if np.max(np.abs(G.coeffs)) > 1e-9 * scale:
        raise ContractError(f"criterion (Q) iteration did not converge: {np.max(np.abs(G.coeffs)):.3e}")
    return S


def series_log1p(f: PolySeries) -> PolySeries:
    """``log(1 + f)`` for ``f(0) = 0``, truncated at ``f.max_degree``."""
    out = PolySeries.zero(f.nvars, f.max_degree, dtype=f.dtype)
    term = PolySeries.constant(1.0, f.nvars, f.max_degree, dtype=f.dtype)
    for k in range(1, f.max_degree + 1):
        term = term * f
        if term.norm() == 0:
            break
        out = out + term * ((-1) ** (k + 1) / k)
    return out


@dataclass
class DiagonalScaling:
    """``Phi(z)_j = z_j exp(c_j(w))`` with ``w = (xi1 eta1, xi2 eta2)``.

    ``w_map`` is the induced map on products, ``w -> (w1 e^(c1+c3), w2 e^(c2+c4))``.
    Unlike the torus reparametrisation it need not be symplectic.
    """

    c: list
    w_map: list

    def components(self, degree: int) -> list[PolySeries]:
        v = [PolySeries.variable(i, 4, degree, dtype=complex) for i in range(4)]
        w = [v[0] * v[2], v[1] * v[3]]
        return [series_exp(cj.with_max_degree(degree)).compose(w).with_max_degree(degree) * v[j]
                for j, cj in enumerate(self.c)]

    def apply(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        w = np.stack([z[..., 0] * z[..., 2], z[..., 1] * z[..., 3]], axis=-1)
        return z * np.exp(np.stack(evaluate_many(self.c, w), axis=-1))

    def invert(self, x: np.ndarray, tol: float = 1e-15, max_iter: int = 200) -> np.ndarray:
        x = np.asarray(x, dtype=complex)
        wx = np.stack([x[..., 0] * x[..., 2], x[..., 1] * x[..., 3]], axis=-1)
        w = wx.copy()
        for _ in range(max_iter):
            c = np.stack(evaluate_many(self.c, w), axis=-1)
            w_new = wx * np.exp(-(c[..., :2] + c[..., 2:]))
            done = np.max(np.abs(w_new - w), initial=0.0) <= tol * (1 + np.max(np.abs(wx), initial=0.0))
            w = w_new
            if done:
                break
        else:
            raise ImplicitSolveError("diagonal scaling inversion did not converge")
        return x * np.exp(-np.stack(evaluate_many(self.c, w), axis=-1))


def solve_moser_type(comps: Sequence[PolySeries]) -> DiagonalScaling:
    """Diagonal scaling giving ``[phi_i/xi_i] = 1 = [psi_i/eta_i]`` for all four components.

    With brackets ``A`` of ``F`` the composed brackets are ``e^(c_j(w)) A_j(w~)``;
    ``w~`` solves ``w~_i = w_i / (A_i B_i)(w~)`` and then ``c_j = -log A_j(w~)``.
    """
    brs = [s.astype(complex) for s in _brackets(comps)]
    d = max(b.max_degree for b in brs)
    brs = [b.with_max_degree(d) for b in brs]
    one = PolySeries.constant(1.0, 2, d, dtype=complex)
    for b in brs:
        if abs(complex(b.coefficient((0, 0))) - 1) > 1e-12:
            raise ContractError("map is not tangent to the identity")
    logs = [series_log1p(b - one) for b in brs]
    v = [PolySeries.variable(i, 2, d, dtype=complex) for i in range(2)]
    g = list(v)
    for _ in range(d + 1):
        lg = compose_many(logs, g)
        g_new = [v[i] * series_exp(-(lg[i] + lg[i + 2])) for i in range(2)]
        if all((gn - go).norm() == 0 for gn, go in zip(g_new, g)):
            break
        g = g_new
    c = [-x for x in compose_many(logs, g)]
    return DiagonalScaling(c, g)


def enforce_criterion_Q(F_tilde: CanonicalMap, normalization: str = "Q") -> tuple[CanonicalMap, object]:
    """Compose ``F_tilde`` with the reparametrisation fixed by the normalisation.

    ``normalization`` is ``"Q"`` (main path, returns the generating function ``S``
    of a symplectic torus reparametrisation) or ``"moser"`` (all four brackets equal
    to 1, returns the :class:`DiagonalScaling`).
    """
    comps = F_tilde.components
    d = comps[0].max_degree
    base = F_tilde
    if normalization == "moser":
        sc = solve_moser_type(comps)
        new = compose_many(comps, sc.components(d))
        return CanonicalMap(new, pointwise=lambda z: base(sc.apply(z)), inverse=lambda x: sc.invert(base.inverse(x)),
                            label=F_tilde.label + "+moser", symplectic=False), sc
    if normalization != "Q":
        raise ValueError("normalization is 'Q' or 'moser'")
    S = solve_criterion_Q(comps)
    if np.max(np.abs(S.coeffs)) == 0:
        return F_tilde, S
    phi = torus_reparametrization(S, d)
    new = compose_many(comps, phi)

    def pointwise(z):
        return base(apply_torus(S, z))

    def inverse(x):
        return apply_torus(S, base.inverse(x), sign=-1)

    return CanonicalMap(new, pointwise=pointwise, inverse=inverse, label=F_tilde.label + "+Q"), S


def apply_torus(S: PolySeries, z: np.ndarray, sign: int = 1) -> np.ndarray:
    """Pointwise ``Phi_S`` (or its inverse for ``sign = -1``)."""
    z = np.asarray(z, dtype=complex)
    w = np.stack([z[..., 0] * z[..., 2], z[..., 1] * z[..., 3]], axis=-1)
    s1, s2 = evaluate_many([S.derivative(0), S.derivative(1)], w)
    e1, e2 = np.exp(sign * s1), np.exp(sign * s2)
    return np.stack([z[..., 0] * e1, z[..., 1] * e2, z[..., 2] / e1, z[..., 3] / e2], axis=-1)


# ---------------------------------------------------------------------------------------
# packaging
# ---------------------------------------------------------------------------------------


@dataclass
class LocalNormalization:
    """Real chart ``F`` with ``H o F = K(xi1 eta1, xi2^2 + eta2^2)``."""

    F: CanonicalMap
    F_inverse: CanonicalMap
    K: PolySeries
    eps_params: tuple
    max_degree: int
    radius: float = float("nan")
    K_complex: PolySeries | None = None
    W: GeneratingFunction | None = None
    S: object = None
    residuals: dict = field(default_factory=dict)

    def invariants(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        return np.stack([z[..., 0] * z[..., 2], z[..., 1] ** 2 + z[..., 3] ** 2], axis=-1)

    def K_value(self, z: np.ndarray) -> np.ndarray:
        return self.K(self.invariants(z))

    def rates(self, z: np.ndarray) -> np.ndarray:
        """``(dK/dw1, dK/dw2)`` at the invariants of ``z``."""
        w = self.invariants(z)
        return np.stack(evaluate_many([self.K.derivative(0), self.K.derivative(1)], w), axis=-1)

    def flow(self, z: np.ndarray, t) -> np.ndarray:
        """Exact flow of ``K`` in the chart: hyperbolic scaling and rotation of (xi2, eta2)."""
        z = np.asarray(z, dtype=float)
        r = self.rates(z)
        t = np.asarray(t, dtype=float)
        k1, k2 = r[..., 0], r[..., 1]
        out = np.empty_like(z)
        # dxi1/dt = k1 xi1, deta1/dt = -k1 eta1; (xi2, eta2) rotate with angular speed 2 k2 (clockwise)
        out[..., 0] = z[..., 0] * np.exp(k1 * t)
        out[..., 2] = z[..., 2] * np.exp(-k1 * t)
        th = 2 * k2 * t
        c, s = np.cos(th), np.sin(th)
        out[..., 1] = c * z[..., 1] + s * z[..., 3]
        out[..., 3] = -s * z[..., 1] + c * z[..., 3]
        return out

    def vector_field(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        r = self.rates(z)
        k1, k2 = r[..., 0], r[..., 1]
        return np.stack([k1 * z[..., 0], 2 * k2 * z[..., 3], -k1 * z[..., 2], -2 * k2 * z[..., 1]], axis=-1)

    def manifest(self) -> dict:
        return {"max_degree": self.max_degree, "radius": self.radius, "eps_params": list(self.eps_params),
                "residuals": self.residuals}


def realify_and_package(F_star: CanonicalMap, K_star: PolySeries, eps_params=(), tol: float = 1e-10,
                        max_degree: int | None = None) -> LocalNormalization:
    """``F = P^-1 F* P`` and ``K(w1, w2) = K*(w1, (i/2) w2)``; imaginary parts must vanish."""
    comps = F_star.components
    d = comps[0].max_degree
    # unnormalised blocks, then a power-of-two rescale per monomial (exact on the linear part)
    U, Ui = P_BLOCK * SQRT2, P_INV_BLOCK * SQRT2
    pulled = compose_many([c.astype(complex) for c in comps], _pair_substitution(U, d))
    mixed = [pulled[0], pulled[1] * Ui[0, 0] + pulled[3] * Ui[0, 1], pulled[2],
             pulled[1] * Ui[1, 0] + pulled[3] * Ui[1, 1]]
    mixed = [_rescale_by_degree(c, extra) for c, extra in zip(mixed, (0, 1, 0, 1))]
    imag = max(float(np.max(np.abs(np.imag(c.coeffs)))) for c in mixed)
    real_comps = [_to_real(c, tol) for c in mixed]
    K = _to_real(K_star.compose([PolySeries.variable(0, 2, K_star.max_degree, dtype=complex),
                                 PolySeries.variable(1, 2, K_star.max_degree, dtype=complex) * 0.5j]), tol)

    def pointwise(z):
        z = np.asarray(z)
        out = apply_pair(P_INV_BLOCK, F_star(apply_pair(P_BLOCK, z)))
        return np.real(out) if not np.iscomplexobj(z) else out

    def inverse(x):
        x = np.asarray(x)
        out = apply_pair(P_INV_BLOCK, F_star.inverse(apply_pair(P_BLOCK, x)))
        return np.real(out) if not np.iscomplexobj(x) else out

    F = CanonicalMap(real_comps, pointwise=pointwise, inverse=inverse, label="moser-chart",
                     symplectic=F_star.symplectic)
    cache: dict = {}

    def inv_series():
        if "c" not in cache:
            cache["c"] = invert_series_map(real_comps)
        return cache["c"]

    F_inv = _LazyInverse(inv_series, inverse, pointwise)
    return LocalNormalization(F=F, F_inverse=F_inv, K=K, eps_params=tuple(eps_params),
                              max_degree=max_degree or d, K_complex=K_star,
                              residuals={"imag_residue": imag})


def _rescale_by_degree(f: PolySeries, extra: int) -> PolySeries:
    """Multiply each monomial by ``2^(-(k + extra)/2)``, ``k`` its degree in (xi2, eta2)."""
    k = f.basis.exps[:, 1] + f.basis.exps[:, 3]
    return PolySeries(f.coeffs * 2.0 ** (-(k + extra) / 2), f.basis)


class _LazyInverse(CanonicalMap):
    """Inverse chart whose series components are computed on first access."""

    def __init__(self, series_fn, pointwise, inverse):
        self._series_fn = series_fn
        self._pointwise = pointwise
        self._inverse = inverse
        self.label = "moser-chart-inverse"

    @property
    def components(self):
        return self._series_fn()


def model_series(model: HamiltonianModel) -> PolySeries:
    """Polynomial part of the model (the cutoff is identically 1 near the origin)."""
    return model.poly


def local_normalization(model: HamiltonianModel, max_degree: int = 10, normalization: str = "Q",
                        radius: bool = True) -> LocalNormalization:
    """Full construction for a model Hamiltonian; ``max_degree`` is the degree of ``F``."""
    H = model_series(model).with_max_degree(max_degree + 1)
    Hc = complexify(H)
    gf, Kc = solve_generating_function(Hc, max_degree + 1)
    comps = implicit_map_series(gf, max_degree)
    ev = _ImplicitEvaluator(gf)
    F_tilde = CanonicalMap(comps, pointwise=ev.forward, inverse=ev.backward, label="generating-function")
    F_star, S = enforce_criterion_Q(F_tilde, normalization=normalization)
    if normalization == "moser":
        Kc = Kc.compose([w.with_max_degree(Kc.max_degree) for w in S.w_map])
    ln = realify_and_package(F_star, Kc, eps_params=model.params, max_degree=max_degree)
    ln.W, ln.S = gf, S
    if normalization == "moser":
        brs = _brackets(F_star.components)
        ln.residuals["brackets"] = max(float(np.max(np.abs((b - 1).truncate(max_degree // 2 - 1).coeffs))) for b in brs)
    else:
        ln.residuals["criterion_Q"] = float(np.max(np.abs(criterion_Q_residual(F_star.components).truncate(max_degree - 1).coeffs)))
    gres = generating_residual(Hc, gf, Kc)
    ln.residuals["generating_per_grade"] = [float(np.max(np.abs(gres.homogeneous_part(k).coeffs)))
                                            for k in range(gres.max_degree + 1)]
    if radius:
        ln.radius = a_posteriori_radius(ln)
    return ln


def a_posteriori_radius(ln: LocalNormalization, tol: float = 1e-6, n_dirs: int = 256, seed: int = 0,
                        r_max: float = 2.0) -> float:
    """Largest ``r`` where the degree-d and degree-(d-2) truncations of ``F`` differ by < ``tol``."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_dirs, 4))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    d = ln.max_degree
    high = ln.F.components
    low = [c.truncate(d - 2) for c in high]

    def gap(r):
        pts = dirs * r
        a = np.stack(evaluate_many(high, pts), axis=-1)
        b = np.stack(evaluate_many(low, pts), axis=-1)
        return float(np.max(np.abs(a - b)))

    lo, hi = 0.0, r_max
    if gap(hi) < tol:
        return hi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if gap(mid) < tol:
            lo = mid
        else:
            hi = mid
    return lo


def sample_ball(n: int, radius: float, seed: int = 0) -> np.ndarray:
    """Uniform samples in the 4-ball of the given radius."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 4))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radius * rng.uniform(size=(n, 1)) ** 0.25


def conjugacy_error(ln: LocalNormalization, model: HamiltonianModel, n: int = 1000, seed: int = 0,
                    radius: float | None = None, evaluator: str = "series") -> float:
    """``max |H(F(z)) - K(xi1 eta1, xi2^2 + eta2^2)|`` over a ball sample.

    ``evaluator="series"`` evaluates the degree-d component series of ``F`` (the
    chart itself); ``"pointwise"`` uses the exact canonical map generated by the
    truncated generating function.
    """
    z = sample_ball(n, radius or ln.radius, seed)
    if evaluator == "series":
        x = ln.F.series_eval(z)
    elif evaluator == "pointwise":
        x = ln.F(z)
    else:
        raise ValueError("evaluator is 'series' or 'pointwise'")
    return float(np.max(np.abs(model.energy(x, cut=False) - ln.K_value(z))))


@dataclass
class EstimateReport:
    """Constants fitted over a family of charts; ``uniform`` compares their spread."""

    constants: dict
    spread: dict
    uniform: dict
    radius: float


def verify_uniform_estimates(family: Sequence[LocalNormalization], reference: LocalNormalization,
                             radius: float, n: int = 400, seed: int = 0) -> EstimateReport:
    """Best constants of the difference estimates over an ``(eps, nu_hat, mu)`` family.

    Estimates reported per member (keyed by ``eps``):

    * ``iv``: ``sup |F_eps - F_0| <= nu_hat M0`` on the ball;
    * ``viii``: ``|phi2 - xi2| <= nu_hat M0 |z|^2``;
    * ``ix``: ``|psi2 - eta2| <= nu_hat M0 |z|^2``;
    * ``i``: majorant ``(F_eps - F_0) < nu_hat |z|^2 M(|z|)``, measured as
      ``sup_k r^(k-2) |coefficients of degree k| / nu_hat`` at the ball radius.
    """
    z = sample_ball(n, radius, seed)
    r2 = np.sum(z**2, axis=1)
    F0 = reference.F.series_eval(z)
    consts: dict = {k: {} for k in ("i", "iv", "viii", "ix")}
    for ln in family:
        eps, nu_hat = ln.eps_params[0], ln.eps_params[1]
        Fe = ln.F.series_eval(z)
        diff = np.abs(Fe - F0)
        if nu_hat == 0:
            vals = {"iv": float(np.max(diff)), "viii": float(np.max(np.abs(Fe[:, 1] - z[:, 1]))),
                    "ix": float(np.max(np.abs(Fe[:, 3] - z[:, 3]))), "i": 0.0}
        else:
            vals = {"iv": float(np.max(diff)) / nu_hat,
                    "viii": float(np.max(np.abs(Fe[:, 1] - z[:, 1]) / r2)) / nu_hat,
                    "ix": float(np.max(np.abs(Fe[:, 3] - z[:, 3]) / r2)) / nu_hat}
            best = 0.0
            for c_e, c_0 in zip(ln.F.components, reference.F.components):
                dd = majorant(c_e - c_0.with_max_degree(c_e.max_degree))
                for k in range(2, dd.max_degree + 1):
                    best = max(best, float(np.sum(dd.homogeneous_part(k).coeffs)) * radius ** (k - 2))
            vals["i"] = best / nu_hat
        for k, v in vals.items():
            consts[k][eps] = v
    spread, uniform = {}, {}
    for k, per in consts.items():
        vals = [v for v in per.values() if v > 0]
        spread[k] = (max(vals) / min(vals)) if vals else 1.0
        uniform[k] = spread[k] < 2.0
    return EstimateReport(consts, spread, uniform, radius)
