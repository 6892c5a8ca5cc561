"""Graded truncated power series in a small number of variables.

Coefficients live in a dense vector indexed by a graded monomial basis, which
keeps products, derivatives and compositions vectorised.  Three coefficient
fields are supported: real floats, complex floats and exact rationals
(``fractions.Fraction`` stored in object arrays, meant for low-degree golden
tests).

Phase-space series use the variable order ``(q1, q2, p1, p2)`` (equivalently
``(xi1, xi2, eta1, eta2)`` in local charts), so the symplectic matrix is
``J = [[0, I], [-I, 0]]`` and ``{f, g} = grad(f)^T J grad(g)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Basis",
    "ContractError",
    "PolySeries",
    "SymplecticStructure",
    "CANONICAL",
    "CanonicalMap",
    "poisson_bracket",
    "nf_inner_product",
    "majorant",
    "prec",
    "max_prec",
    "collapse_to_one_variable",
    "diagonal_bracket",
    "phase_variables",
    "get_basis",
    "random_series",
    "evaluate_many",
    "compose_many",
    "sum_series",
    "SparseEvaluator",
]


class ContractError(ValueError):
    """Raised when an operation receives input outside its contract."""


def _compositions(total: int, parts: int):
    """Exponent tuples of fixed degree in descending lexicographic order."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


class Basis:
    """Graded monomial basis with cached index tables.

    Monomials are sorted by degree, then in descending lexicographic order of
    the exponent tuple; this is the canonical (graded lexicographic) order used
    for storage and serialisation.
    """

    def __init__(self, nvars: int, max_degree: int):
        if nvars < 1 or max_degree < 0:
            raise ContractError("need nvars >= 1 and max_degree >= 0")
        self.nvars = nvars
        self.max_degree = max_degree
        exps = [e for d in range(max_degree + 1) for e in _compositions(d, nvars)]
        self.exps = np.array(exps, dtype=np.int64).reshape(len(exps), nvars)
        self.size = len(exps)
        self.degrees = self.exps.sum(axis=1)
        self.index = {e: i for i, e in enumerate(exps)}
        starts = np.searchsorted(self.degrees, np.arange(max_degree + 2))
        self.slices = [slice(int(starts[d]), int(starts[d + 1])) for d in range(max_degree + 1)]
        self.factorials = np.array(
            [math.prod(math.factorial(int(k)) for k in e) for e in exps], dtype=float
        )
        self._radix = max_degree + 1
        self._keys = self.exps @ (self._radix ** np.arange(nvars))
        self._lookup = np.full(self._radix**nvars, -1, dtype=np.int64)
        self._lookup[self._keys] = np.arange(self.size)
        self._pairs = None
        self._shift = {}
        self._deriv = {}

    def lookup(self, exps: np.ndarray) -> np.ndarray:
        """Indices of exponent rows, or -1 when the degree exceeds the basis."""
        exps = np.asarray(exps, dtype=np.int64)
        out = np.full(exps.shape[0], -1, dtype=np.int64)
        ok = (exps >= 0).all(axis=1) & (exps.sum(axis=1) <= self.max_degree)
        keys = exps[ok] @ (self._radix ** np.arange(self.nvars))
        out[ok] = self._lookup[keys]
        return out

    @property
    def pairs(self):
        if self._pairs is None:
            deg = self.degrees
            I, J = np.nonzero(deg[:, None] + deg[None, :] <= self.max_degree)
            K = self._lookup[self._keys[I] + self._keys[J]]
            self._pairs = (I, J, K)
        return self._pairs

    def shift(self, var: int):
        """(src, dst) index arrays for multiplication by a single variable."""
        if var not in self._shift:
            e = self.exps.copy()
            e[:, var] += 1
            dst = self.lookup(e)
            src = np.nonzero(dst >= 0)[0]
            self._shift[var] = (src, dst[src])
        return self._shift[var]

    def deriv(self, var: int):
        """(src, dst, factor) arrays for the partial derivative in ``var``."""
        if var not in self._deriv:
            src = np.nonzero(self.exps[:, var] > 0)[0]
            e = self.exps[src].copy()
            e[:, var] -= 1
            dst = self.lookup(e)
            self._deriv[var] = (src, dst, self.exps[src, var].copy())
        return self._deriv[var]


@lru_cache(maxsize=None)
def get_basis(nvars: int, max_degree: int) -> Basis:
    return Basis(nvars, max_degree)


def _is_exact(arr: np.ndarray) -> bool:
    return arr.dtype == object


def _zeros(size: int, dtype) -> np.ndarray:
    if dtype == object:
        return np.array([Fraction(0)] * size, dtype=object)
    return np.zeros(size, dtype=dtype)


def _common_dtype(a: np.ndarray, b: np.ndarray):
    if _is_exact(a) and _is_exact(b):
        return object
    if _is_exact(a) or _is_exact(b):
        raise ContractError("cannot mix exact-rational and floating series")
    return np.result_type(a.dtype, b.dtype)


def _coerce_scalar(value, exact: bool):
    if exact:
        if isinstance(value, (int, Fraction)):
            return Fraction(value)
        raise ContractError("exact-rational series accept only int or Fraction scalars")
    return value


class PolySeries:
    """Truncated power series ``sum c_alpha x^alpha`` with ``|alpha| <= max_degree``.

    Instances are immutable: every operation returns a new series.
    """

    __slots__ = ("basis", "coeffs")

    def __init__(self, coeffs: np.ndarray, basis: Basis):
        if coeffs.shape != (basis.size,):
            raise ContractError("coefficient vector does not match the basis")
        coeffs.setflags(write=False)
        self.basis = basis
        self.coeffs = coeffs

    # -- construction -----------------------------------------------------------------
    @classmethod
    def zero(cls, nvars: int, max_degree: int, dtype=float) -> "PolySeries":
        b = get_basis(nvars, max_degree)
        return cls(_zeros(b.size, dtype), b)

    @classmethod
    def from_terms(
        cls,
        terms: Mapping[Sequence[int], object],
        nvars: int,
        max_degree: int,
        dtype=None,
    ) -> "PolySeries":
        """Build from a map exponent-tuple -> coefficient; terms above max_degree are dropped."""
        b = get_basis(nvars, max_degree)
        values = list(terms.values())
        if dtype is None:
            if values and all(isinstance(v, (int, Fraction)) and not isinstance(v, bool) for v in values) and any(
                isinstance(v, Fraction) for v in values
            ):
                dtype = object
            elif any(isinstance(v, complex) or np.iscomplexobj(v) for v in values):
                dtype = complex
            else:
                dtype = float
        c = _zeros(b.size, dtype)
        for e, v in terms.items():
            e = tuple(int(k) for k in e)
            if len(e) != nvars or min(e) < 0:
                raise ContractError(f"bad exponent {e} for {nvars} variables")
            if sum(e) > max_degree:
                continue
            c[b.index[e]] += Fraction(v) if dtype == object else v
        return cls(c, b)

    @classmethod
    def variable(cls, i: int, nvars: int, max_degree: int, dtype=float) -> "PolySeries":
        e = [0] * nvars
        e[i] = 1
        one = Fraction(1) if dtype == object else 1.0
        return cls.from_terms({tuple(e): one}, nvars, max_degree, dtype=dtype)

    @classmethod
    def constant(cls, value, nvars: int, max_degree: int, dtype=None) -> "PolySeries":
        return cls.from_terms({(0,) * nvars: value}, nvars, max_degree, dtype=dtype)

    # -- basic properties -----------------------------------------------------------------
    @property
    def nvars(self) -> int:
        return self.basis.nvars

    @property
    def max_degree(self) -> int:
        return self.basis.max_degree

    @property
    def dtype(self):
        return self.coeffs.dtype

    @property
    def exact(self) -> bool:
        return _is_exact(self.coeffs)

    @property
    def terms(self) -> dict:
        """Sparse view: exponent tuple -> nonzero coefficient, in canonical order."""
        nz = np.nonzero(self.coeffs)[0] if not self.exact else [i for i, v in enumerate(self.coeffs) if v != 0]
        return {tuple(int(k) for k in self.basis.exps[i]): self.coeffs[i] for i in nz}

    def coefficient(self, exps: Sequence[int]):
        e = tuple(int(k) for k in exps)
        if sum(e) > self.max_degree:
            return 0
        return self.coeffs[self.basis.index[e]]

    def support_degree(self) -> int:
        """Highest degree carrying a nonzero coefficient (-1 for the zero series)."""
        nz = [i for i, v in enumerate(self.coeffs) if v != 0]
        return int(self.basis.degrees[nz[-1]]) if nz else -1

    def min_degree(self) -> int:
        nz = [i for i, v in enumerate(self.coeffs) if v != 0]
        return int(self.basis.degrees[nz[0]]) if nz else -1

    def is_homogeneous(self, degree: int | None = None) -> bool:
        nz = [i for i, v in enumerate(self.coeffs) if v != 0]
        degs = {int(self.basis.degrees[i]) for i in nz}
        if degree is None:
            return len(degs) <= 1
        return degs <= {degree}

    def norm(self) -> float:
        """Max-abs coefficient."""
        if self.basis.size == 0:
            return 0.0
        return float(max(abs(v) for v in self.coeffs)) if self.exact else float(np.max(np.abs(self.coeffs)))

    # -- field changes -----------------------------------------------------------------
    def astype(self, dtype) -> "PolySeries":
        if dtype == object:
            if self.exact:
                return self
            return PolySeries(np.array([Fraction(v) for v in self.coeffs], dtype=object), self.basis)
        if self.exact:
            return PolySeries(np.array([float(v) for v in self.coeffs], dtype=dtype), self.basis)
        return PolySeries(self.coeffs.astype(dtype), self.basis)

    @property
    def real(self) -> "PolySeries":
        return PolySeries(np.real(self.coeffs).astype(float), self.basis)

    @property
    def imag(self) -> "PolySeries":
        return PolySeries(np.imag(self.coeffs).astype(float), self.basis)

    def conj(self) -> "PolySeries":
        return PolySeries(np.conj(self.coeffs), self.basis)

    def with_max_degree(self, max_degree: int) -> "PolySeries":
        """Truncate or zero-extend to another maximal degree."""
        if max_degree == self.max_degree:
            return self
        b = get_basis(self.nvars, max_degree)
        c = _zeros(b.size, self.dtype)
        n = min(b.size, self.basis.size)
        c[:n] = self.coeffs[:n]
        return PolySeries(c, b)

    def truncate(self, degree: int) -> "PolySeries":
        """Zero every term above ``degree`` (the maximal degree is kept)."""
        c = self.coeffs.copy()
        if degree < self.max_degree:
            start = self.basis.slices[max(degree + 1, 0)].start
            c[start:] = Fraction(0) if self.exact else 0
        return PolySeries(c, self.basis)

    def homogeneous_part(self, degree: int) -> "PolySeries":
        c = _zeros(self.basis.size, self.dtype)
        if 0 <= degree <= self.max_degree:
            s = self.basis.slices[degree]
            c[s] = self.coeffs[s]
        return PolySeries(c, self.basis)

    def chop(self, tol: float = 0.0) -> "PolySeries":
        """Zero coefficients with modulus ``<= tol`` (floating series only)."""
        if self.exact:
            return self
        c = self.coeffs.copy()
        c[np.abs(c) <= tol] = 0
        return PolySeries(c, self.basis)

    # -- arithmetic -----------------------------------------------------------------
    def _align(self, other: "PolySeries"):
        if other.nvars != self.nvars:
            raise ContractError("series have different numbers of variables")
        d = max(self.max_degree, other.max_degree)
        return self.with_max_degree(d), other.with_max_degree(d)

    def __add__(self, other):
        if isinstance(other, PolySeries):
            a, b = self._align(other)
            _common_dtype(a.coeffs, b.coeffs)
            return PolySeries(a.coeffs + b.coeffs, a.basis)
        c = self.coeffs.copy() if not np.iscomplexobj(other) else self.coeffs.astype(complex)
        c[0] = c[0] + _coerce_scalar(other, self.exact)
        return PolySeries(c, self.basis)

    __radd__ = __add__

    def __neg__(self):
        return PolySeries(-self.coeffs, self.basis)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, PolySeries):
            a, b = self._align(other)
            return PolySeries(_mul(a.coeffs, b.coeffs, a.basis), a.basis)
        return PolySeries(self.coeffs * _coerce_scalar(other, self.exact), self.basis)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, PolySeries):
            raise ContractError("division by a series is not supported")
        if self.exact:
            return PolySeries(self.coeffs * (1 / Fraction(scalar)), self.basis)
        return PolySeries(self.coeffs / scalar, self.basis)

    def __pow__(self, k: int):
        if k < 0:
            raise ContractError("negative powers are not supported")
        out = PolySeries.constant(Fraction(1) if self.exact else 1.0, self.nvars, self.max_degree, dtype=self.dtype)
        base = self
        while k:
            if k & 1:
                out = out * base
            k >>= 1
            if k:
                base = base * base
        return out

    def mul_variable(self, var: int) -> "PolySeries":
        src, dst = self.basis.shift(var)
        c = _zeros(self.basis.size, self.dtype)
        c[dst] = self.coeffs[src]
        return PolySeries(c, self.basis)

    def derivative(self, var: int) -> "PolySeries":
        src, dst, fac = self.basis.deriv(var)
        c = _zeros(self.basis.size, self.dtype)
        if self.exact:
            for s, d, f in zip(src, dst, fac):
                c[d] = self.coeffs[s] * int(f)
        else:
            c[dst] = self.coeffs[src] * fac
        return PolySeries(c, self.basis)

    def gradient(self) -> list["PolySeries"]:
        return [self.derivative(i) for i in range(self.nvars)]

    def allclose(self, other: "PolySeries", atol: float = 1e-12) -> bool:
        return (self - other).norm() <= atol

    def __eq__(self, other):
        if not isinstance(other, PolySeries):
            return NotImplemented
        a, b = self._align(other)
        return all(x == y for x, y in zip(a.coeffs, b.coeffs))

    def __hash__(self):
        return hash((self.nvars, self.max_degree, tuple(self.terms.items())))

    def __repr__(self):
        parts = [f"{v!r}*x^{e}" for e, v in list(self.terms.items())[:8]]
        more = " + ..." if len(self.terms) > 8 else ""
        return f"PolySeries(nvars={self.nvars}, max_degree={self.max_degree}: {' + '.join(parts) or '0'}{more})"

    # -- evaluation and composition ---------------------------------------------------------
    def monomials(self, points: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        """Matrix of basis monomials evaluated at ``points`` (shape (..., nvars))."""
        return _monomial_matrix(self.basis, points, rows)

    def __call__(self, points) -> np.ndarray:
        """Evaluate at one point or a batch of points (last axis = variables)."""
        return evaluate_many([self], points)[0]

    def compose(self, subs: Sequence["PolySeries"]) -> "PolySeries":
        """Substitute series for the variables; the result lives in the substitutes' basis."""
        return compose_many([self], subs)[0]

    # -- serialisation -----------------------------------------------------------------
    def to_text(self) -> str:
        """Canonical text form: header, then per-degree blocks of exponent/coefficient lines."""
        field_name = "rational" if self.exact else ("complex" if np.iscomplexobj(self.coeffs) else "real")
        lines = [f"nvars {self.nvars} max_degree {self.max_degree} field {field_name}"]
        terms = self.terms
        for d in range(self.max_degree + 1):
            block = [(e, v) for e, v in terms.items() if sum(e) == d]
            if not block:
                continue
            lines.append(f"degree {d}")
            for e, v in block:
                lines.append(" ".join(str(k) for k in e) + " " + _format_coeff(v, field_name))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PolySeries":
        rows = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
        head = rows[0]
        if head[0] != "nvars" or head[2] != "max_degree" or head[4] != "field":
            raise ContractError("malformed series header")
        nvars, max_degree, field_name = int(head[1]), int(head[3]), head[5]
        dtype = {"real": float, "complex": complex, "rational": object}[field_name]
        terms = {}
        degree = None
        for row in rows[1:]:
            if row[0] == "degree":
                degree = int(row[1])
                continue
            e = tuple(int(k) for k in row[:nvars])
            if degree is None or sum(e) != degree:
                raise ContractError(f"term {e} outside its degree block")
            terms[e] = _parse_coeff(row[nvars:], field_name)
        return cls.from_terms(terms, nvars, max_degree, dtype=dtype)


def _format_coeff(v, field_name: str) -> str:
    if field_name == "rational":
        return str(Fraction(v))
    if field_name == "complex":
        v = complex(v)
        return f"{v.real!r} {v.imag!r}"
    return repr(float(v))


def _parse_coeff(tokens: list[str], field_name: str):
    if field_name == "rational":
        return Fraction(tokens[0])
    if field_name == "complex":
        return complex(float(tokens[0]), float(tokens[1]))
    return float(tokens[0])


def _mul(a: np.ndarray, b: np.ndarray, basis: Basis) -> np.ndarray:
    dtype = _common_dtype(a, b)
    if dtype == object:
        out = _zeros(basis.size, object)
        na = [i for i, v in enumerate(a) if v != 0]
        nb = [j for j, v in enumerate(b) if v != 0]
        deg = basis.degrees
        for i in na:
            for j in nb:
                if deg[i] + deg[j] <= basis.max_degree:
                    k = basis.index[tuple(int(x) for x in basis.exps[i] + basis.exps[j])]
                    out[k] += a[i] * b[j]
        return out
    I, J, K = basis.pairs
    nza = a != 0
    nzb = b != 0
    if nza.sum() * nzb.sum() < len(I) // 4:
        # sparse path: restrict the pair table to supported rows
        sel = nza[I] & nzb[J]
        I, J, K = I[sel], J[sel], K[sel]
    prod = a[I] * b[J]
    if np.iscomplexobj(prod):
        re = np.bincount(K, weights=prod.real, minlength=basis.size)
        im = np.bincount(K, weights=prod.imag, minlength=basis.size)
        return re + 1j * im
    return np.bincount(K, weights=prod, minlength=basis.size).astype(dtype)


def _monomial_matrix(basis: Basis, points, rows=None) -> np.ndarray:
    pts = np.asarray(points)
    exps = basis.exps if rows is None else basis.exps[rows]
    dmax = basis.max_degree
    powers = [None] * basis.nvars
    for v in range(basis.nvars):
        x = pts[..., v]
        p = np.empty(x.shape + (dmax + 1,), dtype=np.result_type(x.dtype, float))
        p[..., 0] = 1.0
        for k in range(1, dmax + 1):
            p[..., k] = p[..., k - 1] * x
        powers[v] = p
    out = powers[0][..., exps[:, 0]]
    for v in range(1, basis.nvars):
        out = out * powers[v][..., exps[:, v]]
    return out


def evaluate_many(series: Sequence[PolySeries], points) -> list:
    """Evaluate several series sharing a basis at the same points."""
    basis = series[0].basis
    for s in series:
        if s.basis is not basis:
            raise ContractError("evaluate_many needs series on a common basis")
    pts = np.asarray(points)
    if pts.shape[-1] != basis.nvars:
        raise ContractError(f"points must have {basis.nvars} coordinates")
    coeffs = np.stack([np.asarray(s.coeffs, dtype=complex if s.exact else s.dtype) if not s.exact
                       else np.array([float(v) for v in s.coeffs]) for s in series])
    support = np.nonzero(np.any(coeffs != 0, axis=0))[0]
    if support.size == 0:
        shape = pts.shape[:-1]
        return [np.zeros(shape, dtype=np.result_type(pts.dtype, coeffs.dtype)) for _ in series]
    mono = _monomial_matrix(basis, pts, support)
    vals = mono @ coeffs[:, support].T
    return [vals[..., i] for i in range(len(series))]


def compose_many(series: Sequence[PolySeries], subs: Sequence[PolySeries]) -> list[PolySeries]:
    """Compose several series with one substitution, sharing monomial products."""
    nvars = series[0].nvars
    if len(subs) != nvars:
        raise ContractError(f"need {nvars} substitutes, got {len(subs)}")
    target = subs[0].basis
    for s in subs:
        if s.basis is not target:
            raise ContractError("substitutes must share a basis")
    exact = any(s.exact for s in series) or any(s.exact for s in subs)
    identity = []
    for v, s in enumerate(subs):
        ident = None
        terms = s.terms
        if len(terms) == 1:
            (e, c), = terms.items()
            if sum(e) == 1 and c == 1:
                ident = e.index(1)
        identity.append(ident)
    needed = set()
    for s in series:
        needed.update(s.terms.keys())
    cache: dict[tuple, PolySeries] = {}
    one = PolySeries.constant(Fraction(1) if exact else 1.0, target.nvars, target.max_degree,
                              dtype=object if exact else float)

    def mono(e: tuple) -> PolySeries:
        if e in cache:
            return cache[e]
        nz = [v for v, k in enumerate(e) if k > 0]
        if not nz:
            res = one
        else:
            v = nz[-1]
            prev = list(e)
            prev[v] -= 1
            base = mono(tuple(prev))
            res = base.mul_variable(identity[v]) if identity[v] is not None else base * subs[v]
        cache[e] = res
        return res

    out = []
    for s in series:
        dtype = object if exact else np.result_type(s.dtype, *[t.dtype for t in subs])
        acc = _zeros(target.size, dtype)
        for e, c in s.terms.items():
            m = mono(e)
            if exact:
                acc = acc + m.coeffs * c
            else:
                acc = acc + c * m.coeffs
        out.append(PolySeries(np.asarray(acc, dtype=dtype) if not exact else acc, target))
    return out


def phase_variables(max_degree: int, dtype=float) -> list[PolySeries]:
    """The four coordinate series (q1, q2, p1, p2)."""
    return [PolySeries.variable(i, 4, max_degree, dtype=dtype) for i in range(4)]


@dataclass(frozen=True)
class SymplecticStructure:
    """Constant symplectic matrix on R^(2m) in the (q..., p...) ordering."""

    dimension: int = 4
    matrix: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.matrix is None:
            m = self.dimension // 2
            J = np.block([[np.zeros((m, m)), np.eye(m)], [-np.eye(m), np.zeros((m, m))]])
            object.__setattr__(self, "matrix", J)
        J = np.asarray(self.matrix, dtype=float)
        if J.shape != (self.dimension, self.dimension):
            raise ContractError("matrix shape does not match dimension")
        if not np.allclose(J.T, -J) or not np.allclose(J @ J, -np.eye(self.dimension)):
            raise ContractError("J must satisfy J^T = -J and J^2 = -I")


CANONICAL = SymplecticStructure()


def poisson_bracket(f: PolySeries, g: PolySeries, J: SymplecticStructure = CANONICAL) -> PolySeries:
    """``{f, g} = grad(f)^T J grad(g)``, truncated at the larger maximal degree."""
    if f.nvars != g.nvars or f.nvars != J.dimension:
        raise ContractError("dimension mismatch between series and symplectic structure")
    f, g = f._align(g)
    gf, gg = f.gradient(), g.gradient()
    M = J.matrix
    exact = f.exact or g.exact
    out = PolySeries.zero(f.nvars, f.max_degree, dtype=object if exact else np.result_type(f.dtype, g.dtype))
    for i in range(J.dimension):
        for j in range(J.dimension):
            if M[i, j] != 0:
                w = int(M[i, j]) if exact else M[i, j]
                out = out + (gf[i] * gg[j]) * w
    return out


def nf_inner_product(S: PolySeries, T: PolySeries):
    """``sum alpha! s_alpha t_alpha`` for homogeneous series of one common degree."""
    dS, dT = S.support_degree(), T.support_degree()
    if not S.is_homogeneous() or not T.is_homogeneous():
        raise ContractError("inner product needs homogeneous series")
    if dS >= 0 and dT >= 0 and dS != dT:
        raise ContractError(f"degree mismatch {dS} != {dT}")
    a, b = S._align(T)
    if a.exact or b.exact:
        return sum((Fraction(math.prod(math.factorial(int(k)) for k in a.basis.exps[i])) * a.coeffs[i] * b.coeffs[i]
                    for i in range(a.basis.size) if a.coeffs[i] != 0 and b.coeffs[i] != 0), Fraction(0))
    return float(np.real(np.sum(a.basis.factorials * a.coeffs * np.conj(b.coeffs))))


def majorant(f: PolySeries) -> PolySeries:
    """Coefficient-wise modulus ``|f|``."""
    if f.exact:
        return PolySeries(np.array([abs(v) for v in f.coeffs], dtype=object), f.basis)
    return PolySeries(np.abs(f.coeffs).astype(float), f.basis)


def prec(f: PolySeries, g: PolySeries) -> bool:
    """Majorant order ``f < g``: g has nonnegative coefficients dominating ``|f|``.

    The comparison runs up to the common (smaller) maximal degree.
    """
    if f.nvars != g.nvars:
        raise ContractError("series have different numbers of variables")
    d = min(f.max_degree, g.max_degree)
    a = majorant(f.with_max_degree(d)).coeffs
    b = g.with_max_degree(d).coeffs
    if not g.exact and np.iscomplexobj(b):
        if np.any(np.imag(b) != 0):
            return False
        b = np.real(b)
    return bool(all(y >= 0 for y in b) and all(x <= y for x, y in zip(a, b)))


def max_prec(f: PolySeries, g: PolySeries) -> PolySeries:
    """Coefficient-wise maximum of the majorants, the least common upper bound."""
    a, b = f._align(g)
    a, b = majorant(a), majorant(b)
    if a.exact or b.exact:
        return PolySeries(np.array([max(x, y) for x, y in zip(a.coeffs, b.coeffs)], dtype=object), a.basis)
    return PolySeries(np.maximum(a.coeffs, b.coeffs), a.basis)


def collapse_to_one_variable(f: PolySeries) -> PolySeries:
    """Substitute every variable by one variable ``w``."""
    b1 = get_basis(1, f.max_degree)
    c = _zeros(b1.size, f.dtype)
    for d in range(f.max_degree + 1):
        block = f.coeffs[f.basis.slices[d]]
        c[d] = sum(block, Fraction(0)) if f.exact else np.sum(block)
    return PolySeries(c, b1)


def diagonal_bracket(f: PolySeries, offset: Sequence[int] = (0, 0, 0, 0)) -> PolySeries:
    """Resonant part of a local-chart series as a series in ``(w1, w2) = (xi1 eta1, xi2 eta2)``.

    Variables are ordered ``(xi1, xi2, eta1, eta2)``.  With a nonzero ``offset``
    the monomials kept are ``x^offset * w1^a w2^b``, which gives the bracket of
    ``f / x^offset``: ``offset=(1,0,0,0)`` yields ``[f / xi1]``.
    """
    if f.nvars != 4:
        raise ContractError("diagonal_bracket works on four local variables")
    off = np.asarray(offset, dtype=np.int64)
    b2 = get_basis(2, (f.max_degree - int(off.sum())) // 2)
    c = _zeros(b2.size, f.dtype)
    e = f.basis.exps - off
    ok = (e >= 0).all(axis=1) & (e[:, 0] == e[:, 2]) & (e[:, 1] == e[:, 3])
    for i in np.nonzero(ok)[0]:
        k = (int(e[i, 0]), int(e[i, 1]))
        if sum(k) <= b2.max_degree:
            c[b2.index[k]] += f.coeffs[i]
    return PolySeries(c, b2)


class CanonicalMap:
    """Near-identity map of phase space given by component series.

    ``pointwise`` optionally supplies a more accurate evaluator (for instance an
    exact composition of Hamiltonian flows); the component series remain the
    graded description used for serialisation and series-level checks.
    ``symplectic`` is False for maps that are deliberately not canonical.
    """

    def __init__(
        self,
        components: Sequence[PolySeries],
        pointwise: Callable[[np.ndarray], np.ndarray] | None = None,
        inverse: Callable[[np.ndarray], np.ndarray] | None = None,
        label: str = "",
        symplectic: bool = True,
    ):
        self.components = list(components)
        self._pointwise = pointwise
        self._inverse = inverse
        self.label = label
        self.symplectic = symplectic

    @property
    def dimension(self) -> int:
        return len(self.components)

    def series_eval(self, points) -> np.ndarray:
        vals = evaluate_many(self.components, points)
        return np.stack(vals, axis=-1)

    def __call__(self, points) -> np.ndarray:
        if self._pointwise is not None:
            return self._pointwise(np.asarray(points))
        return self.series_eval(points)

    def inverse(self, points) -> np.ndarray:
        if self._inverse is None:
            raise ContractError("this map has no pointwise inverse")
        return self._inverse(np.asarray(points))

    def jacobian(self, points, h: float = 1e-6) -> np.ndarray:
        """Central finite-difference Jacobian, shape (..., n, n)."""
        pts = np.asarray(points, dtype=float)
        n = pts.shape[-1]
        cols = []
        for j in range(n):
            e = np.zeros(n)
            e[j] = h
            cols.append((self(pts + e) - self(pts - e)) / (2 * h))
        return np.stack(cols, axis=-1)

    def symplecticity_error(self, points, J: SymplecticStructure = CANONICAL, h: float = 1e-6) -> float:
        """max |DF^T J DF - J| over the given points."""
        D = self.jacobian(points, h=h)
        Jm = J.matrix
        err = np.einsum("...ki,kl,...lj->...ij", D, Jm, D) - Jm
        return float(np.max(np.abs(err)))


def random_series(rng: np.random.Generator, nvars: int, max_degree: int, min_degree: int = 0,
                  density: float = 0.5, scale: float = 1.0, exact: bool = False,
                  integer_range: int = 5) -> PolySeries:
    """Random sparse series, used by property tests and demos."""
    b = get_basis(nvars, max_degree)
    mask = (rng.random(b.size) < density) & (b.degrees >= min_degree)
    if exact:
        vals = rng.integers(-integer_range, integer_range + 1, size=b.size)
        dens = rng.integers(1, 4, size=b.size)
        c = np.array([Fraction(int(v), int(d)) if m else Fraction(0) for v, d, m in zip(vals, dens, mask)], dtype=object)
        return PolySeries(c, b)
    c = np.where(mask, rng.normal(scale=scale, size=b.size), 0.0)
    return PolySeries(c, b)


def sum_series(items: Iterable[PolySeries]) -> PolySeries:
    items = list(items)
    out = items[0]
    for s in items[1:]:
        out = out + s
    return out


class SparseEvaluator:
    """Fast value and gradient of a fixed series on batches of real points.

    Only the monomials in the support of the series and of its gradient are
    formed, which is much cheaper than the full monomial basis for sparse
    high-degree series.
    """

    def __init__(self, f: PolySeries):
        if f.nvars != 4 and f.nvars != 2:
            raise ContractError("SparseEvaluator supports 2 or 4 variables")
        terms = {e: complex(v) if np.iscomplexobj(f.coeffs) else float(v) for e, v in f.terms.items()}
        n = f.nvars
        union: dict[tuple, int] = {}
        cols: list[tuple[int, int, object]] = []

        def slot(e):
            if e not in union:
                union[e] = len(union)
            return union[e]

        for e, c in terms.items():
            cols.append((slot(e), n, c))
            for i in range(n):
                if e[i] > 0:
                    e2 = list(e)
                    e2[i] -= 1
                    cols.append((slot(tuple(e2)), i, c * e[i]))
        self.nvars = n
        self.exps = np.array(list(union.keys()), dtype=np.int64).reshape(-1, n)
        dtype = complex if np.iscomplexobj(f.coeffs) else float
        self.C = np.zeros((len(union), n + 1), dtype=dtype)
        for r, col, c in cols:
            self.C[r, col] += c
        self.maxpow = self.exps.max(axis=0) if len(union) else np.zeros(n, dtype=np.int64)

    def _monomials(self, x: np.ndarray) -> np.ndarray:
        M = None
        for v in range(self.nvars):
            p = int(self.maxpow[v])
            if p == 0:
                continue
            base = x[..., v]
            pw = np.empty(base.shape + (p + 1,), dtype=base.dtype)
            pw[..., 0] = 1.0
            for k in range(1, p + 1):
                pw[..., k] = pw[..., k - 1] * base
            g = pw[..., self.exps[:, v]]
            M = g if M is None else M * g
        if M is None:
            M = np.ones(x.shape[:-1] + (len(self.exps),), dtype=x.dtype)
        return M

    def value_and_gradient(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x)
        if len(self.exps) == 0:
            return np.zeros(x.shape[:-1]), np.zeros(x.shape)
        out = self._monomials(x) @ self.C
        return out[..., self.nvars], out[..., : self.nvars]
