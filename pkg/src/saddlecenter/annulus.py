"""Twist-map analysis of the restricted return map and the homoclinic hunt.

The restricted return map ``Ret^alpha`` acts on ``(q2, p2)`` of the section
``Sigma_L`` inside the energy level of the periodic orbit ``P^alpha``.  Twist
coordinates are ``q = nu_bar * theta`` and ``rho = r / sqrt(nu_bar)`` where
``(theta, r)`` are clockwise polar coordinates and ``nu_bar = 1/floor(1/eps^2)``.
The annulus band is ``I2 in [c1 delta^2 eps^2, c2 delta^2 eps^2]``.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import least_squares

from .dynamics import (DomainError, SaddleSystem, _section_point, _vector_root, cs_circle, first_return,
                       global_map_ret2, graph_cs, graph_energy_level, restricted_return)

BAND_C1 = 0.02
BAND_C2 = 0.07


class CoordinateSingularityError(ValueError):
    """Radius inside the forbidden disc of the polar lift."""


class GeometryError(ValueError):
    """Sampled curve is not simple."""


class ConfinementError(RuntimeError):
    """An iterate left the trapping band."""


# ---------------------------------------------------------------------------------------
# twist coordinates
# ---------------------------------------------------------------------------------------


def nu_bar(eps: float) -> float:
    """Rounded scale ``1/floor(1/eps^2)``."""
    return 1.0 / math.floor(1.0 / eps**2)


def band(sys: SaddleSystem, c1: float = BAND_C1, c2: float = BAND_C2) -> tuple[float, float]:
    """``I2`` band ``[c1 delta^2 eps^2, c2 delta^2 eps^2]``."""
    s = sys.delta**2 * sys.model.eps**2
    return c1 * s, c2 * s


def admissible_alpha(sys: SaddleSystem, c1: float = BAND_C1) -> float:
    """Upper end ``c1 delta^2 eps^2 / 4`` of the area window."""
    return c1 * sys.delta**2 * sys.model.eps**2 / 4


def clockwise_angle(q2p2) -> np.ndarray:
    q2p2 = np.asarray(q2p2, dtype=float)
    return np.arctan2(-q2p2[..., 1], q2p2[..., 0])


def twist_coordinates(q2p2, eps: float, r_min: float = 0.0):
    """``(q, rho)`` of (q2, p2) samples."""
    q2p2 = np.asarray(q2p2, dtype=float)
    r = np.hypot(q2p2[..., 0], q2p2[..., 1])
    if np.any(r <= r_min):
        raise CoordinateSingularityError(f"radius {np.min(r):.3e} inside the forbidden disc {r_min:.3e}")
    nb = nu_bar(eps)
    return nb * clockwise_angle(q2p2), r / math.sqrt(nb)


def from_twist_coordinates(q, rho, eps: float) -> np.ndarray:
    nb = nu_bar(eps)
    th = np.asarray(q, dtype=float) / nb
    r = np.asarray(rho, dtype=float) * math.sqrt(nb)
    return np.stack([r * np.cos(th), -r * np.sin(th)], axis=-1)


def unwrap_increment(theta0, theta1, hint=None) -> np.ndarray:
    """Lifted angle increment ``theta1 - theta0``.

    Without ``hint`` the increment is taken in ``(-pi, pi]``; with ``hint`` (an
    approximate lifted increment) the representative nearest the hint is chosen.
    """
    d = np.asarray(theta1, dtype=float) - np.asarray(theta0, dtype=float)
    ref = 0.0 if hint is None else np.asarray(hint, dtype=float)
    return d + 2 * np.pi * np.round((ref - d) / (2 * np.pi))


@dataclass
class TwistProfile:
    """Return-map samples on an ``(n_rho, n_q)`` grid in twist coordinates."""

    rho_grid: np.ndarray
    q_grid: np.ndarray
    alpha_values: np.ndarray
    F_samples: np.ndarray
    G_samples: np.ndarray
    nu_bar: float
    eps: float
    increments: np.ndarray = field(repr=False, default=None)
    rho_images: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if np.any(np.diff(self.rho_grid) <= 0):
            raise ValueError("rho grid must be increasing")

    def twist_derivative(self) -> np.ndarray:
        """Finite-difference ``d alpha / d rho`` at the grid midpoints."""
        return np.diff(self.alpha_values) / np.diff(self.rho_grid)

    def interpolate_alpha(self, rho) -> np.ndarray:
        return np.interp(rho, self.rho_grid, self.alpha_values)


def to_twist_coordinates(starts, images, eps: float, angle_hint=None, reference: TwistProfile | None = None,
                         r_min: float = 0.0) -> TwistProfile:
    """Build a twist profile from start/image (q2, p2) samples of shape ``(n_rho, n_q, 2)``.

    Each row must be a circle ``rho = const``.  ``alpha(rho)`` is the row mean of
    the lifted ``q`` increment, or is taken from ``reference`` (the ``mu = 0``
    profile) when given; ``F`` and ``G`` are the remaining ``q`` and ``rho`` changes.
    """
    starts = np.asarray(starts, dtype=float)
    images = np.asarray(images, dtype=float)
    if starts.ndim != 3 or starts.shape != images.shape:
        raise ValueError("starts and images must have shape (n_rho, n_q, 2)")
    nb = nu_bar(eps)
    q0, rho0 = twist_coordinates(starts, eps, r_min)
    q1, rho1 = twist_coordinates(images, eps, r_min)
    hint = None if angle_hint is None else np.asarray(angle_hint)
    dq = nb * unwrap_increment(q0 / nb, q1 / nb, hint)
    rho_grid = rho0.mean(axis=1)
    if np.max(np.ptp(rho0, axis=1)) > 1e-9 * (1 + np.max(np.abs(rho_grid))):
        raise ValueError("each row of starts must lie on one circle")
    alpha = reference.interpolate_alpha(rho_grid) if reference is not None else dq.mean(axis=1)
    return TwistProfile(rho_grid=rho_grid, q_grid=q0, alpha_values=alpha, F_samples=dq - alpha[:, None],
                        G_samples=rho1 - rho0, nu_bar=nb, eps=eps, increments=dq, rho_images=rho1)


def sample_twist_profile(sys: SaddleSystem, alpha: float, n_rho: int = 6, n_q: int = 8,
                         c1: float = BAND_C1, c2: float = BAND_C2, reference: TwistProfile | None = None):
    """Sample ``Ret^alpha`` on circles spanning the band; returns ``(profile, record)``."""
    lo, hi = band(sys, c1, c2)
    eps = sys.model.eps
    r = np.sqrt(np.linspace(lo, hi, n_rho) + alpha)
    th = 2 * np.pi * (np.arange(n_q) + 0.5) / n_q
    starts = np.stack([r[:, None] * np.cos(th)[None, :], -r[:, None] * np.sin(th)[None, :]], axis=-1)
    p1 = graph_energy_level(sys, alpha, starts.reshape(-1, 2))
    x = _section_point(sys.delta, starts.reshape(-1, 2)[:, 0], p1, starts.reshape(-1, 2)[:, 1])
    rec = first_return(sys, x)
    images = rec.image.coords[:, [1, 3]].reshape(starts.shape)
    hint = rec.rotation_angle.reshape(n_rho, n_q)
    prof = to_twist_coordinates(starts, images, eps, angle_hint=hint, reference=reference,
                                r_min=math.sqrt(lo) / 2)
    return prof, rec


@dataclass
class KAMReport:
    twist_negative: bool
    twist_bounds: tuple[float, float]
    F_sup: float
    G_sup: float
    intersects_image: bool
    fitted_mu_exponent: float | None = None
    passed: bool = False

    def as_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def fitted_exponent(xs, ys) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def check_kam_hypotheses(tp: TwistProfile, mu_sweep: dict[float, TwistProfile] | None = None,
                         tol: float = 1e-12) -> KAMReport:
    """Twist sign and bounds, perturbation sizes and the intersection property of ``tp``."""
    d = tp.twist_derivative()
    neg = bool(np.all(d < 0))
    # each sampled graph rho = const meets its image iff G vanishes or changes sign along the row
    G = tp.G_samples
    meets = bool(np.all((np.min(G, axis=1) <= tol) & (np.max(G, axis=1) >= -tol)))
    slope = None
    if mu_sweep:
        mus = sorted(m for m in mu_sweep if m > 0)
        sups = [np.max(np.abs(mu_sweep[m].G_samples)) for m in mus]
        if len(mus) >= 2 and min(sups) > 0:
            slope = fitted_exponent(mus, sups)
    rep = KAMReport(neg, (float(np.min(d)), float(np.max(d))), float(np.max(np.abs(tp.F_samples))),
                    float(np.max(np.abs(G))), meets, slope)
    rep.passed = neg and meets
    return rep


# ---------------------------------------------------------------------------------------
# invariant circles
# ---------------------------------------------------------------------------------------


def continued_fraction(x: float, n: int) -> list[int]:
    out = []
    for _ in range(n):
        a = math.floor(x)
        out.append(a)
        frac = x - a
        if frac < 1e-14:
            break
        x = 1.0 / frac
    return out


def evaluate_continued_fraction(terms) -> float:
    v = float(terms[-1])
    for a in reversed(terms[:-1]):
        v = a + 1.0 / v
    return v


def noble_number(target: float, lo: float, hi: float, max_depth: int = 8) -> float:
    """Noble number (continued-fraction tail of ones) in ``[lo, hi]`` nearest ``target``."""
    best = None
    for k in range(1, max_depth + 1):
        head = continued_fraction(target, k)
        cand = evaluate_continued_fraction(head + [1] * 40)
        if lo <= cand <= hi and (best is None or abs(cand - target) < abs(best - target)):
            best = cand
        if best is not None and abs(best - target) < 1e-3 * (hi - lo):
            break
    return best


@dataclass
class ClosedCurve:
    """Ordered samples of a closed curve in a coordinate plane."""

    samples: np.ndarray
    chart: str = "q2p2"
    params: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[1] != 2 or len(self.samples) < 3:
            raise ValueError("a closed curve needs at least three planar samples")

    def segments(self):
        return self.samples, np.roll(self.samples, -1, axis=0)

    def area(self, check_simple: bool = True) -> float:
        return curve_area(self, check_simple)


@dataclass
class InvariantCircle:
    curve: ClosedCurve
    rotation_number: float
    residual: float
    rho0: float
    coefficients: np.ndarray


def _fourier_matrices(M: int, n_modes: int, phis):
    k = np.arange(1, n_modes + 1)
    return np.cos(np.outer(phis, k)), np.sin(np.outer(phis, k))


def _circle_from_params(params, n_modes, C, S):
    f = C @ params[:n_modes] + S @ params[n_modes:2 * n_modes]
    g = params[2 * n_modes] + C @ params[2 * n_modes + 1:3 * n_modes + 1] + S @ params[3 * n_modes + 1:]
    return f, g


def find_invariant_circle(amap: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]],
                          rho_band: tuple[float, float], period: float = 2 * np.pi,
                          rotation_number: float | None = None, n_modes_list=(16, 32, 64),
                          tol: float = 1e-8, max_nfev: int = 60) -> InvariantCircle | None:
    """Invariant graph ``{(phi + f(phi), rho0 + g(phi))}`` conjugate to rotation by ``2 pi omega``.

    ``amap(theta, rho)`` returns the image with a lifted ``theta``.  The rotation
    number ``omega`` (in turns of ``period``) defaults to the noble number nearest
    the mid-band rotation.  The invariance equation is solved by Levenberg-Marquardt
    on Fourier coefficients; a solution is accepted only if its residual on a grid
    four times finer than the collocation grid is below ``tol``.  Returns ``None``
    when no resolution validates.
    """
    lo, hi = rho_band

    def rot(rho):
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        th = np.linspace(0, period, 16, endpoint=False)
        t1, _ = amap(np.tile(th, len(rho)), np.repeat(rho, len(th)))
        return (t1 - np.tile(th, len(rho))).reshape(len(rho), -1).mean(axis=1) / period

    ends = rot(np.array([lo, hi]))
    w_lo, w_hi = float(np.min(ends)), float(np.max(ends))
    if rotation_number is None:
        rotation_number = noble_number(float(rot(0.5 * (lo + hi))[0]), w_lo, w_hi)
        if rotation_number is None:
            return None
    omega = rotation_number
    # integrable guess: the band radius whose mean rotation equals omega
    try:
        rho_guess = float(_vector_root(lambda r: rot(r) - omega, np.array([lo]), np.array([hi]), tol=1e-13)[0])
    except Exception:
        rho_guess = 0.5 * (lo + hi)
    shift = 2 * np.pi * omega
    best = None
    params0 = None
    for n_modes in n_modes_list:
        M = 2 * n_modes + 2
        phis = period * np.arange(M) / M
        C, S = _fourier_matrices(M, n_modes, 2 * np.pi * phis / period)
        C1, S1 = _fourier_matrices(M, n_modes, 2 * np.pi * phis / period + shift)
        P = 4 * n_modes + 1
        x0 = np.zeros(P)
        x0[2 * n_modes] = rho_guess
        if params0 is not None:
            m = (len(params0) - 1) // 4
            x0[:m] = params0[:m]
            x0[n_modes:n_modes + m] = params0[m:2 * m]
            x0[2 * n_modes:2 * n_modes + m + 1] = params0[2 * m:3 * m + 1]
            x0[3 * n_modes + 1:3 * n_modes + 1 + m] = params0[3 * m + 1:]

        def residual(p, C=C, S=S, C1=C1, S1=S1, n_modes=n_modes, phis=phis):
            f, g = _circle_from_params(p, n_modes, C, S)
            f1, g1 = _circle_from_params(p, n_modes, C1, S1)
            th, rh = amap(phis + f, g)
            return np.concatenate([th - (phis + shift * period / (2 * np.pi) + f1), rh - g1])

        def jac(p, n_modes=n_modes, residual=residual):
            h = 1e-7 * (1 + np.abs(p))
            cols = [(residual(p + h[j] * np.eye(len(p))[j]) - residual(p - h[j] * np.eye(len(p))[j])) / (2 * h[j])
                    for j in range(len(p))]
            return np.stack(cols, axis=1)

        def validate(p, n_modes=n_modes, M=M):
            # residual on a grid four times finer than the collocation grid
            fine = period * (np.arange(4 * M) + 0.5) / (4 * M)
            Cf, Sf = _fourier_matrices(4 * M, n_modes, 2 * np.pi * fine / period)
            Cf1, Sf1 = _fourier_matrices(4 * M, n_modes, 2 * np.pi * fine / period + shift)
            f, g = _circle_from_params(p, n_modes, Cf, Sf)
            f1, g1 = _circle_from_params(p, n_modes, Cf1, Sf1)
            th, rh = amap(fine + f, g)
            res = float(max(np.max(np.abs(th - (fine + shift * period / (2 * np.pi) + f1))), np.max(np.abs(rh - g1))))
            inside = bool(np.all((g >= lo) & (g <= hi)))
            return res, inside, np.stack([fine + f, g], axis=-1)

        # an exactly invariant starting guess (integrable maps) needs no solve
        res, inside, pts = validate(x0)
        if not (res <= tol and inside):
            try:
                sol = least_squares(residual, x0, jac=jac, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                                    max_nfev=max_nfev)
            except Exception:
                continue
            params0 = sol.x
            res, inside, pts = validate(sol.x)
        else:
            params0 = x0
        if res <= tol and inside:
            best = InvariantCircle(ClosedCurve(pts, chart="theta_rho"), omega, res, float(params0[2 * n_modes]), params0)
            break
    return best


def orbit_stays_in_band(amap, theta0: float, rho0: float, band_: tuple[float, float], n_iter: int = 100_000):
    """Iterate a point; returns ``(stayed, first_exit_index or None)``."""
    th, rh = np.array([theta0], float), np.array([rho0], float)
    lo, hi = band_
    for k in range(n_iter):
        th, rh = amap(th, rh)
        if not (lo <= rh[0] <= hi):
            return False, k + 1
    return True, None


def standard_map(k: float):
    """``rho' = rho + k sin theta``, ``theta' = theta + rho'`` (lifted)."""

    def amap(theta, rho):
        theta = np.asarray(theta, dtype=float)
        r1 = np.asarray(rho, dtype=float) + k * np.sin(theta)
        return theta + r1, r1

    return amap


def energy_level_annulus_map(sys: SaddleSystem, alpha: float):
    """``Ret^alpha`` as a lifted annulus map ``(theta, r) -> (theta', r')``.

    ``theta`` is the clockwise polar angle and ``r`` the radius in (q2, p2).  A
    fixed number of whole turns, read off one mid-band return, is removed from the
    lift so rotation numbers are of order one.
    """
    lo, hi = band(sys)
    r_mid = 0.5 * (math.sqrt(lo + alpha) + math.sqrt(hi + alpha))
    _, rec = restricted_return(sys, alpha, [[r_mid, 0.0]])
    turns = math.floor(float(rec.rotation_angle[0]) / (2 * np.pi))

    def amap(theta, r):
        theta = np.asarray(theta, dtype=float)
        r = np.asarray(r, dtype=float)
        img, rec = restricted_return(sys, alpha, np.stack([r * np.cos(theta), -r * np.sin(theta)], axis=-1))
        dth = unwrap_increment(theta, clockwise_angle(img), rec.rotation_angle)
        return theta + dth - 2 * np.pi * turns, np.hypot(img[:, 0], img[:, 1])

    return amap


# ---------------------------------------------------------------------------------------
# closed-curve geometry
# ---------------------------------------------------------------------------------------


def _orient(a, b, c):
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])


def segment_intersections(c1: ClosedCurve, c2: ClosedCurve, skip_adjacent: bool = False, touching: bool = False):
    """Crossings between the edges of two closed polygons.

    Proper crossings only by default; ``touching`` also counts a vertex lying on
    another edge (collinear overlaps excluded).  Returns ``(points (k, 2), i, j, s, t)``
    with edge indices ``i`` of ``c1``, ``j`` of ``c2`` and the edge parameters ``s, t``.
    """
    a0, a1 = c1.segments()
    b0, b1 = c2.segments()
    A0, A1 = a0[:, None, :], a1[:, None, :]
    B0, B1 = b0[None, :, :], b1[None, :, :]
    d1 = _orient(B0, B1, A0)
    d2 = _orient(B0, B1, A1)
    d3 = _orient(A0, A1, B0)
    d4 = _orient(A0, A1, B1)
    if touching:
        hit = (np.sign(d1) * np.sign(d2) <= 0) & (np.sign(d3) * np.sign(d4) <= 0) & (d1 != d2) & (d3 != d4)
    else:
        hit = (np.sign(d1) * np.sign(d2) < 0) & (np.sign(d3) * np.sign(d4) < 0)
    if skip_adjacent:
        n = len(a0)
        ii, jj = np.indices(hit.shape)
        near = (np.abs(ii - jj) <= 1) | (np.abs(ii - jj) == n - 1)
        hit &= ~near
    i, j = np.nonzero(hit)
    s = d1[i, j] / (d1[i, j] - d2[i, j])
    t = d3[i, j] / (d3[i, j] - d4[i, j])
    pts = a0[i] + s[:, None] * (a1[i] - a0[i])
    return pts, i, j, s, t


def is_simple(c: ClosedCurve) -> bool:
    pts, *_ = segment_intersections(c, c, skip_adjacent=True, touching=True)
    return len(pts) == 0


def _uniform_params(c: ClosedCurve) -> bool:
    if c.params is None or len(c.params) != len(c.samples):
        return False
    n = len(c.params)
    return bool(np.allclose(c.params, c.params[0] + 2 * np.pi * np.arange(n) / n, atol=1e-12))


def curve_area(c: ClosedCurve, check_simple: bool = True, method: str = "auto") -> float:
    """Signed area (positive for counter-clockwise in the plane).

    ``method="shoelace"`` is the polygon area.  ``"spectral"`` integrates
    ``(x y' - y x')/2`` with Fourier derivatives and needs samples at uniform
    parameters on a full period; ``"auto"`` uses it when available.
    """
    if check_simple and not is_simple(c):
        raise GeometryError("curve self-intersects at sampling resolution")
    x, y = c.samples[:, 0], c.samples[:, 1]
    if method == "spectral" or (method == "auto" and _uniform_params(c)):
        if not _uniform_params(c):
            raise ValueError("spectral area needs uniform parameters")
        n = len(x)
        k = np.fft.fftfreq(n, 1.0 / n)
        if n % 2 == 0:
            k[n // 2] = 0
        dx = np.real(np.fft.ifft(1j * k * np.fft.fft(x)))
        dy = np.real(np.fft.ifft(1j * k * np.fft.fft(y)))
        return float(np.pi * np.mean(x * dy - y * dx))
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def winding_number(c: ClosedCurve, point) -> int:
    """Winding number of ``c`` around ``point``."""
    d = c.samples - np.asarray(point, dtype=float)
    ang = np.arctan2(d[:, 1], d[:, 0])
    dang = np.diff(np.concatenate([ang, ang[:1]]))
    dang = (dang + np.pi) % (2 * np.pi) - np.pi
    return int(np.round(np.sum(dang) / (2 * np.pi)))


def hausdorff_distance(c1: ClosedCurve, c2: ClosedCurve) -> float:
    """Sample-to-polygon Hausdorff distance between two closed curves."""

    def one_way(a: ClosedCurve, b: ClosedCurve):
        p = a.samples[:, None, :]
        s0, s1 = b.segments()
        v = (s1 - s0)[None]
        w = p - s0[None]
        t = np.clip(np.sum(w * v, -1) / np.maximum(np.sum(v * v, -1), 1e-300), 0, 1)
        dist = np.linalg.norm(w - t[..., None] * v, axis=-1)
        return float(np.max(np.min(dist, axis=1)))

    return max(one_way(c1, c2), one_way(c2, c1))


def turning_angles(c: ClosedCurve) -> np.ndarray:
    """Turning angle at each sample."""
    p = c.samples
    v0 = p - np.roll(p, 1, axis=0)
    v1 = np.roll(p, -1, axis=0) - p
    a = np.arctan2(v1[:, 1], v1[:, 0]) - np.arctan2(v0[:, 1], v0[:, 0])
    return np.abs((a + np.pi) % (2 * np.pi) - np.pi)


def adaptive_curve(fn: Callable[[np.ndarray], np.ndarray], n0: int = 64, max_turn: float = 0.2,
                   max_points: int = 2048, chart: str = "q2p2") -> ClosedCurve:
    """Sample ``fn(theta)`` on ``[0, 2 pi)`` and insert midpoints where the turning angle exceeds ``max_turn``."""
    params = 2 * np.pi * np.arange(n0) / n0
    pts = fn(params)
    while len(params) < max_points:
        c = ClosedCurve(pts, chart, params)
        bad = turning_angles(c) > max_turn
        if not np.any(bad):
            break
        # split the two edges adjacent to each sharp vertex
        edges = np.unique(np.concatenate([np.nonzero(bad)[0], (np.nonzero(bad)[0] - 1) % len(params)]))
        nxt = np.roll(params, -1)
        nxt[-1] += 2 * np.pi
        mids = 0.5 * (params[edges] + nxt[edges]) % (2 * np.pi)
        new = fn(mids)
        params = np.concatenate([params, mids])
        pts = np.concatenate([pts, new])
        order = np.argsort(params)
        params, pts = params[order], pts[order]
    return ClosedCurve(pts, chart, params)


# ---------------------------------------------------------------------------------------
# the curves C_u and C_s and the hunt
# ---------------------------------------------------------------------------------------


def _check_alpha(sys: SaddleSystem, alpha: float, c1: float):
    if not 0 < alpha <= admissible_alpha(sys, c1) * (1 + 1e-12):
        raise DomainError(f"alpha = {alpha:.3e} outside (0, {admissible_alpha(sys, c1):.3e}]")


def unstable_points(sys: SaddleSystem, alpha: float, theta: np.ndarray):
    """Points of ``W^u(P^alpha)`` on ``Sigma_0`` pushed to ``Sigma_L``; returns the global-map record."""
    r = math.sqrt(alpha)
    z = np.stack([np.zeros_like(theta), r * np.cos(theta), np.full(theta.shape, sys.delta), r * np.sin(theta)],
                 axis=-1)
    return global_map_ret2(sys, sys.from_local(z))


def unstable_intersection_curve(sys: SaddleSystem, alpha: float, n: int = 64, c1: float = BAND_C1,
                                adaptive: bool = False) -> ClosedCurve:
    """``C_u``: the ``W^u`` circle ``{xi1 = 0, xi2^2 + eta2^2 = alpha}`` on ``Sigma_0`` transported to ``Sigma_L``."""
    _check_alpha(sys, alpha, c1)

    def fn(theta):
        return unstable_points(sys, alpha, theta).image.coords[:, [1, 3]]

    if adaptive:
        return adaptive_curve(fn, n)
    th = 2 * np.pi * np.arange(n) / n
    return ClosedCurve(fn(th), "q2p2", th)


def stable_intersection_curve(sys: SaddleSystem, alpha: float, n: int = 256) -> ClosedCurve:
    """``C_s``: ``W^s(P^alpha)`` on ``Sigma_L`` as the image of the alpha-circle."""
    return ClosedCurve(cs_circle(sys, alpha, n), "q2p2", 2 * np.pi * np.arange(n) / n)


def stable_curve_equality_locus(sys: SaddleSystem, alpha: float, n: int = 256) -> ClosedCurve:
    """``C_s`` as the locus ``{p1^H(., alpha) = g_cs}`` solved along rays of the (q2, p2) plane."""
    th = 2 * np.pi * np.arange(n) / n
    u = np.stack([np.cos(th), np.sin(th)], axis=-1)

    def fun(r):
        pts = r[:, None] * u
        return graph_energy_level(sys, alpha, pts, check_window=False) - graph_cs(sys, pts)

    r0 = math.sqrt(alpha)
    r = _vector_root(fun, np.full(n, 0.5 * r0), np.full(n, 1.5 * r0), tol=1e-17)
    return ClosedCurve(r[:, None] * u, "q2p2", th)


def section_membership(sys: SaddleSystem, alpha: float, q2p2) -> np.ndarray:
    """``eta1`` of the section point on the energy level of ``P^alpha`` (zero on ``C_s``, positive outside)."""
    q2p2 = np.atleast_2d(q2p2)
    p1 = graph_energy_level(sys, alpha, q2p2, check_window=False)
    return sys.to_local(_section_point(sys.delta, q2p2[:, 0], p1, q2p2[:, 1]))[:, 2]


@dataclass
class HuntResult:
    alpha: float
    loop_count: int | None
    intersections: np.ndarray
    residuals: np.ndarray
    curves: list
    areas: list
    stable_curve: ClosedCurve
    coincident: bool = False
    status: str = "ok"

    def manifest(self, sys: SaddleSystem) -> dict:
        return {"alpha": self.alpha, "epsilon": sys.model.eps, "delta": sys.delta, "mu": sys.model.mu,
                "loop_count": self.loop_count, "areas": [float(a) for a in self.areas],
                "intersections": np.asarray(self.intersections).tolist(),
                "residuals": np.asarray(self.residuals).tolist(), "coincident": self.coincident,
                "status": self.status}


def hunt_homoclinic(sys: SaddleSystem, alpha: float, max_loops: int = 5, n: int = 64, c1: float = BAND_C1,
                    c2: float = BAND_C2, coincide_tol: float = 1e-11) -> HuntResult:
    """Iterate ``C_u`` under ``Ret^alpha`` until it meets ``C_s``.

    Membership of a ``C_u`` sample in ``C_s`` is decided by the sign of ``eta1``
    in the local chart (``C_s`` is ``{eta1 = 0}`` on the energy level).  Sign
    changes along the curve are polished by regula falsi in the curve parameter.
    Curves whose samples all satisfy ``|eta1| <= coincide_tol`` are reported as
    coincident (the integrable case) with every sample an intersection point.
    """
    _check_alpha(sys, alpha, c1)
    cs = stable_intersection_curve(sys, alpha)
    _, I2_hi = band(sys, c1, c2)
    theta = 2 * np.pi * np.arange(n) / n
    rec = unstable_points(sys, alpha, theta)
    x = rec.image.coords
    curves, areas = [], []

    def chain(th, loops):
        y = unstable_points(sys, alpha, th).image.coords
        for _ in range(loops):
            y = first_return(sys, y).image.coords
        return y

    for loop in range(1, max_loops + 1):
        curve = ClosedCurve(x[:, [1, 3]], "q2p2", theta)
        curves.append(curve)
        areas.append(abs(curve_area(curve, check_simple=False)))
        if np.any(x[:, 1] ** 2 + x[:, 3] ** 2 > I2_hi + alpha):
            raise ConfinementError(f"iterate {loop} left the band I2 <= {I2_hi + alpha:.3e}")
        eta1 = sys.to_local(x)[:, 2]
        if np.all(np.abs(eta1) <= coincide_tol):
            res = np.abs(eta1)
            return HuntResult(alpha, loop, curve.samples, res, curves, areas, cs, coincident=True)
        sign = np.sign(eta1)
        flips = np.nonzero(sign * np.roll(sign, -1) <= 0)[0]
        if len(flips):
            a = theta[flips]
            b = np.where(flips + 1 < n, theta[(flips + 1) % n], theta[(flips + 1) % n] + 2 * np.pi)
            k = loop - 1

            def g(t):
                return sys.to_local(chain(t % (2 * np.pi), k))[:, 2]

            tstar = _vector_root(g, a, b, eta1[flips], eta1[(flips + 1) % n], tol=1e-13, maxit=30)
            pts = chain(tstar % (2 * np.pi), k)
            res = np.abs(sys.to_local(pts)[:, 2])
            return HuntResult(alpha, loop, pts[:, [1, 3]], res, curves, areas, cs)
        if np.all(eta1 < 0):
            return HuntResult(alpha, None, np.zeros((0, 2)), np.zeros(0), curves, areas, cs,
                              status="unstable curve strictly inside the stable curve")
        x = first_return(sys, x).image.coords
    return HuntResult(alpha, None, np.zeros((0, 2)), np.zeros(0), curves, areas, cs, status="max_loops reached")


def write_curve_csv(path, curve: ClosedCurve):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "q2", "p2", "chart"])
        for i, (a, b) in enumerate(curve.samples):
            w.writerow([i, repr(float(a)), repr(float(b)), curve.chart])
    return path


def read_curve_csv(path) -> ClosedCurve:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return ClosedCurve(np.array([[float(r["q2"]), float(r["p2"])] for r in rows]), rows[0]["chart"] if rows else "q2p2")
