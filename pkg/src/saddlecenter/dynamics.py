"""Flows, sections and return maps of the model Hamiltonian.

Conventions
-----------
Phase points are ``(q1, q2, p1, p2)`` in the Jordan chart of the model (``q1``
stable, ``p1`` unstable direction) or ``(xi1, xi2, eta1, eta2)`` in the local
chart.  The elliptic term ``(Omega/2)(q2^2 + p2^2)`` generates the clockwise
rotation ``Rot(theta): (q2, p2) -> (q2 cos theta + p2 sin theta, -q2 sin theta + p2 cos theta)``
with ``theta = Omega t``.  The slow system integrates the remaining field in
the co-rotating frame, which removes the stiff rotation exactly.

Sections: ``Sigma_L = {q1 = delta}`` (entry, crossed with ``q1`` decreasing) and
``Sigma_0 = F({eta1 = delta})`` (exit of the local chart).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .birkhoff_nf import HamiltonianModel, jordan_from_underline
from .integrators import gauss_step
from .moser_local import LocalNormalization, local_normalization

CHARTS = ("original", "scaled", "local")


class DomainError(ValueError):
    """A point lies outside the domain where a map is defined."""


class CenterStableError(DomainError):
    """``eta1 <= 0``: the point lies on or beyond the centre-stable manifold."""


class NoCrossingError(RuntimeError):
    """The trajectory did not reach the section inside the time bracket."""


class TangencyError(RuntimeError):
    """The crossing is tangential (vanishing time derivative at the root)."""


class StiffnessError(RuntimeError):
    """Step size too small for the requested budget."""


@dataclass
class PhasePoint:
    """One or many phase points (shape (..., 4)) with a chart tag."""

    coords: np.ndarray
    chart: str = "original"

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if self.coords.shape[-1] != 4:
            raise ValueError("phase points have four coordinates")
        if self.chart not in CHARTS:
            raise ValueError(f"unknown chart {self.chart!r}")


@dataclass
class SectionSpec:
    kind: str
    delta: float
    chart: str = "original"

    def __post_init__(self):
        if self.kind not in ("SigmaL", "Sigma0"):
            raise ValueError("section kind is SigmaL or Sigma0")
        if not self.delta > 0:
            raise ValueError("delta must be positive")


@dataclass
class ReturnRecord:
    """Start and image of a (batched) section-to-section map."""

    start: PhasePoint
    image: PhasePoint
    T: np.ndarray
    rotation_angle: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _coords(x) -> np.ndarray:
    return x.coords if isinstance(x, PhasePoint) else np.asarray(x, dtype=float)


# ---------------------------------------------------------------------------------------
# flows
# ---------------------------------------------------------------------------------------


def rotate(x: np.ndarray, theta) -> np.ndarray:
    """Clockwise rotation of the (q2, p2) pair by ``theta``: the flow of ``(Omega/2) I2`` for ``theta = Omega t``."""
    x = np.asarray(x)
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    out = x.copy()
    out[..., 1] = c * x[..., 1] + s * x[..., 3]
    out[..., 3] = -s * x[..., 1] + c * x[..., 3]
    return out


def slow_field(H: HamiltonianModel) -> Callable:
    """Vector field of the co-rotating (slow) system ``y' = Rot(-Omega t) X_rest(Rot(Omega t) y)``."""
    Om = H.Omega

    def f(t, y):
        th = Om * np.asarray(t, dtype=float)
        return rotate(H.vector_field(rotate(y, th), rest=True), -th)

    return f


def full_field(H: HamiltonianModel) -> Callable:
    return lambda t, x: H.vector_field(x)


def default_direct_step(H: HamiltonianModel) -> float:
    """Step resolving the fast rotation for direct integration."""
    return min(1e-3, H.eps**2 / 20)


def rotation_split(H: HamiltonianModel, x0, t: float, h: float = 0.01, stages: int = 3,
                   tol: float = 1e-14) -> tuple[float, np.ndarray]:
    """Integrate the slow system; returns ``(Omega t, y(t))`` with ``x(t) = Rot(Omega t) y(t)``."""
    y = _coords(x0).astype(float)
    if t == 0:
        return 0.0, y.copy()
    n = max(1, int(math.ceil(abs(t) / h - 1e-12)))
    step = t / n
    f = slow_field(H)
    for k in range(n):
        y = gauss_step(f, k * step, y, step, stages=stages, tol=tol)
    return H.Omega * t, y


def integrate(H: HamiltonianModel, x0, t: float, tol: float = 1e-10, method: str = "split",
              h: float | None = None, stages: int = 3) -> np.ndarray:
    """Phase point(s) at time ``t``.

    ``method="split"`` (default) integrates the slow system and re-applies the
    rotation analytically; ``method="direct"`` integrates the full field with the
    fast-rotation step ``min(1e-3, eps^2/20)``.
    """
    x = _coords(x0)
    if method == "split":
        angle, y = rotation_split(H, x, t, h=h or 0.01, stages=stages, tol=min(tol, 1e-13) * 1e-1)
        return rotate(y, angle)
    if method != "direct":
        raise ValueError("method is 'split' or 'direct'")
    step = h or default_direct_step(H)
    if step < 1e-7:
        raise StiffnessError(f"step {step:.2e} below the budget floor")
    n = max(1, int(math.ceil(abs(t) / step - 1e-12)))
    hh = t / n
    f = full_field(H)
    y = x.astype(float)
    for k in range(n):
        y = gauss_step(f, k * hh, y, hh, stages=stages, tol=min(tol, 1e-13) * 1e-1)
    return y


def trajectory(H: HamiltonianModel, x0, t: float, h: float = 0.01, stride: int = 1):
    """Sampled trajectory ``(times, states)`` of one or many initial conditions (split method)."""
    y = _coords(x0).astype(float)
    n = max(1, int(math.ceil(abs(t) / h - 1e-12)))
    step = t / n
    f = slow_field(H)
    ts, xs = [0.0], [y.copy()]
    for k in range(n):
        y = gauss_step(f, k * step, y, step, tol=1e-14)
        if (k + 1) % stride == 0 or k == n - 1:
            ts.append((k + 1) * step)
            xs.append(rotate(y, H.Omega * (k + 1) * step))
    return np.array(ts), np.array(xs)


# ---------------------------------------------------------------------------------------
# the cubic homoclinic
# ---------------------------------------------------------------------------------------


def analytic_homoclinic(t, c3: float):
    """Homoclinic of ``q'' = q - 3 c3 q^2`` (underlined chart), amplitude ``A = 1/c3``.

    ``q(t) = A / (1 + cosh t)``, ``p(t) = -A sinh t / (1 + cosh t)^2``.
    """
    if not c3 > 0:
        raise ValueError("c3 must be positive")
    t = np.asarray(t, dtype=float)
    A = 1.0 / c3
    ch = np.cosh(t)
    q = A / (1 + ch)
    p = -A * np.sinh(t) / (1 + ch) ** 2
    return q, p


def homoclinic_point(t, c3: float) -> np.ndarray:
    """The analytic homoclinic as Jordan-chart phase points ``(q1, 0, p1, 0)``."""
    q, p = analytic_homoclinic(t, c3)
    u = np.stack([q, np.zeros_like(q), p, np.zeros_like(q)], axis=-1)
    return jordan_from_underline(u)


def homoclinic_ode_residual(t, c3: float) -> np.ndarray:
    """``q'' - q + 3 c3 q^2`` with ``q''`` from the closed form."""
    t = np.asarray(t, dtype=float)
    A = 1.0 / c3
    ch, sh = np.cosh(t), np.sinh(t)
    q = A / (1 + ch)
    # d/dt [-A sinh / (1 + cosh)^2] = -A [cosh (1 + cosh) - 2 sinh^2] / (1 + cosh)^3
    qdd = -A * (ch * (1 + ch) - 2 * sh**2) / (1 + ch) ** 3
    return qdd - q + 3 * c3 * q**2


def homoclinic_time_at(c3: float, coord: int, value: float, branch: str) -> float:
    """Time at which the analytic homoclinic has Jordan coordinate ``coord`` equal to ``value``.

    ``branch="out"`` searches ``t < 0`` (leaving the origin), ``"in"`` searches ``t > 0``.
    """
    from scipy.optimize import brentq

    g = lambda s: homoclinic_point(s, c3)[coord] - value  # noqa: E731
    if branch == "in":
        return brentq(g, 0.0, 60.0, xtol=1e-15)
    return brentq(g, -60.0, 0.0, xtol=1e-15)


# ---------------------------------------------------------------------------------------
# section crossings
# ---------------------------------------------------------------------------------------


def _vector_root(fun: Callable[[np.ndarray], np.ndarray], a: np.ndarray, b: np.ndarray,
                 fa: np.ndarray | None = None, fb: np.ndarray | None = None,
                 tol: float = 1e-14, maxit: int = 200) -> np.ndarray:
    """Batched Illinois regula falsi for sign-changing brackets ``[a, b]``."""
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    fa = fun(a) if fa is None else np.array(fa, dtype=float)
    fb = fun(b) if fb is None else np.array(fb, dtype=float)
    bad = np.sign(fa) * np.sign(fb) > 0
    if np.any(bad):
        raise NoCrossingError(f"{int(np.sum(bad))} brackets without a sign change")
    side = np.zeros(a.shape, dtype=int)
    c = b.copy()
    for _ in range(maxit):
        den = fb - fa
        c = np.where(den != 0, (a * fb - b * fa) / np.where(den != 0, den, 1.0), 0.5 * (a + b))
        fc = fun(c)
        done = (np.abs(fc) <= tol) | (np.abs(b - a) <= tol * (1 + np.abs(c)))
        if np.all(done):
            break
        left = np.sign(fc) == np.sign(fa)
        # Illinois modification halves the stale endpoint value
        a_new = np.where(left, c, a)
        fa_new = np.where(left, fc, np.where(side == -1, fa / 2, fa))
        b_new = np.where(left, b, c)
        fb_new = np.where(left, np.where(side == 1, fb / 2, fb), fc)
        side = np.where(left, 1, -1)
        a, fa, b, fb = (np.where(done, v_old, v_new) for v_old, v_new in
                        ((a, a_new), (fa, fa_new), (b, b_new), (fb, fb_new)))
    return c


def return_time(H: HamiltonianModel, x0, section: SectionSpec, bracket: tuple[float, float] = (0.0, 200.0),
                h: float = 0.01, tol: float = 1e-12, chart: LocalNormalization | None = None,
                require_excursion: bool = True):
    """First crossing time(s) of the section inside ``bracket``.

    ``Sigma_L`` is crossed with ``q1`` decreasing; with ``require_excursion`` the
    crossing must follow a passage through ``q1 > delta``.  ``Sigma_0`` (needs
    ``chart``) is crossed with ``eta1`` increasing.  Returns ``(T, x(T), slow y(T))``.
    """
    x = np.atleast_2d(_coords(x0)).astype(float)
    t_lo, t_hi = bracket
    if t_hi <= t_lo:
        raise ValueError("empty time bracket")
    delta = section.delta
    if section.kind == "SigmaL":
        def g(state):
            return state[..., 0] - delta

        def gdot(t, state):
            return H.vector_field(state)[..., 0]

        direction = -1
    else:
        if chart is None:
            raise ValueError("Sigma0 crossings need the local chart")

        def g(state):
            return chart.F_inverse(state)[..., 2] - delta

        def gdot(t, state):
            eps_ = 1e-7
            v = H.vector_field(state)
            return (g(state + eps_ * v) - g(state - eps_ * v)) / (2 * eps_)

        direction = 1
    f = slow_field(H)
    Om = H.Omega
    y = x.copy()
    t = 0.0
    if t_lo > 0:
        _, y = rotation_split(H, y, t_lo, h=h)
        t = t_lo
    n = x.shape[0]
    found = np.zeros(n, dtype=bool)
    armed = np.zeros(n, dtype=bool) if (require_excursion and section.kind == "SigmaL") else np.ones(n, dtype=bool)
    t_start = np.zeros(n)
    y_start = np.zeros_like(y)
    g_prev = g(rotate(y, Om * t))
    while not np.all(found):
        if t >= t_hi - 1e-15:
            raise NoCrossingError(f"{int(np.sum(~found))} trajectories did not reach the section by t = {t_hi}")
        step = min(h, t_hi - t)
        y_new = gauss_step(f, t, y, step, tol=1e-14)
        t_new = t + step
        g_new = g(rotate(y_new, Om * t_new))
        if section.kind == "SigmaL" and require_excursion:
            armed |= g_new > 0
        cross = ~found & armed & (np.sign(g_prev) == -direction) & (np.sign(g_new) != -direction)
        t_start[cross] = t
        y_start[cross] = y[cross]
        found |= cross
        y, t, g_prev = y_new, t_new, g_new
    # polish inside the bracketing step: Newton on the sub-step length, safeguarded by bisection
    lo = np.zeros(n)
    hi = np.full(n, h)
    hi = np.minimum(hi, t_hi - t_start)

    def sub_state(tau):
        ys = gauss_step(f, t_start, y_start, tau, tol=1e-15)
        return ys, rotate(ys, Om * (t_start + tau))

    g_lo = g(rotate(y_start, Om * t_start))
    tau = 0.5 * hi
    for _ in range(60):
        ys, xs = sub_state(tau)
        gv = g(xs)
        if np.max(np.abs(gv)) <= 1e-2 * tol:
            break
        d = gdot(t_start + tau, xs)
        if np.any(np.abs(d) < 1e-14):
            raise TangencyError("section crossing is tangential")
        pos = np.sign(gv) == np.sign(g_lo)
        lo = np.where(pos, tau, lo)
        hi = np.where(pos, hi, tau)
        tau_new = tau - gv / d
        tau_new = np.where((tau_new <= lo) | (tau_new >= hi), 0.5 * (lo + hi), tau_new)
        if np.max(np.abs(tau_new - tau)) <= 1e-16:
            break
        tau = tau_new
    ys, xs = sub_state(tau)
    T = t_start + tau
    res = np.abs(g(xs))
    if np.max(res) > max(tol, 1e-11):
        raise TangencyError(f"section residual {np.max(res):.3e} after polishing")
    return T, xs, ys


# ---------------------------------------------------------------------------------------
# the saddle-centre system: model, local chart and sections
# ---------------------------------------------------------------------------------------


@dataclass
class SaddleSystem:
    """Model Hamiltonian with its local chart and section offset."""

    model: HamiltonianModel
    chart: LocalNormalization
    delta: float = 0.05
    h: float = 0.01
    t_max: float = 200.0
    checks: dict = field(default_factory=dict)

    @classmethod
    def build(cls, model: HamiltonianModel, delta: float = 0.05, max_degree: int = 10, h: float = 0.01,
              chart: LocalNormalization | None = None) -> "SaddleSystem":
        ln = chart or local_normalization(model, max_degree)
        sys = cls(model, ln, delta, h)
        sys.checks = {"delta_inside_chart": bool(2 * delta < ln.radius) if np.isfinite(ln.radius) else None,
                      "chart_radius": ln.radius}
        return sys

    @property
    def sigma_L(self) -> SectionSpec:
        return SectionSpec("SigmaL", self.delta)

    @property
    def sigma_0(self) -> SectionSpec:
        return SectionSpec("Sigma0", self.delta)

    def to_local(self, x) -> np.ndarray:
        return self.chart.F_inverse(_coords(x))

    def from_local(self, z) -> np.ndarray:
        return self.chart.F(_coords(z))


def _check(cond: np.ndarray, message: str, values: np.ndarray):
    if not np.all(cond):
        bad = np.nonzero(~np.asarray(cond))[0]
        raise DomainError(f"{message}: {len(bad)} offending sample(s), first index {bad[0]}, value {values[bad[0]]!r}")


def global_map_ret2(sys: SaddleSystem, x0, check_domain: bool = True) -> ReturnRecord:
    """Follow the flow from ``Sigma_0`` around the loop to ``Sigma_L``."""
    x = np.atleast_2d(_coords(x0)).astype(float)
    d = sys.delta
    z = sys.to_local(x)
    if check_domain:
        _check(np.abs(z[:, 2] - d) <= 1e-9 * (1 + d), "start is not on Sigma_0", z[:, 2])
        _check((z[:, 0] >= -1e-12) & (z[:, 0] <= d / 16 * (1 + 1e-12)), "xi1 outside [0, delta/16]", z[:, 0])
        _check(np.hypot(z[:, 1], z[:, 3]) <= d / 2 * (1 + 1e-12), "elliptic radius above delta/2",
               np.hypot(z[:, 1], z[:, 3]))
    T, xT, _ = return_time(sys.model, x, sys.sigma_L, (0.0, sys.t_max), h=sys.h)
    I0, I1 = sys.model.I2(x), sys.model.I2(xT)
    H = sys.model
    scale = H.mu * H.nu_hat * H.eps**H.N0
    diag = {"dI2": I1 - I0, "section_residual": np.abs(xT[:, 0] - d),
            "energy_drift": np.abs(H.energy(xT) - H.energy(x)),
            "in_ball": np.sqrt(xT[:, 1] ** 2 + xT[:, 2] ** 2 + xT[:, 3] ** 2) <= d,
            "T_min": float(np.min(T)), "T_max": float(np.max(T))}
    if scale > 0:
        diag["M2_fit"] = float(np.max(np.abs(I1 - I0) / (scale * T)))
    return ReturnRecord(PhasePoint(x), PhasePoint(xT), T, H.Omega * T, diag)


def local_map(sys: SaddleSystem, x0, check_domain: bool = True) -> ReturnRecord:
    """Transport from ``Sigma_L`` to ``Sigma_0`` along the integrable flow of the local chart."""
    x = np.atleast_2d(_coords(x0)).astype(float)
    d = sys.delta
    z = sys.to_local(x)
    eta1 = z[:, 2]
    if np.any(eta1 <= 0):
        bad = np.nonzero(eta1 <= 0)[0]
        raise CenterStableError(f"eta1 <= 0 at {len(bad)} sample(s): the orbit does not leave along the loop")
    if check_domain:
        _check(eta1 <= d / 24 * (1 + 1e-12), "eta1 above delta/24", eta1)
        _check(np.hypot(z[:, 1], z[:, 3]) <= d * (1 + 1e-12), "elliptic radius above delta",
               np.hypot(z[:, 1], z[:, 3]))
    rates = sys.chart.rates(z)
    k1, k2 = rates[:, 0], rates[:, 1]
    if np.any(k1 >= 0):
        raise DomainError("hyperbolic rate is not negative")
    T = np.log(d / eta1) / np.abs(k1)
    zT = sys.chart.flow(z, T)
    zT[:, 2] = d
    xT = sys.from_local(zT)
    inv0, inv1 = sys.chart.invariants(z), sys.chart.invariants(zT)
    diag = {"invariant_change": np.max(np.abs(inv1 - inv0), axis=1), "local_start": z, "local_image": zT,
            "chart_roundtrip": np.max(np.abs(sys.from_local(z) - x), axis=1)}
    return ReturnRecord(PhasePoint(x), PhasePoint(xT), T, 2 * k2 * T, diag)


def first_return(sys: SaddleSystem, x0, check_domain: bool = True) -> ReturnRecord:
    """``Ret = Ret_2 o local_map`` from ``Sigma_L`` back to ``Sigma_L``."""
    loc = local_map(sys, x0, check_domain=check_domain)
    glob = global_map_ret2(sys, loc.image, check_domain=check_domain)
    x = loc.start.coords
    H = sys.model
    diag = {"T_local": loc.T, "T_global": glob.T, "dI2": H.I2(glob.image.coords) - H.I2(x),
            "local": loc.diagnostics, "global": glob.diagnostics}
    return ReturnRecord(loc.start, glob.image, loc.T + glob.T, loc.rotation_angle + glob.rotation_angle, diag)


# ---------------------------------------------------------------------------------------
# graph representations on Sigma_L
# ---------------------------------------------------------------------------------------


def _section_point(delta: float, q2, p1, p2) -> np.ndarray:
    q2, p1, p2 = np.broadcast_arrays(np.asarray(q2, float), np.asarray(p1, float), np.asarray(p2, float))
    return np.stack([np.full(q2.shape, delta), q2, p1, p2], axis=-1)


def graph_cs(sys: SaddleSystem, q2p2) -> np.ndarray:
    """``p1 = g_cs(q2, p2)``: the trace of the centre-stable manifold ``{eta1 = 0}`` on ``Sigma_L``."""
    q2p2 = np.atleast_2d(np.asarray(q2p2, dtype=float))
    d = sys.delta
    if np.any(np.hypot(q2p2[:, 0], q2p2[:, 1]) > d):
        raise DomainError("(q2, p2) outside B(0, delta)")

    def fun(p1):
        return sys.to_local(_section_point(d, q2p2[:, 0], p1, q2p2[:, 1]))[:, 2]

    a, b = np.full(len(q2p2), -d), np.full(len(q2p2), d)
    try:
        return _vector_root(fun, a, b, tol=1e-15)
    except NoCrossingError as exc:
        raise DomainError("no root of eta1 in [-delta, delta]: radius too large") from exc


def periodic_orbit_energy(sys: SaddleSystem | LocalNormalization, alpha) -> np.ndarray:
    """Energy ``K(0, alpha)`` of the periodic orbit ``{xi1 = eta1 = 0, xi2^2 + eta2^2 = alpha}``."""
    chart = sys.chart if isinstance(sys, SaddleSystem) else sys
    alpha = np.asarray(alpha, dtype=float)
    return chart.K(np.stack([np.zeros_like(alpha), alpha], axis=-1))


def energy_window(sys: SaddleSystem, alpha: float, q2p2) -> np.ndarray:
    """``h~ = (Omega/2) I2 - H(P^alpha)`` at the given (q2, p2)."""
    q2p2 = np.atleast_2d(np.asarray(q2p2, dtype=float))
    I2 = q2p2[:, 0] ** 2 + q2p2[:, 1] ** 2
    return sys.model.Omega / 2 * I2 - periodic_orbit_energy(sys, alpha)


def graph_energy_level(sys: SaddleSystem, alpha: float, q2p2, check_window: bool = True) -> np.ndarray:
    """``p1 = p1^H(q2, p2, alpha)`` solving ``H(delta, q2, p1, p2) = H(P^alpha)`` on ``[-delta, delta]``."""
    q2p2 = np.atleast_2d(np.asarray(q2p2, dtype=float))
    d = sys.delta
    if check_window:
        ht = energy_window(sys, alpha, q2p2)
        if np.any(np.abs(ht) > d**2):
            raise DomainError(f"|h~| = {np.max(np.abs(ht)):.3e} exceeds delta^2 = {d**2:.3e}")
    h = periodic_orbit_energy(sys, alpha)

    def fun(p1):
        return sys.model.energy(_section_point(d, q2p2[:, 0], p1, q2p2[:, 1])) - h

    a, b = np.full(len(q2p2), -d), np.full(len(q2p2), d)
    return _vector_root(fun, a, b, tol=1e-16)


def cs_circle(sys: SaddleSystem, alpha: float, n: int = 256, phase: float = 0.0) -> np.ndarray:
    """``C_s``: ``W^s(P^alpha)`` traced on ``Sigma_L`` as the image of the alpha-circle.

    For each angle the point ``F(xi1, sqrt(alpha) cos, 0, sqrt(alpha) sin)`` is
    pushed to ``q1 = delta`` by a one-dimensional solve in ``xi1``.  Returns
    (q2, p2) samples of shape (n, 2).
    """
    th = phase + 2 * np.pi * np.arange(n) / n
    r = math.sqrt(alpha)
    d = sys.delta

    def fun(xi1):
        z = np.stack([xi1, r * np.cos(th), np.zeros_like(th), r * np.sin(th)], axis=-1)
        return sys.from_local(z)[:, 0] - d

    xi1 = _vector_root(fun, np.full(n, 0.2 * d), np.full(n, 3.0 * d), tol=1e-15)
    z = np.stack([xi1, r * np.cos(th), np.zeros_like(th), r * np.sin(th)], axis=-1)
    x = sys.from_local(z)
    return x[:, [1, 3]]


def restricted_return(sys: SaddleSystem, alpha: float, q2p2, check_domain: bool = True):
    """``Ret^alpha`` on ``Sigma_L`` in the (q2, p2) coordinates of the energy level of ``P^alpha``.

    Returns ``(image (n, 2), ReturnRecord)``.
    """
    q2p2 = np.atleast_2d(np.asarray(q2p2, dtype=float))
    p1 = graph_energy_level(sys, alpha, q2p2, check_window=check_domain)
    x = _section_point(sys.delta, q2p2[:, 0], p1, q2p2[:, 1])
    rec = first_return(sys, x, check_domain=check_domain)
    return rec.image.coords[:, [1, 3]], rec


def restricted_jacobian(sys: SaddleSystem, alpha: float, q2p2, h: float = 1e-6) -> np.ndarray:
    """Jacobian of ``Ret^alpha`` in (q2, p2), fourth-order central differences in one batch."""
    q2p2 = np.atleast_2d(np.asarray(q2p2, dtype=float))
    n = len(q2p2)
    offs = [(-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12)]
    pts = [q2p2 + k * h * e for e in np.eye(2) for k, _ in offs]
    img, _ = restricted_return(sys, alpha, np.concatenate(pts))
    img = img.reshape(2, len(offs), n, 2)
    cols = [sum(w * img[j, i] for i, (_, w) in enumerate(offs)) / h for j in range(2)]
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------------------
# dumps
# ---------------------------------------------------------------------------------------


def write_orbit_csv(path, H: HamiltonianModel, times, states, chart: str = "original") -> Path:
    path = Path(path)
    states = np.asarray(states)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "chart", "q1", "p1", "q2", "p2", "H", "I2"])
        for t, x in zip(times, states):
            w.writerow([repr(float(t)), chart, repr(float(x[0])), repr(float(x[2])), repr(float(x[1])),
                        repr(float(x[3])), repr(float(H.energy(x))), repr(float(x[1] ** 2 + x[3] ** 2))])
    return path


def read_orbit_csv(path):
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    t = np.array([float(r["t"]) for r in rows])
    x = np.array([[float(r["q1"]), float(r["q2"]), float(r["p1"]), float(r["p2"])] for r in rows])
    return t, x


def write_return_csv(path, record: ReturnRecord) -> Path:
    path = Path(path)
    s, im = record.start.coords, record.image.coords
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "q1", "p1", "q2", "p2", "q1_image", "p1_image", "q2_image", "p2_image", "T",
                    "rotation_angle"])
        for i in range(len(s)):
            w.writerow([i, *(repr(float(v)) for v in (s[i, 0], s[i, 2], s[i, 1], s[i, 3])),
                        *(repr(float(v)) for v in (im[i, 0], im[i, 2], im[i, 1], im[i, 3])),
                        repr(float(record.T[i])), repr(float(record.rotation_angle[i]))])
    return path


def read_return_csv(path):
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    start = np.array([[float(r["q1"]), float(r["q2"]), float(r["p1"]), float(r["p2"])] for r in rows])
    image = np.array([[float(r["q1_image"]), float(r["q2_image"]), float(r["p1_image"]), float(r["p2_image"])]
                      for r in rows])
    T = np.array([float(r["T"]) for r in rows])
    ang = np.array([float(r["rotation_angle"]) for r in rows])
    return start, image, T, ang
