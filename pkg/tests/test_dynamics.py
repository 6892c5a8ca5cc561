"""Flows, sections, local/global maps and graph representations on the section."""

from __future__ import annotations

import math

import numpy as np
import pytest

from saddlecenter.birkhoff_nf import HamiltonianModel
from saddlecenter.dynamics import (
    CenterStableError,
    DomainError,
    NoCrossingError,
    SaddleSystem,
    SectionSpec,
    analytic_homoclinic,
    energy_window,
    first_return,
    global_map_ret2,
    graph_cs,
    graph_energy_level,
    homoclinic_ode_residual,
    homoclinic_point,
    homoclinic_time_at,
    integrate,
    local_map,
    periodic_orbit_energy,
    read_orbit_csv,
    read_return_csv,
    restricted_jacobian,
    restricted_return,
    return_time,
    rotate,
    rotation_split,
    trajectory,
    write_orbit_csv,
    write_return_csv,
)
from saddlecenter.moser_local import local_normalization

from .conftest import DESK_DELTA, desk_system

D = DESK_DELTA


def toy_model(eps=0.5, omega=1.0, c3=0.0):
    return HamiltonianModel(eps, 0.0, 0.0, 5, omega, c3=c3, rho0=1.0)


def section_points(sys, q2p2, offset):
    """Points on Sigma_L at height ``offset`` above the centre-stable trace."""
    q2p2 = np.atleast_2d(q2p2)
    g = graph_cs(sys, q2p2)
    return np.stack([np.full(len(q2p2), sys.delta), q2p2[:, 0], g + offset, q2p2[:, 1]], axis=-1)


def sigma0_points(sys, xi1, alpha, theta):
    xi1, theta = np.broadcast_arrays(np.asarray(xi1, float), np.asarray(theta, float))
    r = math.sqrt(alpha)
    z = np.stack([xi1, r * np.cos(theta), np.full(xi1.shape, sys.delta), r * np.sin(theta)], axis=-1)
    return sys.from_local(z)


# -- flows -----------------------------------------------------------------------------


def test_rotation_block_angle():
    # (Omega/2) I2 with Omega = omega/eps^2 = 4 turns (q2, p2) clockwise by 4 rad in unit time
    H = toy_model(eps=0.5, omega=1.0, c3=0.5)
    x0 = np.array([0.0, 0.01, 0.0, 0.02])
    x1 = integrate(H, x0, 1.0)
    c, s = math.cos(4.0), math.sin(4.0)
    expected = np.array([0.0, c * 0.01 + s * 0.02, 0.0, -s * 0.01 + c * 0.02])
    assert np.max(np.abs(x1 - expected)) < 1e-13
    ang, _ = rotation_split(H, x0, 1.0)
    assert ang == pytest.approx(4.0)


def test_saddle_block():
    H = toy_model()
    x0 = np.array([0.1, 0.0, 0.2, 0.0])
    x1 = integrate(H, x0, 0.5)
    assert np.allclose(x1, [0.1 * math.exp(-0.5), 0.0, 0.2 * math.exp(0.5), 0.0], atol=1e-13, rtol=0)


def test_origin_stays_fixed(desk):
    assert np.all(integrate(desk.model, np.zeros(4), 3.0) == 0)


def test_split_matches_direct():
    H = desk_system(eps=0.3).model
    x0 = np.array([0.02, 0.01, 0.03, 0.005])
    a = integrate(H, x0, 1.0, tol=1e-10, method="split")
    b = integrate(H, x0, 1.0, tol=1e-10, method="direct")
    assert np.max(np.abs(a - b)) <= 1e-9


def test_I2_frozen_without_mu(desk):
    x0 = np.array([[0.03, 0.01, -0.02, 0.02], [0.0, 0.02, 0.05, -0.01]])
    _, y = rotation_split(desk.model, x0, 5.0)
    I0 = x0[:, 1] ** 2 + x0[:, 3] ** 2
    assert np.max(np.abs(y[:, 1] ** 2 + y[:, 3] ** 2 - I0)) < 1e-12


def test_energy_conservation(desk_factory):
    H = desk_factory(mu=1.0).model
    x0 = np.array([0.03, 0.01, -0.02, 0.02])
    ts, xs = trajectory(H, x0, 10.0, stride=100)
    drift = np.abs(H.energy(xs) - H.energy(x0))
    assert np.all(drift <= 1e-10 * np.maximum(ts, 1e-12) + 1e-15)


# -- the cubic homoclinic --------------------------------------------------------------


def test_homoclinic_residual():
    t = np.linspace(-10, 10, 2001)
    for c3 in (0.5, 2 * math.sqrt(2)):
        assert np.max(np.abs(homoclinic_ode_residual(t, c3))) <= 1e-12


def test_homoclinic_amplitude_oracle():
    q, p = analytic_homoclinic(0.0, 2 * math.sqrt(2))
    assert float(q) == pytest.approx(2**-1.5 / 2, abs=1e-15)
    assert float(p) == 0.0


def test_homoclinic_decay():
    q, p = analytic_homoclinic(np.array([-30.0, 30.0]), 0.5)
    assert np.all(np.abs(q) < 1e-12) and np.all(np.abs(p) < 1e-12)
    with pytest.raises(ValueError):
        analytic_homoclinic(0.0, -1.0)


def test_homoclinic_shadowing(desk_factory):
    H = desk_factory(nu_hat=0.0).model
    ts, xs = trajectory(H, homoclinic_point(-8.0, H.c3), 16.0, h=0.01, stride=10)
    ref = homoclinic_point(ts - 8.0, H.c3)
    assert np.max(np.abs(xs - ref)) <= 1e-6


# -- section crossings -----------------------------------------------------------------


def test_pure_saddle_return_time():
    H = toy_model()
    T, xT, _ = return_time(H, np.array([2 * D, 0.0, 0.0, 0.0]), SectionSpec("SigmaL", D), (0.0, 5.0))
    assert float(T[0]) == pytest.approx(math.log(2), abs=1e-12)
    assert abs(xT[0, 0] - D) < 1e-12


def test_homoclinic_return_time(desk_factory):
    H = desk_factory(nu_hat=0.0).model
    t_out = homoclinic_time_at(H.c3, 2, D, "out")
    t_in = homoclinic_time_at(H.c3, 0, D, "in")
    x0 = homoclinic_point(t_out, H.c3)
    T, _, _ = return_time(H, x0, SectionSpec("SigmaL", D), (0.0, 50.0))
    assert float(T[0]) == pytest.approx(t_in - t_out, abs=1e-8)


def test_no_crossing_raises():
    H = toy_model()
    with pytest.raises(NoCrossingError):
        return_time(H, np.array([0.5 * D, 0.0, 0.0, 0.0]), SectionSpec("SigmaL", D), (0.0, 2.0))


# -- global map ------------------------------------------------------------------------


def test_global_map_conserves_I2_without_mu(desk):
    x = sigma0_points(desk, np.linspace(0, D / 16, 6), 1e-4, np.linspace(0, 5, 6))
    rec = global_map_ret2(desk, x)
    assert np.max(np.abs(rec.diagnostics["dI2"])) <= 1e-12
    assert np.all(np.abs(rec.image.coords[:, 0] - D) <= 1e-12)


def test_global_map_M2_stable_under_halving_mu():
    x = sigma0_points(desk_system(eps=0.4), np.linspace(0, D / 16, 4), 1e-4, np.linspace(0, 5, 4))
    fits = [global_map_ret2(desk_system(mu=m, eps=0.4), x).diagnostics["M2_fit"] for m in (0.1, 0.05)]
    assert np.isfinite(fits).all() and fits[0] > 0
    assert fits[0] / fits[1] == pytest.approx(1.0, rel=0.05)


def test_unstable_circle_lands_in_ball(desk):
    x = sigma0_points(desk, 0.0, 2e-4, np.linspace(0, 2 * np.pi, 16, endpoint=False))
    rec = global_map_ret2(desk, x)
    assert np.all(rec.diagnostics["in_ball"])


def test_global_map_domain(desk):
    with pytest.raises(DomainError):
        global_map_ret2(desk, sigma0_points(desk, D / 8, 1e-4, 0.0))
    with pytest.raises(DomainError):
        global_map_ret2(desk, sigma0_points(desk, 0.0, (0.6 * D) ** 2, 0.0))


# -- local map and first return --------------------------------------------------------


def test_local_map_rejects_centre_stable(desk):
    x = section_points(desk, [0.01, 0.0], 0.0)
    with pytest.raises(CenterStableError):
        local_map(desk, x)


def test_local_map_invariants_and_flow(desk):
    x = section_points(desk, [[0.01, 0.0], [0.0, -0.02], [0.015, 0.01]], 1e-3)
    rec = local_map(desk, x)
    assert np.max(rec.diagnostics["invariant_change"]) <= 1e-12
    z0, zT = rec.diagnostics["local_start"], rec.diagnostics["local_image"]
    assert np.allclose(zT[:, 0], z0[:, 0] * z0[:, 2] / D, rtol=1e-12, atol=0)
    # the chart flow agrees with the true flow of the model
    for i in range(len(x)):
        xi = integrate(desk.model, x[i], float(rec.T[i]))
        assert np.max(np.abs(xi - rec.image.coords[i])) <= 1e-10


def test_local_transit_time_is_logarithmic(desk):
    offs = np.array([1e-3, 1e-4, 1e-5])
    x = section_points(desk, np.tile([0.01, 0.0], (3, 1)), offs)
    rec = local_map(desk, x)
    eta1 = rec.diagnostics["local_start"][:, 2]
    k1 = np.abs(desk.chart.rates(rec.diagnostics["local_start"])[:, 0])
    assert np.allclose(rec.T, np.log(D / eta1) / k1, rtol=1e-12)
    assert np.all(np.diff(rec.T) > 0)
    steps = np.diff(rec.T) / np.log(eta1[:-1] / eta1[1:])
    assert np.allclose(steps, 1.0, rtol=0.05)


def test_local_map_domain_edges(desk):
    from scipy.optimize import brentq

    q2p2 = np.array([0.01, 0.0])

    def eta1_at(p1):
        return desk.to_local(np.array([[D, q2p2[0], p1, q2p2[1]]]))[0, 2]

    g = float(graph_cs(desk, q2p2)[0])
    p_edge = brentq(lambda p: eta1_at(p) - D / 24, g, g + 0.2 * D, xtol=1e-16)
    local_map(desk, np.array([D, q2p2[0], p_edge, q2p2[1]]))
    p_out = brentq(lambda p: eta1_at(p) - 1.01 * D / 24, g, g + 0.2 * D, xtol=1e-16)
    with pytest.raises(DomainError):
        local_map(desk, np.array([D, q2p2[0], p_out, q2p2[1]]))


def test_first_return_matches_direct_flow(desk):
    rng = np.random.default_rng(0)
    r = 0.02 * np.sqrt(rng.uniform(size=20))
    th = rng.uniform(0, 2 * np.pi, size=20)
    q2p2 = np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)
    x = section_points(desk, q2p2, rng.uniform(1e-4, 1.5e-3, size=20))
    rec = first_return(desk, x)
    T, xT, _ = return_time(desk.model, x, desk.sigma_L, (0.0, desk.t_max), h=desk.h)
    assert np.max(np.abs(xT - rec.image.coords)) <= 1e-9
    assert np.max(np.abs(T - rec.T)) <= 1e-9


def test_return_time_decreases_with_p1(desk_factory):
    sys = desk_factory(nu_hat=0.0)
    offs = np.linspace(2e-4, 1.5e-3, 8)
    x = section_points(sys, np.tile([0.01, 0.0], (8, 1)), offs)
    T = first_return(sys, x).T
    assert np.all(np.diff(T) < 0)


# -- graphs on the section -------------------------------------------------------------


def test_graph_cs_uncoupled_is_constant(desk_factory):
    sys = desk_factory(nu_hat=0.0)
    g = graph_cs(sys, [[0.0, 0.0], [0.02, 0.01], [-0.03, 0.02]])
    assert np.max(np.abs(g - g[0])) <= 1e-14


def test_graph_cs_sign_side(desk):
    q2p2 = np.array([[0.01, 0.0], [0.0, -0.02]])
    for off, sign in ((1e-4, 1), (-1e-4, -1)):
        z = desk.to_local(section_points(desk, q2p2, off))
        assert np.all(np.sign(z[:, 2]) == sign)


def test_graph_cs_slope_bound(desk):
    h = 1e-6
    pts = np.array([[0.01, 0.0], [0.0, -0.03], [0.02, 0.02], [-0.04, 0.01]])
    for e in np.eye(2):
        slope = (graph_cs(desk, pts + h * e) - graph_cs(desk, pts - h * e)) / (2 * h)
        assert np.all(np.abs(slope) <= 2)
    with pytest.raises(DomainError):
        graph_cs(desk, [[D, D]])


def test_graph_energy_level_toy():
    # no cubic terms: the level equation is linear, p1 = h~/delta
    model = toy_model(eps=0.35, c3=0.0)
    sys = SaddleSystem.build(model, D, chart=local_normalization(model, 6, radius=False))
    q2p2 = np.array([[0.01, 0.004], [0.0, 0.012]])
    alpha = 1e-4
    ht = energy_window(sys, alpha, q2p2)
    assert np.allclose(graph_energy_level(sys, alpha, q2p2), ht / D, atol=1e-15, rtol=1e-12)


def test_graph_energy_level_monotone_in_alpha(desk):
    q2p2 = np.array([[0.01, 0.0]])
    vals = [float(graph_energy_level(desk, a, q2p2)[0]) for a in (0.9e-4, 1.0e-4, 1.1e-4)]
    assert vals[0] > vals[1] > vals[2]
    with pytest.raises(DomainError):
        graph_energy_level(desk, 1e-4, [[0.04, 0.0]])


# -- periodic orbit energy -------------------------------------------------------------


def test_periodic_orbit_energy(desk):
    assert float(periodic_orbit_energy(desk, 0.0)) == 0.0
    Om = desk.model.Omega
    r = [float(periodic_orbit_energy(desk, a)) / (Om / 2 * a) - 1 for a in (1e-4, 5e-5)]
    assert r[1] / r[0] == pytest.approx(0.5, rel=0.01)
    grid = np.linspace(0, 2e-3, 30)
    assert np.all(np.diff(periodic_orbit_energy(desk, grid)) > 0)


def test_periodic_orbit_energy_needs_positive_omega(desk):
    m = desk.model
    flip = HamiltonianModel(m.eps, m.nu_hat, 0.0, m.N0, -m.omega, m.c3, m.Q, m.R)
    ln = local_normalization(flip, 10, radius=False)
    grid = np.linspace(0, 2e-3, 30)
    assert not np.all(np.diff(periodic_orbit_energy(ln, grid)) > 0)


# -- area preservation -----------------------------------------------------------------


def test_restricted_map_area_preserving(desk):
    # admissible area and a radius inside the twist band
    eps = desk.model.eps
    alpha = 0.02 * D**2 * eps**2 / 4
    r = math.sqrt(0.04 * D**2 * eps**2)
    th = np.linspace(0, 2 * np.pi, 6, endpoint=False)
    q2p2 = np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)
    img, rec = restricted_return(desk, alpha, q2p2)
    assert np.all(np.abs(rec.image.coords[:, 0] - D) <= 1e-12)
    det = np.linalg.det(restricted_jacobian(desk, alpha, q2p2))
    assert np.max(np.abs(det - 1)) <= 1e-6


# -- dumps -----------------------------------------------------------------------------


def test_orbit_csv_round_trip(tmp_path, desk):
    ts, xs = trajectory(desk.model, np.array([0.03, 0.01, -0.02, 0.02]), 1.0, stride=10)
    path = write_orbit_csv(tmp_path / "orbit.csv", desk.model, ts, xs)
    header = path.read_text().splitlines()[0]
    assert header == "t,chart,q1,p1,q2,p2,H,I2"
    t2, x2 = read_orbit_csv(path)
    assert np.array_equal(ts, t2) and np.array_equal(xs, x2)


def test_return_csv_round_trip(tmp_path, desk):
    x = section_points(desk, [[0.01, 0.0], [0.0, 0.01]], 1e-3)
    rec = first_return(desk, x)
    s, im, T, ang = read_return_csv(write_return_csv(tmp_path / "ret.csv", rec))
    assert np.array_equal(s, rec.start.coords) and np.array_equal(im, rec.image.coords)
    assert np.array_equal(T, rec.T) and np.array_equal(ang, rec.rotation_angle)


def test_rotate_is_inverse_of_negative(desk):
    x = np.random.default_rng(1).normal(size=(5, 4))
    assert np.allclose(rotate(rotate(x, 0.7), -0.7), x, atol=1e-15)
