"""Local normal form near the saddle-center: generating function, criterion (Q), chart."""

from __future__ import annotations

import numpy as np
import pytest

from saddlecenter.moser_local import (
    CanonicalMap,
    ContractError,
    complexify,
    conjugacy_error,
    criterion_Q_residual,
    diagonal_rates,
    enforce_criterion_Q,
    generating_residual,
    implicit_map_series,
    local_normalization,
    realify,
    realify_and_package,
    sample_ball,
    solve_generating_function,
    torus_reparametrization,
    verify_uniform_estimates,
)
from saddlecenter.poly_core import PolySeries, compose_many, phase_variables, random_series

from .conftest import desk_system

OMEGA = 3.0


def quadratic_H(deg=6, omega=OMEGA):
    q1, q2, p1, p2 = phase_variables(deg)
    return -(q1 * p1) + (q2 * q2 + p2 * p2) * (omega / 2)


def chart_from(H, degree):
    Hc = complexify(H)
    gf, K = solve_generating_function(Hc, degree + 1)
    F_tilde = CanonicalMap(implicit_map_series(gf, degree))
    F_star, S = enforce_criterion_Q(F_tilde)
    return realify_and_package(F_star, K), gf, K, S


def identity_components(deg, dtype=float):
    return [PolySeries.variable(i, 4, deg, dtype=dtype) for i in range(4)]


# -- complexification ------------------------------------------------------------------


def test_complexify_round_trip():
    rng = np.random.default_rng(0)
    H = random_series(rng, 4, 5)
    back = realify(complexify(H))
    assert np.max(np.abs(back.coeffs - H.coeffs)) < 1e-13


def test_complexify_quadratic_oracle():
    # Hessian congruence by P^-1 on the elliptic pair
    Hc = complexify(quadratic_H())
    a, b = diagonal_rates(Hc)
    assert a == pytest.approx(-1.0)
    assert b == pytest.approx(-1j * OMEGA)
    assert abs(Hc.coefficient((0, 2, 0, 0))) < 1e-15 and abs(Hc.coefficient((0, 0, 0, 2))) < 1e-15


def test_saddle_block_untouched():
    q1, q2, p1, p2 = phase_variables(4)
    H = q1 * q1 * p1 + q1 * p1 * p1 * 0.5
    assert np.allclose(complexify(H).coeffs, H.coeffs)


def test_diagonal_rates_rejects_bad_quadratic():
    q1, q2, p1, p2 = phase_variables(4)
    with pytest.raises(ContractError):
        diagonal_rates(complexify(-(q1 * p1) + q2 * p1))


# -- generating function ---------------------------------------------------------------


def test_quadratic_only_gives_identity_generator():
    gf, K = solve_generating_function(complexify(quadratic_H()), 6)
    assert gf.tail.norm() < 1e-15
    assert set(K.terms) == {(1, 0), (0, 1)}
    assert K.coefficient((1, 0)) == pytest.approx(-1.0)
    assert K.coefficient((0, 1)) == pytest.approx(-1j * OMEGA)


def test_single_cubic_term_oracle():
    # H = a x1 y1 + b x2 y2 + c x1^2 y1 forces W = x.eta - (c/a) x1^2 eta1 at degree 3
    a, b, c = -1.0, -2.0j, 0.7
    Hc = PolySeries.from_terms({(1, 0, 1, 0): a, (0, 1, 0, 1): b, (2, 0, 1, 0): c}, 4, 4, dtype=complex)
    gf, K = solve_generating_function(Hc, 3)
    W3 = gf.W.homogeneous_part(3)
    assert set(W3.terms) == {(2, 0, 1, 0)}
    assert W3.coefficient((2, 0, 1, 0)) == pytest.approx(-c / a)
    assert not K.homogeneous_part(3).terms if K.max_degree >= 3 else True


def test_generating_residual_vanishes_per_grade(desk):
    ln = desk.chart
    grades = ln.residuals["generating_per_grade"]
    gf = ln.W
    scale = float(np.max(np.abs(gf.W.coeffs)))
    assert max(grades[: gf.max_degree + 1]) < 1e-14 * scale
    res = generating_residual(complexify(desk.model.poly.with_max_degree(gf.max_degree)), gf, ln.K_complex)
    assert float(np.max(np.abs(res.truncate(gf.max_degree).coeffs))) < 1e-14 * scale


# -- criterion (Q) ---------------------------------------------------------------------


def test_identity_satisfies_Q_and_is_kept():
    F = CanonicalMap(identity_components(5, complex))
    assert criterion_Q_residual(F.components).norm() == 0
    F2, S = enforce_criterion_Q(F)
    assert F2 is F and S.norm() == 0


def test_Q_recovers_known_reparametrization(desk):
    F = desk.chart
    d = F.max_degree
    # complex chart satisfying (Q); perturb it by a known action reparametrisation
    base = CanonicalMap([c.astype(complex) for c in F.F.components])
    S0 = PolySeries.from_terms({(2, 0): 0.3, (1, 1): 0.2j, (0, 2): -0.1}, 2, d // 2 + 1, dtype=complex)
    perturbed = CanonicalMap(compose_many(base.components, torus_reparametrization(S0, d)))
    assert np.max(np.abs(criterion_Q_residual(perturbed.components).truncate(d - 1).coeffs)) > 1e-3
    fixed, S = enforce_criterion_Q(perturbed)
    assert np.max(np.abs(criterion_Q_residual(fixed.components).truncate(d - 1).coeffs)) < 1e-10


def test_desk_chart_Q_residual(desk):
    assert desk.chart.residuals["criterion_Q"] < 1e-10


# -- real chart ------------------------------------------------------------------------


def test_quadratic_H_gives_identity_chart():
    ln, _, _, _ = chart_from(quadratic_H(), 5)
    for c, v in zip(ln.F.components, identity_components(5)):
        assert (c - v).norm() < 1e-14
    assert ln.K.coefficient((1, 0)) == pytest.approx(-1.0)
    assert ln.K.coefficient((0, 1)) == pytest.approx(OMEGA / 2)


def test_K_linear_part(desk):
    K = desk.chart.K
    assert K.coefficient((1, 0)) == pytest.approx(-1.0, abs=1e-10)
    assert K.coefficient((0, 1)) == pytest.approx(desk.model.Omega / 2, abs=1e-10)


def test_conjugacy(desk):
    assert conjugacy_error(desk.chart, desk.model, n=1000) < 1e-8


def test_symplectic(desk):
    z = sample_ball(100, desk.chart.radius, seed=1)
    assert desk.chart.F.symplecticity_error(z) < 1e-8


def test_inverse_round_trip(desk):
    z = sample_ball(50, desk.chart.radius, seed=2)
    assert np.max(np.abs(desk.chart.F_inverse(desk.chart.F(z)) - z)) < 1e-12


def test_chart_flow_preserves_invariants_and_contracts(desk):
    ln = desk.chart
    z = sample_ball(20, 0.5 * ln.radius, seed=3)
    z[:, 0] = np.abs(z[:, 0]) + 1e-3
    zt = ln.flow(z, 0.7)
    assert np.max(np.abs(ln.invariants(zt) - ln.invariants(z))) < 1e-14
    assert np.all(ln.vector_field(z)[:, 0] < 0)
    assert np.all(zt[:, 0] < z[:, 0])


def test_chart_flow_matches_vector_field(desk):
    ln = desk.chart
    z = sample_ball(10, 0.5 * ln.radius, seed=4)
    h = 1e-6
    fd = (ln.flow(z, h) - ln.flow(z, -h)) / (2 * h)
    assert np.max(np.abs(fd - ln.vector_field(z))) < 1e-8


def test_split_form_without_coupling(desk_factory):
    ln = desk_factory(nu_hat=0.0).chart
    lnb = desk_factory(nu_hat=0.0, eps=0.25).chart
    # hyperbolic components depend on (xi1, eta1) only; elliptic ones are the identity
    for i in (0, 2):
        for e in ln.F.components[i].terms:
            assert e[1] == 0 and e[3] == 0
    for i in (1, 3):
        v = PolySeries.variable(i, 4, ln.max_degree)
        assert (ln.F.components[i] - v).norm() < 1e-14
    for c, cb in zip(ln.F.components, lnb.F.components):
        assert (c - cb).norm() < 1e-14


def test_moser_type_variant(desk):
    ln = desk.chart
    lnm = local_normalization(desk.model, max_degree=ln.max_degree, normalization="moser", radius=False)
    assert lnm.residuals["brackets"] < 1e-10
    assert ln.F.symplectic and not lnm.F.symplectic
    z = sample_ball(100, 0.5 * ln.radius, seed=5)
    assert np.max(np.abs(desk.model.energy(lnm.F(z), cut=False) - lnm.K_value(z))) < 1e-8
    assert np.max(np.abs(lnm.F.inverse(lnm.F(z)) - z)) < 1e-12
    # the two charts differ by an action reparametrisation: invariant tori go to invariant tori
    G = lambda u: ln.F_inverse(lnm.F(u))
    zt = lnm.flow(z, 0.3)
    assert np.max(np.abs(ln.invariants(G(zt)) - ln.invariants(G(z)))) < 1e-12
    assert lnm.K.coefficient((1, 0)) == pytest.approx(ln.K.coefficient((1, 0)), abs=1e-12)


@pytest.mark.parametrize("eps_set", [(0.5, 0.35, 0.25), (0.5, 0.25, 0.125)])
def test_uniform_estimates(desk_factory, eps_set):
    fam = [desk_factory(eps=e).chart for e in eps_set]
    ref = desk_factory(eps=eps_set[0], nu_hat=0.0).chart
    rad = min(f.radius for f in fam)
    rep = verify_uniform_estimates(fam, ref, rad)
    assert all(rep.uniform.values())
    assert all(s < 2 for s in rep.spread.values())
    zero = verify_uniform_estimates([ref], ref, rad)
    assert all(v == 0.0 for per in zero.constants.values() for v in per.values())


def test_conjugacy_per_grade(desk):
    ln = desk.chart
    d = ln.max_degree
    comps = [c.with_max_degree(d + 1) for c in ln.F.components]
    lhs = desk.model.poly.with_max_degree(d + 1).compose(comps)
    xi1, xi2, eta1, eta2 = phase_variables(d + 1)
    rhs = ln.K.with_max_degree(d + 1).compose([xi1 * eta1, xi2 * xi2 + eta2 * eta2])
    diff = lhs - rhs
    scale = float(np.max(np.abs(lhs.coeffs)))
    for k in range(d + 1):
        assert float(np.max(np.abs(diff.homogeneous_part(k).coeffs), initial=0.0)) < 1e-12 * scale


def test_invariants_conserved_along_integrated_chart_flow(desk):
    from scipy.integrate import solve_ivp

    ln = desk.chart
    for z0 in sample_ball(5, 0.5 * ln.radius, seed=6):
        sol = solve_ivp(lambda t, z: ln.vector_field(z), (0, 2.0), z0, rtol=1e-12, atol=1e-14)
        inv = ln.invariants(sol.y.T)
        assert np.max(np.abs(inv - inv[0])) < 1e-11
