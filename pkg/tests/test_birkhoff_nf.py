"""Normal-form engine, scaling and the three-parameter model."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from scipy.linalg import expm

from saddlecenter.birkhoff_nf import (
    DegenerateHypothesisError,
    HamiltonianModel,
    ModelConfig,
    QuadraticPart,
    WrongHalfError,
    action_coefficients,
    adjoint_invariant_residual,
    cutoff,
    elliptic_quadratic,
    epsilon_of_lambda,
    hessian_matrix,
    homological_decompose,
    homoclinic_radius,
    jordan_chart,
    jordan_from_underline,
    lie_operator,
    lie_transform_flow,
    normal_form_for,
    normal_form_pipeline,
    original_hamiltonian,
    resonant_quadratic,
    rotational_symmetrize_check,
    scale_and_reparametrize,
    scaled_model_for_epsilon,
    three_parameter_model,
    underline_from_jordan,
)
from saddlecenter.poly_core import (
    CANONICAL,
    ContractError,
    PolySeries,
    get_basis,
    nf_inner_product,
    phase_variables,
    poisson_bracket,
    random_series,
)

from .conftest import desk_config


def operator_matrix(H2: PolySeries, degree: int) -> np.ndarray:
    """Brute-force matrix of ``S -> {H2, S}`` on the degree block, column by column."""
    b = get_basis(4, degree)
    sl = b.slices[degree]
    cols = []
    for i in range(sl.start, sl.stop):
        e = tuple(int(k) for k in b.exps[i])
        m = PolySeries.from_terms({e: 1.0}, 4, degree)
        cols.append(poisson_bracket(H2.with_max_degree(degree), m).coeffs[sl])
    return np.array(cols).T


def block(P: PolySeries, degree: int) -> np.ndarray:
    return P.with_max_degree(degree).coeffs[get_basis(4, degree).slices[degree]]


def random_homogeneous(rng, degree, exact=False):
    return random_series(rng, 4, degree, min_degree=degree, exact=exact).homogeneous_part(degree)


# -- homological equation --------------------------------------------------------------


def test_elliptic_one_block_cubic_has_no_normal_form():
    q1, q2, p1, p2 = phase_variables(3)
    Q = QuadraticPart.from_series((q1 * q1 + p1 * p1) * 0.7)
    rng = np.random.default_rng(0)
    coeffs = rng.normal(size=4)
    P = q1**3 * coeffs[0] + q1 * q1 * p1 * coeffs[1] + q1 * p1 * p1 * coeffs[2] + p1**3 * coeffs[3]
    N, S = homological_decompose(P, Q)
    assert N.norm() < 1e-12
    # oracle: direct solve of {H2, S} = -P on the (q1, p1) cubic block
    A = operator_matrix(Q.H2, 3)
    s_ref, *_ = np.linalg.lstsq(A, -block(P, 3), rcond=None)
    assert np.allclose(A @ block(S, 3), -block(P, 3), atol=1e-12)
    assert np.allclose(block(S, 3), s_ref, atol=1e-10)


def test_kernel_element_is_fixed():
    q1, q2, p1, p2 = phase_variables(3)
    Q = resonant_quadratic(1.0)
    P = q1 * (q2 * q2 + p2 * p2)
    N, S = homological_decompose(P, Q)
    assert (N - P).norm() < 1e-13 and S.norm() < 1e-13


def test_resonant_cubic_keeps_q1_cubed():
    q1 = phase_variables(3)[0]
    Q = resonant_quadratic(1.0)
    P = q1**3
    N, S = homological_decompose(P, Q)
    assert abs(N.coefficient((3, 0, 0, 0))) > 0.1
    A = operator_matrix(Q.H2, 3)
    assert np.allclose(block(N, 3) - A @ block(S, 3), block(P, 3), atol=1e-13)


@pytest.mark.parametrize("degree", [3, 4, 5])
def test_float_decomposition_invariants(degree):
    rng = np.random.default_rng(degree)
    Q = resonant_quadratic(1.3)
    P = random_homogeneous(rng, degree)
    N, S = homological_decompose(P, Q)
    A = operator_matrix(Q.H2, degree)
    assert np.max(np.abs(block(N, degree) - A @ block(S, degree) - block(P, degree))) <= 1e-12
    # N is orthogonal to the range of the operator
    b = get_basis(4, degree)
    w = b.factorials[b.slices[degree]]
    assert np.max(np.abs(A.T @ (w * block(N, degree)))) <= 1e-10
    assert adjoint_invariant_residual(N, Q) <= 1e-10


@pytest.mark.parametrize("degree", [3, 4])
def test_exact_decomposition_invariants(degree):
    rng = np.random.default_rng(10 + degree)
    Q = resonant_quadratic(1, exact=True)
    P = random_homogeneous(rng, degree, exact=True)
    N, S = homological_decompose(P, Q, mode="rational")
    assert N.exact and S.exact
    lhs = N - poisson_bracket(Q.H2.with_max_degree(degree), S) - P
    assert all(v == 0 for v in lhs.coeffs)
    b = get_basis(4, degree)
    for i in range(b.slices[degree].start, b.slices[degree].stop):
        T = PolySeries.from_terms({tuple(int(k) for k in b.exps[i]): Fraction(1)}, 4, degree)
        assert nf_inner_product(N, poisson_bracket(Q.H2.with_max_degree(degree), T)) == 0


def test_homological_contract():
    q1 = phase_variables(3)[0]
    with pytest.raises(ContractError):
        homological_decompose(q1 + q1**3, resonant_quadratic(1.0))


# -- Lie transforms --------------------------------------------------------------------


def test_lie_flow_zero_generator():
    x = np.array([[0.1, -0.2, 0.3, 0.05]])
    assert np.array_equal(lie_transform_flow(PolySeries.zero(4, 3), x), x)


def test_lie_flow_quadratic_matches_expm():
    rng = np.random.default_rng(1)
    S = random_homogeneous(rng, 2)
    x = rng.normal(size=(5, 4)) * 0.3
    for t in (1.0, -0.7):
        E = expm(t * CANONICAL.matrix @ hessian_matrix(S))
        assert np.max(np.abs(lie_transform_flow(S, x, t) - x @ E.T)) <= 1e-10


def test_lie_flow_group_property():
    rng = np.random.default_rng(2)
    S = random_homogeneous(rng, 3)
    x = rng.normal(size=(6, 4)) * 0.1
    y = lie_transform_flow(S, lie_transform_flow(S, x, 0.8), -0.8)
    assert np.max(np.abs(y - x)) <= 1e-10


def test_lie_series_matches_flow():
    rng = np.random.default_rng(3)
    S = random_homogeneous(rng, 3) * 0.5
    G = random_series(rng, 4, 3, min_degree=2)
    x = rng.normal(size=(4, 4)) * 0.02
    series = lie_operator(G.with_max_degree(12), S.with_max_degree(12))
    assert np.max(np.abs(series(x) - G(lie_transform_flow(S, x)))) <= 1e-12


# -- the pipeline ----------------------------------------------------------------------


def test_pipeline_on_quadratic_is_identity():
    Q = resonant_quadratic(1.0, max_degree=6)
    nf = normal_form_pipeline(Q.H2, 5, quadratic=Q)
    assert nf.N.norm() == 0 and nf.S_list == []
    x = np.random.default_rng(0).normal(size=(3, 4)) * 0.1
    assert np.allclose(nf.transform(x), x)


def test_birkhoff_nonresonant_elliptic():
    rng = np.random.default_rng(4)
    Q = elliptic_quadratic((1.0, math.sqrt(2)), max_degree=4)
    H = Q.H2 + random_series(rng, 4, 4, min_degree=3) * 0.3
    nf = normal_form_pipeline(H, 4, quadratic=Q)
    q1, q2, p1, p2 = phase_variables(4)
    I1, I2 = q1 * q1 + p1 * p1, q2 * q2 + p2 * p2
    N3, N4 = nf.N.homogeneous_part(3), nf.N.homogeneous_part(4)
    assert N3.norm() < 1e-12
    # oracle: the kernel on degree 4 is spanned by I1^2, I1 I2, I2^2
    basis = [I1 * I1, I1 * I2, I2 * I2]
    M = np.stack([block(b, 4) for b in basis], axis=1)
    coef, *_ = np.linalg.lstsq(M, block(N4, 4), rcond=None)
    assert np.max(np.abs(M @ coef - block(N4, 4))) < 1e-10
    A = operator_matrix(Q.H2.with_max_degree(4), 4)
    assert np.linalg.matrix_rank(A, tol=1e-9) == A.shape[0] - 3


@pytest.mark.parametrize("lam", [0.0, 0.01])
def test_resonant_family_independent_of_p1(lam):
    cfg = desk_config()
    nf = normal_form_for(cfg, lam, n=6)
    full = nf.quadratic.H2.with_max_degree(nf.N.max_degree) + nf.N
    p1_terms = [abs(v) for e, v in full.terms.items() if e[2] > 0 and e != (0, 0, 2, 0)]
    assert max(p1_terms, default=0.0) <= 1e-10
    coeffs = action_coefficients(full - PolySeries.from_terms({(0, 0, 2, 0): 0.5}, 4, full.max_degree))
    assert (3, 0) in coeffs


def test_transform_conjugates_to_normal_form():
    cfg = desk_config()
    lam = 0.01
    n = 5
    nf = normal_form_for(cfg, lam, n=n)
    H = original_hamiltonian(cfg, lam).with_max_degree(nf.transformed.max_degree)
    composed = H.compose(nf.transform.components)
    target = nf.quadratic.H2.with_max_degree(n) + nf.N
    assert (composed.truncate(n) - target).norm() <= 1e-10
    assert nf.residuals["adjoint_invariance"] <= 1e-10


def test_transform_is_symplectic_and_near_identity():
    cfg = desk_config()
    nf = normal_form_for(cfg, 0.01, n=5)
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(100, 4))
    pts *= 0.05 / np.linalg.norm(pts, axis=1, keepdims=True)
    assert nf.transform.symplecticity_error(pts) <= 1e-8
    small = pts * 1e-3
    assert np.max(np.abs(nf.transform(small) - small @ nf.linear.T)) <= 1e-9


def test_rational_pipeline_exact():
    cfg = ModelConfig(omega0=1, c10=1, c20=1, n=4, mode="rational",
                      extra_coefficients=[{"exponents": [1, 2, 0, 0], "coefficient": 0.25, "lambda_power": 0}])
    nf = normal_form_for(cfg, 0)
    assert nf.N.exact
    assert adjoint_invariant_residual(nf.N, nf.quadratic) == 0
    assert all(e[2] == 0 for e, v in nf.N.terms.items())
    assert nf.N.coefficient((3, 0, 0, 0)) == 1


# -- symmetry check --------------------------------------------------------------------


def test_rotational_symmetrize_check_examples():
    q1, q2, p1, p2 = phase_variables(3)
    Q = resonant_quadratic(1.0)
    assert rotational_symmetrize_check(q1 * (q2 * q2 + p2 * p2), Q)
    assert not rotational_symmetrize_check(p1 * p1, Q)
    assert rotational_symmetrize_check(PolySeries.zero(4, 3), Q)


def test_shear_breaks_p1_squared():
    # the adjoint flow shears p1 -> p1 + t q1, which changes p1^2
    Q = resonant_quadratic(1.0)
    E = expm(0.5 * Q.L0.T)
    x = np.array([0.3, 0.0, 0.2, 0.0])
    y = E @ x
    assert y[0] == pytest.approx(0.3) and abs(y[2] - 0.2) > 0.1


# -- scaling ---------------------------------------------------------------------------


def test_scaling_rejects_lambda_zero():
    nf = normal_form_for(desk_config(), 0.0, n=5)
    with pytest.raises(ContractError):
        scale_and_reparametrize(nf, 0.0)


def test_parameter_map_limit():
    cfg = ModelConfig(omega0=1.0, c10=2.0, c20=1.0,
                      extra_coefficients=[{"exponents": [2, 0, 0, 0], "coefficient": 0.4, "lambda_power": 2},
                                          {"exponents": [1, 0, 1, 0], "coefficient": 0.3, "lambda_power": 1}])
    ratios = [epsilon_of_lambda(cfg, lam) ** 4 / lam for lam in (1e-2, 1e-3, 1e-4)]
    errs = [abs(r - 2.0) for r in ratios]
    assert errs[-1] < 1e-3
    assert errs[0] > errs[1] > errs[2]


def test_wrong_half_and_degenerate_hypotheses():
    cfg = desk_config()
    nf = normal_form_for(cfg, -0.01, n=5)
    with pytest.raises(WrongHalfError):
        scale_and_reparametrize(nf, -0.01)
    with pytest.raises(DegenerateHypothesisError):
        ModelConfig(c20=0.0).validate()
    with pytest.raises(DegenerateHypothesisError):
        ModelConfig(c10=0.0).validate()


def test_scaled_linearisation():
    sc = scaled_model_for_epsilon(desk_config(), 0.35)
    assert sc.eps == pytest.approx(0.35, rel=1e-12)
    model = three_parameter_model(sc, sc.eps**2, 0.0, 5)
    h = 1e-7
    D = np.stack([(model.vector_field(h * e) - model.vector_field(-h * e)) / (2 * h) for e in np.eye(4)], axis=1)
    ev = np.linalg.eigvals(D)
    real = np.sort(ev[np.abs(ev.imag) < 1e-6].real)
    imag = np.sort(np.abs(ev[np.abs(ev.imag) > 1e-6].imag))
    assert np.allclose(real, [-1.0, 1.0], atol=1e-6)
    assert np.allclose(imag, model.Omega, rtol=1e-6)
    assert model.Omega == pytest.approx(sc.omega / sc.eps**2)


# -- the three-parameter model ---------------------------------------------------------


def _dI2(model, x):
    v = model.vector_field(x)
    return 2 * (x[:, 1] * v[:, 1] + x[:, 3] * v[:, 3])


def _ball(n, r, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 4))
    return x * r * rng.uniform(size=(n, 1)) ** 0.25 / np.linalg.norm(x, axis=1, keepdims=True)


def test_model_cases_conserve_I2():
    sc = scaled_model_for_epsilon(desk_config(), 0.35)
    x = _ball(200, 0.5)
    for nu in (0.0, 0.35**2):
        m = three_parameter_model(sc, nu, 0.0, 5)
        assert np.max(np.abs(_dI2(m, x))) <= 1e-13
    m0 = three_parameter_model(sc, 0.0, 0.0, 5)
    # separable: the (q1, p1) field ignores (q2, p2)
    y = x.copy()
    y[:, [1, 3]] = 0.0
    assert np.allclose(m0.vector_field(x)[:, [0, 2]], m0.vector_field(y)[:, [0, 2]], atol=1e-14)


def test_model_I2_drift_linear_in_mu():
    sc = scaled_model_for_epsilon(desk_config(), 0.35)
    x = _ball(200, 0.5, seed=1)
    ratios = []
    for mu in (0.1, 1.0):
        m = three_parameter_model(sc, 0.35**2, mu, 5)
        scale = mu * m.nu_hat * m.eps**m.N0
        ratios.append(np.max(np.abs(_dI2(m, x))) / scale)
    assert ratios[0] > 0 and ratios[0] == pytest.approx(ratios[1], rel=1e-9)


def test_cutoff_shape():
    r = np.linspace(0, 2.0, 401)
    T, dT = cutoff(r, 1.0)
    assert np.all(T[r <= 0.25] == 1) and np.all(T[r >= 1.0] == 0)
    assert np.all(np.diff(T) <= 1e-15)
    num = np.gradient(T, r)
    assert np.max(np.abs(num - dT)[5:-5]) < 0.05


def test_default_cutoff_contains_homoclinic():
    m = HamiltonianModel(0.35, 0.0, 0.0, 5, 1.0, 0.5)
    assert homoclinic_radius(0.5) <= m.rho0 / 2


def test_jordan_charts_round_trip():
    x = np.random.default_rng(0).normal(size=(5, 4))
    assert np.allclose(jordan_from_underline(underline_from_jordan(x)), x)
    q, q2, p, p2 = phase_variables(3)
    R = q**3
    Rj = jordan_chart(R)
    assert np.allclose(Rj(x), R(underline_from_jordan(x)))
