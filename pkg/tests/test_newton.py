import math

import numpy as np
import pytest

from models.sequences import NodeIndex
from services.newton import (
    NewtonianAtom,
    ThetaBuildParams,
    _series_degree,
    atom_expansion,
    build_F,
    build_theta_family,
    choose_t,
    diamond_pipeline,
    laplacian_stencil,
    merge_poles,
    newton_kernel,
    newton_shift_derivative_expansion,
    newton_shift_expansion,
    radial_derivative,
    radial_weights,
    solve_b_coefficients,
    sphere_integral_of_profile,
    theta_eval,
    zonal_laplacian_profile,
)
from services.cubature import product_rule
from services.needlet import phi_kernel
from services.sphere import unit_vector
from services.zonal import sh_count
from utils.errors import BCoefficientFitError, DomainError, TStepError


def _points_at(u: np.ndarray, d: int) -> np.ndarray:
    """ζ = e_d 기준 x·ζ = u 인 구면 위 점"""
    side = np.sqrt(np.maximum(1.0 - u ** 2, 0.0))
    if d == 2:
        return np.column_stack([side, u])
    return np.column_stack([side, np.zeros_like(u), u])


def _random_atom(d: int, rng, radii=(1.5, 2.5), a0: float = 0.3) -> NewtonianAtom:
    dirs = unit_vector(rng.standard_normal((6, d)))
    poles = np.vstack([r * dirs[i::len(radii)] for i, r in enumerate(radii)])
    return NewtonianAtom(index=NodeIndex(level=1, ordinal=0), d=d, a0=a0, poles=poles, coeffs=rng.standard_normal(len(poles)))


# ---------------------------------------------------------------------------
# 뉴턴 핵과 전개
# ---------------------------------------------------------------------------

def test_newton_kernel_values():
    assert newton_kernel(3, [0.0, 0.0, 0.0], [2.0, 0.0, 0.0])[0, 0] == pytest.approx(0.5)
    assert newton_kernel(2, [0.0, 0.0], [math.e, 0.0])[0, 0] == pytest.approx(-1.0)


def test_newton_kernel_rejects_pole():
    with pytest.raises(DomainError):
        newton_kernel(3, [1.5, 0.0, 0.0], [1.5, 0.0, 0.0])


@pytest.mark.parametrize("d", [2, 3])
def test_shift_expansion_matches_direct(d):
    a = 1.5
    u = np.cos(np.linspace(0, math.pi, 37))
    pole = a * np.eye(d)[-1]
    direct = newton_kernel(d, _points_at(u, d), pole)[:, 0]
    assert np.allclose(newton_shift_expansion(d, a)(u), direct, rtol=1e-12, atol=1e-13)


def test_shift_expansion_rejects_inside_pole():
    with pytest.raises(DomainError):
        newton_shift_expansion(3, 1.0)


@pytest.mark.parametrize("d", [2, 3])
@pytest.mark.parametrize("ell", [1, 2, 3])
def test_derivative_expansion_matches_closed_form(d, ell):
    a = 1.7
    u = np.cos(np.linspace(0, math.pi, 25))
    series = newton_shift_derivative_expansion(d, a, ell)(u)
    closed = radial_derivative(d, a, u, ell)
    assert np.max(np.abs(series - closed)) <= 1e-10 * np.max(np.abs(closed))


@pytest.mark.parametrize("d", [2, 3])
def test_radial_derivative_finite_difference(d):
    a, h = 1.4, 1e-5
    u = np.cos(np.linspace(0, math.pi, 15))
    fd = (radial_derivative(d, a + h, u, 0) - radial_derivative(d, a - h, u, 0)) / (2 * h)
    assert np.allclose(radial_derivative(d, a, u, 1), fd, rtol=1e-6)


def test_series_degree_increases_near_sphere():
    assert _series_degree(1.05) > _series_degree(1.5) > _series_degree(3.0)


# ---------------------------------------------------------------------------
# 국소화 핵 F_ε
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("d", [2, 3])
@pytest.mark.parametrize("eps", [0.5, 0.25, 0.1])
def test_F_identity_and_normalization(d, eps):
    F = build_F(d, eps, 2 + d)
    u = np.cos(np.linspace(0, math.pi, 200))
    assert np.max(np.abs(F.from_b(u) / F.raw(u) - 1.0)) <= 1e-7
    assert sphere_integral_of_profile(F, d, eps) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("d", [2, 3])
def test_F_zero_coefficient_is_mass(d):
    F = build_F(d, 0.25, 2 + d)
    assert F.coefficients().coeffs[0] == pytest.approx(1.0, rel=1e-7)


def test_F_order_from_M():
    assert build_F(3, 0.5, 5).m == 2
    assert build_F(2, 0.5, 4).m == 2
    assert build_F(3, 0.5, 8).m == 4


@pytest.mark.parametrize("eps,M", [(0.0, 5), (1.5, 5), (0.5, 1)])
def test_F_rejects_bad_parameters(eps, M):
    with pytest.raises(DomainError):
        build_F(3, eps, M)


@pytest.mark.parametrize("d", [2, 3])
def test_F_zonal_coefficients_reproduce_profile(d):
    F = build_F(d, 0.5, 2 + d)
    kernel = F.coefficients()
    u = np.cos(np.linspace(0, math.pi, 80))
    assert np.max(np.abs(kernel(u) - F(u))) <= 1e-6 * np.max(np.abs(F(u)))


def test_b_fit_error_carries_residual():
    with pytest.raises(BCoefficientFitError) as info:
        solve_b_coefficients(3, 0.5, 2, tol=1e-30)
    assert info.value.residual > 0


@pytest.mark.parametrize("d", [2, 3])
@pytest.mark.parametrize("K", [2, 4])
def test_laplacian_profile_matches_coefficients(d, K):
    F = build_F(d, 0.5, 2 + d)
    exact = F.coefficients(_series_degree(F.a, F.m + K + d)).laplace_beltrami(K)
    u = np.cos(np.linspace(0, math.pi, 60))
    pointwise = zonal_laplacian_profile(F, u, K)
    scale = np.max(np.abs(pointwise))
    assert np.max(np.abs(pointwise - exact(u))) <= 1e-6 * scale


def test_laplacian_profile_odd_K():
    with pytest.raises(DomainError):
        zonal_laplacian_profile(build_F(3, 0.5, 5), np.zeros(3), 3)


# ---------------------------------------------------------------------------
# 스텐실과 반지름 차분
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("d,K,size", [(2, 2, 3), (3, 2, 7), (2, 4, 5)])
def test_stencil_size(d, K, size):
    assert len(laplacian_stencil(d, 0.1, K)) == size


@pytest.mark.parametrize("d", [2, 3])
@pytest.mark.parametrize("K", [2, 4])
def test_stencil_acts_on_linear_functions(d, K):
    t = 0.1
    total = sum(w * R for R, w in laplacian_stencil(d, t, K))
    c = 2.0 * (d - 1) * (math.cos(t) - 1.0) / t ** 2
    assert np.allclose(total, c ** (K // 2) * np.eye(d), rtol=1e-8, atol=1e-8)


def test_stencil_odd_K():
    with pytest.raises(DomainError):
        laplacian_stencil(3, 0.1, 1)


def test_radial_weights_approximate_derivatives():
    F = build_F(3, 0.5, 5)
    t = 1e-4
    rho = radial_weights(F, t)
    u = np.cos(np.linspace(0, math.pi, 50))
    x = _points_at(u, 3)
    poles = (F.a + t * np.arange(F.m + 1))[:, None] * np.eye(3)[-1][None, :]
    discrete = newton_kernel(3, x, poles) @ rho
    exact = F.from_b(u)
    assert np.allclose(discrete, exact, rtol=1e-2, atol=1e-2 * np.max(np.abs(exact)))


# ---------------------------------------------------------------------------
# 원자 (극점 목록)
# ---------------------------------------------------------------------------

def test_merge_poles_sums_and_drops():
    p = np.array([[2.0, 0.0], [2.0, 1e-14], [0.0, 3.0], [0.0, 3.0]])
    c = np.array([1.0, 2.0, 1.0, -1.0])
    poles, coeffs = merge_poles(p, c)
    assert len(poles) == 1
    assert coeffs[0] == pytest.approx(3.0)


@pytest.mark.parametrize("d", [2, 3])
def test_series_matches_direct(d, rng):
    atom = _random_atom(d, rng)
    pts = [np.zeros((1, d))] + [r * unit_vector(rng.standard_normal((4, d))) for r in (0.3, 0.9, 1.0)]
    x = np.vstack(pts)
    assert np.allclose(theta_eval(atom, x, "series"), theta_eval(atom, x), rtol=1e-10, atol=1e-10)


def test_series_rejects_outside(rng):
    atom = _random_atom(3, rng)
    with pytest.raises(DomainError):
        theta_eval(atom, [[1.2, 0.0, 0.0]], "series")
    with pytest.raises(DomainError):
        theta_eval(atom, [[0.2, 0.0, 0.0]], "fast")


@pytest.mark.parametrize("d", [2, 3])
def test_atom_expansion_matches_direct(d, rng):
    atom = _random_atom(d, rng, radii=(2.0, 3.0))
    x = unit_vector(rng.standard_normal((20, d)))
    assert np.allclose(atom_expansion(atom, 60).evaluate(x), atom(x), atol=1e-10)


def test_atom_json_round_trip(rng):
    atom = _random_atom(3, rng)
    back = NewtonianAtom.from_json(atom.to_json())
    assert back.index == atom.index
    assert np.array_equal(back.poles, atom.poles)
    assert np.array_equal(back.coeffs, atom.coeffs)
    empty = NewtonianAtom(index=NodeIndex(level=0, ordinal=0), d=2, a0=1.0, poles=np.zeros((0, 2)), coeffs=np.zeros(0))
    assert NewtonianAtom.from_json(empty.to_json()).n_terms == 0


def test_build_params_validation():
    with pytest.raises(ValueError):
        ThetaBuildParams(K=3)
    with pytest.raises(ValueError):
        ThetaBuildParams(gamma1=0.2, gamma2=0.4)


# ---------------------------------------------------------------------------
# θ 패밀리 (고정 t 로 구조만 확인)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fixed_family(frame2):
    return build_theta_family(frame2, ThetaBuildParams(M=4), t_override=1e-3)


def test_family_structure(fixed_family, frame2):
    assert len(fixed_family) == len(frame2)
    counts = fixed_family.pole_counts()
    assert counts[0] == 0
    assert np.all(counts <= fixed_family.budget)
    assert all(atom.min_pole_radius() > 1.0 for atom in fixed_family.atoms[1:])
    assert fixed_family.expansion_matrix().shape == (len(frame2), sh_count(frame2.band_limit, 2))


def test_level_zero_theta_equals_psi(fixed_family, frame2):
    theta = fixed_family.expansion_matrix()
    psi = frame2.analysis_matrix()
    assert np.allclose(theta[0], psi[0], atol=1e-14)


def test_family_atom_meta(fixed_family):
    atom = fixed_family.atoms[-1]
    assert atom.meta["t"] == 1e-3
    assert atom.meta["raw_terms"] >= atom.n_terms
    assert atom.normalization > 0


@pytest.mark.parametrize("p", [1.5, 2.0, math.inf])
def test_lp_norms_follow_direct_pole_sums(fixed_family, frame2, p):
    rule = product_rule(2, 8 * frame2.band_limit)
    norms = fixed_family.lp_norms(p, rule)
    top = len(frame2) - 1
    vals = np.abs(theta_eval(fixed_family.atoms[top], rule.nodes))
    expected = vals.max() if math.isinf(p) else float((vals ** p @ rule.weights) ** (1.0 / p))
    assert norms[top] == pytest.approx(expected, rel=1e-12)
    assert norms.shape == (len(frame2),)
    assert np.all(norms > 0)


def test_diamond_pipeline_report(fixed_family, frame2):
    i = int(np.flatnonzero(frame2.index.levels == 1)[0])
    atom = fixed_family.atoms[i]
    report = diamond_pipeline(atom, fixed_family.plans[1], frame2.index.centers[i], gamma0=0.5)
    assert report["level"] == 1
    assert report["kept_nodes"] >= 1
    assert report["h1_two_ways"] <= 1e-10
    assert all(np.isfinite(v) for v in report["sup"].values())
    assert np.isfinite(report["moment_ratio"])


# ---------------------------------------------------------------------------
# t_j 탐색
# ---------------------------------------------------------------------------

def test_choose_t_accepts_first_step(cutoff):
    F = build_F(2, 0.5, 4)
    params = ThetaBuildParams(M=4, gamma4=1e6)
    t, disc = choose_t(1, F, phi_kernel(2, 1.0, 2, cutoff), 1.0, params)
    assert t == pytest.approx(0.01)
    assert 0 <= disc <= 1e6


def test_choose_t_gives_up_on_unreachable_tolerance(cutoff):
    F = build_F(2, 0.5, 4)
    params = ThetaBuildParams(M=4, gamma4=1e-300)
    with pytest.raises(TStepError) as info:
        choose_t(1, F, phi_kernel(2, 1.0, 2, cutoff), 1.0, params)
    assert info.value.achieved > 0
