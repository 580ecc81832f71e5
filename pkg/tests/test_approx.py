import numpy as np
import pytest

from models.sequences import CoeffSeq, NodeIndex
from services.approx import (
    ExteriorExpansion,
    InteriorExpansion,
    besov_magnitude,
    exterior_error,
    fit_slope,
    greedy_nterm,
    greedy_order,
    greedy_sweep,
    harmonic_extension,
    kelvin_image,
    kelvin_transform,
    merge_atoms,
    rate_experiment,
    rearrangement_check,
    recover_coefficients,
    synth_besov_function,
)
from services.cubature import product_rule
from services.frames import PerturbedFrame
from services.newton import NewtonianAtom
from services.spaces import SmoothnessTriple
from services.sphere import unit_vector
from services.zonal import SHExpansion, sh_basis_matrix
from utils.errors import DomainError


@pytest.fixture(scope="module")
def identity_pf(frame2):
    return PerturbedFrame(frame2, frame2.analysis_matrix())


def _l2_norms(frame, theta):
    rule = product_rule(frame.d, 4 * frame.band_limit)
    Y = sh_basis_matrix(frame.d, frame.band_limit, rule.nodes)
    return np.sqrt((theta @ Y.T) ** 2 @ rule.weights)


def _atom(d, rng, a0=0.4, n=5, radius=1.6):
    poles = radius * unit_vector(rng.standard_normal((n, d)))
    return NewtonianAtom(index=NodeIndex(level=2, ordinal=1), d=d, a0=a0, poles=poles, coeffs=rng.standard_normal(n))


# ---------------------------------------------------------------------------
# 탐욕적 근사
# ---------------------------------------------------------------------------

def test_greedy_order_is_stable(frame2):
    h = CoeffSeq.zeros(frame2.index)
    h.values[:4] = [1.0, -3.0, 3.0, 0.5]
    order = greedy_order(h, np.ones(len(frame2)))
    assert list(order[:5]) == [1, 2, 0, 3, 4]


def test_greedy_full_budget_recovers_f(frame2, identity_pf, rng):
    theta = frame2.analysis_matrix()
    f = SHExpansion.random(2, identity_pf.W, rng)
    approx, error = greedy_nterm(f, len(frame2), identity_pf, theta, _l2_norms(frame2, theta), SmoothnessTriple())
    assert approx.n_frame_terms == len(frame2)
    assert error <= 1e-8 * f.norm2()


def test_greedy_rejects_nonpositive_n(frame2, identity_pf, rng):
    f = SHExpansion.random(2, identity_pf.W, rng)
    with pytest.raises(DomainError):
        greedy_nterm(f, 0, identity_pf, frame2.analysis_matrix(), np.ones(len(frame2)), SmoothnessTriple())


def test_greedy_sweep_reaches_floor(frame2, identity_pf):
    theta = frame2.analysis_matrix()
    f, _, _ = synth_besov_function(frame2, 1.0, 2.0 / 3.0, seed=3)
    errors = greedy_sweep(f, [1, 4, 16, len(frame2)], identity_pf, theta, _l2_norms(frame2, theta), SmoothnessTriple())
    assert errors[-1] <= 1e-8 * f.norm2()
    assert errors[0] > errors[-1]


def test_rate_experiment_table(frame2, identity_pf):
    table, summary = rate_experiment(identity_pf, frame2.analysis_matrix(), 1.0, 2.0, 2.0, [2, 4, 8], [0, 1])
    assert len(table) == 6
    assert set(table["n"]) == {2, 4, 8}
    assert (table["sigma_n"] >= 0).all()
    assert summary["target"] == pytest.approx(-1.0)
    assert summary["kind"] == "F"


def test_merge_atoms_and_accounting(rng):
    a, b = _atom(3, rng), _atom(3, rng)
    merged = merge_atoms([a, b], [2.0, -1.0])
    assert merged.a0 == pytest.approx(2.0 * a.a0 - b.a0)
    x = 0.5 * unit_vector(rng.standard_normal((6, 3)))
    assert np.allclose(merged(x), 2.0 * a(x) - b(x))
    same = merge_atoms([a, a], [1.0, -1.0])
    assert same.n_terms == 0


# ---------------------------------------------------------------------------
# 시험 함수 / 수렴률 도구
# ---------------------------------------------------------------------------

def test_synth_besov_function_support(frame2):
    f, h, norm = synth_besov_function(frame2, 1.0, 2.0 / 3.0, seed=0)
    assert f.degree == frame2.working_degree
    for j, sl in frame2.index.level_slices():
        count = np.count_nonzero(h.values[sl])
        if j <= frame2.J - 1:
            assert count == min(sl.stop - sl.start, int(np.ceil(2.0 ** (j / 2.0))))
            assert np.allclose(np.abs(h.values[sl][h.values[sl] != 0]), besov_magnitude(j, 2, 1.0, 2.0 / 3.0))
        else:
            assert count == 0
    assert norm > 0


def test_synth_besov_function_is_seeded(frame2):
    first = synth_besov_function(frame2, 0.5, 1.0, seed=7)[1].values
    again = synth_besov_function(frame2, 0.5, 1.0, seed=7)[1].values
    assert np.array_equal(first, again)
    with pytest.raises(DomainError):
        synth_besov_function(frame2, 0.5, 1.0, seed=7, levels=frame2.J)


def test_fit_slope_exact_power_law():
    n = 2.0 ** np.arange(8)
    summary = fit_slope(n, 3.0 * n ** -0.75)
    assert summary["slope"] == pytest.approx(-0.75)
    assert summary["stderr"] == pytest.approx(0.0, abs=1e-10)
    assert summary["points"] == 8


def test_fit_slope_drops_floor_points():
    n = np.array([1, 2, 4, 8, 16])
    sigma = np.array([1.0, 0.5, 0.25, 1e-12, 1e-12])
    summary = fit_slope(n, sigma, floor=1e-12)
    assert summary["points"] == 3
    assert summary["slope"] == pytest.approx(-1.0)


def test_rearrangement_random_instances():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        x = np.sort(rng.exponential(size=rng.integers(2, 40)))[::-1]
        tau = rng.uniform(0.2, 1.5)
        p = tau + rng.uniform(0.1, 2.0)
        n = int(rng.integers(1, len(x) + 1))
        assert rearrangement_check(x, n, tau, p)["holds"]


def test_rearrangement_rejects_increasing():
    with pytest.raises(DomainError):
        rearrangement_check([1.0, 2.0], 1, 0.5, 1.0)


# ---------------------------------------------------------------------------
# 조화 확장과 켈빈 변환
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("d", [2, 3])
def test_kelvin_involution(d, rng):
    for _ in range(50):
        U = harmonic_extension(SHExpansion.random(d, 5, rng))
        back = kelvin_transform(kelvin_transform(U))
        assert np.max(np.abs(back.coeffs - U.coeffs)) <= 1e-12


@pytest.mark.parametrize("d", [2, 3])
def test_kelvin_pointwise(d, rng):
    U = harmonic_extension(SHExpansion.random(d, 5, rng))
    KU = kelvin_transform(U)
    x = 2.0 * unit_vector(rng.standard_normal((10, d)))
    r = np.linalg.norm(x, axis=1)
    expected = r ** (2 - d) * U(x / r[:, None] ** 2)
    assert np.allclose(KU(x), expected, rtol=1e-12, atol=1e-12)


def test_kelvin_rejects_log_term():
    U = ExteriorExpansion(d=2, degree=1, coeffs=np.ones(3), log_coeff=1.0)
    with pytest.raises(DomainError):
        kelvin_transform(U)
    with pytest.raises(DomainError):
        kelvin_transform("not an expansion")


def test_interior_domain(rng):
    U = harmonic_extension(SHExpansion.random(3, 3, rng))
    assert U(np.zeros(3))[0] == pytest.approx(U.coeffs[0] / np.sqrt(4 * np.pi))
    with pytest.raises(DomainError):
        U([[1.0, 0.0, 0.0]])
    with pytest.raises(DomainError):
        kelvin_transform(U)([[0.5, 0.0, 0.0]])


@pytest.mark.parametrize("d", [2, 3])
def test_recover_coefficients(d, rng):
    f = SHExpansion.random(d, 6, rng)
    back = recover_coefficients(harmonic_extension(f), 0.5, 6, d)
    assert np.allclose(back.coeffs, f.coeffs, atol=1e-10)
    with pytest.raises(DomainError):
        recover_coefficients(harmonic_extension(f), 1.0, 6, d)


@pytest.mark.parametrize("d", [2, 3])
def test_kelvin_image_of_atom(d, rng):
    atom = _atom(d, rng)
    image = kelvin_image(atom)
    x = 0.5 * unit_vector(rng.standard_normal((12, d)))
    r = np.linalg.norm(x, axis=1)
    expected = r ** (2 - d) * atom(x / r[:, None] ** 2)
    assert np.allclose(image(x), expected, rtol=1e-10, atol=1e-10)
    assert np.all(np.linalg.norm(image.poles, axis=1) < 1.0)


def test_exterior_error_scales(rng):
    U = kelvin_transform(harmonic_extension(SHExpansion.random(3, 4, rng)))
    e1 = exterior_error(U, 2.0)
    doubled = ExteriorExpansion(d=3, degree=U.degree, coeffs=2.0 * U.coeffs)
    assert e1 > 0
    assert exterior_error(doubled, 2.0) == pytest.approx(2.0 * e1)


def test_interior_boundary_round_trip(rng):
    f = SHExpansion.random(2, 4, rng)
    assert np.array_equal(InteriorExpansion.from_boundary(f).boundary().coeffs, f.coeffs)
