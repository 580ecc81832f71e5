import math

import numpy as np
import pytest

from services.cubature import product_rule
from services.frames import (
    AlmostDiagParams,
    PerturbedFrame,
    build_sections,
    convergence_in_J,
    envelope_constant,
    gram_entry,
    hardy_check,
    hardy_constant,
    localized_ip_bound_check,
    omega_matrix,
    seq_operator_norm_estimate,
)
from services.needlet import build_needlet_frame
from services.zonal import SHExpansion
from utils.errors import DomainError, NonContractiveError
from utils.io import read_csv


def _perturbed(frame, scale: float, seed: int = 1) -> PerturbedFrame:
    psi = frame.analysis_matrix()
    noise = np.random.default_rng(seed).standard_normal(psi.shape)
    return PerturbedFrame(frame, psi + scale * noise / np.linalg.norm(noise, 2))


# ---------------------------------------------------------------------------
# 거의 대각 행렬
# ---------------------------------------------------------------------------

def test_omega_diagonal_and_symmetry(frame2):
    omega = omega_matrix(frame2.index, AlmostDiagParams(K=2, M=4))
    assert np.allclose(np.diag(omega), 1.0)
    assert np.allclose(omega, omega.T)
    assert np.all((omega > 0) & (omega <= 1.0 + 1e-12))


def test_omega_rejects_small_M(frame3):
    with pytest.raises(DomainError):
        omega_matrix(frame3.index, AlmostDiagParams(K=2, M=2))


def test_sections_vanish_for_identical_families(frame2, tmp_path):
    psi = frame2.analysis_matrix()
    sections = build_sections(psi, psi, frame2.index)
    assert np.allclose(sections["A"].matrix, sections["B"].matrix)
    assert np.abs(sections["D"].matrix).max() == 0.0
    omega = omega_matrix(frame2.index, AlmostDiagParams(K=2, M=4))
    assert sections["D"].fitted_constant(omega) == 0.0
    path = sections["A"].dump_csv(str(tmp_path / "section_A.csv"), {"d": 2}, threshold=1e-12)
    table = read_csv(path)
    assert set(table.columns) == {"xi", "eta", "value"}
    assert len(table) == len(sections["A"].rows(1e-12))


def test_sections_shape_guard(frame2):
    psi = frame2.analysis_matrix()
    with pytest.raises(DomainError):
        build_sections(psi, psi[:, :-1], frame2.index)


def test_gram_entry_matches_section(frame2):
    A = frame2.analysis_matrix() @ frame2.analysis_matrix().T
    i, j = 5, len(frame2) - 3
    assert gram_entry(frame2.atom(i), frame2.atom(j)) == pytest.approx(A[i, j], abs=1e-12)


def test_operator_norm_estimates(rng):
    D = rng.standard_normal((12, 12))
    exact = np.linalg.norm(D, 2)
    assert seq_operator_norm_estimate(D, np.linalg.norm) == pytest.approx(exact, rel=1e-9)
    w = 2.0 ** np.arange(12)
    weighted = seq_operator_norm_estimate(D, np.linalg.norm, weights=w)
    assert weighted == pytest.approx(np.linalg.norm(w[:, None] * D / w[None, :], 2))


# ---------------------------------------------------------------------------
# T 와 쌍대 계수
# ---------------------------------------------------------------------------

def test_identity_family_is_exact(frame2, rng):
    pf = PerturbedFrame(frame2, frame2.analysis_matrix())
    assert pf.rho_T() <= 1e-10
    f = SHExpansion.random(2, pf.W, rng)
    assert np.allclose(pf.dual_coefficients(f).values, frame2.analyze(f).values, atol=1e-10)
    assert pf.last_iterations == 0
    assert np.allclose(pf.apply_T(f).coeffs, f.coeffs, atol=1e-10)


def test_perturbed_round_trip(frame2, rng):
    pf = _perturbed(frame2, 0.05)
    assert 0 < pf.rho_T() < 0.5
    for _ in range(5):
        f = SHExpansion.random(2, pf.W, rng)
        assert pf.round_trip_error(f) <= 1e-8
    assert pf.last_iterations > 0


def test_perturbed_round_trip_d3(frame3, rng):
    pf = _perturbed(frame3, 0.05)
    f = SHExpansion.random(3, pf.W, rng)
    assert pf.round_trip_error(f) <= 1e-8


def test_dual_coefficients_drop_high_degrees(frame2, rng):
    pf = _perturbed(frame2, 0.05)
    f = SHExpansion.random(2, pf.W, rng)
    padded = f + SHExpansion.from_coeffs(2, np.r_[np.zeros(2 * pf.W + 1), np.ones(2)])
    assert np.allclose(pf.dual_coefficients(padded).values, pf.dual_coefficients(f).values)


def test_non_contractive_family(frame2, rng):
    pf = PerturbedFrame(frame2, -frame2.analysis_matrix())
    assert pf.rho_T() == pytest.approx(2.0)
    with pytest.raises(NonContractiveError) as info:
        pf.invert_T(SHExpansion.random(2, pf.W, rng))
    assert info.value.rho >= 1
    with pytest.raises(NonContractiveError):
        pf.h_section()


def test_h_section_for_identity(frame2):
    pf = PerturbedFrame(frame2, frame2.analysis_matrix())
    H = pf.h_section().matrix
    assert np.allclose(H, pf.psi_w @ pf.psi_w.T, atol=1e-10)
    assert np.allclose(H, H.T, atol=1e-10)


def test_convergence_in_J(cutoff, frame2, rng):
    coarse = build_needlet_frame(2, 3, 0.5, cutoff)
    builders = {
        3: lambda: PerturbedFrame(coarse, coarse.analysis_matrix()),
        4: lambda: PerturbedFrame(frame2, frame2.analysis_matrix()),
    }
    f = SHExpansion.random(2, coarse.working_degree, rng)
    rows = convergence_in_J(builders, f)
    assert [r["J"] for r in rows] == [3, 4]
    assert math.isnan(rows[0]["delta"])
    assert rows[1]["delta"] <= 1e-10


# ---------------------------------------------------------------------------
# 국소화 내적 / 하디 부등식
# ---------------------------------------------------------------------------

def test_envelope_constant_positive(frame2):
    atom = frame2.atom(len(frame2) - 1)
    grid = product_rule(2, 64)
    kappa = envelope_constant(atom.expansion(), atom.center, atom.index.N, 4, grid)
    assert 0 < kappa < math.inf


@pytest.mark.parametrize("variant", ["moments", "mean", "plain"])
def test_localized_ip_bound_variants(frame2, variant):
    grid = product_rule(2, 64)
    a = frame2.atom(3)
    b = frame2.atom(len(frame2) - 1)
    f, g = b.expansion(), a.expansion()
    k1 = envelope_constant(g, a.center, a.index.N, 4, grid)
    k2 = envelope_constant(f, b.center, b.index.N, 4, grid)
    report = localized_ip_bound_check(g, f, a.index.N, b.index.N, a.center, b.center, k1, k2, K=2, M=4, variant=variant)
    assert report["variant"] == variant
    assert report["rhs"] > 0 and math.isfinite(report["ratio"])


def test_localized_ip_bound_errors(frame2):
    f = frame2.atom(1).expansion()
    x = frame2.atom(1).center
    with pytest.raises(DomainError):
        localized_ip_bound_check(f, f, 4.0, 2.0, x, x, 1.0, 1.0, 2, 4)
    with pytest.raises(DomainError):
        localized_ip_bound_check(f, f, 1.0, 2.0, x, x, 1.0, 1.0, 2, 4, variant="other")


def test_hardy_constant_value():
    assert hardy_constant(1.0, 1.0) == pytest.approx(2.0 / math.log(2.0))


def test_hardy_random_instances():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        a = rng.exponential(size=rng.integers(1, 20))
        gamma = rng.uniform(0.1, 2.0)
        q = rng.uniform(0.3, 3.0)
        report = hardy_check(a, gamma, q)
        assert report["upper_holds"] and report["lower_holds"]


def test_hardy_rejects_negative():
    with pytest.raises(DomainError):
        hardy_check([1.0, -1.0], 1.0, 2.0)
