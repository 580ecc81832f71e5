import math
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from models.sequences import CoeffSeq, FrameIndex
from services.cubature import CubatureRule, product_rule
from services.frames import PerturbedFrame
from services.needlet import CutoffPair, NeedletFrame
from services.newton import NewtonianAtom, ThetaFamily, merge_poles, newton_kernel
from services.spaces import SmoothnessTriple, function_space_norm, seq_besov_norm
from services.zonal import SHExpansion, sh_basis_matrix, sh_count
from utils.errors import DomainError
from utils.logger import setup_logger

logger = setup_logger("Approx")


# ---------------------------------------------------------------------------
# n-항 근사
# ---------------------------------------------------------------------------

class Approximant(BaseModel):
    """G(x) = a₀ + Σ a_ν N(x − y_ν) 로 병합된 n-항 근사"""

    indices: np.ndarray
    coefficients: np.ndarray
    expansion: SHExpansion
    newton: Optional[NewtonianAtom] = None
    n_frame_terms: int
    n_newton_terms: int = 0

    class Config:
        arbitrary_types_allowed = True

    def validate_terms(self, budget: int) -> Dict[str, Any]:
        """𝒩_{ñ·n} 소속 확인: 항 수와 극점 위치 (|y| > 1)"""
        limit = budget * self.n_frame_terms + 1
        outside = True if self.newton is None or self.newton.n_terms == 0 else self.newton.min_pole_radius() > 1.0
        return {
            "n_newton_terms": self.n_newton_terms,
            "limit": limit,
            "count_ok": self.n_newton_terms <= limit,
            "poles_outside": bool(outside),
        }

    def to_json(self, index: FrameIndex) -> Dict[str, Any]:
        return {
            "selected": [[int(index.levels[i]), int(index.ordinals[i])] for i in self.indices],
            "coefficients": self.coefficients.tolist(),
            "n_frame_terms": self.n_frame_terms,
            "n_newton_terms": self.n_newton_terms,
            "G": self.newton.to_json() if self.newton is not None else None,
        }


def merge_atoms(atoms: Sequence[NewtonianAtom], weights: Sequence[float]) -> NewtonianAtom:
    """Σ a_ξ θ_ξ 를 하나의 극점 목록으로"""
    d = atoms[0].d
    a0 = float(sum(w * a.a0 for a, w in zip(atoms, weights)))
    poles = np.vstack([a.poles for a in atoms] + [np.zeros((0, d))])
    coeffs = np.concatenate([w * a.coeffs for a, w in zip(atoms, weights)] + [np.zeros(0)])
    poles, coeffs = merge_poles(poles, coeffs)
    return NewtonianAtom(index=atoms[0].index, d=d, a0=a0, poles=poles, coeffs=coeffs, meta={"merged": len(atoms)})


def greedy_order(coeffs: CoeffSeq, atom_norms: np.ndarray) -> np.ndarray:
    """‖a_ξθ_ξ‖_p 내림차순 (동률은 인덱스 순)"""
    score = np.abs(coeffs.values) * atom_norms
    return np.argsort(-score, kind="stable")


def greedy_nterm(
    f: SHExpansion,
    n: int,
    pf: PerturbedFrame,
    theta: np.ndarray,
    atom_norms: np.ndarray,
    error_space: SmoothnessTriple,
    kind: str = "F",
    cutoff: Optional[CutoffPair] = None,
    grid: Optional[CubatureRule] = None,
    family: Optional[ThetaFamily] = None,
    tol: float = 1e-10,
) -> Tuple[Approximant, float]:
    """
    쌍대 계수 중 ‖⟨f,θ̃_ξ⟩θ_ξ‖_p 가 큰 n개 선택
    :param theta: 행 ξ = θ_ξ 의 구면조화 계수
    :param atom_norms: ‖θ_ξ‖_p
    :param family: 주어지면 극점 목록 G 도 병합
    :return: (Approximant, 오차 노름)
    """
    if n <= 0:
        raise DomainError(f"n must be positive, got {n}")
    coeffs = pf.dual_coefficients(f, tol)
    order = greedy_order(coeffs, atom_norms)[:n]
    return _approximant(f, coeffs, order, theta, error_space, kind, cutoff, grid, family)


def _approximant(f, coeffs, order, theta, error_space, kind, cutoff, grid, family) -> Tuple[Approximant, float]:
    a = coeffs.values[order]
    approx = SHExpansion.from_coeffs(f.d, theta[order].T @ a)
    newton = None
    n_terms = 0
    if family is not None and len(order):
        newton = merge_atoms([family.atoms[i] for i in order], a)
        n_terms = newton.n_terms
    error = function_space_norm(f - approx, error_space, kind, cutoff, grid)
    return Approximant(indices=order, coefficients=a, expansion=approx, newton=newton, n_frame_terms=len(order), n_newton_terms=n_terms), error


def greedy_sweep(
    f: SHExpansion,
    n_grid: Sequence[int],
    pf: PerturbedFrame,
    theta: np.ndarray,
    atom_norms: np.ndarray,
    error_space: SmoothnessTriple,
    kind: str = "F",
    cutoff: Optional[CutoffPair] = None,
    tol: float = 1e-10,
) -> List[float]:
    """쌍대 계수는 한 번만 계산하고 n 별 오차"""
    coeffs = pf.dual_coefficients(f, tol)
    order = greedy_order(coeffs, atom_norms)
    grid = product_rule(f.d, max(4 * sh_degree(theta, f.d), 16))
    return [_approximant(f, coeffs, order[:n], theta, error_space, kind, cutoff, grid, None)[1] for n in n_grid]


def sh_degree(matrix: np.ndarray, d: int) -> int:
    L = 0
    while sh_count(L, d) < matrix.shape[1]:
        L += 1
    return L


# ---------------------------------------------------------------------------
# 시험 함수와 수렴률 실험
# ---------------------------------------------------------------------------

def besov_magnitude(j: int, d: int, s: float, tau: float) -> float:
    return 2.0 ** (-j * (s + (d - 1) * (0.5 - 1.0 / tau))) * (j + 1) ** (-2.0 / tau)


def synth_besov_function(frame: NeedletFrame, s: float, tau: float, seed: int, levels: Optional[int] = None) -> Tuple[SHExpansion, CoeffSeq, float]:
    """
    레벨 j ≤ levels 에서 ⌈2^{j(d−1)/2}⌉개 무작위 니들렛 계수로 시험 함수 합성
    :return: (f, 계수, ‖h‖_{b^{sτ}_τ})
    """
    levels = frame.J - 1 if levels is None else levels
    if levels > frame.J - 1:
        raise DomainError(f"levels must be at most J-1={frame.J - 1}")
    rng = np.random.default_rng(seed)
    d = frame.d
    h = CoeffSeq.zeros(frame.index)
    for j, sl in frame.index.level_slices():
        if j > levels:
            break
        size = sl.stop - sl.start
        count = min(size, math.ceil(2.0 ** (j * (d - 1) / 2.0)))
        picks = sl.start + rng.choice(size, count, replace=False)
        h.values[picks] = rng.choice([-1.0, 1.0], count) * besov_magnitude(j, d, s, tau)
    f = frame.synthesize(h).resize(frame.working_degree)
    norm = seq_besov_norm(h, SmoothnessTriple(s=s, p=tau, q=tau))
    return f, h, norm


def fit_slope(n: np.ndarray, sigma: np.ndarray, floor: float = 0.0) -> Dict[str, float]:
    """log σ_n ~ slope·log n (바닥 오차의 10배 이상인 점만)"""
    n = np.asarray(n, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    keep = (sigma > 10 * floor) & (sigma > 0)
    x, y = np.log(n[keep]), np.log(sigma[keep])
    if len(x) < 2:
        return {"slope": math.nan, "stderr": math.nan, "points": int(len(x))}
    if len(x) >= 4:
        coef, cov = np.polyfit(x, y, 1, cov=True)
        stderr = float(math.sqrt(cov[0, 0]))
    else:
        coef, stderr = np.polyfit(x, y, 1), math.nan
    return {"slope": float(coef[0]), "stderr": stderr, "points": int(len(x))}


def rate_experiment(
    pf: PerturbedFrame,
    theta: np.ndarray,
    s: float,
    p: float,
    q: float,
    n_grid: Sequence[int],
    seeds: Sequence[int],
    kind: str = "F",
    cutoff: Optional[CutoffPair] = None,
    tol: float = 1e-10,
    atom_norms: Optional[np.ndarray] = None,
) -> Tuple[pd.DataFrame, Dict[str, float]]:
    """
    σ_n 수렴률 실험 (오차 공간 𝓕^{0q}_p, kind="B" 이면 𝓑^{0q}_p)
    :param atom_norms: ‖θ_ξ‖_p (없으면 theta 행이 대역 제한이라 보고 격자에서 계산)
    :return: (seed, s, p, q, d, n, sigma_n 표, 기울기 요약)
    """
    frame = pf.frame
    d = frame.d
    tau = SmoothnessTriple(s=s, p=p, q=q).tau(d)
    error_space = SmoothnessTriple(s=0.0, p=p, q=q)
    if atom_norms is None:
        rule = product_rule(d, max(4 * frame.band_limit, 16))
        Y = sh_basis_matrix(d, frame.band_limit, rule.nodes)
        atom_norms = (np.abs(theta @ Y.T) ** p @ rule.weights) ** (1.0 / p)
    rows: List[Dict[str, Any]] = []
    floors = []
    for seed in seeds:
        f, _, _ = synth_besov_function(frame, s, tau, seed)
        *errors, full = greedy_sweep(f, list(n_grid) + [len(frame)], pf, theta, atom_norms, error_space, kind, cutoff, tol)
        floors.append(full)
        rows += [{"seed": seed, "s": s, "p": p, "q": q, "d": d, "n": n, "sigma_n": e, "kind": kind} for n, e in zip(n_grid, errors)]
        logger.info(f"🔍 seed={seed}: σ_n {errors[0]:.3e} → {errors[-1]:.3e} (바닥 {full:.1e})")
    table = pd.DataFrame(rows)
    mean = table.groupby("n")["sigma_n"].mean()
    summary = fit_slope(mean.index.to_numpy(), mean.to_numpy(), max(floors))
    summary.update({"target": -s / (d - 1), "s": s, "p": p, "q": q, "d": d, "kind": kind})
    logger.info(f"✅ 기울기 {summary['slope']:.3f} ± {summary['stderr']:.3f} (목표 {summary['target']:.3f})")
    return table, summary


def rearrangement_check(x: Sequence[float], n: int, tau: float, p: float) -> Dict[str, Any]:
    """(Σ_{k>n} x_k^p)^{1/p} ≤ n^{1/p−1/τ}(Σ x_k^τ)^{1/τ}, x 는 비증가"""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(np.diff(x) > 0):
        raise DomainError("rearrangement check needs a nonnegative nonincreasing sequence")
    if not 0 < tau < p or n < 1:
        raise DomainError("need 0 < tau < p and n >= 1")
    lhs = float(np.sum(x[n:] ** p)) ** (1.0 / p)
    rhs = n ** (1.0 / p - 1.0 / tau) * float(np.sum(x ** tau)) ** (1.0 / tau)
    return {"lhs": lhs, "rhs": rhs, "holds": lhs <= rhs * (1 + 1e-12), "slack": rhs - lhs}


# ---------------------------------------------------------------------------
# 조화 확장과 켈빈 변환
# ---------------------------------------------------------------------------

class InteriorExpansion(BaseModel):
    """U(x) = Σ b_{kν}|x|^k Y_{kν}(x/|x|), |x| < 1"""

    d: int
    degree: int
    coeffs: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @classmethod
    def from_boundary(cls, f: SHExpansion) -> "InteriorExpansion":
        return cls(d=f.d, degree=f.degree, coeffs=f.coeffs.copy())

    def boundary(self) -> SHExpansion:
        return SHExpansion(d=self.d, degree=self.degree, coeffs=self.coeffs.copy())

    def __call__(self, points) -> np.ndarray:
        x = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.linalg.norm(x, axis=1)
        if np.any(r >= 1.0):
            raise DomainError("interior expansion needs |x| < 1")
        xhat = np.where(r[:, None] > 0, x / np.where(r > 0, r, 1.0)[:, None], np.eye(self.d)[0])
        deg = SHExpansion(d=self.d, degree=self.degree, coeffs=self.coeffs).degrees()
        return np.sum(sh_basis_matrix(self.d, self.degree, xhat) * self.coeffs * r[:, None] ** deg, axis=1)


class ExteriorExpansion(BaseModel):
    """U(x) = Σ b_{kν}|x|^{−k−d+2} Y_{kν}(x/|x|) + c·ln|x| (d=2), |x| > 1"""

    d: int
    degree: int
    coeffs: np.ndarray
    log_coeff: float = 0.0

    class Config:
        arbitrary_types_allowed = True

    def __call__(self, points) -> np.ndarray:
        x = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.linalg.norm(x, axis=1)
        if np.any(r <= 1.0 - 1e-12):
            raise DomainError("exterior expansion needs |x| >= 1")
        deg = SHExpansion(d=self.d, degree=self.degree, coeffs=self.coeffs).degrees()
        vals = np.sum(sh_basis_matrix(self.d, self.degree, x / r[:, None]) * self.coeffs * r[:, None] ** (-deg - self.d + 2.0), axis=1)
        return vals + self.log_coeff * np.log(r)


def harmonic_extension(f: SHExpansion) -> InteriorExpansion:
    return InteriorExpansion.from_boundary(f)


def kelvin_transform(U):
    """KU(x) = |x|^{2−d}U(x/|x|²): r^k ↔ r^{−k−d+2}"""
    if isinstance(U, InteriorExpansion):
        return ExteriorExpansion(d=U.d, degree=U.degree, coeffs=U.coeffs.copy())
    if isinstance(U, ExteriorExpansion):
        if U.log_coeff:
            raise DomainError("the ln|x| term has no interior Kelvin image")
        return InteriorExpansion(d=U.d, degree=U.degree, coeffs=U.coeffs.copy())
    raise DomainError(f"cannot Kelvin-transform {type(U).__name__}")


def recover_coefficients(U, radius: float, degree: int, d: int) -> SHExpansion:
    """b_{kν}(U) = a^{−k}∫_S U(aη)Y_{kν}(η)dσ(η)"""
    if not 0 < radius < 1:
        raise DomainError("radius must lie in (0, 1)")
    rule = product_rule(d, 2 * degree + 2)
    Y = sh_basis_matrix(d, degree, rule.nodes)
    raw = (rule.weights * U(radius * rule.nodes)) @ Y
    deg = SHExpansion.zeros(d, degree).degrees()
    return SHExpansion(d=d, degree=degree, coeffs=raw / radius ** deg)


class KelvinImage(BaseModel):
    """뉴턴 원자의 켈빈 상: 극점 y → y/|y|² (d ≥ 3 계수 |y|^{2−d}, d=2 는 상수와 ln|x| 항)"""

    d: int
    a0: float
    poles: np.ndarray
    coeffs: np.ndarray
    log_coeff: float = 0.0

    class Config:
        arbitrary_types_allowed = True

    def __call__(self, points) -> np.ndarray:
        x = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(len(x), self.a0)
        if len(self.coeffs):
            out = out + newton_kernel(self.d, x, self.poles) @ self.coeffs
        if self.log_coeff:
            out = out + self.log_coeff * np.log(np.linalg.norm(x, axis=1))
        return out


def kelvin_image(atom: NewtonianAtom) -> KelvinImage:
    d = atom.d
    radii = np.linalg.norm(atom.poles, axis=1)
    inner = atom.poles / radii[:, None] ** 2
    if d == 2:
        # ln(1/|x/|x|² − y|) = ln(1/|x − y*|) − ln|y| + ln|x|
        return KelvinImage(
            d=2,
            a0=atom.a0 - float(atom.coeffs @ np.log(radii)),
            poles=inner,
            coeffs=atom.coeffs.copy(),
            log_coeff=float(atom.coeffs.sum()),
        )
    poles = np.vstack([inner, np.zeros((1, d))]) if atom.a0 else inner
    coeffs = atom.coeffs * radii ** (2 - d)
    if atom.a0:
        coeffs = np.append(coeffs, atom.a0)
    return KelvinImage(d=d, a0=0.0, poles=poles, coeffs=coeffs)


def exterior_error(U: ExteriorExpansion, p: float, levels: int = 6, grid: Optional[CubatureRule] = None) -> float:
    """‖sup_{r>1} r^{d−2}|U(r·)|‖_p, r ∈ {1} ∪ {1+2^{−l}} ∪ {2, 4, 8}"""
    grid = grid or product_rule(U.d, max(4 * U.degree, 16))
    radii = [1.0] + [1.0 + 2.0 ** (-l) for l in range(levels, 0, -1)] + [2.0, 4.0, 8.0]
    sup = np.zeros(len(grid))
    for r in radii:
        sup = np.maximum(sup, r ** (U.d - 2) * np.abs(U(r * grid.nodes)))
    return float(grid.weights @ sup ** p) ** (1.0 / p)
