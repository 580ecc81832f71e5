import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from models.sequences import CoeffSeq, FrameIndex
from services.cubature import CubatureRule
from services.needlet import NeedletAtom, NeedletFrame
from services.newton import NewtonianAtom, ThetaFamily, atom_expansion
from services.sphere import geodesic_distance, pairwise_distance, sphere_area
from services.zonal import SHExpansion, sh_count
from utils.errors import DomainError, NonContractiveError
from utils.io import write_csv
from utils.logger import setup_logger

logger = setup_logger("Frames")


class AlmostDiagParams(BaseModel):
    """ω_{ξη} = (min N/max N)^{K+(d−1)/2} (1 + min N·ρ(ξ,η))^{−M}"""

    K: int = Field(2, ge=0)
    M: float

    def validate_for(self, d: int) -> None:
        if self.M <= d - 1:
            raise DomainError(f"M must exceed d-1={d - 1}, got {self.M}")


def omega_matrix(index: FrameIndex, params: AlmostDiagParams, rows: Optional[np.ndarray] = None, cols: Optional[np.ndarray] = None) -> np.ndarray:
    params.validate_for(index.d)
    rows = np.arange(len(index)) if rows is None else np.asarray(rows)
    cols = np.arange(len(index)) if cols is None else np.asarray(cols)
    N_r = index.N[rows][:, None]
    N_c = index.N[cols][None, :]
    lo, hi = np.minimum(N_r, N_c), np.maximum(N_r, N_c)
    rho = pairwise_distance(index.centers[rows], index.centers[cols])
    return (lo / hi) ** (params.K + (index.d - 1) / 2.0) * (1.0 + lo * rho) ** (-params.M)


AtomLike = Union[SHExpansion, NeedletAtom, NewtonianAtom]


def _as_expansion(u: AtomLike, L: int) -> SHExpansion:
    if isinstance(u, SHExpansion):
        return u.resize(L)
    if isinstance(u, NewtonianAtom):
        return atom_expansion(u, L)
    return u.expansion(L)


def gram_entry(u: AtomLike, v: NeedletAtom) -> float:
    """⟨u, ψ_v⟩: ψ_v 가 대역 제한이라 계수 공간 내적이 정확"""
    L = v.kernel.degree
    return _as_expansion(u, L).inner(v.expansion(L))


class OperatorSection(BaseModel):
    """레벨 ≤ J 유한 단면 (A, B, D, H)"""

    tag: str
    index: FrameIndex
    matrix: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    def apply(self, h: CoeffSeq) -> CoeffSeq:
        return CoeffSeq(index=self.index, values=self.matrix @ h.values)

    def fitted_constant(self, omega: np.ndarray) -> float:
        """max |entry| / ω"""
        return float(np.max(np.abs(self.matrix) / omega))

    def rows(self, threshold: float = 0.0) -> List[Dict[str, Any]]:
        idx = self.index
        hits = np.argwhere(np.abs(self.matrix) > threshold)
        return [
            {
                "xi": f"{idx.levels[a]}:{idx.ordinals[a]}",
                "eta": f"{idx.levels[b]}:{idx.ordinals[b]}",
                "value": float(self.matrix[a, b]),
            }
            for a, b in hits
        ]

    def dump_csv(self, path: str, config: Optional[Dict[str, Any]] = None, threshold: float = 0.0) -> str:
        return write_csv(path, self.rows(threshold), {**(config or {}), "section": self.tag})


def build_sections(psi: np.ndarray, theta: np.ndarray, index: FrameIndex) -> Dict[str, OperatorSection]:
    """
    A = ⟨ψ_η, ψ_ξ⟩, B = ⟨θ_η, ψ_ξ⟩, D = A − B
    :param psi: 행 ξ = ψ_ξ 의 구면조화 계수
    :param theta: 행 ξ = θ_ξ 의 구면조화 계수 (같은 차수)
    """
    if psi.shape != theta.shape:
        raise DomainError("psi and theta coefficient matrices must share a shape")
    A = psi @ psi.T
    B = psi @ theta.T
    D = A - B
    logger.info(f"✅ 단면 A/B/D ({len(index)}×{len(index)}), max|D|={np.abs(D).max():.3e}")
    return {
        "A": OperatorSection(tag="A", index=index, matrix=A),
        "B": OperatorSection(tag="B", index=index, matrix=B),
        "D": OperatorSection(tag="D", index=index, matrix=D),
    }


def seq_operator_norm_estimate(
    matrix: np.ndarray,
    norm: Callable[[np.ndarray], float],
    weights: Optional[np.ndarray] = None,
    trials: int = 200,
    seed: int = 0,
) -> float:
    """
    수열 공간 위 연산자 노름의 하한 추정
    weights 가 주어지면 (ℓ² 가중 노름) ‖W D W⁻¹‖₂ 를 정확히 계산,
    아니면 무작위 탐색 + 국소 개선으로 ‖Dh‖/‖h‖ 최대화
    """
    if weights is not None:
        return float(np.linalg.norm(weights[:, None] * matrix / weights[None, :], 2))
    rng = np.random.default_rng(seed)
    n = matrix.shape[1]

    def ratio(h: np.ndarray) -> float:
        den = norm(h)
        return norm(matrix @ h) / den if den > 0 else 0.0

    candidates = [np.eye(n)[i] for i in range(min(n, 32))]
    candidates.append(np.linalg.svd(matrix)[2][0])
    best_h, best = None, -math.inf
    for h in candidates:
        r = ratio(h)
        if r > best:
            best_h, best = h, r
    for _ in range(trials):
        if rng.random() < 0.5:
            h = rng.standard_normal(n) * (rng.random(n) < 0.2)
        else:
            h = best_h + 0.3 * rng.standard_normal(n) * np.abs(best_h).max()
        r = ratio(h)
        if r > best:
            best_h, best = h, r
    return float(best)


class PerturbedFrame:
    def __init__(self, frame: NeedletFrame, theta: np.ndarray, max_rho: float = 0.5):
        """
        Tf = Σ⟨f,ψ_ξ⟩ P_W θ_ξ 를 W = Π_{2^{J−1}} 위에서 다룸
        :param frame: 니들렛 프레임
        :param theta: 행 ξ = θ_ξ 의 구면조화 계수 (차수 ≥ 2^{J−1})
        :param max_rho: 기록용 수축 목표치
        """
        self.frame = frame
        self.d = frame.d
        self.W = frame.working_degree
        n_w = sh_count(self.W, self.d)
        self.psi_w = frame.analysis_matrix()[:, :n_w]
        self.theta_w = theta[:, :n_w]
        self.T = self.theta_w.T @ self.psi_w
        self.max_rho = max_rho
        self._rho: Optional[float] = None
        self.last_iterations = 0

    @classmethod
    def from_family(cls, family: ThetaFamily, max_rho: float = 0.5) -> "PerturbedFrame":
        return cls(family.frame, family.expansion_matrix(family.frame.band_limit), max_rho)

    def _in_w(self, f: SHExpansion) -> np.ndarray:
        return f.resize(self.W).coeffs

    def apply_T(self, f: SHExpansion) -> SHExpansion:
        return SHExpansion(d=self.d, degree=self.W, coeffs=self.T @ self._in_w(f))

    def rho_T(self) -> float:
        """‖I − T‖₂ on W"""
        if self._rho is None:
            self._rho = float(np.linalg.norm(np.eye(len(self.T)) - self.T, 2))
            status = "✅" if self._rho <= self.max_rho else "⚠️"
            logger.info(f"{status} ρ_T = {self._rho:.4f} (목표 ≤ {self.max_rho})")
        return self._rho

    def invert_T(self, f: SHExpansion, tol: float = 1e-10, max_iter: int = 10_000) -> SHExpansion:
        """노이만 급수 Σ (I−T)^k f, 잔차 ‖Tg − f‖₂ ≤ tol 까지"""
        rho = self.rho_T()
        if rho >= 1:
            raise NonContractiveError(rho)
        target = self._in_w(f)
        g = target.copy()
        r = target.copy()
        iterations = 0
        while np.linalg.norm(self.T @ g - target) > tol and iterations < max_iter:
            r = r - self.T @ r
            g = g + r
            iterations += 1
        self.last_iterations = iterations
        logger.debug(f"🔍 노이만 반복 {iterations}회, 잔차 {np.linalg.norm(self.T @ g - target):.2e}")
        return SHExpansion(d=self.d, degree=self.W, coeffs=g)

    def dual_coefficients(self, f: SHExpansion, tol: float = 1e-10) -> CoeffSeq:
        """⟨f, θ̃_ξ⟩ = ⟨T⁻¹f, ψ_ξ⟩"""
        g = self.invert_T(f, tol)
        return CoeffSeq(index=self.frame.index, values=self.psi_w @ g.coeffs)

    def reconstruct(self, coeffs: CoeffSeq) -> SHExpansion:
        """P_W Σ c_ξ θ_ξ"""
        return SHExpansion(d=self.d, degree=self.W, coeffs=self.theta_w.T @ coeffs.values)

    def h_section(self) -> OperatorSection:
        """H_{ξη} = ⟨T⁻¹ P_W ψ_η, ψ_ξ⟩"""
        if self.rho_T() >= 1:
            raise NonContractiveError(self.rho_T())
        H = self.psi_w @ np.linalg.solve(self.T, self.psi_w.T)
        return OperatorSection(tag="H", index=self.frame.index, matrix=H)

    def round_trip_error(self, f: SHExpansion, tol: float = 1e-10) -> float:
        back = self.reconstruct(self.dual_coefficients(f, tol))
        return (back - f.resize(self.W)).norm2() / f.resize(self.W).norm2()


def envelope_constant(f: SHExpansion, center: np.ndarray, N: float, M: float, grid: CubatureRule) -> float:
    """최소 κ: |f(y)| ≤ κ N^{d−1}/(1+Nρ(x,y))^M (격자 위)"""
    rho = geodesic_distance(grid.nodes, center)
    return float(np.max(np.abs(f.evaluate(grid.nodes)) * (1 + N * rho) ** M) / N ** (f.d - 1))


def localized_ip_bound_check(
    g: SHExpansion,
    f: SHExpansion,
    N1: float,
    N2: float,
    x1: np.ndarray,
    x2: np.ndarray,
    kappa1: float,
    kappa2: float,
    K: int,
    M: float,
    variant: str = "moments",
) -> Dict[str, float]:
    """
    국소화 함수 내적 상한 비교
    moments: (N₁/N₂)^K 인자 / mean: g(x₂)∫f 를 뺀 좌변과 (N₁/N₂) 인자 / plain: 인자 없음
    """
    if N2 < N1 or N1 < 1:
        raise DomainError("need 1 <= N1 <= N2")
    d = f.d
    lhs = g.inner(f)
    decay = {"moments": (N1 / N2) ** K, "mean": N1 / N2, "plain": 1.0}
    if variant not in decay:
        raise DomainError(f"unknown variant {variant!r}")
    if variant == "mean":
        lhs -= float(g.evaluate(x2[None, :])[0]) * f.coeffs[0] * math.sqrt(sphere_area(d))
    rho = float(geodesic_distance(x1, x2))
    rhs = kappa1 * kappa2 * decay[variant] * N1 ** (d - 1) / (1 + N1 * rho) ** M
    lhs = abs(lhs)
    return {"lhs": lhs, "rhs": rhs, "ratio": lhs / rhs if rhs > 0 else math.inf, "variant": variant}


def hardy_constant(gamma: float, q: float) -> float:
    """c★₃ = 2^γ max{1/(γ ln2), 1/(γq ln2)^{1/q}}"""
    ln2 = math.log(2.0)
    return 2.0 ** gamma * max(1.0 / (gamma * ln2), 1.0 / (gamma * q * ln2) ** (1.0 / q))


def hardy_check(a: Sequence[float], gamma: float, q: float) -> Dict[str, Any]:
    """
    (Σ_j (Σ_{m≥j} 2^{−(m−j)γ}a_m)^q)^{1/q} ≤ c★₃‖a‖_q  (위쪽 꼬리)
    (Σ_j (Σ_{m≤j} 2^{−(j−m)γ}a_m)^q)^{1/q} ≤ c★₃‖a‖_q  (아래쪽 누적, j 는 무한히 계속)
    """
    a = np.asarray(a, dtype=float)
    if np.any(a < 0):
        raise DomainError("Hardy check needs a nonnegative sequence")
    if gamma <= 0 or q <= 0:
        raise DomainError("need gamma > 0 and q > 0")
    n = len(a)
    c = hardy_constant(gamma, q)
    rhs = c * float(np.sum(a ** q)) ** (1.0 / q)
    idx = np.arange(n)
    gap = idx[None, :] - idx[:, None]
    upper = np.where(gap >= 0, 2.0 ** (-gamma * np.maximum(gap, 0)), 0.0) @ a
    # j ≥ n 꼬리: Σ_m 2^{−(j−m)γ}a_m = 2^{−(j−n+1)γ}·s, s = Σ 2^{−(n−1−m)γ}a_m
    lower_inside = np.where(gap <= 0, 2.0 ** (-gamma * np.maximum(-gap, 0)), 0.0) @ a
    s = lower_inside[-1] if n else 0.0
    tail = (2.0 ** (-gamma * q) / (1.0 - 2.0 ** (-gamma * q))) * s ** q
    lhs_upper = float(np.sum(upper ** q)) ** (1.0 / q)
    lhs_lower = float(np.sum(lower_inside ** q) + tail) ** (1.0 / q)
    tol = 1e-12 * max(rhs, 1.0)
    return {
        "constant": c,
        "rhs": rhs,
        "upper": lhs_upper,
        "lower": lhs_lower,
        "upper_holds": lhs_upper <= rhs + tol,
        "lower_holds": lhs_lower <= rhs + tol,
    }


def convergence_in_J(builders: Dict[int, Callable[[], PerturbedFrame]], f: SHExpansion, tol: float = 1e-10) -> List[Dict[str, float]]:
    """J 별 쌍대 계수 변화: 공통 레벨에서 직전 J 대비 최대 차이"""
    rows: List[Dict[str, float]] = []
    previous: Optional[CoeffSeq] = None
    for J in sorted(builders):
        pf = builders[J]()
        coeffs = pf.dual_coefficients(f, tol)
        row = {"J": J, "rho_T": pf.rho_T(), "round_trip": pf.round_trip_error(f, tol), "delta": math.nan}
        if previous is not None:
            common = len(previous.values)
            row["delta"] = float(np.max(np.abs(coeffs.values[: common] - previous.values)))
        rows.append(row)
        previous = coeffs
        logger.info(f"🔍 J={J}: ρ_T={row['rho_T']:.4f}, 왕복 오차 {row['round_trip']:.2e}")
    return rows
