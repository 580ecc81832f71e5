import math
from typing import Any, Dict, List, Optional

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel

from models.sequences import CoeffSeq, FrameIndex, NodeIndex
from services.cubature import CubatureRule, exact_rule
from services.sphere import basis_vector, sphere_area
from services.zonal import SHExpansion, ZonalKernel, degree_vector, sh_basis_matrix, sh_count
from utils.cache import ArtifactCache
from utils.logger import log_elapsed, setup_logger
from utils.settings import settings

logger = setup_logger("Needlet")

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(120)


def _bump(t: np.ndarray) -> np.ndarray:
    inside = (t > 0) & (t < 1)
    safe = np.where(inside, t * (1 - t), 1.0)
    return np.where(inside, np.exp(-1.0 / safe), 0.0)


def _bump_integral(v: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(v, dtype=float), 0.0, 1.0)
    t = 0.5 * (v[..., None] * (_GL_NODES + 1.0))
    return 0.5 * v * np.sum(_GL_WEIGHTS * _bump(t), axis=-1)


_BUMP_TOTAL = float(_bump_integral(np.array(1.0)))


def smooth_step(v) -> np.ndarray:
    """0→1 매끄러운 계단: ∫₀^v e^{−1/t(1−t)} / ∫₀^1"""
    return _bump_integral(v) / _BUMP_TOTAL


class CutoffPair(BaseModel):
    """
    â: supp ⊂ [1/2, 2], â²(u) + â²(u/2) = 1 (u ∈ [1, 2])
    φ: 공간 노름용 컷오프 (â 와 동일하게 둠)
    """

    smoothness_order: int = 8

    @staticmethod
    def low_pass(u) -> np.ndarray:
        """1 (u ≤ 1/2), 0 (u ≥ 1)"""
        u = np.asarray(u, dtype=float)
        return np.where(u <= 0.5, 1.0, np.where(u >= 1.0, 0.0, smooth_step(2.0 - 2.0 * u)))

    def a_hat_squared(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.maximum(self.low_pass(u / 2.0) - self.low_pass(u), 0.0)

    def a_hat(self, u) -> np.ndarray:
        return np.sqrt(self.a_hat_squared(u))

    def phi(self, u) -> np.ndarray:
        return self.a_hat(u)

    def lower_bound(self, lo: float = 0.6, hi: float = 5.0 / 3.0) -> float:
        return float(self.a_hat(np.linspace(lo, hi, 2001)).min())

    def partition_error(self, n_points: int = 10_000, top: float = 2.0 ** 10) -> float:
        """max |Σ_ν â²(2^{−ν}u) − 1| on [1, top]"""
        u = np.geomspace(1.0, top, n_points)
        nu = np.arange(int(math.log2(top)) + 3)
        total = self.a_hat_squared(u[:, None] * 2.0 ** (-nu[None, :])).sum(axis=1)
        return float(np.max(np.abs(total - 1.0)))


def build_cutoffs(smoothness_order: int = 8) -> CutoffPair:
    if smoothness_order < 4:
        raise ValueError("smoothness order must be at least 4")
    return CutoffPair(smoothness_order=smoothness_order)


def needlet_kernel(d: int, j: int, cutoff: CutoffPair) -> ZonalKernel:
    """L_j = Σ â(k/2^{j−1}) Z_k, L_0 = Z_0"""
    if j == 0:
        return ZonalKernel(d=d, coeffs=np.ones(1))
    k = np.arange(2 ** j + 1, dtype=float)
    return ZonalKernel(d=d, coeffs=cutoff.a_hat(k / 2.0 ** (j - 1)))


def psi_kernel(d: int, N: float, cutoff: CutoffPair) -> ZonalKernel:
    """Ψ_N = Σ â(k/N) Z_k"""
    k = np.arange(int(2 * N) + 1, dtype=float)
    return ZonalKernel(d=d, coeffs=cutoff.a_hat(k / N))


def phi_kernel(d: int, N: float, K: int, cutoff: CutoffPair) -> ZonalKernel:
    """Φ_N = (−1)^{K/2} Σ â(k/N)[k(k+d−2)]^{−K/2} Z_k  (Δ₀^{K/2}Φ_N = Ψ_N)"""
    k = np.arange(int(2 * N) + 1, dtype=float)
    a = cutoff.a_hat(k / N)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(a > 0, (-1) ** (K // 2) * a / (k * (k + d - 2)) ** (K // 2), 0.0)
    return ZonalKernel(d=d, coeffs=c)


class NeedletAtom(BaseModel):
    """ψ_ξ(x) = C⋄_ξ L_j(ξ·x), C⋄_ξ = ŵ_ξ^{1/2}"""

    index: NodeIndex
    center: np.ndarray
    normalization: float
    kernel: ZonalKernel

    class Config:
        arbitrary_types_allowed = True

    def __call__(self, points) -> np.ndarray:
        return self.normalization * self.kernel(np.atleast_2d(points) @ self.center)

    def expansion(self, degree: Optional[int] = None) -> SHExpansion:
        L = self.kernel.degree if degree is None else degree
        lam = np.zeros(L + 1)
        n = min(L, self.kernel.degree) + 1
        lam[:n] = self.kernel.coeffs[:n]
        Y = sh_basis_matrix(self.kernel.d, L, self.center[None, :])[0]
        return SHExpansion(d=self.kernel.d, degree=L, coeffs=self.normalization * lam[degree_vector(L, self.kernel.d)] * Y)


class NeedletFrame:
    def __init__(self, d: int, J: int, gamma: float, rules: List[CubatureRule], cutoff: CutoffPair):
        """레벨 0..J 니들렛 프레임 (레벨 0: 𝒳₀ = {e₁}, ŵ = ω_d)"""
        self.d = d
        self.J = J
        self.gamma = gamma
        self.cutoff = cutoff
        self.rules = rules
        self.kernels = [needlet_kernel(d, j, cutoff) for j in range(J + 1)]

        centers = [basis_vector(d)[None, :]] + [rules[j].nodes for j in range(1, J + 1)]
        weights = [np.array([sphere_area(d)])] + [rules[j].weights for j in range(1, J + 1)]
        self.index = FrameIndex(
            d=d,
            gamma=gamma,
            levels=np.concatenate([np.full(len(c), j) for j, c in enumerate(centers)]),
            ordinals=np.concatenate([np.arange(len(c)) for c in centers]),
            centers=np.vstack(centers),
        )
        self.normalizations = np.sqrt(np.concatenate(weights))
        self._matrix: Optional[np.ndarray] = None

    @property
    def band_limit(self) -> int:
        return 2 ** self.J

    @property
    def working_degree(self) -> int:
        """재구성이 정확한 Π_{2^{J−1}}"""
        return 2 ** (self.J - 1)

    def __len__(self) -> int:
        return len(self.index)

    def atom(self, i: int) -> NeedletAtom:
        j = int(self.index.levels[i])
        return NeedletAtom(index=self.index.node(i), center=self.index.centers[i], normalization=float(self.normalizations[i]), kernel=self.kernels[j])

    def analysis_matrix(self) -> np.ndarray:
        """행 ξ: ψ_ξ 의 구면조화 계수 (차수 ≤ 2^J)"""
        if self._matrix is None:
            L = self.band_limit
            deg = degree_vector(L, self.d)
            rows = []
            for j, sl in self.index.level_slices():
                lam = np.zeros(L + 1)
                lam[: self.kernels[j].degree + 1] = self.kernels[j].coeffs
                Y = sh_basis_matrix(self.d, L, self.index.centers[sl])
                rows.append(self.normalizations[sl, None] * lam[deg][None, :] * Y)
            self._matrix = np.vstack(rows)
        return self._matrix

    def analyze(self, f: SHExpansion) -> CoeffSeq:
        """⟨f, ψ_ξ⟩ (계수 공간에서 정확히 계산)"""
        if f.degree > self.band_limit and np.any(f.coeffs[sh_count(self.band_limit, self.d):]):
            logger.warning(f"⚠️ 차수 {f.degree} 입력: 2^J={self.band_limit} 초과 성분은 프레임에 보이지 않음")
        return CoeffSeq(index=self.index, values=self.analysis_matrix() @ f.resize(self.band_limit).coeffs)

    def synthesize(self, coeffs: CoeffSeq) -> SHExpansion:
        """T_ψ h = Σ h_ξ ψ_ξ"""
        return SHExpansion(d=self.d, degree=self.band_limit, coeffs=self.analysis_matrix().T @ coeffs.values)

    def atom_norms(self) -> np.ndarray:
        return np.linalg.norm(self.analysis_matrix(), axis=1)

    def frame_bounds(self, rng: np.random.Generator, trials: int = 20) -> Dict[str, float]:
        """‖S_ψ f‖_{ℓ²}/‖f‖₂ 범위 (W 와 전체 대역)"""
        ratios = []
        for degree in (self.working_degree, self.band_limit):
            for _ in range(trials):
                f = SHExpansion.random(self.d, degree, rng)
                ratios.append(np.linalg.norm(self.analyze(f).values) / f.norm2())
        return {"lower": float(min(ratios)), "upper": float(max(ratios))}

    def localization_report(self, M: float) -> List[Dict[str, float]]:
        def fit(j: int) -> Dict[str, float]:
            i = int(np.flatnonzero(self.index.levels == j)[0])
            return {"level": j, "M": M, "kappa": localization_fit(self.atom(i), M)}

        return Parallel(n_jobs=settings.NEWTFRAME_THREADS, prefer="threads")(delayed(fit)(j) for j in range(self.J + 1))

    def manifest(self) -> Dict[str, Any]:
        u = np.linspace(0.0, 2.5, 101)
        return {
            "d": self.d,
            "J": self.J,
            "gamma": self.gamma,
            "cutoff": {"u": u.tolist(), "a_hat": self.cutoff.a_hat(u).tolist()},
            "levels": [
                {"j": j, "count": int(sl.stop - sl.start), "normalizations": self.normalizations[sl].tolist()}
                for j, sl in self.index.level_slices()
            ],
        }


def build_needlet_frame(
    d: int,
    J: int,
    gamma: float,
    cutoff: Optional[CutoffPair] = None,
    cache: Optional[ArtifactCache] = None,
    tol: float = 1e-10,
) -> NeedletFrame:
    """
    니들렛 프레임 생성 (레벨별 정확 큐베이처 필요)
    :param d: 차원
    :param J: 최고 레벨
    :param gamma: 네트 상수
    :return: NeedletFrame
    """
    cutoff = cutoff or build_cutoffs()
    with log_elapsed(logger, f"니들렛 프레임 d={d} J={J}"):
        rules = Parallel(n_jobs=settings.NEWTFRAME_THREADS, prefer="threads")(
            delayed(exact_rule)(d, j, gamma, tol=tol, cache=cache) for j in range(J + 1)
        )
        frame = NeedletFrame(d, J, gamma, list(rules), cutoff)
    counts = [int(sl.stop - sl.start) for _, sl in frame.index.level_slices()]
    logger.info(f"✅ 레벨별 원소 수: {counts}")
    return frame


def localization_fit(atom: NeedletAtom, M: float, n_theta: int = 4000) -> float:
    """κ = max |ψ_ξ(x)|(1+N_ξρ)^M / N_ξ^{(d−1)/2}"""
    d = atom.kernel.d
    N = atom.index.N
    theta = np.linspace(0.0, math.pi, n_theta)
    vals = np.abs(atom.normalization * atom.kernel(np.cos(theta)))
    return float(np.max(vals * (1.0 + N * theta) ** M) / N ** ((d - 1) / 2.0))
