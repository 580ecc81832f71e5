import math
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from numpy.polynomial import Polynomial
from pydantic import BaseModel, Field
from scipy import integrate, linalg, special
from scipy.spatial import cKDTree

from models.config import RunConfig
from models.sequences import NodeIndex
from services.cubature import CubatureRule, product_rule, simple_rule
from services.needlet import CutoffPair, NeedletFrame, phi_kernel, psi_kernel
from services.sphere import build_maximal_net, build_partition, cap_area, chord, geodesic_distance, sphere_area
from services.zonal import GegenbauerBasis, SHExpansion, ZonalKernel, degree_vector, sh_basis_matrix, sh_count
from utils.errors import BCoefficientFitError, DomainError, PoleBudgetError, TStepError
from utils.logger import log_elapsed, setup_logger
from utils.settings import settings

logger = setup_logger("Newton")

_DEDUP_DECIMALS = 12


# ---------------------------------------------------------------------------
# 뉴턴 핵
# ---------------------------------------------------------------------------

def newton_kernel(d: int, x, y) -> np.ndarray:
    """|x−y|^{2−d} (d ≥ 3), ln(1/|x−y|) (d = 2); x:(n,d), y:(m,d) → (n,m)"""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    dist = np.linalg.norm(x[:, None, :] - y[None, :, :], axis=-1)
    if np.any(dist < 1e-14):
        raise DomainError("evaluation at a pole")
    if d == 2:
        return -np.log(dist)
    return dist ** (2 - d)


def _series_degree(a: float, power: float = 0.0, tol: float = 1e-16) -> int:
    """(L+1)^power · a^{−L} ≤ tol·(1−1/a) 를 만족하는 최소 L"""
    log_a = math.log(a)
    target = math.log(tol * (1 - 1 / a))
    L = max(8, int((-target) / log_a))
    while power * math.log(L + 1) - L * log_a > target:
        L = int(L * 1.1) + 1
    return L


def newton_shift_derivative_expansion(d: int, a: float, ell: int = 0, L: Optional[int] = None) -> ZonalKernel:
    """
    ∂_a^ℓ [N(x − aζ)] 를 구면 위 영대칭 핵으로 전개
    d ≥ 3: λ_k(a) = μω_d/(k+μ) · a^{2−d−k}
    d = 2: λ_0 = −2π ln a, λ_k = π a^{−k}/k
    """
    if a <= 1:
        raise DomainError(f"pole radius must exceed 1, got {a}")
    L = _series_degree(a, ell) if L is None else L
    k = np.arange(L + 1, dtype=float)
    sign = (-1.0) ** ell
    if d == 2:
        lam = np.empty(L + 1)
        kk = k[1:]
        lam[1:] = math.pi / kk * sign * special.poch(kk, ell) * a ** (-kk - ell)
        lam[0] = -2 * math.pi * math.log(a) if ell == 0 else -2 * math.pi * (-1.0) ** (ell - 1) * math.factorial(ell - 1) * a ** (-ell)
        return ZonalKernel(d=2, coeffs=lam)
    mu = (d - 2) / 2.0
    expo = k + d - 2
    lam = mu * sphere_area(d) / (k + mu) * sign * special.poch(expo, ell) * a ** (-expo - ell)
    return ZonalKernel(d=d, coeffs=lam)


def newton_shift_expansion(d: int, a: float, L: Optional[int] = None) -> ZonalKernel:
    return newton_shift_derivative_expansion(d, a, 0, L)


def radial_derivative(d: int, a: float, u, ell: int) -> np.ndarray:
    """
    ∂_a^ℓ N(x − aη), u = x·η, r = |x − aη|
    d ≥ 3: ℓ!(−1)^ℓ C_ℓ^μ((a−u)/r) r^{2−d−ℓ}
    d = 2: (ℓ−1)!(−1)^ℓ T_ℓ((a−u)/r) r^{−ℓ}  (ℓ ≥ 1)
    """
    u = np.asarray(u, dtype=float)
    r = np.sqrt(np.maximum(a * a + 1.0 - 2.0 * a * u, 0.0))
    if d == 2 and ell == 0:
        return -np.log(r)
    t = np.clip((a - u) / r, -1.0, 1.0)
    poly = GegenbauerBasis(d=d, max_degree=ell).values(t)[ell]
    if d == 2:
        return math.factorial(ell - 1) * (-1.0) ** ell * poly * r ** (-ell)
    return math.factorial(ell) * (-1.0) ** ell * poly * r ** (2 - d - ell)


# ---------------------------------------------------------------------------
# 국소화 핵 F_ε
# ---------------------------------------------------------------------------

class LocalizedKernelParams(BaseModel):
    """F_ε(u) = κ ε^{2m−1}(a²+1−2au)^{−d/2+1−m} = κ Σ b_ℓ ∂_a^ℓ N"""

    d: int
    eps: float
    M: int
    m: int
    kappa: float
    b: np.ndarray
    residual: float

    class Config:
        arbitrary_types_allowed = True

    @property
    def a(self) -> float:
        return 1.0 + self.eps

    @property
    def power(self) -> float:
        return self.d / 2.0 - 1.0 + self.m

    def raw(self, u) -> np.ndarray:
        """κ 정규화 전 𝓕"""
        u = np.asarray(u, dtype=float)
        return self.eps ** (2 * self.m - 1) * (self.a ** 2 + 1.0 - 2.0 * self.a * u) ** (-self.power)

    def __call__(self, u) -> np.ndarray:
        return self.kappa * self.raw(u)

    def derivative(self, u, nu: int) -> np.ndarray:
        """F^{(ν)}(u) = κε^{2m−1}(2a)^ν (p)_ν (a²+1−2au)^{−p−ν}"""
        u = np.asarray(u, dtype=float)
        p = self.power
        base = self.a ** 2 + 1.0 - 2.0 * self.a * u
        return self.kappa * self.eps ** (2 * self.m - 1) * (2 * self.a) ** nu * special.poch(p, nu) * base ** (-p - nu)

    def ell_range(self) -> range:
        """d=2 는 b₀ 가 상수항이라 미분 차수는 1..m"""
        return range(1, self.m + 1) if self.d == 2 else range(0, self.m + 1)

    def from_b(self, u) -> np.ndarray:
        """Σ b_ℓ ∂_a^ℓ N (κ 제외)"""
        u = np.asarray(u, dtype=float)
        out = np.full(u.shape, self.b[0]) if self.d == 2 else np.zeros(u.shape)
        for ell in self.ell_range():
            out = out + self.b[ell] * radial_derivative(self.d, self.a, u, ell)
        return out

    def coefficients(self, L: Optional[int] = None) -> ZonalKernel:
        """F 의 Z_k 계수 (b_ℓ 경로, 해석적)"""
        L = _series_degree(self.a, self.m + 4) if L is None else L
        lam = np.zeros(L + 1)
        for ell in self.ell_range():
            lam += self.b[ell] * newton_shift_derivative_expansion(self.d, self.a, ell, L).coeffs
        if self.d == 2:
            lam[0] += self.b[0] * sphere_area(2)
        return ZonalKernel(d=self.d, coeffs=self.kappa * lam)


def sphere_integral_of_profile(profile, d: int, eps: float) -> float:
    """∫_S G(x·η)dσ(x) = ω_{d−1}∫₀^π G(cos θ) sin^{d−2}θ dθ"""
    outer = 2.0 if d == 2 else sphere_area(d - 1)
    pts = [t for t in (eps, 3 * eps, 10 * eps, 30 * eps) if t < math.pi]
    val, _ = integrate.quad(
        lambda th: float(profile(math.cos(th))) * math.sin(th) ** (d - 2),
        0.0,
        math.pi,
        points=pts,
        limit=500,
        epsabs=0.0,
        epsrel=1e-13,
    )
    return outer * val


def _fit_grid(eps: float, n: int) -> np.ndarray:
    theta = np.concatenate([[0.0], np.linspace(0.0, math.pi, n // 2), np.geomspace(eps / 100, math.pi, n - n // 2)])
    return np.cos(np.unique(theta))


def solve_b_coefficients(d: int, eps: float, m: int, n_grid: Optional[int] = None, tol: float = 1e-8) -> Tuple[np.ndarray, float]:
    """
    Σ b_ℓ ∂_a^ℓ N = ε^{2m−1}(a²+1−2au)^{(2−d−2m)/2} 최소제곱 적합
    행은 목표값으로 나눠 상대오차, 열은 노름으로 정규화
    :return: (b, 최대 상대 잔차)
    """
    a = 1.0 + eps
    n = max(10 * (m + 1), n_grid or 400)
    u = _fit_grid(eps, n)
    target = eps ** (2 * m - 1) * (a * a + 1.0 - 2.0 * a * u) ** (-(d / 2.0 - 1.0 + m))
    cols = []
    if d == 2:
        cols.append(np.ones_like(u))
        ells = range(1, m + 1)
    else:
        ells = range(0, m + 1)
    cols += [radial_derivative(d, a, u, ell) for ell in ells]
    A = np.column_stack(cols) / target[:, None]
    scale = np.linalg.norm(A, axis=0)
    sol = linalg.lstsq(A / scale, np.ones_like(u))[0] / scale
    residual = float(np.max(np.abs(A @ sol - 1.0)))
    if residual > tol:
        raise BCoefficientFitError(residual, d, m)
    return sol, residual


def build_F(d: int, eps: float, M: int) -> LocalizedKernelParams:
    """
    F_ε 생성: b_ℓ 적합 + κ = (∫𝓕)^{−1}
    :param d: 차원
    :param eps: 0 < ε ≤ 1
    :param M: 국소화 차수 (M > d−2)
    """
    if not 0 < eps <= 1:
        raise DomainError(f"eps must lie in (0, 1], got {eps}")
    if M <= d - 2:
        raise DomainError("M must exceed d-2")
    m = math.ceil((M - d + 2) / 2)
    b, residual = solve_b_coefficients(d, eps, m)
    unit = LocalizedKernelParams(d=d, eps=eps, M=M, m=m, kappa=1.0, b=b, residual=residual)
    total = sphere_integral_of_profile(unit.raw, d, eps)
    logger.debug(f"🔍 F_ε d={d} ε={eps:.4g} m={m}: ∫𝓕={total:.6e}, 잔차 {residual:.1e}")
    return LocalizedKernelParams(d=d, eps=eps, M=M, m=m, kappa=1.0 / total, b=b, residual=residual)


def zonal_laplacian_profile(params: LocalizedKernelParams, u, K: int) -> np.ndarray:
    """Δ₀^{K/2} F(η·x) 점별 계산: Δ₀G = (1−u²)G'' − (d−1)uG' 반복"""
    if K % 2:
        raise DomainError("K must be even")
    one_minus = Polynomial([1.0, 0.0, -1.0])
    lin = Polynomial([0.0, -(params.d - 1.0)])
    ops = [Polynomial([1.0])]
    for _ in range(K // 2):
        new = [Polynomial([0.0]) for _ in range(len(ops) + 2)]
        for nu, P in enumerate(ops):
            dP, ddP = P.deriv(1), P.deriv(2)
            new[nu] = new[nu] + one_minus * ddP + lin * dP
            new[nu + 1] = new[nu + 1] + 2.0 * one_minus * dP + lin * P
            new[nu + 2] = new[nu + 2] + one_minus * P
        ops = new
    u = np.asarray(u, dtype=float)
    return sum(P(u) * params.derivative(u, nu) for nu, P in enumerate(ops))


# ---------------------------------------------------------------------------
# 이산 연산자 (회전 스텐실 / 반지름 차분)
# ---------------------------------------------------------------------------

def _rotation(d: int, i: int, l: int, t: float) -> np.ndarray:
    """Q_{i,l,t}: (ς_i cos t + ς_l sin t, −ς_i sin t + ς_l cos t)"""
    Q = np.eye(d)
    c, s = math.cos(t), math.sin(t)
    Q[i, i], Q[i, l], Q[l, i], Q[l, l] = c, s, -s, c
    return Q


def laplacian_stencil(d: int, t: float, K: int) -> List[Tuple[np.ndarray, float]]:
    """
    𝔏_t^{K/2} 를 (방향 변환 행렬, 가중치) 목록으로 전개
    T(Q)g(ς) = g(Q^{−1}ς) 이므로 극점 방향은 Q^{−1}ζ
    """
    if K % 2:
        raise DomainError("K must be even")
    pairs = [(i, l) for i in range(d) for l in range(i + 1, d)]
    base: List[Tuple[np.ndarray, float]] = [(np.eye(d), -2.0 * len(pairs) / t ** 2)]
    for i, l in pairs:
        for sgn in (1.0, -1.0):
            base.append((_rotation(d, i, l, sgn * t).T, 1.0 / t ** 2))
    terms: List[Tuple[np.ndarray, float]] = [(np.eye(d), 1.0)]
    for _ in range(K // 2):
        merged: Dict[bytes, List[Any]] = {}
        for R1, w1 in terms:
            for R2, w2 in base:
                R = R1 @ R2
                key = (np.round(R, _DEDUP_DECIMALS) + 0.0).tobytes()
                if key in merged:
                    merged[key][1] += w1 * w2
                else:
                    merged[key] = [R, w1 * w2]
        terms = [(R, w) for R, w in merged.values() if w != 0.0]
    return terms


def radial_weights(params: LocalizedKernelParams, t: float) -> np.ndarray:
    """ρ_k = Σ_ℓ b_ℓ t^{−ℓ}(−1)^{ℓ−k} C(ℓ,k), 반지름 a + k t"""
    rho = np.zeros(params.m + 1)
    for ell in params.ell_range():
        for k in range(ell + 1):
            rho[k] += params.b[ell] * t ** (-ell) * (-1.0) ** (ell - k) * math.comb(ell, k)
    return rho


# ---------------------------------------------------------------------------
# θ 원자
# ---------------------------------------------------------------------------

class ThetaBuildParams(BaseModel):
    gamma0: float = 0.5
    gamma1: float = 0.5
    gamma2: float = 0.25
    gamma3: float = 0.5
    gamma4: float = 0.125
    K: int = 2
    M: int = 4
    A: float = 2.0
    pole_budget: Optional[int] = None

    def model_post_init(self, __context: Any) -> None:
        if self.K % 2:
            raise DomainError(f"K must be even, got {self.K}")
        if not (self.gamma2 <= self.gamma1 <= 1 and self.gamma3 <= 1):
            raise DomainError("need gamma2 <= gamma1 <= 1 and gamma3 <= 1")

    @classmethod
    def from_config(cls, config: RunConfig) -> "ThetaBuildParams":
        return cls(
            gamma0=config.gamma0,
            gamma1=config.gamma1,
            gamma2=config.gamma2,
            gamma3=config.gamma3,
            gamma4=config.gamma4,
            K=config.K,
            M=config.M,
            A=config.A,
            pole_budget=config.pole_budget,
        )

    @classmethod
    def from_artifact(cls, payload: Dict[str, Any]) -> "ThetaBuildParams":
        """theta.json 에 기록된 구성 당시 상수 그대로 복원 (재검증 없음)"""
        return cls().model_copy(update={k: v for k, v in payload.items() if k in cls.model_fields})


class NewtonianAtom(BaseModel):
    """θ(x) = a₀ + Σ c_i N(x − y_i), |y_i| > 1"""

    index: NodeIndex
    d: int
    a0: float
    poles: np.ndarray
    coeffs: np.ndarray
    meta: Dict[str, Any] = Field(default_factory=dict)

    class Config:
        arbitrary_types_allowed = True

    @property
    def n_terms(self) -> int:
        return len(self.coeffs)

    @property
    def normalization(self) -> float:
        return float(self.meta.get("normalization", 1.0))

    @property
    def diamond_a0(self) -> float:
        return self.a0 / self.normalization

    def min_pole_radius(self) -> float:
        return float(np.linalg.norm(self.poles, axis=1).min()) if self.n_terms else math.inf

    def __call__(self, points, mode: str = "direct") -> np.ndarray:
        return theta_eval(self, points, mode)

    def radius_groups(self) -> List[Tuple[float, np.ndarray]]:
        radii = np.linalg.norm(self.poles, axis=1)
        keys = np.round(radii, 10)
        return [(float(radii[keys == r][0]), np.flatnonzero(keys == r)) for r in np.unique(keys)]

    def expansion(self, L: int) -> SHExpansion:
        return atom_expansion(self, L)

    def to_json(self) -> Dict[str, Any]:
        return {
            "xi": [self.index.level, self.index.ordinal],
            "d": self.d,
            "a0": self.a0,
            "poles": np.column_stack([self.poles, self.coeffs]).tolist() if self.n_terms else [],
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, payload: Dict[str, Any]) -> "NewtonianAtom":
        rows = np.asarray(payload["poles"], dtype=float)
        d = int(payload["d"])
        rows = rows.reshape(-1, d + 1)
        return cls(
            index=NodeIndex(level=payload["xi"][0], ordinal=payload["xi"][1]),
            d=d,
            a0=float(payload["a0"]),
            poles=rows[:, :d],
            coeffs=rows[:, d],
            meta=payload.get("meta", {}),
        )


def merge_poles(poles: np.ndarray, coeffs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """1e−12 이내 중복 극점 병합 (계수 합산)"""
    if len(poles) == 0:
        return poles, coeffs
    keys = np.round(poles, _DEDUP_DECIMALS)
    uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    summed = np.bincount(inverse.ravel(), weights=coeffs, minlength=len(uniq))
    keep = summed != 0.0
    return poles[first][keep], summed[keep]


def theta_eval(atom: NewtonianAtom, points, mode: str = "direct") -> np.ndarray:
    """
    θ 점별 평가
    direct: 극점 합 직접 계산 / series: |x| ≤ 1 에서 Gegenbauer 급수
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    if atom.n_terms == 0:
        return np.full(len(x), atom.a0)
    if mode == "direct":
        return atom.a0 + newton_kernel(atom.d, x, atom.poles) @ atom.coeffs
    if mode != "series":
        raise DomainError(f"unknown evaluation mode {mode!r}")
    r = np.linalg.norm(x, axis=1)
    if np.any(r > 1 + 1e-12):
        raise DomainError("series evaluation needs |x| <= 1")
    out = np.full(len(x), atom.a0)
    xhat = x / np.where(r > 0, r, 1.0)[:, None]
    for R, idx in atom.radius_groups():
        base = newton_shift_expansion(atom.d, R)
        u = xhat @ (atom.poles[idx] / R).T
        for rr in np.unique(np.round(r, 14)):
            rows = np.flatnonzero(np.round(r, 14) == rr)
            kern = ZonalKernel(d=atom.d, coeffs=base.coeffs * rr ** np.arange(len(base.coeffs)))
            out[rows] += kern(u[rows]) @ atom.coeffs[idx]
    return out


def atom_expansion(atom: NewtonianAtom, L: int) -> SHExpansion:
    """극점 목록 → 구면 위 구면조화 계수 (차수 ≤ L, 각 계수는 정확)"""
    deg = degree_vector(L, atom.d)
    coeffs = np.zeros(sh_count(L, atom.d))
    coeffs[0] += atom.a0 * math.sqrt(sphere_area(atom.d))
    for R, idx in atom.radius_groups():
        lam = newton_shift_expansion(atom.d, R, L).coeffs
        Y = sh_basis_matrix(atom.d, L, atom.poles[idx] / R)
        coeffs += lam[deg] * (atom.coeffs[idx] @ Y)
    return SHExpansion(d=atom.d, degree=L, coeffs=coeffs)


class LevelPlan(BaseModel):
    """레벨 j 의 θ 구성 재료 (F_ε, 𝒵_j, Φ_N, t_j, 스텐실)"""

    d: int
    level: int
    N: float
    F: LocalizedKernelParams
    Z: CubatureRule
    phi: ZonalKernel
    psi: ZonalKernel
    r_xi: float
    t: float
    discrepancy: float
    stencil: List[Tuple[np.ndarray, float]]
    radial: np.ndarray
    K: int
    M: int

    class Config:
        arbitrary_types_allowed = True

    @property
    def radii(self) -> np.ndarray:
        return self.F.a + self.t * np.arange(self.F.m + 1)

    def pole_bound(self) -> int:
        """ñ: 반지름 r_ξ 캡 안의 δ-분리 노드 수 상한 × 스텐실 × 반지름 수"""
        delta = self.Z.gamma * 2.0 ** (1 - self.level)
        cap_nodes = int(cap_area(self.d, min(self.r_xi + delta / 2, math.pi)) / cap_area(self.d, delta / 2))
        return cap_nodes * len(self.stencil) * (self.F.m + 1)


def _phi_mass(phi: ZonalKernel, d: int, r: float) -> float:
    theta = np.linspace(0.0, min(r, math.pi), 4001)
    vals = np.abs(phi(np.cos(theta))) * np.sin(theta) ** (d - 2)
    outer = 2.0 if d == 2 else sphere_area(d - 1)
    return outer * float(integrate.trapezoid(vals, theta))


def _test_points(d: int, zeta: np.ndarray, eps: float, n_theta: int = 160, n_phi: int = 8) -> np.ndarray:
    theta = np.unique(np.concatenate([np.geomspace(eps / 50, math.pi, n_theta // 2), np.linspace(0, math.pi, n_theta // 2)]))
    # ζ 를 북극으로 하는 국소 좌표
    basis = np.linalg.svd(zeta[None, :])[2]
    frame = basis[1:]
    if d == 2:
        dirs = np.vstack([frame[0], -frame[0]])
    else:
        ang = 2 * math.pi * np.arange(n_phi) / n_phi
        dirs = np.cos(ang)[:, None] * frame[0] + np.sin(ang)[:, None] * frame[1]
    pts = np.cos(theta)[:, None, None] * zeta[None, None, :] + np.sin(theta)[:, None, None] * dirs[None, :, :]
    return pts.reshape(-1, d)


def stencil_discrepancy(
    F: LocalizedKernelParams,
    t: float,
    K: int,
    M: float,
    N: float,
    mass: float,
    exact: ZonalKernel,
) -> float:
    """
    max_x mass·|κΣb_ℓ(𝔏_t^{K/2}𝔇_t^ℓ − Δ₀^{K/2}∂_a^ℓ)N|·(1+Nρ)^M / N^{d−1}
    기준 방향 두 개(좌표축, 일반 방향)에서 최대값
    """
    d = F.d
    stencil = laplacian_stencil(d, t, K)
    rho = radial_weights(F, t)
    radii = F.a + t * np.arange(F.m + 1)
    worst = 0.0
    for zeta in (np.eye(d)[-1], np.ones(d) / math.sqrt(d)):
        x = _test_points(d, zeta, F.eps)
        dirs = np.array([R @ zeta for R, _ in stencil])
        w = np.array([wr for _, wr in stencil])
        poles = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, d)
        coef = (rho[:, None] * w[None, :]).ravel()
        discrete = F.kappa * (newton_kernel(d, x, poles) @ coef)
        target = exact(x @ zeta)
        dist = geodesic_distance(x, zeta)
        err = np.abs(discrete - target) * (1 + N * dist) ** M / N ** (d - 1)
        worst = max(worst, mass * float(err.max()))
    return worst


def choose_t(level: int, F: LocalizedKernelParams, phi: ZonalKernel, r_xi: float, params: ThetaBuildParams, t0: float = 1e-2) -> Tuple[float, float]:
    """
    반감 탐색으로 t_j 선택 (Δ₀^{K/2} 정확 연산은 계수 곱으로)
    :return: (t_j, 달성 불일치)
    """
    N = 2.0 ** (level - 1)
    L = _series_degree(F.a, F.m + params.K + F.d)
    exact = F.coefficients(L).laplace_beltrami(params.K)
    mass = _phi_mass(phi, F.d, r_xi)
    t = min(t0, F.eps / 4)
    best = (math.inf, t)
    worse_streak = 0
    while t >= 1e-8:
        disc = stencil_discrepancy(F, t, params.K, params.M, N, mass, exact)
        if disc <= params.gamma4:
            logger.info(f"✅ 레벨 {level}: t={t:.3e}, 불일치 {disc:.3e} ≤ γ₄={params.gamma4}")
            return t, disc
        if disc < best[0]:
            best, worse_streak = (disc, t), 0
        else:
            worse_streak += 1
            if worse_streak >= 3:
                break
        t /= 2
    raise TStepError(best[0], best[1], level)


def plan_level(d: int, j: int, params: ThetaBuildParams, cutoff: CutoffPair, t_override: Optional[float] = None) -> LevelPlan:
    """레벨 j 준비: ε = γ₁/N, 𝒵_j (δ = γ₂2^{1−j}), r_ξ = 1/(γ₃N), t_j"""
    N = 2.0 ** (j - 1)
    F = build_F(d, min(params.gamma1 / N, 1.0), params.M)
    net = build_maximal_net(d, j, params.gamma2)
    Z = simple_rule(build_partition(net))
    phi = phi_kernel(d, N, params.K, cutoff)
    r_xi = 1.0 / (params.gamma3 * N)
    if t_override is not None:
        t, disc = t_override, math.nan
    else:
        t, disc = choose_t(j, F, phi, r_xi, params)
    return LevelPlan(
        d=d,
        level=j,
        N=N,
        F=F,
        Z=Z,
        phi=phi,
        psi=psi_kernel(d, N, cutoff),
        r_xi=r_xi,
        t=t,
        discrepancy=disc,
        stencil=laplacian_stencil(d, t, params.K),
        radial=radial_weights(F, t),
        K=params.K,
        M=params.M,
    )


def compile_theta_atom(index: NodeIndex, center: np.ndarray, normalization: float, plan: Optional[LevelPlan], budget: Optional[int], params: ThetaBuildParams) -> NewtonianAtom:
    """
    θ_ξ = C⋄_ξ θ⋄_ξ 를 극점 목록으로 전개
    레벨 0: θ_ξ = ψ_ξ = C⋄_ξ Z₀ (a₀ = C⋄_ξ/ω_d)
    """
    d = len(center)
    if index.level == 0:
        return NewtonianAtom(index=index, d=d, a0=normalization / sphere_area(d), poles=np.zeros((0, d)), coeffs=np.zeros(0), meta={"normalization": normalization})
    Z = plan.Z
    near = cKDTree(Z.nodes).query_ball_point(center, chord(plan.r_xi) + 1e-12)
    near = np.asarray(sorted(near), dtype=int)
    c_zeta = plan.F.kappa * Z.weights[near] * plan.phi(Z.nodes[near] @ center)
    dirs = np.stack([Z.nodes[near] @ R.T for R, _ in plan.stencil], axis=1)  # (ζ, 스텐실, d)
    w_R = np.array([w for _, w in plan.stencil])
    radii = plan.radii
    poles = (radii[None, None, :, None] * dirs[:, :, None, :]).reshape(-1, d)
    coeffs = (c_zeta[:, None, None] * w_R[None, :, None] * plan.radial[None, None, :]).ravel() * normalization
    raw_count = len(coeffs)
    poles, coeffs = merge_poles(poles, coeffs)
    if budget is not None and len(coeffs) > budget:
        raise PoleBudgetError({"cap_nodes": len(near), "stencil": len(plan.stencil), "radii": len(radii), "total": len(coeffs), "budget": budget})
    meta = {
        "normalization": normalization,
        "gamma": [params.gamma0, params.gamma1, params.gamma2, params.gamma3, params.gamma4],
        "r_xi": plan.r_xi,
        "t": plan.t,
        "eps": plan.F.eps,
        "cap_nodes": int(len(near)),
        "raw_terms": int(raw_count),
    }
    return NewtonianAtom(index=index, d=d, a0=0.0, poles=poles, coeffs=coeffs, meta=meta)


class ThetaFamily:
    def __init__(self, frame: NeedletFrame, plans: Dict[int, LevelPlan], atoms: List[NewtonianAtom], params: ThetaBuildParams, budget: int):
        """θ 프레임 전체 (레벨 0..J)"""
        self.frame = frame
        self.plans = plans
        self.atoms = atoms
        self.params = params
        self.budget = budget
        self._matrix: Dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.atoms)

    def expansion_matrix(self, L: Optional[int] = None) -> np.ndarray:
        """행 ξ: θ_ξ 의 구면조화 계수 (차수 ≤ L)"""
        L = self.frame.band_limit if L is None else L
        if L not in self._matrix:
            rows = Parallel(n_jobs=settings.NEWTFRAME_THREADS, prefer="threads")(
                delayed(atom_expansion)(atom, L) for atom in self.atoms
            )
            self._matrix[L] = np.vstack([r.coeffs for r in rows])
        return self._matrix[L]

    def pole_counts(self) -> np.ndarray:
        return np.array([a.n_terms for a in self.atoms])

    def lp_norms(self, p: float, rule: CubatureRule) -> np.ndarray:
        """‖θ_ξ‖_p (격자 노드에서 극점 합을 직접 평가, 대역 절단 없음)"""
        rows = Parallel(n_jobs=settings.NEWTFRAME_THREADS, prefer="threads")(
            delayed(theta_eval)(atom, rule.nodes) for atom in self.atoms
        )
        vals = np.abs(np.vstack(rows))
        if math.isinf(p):
            return vals.max(axis=1)
        return (vals ** p @ rule.weights) ** (1.0 / p)


def default_budget(plans: Dict[int, LevelPlan]) -> int:
    return max((plan.pole_bound() for plan in plans.values()), default=0)


def build_theta_family(frame: NeedletFrame, params: ThetaBuildParams, t_override: Optional[float] = None) -> ThetaFamily:
    """
    모든 ξ 에 대해 θ_ξ 컴파일
    :param frame: 니들렛 프레임 (중심, 정규화 공유)
    :param params: γ₀..γ₄, K, M
    """
    d = frame.d
    with log_elapsed(logger, f"θ 원자 컴파일 d={d} J={frame.J}"):
        plans = {j: plan_level(d, j, params, frame.cutoff, t_override) for j in range(1, frame.J + 1)}
        budget = params.pole_budget or default_budget(plans)
        idx = frame.index
        atoms = Parallel(n_jobs=settings.NEWTFRAME_THREADS, prefer="threads")(
            delayed(compile_theta_atom)(
                idx.node(i), idx.centers[i], float(frame.normalizations[i]), plans.get(int(idx.levels[i])), budget, params
            )
            for i in range(len(idx))
        )
    counts = np.array([a.n_terms for a in atoms])
    logger.info(f"✅ θ 원자 {len(atoms)}개, 극점 수 최대 {counts.max()} (ñ={budget})")
    return ThetaFamily(frame, plans, list(atoms), params, budget)


# ---------------------------------------------------------------------------
# 단계별 불일치 진단 (g₁..h₃)
# ---------------------------------------------------------------------------

def _monomial_coefficients(d: int, K: int) -> np.ndarray:
    """|β| ≤ min(K−1, 2) 단항식 y^β 의 구면조화 계수 (차수 ≤ 2)"""
    rule = product_rule(d, 6)
    Y = sh_basis_matrix(d, 2, rule.nodes)
    top = min(K - 1, 2)
    betas = [beta for beta in np.ndindex(*(top + 1,) * d) if sum(beta) <= top]
    rows = [(rule.weights * np.prod(rule.nodes ** np.array(beta), axis=1)) @ Y for beta in betas]
    return np.array(rows)


def moment_gaps(atom: NewtonianAtom, plan: LevelPlan, center: np.ndarray) -> np.ndarray:
    """|∫ y^β (ψ⋄_ξ − θ⋄_ξ) dσ|"""
    d = plan.d
    psi = np.zeros(3)
    psi[: min(3, len(plan.psi.coeffs))] = plan.psi.coeffs[:3]
    Y = sh_basis_matrix(d, 2, center[None, :])[0]
    psi_coeffs = psi[degree_vector(2, d)] * Y
    theta_coeffs = atom_expansion(atom, 2).coeffs / atom.normalization
    return np.abs(_monomial_coefficients(d, plan.K) @ (psi_coeffs - theta_coeffs))


def diamond_pipeline(atom: NewtonianAtom, plan: LevelPlan, center: np.ndarray, gamma0: float, r_xi: Optional[float] = None) -> Dict[str, Any]:
    """
    ψ⋄ → h₁ → h₂ → h₃ → θ⋄ 단계별 sup 불일치와 가중 포락선 비율
    h₁ = Ψ_N ∗ F, h₂ = Σ_{𝒵_j} w Φ_N(ξ·ζ)Δ₀^{K/2}F(ζ·x), h₃ = 절단 합
    """
    d, N, K, M = plan.d, plan.N, plan.K, plan.M
    r_xi = plan.r_xi if r_xi is None else r_xi
    x = _test_points(d, center, plan.F.eps, n_theta=240, n_phi=12)
    rho = geodesic_distance(x, center)
    envelope = (1 + N * rho) ** M / N ** (d - 1)

    L = len(plan.psi.coeffs) - 1
    F_hat = plan.F.coefficients(_series_degree(plan.F.a, plan.F.m + K + d))
    h1_a = ZonalKernel(d=d, coeffs=plan.psi.coeffs * F_hat.coeffs[: L + 1])
    h1_b = plan.phi.convolve(F_hat).laplace_beltrami(K)
    h1_gap = float(np.max(np.abs(h1_a.coeffs - h1_b.coeffs)) / max(np.max(np.abs(h1_a.coeffs)), 1e-300))

    psi_vals = plan.psi(x @ center)
    h1 = h1_a(x @ center)
    Z = plan.Z
    weights = Z.weights * plan.phi(Z.nodes @ center)
    profile = zonal_laplacian_profile(plan.F, np.clip(x @ Z.nodes.T, -1.0, 1.0), K)
    h2 = profile @ weights
    keep = geodesic_distance(Z.nodes, center) <= r_xi + 1e-12
    h3 = profile[:, keep] @ weights[keep]
    theta = theta_eval(atom, x) / atom.normalization

    stages = {"psi-h1": psi_vals - h1, "h1-h2": h1 - h2, "h2-h3": h2 - h3, "h3-theta": h3 - theta, "psi-theta": psi_vals - theta}
    gaps = moment_gaps(atom, plan, center)
    return {
        "level": plan.level,
        "sup": {k: float(np.max(np.abs(v))) for k, v in stages.items()},
        "envelope": {k: float(np.max(np.abs(v) * envelope)) for k, v in stages.items()},
        "h1_two_ways": h1_gap,
        "moment_gap": float(gaps.max()),
        "moment_ratio": float(gaps.max() * N ** K / gamma0),
        "envelope_ratio": float(np.max(np.abs(stages["psi-theta"]) * envelope) / gamma0),
        "kept_nodes": int(keep.sum()),
    }
