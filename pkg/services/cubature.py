import math
from typing import Any, Callable, Dict, Optional

import numpy as np
from pydantic import BaseModel
from scipy import linalg, optimize

from services.sphere import Partition, build_maximal_net, build_partition, circle_points, sphere_area
from services.zonal import sh_basis_matrix, sh_count
from utils.cache import ArtifactCache
from utils.errors import CubatureInfeasibleError, DomainError
from utils.logger import setup_logger

logger = setup_logger("Cubature")

WEIGHT_BOUND = 10.0  # c₇
_CHUNK = 2048


class CubatureRule(BaseModel):
    """∫_S f ≈ Σ ŵ_ξ f(ξ)"""

    d: int
    level: int
    nodes: np.ndarray
    weights: np.ndarray
    exact_degree: int
    gamma: Optional[float] = None

    class Config:
        arbitrary_types_allowed = True

    def __len__(self) -> int:
        return len(self.nodes)

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        return integrate(f, self)

    def weight_constant(self) -> float:
        """ŵ ∈ [c⁻¹, c]·2^{−j(d−1)} 를 만족하는 최소 c"""
        ref = 2.0 ** (-self.level * (self.d - 1))
        return float(max(self.weights.max() / ref, ref / self.weights.min()))

    def to_json(self) -> Dict[str, Any]:
        return {
            "d": self.d,
            "j": self.level,
            "gamma": self.gamma,
            "nodes": self.nodes.tolist(),
            "weights": self.weights.tolist(),
            "exact_degree": self.exact_degree,
        }

    @classmethod
    def from_json(cls, payload: Dict[str, Any]) -> "CubatureRule":
        return cls(
            d=payload["d"],
            level=payload["j"],
            gamma=payload.get("gamma"),
            nodes=np.asarray(payload["nodes"], dtype=float),
            weights=np.asarray(payload["weights"], dtype=float),
            exact_degree=payload["exact_degree"],
        )


def integrate(f: Callable[[np.ndarray], np.ndarray], rule: CubatureRule):
    """Σ ŵ f(ξ)"""
    return np.tensordot(rule.weights, np.asarray(f(rule.nodes)), axes=(0, 0))


def simple_rule(partition: Partition) -> CubatureRule:
    """w_ζ = |A_ζ| (상수에 대해서만 정확)"""
    net = partition.net
    return CubatureRule(d=net.d, level=net.level, nodes=net.nodes, weights=partition.measures, exact_degree=0, gamma=net.gamma)


def product_rule(d: int, degree: int) -> CubatureRule:
    """
    차수 degree 이하 다항식에 정확한 조밀 격자
    d=2: 등간격 degree+1 점 / d=3: Gauss–Legendre(z) × 등간격(φ)
    """
    if d == 2:
        n = degree + 1
        return CubatureRule(d=2, level=-1, nodes=circle_points(n), weights=np.full(n, 2 * math.pi / n), exact_degree=degree)
    if d != 3:
        raise DomainError("product rules are implemented for d ∈ {2, 3}")
    zs, wz = np.polynomial.legendre.leggauss(degree // 2 + 1)
    n_phi = degree + 1
    phi = 2 * math.pi * np.arange(n_phi) / n_phi
    Z, P = np.meshgrid(zs, phi, indexing="ij")
    r = np.sqrt(1.0 - Z ** 2)
    nodes = np.column_stack([(r * np.cos(P)).ravel(), (r * np.sin(P)).ravel(), Z.ravel()])
    weights = np.outer(wz, np.full(n_phi, 2 * math.pi / n_phi)).ravel()
    return CubatureRule(d=3, level=-1, nodes=nodes, weights=weights, exact_degree=degree)


def _moments(d: int, L: int) -> np.ndarray:
    m = np.zeros(sh_count(L, d))
    m[0] = math.sqrt(sphere_area(d))
    return m


def moment_residual(d: int, nodes: np.ndarray, weights: np.ndarray, L: int) -> float:
    """max_{k≤L,ν} |Σ ŵ Y_{kν}(ξ) − ∫Y_{kν}|"""
    acc = -_moments(d, L)
    for start in range(0, len(nodes), _CHUNK):
        Y = sh_basis_matrix(d, L, nodes[start:start + _CHUNK])
        acc += weights[start:start + _CHUNK] @ Y
    return float(np.max(np.abs(acc)))


def certify_exactness(rule: CubatureRule, degree: Optional[int] = None) -> float:
    return moment_residual(rule.d, rule.nodes, rule.weights, rule.exact_degree if degree is None else degree)


def _min_norm_correction(d: int, nodes: np.ndarray, w0: np.ndarray, L: int) -> np.ndarray:
    """min Σ(w−w0)²/w0  s.t. 모멘트 조건 → w = w0 + W0 Aᵀ y"""
    n_mom = sh_count(L, d)
    gram = np.zeros((n_mom, n_mom))
    rhs = _moments(d, L)
    for start in range(0, len(nodes), _CHUNK):
        Y = sh_basis_matrix(d, L, nodes[start:start + _CHUNK])
        wc = w0[start:start + _CHUNK]
        gram += Y.T @ (wc[:, None] * Y)
        rhs -= wc @ Y
    try:
        y = linalg.solve(gram, rhs, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        y = linalg.lstsq(gram, rhs)[0]
    w = w0.copy()
    for start in range(0, len(nodes), _CHUNK):
        Y = sh_basis_matrix(d, L, nodes[start:start + _CHUNK])
        w[start:start + _CHUNK] += w0[start:start + _CHUNK] * (Y @ y)
    return w


def _bounded_solve(d: int, nodes: np.ndarray, w0: np.ndarray, L: int, lo: float, hi: float) -> np.ndarray:
    A = sh_basis_matrix(d, L, nodes).T
    scale = w0.mean()
    res = optimize.lsq_linear(A * scale, _moments(d, L), bounds=(lo / scale, hi / scale), method="bvls", tol=1e-14)
    return res.x * scale


def _circle_rule(j: int, gamma: float) -> CubatureRule:
    delta = gamma * 2.0 ** (1 - j)
    n = max(2 ** (j + 1) + 1, math.ceil(math.pi / delta - 1e-12))
    if 2 * math.pi / n < delta - 1e-12:
        logger.warning(f"⚠️ d=2 레벨 {j}: {n}개 등간격 노드가 δ={delta:.4f} 분리 조건을 만족하지 않음")
    return CubatureRule(d=2, level=j, nodes=circle_points(n), weights=np.full(n, 2 * math.pi / n), exact_degree=n - 1, gamma=gamma)


def exact_rule(
    d: int,
    j: int,
    gamma: float,
    tol: float = 1e-10,
    cache: Optional[ArtifactCache] = None,
    max_attempts: int = 4,
) -> CubatureRule:
    """
    Π_{2^{j+1}} 에 정확한 양수 가중치 큐베이처
    :param d: 차원
    :param j: 레벨
    :param gamma: 네트 상수 (실패 시 0.85배씩 조밀화)
    :param tol: 모멘트 잔차 허용치
    :param cache: 인증된 규칙 캐시
    :return: CubatureRule
    """
    if d == 2:
        return _circle_rule(j, gamma)
    key = f"cubature:d={d}:j={j}:gamma={gamma:.10g}:tol={tol:.1e}"
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            logger.info(f"✅ 캐시된 큐베이처 사용: d={d}, j={j}")
            return CubatureRule.from_json(hit)

    L = 2 ** (j + 1)
    ref = 2.0 ** (-j * (d - 1))
    lo, hi = ref / WEIGHT_BOUND, ref * WEIGHT_BOUND
    g = gamma
    residual = math.inf
    for attempt in range(max_attempts):
        net = build_maximal_net(d, j, g)
        w0 = build_partition(net).measures
        w = _min_norm_correction(d, net.nodes, w0, L)
        if w.min() > 0 and moment_residual(d, net.nodes, w, L) > tol / 10:
            w = _min_norm_correction(d, net.nodes, w, L)  # 반복 보정 한 번
        if w.min() < lo or w.max() > hi:
            logger.warning(f"⚠️ 레벨 {j}: 최소 노름 가중치가 범위 밖 (min={w.min():.3e}), BVLS 재시도")
            w = _bounded_solve(d, net.nodes, w0, L, lo, hi)
        residual = moment_residual(d, net.nodes, w, L)
        if residual <= tol and w.min() > 0:
            rule = CubatureRule(d=d, level=j, nodes=net.nodes, weights=w, exact_degree=L, gamma=g)
            logger.info(f"✅ 레벨 {j} 큐베이처: {len(w)}개 노드, 잔차 {residual:.2e}, c₇={rule.weight_constant():.2f}")
            if cache is not None:
                cache.set(key, rule.to_json())
            return rule
        logger.warning(f"⚠️ 레벨 {j} 시도 {attempt + 1}: 잔차 {residual:.2e}, γ {g:.3f} → {0.85 * g:.3f}")
        g *= 0.85
    raise CubatureInfeasibleError(residual, j)
