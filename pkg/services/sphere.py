import math
from typing import Any, Dict, Optional

import numpy as np
from pydantic import BaseModel
from scipy import special
from scipy.spatial import ConvexHull, SphericalVoronoi, cKDTree

from utils.errors import DomainError
from utils.logger import setup_logger

logger = setup_logger("Sphere")

_ICOSA_EDGE = 1.1071487177940904  # 인접 정이십면체 꼭짓점 사이 각도
_TIE_TOL = 1e-12


def unit_vector(coords) -> np.ndarray:
    """좌표 정규화 (|x| = 1)"""
    x = np.asarray(coords, dtype=float)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DomainError("zero vector has no direction")
    return x / norm


def basis_vector(d: int, i: int = 0) -> np.ndarray:
    e = np.zeros(d)
    e[i] = 1.0
    return e


def sphere_area(d: int) -> float:
    """ω_d = 2π^{d/2}/Γ(d/2)"""
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def geodesic_distance(x, y):
    """
    구면 측지 거리 ρ(x, y) ∈ [0, π]
    2·atan2(|x−y|, |x+y|) 형태라 0 근처와 π 근처 모두 정확함
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    diff = np.linalg.norm(x - y, axis=-1)
    summ = np.linalg.norm(x + y, axis=-1)
    return 2.0 * np.arctan2(diff, summ)


def pairwise_distance(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    g = np.clip(np.asarray(X) @ np.asarray(Y).T, -1.0, 1.0)
    return 2.0 * np.arctan2(np.sqrt(np.maximum(2.0 - 2.0 * g, 0.0)), np.sqrt(np.maximum(2.0 + 2.0 * g, 0.0)))


def chord(angle: float) -> float:
    return 2.0 * math.sin(min(angle, math.pi) / 2.0)


def cap_area(d: int, r) -> np.ndarray:
    """
    |B(x, r)| = ω_{d−1} ∫₀^r sin^{d−2} v dv
    불완전 베타 함수로 계산 (r > π/2 는 대칭 사용)
    """
    r = np.clip(np.asarray(r, dtype=float), 0.0, math.pi)
    if d == 2:
        return 2.0 * r
    n = d - 2
    a, b = (n + 1) / 2.0, 0.5
    full = special.beta(a, b)
    head = 0.5 * full * special.betainc(a, b, np.sin(np.minimum(r, math.pi - r)) ** 2)
    integral = np.where(r <= math.pi / 2, head, full - head)
    return sphere_area(d - 1) * integral


def cap_ratio_bound_holds(d: int, r1: float, r2: float) -> bool:
    """|B(x₁,r₁)|/|B(x₂,r₂)| ≤ (r₁/r₂)^{d−1} (r₂ ≤ r₁)"""
    if r2 > r1 or r2 <= 0:
        raise DomainError("need 0 < r2 <= r1")
    return bool(cap_area(d, r1) / cap_area(d, r2) <= (r1 / r2) ** (d - 1) * (1 + 1e-12))


def circle_points(n: int, offset: float = 0.0) -> np.ndarray:
    angles = offset + 2.0 * math.pi * np.arange(n) / n
    return np.column_stack([np.cos(angles), np.sin(angles)])


def fibonacci_points(n: int) -> np.ndarray:
    """거의 균등한 S² 점 집합 (면적 가중치 4π/n)"""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = math.pi * (3.0 - math.sqrt(5.0)) * np.arange(n)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def _icosahedron() -> np.ndarray:
    g = (1 + math.sqrt(5)) / 2
    verts = []
    for s1 in (-1, 1):
        for s2 in (-1, 1):
            verts += [(0, s1, s2 * g), (s1, s2 * g, 0), (s2 * g, 0, s1)]
    verts = unit_vector(np.array(verts, dtype=float))
    # 꼭짓점 하나를 e₁으로 보내는 반사 (대척점도 −e₁이 됨)
    v0 = verts[np.argmax(verts @ np.array([0.0, 1.0, g]))]
    w = v0 - basis_vector(3)
    w /= np.linalg.norm(w)
    return verts - 2.0 * np.outer(verts @ w, w)


def candidate_grid(d: int, frequency: int) -> np.ndarray:
    """
    후보 격자: d=2 등간격 각도, d=3 정이십면체 세분 (e₁, −e₁ 포함)
    :param frequency: 세분 빈도 (d=3 에서 면 한 변을 frequency 등분)
    """
    if d == 2:
        return circle_points(max(4, 6 * frequency))
    verts = _icosahedron()
    faces = ConvexHull(verts).simplices
    f = int(frequency)
    bary = np.array([(i, j, f - i - j) for i in range(f + 1) for j in range(f + 1 - i)], dtype=float) / f
    pts = np.einsum("bk,fkd->fbd", bary, verts[faces]).reshape(-1, 3)
    pts = unit_vector(pts)
    _, first = np.unique(np.round(pts, 9), axis=0, return_index=True)
    return pts[np.sort(first)]


class MaximalNet(BaseModel):
    """δ-분리 + δ-피복 네트 (레벨 j, δ = γ·2^{1−j})"""

    d: int
    level: int
    gamma: float
    delta: float
    nodes: np.ndarray
    grid_spacing: float = 0.0

    class Config:
        arbitrary_types_allowed = True

    def __len__(self) -> int:
        return len(self.nodes)

    def cell_of(self, points) -> np.ndarray:
        """각 점이 속한 분할 셀의 주인 노드 번호 (동점이면 작은 번호)"""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if len(self.nodes) == 1:
            return np.zeros(len(pts), dtype=int)
        dist, idx = cKDTree(self.nodes).query(pts, k=2)
        tie = np.abs(dist[:, 1] - dist[:, 0]) <= _TIE_TOL
        return np.where(tie, np.minimum(idx[:, 0], idx[:, 1]), idx[:, 0])

    def to_json(self, weights: Optional[np.ndarray] = None) -> Dict[str, Any]:
        payload = {"d": self.d, "j": self.level, "gamma": self.gamma, "delta": self.delta, "nodes": self.nodes.tolist()}
        if weights is not None:
            payload["weights"] = np.asarray(weights).tolist()
        return payload

    @classmethod
    def from_json(cls, payload: Dict[str, Any]) -> "MaximalNet":
        return cls(d=payload["d"], level=payload["j"], gamma=payload["gamma"], delta=payload["delta"], nodes=np.asarray(payload["nodes"], dtype=float))


def _greedy_farthest(candidates: np.ndarray, seed: np.ndarray, delta: float) -> np.ndarray:
    tree = cKDTree(candidates)
    mind = pairwise_distance(candidates, seed[None, :])[:, 0]
    chosen = [seed]
    while True:
        best = int(np.argmax(mind))
        radius = mind[best]
        if radius < delta - _TIE_TOL:
            break
        node = candidates[best]
        chosen.append(node)
        near = tree.query_ball_point(node, chord(radius) + 1e-12)
        if near:
            near = np.asarray(near)
            mind[near] = np.minimum(mind[near], geodesic_distance(candidates[near], node))
        mind[best] = 0.0
    return np.array(chosen)


def build_maximal_net(d: int, j: int, gamma: float, frequency: Optional[int] = None) -> MaximalNet:
    """
    최대 δ-네트 생성
    :param d: 공간 차원 (구면 S^{d−1})
    :param j: 레벨
    :param gamma: 0 < γ ≤ 1
    :param frequency: d=3 후보 격자 세분 빈도 (기본: δ/4 간격이 되도록)
    :return: MaximalNet
    """
    if d < 2 or j < 0 or not 0 < gamma <= 1:
        raise DomainError(f"invalid net request d={d}, j={j}, gamma={gamma}")
    delta = gamma * 2.0 ** (1 - j)
    if d == 2:
        n = max(1, int(math.floor(2 * math.pi / delta + 1e-12)))
        nodes = circle_points(n)
        spacing = 0.0
    elif d == 3:
        f = frequency or min(320, max(4, math.ceil(4 * _ICOSA_EDGE / min(delta, 1.0))))
        cands = candidate_grid(3, f)
        nodes = _greedy_farthest(cands, basis_vector(3), delta)
        spacing = 1.2 * _ICOSA_EDGE / f
    else:
        raise DomainError("nets are implemented for d ∈ {2, 3}")
    logger.debug(f"🔍 네트 d={d} j={j} δ={delta:.4f} → {len(nodes)}개 노드")
    return MaximalNet(d=d, level=j, gamma=gamma, delta=delta, nodes=nodes, grid_spacing=spacing)


class Partition(BaseModel):
    """네트 노드별 분할 셀 A_ζ 와 측도 |A_ζ|"""

    net: MaximalNet
    measures: np.ndarray
    method: str

    class Config:
        arbitrary_types_allowed = True

    def measure_constant(self) -> float:
        """|A_ζ| ∈ [c⁻¹, c]·δ^{d−1} 를 만족하는 최소 c"""
        ref = self.net.delta ** (self.net.d - 1)
        return float(max(self.measures.max() / ref, ref / self.measures.min()))


def _counting_measures(net: MaximalNet, n_fine: int) -> np.ndarray:
    fine = fibonacci_points(n_fine)
    owners = net.cell_of(fine)
    counts = np.bincount(owners, minlength=len(net.nodes))
    return counts * (sphere_area(3) / n_fine)


def build_partition(net: MaximalNet, n_fine: int = 200_000) -> Partition:
    """
    가장 가까운 노드 기준 분할 (보로노이 셀)
    d=2: 호 길이 해석 계산, d=3: 구면 보로노이 면적 (실패 시 격자 카운팅)
    """
    nodes = net.nodes
    if net.d == 2:
        angles = np.mod(np.arctan2(nodes[:, 1], nodes[:, 0]), 2 * math.pi)
        order = np.argsort(angles)
        gaps = np.diff(np.concatenate([angles[order], [angles[order][0] + 2 * math.pi]]))
        measures = np.empty(len(nodes))
        measures[order] = 0.5 * (gaps + np.roll(gaps, 1))
        if len(nodes) == 1:
            measures[:] = 2 * math.pi
        return Partition(net=net, measures=measures, method="arc")
    if len(nodes) >= 4:
        try:
            sv = SphericalVoronoi(nodes, radius=1.0, center=np.zeros(3))
            return Partition(net=net, measures=np.asarray(sv.calculate_areas()), method="voronoi")
        except Exception as e:
            logger.warning(f"⚠️ 구면 보로노이 실패 ({e}), 격자 카운팅으로 대체")
    return Partition(net=net, measures=_counting_measures(net, n_fine), method="counting")
