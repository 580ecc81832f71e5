import math
from typing import Any, Dict, List, Optional

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, Field
from scipy.spatial import cKDTree

from models.sequences import CoeffSeq, FrameIndex
from services.cubature import CubatureRule, product_rule
from services.needlet import CutoffPair
from services.sphere import cap_area, chord
from services.zonal import SHExpansion, sh_basis_matrix
from utils.errors import DomainError
from utils.logger import setup_logger
from utils.settings import settings

logger = setup_logger("Spaces")


class SmoothnessTriple(BaseModel):
    """(s, p, q), 1/τ = s/(d−1) + 1/p"""

    s: float = 0.0
    p: float = Field(2.0, gt=0)
    q: float = Field(2.0, gt=0)

    def model_post_init(self, __context: Any) -> None:
        if math.isinf(self.p) or math.isinf(self.q):
            raise DomainError("p and q must be finite")

    def tau(self, d: int) -> float:
        return 1.0 / (self.s / (d - 1) + 1.0 / self.p)

    def admissible(self, A: float) -> bool:
        return abs(self.s) <= A and 1 / A <= self.p <= A and 1 / A <= self.q <= A

    def label(self) -> str:
        return f"s={self.s:g},p={self.p:g},q={self.q:g}"


def _level_weight(j: int, d: int, triple: SmoothnessTriple) -> float:
    return 2.0 ** (j * (triple.s + (d - 1) * (0.5 - 1.0 / triple.p)))


def seq_besov_norm(h: CoeffSeq, triple: SmoothnessTriple) -> float:
    """(Σ_j [2^{j(s+(d−1)(1/2−1/p))} ‖h_j‖_p]^q)^{1/q}"""
    d = h.index.d
    blocks = [
        _level_weight(j, d, triple) * float(np.sum(np.abs(h.values[sl]) ** triple.p)) ** (1.0 / triple.p)
        for j, sl in h.index.level_slices()
    ]
    return float(np.sum(np.asarray(blocks) ** triple.q)) ** (1.0 / triple.q)


def tl_grid(index: FrameIndex, oversample: float = 4.0) -> CubatureRule:
    """가장 작은 캡 반지름보다 oversample 배 촘촘한 곱 격자"""
    finest = float(index.cap_radii().min())
    degree = int(math.ceil(2 * math.pi * oversample / finest))
    return product_rule(index.d, degree)


def seq_tl_norm(h: CoeffSeq, triple: SmoothnessTriple, grid: Optional[CubatureRule] = None) -> float:
    """‖(Σ_ξ [|B_ξ|^{−s/(d−1)−1/2}|h_ξ| 1_{B_ξ}]^q)^{1/q}‖_p, 격자 적분"""
    index = h.index
    d = index.d
    grid = grid or tl_grid(index)
    tree = cKDTree(grid.nodes)
    acc = np.zeros(len(grid))
    radii = index.cap_radii()
    for i in h.support():
        r = float(radii[i])
        height = cap_area(d, r) ** (-triple.s / (d - 1) - 0.5) * abs(h.values[i])
        hits = tree.query_ball_point(index.centers[i], chord(r))
        acc[hits] += height ** triple.q
    inner = acc ** (triple.p / triple.q)
    return float(grid.weights @ inner) ** (1.0 / triple.p)


def _block_multipliers(cutoff: CutoffPair, degree: int) -> List[np.ndarray]:
    """Φ₀ = Z₀, Φ_j = Σ φ(k/2^{j−1}) Z_k"""
    k = np.arange(degree + 1, dtype=float)
    blocks = [np.where(k == 0, 1.0, 0.0)]
    j = 1
    while 2.0 ** (j - 2) <= degree:
        blocks.append(cutoff.phi(k / 2.0 ** (j - 1)))
        j += 1
    return blocks


def function_space_norm(
    f: SHExpansion,
    triple: SmoothnessTriple,
    kind: str = "B",
    cutoff: Optional[CutoffPair] = None,
    grid: Optional[CubatureRule] = None,
) -> float:
    """
    𝓑 / 𝓕 노름 (Φ_j∗f 블록)
    :param kind: "B" (Besov) 또는 "F" (Triebel–Lizorkin)
    :param grid: L^p 적분 격자 (기본: 차수 4L 곱 격자)
    """
    if kind not in ("B", "F"):
        raise DomainError(f"kind must be 'B' or 'F', got {kind!r}")
    cutoff = cutoff or CutoffPair()
    grid = grid or product_rule(f.d, max(4 * f.degree, 16))
    Y = sh_basis_matrix(f.d, f.degree, grid.nodes)
    deg = f.degrees()
    blocks = _block_multipliers(cutoff, f.degree)

    def block_values(j: int) -> np.ndarray:
        return 2.0 ** (j * triple.s) * np.abs(Y @ (f.coeffs * blocks[j][deg]))

    values = Parallel(n_jobs=settings.NEWTFRAME_THREADS, prefer="threads")(
        delayed(block_values)(j) for j in range(len(blocks))
    )
    p, q = triple.p, triple.q
    if kind == "B":
        norms = np.array([float(grid.weights @ v ** p) ** (1.0 / p) for v in values])
        return float(np.sum(norms ** q)) ** (1.0 / q)
    inner = np.sum(np.asarray(values) ** q, axis=0) ** (1.0 / q)
    return float(grid.weights @ inner ** p) ** (1.0 / p)


def hardy_norm_estimate(f: SHExpansion, p: float, levels: int = 6, grid: Optional[CubatureRule] = None) -> float:
    """‖sup_r |U(r·)|‖_p, r ∈ {0} ∪ {1−2^{−l}} ∪ {1}"""
    grid = grid or product_rule(f.d, max(4 * f.degree, 16))
    V = sh_basis_matrix(f.d, f.degree, grid.nodes) * f.coeffs[None, :]
    deg = f.degrees()
    radii = [0.0] + [1.0 - 2.0 ** (-l) for l in range(1, levels + 1)] + [1.0]
    sup = np.zeros(len(grid))
    for r in radii:
        sup = np.maximum(sup, np.abs(V @ (r ** deg.astype(float))))
    return float(grid.weights @ sup ** p) ** (1.0 / p)


def embedding_check(h: CoeffSeq, s: float, p: float, q0: float, q1: float) -> Dict[str, Any]:
    """q₀ ≤ q₁ ⇒ ‖h‖_{b^{sq₀}_p} ≥ ‖h‖_{b^{sq₁}_p}"""
    if q0 > q1:
        raise DomainError("need q0 <= q1")
    n0 = seq_besov_norm(h, SmoothnessTriple(s=s, p=p, q=q0))
    n1 = seq_besov_norm(h, SmoothnessTriple(s=s, p=p, q=q1))
    return {"b_q0": n0, "b_q1": n1, "holds": n0 >= n1 * (1 - 1e-12)}


def norm_rows(
    f: SHExpansion,
    coeffs: CoeffSeq,
    triples: List[SmoothnessTriple],
    cutoff: Optional[CutoffPair] = None,
) -> List[Dict[str, Any]]:
    """노름 보고서 행 (space, s, p, q, value, grid_params)"""
    rows: List[Dict[str, Any]] = []
    f_grid = product_rule(f.d, max(4 * f.degree, 16))
    s_grid = tl_grid(coeffs.index)
    for t in triples:
        entries = {
            "b": (seq_besov_norm(coeffs, t), ""),
            "f": (seq_tl_norm(coeffs, t, s_grid), f"product:{s_grid.exact_degree}"),
            "B": (function_space_norm(f, t, "B", cutoff, f_grid), f"product:{f_grid.exact_degree}"),
            "F": (function_space_norm(f, t, "F", cutoff, f_grid), f"product:{f_grid.exact_degree}"),
        }
        for space, (value, grid_params) in entries.items():
            rows.append({"space": space, "s": t.s, "p": t.p, "q": t.q, "value": value, "grid_params": grid_params})
    logger.info(f"✅ 노름 보고서 {len(rows)}행")
    return rows
