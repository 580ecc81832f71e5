import math
from functools import lru_cache
from typing import Any, Dict, Optional

import numpy as np
from pydantic import BaseModel
from scipy import special

from services.sphere import sphere_area
from utils.errors import DomainError


# ---------------------------------------------------------------------------
# 차원 / 인덱싱
# ---------------------------------------------------------------------------

def dim_harmonics(k: int, d: int) -> int:
    """N(k, d) = (2k+d−2)/k · C(k+d−3, k−1), N(0, d) = 1"""
    if k < 0:
        raise DomainError("degree must be nonnegative")
    if k == 0:
        return 1
    return int(round((2 * k + d - 2) / k * math.comb(k + d - 3, k - 1)))


def sh_count(L: int, d: int) -> int:
    """dim Π_L = Σ_{k≤L} N(k, d)"""
    if L < 0:
        return 0
    if d == 2:
        return 2 * L + 1
    if d == 3:
        return (L + 1) ** 2
    return sum(dim_harmonics(k, d) for k in range(L + 1))


def sh_offset(k: int, d: int) -> int:
    return sh_count(k - 1, d)


def sh_index(k: int, nu: int, d: int) -> int:
    if k < 0 or not 0 <= nu < dim_harmonics(k, d):
        raise DomainError(f"no harmonic (k={k}, ν={nu}) for d={d}")
    return sh_offset(k, d) + nu


@lru_cache(maxsize=64)
def _degree_vector(L: int, d: int) -> np.ndarray:
    out = np.concatenate([np.full(dim_harmonics(k, d), k) for k in range(L + 1)])
    out.setflags(write=False)
    return out


def degree_vector(L: int, d: int) -> np.ndarray:
    """평탄 인덱스별 차수 k"""
    return _degree_vector(L, d)


# ---------------------------------------------------------------------------
# Gegenbauer / Chebyshev
# ---------------------------------------------------------------------------

class GegenbauerBasis(BaseModel):
    """C_k^μ (μ = (d−2)/2), d=2 이면 Chebyshev T_k"""

    d: int
    max_degree: int

    @property
    def mu(self) -> float:
        return (self.d - 2) / 2.0

    @property
    def chebyshev(self) -> bool:
        return self.d == 2

    def alpha(self, k: int, u):
        if self.chebyshev:
            return u if k == 0 else 2.0 * u
        return 2.0 * (k + self.mu) * u / (k + 1)

    def beta(self, k: int) -> float:
        """C_{k+1} = α_k C_k + β_k C_{k−1}"""
        if self.chebyshev:
            return -1.0
        return -(k + 2 * self.mu - 1) / (k + 1)

    def values(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.empty((self.max_degree + 1,) + u.shape)
        out[0] = 1.0
        if self.max_degree >= 1:
            out[1] = self.alpha(0, u)
        for k in range(1, self.max_degree):
            out[k + 1] = self.alpha(k, u) * out[k] + self.beta(k) * out[k - 1]
        return out

    def at_one(self) -> np.ndarray:
        k = np.arange(self.max_degree + 1)
        if self.chebyshev:
            return np.ones(len(k))
        return special.binom(k + 2 * self.mu - 1, k)

    def clenshaw(self, c: np.ndarray, u) -> np.ndarray:
        """Σ c_k C_k(u)"""
        u = np.asarray(u, dtype=float)
        b1 = np.zeros_like(u)
        b2 = np.zeros_like(u)
        for k in range(len(c) - 1, -1, -1):
            b1, b2 = c[k] + self.alpha(k, u) * b1 + self.beta(k + 1) * b2, b1
        return b1


def zk_scale(d: int, L: int) -> np.ndarray:
    """Z_k = s_k · C_k^μ (d=2: s_0 = 1/2π, s_k = 1/π)"""
    k = np.arange(L + 1, dtype=float)
    if d == 2:
        s = np.full(L + 1, 1.0 / math.pi)
        s[0] = 1.0 / (2 * math.pi)
        return s
    mu = (d - 2) / 2.0
    return (k + mu) / (mu * sphere_area(d))


def zk_table(d: int, L: int, u) -> np.ndarray:
    basis = GegenbauerBasis(d=d, max_degree=L)
    scale = zk_scale(d, L).reshape((-1,) + (1,) * np.ndim(u))
    return scale * basis.values(u)


def zk_eval(k: int, u, d: int):
    """Z_k(u)"""
    if k < 0:
        raise DomainError("degree must be nonnegative")
    return zk_table(d, k, u)[k]


class ZonalKernel(BaseModel):
    """u ↦ Σ λ_k Z_k(u)"""

    d: int
    coeffs: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, u) -> np.ndarray:
        basis = GegenbauerBasis(d=self.d, max_degree=self.degree)
        return basis.clenshaw(self.coeffs * zk_scale(self.d, self.degree), u)

    def naive(self, u) -> np.ndarray:
        return np.tensordot(self.coeffs, zk_table(self.d, self.degree, u), axes=1)

    def convolve(self, other: "ZonalKernel") -> "ZonalKernel":
        return zonal_convolve(self, other)

    def laplace_beltrami(self, K: int) -> "ZonalKernel":
        return ZonalKernel(d=self.d, coeffs=self.coeffs * lb_multiplier(self.d, self.degree, K))

    def envelope(self, N: float, M: float, n_theta: int = 4000) -> float:
        """max |Λ(cos θ)|·(1+Nθ)^M / N^{d−1}"""
        theta = np.linspace(0.0, math.pi, n_theta)
        vals = np.abs(self(np.cos(theta)))
        return float(np.max(vals * (1 + N * theta) ** M) / N ** (self.d - 1))


def zonal_convolve(F: ZonalKernel, G: ZonalKernel) -> ZonalKernel:
    """∫ F(x·y) G(y·z) dσ(y) → 계수 곱 (Z_k ∗ Z_k = Z_k)"""
    if F.d != G.d:
        raise DomainError("kernels live on different spheres")
    n = min(len(F.coeffs), len(G.coeffs))
    return ZonalKernel(d=F.d, coeffs=F.coeffs[:n] * G.coeffs[:n])


def lb_multiplier(d: int, L: int, K: int) -> np.ndarray:
    """(−k(k+d−2))^{K/2}"""
    if K % 2:
        raise DomainError(f"Laplace–Beltrami power needs even K, got {K}")
    k = np.arange(L + 1, dtype=float)
    return (-k * (k + d - 2)) ** (K // 2)


# ---------------------------------------------------------------------------
# 실수 구면조화 기저
# ---------------------------------------------------------------------------

def _circle_basis(L: int, points: np.ndarray) -> np.ndarray:
    phi = np.arctan2(points[:, 1], points[:, 0])
    out = np.empty((len(points), sh_count(L, 2)))
    out[:, 0] = 1.0 / math.sqrt(2 * math.pi)
    for k in range(1, L + 1):
        out[:, 2 * k - 1] = np.cos(k * phi) / math.sqrt(math.pi)
        out[:, 2 * k] = np.sin(k * phi) / math.sqrt(math.pi)
    return out


def _sphere_basis(L: int, points: np.ndarray) -> np.ndarray:
    z = np.clip(points[:, 2], -1.0, 1.0)
    rho = np.hypot(points[:, 0], points[:, 1])
    phi = np.arctan2(points[:, 1], points[:, 0])
    out = np.empty((len(points), sh_count(L, 3)))
    pmm = np.full(len(points), 1.0 / math.sqrt(4 * math.pi))
    for m in range(L + 1):
        if m > 0:
            pmm = pmm * math.sqrt((2 * m + 1) / (2 * m)) * rho
        if m == 0:
            cos_m = sin_m = None
        else:
            cos_m = math.sqrt(2.0) * np.cos(m * phi)
            sin_m = math.sqrt(2.0) * np.sin(m * phi)

        def put(k: int, p: np.ndarray) -> None:
            base = k * k
            if m == 0:
                out[:, base] = p
            else:
                out[:, base + 2 * m - 1] = p * cos_m
                out[:, base + 2 * m] = p * sin_m

        put(m, pmm)
        if m + 1 > L:
            continue
        p_prev, p_cur = pmm, math.sqrt(2 * m + 3) * z * pmm
        put(m + 1, p_cur)
        for k in range(m + 2, L + 1):
            a = math.sqrt((4 * k * k - 1) / (k * k - m * m))
            b = math.sqrt(((k - 1) ** 2 - m * m) / (4 * (k - 1) ** 2 - 1))
            p_prev, p_cur = p_cur, a * (z * p_cur - b * p_prev)
            put(k, p_cur)
    return out


def sh_basis_matrix(d: int, L: int, points) -> np.ndarray:
    """
    점별 실수 정규직교 기저값 (n_points × dim Π_L)
    d=2: 1/√2π, cos kφ/√π, sin kφ/√π / d=3: 연관 르장드르 점화식
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != d:
        raise DomainError(f"points must have {d} coordinates")
    if d == 2:
        return _circle_basis(L, pts)
    if d == 3:
        return _sphere_basis(L, pts)
    raise DomainError("spherical harmonics are implemented for d ∈ {2, 3}")


def sh_basis_eval(k: int, nu: int, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1]
    col = sh_index(k, nu, d)
    return sh_basis_matrix(d, k, x)[:, col]


# ---------------------------------------------------------------------------
# 구면조화 전개
# ---------------------------------------------------------------------------

class SHExpansion(BaseModel):
    """f = Σ b_{kν} Y_{kν}, 평탄 계수 배열 (k 순, ν 순)"""

    d: int
    degree: int
    coeffs: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @classmethod
    def zeros(cls, d: int, degree: int) -> "SHExpansion":
        return cls(d=d, degree=degree, coeffs=np.zeros(sh_count(degree, d)))

    @classmethod
    def from_coeffs(cls, d: int, coeffs: np.ndarray) -> "SHExpansion":
        coeffs = np.asarray(coeffs, dtype=float)
        L = 0
        while sh_count(L, d) < len(coeffs):
            L += 1
        if sh_count(L, d) != len(coeffs):
            raise DomainError("coefficient vector length is not dim Π_L")
        return cls(d=d, degree=L, coeffs=coeffs)

    @classmethod
    def random(cls, d: int, degree: int, rng: np.random.Generator) -> "SHExpansion":
        return cls(d=d, degree=degree, coeffs=rng.standard_normal(sh_count(degree, d)))

    def resize(self, L: int) -> "SHExpansion":
        """차수 L로 절단 또는 0 채움"""
        n = sh_count(L, self.d)
        out = np.zeros(n)
        m = min(n, len(self.coeffs))
        out[:m] = self.coeffs[:m]
        return SHExpansion(d=self.d, degree=L, coeffs=out)

    def _aligned(self, other: "SHExpansion"):
        L = max(self.degree, other.degree)
        return self.resize(L).coeffs, other.resize(L).coeffs, L

    def __add__(self, other: "SHExpansion") -> "SHExpansion":
        a, b, L = self._aligned(other)
        return SHExpansion(d=self.d, degree=L, coeffs=a + b)

    def __sub__(self, other: "SHExpansion") -> "SHExpansion":
        a, b, L = self._aligned(other)
        return SHExpansion(d=self.d, degree=L, coeffs=a - b)

    def __mul__(self, scalar: float) -> "SHExpansion":
        return SHExpansion(d=self.d, degree=self.degree, coeffs=self.coeffs * scalar)

    __rmul__ = __mul__

    def inner(self, other: "SHExpansion") -> float:
        a, b, _ = self._aligned(other)
        return float(a @ b)

    def norm2(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def evaluate(self, points) -> np.ndarray:
        return sh_basis_matrix(self.d, self.degree, points) @ self.coeffs

    def degrees(self) -> np.ndarray:
        return degree_vector(self.degree, self.d)

    def to_json(self) -> Dict[str, Any]:
        rows = []
        for k in range(self.degree + 1):
            base = sh_offset(k, self.d)
            for nu in range(dim_harmonics(k, self.d)):
                rows.append([k, nu, float(self.coeffs[base + nu]), 0.0])
        return {"d": self.d, "deg": self.degree, "coeffs": rows}

    @classmethod
    def from_json(cls, payload: Dict[str, Any]) -> "SHExpansion":
        d, L = int(payload["d"]), int(payload["deg"])
        out = np.zeros(sh_count(L, d))
        for k, nu, re, _im in payload["coeffs"]:
            out[sh_index(int(k), int(nu), d)] = re
        return cls(d=d, degree=L, coeffs=out)


def zonal_expansion(kernel: ZonalKernel, center, degree: Optional[int] = None) -> SHExpansion:
    """Λ(η·x) 의 전개: b_{kν} = λ_k Y_{kν}(η)"""
    L = kernel.degree if degree is None else degree
    lam = np.zeros(L + 1)
    n = min(L, kernel.degree) + 1
    lam[:n] = kernel.coeffs[:n]
    Y = sh_basis_matrix(kernel.d, L, np.atleast_2d(center))[0]
    return SHExpansion(d=kernel.d, degree=L, coeffs=lam[degree_vector(L, kernel.d)] * Y)


def laplace_beltrami_power(f: SHExpansion, K: int) -> SHExpansion:
    """Δ₀^{K/2} f: b_{kν} → (−k(k+d−2))^{K/2} b_{kν}"""
    mult = lb_multiplier(f.d, f.degree, K)
    return SHExpansion(d=f.d, degree=f.degree, coeffs=f.coeffs * mult[f.degrees()])


# ---------------------------------------------------------------------------
# 푸아송 핵
# ---------------------------------------------------------------------------

def poisson_eval(y, x) -> float:
    """P(y, x) = (1/ω_d)(1−|x|²)/|x−y|^d, |x| < 1"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r2 = float(x @ x)
    if r2 >= 1.0:
        raise DomainError("Poisson kernel needs |x| < 1")
    d = len(x)
    return (1.0 - r2) / (sphere_area(d) * np.linalg.norm(x - y) ** d)


def poisson_series(y, x, terms: int) -> float:
    """Σ_{k≤terms} |x|^k Z_k(x̂·y)"""
    x = np.asarray(x, dtype=float)
    d = len(x)
    r = float(np.linalg.norm(x))
    if r >= 1.0:
        raise DomainError("Poisson series needs |x| < 1")
    if r == 0.0:
        return 1.0 / sphere_area(d)
    u = float(np.dot(x / r, y))
    return float(np.sum(r ** np.arange(terms + 1) * zk_table(d, terms, u)))
