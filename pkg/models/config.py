import math
import os
from typing import Any, Dict, Iterable, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from utils.errors import DomainError


class RunConfig(BaseModel):
    """🧭 실행 파라미터 (모든 산출물에 그대로 기록됨)"""

    d: int = Field(2, ge=2, le=3)
    J: Optional[int] = Field(None, ge=1, le=12)
    gamma: float = Field(0.5, gt=0, le=1)

    # θ 구성 상수
    gamma0: float = Field(0.5, gt=0)
    gamma1: float = Field(0.5, gt=0)
    gamma2: float = Field(0.25, gt=0)
    gamma3: float = Field(0.5, gt=0)
    gamma4: Optional[float] = Field(None, gt=0)
    strict: bool = False
    c10: float = Field(1.0, gt=0)
    c20: float = Field(1.0, gt=0)
    c30: float = Field(1.0, gt=0)

    A: float = Field(2.0, gt=1)
    K: int = Field(2, ge=2)
    K_from_A: bool = False
    M: Optional[int] = None
    smoothness_order: int = Field(8, ge=4)
    pole_budget: Optional[int] = Field(None, gt=0)

    # 근사 실험
    s: float = 1.0
    p: float = Field(2.0, gt=0)
    q: float = Field(2.0, gt=0)
    seed: int = 0
    seeds: int = Field(5, ge=1)
    n_grid: Optional[List[int]] = None

    # 허용 오차
    neumann_tol: float = Field(1e-10, gt=0)
    cubature_tol: float = Field(1e-10, gt=0)
    max_rho: float = Field(0.5, gt=0)

    output_dir: str = "runs/default"

    @field_validator("n_grid")
    @classmethod
    def _positive_grid(cls, value: Optional[List[int]]) -> Optional[List[int]]:
        if value is not None and any(n <= 0 for n in value):
            raise ValueError("n_grid entries must be positive")
        return value

    @model_validator(mode="after")
    def _derive(self) -> "RunConfig":
        if self.K_from_A:
            self.K = 2 * math.ceil(self.A * self.d / 2)
        if self.K % 2:
            raise ValueError(f"K must be even, got {self.K}")
        if self.M is None:
            self.M = self.K + self.d
        if self.M <= self.d - 2:
            raise ValueError("M must exceed d-2")
        if self.J is None:
            self.J = 9 if self.d == 2 else 5
        if self.n_grid is None:
            top = 256 if self.d == 2 else 128
            self.n_grid = [2 ** i for i in range(int(math.log2(top)) + 1)]
        if self.strict:
            g1 = min(self.gamma0 / (4 * self.c10), 1.0)
            self.gamma1 = g1
            self.gamma2 = min(self.gamma0 * g1 ** (2 * self.K + 1) / (4 * self.c20), g1)
            self.gamma3 = min(self.gamma0 * g1 ** (2 * self.K) / (4 * self.c30), 1.0)
            self.gamma4 = self.gamma0 / 4
        if self.gamma4 is None:
            self.gamma4 = self.gamma0 / 4
        if self.gamma1 > 1 or self.gamma2 > self.gamma1 or self.gamma3 > 1:
            raise ValueError("need gamma2 <= gamma1 <= 1 and gamma3 <= 1")
        return self

    @property
    def tau(self) -> float:
        return 1.0 / (self.s / (self.d - 1) + 1.0 / self.p)

    def admissible(self) -> bool:
        """𝒬(A): |s| ≤ A, 1/A ≤ p ≤ A, 1/A ≤ q ≤ A"""
        return abs(self.s) <= self.A and 1 / self.A <= self.p <= self.A and 1 / self.A <= self.q <= self.A

    def echo(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def parse_config_text(text: str) -> Dict[str, str]:
    """`key = value` 줄 단위 설정 파싱 (# 주석 허용)"""
    entries: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DomainError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value
    return entries


def _coerce(key: str, value: str) -> Any:
    if key == "n_grid":
        return [int(v) for v in value.replace(",", " ").split()]
    lowered = value.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", ""):
        return None
    return value


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """
    설정 파일 + `key=value` 오버라이드 병합 후 검증
    :param path: 설정 파일 경로 (없으면 기본값)
    :param overrides: 명령행 --set 값들
    :return: 검증된 RunConfig
    """
    entries: Dict[str, str] = {}
    if path:
        if not os.path.isfile(path):
            raise DomainError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            entries.update(parse_config_text(fh.read()))
    for item in overrides:
        if "=" not in item:
            raise DomainError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        entries[key.strip()] = value.strip()
    unknown = set(entries) - set(RunConfig.model_fields)
    if unknown:
        raise DomainError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**{k: _coerce(k, v) for k, v in entries.items()})
