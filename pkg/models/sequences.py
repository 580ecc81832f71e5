from typing import Dict, Iterator, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict


class NodeIndex(BaseModel):
    """프레임 인덱스 ξ = (레벨 j, 순번), N_ξ = 2^{j−1}"""

    model_config = ConfigDict(frozen=True)

    level: int
    ordinal: int

    @property
    def N(self) -> float:
        return 2.0 ** (self.level - 1)


class FrameIndex(BaseModel):
    """레벨 우선 순서로 나열된 전체 인덱스 집합"""

    d: int
    gamma: float
    levels: np.ndarray
    ordinals: np.ndarray
    centers: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def J(self) -> int:
        return int(self.levels.max())

    @property
    def N(self) -> np.ndarray:
        return 2.0 ** (self.levels - 1.0)

    def position(self, index: NodeIndex) -> int:
        hits = np.flatnonzero((self.levels == index.level) & (self.ordinals == index.ordinal))
        if len(hits) == 0:
            raise KeyError(f"no frame element {index}")
        return int(hits[0])

    def node(self, i: int) -> NodeIndex:
        return NodeIndex(level=int(self.levels[i]), ordinal=int(self.ordinals[i]))

    def level_slices(self) -> Iterator[Tuple[int, slice]]:
        for j in range(self.J + 1):
            hits = np.flatnonzero(self.levels == j)
            if len(hits):
                yield j, slice(int(hits[0]), int(hits[-1]) + 1)

    def cap_radii(self) -> np.ndarray:
        """B_ξ = B(ξ, γ·2^{1−j})"""
        return self.gamma * 2.0 ** (1.0 - self.levels)


class CoeffSeq(BaseModel):
    """ξ ↦ h_ξ (인덱스 집합에 정렬된 유한 지지 수열)"""

    index: FrameIndex
    values: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @classmethod
    def zeros(cls, index: FrameIndex) -> "CoeffSeq":
        return cls(index=index, values=np.zeros(len(index)))

    @classmethod
    def from_dict(cls, index: FrameIndex, entries: Dict[NodeIndex, float]) -> "CoeffSeq":
        out = cls.zeros(index)
        for key, value in entries.items():
            out.values[index.position(key)] = value
        return out

    def support(self) -> np.ndarray:
        return np.flatnonzero(self.values)

    def as_dict(self) -> Dict[NodeIndex, float]:
        return {self.index.node(i): float(self.values[i]) for i in self.support()}

    def by_level(self) -> List[np.ndarray]:
        return [self.values[sl] for _, sl in self.index.level_slices()]

    def __add__(self, other: "CoeffSeq") -> "CoeffSeq":
        return CoeffSeq(index=self.index, values=self.values + other.values)

    def __sub__(self, other: "CoeffSeq") -> "CoeffSeq":
        return CoeffSeq(index=self.index, values=self.values - other.values)

    def __mul__(self, scalar: float) -> "CoeffSeq":
        return CoeffSeq(index=self.index, values=self.values * scalar)

    __rmul__ = __mul__

    def rows(self) -> List[Dict[str, float]]:
        return [
            {"level": int(self.index.levels[i]), "ordinal": int(self.index.ordinals[i]), "value": float(self.values[i])}
            for i in range(len(self.values))
        ]
