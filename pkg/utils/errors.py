"""newtframe 도메인 예외 모음"""
from typing import Any, Dict, Optional


class NewtframeError(Exception):
    """모든 도메인 예외의 기반 클래스"""


class DomainError(NewtframeError, ValueError):
    """정의역 밖 입력 (|x| ≥ 1, a ≤ 1, 극점 위 평가, 홀수 K 등)"""


class CubatureInfeasibleError(NewtframeError):
    def __init__(self, residual: float, level: int, message: Optional[str] = None):
        self.residual = float(residual)
        self.level = int(level)
        super().__init__(message or f"level {level}: moment residual {residual:.3e} above tolerance")


class BCoefficientFitError(NewtframeError):
    def __init__(self, residual: float, d: int, m: int):
        self.residual = float(residual)
        super().__init__(f"b-coefficient fit (d={d}, m={m}) relative residual {residual:.3e}")


class TStepError(NewtframeError):
    def __init__(self, achieved: float, t: float, level: int):
        self.achieved = float(achieved)
        self.t = float(t)
        super().__init__(f"level {level}: no step t met tolerance (best discrepancy {achieved:.3e} at t={t:.1e})")


class PoleBudgetError(NewtframeError):
    def __init__(self, counts: Dict[str, int]):
        self.counts = dict(counts)
        detail = ", ".join(f"{k}={v}" for k, v in self.counts.items())
        super().__init__(f"pole budget exceeded ({detail})")


class NonContractiveError(NewtframeError):
    def __init__(self, rho: float):
        self.rho = float(rho)
        super().__init__(f"‖I−T‖ = {rho:.4f} ≥ 1, Neumann series diverges")


class MissingArtifactError(NewtframeError):
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"missing artifact: {path}")


class VerificationError(NewtframeError):
    def __init__(self, report: Any):
        self.report = report
        super().__init__("verification failed")
