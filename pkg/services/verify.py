import math
from typing import Any, Callable, Dict, Iterable, List

import numpy as np

from services.cubature import certify_exactness
from services.newton import diamond_pipeline
from services.pipeline import FramePipeline
from services.spaces import SmoothnessTriple, seq_besov_norm
from services.zonal import SHExpansion
from utils.errors import DomainError
from utils.logger import setup_logger

logger = setup_logger("Verify")

SUITES: List[str] = ["cutoff", "cubature", "reconstruction", "moments", "D", "contraction", "norms"]


def _cutoff(pipe: FramePipeline) -> Dict[str, Any]:
    err = pipe.cutoff.partition_error()
    lower = pipe.cutoff.lower_bound()
    return {"passed": err <= 1e-12 and lower > 0, "partition_error": err, "lower_bound": lower}


def _cubature(pipe: FramePipeline) -> Dict[str, Any]:
    residuals = [certify_exactness(rule) for rule in pipe.frame.rules]
    return {"passed": max(residuals) <= 1e-9, "residuals": residuals}


def _reconstruction(pipe: FramePipeline, trials: int = 20) -> Dict[str, Any]:
    frame = pipe.frame
    rng = np.random.default_rng(pipe.config.seed)
    worst = 0.0
    for _ in range(trials):
        f = SHExpansion.random(frame.d, frame.working_degree, rng)
        back = frame.synthesize(frame.analyze(f)).resize(frame.working_degree)
        worst = max(worst, (back - f).norm2() / f.norm2())
    return {"passed": worst <= 1e-8, "max_relative_error": worst}


def _moments(pipe: FramePipeline, per_level: int = 3) -> Dict[str, Any]:
    family = pipe.family
    index = pipe.frame.index
    rows = []
    for j, sl in index.level_slices():
        if j == 0:
            continue
        for i in range(sl.start, min(sl.stop, sl.start + per_level)):
            report = diamond_pipeline(family.atoms[i], pipe.plan(j), index.centers[i], family.params.gamma0)
            rows.append({"level": j, "ordinal": int(index.ordinals[i]), "moment_ratio": report["moment_ratio"], "envelope_ratio": report["envelope_ratio"]})
    moment = max((r["moment_ratio"] for r in rows), default=0.0)
    envelope = max((r["envelope_ratio"] for r in rows), default=0.0)
    return {"passed": moment <= 1.0 and envelope <= 1.0, "max_moment_ratio": moment, "max_envelope_ratio": envelope, "atoms": rows}


def _d_section(pipe: FramePipeline, bound: float = 1.0) -> Dict[str, Any]:
    """D = A − B 의 적합 상수 / γ₀ ≤ bound"""
    fitted = pipe.d_fitted_constant()
    return {"passed": math.isfinite(fitted) and fitted <= bound, "fitted_constant": fitted, "bound": bound}


def _contraction(pipe: FramePipeline, trials: int = 20) -> Dict[str, Any]:
    pf = pipe.perturbed
    rho = pf.rho_T()
    if rho >= 1:
        return {"passed": False, "rho_T": rho}
    rng = np.random.default_rng(pipe.config.seed)
    worst = max(pf.round_trip_error(SHExpansion.random(pf.d, pf.W, rng), pipe.config.neumann_tol) for _ in range(trials))
    return {"passed": rho <= pipe.config.max_rho and worst <= 1e-6, "rho_T": rho, "max_round_trip": worst}


def _norms(pipe: FramePipeline, trials: int = 10, bound: float = 10.0) -> Dict[str, Any]:
    pf = pipe.perturbed
    if pf.rho_T() >= 1:
        return {"passed": False, "rho_T": pf.rho_T()}
    rng = np.random.default_rng(pipe.config.seed)
    triple = SmoothnessTriple(s=0.0, p=2.0, q=2.0)
    ratios = []
    for _ in range(trials):
        f = SHExpansion.random(pf.d, pf.W, rng)
        ratios.append(seq_besov_norm(pf.dual_coefficients(f, pipe.config.neumann_tol), triple) / f.norm2())
    lo, hi = min(ratios), max(ratios)
    return {"passed": 1 / bound <= lo and hi <= bound, "min_ratio": lo, "max_ratio": hi}


_RUNNERS: Dict[str, Callable[[FramePipeline], Dict[str, Any]]] = {
    "cutoff": _cutoff,
    "cubature": _cubature,
    "reconstruction": _reconstruction,
    "moments": _moments,
    "D": _d_section,
    "contraction": _contraction,
    "norms": _norms,
}


def run_suites(pipe: FramePipeline, suites: Iterable[str]) -> Dict[str, Any]:
    """
    불변식 스위트 실행
    :param suites: 실행할 스위트 이름 (빈 목록이면 통과)
    :return: {"passed": bool, "suites": {...}, "config": ...}
    """
    suites = list(suites)
    unknown = [name for name in suites if name not in _RUNNERS]
    if unknown:
        raise DomainError(f"unknown suites {unknown}; choose from {SUITES}")
    results: Dict[str, Any] = {}
    for name in suites:
        logger.info(f"🔍 스위트 {name} 실행")
        results[name] = _RUNNERS[name](pipe)
        mark = "✅" if results[name]["passed"] else "🚨"
        logger.info(f"{mark} 스위트 {name}: {'통과' if results[name]['passed'] else '실패'}")
    return {"passed": all(r["passed"] for r in results.values()), "suites": results, "config": pipe.config.echo()}
