import math
import os
from typing import Any, Dict, List, Optional

import numpy as np
from joblib import Parallel, delayed

from models.config import RunConfig
from services.approx import Approximant, greedy_nterm, rate_experiment
from services.cubature import CubatureRule, certify_exactness, product_rule
from services.frames import AlmostDiagParams, OperatorSection, PerturbedFrame, build_sections, omega_matrix
from services.needlet import NeedletFrame, build_cutoffs, build_needlet_frame
from services.newton import LevelPlan, NewtonianAtom, ThetaBuildParams, ThetaFamily, build_theta_family, plan_level
from services.spaces import SmoothnessTriple, norm_rows
from services.sphere import build_maximal_net
from services.zonal import SHExpansion
from utils.cache import ArtifactCache
from utils.errors import DomainError
from utils.io import read_json, write_csv, write_json
from utils.logger import setup_logger
from utils.settings import settings

logger = setup_logger("FramePipeline")

_STRUCTURAL_KEYS = ("d", "J", "gamma", "K", "smoothness_order")


class FramePipeline:
    def __init__(self, config: RunConfig, cache: Optional[ArtifactCache] = None, from_artifacts: bool = False):
        """
        🚀 설정 하나로 네트 → 큐베이처 → 니들렛 → θ → T 까지 연결
        :param from_artifacts: True 면 output_dir 의 cubature.json / theta_atoms.json / theta.json 을 읽고 재구성하지 않음
        """
        self.config = config
        self.cache = cache or ArtifactCache()
        self.cutoff = build_cutoffs(config.smoothness_order)
        self.params = ThetaBuildParams.from_config(config)
        self.from_artifacts = from_artifacts
        self._frame: Optional[NeedletFrame] = None
        self._family: Optional[ThetaFamily] = None
        self._perturbed: Optional[PerturbedFrame] = None
        self._manifest: Optional[Dict[str, Any]] = None

    # ------------------------------------------------------------------
    # 구성 요소 (지연 생성)
    # ------------------------------------------------------------------

    @property
    def frame(self) -> NeedletFrame:
        if self._frame is None:
            c = self.config
            if self.from_artifacts:
                self._frame = self._load_frame()
            else:
                self._frame = build_needlet_frame(c.d, c.J, c.gamma, self.cutoff, self.cache, c.cubature_tol)
        return self._frame

    @property
    def family(self) -> ThetaFamily:
        if self._family is None:
            self._family = self._load_family() if self.from_artifacts else build_theta_family(self.frame, self.params)
        return self._family

    @property
    def perturbed(self) -> PerturbedFrame:
        if self._perturbed is None:
            self._perturbed = PerturbedFrame.from_family(self.family, self.config.max_rho)
        return self._perturbed

    def theta_matrix(self) -> np.ndarray:
        return self.family.expansion_matrix(self.frame.band_limit)

    def plan(self, j: int) -> LevelPlan:
        """레벨 j 계획 (산출물에서 읽은 경우 저장된 t_j 로 재구성)"""
        family = self.family
        if j not in family.plans:
            level = next((lv for lv in self._read_manifest()["levels"] if lv["j"] == j), None)
            if level is None:
                raise DomainError(f"theta.json has no level {j}")
            plan = plan_level(self.config.d, j, family.params, self.cutoff, t_override=level["t"])
            disc = level.get("discrepancy")
            family.plans[j] = plan.model_copy(update={"discrepancy": math.nan if disc is None else disc})
        return family.plans[j]

    # ------------------------------------------------------------------
    # 산출물 읽기
    # ------------------------------------------------------------------

    def _read(self, name: str) -> Dict[str, Any]:
        """산출물 JSON 읽기 + 구조 설정(d, J, γ, K, 평활 차수) 일치 확인"""
        payload = read_json(self.path(name))
        stored, current = payload.get("config", {}), self.config.echo()
        mismatched = [key for key in _STRUCTURAL_KEYS if stored.get(key) != current[key]]
        if mismatched:
            detail = ", ".join(f"{k}: {stored.get(k)} != {current[k]}" for k in mismatched)
            raise DomainError(f"{name} was built with a different configuration ({detail})")
        return payload

    def _read_manifest(self) -> Dict[str, Any]:
        if self._manifest is None:
            self._manifest = self._read("theta.json")
        return self._manifest

    def _load_frame(self) -> NeedletFrame:
        c = self.config
        rules = [CubatureRule.from_json(level) for level in self._read("cubature.json")["levels"]]
        if [rule.level for rule in rules] != list(range(c.J + 1)):
            raise DomainError(f"cubature.json levels {[rule.level for rule in rules]} do not cover 0..{c.J}")
        logger.info(f"🔍 cubature.json 에서 레벨 0..{c.J} 규칙 로드")
        return NeedletFrame(c.d, c.J, c.gamma, rules, self.cutoff)

    def _load_family(self) -> ThetaFamily:
        atoms = self.load_atoms()
        manifest = self._read_manifest()
        frame = self.frame
        if len(atoms) != len(frame):
            raise DomainError(f"theta_atoms.json holds {len(atoms)} atoms, frame has {len(frame)}")
        params = ThetaBuildParams.from_artifact(manifest.get("params", {}))
        logger.info(f"🔍 theta_atoms.json 에서 θ 원자 {len(atoms)}개 로드 (예산 {manifest['budget']})")
        return ThetaFamily(frame, {}, atoms, params, manifest["budget"])

    # ------------------------------------------------------------------
    # 산출물
    # ------------------------------------------------------------------

    def path(self, name: str) -> str:
        return os.path.join(self.config.output_dir, name)

    def _write(self, name: str, payload: Dict[str, Any]) -> str:
        path = write_json(self.path(name), {"config": self.config.echo(), **payload})
        logger.info(f"✅ 저장: {path}")
        return path

    def build_nets(self) -> str:
        c = self.config
        nets = Parallel(n_jobs=settings.NEWTFRAME_THREADS, prefer="threads")(
            delayed(build_maximal_net)(c.d, j, c.gamma) for j in range(c.J + 1)
        )
        return self._write("nets.json", {"levels": [net.to_json() for net in nets]})

    def build_cubature(self) -> str:
        levels = []
        for rule in self.frame.rules:
            payload = rule.to_json()
            payload["residual"] = certify_exactness(rule)
            payload["weight_constant"] = rule.weight_constant()
            levels.append(payload)
        return self._write("cubature.json", {"levels": levels})

    def build_needlets(self) -> str:
        return self._write("needlets.json", self.frame.manifest())

    def build_theta(self) -> str:
        family = self.family
        plans = [
            {
                "j": j,
                "t": plan.t,
                "discrepancy": plan.discrepancy,
                "eps": plan.F.eps,
                "kappa": plan.F.kappa,
                "b": plan.F.b.tolist(),
                "r_xi": plan.r_xi,
                "stencil": len(plan.stencil),
                "Z_nodes": len(plan.Z),
            }
            for j, plan in sorted(family.plans.items())
        ]
        write_json(self.path("theta_atoms.json"), {"config": self.config.echo(), "atoms": [a.to_json() for a in family.atoms]})
        counts = family.pole_counts()
        return self._write(
            "theta.json",
            {"budget": family.budget, "params": family.params.model_dump(), "levels": plans, "max_poles": int(counts.max()), "total_poles": int(counts.sum())},
        )

    def load_atoms(self) -> List[NewtonianAtom]:
        return [NewtonianAtom.from_json(a) for a in self._read("theta_atoms.json")["atoms"]]

    def sections(self, dump: bool = True) -> Dict[str, OperatorSection]:
        sections = build_sections(self.frame.analysis_matrix(), self.theta_matrix(), self.frame.index)
        sections["H"] = self.perturbed.h_section()
        if dump:
            for tag, section in sections.items():
                section.dump_csv(self.path(f"section_{tag}.csv"), self.config.echo(), threshold=1e-14)
        return sections

    def d_fitted_constant(self) -> float:
        omega = omega_matrix(self.frame.index, AlmostDiagParams(K=self.config.K, M=self.config.M))
        D = build_sections(self.frame.analysis_matrix(), self.theta_matrix(), self.frame.index)["D"]
        return D.fitted_constant(omega) / self.family.params.gamma0

    # ------------------------------------------------------------------
    # 계수 / 근사 / 노름
    # ------------------------------------------------------------------

    def coefficients(self, f: SHExpansion) -> str:
        coeffs = self.perturbed.dual_coefficients(f, self.config.neumann_tol)
        return write_csv(self.path("dual_coefficients.csv"), coeffs.rows(), self.config.echo())

    def atom_norms(self) -> np.ndarray:
        """‖θ_ξ‖_p, p 는 설정값 (극점 합 직접 평가)"""
        rule = product_rule(self.config.d, max(4 * self.frame.band_limit, 16))
        return self.family.lp_norms(self.config.p, rule)

    def approximate(self, f: SHExpansion, n: int) -> Approximant:
        c = self.config
        norms = self.atom_norms()
        approx, error = greedy_nterm(
            f, n, self.perturbed, self.theta_matrix(), norms, SmoothnessTriple(s=0.0, p=c.p, q=c.q),
            cutoff=self.cutoff, family=self.family, tol=c.neumann_tol,
        )
        self._write("approximant.json", {**approx.to_json(self.frame.index), "error": error, "accounting": approx.validate_terms(self.family.budget)})
        logger.info(f"✅ n={n} 근사 오차 {error:.3e}, 뉴턴 항 {approx.n_newton_terms}")
        return approx

    def rates(self, kind: str = "F") -> Dict[str, Any]:
        c = self.config
        q = c.p if kind == "B" else c.q
        n_grid = [n for n in c.n_grid if n <= len(self.frame)]
        table, summary = rate_experiment(
            self.perturbed, self.theta_matrix(), c.s, c.p, q, n_grid, list(range(c.seed, c.seed + c.seeds)), kind, self.cutoff, c.neumann_tol,
            atom_norms=self.atom_norms(),
        )
        write_csv(self.path(f"rates_{kind}.csv"), table.to_dict("records"), c.echo())
        self._write(f"rates_{kind}.json", {"summary": summary})
        return summary

    def norms(self, f: SHExpansion) -> str:
        c = self.config
        coeffs = self.perturbed.dual_coefficients(f, c.neumann_tol)
        triples = [SmoothnessTriple(s=c.s, p=c.p, q=c.q), SmoothnessTriple(s=0.0, p=2.0, q=2.0)]
        rows = norm_rows(f, coeffs, triples, self.cutoff)
        return write_csv(self.path("norms.csv"), rows, {**c.echo(), "admissible": c.admissible()})
