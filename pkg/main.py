from typing import Callable, List, Optional, TypeVar

import typer
from pydantic import ValidationError

from models.config import RunConfig, load_config
from services.pipeline import FramePipeline
from services.verify import SUITES, run_suites
from services.zonal import SHExpansion
from utils.errors import (
    BCoefficientFitError,
    CubatureInfeasibleError,
    DomainError,
    MissingArtifactError,
    NonContractiveError,
    PoleBudgetError,
    TStepError,
    VerificationError,
)
from utils.io import read_json, write_json
from utils.logger import setup_logger

logger = setup_logger("CLI")

app = typer.Typer(help="Needlet and Newtonian-kernel frames on the sphere", no_args_is_help=True)
build_app = typer.Typer(help="Build and persist frame artifacts", no_args_is_help=True)
app.add_typer(build_app, name="build")

EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_VERIFICATION = 4

_INFEASIBLE = (CubatureInfeasibleError, BCoefficientFitError, TStepError, PoleBudgetError, NonContractiveError)

T = TypeVar("T")

ConfigOption = typer.Option(None, "--config", "-c", help="key = value 설정 파일")
SetOption = typer.Option([], "--set", "-s", help="key=value 오버라이드 (반복 가능)")


def _guard(action: Callable[[], T]) -> T:
    """도메인 예외 → 종료 코드"""
    try:
        return action()
    except (ValidationError, DomainError, MissingArtifactError) as e:
        logger.error(f"🚨 입력 검증 실패: {e}")
        raise typer.Exit(EXIT_VALIDATION)
    except _INFEASIBLE as e:
        logger.error(f"🚨 구성 불가: {e}")
        raise typer.Exit(EXIT_INFEASIBLE)
    except VerificationError as e:
        logger.error(f"🚨 검증 실패: {e}")
        raise typer.Exit(EXIT_VERIFICATION)


def _pipeline(config: Optional[str], overrides: List[str], from_artifacts: bool = False) -> FramePipeline:
    """from_artifacts: output_dir 의 cubature / θ 산출물을 읽음 (없으면 종료 코드 2)"""
    cfg: RunConfig = _guard(lambda: load_config(config, overrides))
    logger.info(f"🔍 설정: d={cfg.d}, J={cfg.J}, K={cfg.K}, M={cfg.M}, 출력={cfg.output_dir}")
    return FramePipeline(cfg, from_artifacts=from_artifacts)


def _load_function(path: str) -> SHExpansion:
    return _guard(lambda: SHExpansion.from_json(read_json(path)))


@build_app.command("net")
def build_net(config: Optional[str] = ConfigOption, overrides: List[str] = SetOption):
    """레벨별 최대 δ-네트"""
    pipe = _pipeline(config, overrides)
    typer.echo(_guard(pipe.build_nets))


@build_app.command("cubature")
def build_cubature(config: Optional[str] = ConfigOption, overrides: List[str] = SetOption):
    """Π_{2^{j+1}} 에 정확한 양수 가중치 규칙"""
    pipe = _pipeline(config, overrides)
    typer.echo(_guard(pipe.build_cubature))


@build_app.command("needlets")
def build_needlets(config: Optional[str] = ConfigOption, overrides: List[str] = SetOption):
    pipe = _pipeline(config, overrides)
    typer.echo(_guard(pipe.build_needlets))


@build_app.command("theta")
def build_theta(config: Optional[str] = ConfigOption, overrides: List[str] = SetOption):
    """θ 원자 극점 목록"""
    pipe = _pipeline(config, overrides)
    typer.echo(_guard(pipe.build_theta))


@app.command()
def verify(
    suite: List[str] = typer.Option([], "--suite", help=f"스위트 이름: {', '.join(SUITES)}"),
    all_suites: bool = typer.Option(False, "--all", help="모든 스위트 실행"),
    config: Optional[str] = ConfigOption,
    overrides: List[str] = SetOption,
):
    """불변식 스위트 실행, 실패 시 종료 코드 4"""
    pipe = _pipeline(config, overrides, from_artifacts=True)
    names = SUITES if all_suites else suite
    report = _guard(lambda: run_suites(pipe, names))
    path = write_json(pipe.path("verify.json"), report)
    typer.echo(path)

    def check() -> None:
        if not report["passed"]:
            raise VerificationError(report)

    _guard(check)


@app.command()
def coeffs(
    f: str = typer.Option(..., "--f", help="SHExpansion JSON 파일"),
    config: Optional[str] = ConfigOption,
    overrides: List[str] = SetOption,
):
    """쌍대 계수 ⟨f, θ̃_ξ⟩ CSV"""
    pipe = _pipeline(config, overrides, from_artifacts=True)
    expansion = _load_function(f)
    typer.echo(_guard(lambda: pipe.coefficients(expansion)))


@app.command()
def approx(
    f: str = typer.Option(..., "--f", help="SHExpansion JSON 파일"),
    n: int = typer.Option(..., "--n", min=1, help="항 수"),
    config: Optional[str] = ConfigOption,
    overrides: List[str] = SetOption,
):
    """탐욕적 n-항 근사 → approximant.json"""
    pipe = _pipeline(config, overrides, from_artifacts=True)
    expansion = _load_function(f)
    _guard(lambda: pipe.approximate(expansion, n))
    typer.echo(pipe.path("approximant.json"))


@app.command()
def rates(
    kind: str = typer.Option("F", "--kind", help="오차 공간: F (𝓕^{0q}_p) 또는 B (𝓑^{0p}_p)"),
    config: Optional[str] = ConfigOption,
    overrides: List[str] = SetOption,
):
    """수렴률 실험 CSV + 기울기 요약"""
    if kind not in ("F", "B"):
        logger.error(f"🚨 알 수 없는 kind: {kind}")
        raise typer.Exit(EXIT_VALIDATION)
    pipe = _pipeline(config, overrides, from_artifacts=True)
    summary = _guard(lambda: pipe.rates(kind))
    typer.echo(f"slope={summary['slope']:.4f} stderr={summary['stderr']:.4f} target={summary['target']:.4f}")


@app.command()
def norms(
    f: str = typer.Option(..., "--f", help="SHExpansion JSON 파일"),
    config: Optional[str] = ConfigOption,
    overrides: List[str] = SetOption,
):
    """수열 / 함수 공간 노름 보고서 CSV"""
    pipe = _pipeline(config, overrides, from_artifacts=True)
    expansion = _load_function(f)
    typer.echo(_guard(lambda: pipe.norms(expansion)))


if __name__ == "__main__":
    app()
