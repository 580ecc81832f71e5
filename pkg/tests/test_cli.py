import numpy as np
import orjson
import pytest
import typer
from typer.testing import CliRunner

import main
from main import app
from models.config import RunConfig
from services.newton import build_theta_family
from services.pipeline import FramePipeline
from services.zonal import SHExpansion
from utils.errors import (
    BCoefficientFitError,
    CubatureInfeasibleError,
    DomainError,
    NonContractiveError,
    PoleBudgetError,
    TStepError,
    VerificationError,
)
from utils.io import write_json

runner = CliRunner()


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def _out(workdir, name="run"):
    return f"output_dir={workdir / name}"


def test_build_net_is_deterministic(workdir):
    args = ["build", "net", "--set", "d=2", "--set", "J=3", "--set", _out(workdir)]
    first = runner.invoke(app, args)
    assert first.exit_code == 0, first.output
    path = workdir / "run" / "nets.json"
    payload = orjson.loads(path.read_bytes())
    assert payload["config"]["J"] == 3
    assert len(payload["levels"]) == 4
    before = path.read_bytes()
    assert runner.invoke(app, args).exit_code == 0
    assert path.read_bytes() == before


def test_config_file_and_overrides(workdir):
    cfg = workdir / "run.cfg"
    cfg.write_text(f"d = 2\nJ = 2\n{_out(workdir, 'fromfile')}\n", encoding="utf-8")
    result = runner.invoke(app, ["build", "needlets", "--config", str(cfg), "--set", "J=3"])
    assert result.exit_code == 0, result.output
    manifest = orjson.loads((workdir / "fromfile" / "needlets.json").read_bytes())
    assert manifest["J"] == 3


@pytest.mark.parametrize("override", ["K=3", "gamma1=10", "d=7", "nonsense=1"])
def test_invalid_config_exits_2(workdir, override):
    result = runner.invoke(app, ["build", "net", "--set", override, "--set", _out(workdir)])
    assert result.exit_code == 2
    assert not (workdir / "run" / "nets.json").exists()


def test_empty_verify_passes(workdir):
    result = runner.invoke(app, ["verify", "--set", _out(workdir)])
    assert result.exit_code == 0, result.output
    report = orjson.loads((workdir / "run" / "verify.json").read_bytes())
    assert report["passed"] is True and report["suites"] == {}


def test_verify_cheap_suites(workdir):
    assert runner.invoke(app, ["build", "cubature", "--set", "d=2", "--set", "J=3", "--set", _out(workdir)]).exit_code == 0
    args = ["verify", "--suite", "cutoff", "--suite", "cubature", "--suite", "reconstruction", "--set", "d=2", "--set", "J=3", "--set", _out(workdir)]
    result = runner.invoke(app, args)
    assert result.exit_code == 0, result.output
    report = orjson.loads((workdir / "run" / "verify.json").read_bytes())
    assert set(report["suites"]) == {"cutoff", "cubature", "reconstruction"}


@pytest.mark.parametrize("suite", ["cubature", "D", "moments"])
def test_verify_without_artifacts_exits_2(workdir, suite):
    result = runner.invoke(app, ["verify", "--suite", suite, "--set", "d=2", "--set", "J=3", "--set", _out(workdir)])
    assert result.exit_code == 2


def test_commands_without_artifacts_exit_2(workdir):
    f = write_json(str(workdir / "f.json"), SHExpansion.random(2, 4, np.random.default_rng(0)).to_json())
    for args in (["coeffs", "--f", f], ["approx", "--f", f, "--n", "2"], ["norms", "--f", f], ["rates"]):
        result = runner.invoke(app, [*args, "--set", "d=2", "--set", "J=3", "--set", _out(workdir)])
        assert result.exit_code == 2, args
    assert not (workdir / "run" / "dual_coefficients.csv").exists()


def test_verify_rejects_artifacts_of_other_config(workdir):
    assert runner.invoke(app, ["build", "cubature", "--set", "d=2", "--set", "J=3", "--set", _out(workdir)]).exit_code == 0
    result = runner.invoke(app, ["verify", "--suite", "cubature", "--set", "d=2", "--set", "J=2", "--set", _out(workdir)])
    assert result.exit_code == 2


def _write_theta(workdir, **update):
    """d=2, J=3 cubature / θ 산출물 (고정 t, 상수 덮어쓰기 가능)"""
    pipe = FramePipeline(RunConfig(d=2, J=3, output_dir=str(workdir / "run")))
    pipe._family = build_theta_family(pipe.frame, pipe.params.model_copy(update=update), t_override=1e-3)
    pipe.build_cubature()
    pipe.build_theta()
    return pipe


def test_verify_reads_theta_artifacts(workdir):
    _write_theta(workdir)
    result = runner.invoke(app, ["verify", "--suite", "D", "--set", "d=2", "--set", "J=3", "--set", _out(workdir)])
    assert result.exit_code in (0, 4), result.output
    report = orjson.loads((workdir / "run" / "verify.json").read_bytes())
    assert np.isfinite(report["suites"]["D"]["fitted_constant"])


def test_verify_moments_fails_with_inflated_gamma1(workdir):
    _write_theta(workdir, gamma1=10.0)
    result = runner.invoke(app, ["verify", "--suite", "moments", "--set", "d=2", "--set", "J=3", "--set", _out(workdir)])
    assert result.exit_code == 4
    report = orjson.loads((workdir / "run" / "verify.json").read_bytes())
    assert report["suites"]["moments"]["passed"] is False


def test_missing_config_file_exits_2(workdir):
    result = runner.invoke(app, ["build", "net", "--config", str(workdir / "absent.cfg"), "--set", _out(workdir)])
    assert result.exit_code == 2


def test_verify_unknown_suite_exits_2(workdir):
    assert runner.invoke(app, ["verify", "--suite", "bogus", "--set", _out(workdir)]).exit_code == 2


def test_approx_rejects_zero_terms(workdir):
    assert runner.invoke(app, ["approx", "--f", "f.json", "--n", "0"]).exit_code == 2


def test_missing_function_file_exits_2(workdir):
    result = runner.invoke(app, ["coeffs", "--f", str(workdir / "missing.json"), "--set", _out(workdir)])
    assert result.exit_code == 2


def test_rates_unknown_kind(workdir):
    assert runner.invoke(app, ["rates", "--kind", "Q"]).exit_code == 2


@pytest.mark.parametrize(
    "error,code",
    [
        (DomainError("bad"), 2),
        (CubatureInfeasibleError(1e-3, 4), 3),
        (BCoefficientFitError(1e-3, 3, 2), 3),
        (TStepError(1.0, 1e-8, 2), 3),
        (PoleBudgetError({"total": 10, "budget": 5}), 3),
        (NonContractiveError(1.2), 3),
        (VerificationError({"passed": False}), 4),
    ],
)
def test_guard_exit_codes(error, code):
    def fail():
        raise error

    with pytest.raises(typer.Exit) as info:
        main._guard(fail)
    assert info.value.exit_code == code


def test_no_args_shows_help():
    result = runner.invoke(app, [])
    assert "build" in result.output
