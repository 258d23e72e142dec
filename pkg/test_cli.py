"""
命令列測試：結束碼、JSON 報告與輸出檔案
"""
import json
from pathlib import Path

import pytest

from api.ugsep_commands import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, load_run_config
from app import main
from models.ugsep_models import (
    AblationConfig, CandidateSizeSpec, DataConfig, ModelConfig, RunConfig, ServeConfig, TrainConfig, VerifyConfig,
    WorkloadSpec,
)


def _small_config(**model_overrides) -> RunConfig:
    return RunConfig(
        model=ModelConfig(n=2, m=2, D=8, H=4, d_hidden=6, num_blocks=2, ratio="1:1", **model_overrides),
        data=DataConfig(num_users=40, candidates_per_user=5, n=2, m=2, D=8),
        train=TrainConfig(steps=5, batch_size=16, log_every=2),
        serve=ServeConfig(workload=WorkloadSpec(M=2, candidate_size=CandidateSizeSpec(value=3)), repetitions=3),
        verify=VerifyConfig(trials=10, requests=5, max_users=3, max_candidates=4),
        ablation=AblationConfig(ratios=["1:1", "3:1"], compensation_ratios=["1:1"], seeds=[0]),
    )


@pytest.fixture
def config_file(tmp_path):
    def write(config: RunConfig, name: str = "run.json"):
        path = tmp_path / name
        path.write_text(config.model_dump_json(), encoding="utf-8")
        return str(path)
    return write


def _run(capsys, *argv):
    code = main(list(argv))
    return code, json.loads(capsys.readouterr().out)


def test_verify_passes(capsys, config_file, tmp_path):
    out = tmp_path / "verify"
    code, payload = _run(capsys, "verify", "--config", config_file(_small_config()), "--out", str(out))
    assert code == EXIT_OK
    assert payload["passed"] is True
    assert all(block["pass"] for block in payload["separability"]["blocks"])
    assert payload["equivalence"]["requests"] == 5
    assert json.loads((out / "verify.json").read_text(encoding="utf-8")) == payload


def test_verify_fault_injection_fails(capsys, config_file):
    code, payload = _run(capsys, "verify", "--config", config_file(_small_config(fault_inject_mask=True)))
    assert code == EXIT_FAILURE
    assert payload["passed"] is False
    assert payload["separability"]["blocks"][0]["first_divergence"] is not None


def test_missing_config_is_usage_error(capsys, tmp_path):
    missing = tmp_path / "nope.json"
    code, payload = _run(capsys, "verify", "--config", str(missing))
    assert code == EXIT_USAGE
    assert "nope.json" in payload["error"]


def test_invalid_config_is_usage_error(capsys, tmp_path):
    path = tmp_path / "bad.json"
    data = json.loads(_small_config().model_dump_json())
    data["model"]["D"] = 7
    path.write_text(json.dumps(data), encoding="utf-8")
    code, payload = _run(capsys, "train", "--config", str(path))
    assert code == EXIT_USAGE
    assert "error" in payload


def test_train_then_eval_reproduces_auc(capsys, config_file, tmp_path):
    config = config_file(_small_config())
    out = tmp_path / "run"
    code, trained = _run(capsys, "train", "--config", config, "--out", str(out))
    assert code == EXIT_OK
    assert (out / "model.ugsep").is_file() and (out / "train.json").is_file()
    assert trained["steps"] == 5

    code, evaluated = _run(capsys, "eval", "--config", config, "--checkpoint", str(out / "model.ugsep"))
    assert code == EXIT_OK
    assert evaluated["test_auc"] == trained["test_auc"]


def test_eval_missing_checkpoint(capsys, config_file, tmp_path):
    code, payload = _run(capsys, "eval", "--config", config_file(_small_config()),
                         "--checkpoint", str(tmp_path / "missing.ugsep"))
    assert code == EXIT_USAGE
    assert "missing.ugsep" in payload["error"]


def test_ablate_writes_tables(capsys, config_file, tmp_path):
    out = tmp_path / "ablate"
    code, payload = _run(capsys, "ablate", "--config", config_file(_small_config()), "--which", "all",
                         "--out", str(out))
    assert code == EXIT_OK
    assert len(payload["tables"]["ratios"]["rows"]) == 3
    assert len(payload["tables"]["compensation"]["rows"]) == 3
    assert "U:G" in (out / "ablation_ratios.txt").read_text(encoding="utf-8")


def test_bench_flops_only_is_reproducible(capsys, config_file):
    config = config_file(_small_config())
    code, first = _run(capsys, "bench", "--config", config, "--flops-only")
    _, second = _run(capsys, "bench", "--config", config, "--flops-only")
    assert code == EXIT_OK
    assert first == second
    assert [mode["mode"] for mode in first["modes"]] == ["naive", "cached", "cached_w8a16"]
    assert first["workload"]["N"] == 6


def test_quantize_checkpoint(capsys, config_file, tmp_path):
    out = tmp_path / "run"
    _run(capsys, "train", "--config", config_file(_small_config()), "--out", str(out))
    q8 = tmp_path / "q8.ugsep"
    code, report = _run(capsys, "quantize", "--checkpoint", str(out / "model.ugsep"), "--out", str(q8))
    assert code == EXIT_OK
    assert q8.is_file()
    assert report["bytes_w8a16"] < report["bytes_16bit"]
    assert report["max_score_drift"] is not None
    assert all(m["max_roundtrip_error"] is not None for m in report["matrices"])

    code, payload = _run(capsys, "quantize", "--checkpoint", str(q8), "--out", str(tmp_path / "again.ugsep"))
    assert code == EXIT_FAILURE
    assert "error" in payload


def test_seed_precedence(monkeypatch, config_file):
    path = config_file(_small_config())
    monkeypatch.delenv("UGSEP_SEED", raising=False)
    assert load_run_config(path).seed == 0
    monkeypatch.setenv("UGSEP_SEED", "7")
    config = load_run_config(path)
    assert (config.seed, config.model.init_seed, config.data.seed, config.train.seed) == (7, 7, 7, 7)
    assert load_run_config(path, seed=3).seed == 3


def test_bad_seed_env_is_usage_error(capsys, monkeypatch, config_file):
    monkeypatch.setenv("UGSEP_SEED", "abc")
    code, payload = _run(capsys, "verify", "--config", config_file(_small_config()))
    assert code == EXIT_USAGE
    assert "UGSEP_SEED" in payload["error"]


def _run_text(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr().out


def test_verify_output_is_reproducible(capsys, config_file):
    config = config_file(_small_config())
    code, first = _run_text(capsys, "verify", "--config", config)
    _, second = _run_text(capsys, "verify", "--config", config)
    assert code == EXIT_OK
    assert first == second


def test_ablate_output_is_reproducible(capsys, config_file, tmp_path):
    config = config_file(_small_config())
    code, first = _run_text(capsys, "ablate", "--config", config, "--out", str(tmp_path / "a"))
    _, second = _run_text(capsys, "ablate", "--config", config, "--workers", "2", "--out", str(tmp_path / "b"))
    assert code == EXIT_OK
    assert first == second
    for name in ("ablation_ratios.json", "ablation_ratios.txt", "ablation_compensation.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_ablate_three_ratios_emits_four_rows(capsys, config_file):
    config = RunConfig(
        model=ModelConfig(n=6, m=6, D=12, H=12, d_hidden=4, num_blocks=1),
        data=DataConfig(num_users=40, candidates_per_user=5, n=6, m=6, D=12),
        train=TrainConfig(steps=3, batch_size=16),
        ablation=AblationConfig(ratios=["1:2", "1:1", "3:1"], compensation_ratios=["3:1"], seeds=[0]),
    )
    code, payload = _run(capsys, "ablate", "--config", config_file(config), "--which", "ratios")
    assert code == EXIT_OK
    rows = payload["tables"]["ratios"]["rows"]
    assert [row["ratio"] for row in rows] == ["-", "1:2", "1:1", "3:1"]
    assert "compensation" not in payload["tables"]


@pytest.mark.parametrize("config", [RunConfig(), _small_config(compensation=True)], ids=["default", "small"])
def test_run_config_roundtrip(config, config_file, monkeypatch):
    monkeypatch.delenv("UGSEP_SEED", raising=False)
    assert RunConfig.model_validate_json(config.model_dump_json()) == config
    assert load_run_config(config_file(config)) == config


def test_default_config_file_roundtrip(monkeypatch):
    monkeypatch.delenv("UGSEP_SEED", raising=False)
    path = Path(__file__).parent / "configs" / "default.json"
    config = load_run_config(str(path))
    assert RunConfig.model_validate_json(config.model_dump_json()) == config
