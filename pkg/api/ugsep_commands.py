"""
UG-Sep 指令處理函數
每個指令回傳 (結束碼, JSON 報告)：0 成功、1 領域失敗、2 用法或配置錯誤
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError

from models.report_models import SCHEMA_VERSION, VerifyReport
from models.ugsep_models import QuantScheme, RunConfig
from services.checkpoint import load_checkpoint, save_checkpoint
from services.errors import ConfigurationError, QuantizationError, TrainingError, UGSepError
from services.model import build_model, quantize_model
from services.quant import footprint
from services.serving import bench, verify_equivalence
from services.synthetic import ablate_compensation, ablate_ratios, evaluate, format_table, generate, train
from services.ugsep import verify_separability

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

SEED_ENV = "UGSEP_SEED"
CHECKPOINT_NAME = "model.ugsep"

CommandResult = Tuple[int, Dict[str, Any]]


def load_run_config(path: Optional[str], seed: Optional[int] = None) -> RunConfig:
    """
    讀取 JSON 配置；種子優先順序：--seed > UGSEP_SEED > 配置檔
    未指定路徑時使用預設配置
    """
    if path is None:
        config = RunConfig()
    else:
        config_path = Path(path)
        if not config_path.is_file():
            raise FileNotFoundError(f"找不到配置檔: {config_path}")
        config = RunConfig.model_validate_json(config_path.read_text(encoding="utf-8"))

    env_seed = os.getenv(SEED_ENV)
    if seed is None and env_seed:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} 必須為整數: {env_seed}")
    if seed is not None:
        config = config.reseeded(seed)
    return config


def _dump(report: BaseModel) -> Dict[str, Any]:
    return json.loads(report.model_dump_json(by_alias=True))


def _write(out_dir: Optional[str], name: str, payload: Any) -> None:
    if out_dir is None:
        return
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, str):
        path.write_text(payload, encoding="utf-8")
    else:
        path.write_text(json.dumps(payload, indent=2, ensure_ascii=False), encoding="utf-8")
    logger.info("已寫入 %s", path)


def _error(code: int, message: str, **extra) -> CommandResult:
    return code, {"schema_version": SCHEMA_VERSION, "error": message, **extra}


def handle_errors(command: Callable[..., CommandResult]) -> Callable[..., CommandResult]:
    """在邊界將例外轉為結束碼"""
    def wrapper(*args, **kwargs) -> CommandResult:
        try:
            return command(*args, **kwargs)
        except FileNotFoundError as e:
            return _error(EXIT_USAGE, str(e))
        except ValidationError as e:
            return _error(EXIT_USAGE, f"配置驗證失敗: {e}")
        except ConfigurationError as e:
            return _error(EXIT_USAGE, f"配置錯誤: {e}")
        except TrainingError as e:
            logger.error("訓練發散於第 %d 步", e.step)
            return _error(EXIT_FAILURE, str(e), step=e.step)
        except UGSepError as e:
            return _error(EXIT_FAILURE, str(e))
    wrapper.__name__ = command.__name__
    wrapper.__doc__ = command.__doc__
    return wrapper


@handle_errors
def cmd_verify(config_path: Optional[str], out_dir: Optional[str] = None, seed: Optional[int] = None) -> CommandResult:
    """可分離性 (預設 100 次試驗) + 快取/完整服務等價性 (預設 50 個請求)"""
    config = load_run_config(config_path, seed)
    model = build_model(config.model)
    if not model.is_ugsep:
        raise ConfigurationError("verify 需要 ugsep 變體")
    separability = verify_separability(model.blocks, model.partitions[0], config.verify.trials, config.seed)
    equivalence = verify_equivalence(
        model, config.verify.requests, config.seed, config.verify.max_users, config.verify.max_candidates,
    )
    report = VerifyReport(
        passed=separability.passed and equivalence.passed,
        separability=separability,
        equivalence=equivalence,
    )
    payload = _dump(report)
    _write(out_dir, "verify.json", payload)
    return (EXIT_OK if report.passed else EXIT_FAILURE), payload


@handle_errors
def cmd_train(config_path: Optional[str], out_dir: Optional[str] = None, seed: Optional[int] = None) -> CommandResult:
    """訓練並寫出檢查點與指標軌跡"""
    config = load_run_config(config_path, seed)
    dataset = generate(config.data)
    model, result = train(build_model(config.model), dataset, config.train)
    payload = _dump(result)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / CHECKPOINT_NAME, model)
    _write(out_dir, "train.json", payload)
    return EXIT_OK, payload


@handle_errors
def cmd_eval(config_path: Optional[str], checkpoint: str, seed: Optional[int] = None) -> CommandResult:
    """重新載入檢查點並計算合成測試集 AUC"""
    config = load_run_config(config_path, seed)
    model = load_checkpoint(checkpoint)
    test_auc = evaluate(model, generate(config.data))
    return EXIT_OK, {"schema_version": SCHEMA_VERSION, "checkpoint": str(checkpoint), "test_auc": test_auc}


@handle_errors
def cmd_ablate(config_path: Optional[str], selector: str = "all", out_dir: Optional[str] = None,
               seed: Optional[int] = None, workers: int = 1) -> CommandResult:
    """比例消融與補償消融；輸出 JSON 與對齊文字表格"""
    if selector not in ("ratios", "compensation", "all"):
        raise ConfigurationError(f"未知的消融選擇: {selector}")
    config = load_run_config(config_path, seed)
    dataset = generate(config.data)
    tables = {}
    if selector in ("ratios", "all"):
        tables["ratios"] = ablate_ratios(
            dataset, config.ablation.ratios, config.train, config.model, config.ablation.seeds, workers)
    if selector in ("compensation", "all"):
        tables["compensation"] = ablate_compensation(
            dataset, config.ablation.compensation_ratios, config.train, config.model, config.ablation.seeds, workers)

    payload = {"schema_version": SCHEMA_VERSION, "tables": {k: _dump(v) for k, v in tables.items()}}
    for kind, table in tables.items():
        _write(out_dir, f"ablation_{kind}.json", _dump(table))
        _write(out_dir, f"ablation_{kind}.txt", format_table(table) + "\n")
    return EXIT_OK, payload


@handle_errors
def cmd_bench(config_path: Optional[str], out_dir: Optional[str] = None, seed: Optional[int] = None,
              flops_only: bool = False) -> CommandResult:
    """naive / cached / cached_w8a16 乘加帳本與牆鐘時間"""
    config = load_run_config(config_path, seed)
    model_ref = config.serve.workload.model_ref
    model = load_checkpoint(model_ref) if model_ref else build_model(config.model)
    report = bench(model, config.serve.workload, config.serve.repetitions, config.serve.quant, flops_only)
    payload = _dump(report)
    _write(out_dir, "bench.json", payload)
    return EXIT_OK, payload


@handle_errors
def cmd_quantize(checkpoint_in: str, checkpoint_out: str, scheme: Optional[QuantScheme] = None,
                 seed: int = 0) -> CommandResult:
    """f32/f64 檢查點 → q8 檢查點；回報每個矩陣的位元組數、往返誤差與分數漂移"""
    scheme = scheme or QuantScheme()
    model = load_checkpoint(checkpoint_in)
    if model.quantized:
        raise QuantizationError(f"檢查點已經量化: {checkpoint_in}")
    originals = {name: value for name, value in model.named_tensors().items() if isinstance(value, np.ndarray)}
    quantized = quantize_model(model, scheme)

    rng = np.random.default_rng(seed)
    batch = rng.standard_normal((64, model.config.T, model.config.D)).astype(np.dtype(model.config.dtype))
    drift = float(np.max(np.abs(quantized.score(batch) - model.score(batch))))

    report = footprint(quantized.params, scheme, originals)
    report.max_score_drift = drift
    save_checkpoint(checkpoint_out, quantized)
    logger.info("量化完成: ratio=%.4f 最大分數漂移 %.3e", report.ratio or 0.0, drift)
    return EXIT_OK, _dump(report)
