"""
合成 CTR 資料、動量 SGD 訓練、AUC 評估與消融實驗
教師含 U×G 雙線性交互項，遮罩因此可能損失資訊，補償效果才可量測
"""
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit
from sklearn.metrics import roc_auc_score

from models.data_models import SyntheticDataset
from models.report_models import AblationRow, AblationTable, TrainResult
from models.ugsep_models import DataConfig, ModelConfig, TrainConfig, parse_ratio
from services.errors import ConfigurationError, GenerationError, MetricError, TrainingError
from services.model import RankModel, build_model

logger = logging.getLogger(__name__)

HASH_BUCKETS = 10_000


def _standardize(x: np.ndarray) -> np.ndarray:
    std = np.std(x)
    return (x - np.mean(x)) / std if std > 0 else np.zeros_like(x)


def _split_mask(num_examples: int, train_fraction: float) -> np.ndarray:
    """依樣本索引的雜湊切分訓練/測試集"""
    buckets = np.array([
        int.from_bytes(hashlib.blake2b(str(i).encode(), digest_size=8).digest(), "little") % HASH_BUCKETS
        for i in range(num_examples)
    ])
    return buckets < int(round(train_fraction * HASH_BUCKETS))


def generate(cfg: DataConfig) -> SyntheticDataset:
    """
    使用者與候選 token 取自種子化的標準常態分佈
    教師 logit = signal_scale · 標準化(w·交互項 + (1−w)·線性項) / temperature + bias
    bias 以 brentq 校準到 base_rate，標籤為 Bernoulli 抽樣
    """
    rng = np.random.default_rng(cfg.seed)
    users, k = cfg.num_users, cfg.candidates_per_user
    user_tokens = rng.standard_normal((users, cfg.n, cfg.D))
    candidate_tokens = rng.standard_normal((users, k, cfg.m, cfg.D))

    scale = 1.0 / np.sqrt(cfg.D)
    interaction = rng.standard_normal((cfg.D, cfg.D)) * scale
    w_user = rng.standard_normal(cfg.D) * scale
    w_item = rng.standard_normal(cfg.D) * scale

    pooled_g = candidate_tokens.mean(axis=2)
    if cfg.n > 0:
        pooled_u = user_tokens.mean(axis=1)
    else:
        pooled_u = np.zeros((users, cfg.D))
    bilinear = np.einsum('ud,de,uke->uk', pooled_u, interaction, pooled_g)
    linear = (pooled_u @ w_user)[:, None] + pooled_g @ w_item
    mixed = cfg.interaction_weight * _standardize(bilinear) + (1.0 - cfg.interaction_weight) * _standardize(linear)
    signal = (cfg.signal_scale * _standardize(mixed) / cfg.temperature).reshape(-1)

    bias = float(brentq(lambda b: float(np.mean(expit(signal + b))) - cfg.base_rate, -60.0, 60.0))
    logits = signal + bias
    labels = (rng.random(logits.shape) < expit(logits)).astype(np.int8)
    if labels.min() == labels.max():
        raise GenerationError(f"標籤全部為 {int(labels[0])}，請重新校準 base_rate 或 temperature")

    dataset = SyntheticDataset(
        config=cfg,
        user_tokens=user_tokens,
        candidate_tokens=candidate_tokens,
        teacher_logits=logits,
        labels=labels,
        train_mask=_split_mask(labels.shape[0], cfg.train_fraction),
        bias=bias,
    )
    logger.info(
        "合成資料: %d 樣本, 正樣本比例 %.3f, 訓練 %d / 測試 %d",
        dataset.num_examples, float(labels.mean()), len(dataset.train_indices), len(dataset.test_indices),
    )
    return dataset


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """隨機正樣本排在隨機負樣本之前的機率，平手計 ½"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(f"scores {scores.shape} 與 labels {labels.shape} 形狀不一致")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores 含非有限值")
    positive = labels == 1
    num_pos, num_neg = int(positive.sum()), int((~positive).sum())
    if num_pos == 0 or num_neg == 0:
        raise MetricError("AUC 需要至少一個正樣本與一個負樣本")
    return float(roc_auc_score(positive.astype(np.int8), scores))


def teacher_auc(dataset: SyntheticDataset) -> float:
    return auc(dataset.teacher_logits, dataset.labels)


def evaluate(model: RankModel, dataset: SyntheticDataset, indices: Optional[np.ndarray] = None) -> float:
    """測試集 AUC"""
    indices = dataset.test_indices if indices is None else indices
    x = dataset.features(indices).astype(np.dtype(model.config.dtype))
    return auc(model.logits(x), dataset.labels[indices])


def _check_shapes(model: RankModel, dataset: SyntheticDataset) -> None:
    data, cfg = dataset.config, model.config
    if (data.n, data.m, data.D) != (cfg.n, cfg.m, cfg.D):
        raise ConfigurationError(
            f"資料 (n={data.n}, m={data.m}, D={data.D}) 與模型 (n={cfg.n}, m={cfg.m}, D={cfg.D}) 不一致"
        )


def train(model: RankModel, dataset: SyntheticDataset, cfg: TrainConfig) -> Tuple[RankModel, TrainResult]:
    """
    讀出 logit 上的邏輯斯損失，動量 SGD：v ← μ·v − lr·g，θ ← θ + v
    loss 非有限時拋出 TrainingError (含步數)
    """
    _check_shapes(model, dataset)
    if model.quantized:
        raise ConfigurationError("量化模型無法訓練")
    rng = np.random.default_rng(cfg.seed)
    dtype = np.dtype(model.config.dtype)
    train_idx = dataset.train_indices
    batch_size = min(cfg.batch_size, len(train_idx))
    initial_auc = evaluate(model, dataset)

    params = model.named_tensors()
    velocity = {name: np.zeros_like(value) for name, value in params.items()}
    loss_trace: List[float] = []

    for step in range(cfg.steps):
        batch = rng.choice(train_idx, size=batch_size, replace=False)
        x = dataset.features(batch).astype(dtype)
        y = dataset.labels[batch].astype(dtype)
        pair = model.logits_grad(x)
        z = pair.value
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        if not np.isfinite(loss):
            raise TrainingError(f"第 {step} 步 loss 非有限: {loss}", step=step)
        _, grads = pair.backward((expit(z) - y) / batch_size)

        for name, value in params.items():
            velocity[name] = cfg.momentum * velocity[name] - cfg.lr * grads[name]
            params[name] = value + velocity[name]
        model = model.with_params(model.params.replace_tensors(params))

        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            loss_trace.append(loss)
            logger.info("step %d loss %.5f", step, loss)

    test_auc = evaluate(model, dataset)
    logger.info("訓練完成: variant=%s 初始 AUC %.4f → 測試 AUC %.4f", model.config.variant, initial_auc, test_auc)
    return model, TrainResult(
        variant=model.config.variant,
        steps=cfg.steps,
        loss_trace=loss_trace,
        initial_test_auc=initial_auc,
        test_auc=test_auc,
    )


def _run(dataset: SyntheticDataset, model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int) -> float:
    model = build_model(model_cfg.model_copy(update={"init_seed": seed}))
    _, result = train(model, dataset, train_cfg.model_copy(update={"seed": seed}))
    return result.test_auc


def _variant(model_cfg: ModelConfig, ratio: Optional[str], compensation: bool) -> ModelConfig:
    """由基礎配置衍生變體，重新走驗證器"""
    data = model_cfg.model_dump()
    if ratio is None:
        data.update(variant="baseline", ratio=None, compensation=False, residual="auto")
    else:
        data.update(variant="ugsep", ratio=ratio, compensation=compensation, residual="auto")
    return ModelConfig.model_validate(data)


def _median_aucs(dataset: SyntheticDataset, variants: Dict[Tuple, ModelConfig], train_cfg: TrainConfig,
                 seeds: Sequence[int], workers: int) -> Dict[Tuple, List[float]]:
    jobs = [(key, seed) for key in variants for seed in seeds]

    def run(job):
        key, seed = job
        return _run(dataset, variants[key], train_cfg, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    aucs: Dict[Tuple, List[float]] = {key: [] for key in variants}
    for (key, _), value in zip(jobs, results):
        aucs[key].append(value)
    return aucs


def _table(kind: str, aucs: Dict[Tuple, List[float]]) -> AblationTable:
    labels = {key: f"{key[0] or 'baseline'}|{int(key[1])}" for key in aucs}
    medians = pd.DataFrame({labels[key]: values for key, values in aucs.items()}).median()
    baseline_auc = float(medians[labels[(None, False)]])
    rows = [
        AblationRow(
            variant="baseline" if ratio is None else "ugsep",
            ratio=ratio or "-",
            compensation=comp,
            auc=float(medians[labels[(ratio, comp)]]),
            delta_auc=float(medians[labels[(ratio, comp)]]) - baseline_auc,
            seed_aucs=aucs[(ratio, comp)],
        )
        for ratio, comp in aucs
    ]
    return AblationTable(kind=kind, baseline_auc=baseline_auc, rows=rows)


def ablate_ratios(dataset: SyntheticDataset, ratios: Sequence[str], train_cfg: TrainConfig,
                  model_cfg: Optional[ModelConfig] = None, seeds: Sequence[int] = (0,),
                  workers: int = 1) -> AblationTable:
    """每個比例 (補償關閉) 訓練一個模型，加上 baseline；ΔAUC 為種子中位數相對 baseline 的差"""
    model_cfg = model_cfg or ModelConfig()
    variants = {(None, False): _variant(model_cfg, None, False)}
    for ratio in ratios:
        variants[(ratio, False)] = _variant(model_cfg, ratio, False)
    return _table("ratios", _median_aucs(dataset, variants, train_cfg, seeds, workers))


def ablate_compensation(dataset: SyntheticDataset, ratios: Sequence[str], train_cfg: TrainConfig,
                        model_cfg: Optional[ModelConfig] = None, seeds: Sequence[int] = (0, 1, 2, 3, 4),
                        workers: int = 1) -> AblationTable:
    """每個比例 (c_u >= c_g) 補償開/關成對訓練"""
    model_cfg = model_cfg or ModelConfig()
    variants = {(None, False): _variant(model_cfg, None, False)}
    for ratio in ratios:
        c_u, c_g = parse_ratio(ratio, model_cfg.H)
        if c_u < c_g:
            raise ConfigurationError(f"補償消融要求 c_u >= c_g: {ratio}")
        variants[(ratio, False)] = _variant(model_cfg, ratio, False)
        variants[(ratio, True)] = _variant(model_cfg, ratio, True)
    return _table("compensation", _median_aucs(dataset, variants, train_cfg, seeds, workers))


def format_table(table: AblationTable) -> str:
    """對齊欄位的純文字表格"""
    frame = pd.DataFrame([{
        "U:G": row.ratio,
        "Info Compensation": ("Y" if row.compensation else "N") if row.variant == "ugsep" else "-",
        "AUC": f"{row.auc:.4f}",
        "ΔAUC": f"{row.delta_auc * 100:+.2f}%",
    } for row in table.rows])
    return frame.to_string(index=False)
