"""
排序模型：區塊堆疊 + 讀出頭 (平均池化 → 線性 → sigmoid)
baseline 變體堆疊 RankMixer 區塊；ugsep 變體堆疊 UG-Sep 區塊
"""
import logging
from typing import Dict, List, Optional, Union

import numpy as np
from scipy.special import expit

from models.param_models import ModelParams, ReadoutParams
from models.ugsep_models import BlockOptions, MixerConfig, ModelConfig, QuantScheme, UGPartition
from services.errors import ConfigurationError, DimensionError
from services.mixer import MixerBlock, init_mixer_block, prefix_grads
from services.numeric import GradPair, Tensor, matmul_grad, ordered_sum
from services.quant import is_quantized, linear, quantize_params
from services.ugsep import UGSepBlock, init_ugsep_block

logger = logging.getLogger(__name__)

Block = Union[MixerBlock, UGSepBlock]


def block_partitions(cfg: ModelConfig) -> List[UGPartition]:
    """第 0 個區塊 (n, m) → (c_u, c_g)；之後 (c_u, c_g) → (c_u, c_g)"""
    c_u, c_g = cfg.head_split()
    first = UGPartition(n=cfg.n, m=cfg.m, c_u=c_u, c_g=c_g)
    return [first] + [first.output_partition() for _ in range(cfg.num_blocks - 1)]


def block_options(cfg: ModelConfig, part: UGPartition) -> BlockOptions:
    residual = cfg.residual
    if residual == "auto":
        residual = "plain" if part.is_plain else "separated"
    return BlockOptions(residual=residual, compensation=cfg.compensation, d_attn=cfg.d_attn)


def mixer_config(cfg: ModelConfig, part: UGPartition) -> MixerConfig:
    return MixerConfig(T=part.T, D=cfg.D, H=part.H, d_hidden=cfg.d_hidden, activation=cfg.activation, eps=cfg.eps)


def init_params(cfg: ModelConfig) -> ModelParams:
    """以 init_seed 依區塊順序初始化所有參數"""
    rng = np.random.default_rng(cfg.init_seed)
    dtype = np.dtype(cfg.dtype)
    blocks = []
    for part in block_partitions(cfg):
        block_cfg = mixer_config(cfg, part)
        if cfg.variant == "baseline":
            blocks.append(init_mixer_block(block_cfg, rng, dtype))
        else:
            blocks.append(init_ugsep_block(block_cfg, part, block_options(cfg, part), rng, dtype))
    bound = 1.0 / np.sqrt(cfg.D)
    readout = ReadoutParams(
        w=rng.uniform(-bound, bound, size=(cfg.D, 1)).astype(dtype),
        b=np.zeros(1, dtype=dtype),
    )
    return ModelParams(blocks=blocks, readout=readout)


class RankModel:
    """區塊堆疊與讀出頭；參數不可變，更新時建立新模型"""

    def __init__(self, config: ModelConfig, params: ModelParams):
        self.config = config
        self.params = params
        self.partitions = block_partitions(config)
        if len(params.blocks) != len(self.partitions):
            raise ConfigurationError(f"區塊參數數量 {len(params.blocks)} 與 num_blocks={len(self.partitions)} 不一致")
        self.blocks: List[Block] = []
        for part, block_params in zip(self.partitions, params.blocks):
            block_cfg = mixer_config(config, part)
            if config.variant == "baseline":
                self.blocks.append(MixerBlock(block_cfg, block_params))
            else:
                self.blocks.append(UGSepBlock(block_cfg, part, block_options(config, part), block_params))
        if config.fault_inject_mask:
            if config.variant != "ugsep":
                raise ConfigurationError("故障注入只適用於 ugsep 變體")
            self.blocks[0].inject_mask_fault()

    @property
    def is_ugsep(self) -> bool:
        return self.config.variant == "ugsep"

    @property
    def quantized(self) -> bool:
        return is_quantized(self.params)

    def named_tensors(self) -> Dict[str, object]:
        return self.params.named_tensors()

    def with_params(self, params: ModelParams) -> "RankModel":
        return RankModel(self.config, params)

    def check_input(self, x: Tensor) -> None:
        expected = (self.config.T, self.config.D)
        if x.ndim < 2 or x.shape[-2:] != expected:
            raise DimensionError(f"模型輸入形狀 {x.shape} 與 (T, D) = {expected} 不一致")

    def readout_logits(self, tokens: Tensor) -> Tensor:
        """最終 token (..., H, D) → logit (...)"""
        pooled = ordered_sum(tokens, axis=-2) / tokens.shape[-2]
        return linear(pooled, self.params.readout.w)[..., 0] + self.params.readout.b[0]

    def logits_grad(self, x: Tensor) -> GradPair:
        """前向到 logit；backward(dLogit) → (dX, {參數名稱: 梯度})"""
        self.check_input(x)
        pairs = []
        h = x
        for block in self.blocks:
            pair = block.forward(h)
            pairs.append(pair)
            h = pair.value
        tokens_out = h.shape[-2]
        pooled = ordered_sum(h, axis=-2) / tokens_out
        if not isinstance(self.params.readout.w, np.ndarray):
            return GradPair(self.readout_logits(h), _quantized_backward)
        head = matmul_grad(pooled, self.params.readout.w)
        logits = head.value[..., 0] + self.params.readout.b[0]

        def backward(d_logits):
            d_logits = np.broadcast_to(np.asarray(d_logits, dtype=logits.dtype), logits.shape)
            d_pooled, d_w = head.backward(d_logits[..., None])
            grads = {"readout.w": d_w, "readout.b": np.array([np.sum(d_logits)], dtype=logits.dtype)}
            dh = np.broadcast_to(d_pooled[..., None, :] / tokens_out, h.shape)
            for index in reversed(range(len(pairs))):
                dh, block_grads = pairs[index].backward(dh)
                grads.update(prefix_grads(f"blocks.{index}", block_grads))
            return dh, grads

        return GradPair(logits, backward)

    def logits(self, x: Tensor) -> Tensor:
        self.check_input(x)
        h = x
        for block in self.blocks:
            h = block.forward(h).value
        return self.readout_logits(h)

    def score(self, x: Tensor) -> Tensor:
        """(..., T, D) → 點擊機率 (...)"""
        return expit(self.logits(x))


def _quantized_backward(*_):
    raise ConfigurationError("量化模型不支援反向傳播")


def build_model(cfg: ModelConfig, params: Optional[ModelParams] = None) -> RankModel:
    """依配置建立模型；未提供參數時以 init_seed 初始化"""
    model = RankModel(cfg, params if params is not None else init_params(cfg))
    logger.debug(
        "建立模型: variant=%s blocks=%d partitions=%s",
        cfg.variant, cfg.num_blocks, [(p.n, p.m, p.c_u, p.c_g) for p in model.partitions],
    )
    return model


def quantize_model(model: RankModel, scheme: Optional[QuantScheme] = None) -> RankModel:
    """所有權重矩陣換成 W8A16 量化矩陣，前向改走 qmatmul"""
    if model.quantized:
        raise ConfigurationError("模型已經量化")
    return model.with_params(quantize_params(model.params, scheme or QuantScheme()))
