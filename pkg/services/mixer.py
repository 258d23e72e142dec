"""
RankMixer 基準區塊
多頭 token mixing + 逐 token FFN + 殘差與 layer norm：
    P = LN(Mixup(X))          (逐列)
    X' = LN(PFFN(P) + X)      (逐列，需 H == T)
"""
import logging
from typing import Dict, Optional

import numpy as np

from models.param_models import LayerNormParams, MixerBlockParams, PerTokenFFNParams
from models.ugsep_models import MixerConfig
from services.errors import ConfigurationError, DimensionError
from services.numeric import GradPair, Tensor, activation_grad, layer_norm_grad, token_matmul_grad
from services.quant import token_linear

logger = logging.getLogger(__name__)


def _check_tokens(x: Tensor, cfg: MixerConfig) -> None:
    if x.ndim < 2 or x.shape[-2:] != (cfg.T, cfg.D):
        raise DimensionError(f"token 矩陣形狀 {x.shape} 與配置 (T={cfg.T}, D={cfg.D}) 不一致")


def split_heads(x: Tensor, cfg: MixerConfig) -> Tensor:
    """(..., T, D) → (..., T, H, D′)，output[t][h] = X[t][h·D′:(h+1)·D′]"""
    _check_tokens(x, cfg)
    return x.reshape(x.shape[:-1] + (cfg.H, cfg.d_head))


def mixup(x: Tensor, cfg: MixerConfig) -> Tensor:
    """(..., T, D) → (..., H, T·D′)；第 h 列串接所有 token 的第 h 個 head"""
    heads = np.swapaxes(split_heads(x, cfg), -3, -2)
    return np.ascontiguousarray(heads).reshape(x.shape[:-2] + (cfg.H, cfg.mixed_dim))


def mixup_inverse(p: Tensor, cfg: MixerConfig) -> Tensor:
    """mixup 的逆排列：(..., H, T·D′) → (..., T, D)"""
    if p.ndim < 2 or p.shape[-2:] != (cfg.H, cfg.mixed_dim):
        raise DimensionError(f"mixup 輸出形狀 {p.shape} 與配置 (H={cfg.H}, T·D′={cfg.mixed_dim}) 不一致")
    heads = p.reshape(p.shape[:-2] + (cfg.H, cfg.T, cfg.d_head))
    return np.ascontiguousarray(np.swapaxes(heads, -3, -2)).reshape(p.shape[:-2] + (cfg.T, cfg.D))


def init_per_token_ffn(
    rng: np.random.Generator, tokens: int, d_in: int, d_hidden: int, d_out: int, dtype=np.float64
) -> PerTokenFFNParams:
    """uniform(±1/√fan_in) 初始化，偏置為零"""
    bound1, bound2 = 1.0 / np.sqrt(d_in), 1.0 / np.sqrt(d_hidden)
    return PerTokenFFNParams(
        W1=rng.uniform(-bound1, bound1, size=(tokens, d_in, d_hidden)).astype(dtype),
        b1=np.zeros((tokens, d_hidden), dtype=dtype),
        W2=rng.uniform(-bound2, bound2, size=(tokens, d_hidden, d_out)).astype(dtype),
        b2=np.zeros((tokens, d_out), dtype=dtype),
    )


def init_layer_norm(dim: int, dtype=np.float64) -> LayerNormParams:
    return LayerNormParams(gamma=np.ones(dim, dtype=dtype), beta=np.zeros(dim, dtype=dtype))


def init_mixer_block(cfg: MixerConfig, rng: np.random.Generator, dtype=np.float64) -> MixerBlockParams:
    return MixerBlockParams(
        ln_mix=init_layer_norm(cfg.mixed_dim, dtype),
        ffn=init_per_token_ffn(rng, cfg.H, cfg.mixed_dim, cfg.d_hidden, cfg.D, dtype),
        ln_out=init_layer_norm(cfg.D, dtype),
    )


def pffn_grad(p: Tensor, ffn: PerTokenFFNParams, kind: str = "gelu") -> GradPair:
    """
    逐 token FFN：row t ↦ W2_tᵀ·act(W1_tᵀ·P[t] + b1_t) + b2_t
    backward(dY) → (dP, {W1, b1, W2, b2})
    """
    if p.ndim < 2 or p.shape[-2] != ffn.num_tokens or p.shape[-1] != ffn.W1.shape[1]:
        raise DimensionError(
            f"PFFN 輸入形狀 {p.shape} 與權重組 (tokens={ffn.num_tokens}, in={ffn.W1.shape[1]}) 不一致"
        )
    if isinstance(ffn.W1, np.ndarray) and isinstance(ffn.W2, np.ndarray):
        first = token_matmul_grad(p, ffn.W1)
        hidden_pre = first.value + ffn.b1
        act = activation_grad(hidden_pre, kind)
        second = token_matmul_grad(act.value, ffn.W2)
        value = second.value + ffn.b2
    else:
        # W8A16 推論路徑，不支援反向
        first = second = act = None
        value = token_linear(activation_grad(token_linear(p, ffn.W1) + ffn.b1, kind).value, ffn.W2) + ffn.b2

    def backward(dy: Tensor):
        if second is None:
            raise ConfigurationError("量化權重不支援反向傳播")
        lead = tuple(range(dy.ndim - 2))
        d_act, dW2 = second.backward(dy)
        d_pre = act.backward(d_act)
        dp, dW1 = first.backward(d_pre)
        grads = {
            "W1": dW1,
            "b1": np.sum(d_pre, axis=lead),
            "W2": dW2,
            "b2": np.sum(dy, axis=lead),
        }
        return dp, grads

    return GradPair(value, backward)


def pffn(p: Tensor, ffn: PerTokenFFNParams, kind: str = "gelu") -> Tensor:
    return pffn_grad(p, ffn, kind).value


def prefix_grads(prefix: str, grads: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return {f"{prefix}.{name}": value for name, value in grads.items()}


def mixer_block_forward(x: Tensor, params: MixerBlockParams, cfg: MixerConfig) -> GradPair:
    """
    基準 RankMixer 區塊；backward(dY) → (dX, {參數名稱: 梯度})
    """
    if cfg.H != cfg.T:
        raise ConfigurationError(f"直接殘差要求 H == T，實際 H={cfg.H}, T={cfg.T}")
    mixed = mixup(x, cfg)
    ln_mix = layer_norm_grad(mixed, params.ln_mix.gamma, params.ln_mix.beta, cfg.eps)
    ffn = pffn_grad(ln_mix.value, params.ffn, cfg.activation)
    ln_out = layer_norm_grad(ffn.value + x, params.ln_out.gamma, params.ln_out.beta, cfg.eps)

    def backward(dy: Tensor):
        d_sum, d_gamma_out, d_beta_out = ln_out.backward(dy)
        d_p, ffn_grads = ffn.backward(d_sum)
        d_mixed, d_gamma_mix, d_beta_mix = ln_mix.backward(d_p)
        dx = mixup_inverse(d_mixed, cfg) + d_sum
        grads = {
            "ln_mix.gamma": d_gamma_mix,
            "ln_mix.beta": d_beta_mix,
            **prefix_grads("ffn", ffn_grads),
            "ln_out.gamma": d_gamma_out,
            "ln_out.beta": d_beta_out,
        }
        return dx, grads

    return GradPair(ln_out.value, backward)


class MixerBlock:
    """基準區塊：配置 + 參數，供模型堆疊使用"""

    def __init__(self, cfg: MixerConfig, params: Optional[MixerBlockParams] = None, seed: int = 0,
                 dtype=np.float64):
        if cfg.H != cfg.T:
            raise ConfigurationError(f"直接殘差要求 H == T，實際 H={cfg.H}, T={cfg.T}")
        self.cfg = cfg
        self.params = params if params is not None else init_mixer_block(cfg, np.random.default_rng(seed), dtype)

    def forward(self, x: Tensor) -> GradPair:
        return mixer_block_forward(x, self.params, self.cfg)
