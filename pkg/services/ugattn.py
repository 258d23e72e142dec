"""
UG-Sep 推廣到標準注意力
單頭縮放點積注意力，加上禁止 U 查詢 → G 鍵資訊流的 token 級遮罩
"""
import logging
from typing import Optional

import numpy as np

from models.param_models import AttentionParams
from services.errors import ConfigurationError, DimensionError
from services.numeric import GradPair, Tensor, matmul_grad, softmax_rows_grad
from services.ugsep import attend, attention_logits

logger = logging.getLogger(__name__)

MASK_MODES = ("multiplicative", "additive")


def init_attention(rng: np.random.Generator, D: int, d_attn: int, dtype=np.float64) -> AttentionParams:
    bound = 1.0 / np.sqrt(D)
    return AttentionParams(
        W_Q=rng.uniform(-bound, bound, size=(D, d_attn)).astype(dtype),
        W_K=rng.uniform(-bound, bound, size=(D, d_attn)).astype(dtype),
        W_V=rng.uniform(-bound, bound, size=(D, d_attn)).astype(dtype),
    )


def build_attn_mask(n: int, T: int) -> np.ndarray:
    """T×T 遮罩：(i < n, j >= n) 為 0，其餘為 1"""
    if T < 1 or not 0 <= n <= T:
        raise ConfigurationError(f"U-token 數 n={n} 必須介於 0 與 T={T} 之間")
    mask = np.ones((T, T), dtype=np.uint8)
    mask[:n, n:] = 0
    return mask


def _check(x: Tensor, params: AttentionParams) -> None:
    shapes = {params.W_Q.shape, params.W_K.shape, params.W_V.shape}
    if len(shapes) != 1:
        raise DimensionError(f"W_Q / W_K / W_V 形狀不一致: {sorted(shapes)}")
    if x.ndim < 2 or x.shape[-1] != params.W_Q.shape[0]:
        raise DimensionError(f"輸入形狀 {x.shape} 與投影 {params.W_Q.shape} 不一致")


def masked_attention_grad(x: Tensor, params: AttentionParams, mask: Optional[np.ndarray] = None,
                          mode: str = "multiplicative") -> GradPair:
    """
    multiplicative: softmax 後逐元素乘遮罩，U 列總和不再為 1
    additive: 遮罩位置的 logit 在 softmax 前設為 −∞，每列仍正規化
    backward(dOut) → (dX, {W_Q, W_K, W_V})
    """
    _check(x, params)
    if mode not in MASK_MODES:
        raise ConfigurationError(f"不支援的遮罩模式: {mode}")
    T = x.shape[-2]
    if mask is not None and mask.shape != (T, T):
        raise DimensionError(f"遮罩形狀 {mask.shape} 與 T={T} 不一致")

    q = matmul_grad(x, params.W_Q)
    k = matmul_grad(x, params.W_K)
    v = matmul_grad(x, params.W_V)
    logits = attention_logits(q.value, k.value)
    keep = None if mask is None else mask.astype(bool)

    if mode == "additive" or keep is None:
        soft = softmax_rows_grad(logits, keep)
        weights = soft.value
    else:
        soft = softmax_rows_grad(logits)
        weights = np.where(keep, soft.value, 0.0)
    value = attend(weights, v.value)
    scale = 1.0 / np.sqrt(q.value.shape[-1])

    def backward(dout: Tensor):
        d_weights = np.einsum('...ic,...jc->...ij', dout, v.value)
        d_v = np.einsum('...ij,...ic->...jc', weights, dout)
        if mode == "multiplicative" and keep is not None:
            d_weights = np.where(keep, d_weights, 0.0)
        d_logits = soft.backward(d_weights) * scale
        d_q = np.einsum('...ij,...ja->...ia', d_logits, k.value)
        d_k = np.einsum('...ij,...ia->...ja', d_logits, q.value)
        dx_q, dW_Q = q.backward(d_q)
        dx_k, dW_K = k.backward(d_k)
        dx_v, dW_V = v.backward(d_v)
        return dx_q + dx_k + dx_v, {"W_Q": dW_Q, "W_K": dW_K, "W_V": dW_V}

    return GradPair(value, backward)


def attention(x: Tensor, params: AttentionParams) -> Tensor:
    """softmax(Q·Kᵀ/√d_a)·V，逐查詢列 softmax"""
    return masked_attention_grad(x, params).value


def masked_attention(x: Tensor, params: AttentionParams, mask: np.ndarray,
                     mode: str = "multiplicative") -> Tensor:
    return masked_attention_grad(x, params, mask, mode).value


def attention_weights(x: Tensor, params: AttentionParams, mask: Optional[np.ndarray] = None,
                      mode: str = "multiplicative") -> Tensor:
    """遮罩後的注意力權重 (T×T)，用於檢查列總和"""
    _check(x, params)
    logits = attention_logits(matmul_grad(x, params.W_Q).value, matmul_grad(x, params.W_K).value)
    if mask is None:
        return softmax_rows_grad(logits).value
    keep = mask.astype(bool)
    if mode == "additive":
        return softmax_rows_grad(logits, keep).value
    return np.where(keep, softmax_rows_grad(logits).value, 0.0)
