"""
確定性稠密張量核心
所有前向歸約都以遞增索引順序逐項累加，使同一列的結果與批次大小、記憶體佈局無關；
反向程序為逐運算手動推導，並提供中央差分梯度檢查器
"""
import logging
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np

from models.report_models import GradientCheckReport, ParamGradientCheck
from services.errors import DimensionError, EvaluationError

logger = logging.getLogger(__name__)

# 張量即 numpy 陣列，預設 float64，可選 float32
Tensor = np.ndarray

SUPPORTED_DTYPES = (np.float64, np.float32)

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


class GradPair(NamedTuple):
    """前向值與其反向程序；backward 將上游梯度映射為各輸入/參數的梯度"""
    value: Tensor
    backward: Callable


def as_tensor(data, dtype=np.float64) -> Tensor:
    """建立張量，檢查 dtype 與各維度 >= 1"""
    if np.dtype(dtype) not in [np.dtype(d) for d in SUPPORTED_DTYPES]:
        raise DimensionError(f"不支援的 dtype: {dtype}")
    arr = np.array(data, dtype=dtype)
    if arr.ndim == 0 or any(extent < 1 for extent in arr.shape):
        raise DimensionError(f"張量維度必須皆 >= 1: {arr.shape}")
    return arr


def ordered_sum(x: Tensor, axis: int = -1) -> Tensor:
    """沿指定軸以遞增索引順序累加"""
    x = np.moveaxis(x, axis, -1)
    total = x[..., 0].copy()
    for j in range(1, x.shape[-1]):
        total += x[..., j]
    return total


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    C[i][j] = Σ_t A[i][t]·B[t][j]，t 遞增累加
    A 可帶任意前導批次維度，B 為二維
    """
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul 形狀不一致: {a.shape} × {b.shape}")
    out = np.zeros(a.shape[:-1] + (b.shape[1],), dtype=np.result_type(a, b))
    for t in range(a.shape[-1]):
        out += a[..., t:t + 1] * b[t]
    return out


def matmul_grad(a: Tensor, b: Tensor) -> GradPair:
    """matmul 及其反向: (dA, dB)"""
    value = matmul(a, b)

    def backward(dc: Tensor):
        da = np.einsum('...c,kc->...k', dc, b)
        db = np.einsum('nk,nc->kc', a.reshape(-1, a.shape[-1]), dc.reshape(-1, dc.shape[-1]))
        return da, db

    return GradPair(value, backward)


def token_matmul(a: Tensor, w: Tensor) -> Tensor:
    """
    逐 token 矩陣乘法：A (..., H, k) 的第 h 列乘以自己的 W[h] (k × c)
    """
    if w.ndim != 3 or a.ndim < 2 or a.shape[-2] != w.shape[0] or a.shape[-1] != w.shape[1]:
        raise DimensionError(f"token_matmul 形狀不一致: {a.shape} × {w.shape}")
    out = np.zeros(a.shape[:-1] + (w.shape[2],), dtype=np.result_type(a, w))
    for t in range(a.shape[-1]):
        out += a[..., t:t + 1] * w[:, t, :]
    return out


def token_matmul_grad(a: Tensor, w: Tensor) -> GradPair:
    value = token_matmul(a, w)

    def backward(dc: Tensor):
        da = np.einsum('...hc,hkc->...hk', dc, w)
        dw = np.einsum('nhk,nhc->hkc', a.reshape((-1,) + a.shape[-2:]), dc.reshape((-1,) + dc.shape[-2:]))
        return da, dw

    return GradPair(value, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """y = gamma ⊙ (x − mean) / sqrt(var + eps) + beta，母體變異數，沿最後一軸"""
    return layer_norm_grad(x, gamma, beta, eps).value


def layer_norm_grad(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> GradPair:
    if eps <= 0:
        raise ValueError(f"eps 必須為正數: {eps}")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm 參數形狀不一致: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")

    mean = ordered_sum(x) / n
    centered = x - mean[..., None]
    var = ordered_sum(centered * centered) / n
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std[..., None]
    value = gamma * x_hat + beta

    def backward(dy: Tensor):
        lead = tuple(range(dy.ndim - 1))
        dgamma = np.sum(dy * x_hat, axis=lead)
        dbeta = np.sum(dy, axis=lead)
        dx_hat = dy * gamma
        mean_dx_hat = np.mean(dx_hat, axis=-1, keepdims=True)
        mean_dx_hat_x_hat = np.mean(dx_hat * x_hat, axis=-1, keepdims=True)
        dx = inv_std[..., None] * (dx_hat - mean_dx_hat - x_hat * mean_dx_hat_x_hat)
        return dx, dgamma, dbeta

    return GradPair(value, backward)


def activation(x: Tensor, kind: str = "gelu") -> Tensor:
    """逐元素啟動函數：GELU (tanh 近似) 為預設，可選 ReLU"""
    return activation_grad(x, kind).value


def activation_grad(x: Tensor, kind: str = "gelu") -> GradPair:
    if kind == "gelu":
        t = np.tanh(_GELU_C * (x + _GELU_K * x ** 3))
        value = 0.5 * x * (1.0 + t)
    elif kind == "relu":
        value = np.maximum(x, 0.0)
    else:
        raise ValueError(f"不支援的啟動函數: {kind}")

    def backward(dy: Tensor):
        if kind == "relu":
            return dy * (x > 0)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return dy * local

    return GradPair(value, backward)


def softmax_rows(logits: Tensor, allowed: Optional[np.ndarray] = None) -> Tensor:
    """
    沿最後一軸的 softmax；allowed 為 False 的位置 logit 視為 −∞
    """
    return softmax_rows_grad(logits, allowed).value


def softmax_rows_grad(logits: Tensor, allowed: Optional[np.ndarray] = None) -> GradPair:
    if allowed is not None:
        logits = np.where(allowed, logits, -np.inf)
    row_max = np.max(logits, axis=-1, keepdims=True)
    shifted = np.exp(logits - row_max)
    value = shifted / ordered_sum(shifted)[..., None]

    def backward(dp: Tensor):
        inner = np.sum(dp * value, axis=-1, keepdims=True)
        return value * (dp - inner)

    return GradPair(value, backward)


def check_gradient(
    f: Callable[[List[Tensor]], GradPair],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
    floor: float = 1e-3,
    max_entries: Optional[int] = None,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
) -> GradientCheckReport:
    """
    以中央差分 (f(p+h) − f(p−h)) / 2h 比對解析梯度
    f(params) 回傳 GradPair：value 為純量，backward(1.0) 回傳與 params 對應的梯度列表
    相對誤差 = |解析 − 數值| / max(|解析|, |數值|, floor)
    """
    if h <= 0:
        raise ValueError(f"h 必須為正數: {h}")

    base = [np.array(p, dtype=np.float64) for p in params]
    pair = f(base)
    _require_finite(pair.value, "基準點")
    analytic = pair.backward(1.0)
    if len(analytic) != len(base):
        raise DimensionError(f"梯度數量 {len(analytic)} 與參數數量 {len(base)} 不一致")

    rng = np.random.default_rng(seed)
    checks = []
    for index, (param, grad) in enumerate(zip(base, analytic)):
        if grad.shape != param.shape:
            raise DimensionError(f"參數 {index} 的梯度形狀 {grad.shape} 與參數形狀 {param.shape} 不一致")
        flat_indices = np.arange(param.size)
        if max_entries is not None and param.size > max_entries:
            flat_indices = np.sort(rng.choice(param.size, size=max_entries, replace=False))

        worst_error, worst_entry = 0.0, None
        for flat in flat_indices:
            entry = np.unravel_index(flat, param.shape)
            numeric = _central_difference(f, base, index, entry, h)
            exact = float(grad[entry])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            if error > worst_error or worst_entry is None:
                worst_error, worst_entry = error, [int(i) for i in entry]

        checks.append(ParamGradientCheck(
            index=index,
            name=names[index] if names else f"param{index}",
            entries_checked=int(len(flat_indices)),
            max_rel_error=worst_error,
            worst_entry=worst_entry,
            passed=worst_error <= tol,
        ))

    max_error = max((c.max_rel_error for c in checks), default=0.0)
    report = GradientCheckReport(max_rel_error=max_error, tol=tol, h=h, passed=max_error <= tol, params=checks)
    if not report.passed:
        logger.debug("梯度檢查未通過: max_rel_error=%.3e tol=%.1e", max_error, tol)
    return report


def _central_difference(f, base: List[Tensor], index: int, entry, h: float) -> float:
    values = []
    for step in (h, -h):
        perturbed = list(base)
        shifted = base[index].copy()
        shifted[entry] += step
        perturbed[index] = shifted
        value = f(perturbed).value
        _require_finite(value, f"參數 {index} 位置 {tuple(int(i) for i in entry)}")
        values.append(float(value))
    return (values[0] - values[1]) / (2.0 * h)


def _require_finite(value, where: str) -> None:
    if not np.all(np.isfinite(value)):
        raise EvaluationError(f"函數值非有限 ({where}): {value}")
