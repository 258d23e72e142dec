"""
W8A16 僅權重量化服務
權重以 8-bit 儲存、每列一個 float32 縮放；啟動值以 bfloat 風格 16-bit 精度模擬，32-bit 累加
"""
import logging
from typing import Any, Dict, Optional

import numpy as np

from models.param_models import ParamTree, QuantizedMatrix
from models.report_models import FootprintReport, MatrixFootprint
from models.ugsep_models import QuantScheme
from services.errors import DimensionError, QuantizationError
from services.numeric import Tensor, matmul, token_matmul

logger = logging.getLogger(__name__)

INT8_MAX = 127
E4M3_MAX = 448.0


def _build_e4m3_table() -> np.ndarray:
    """E4M3 非負碼 0..126 對應的數值 (0x7F 為 NaN)，隨碼值單調遞增"""
    values = []
    for code in range(127):
        exponent, mantissa = code >> 3, code & 0x7
        if exponent == 0:
            values.append(mantissa / 8.0 * 2.0 ** -6)
        else:
            values.append((1.0 + mantissa / 8.0) * 2.0 ** (exponent - 7))
    return np.array(values, dtype=np.float64)


E4M3_TABLE = _build_e4m3_table()


def encode_e4m3(v: np.ndarray) -> np.ndarray:
    """就近捨入到可表示的 E4M3 值 (平手取偶數碼)，回傳 uint8 位元碼"""
    magnitude = np.minimum(np.abs(v), E4M3_MAX)
    hi = np.clip(np.searchsorted(E4M3_TABLE, magnitude), 0, len(E4M3_TABLE) - 1)
    lo = np.clip(hi - 1, 0, len(E4M3_TABLE) - 1)
    d_lo = magnitude - E4M3_TABLE[lo]
    d_hi = E4M3_TABLE[hi] - magnitude
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
    code = np.where(pick_hi, hi, lo).astype(np.uint8)
    sign = (v < 0) & (code != 0)
    return (code | (sign.astype(np.uint8) << 7)).astype(np.uint8)


def decode_e4m3(codes: np.ndarray) -> np.ndarray:
    magnitude = E4M3_TABLE[(codes & 0x7F).astype(np.int64)]
    return np.where(codes & 0x80, -magnitude, magnitude)


def quantize(w: Tensor, scheme: Optional[QuantScheme] = None) -> QuantizedMatrix:
    """
    每列對稱量化；碼值 = round-half-even(W / scale) 並截斷到格式範圍
    int8: scale_i = max_j |W[i][j]| / 127；全零列的 scale 為 0
    """
    scheme = scheme or QuantScheme()
    w = np.asarray(w, dtype=np.float64)
    if w.ndim < 2:
        raise DimensionError(f"量化需要至少二維的權重: {w.shape}")
    if not np.all(np.isfinite(w)):
        raise QuantizationError("權重含非有限值，無法量化")

    limit = INT8_MAX if scheme.format == "int8-symmetric" else E4M3_MAX
    scales = (np.max(np.abs(w), axis=-1) / limit).astype(np.float32)
    scale64 = scales.astype(np.float64)[..., None]
    safe = np.where(scale64 > 0, scale64, 1.0)
    ratio = np.where(scale64 > 0, w / safe, 0.0)

    if scheme.format == "int8-symmetric":
        codes = np.clip(np.rint(ratio), -INT8_MAX, INT8_MAX).astype(np.int8)
    else:
        codes = encode_e4m3(ratio)
    return QuantizedMatrix(codes=codes, scales=scales, scheme=scheme)


def _decode(qw: QuantizedMatrix, dtype) -> np.ndarray:
    if qw.scheme.format == "int8-symmetric":
        return qw.codes.astype(dtype)
    return decode_e4m3(qw.codes).astype(dtype)


def dequantize(qw: QuantizedMatrix, dtype=np.float64) -> Tensor:
    """W′[i][j] = code · scale_i"""
    return _decode(qw, dtype) * qw.scales.astype(dtype)[..., None]


def to_bfloat16(x: Tensor) -> Tensor:
    """截斷尾數到 bfloat16 精度 (保留 float32 容器)"""
    bits = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)
    return (bits & np.uint32(0xFFFF0000)).view(np.float32)


def qmatmul(x: Tensor, qw: QuantizedMatrix) -> Tensor:
    """
    x (..., r) 先截斷為 16-bit 精度，與量化權重 (r, c) 相乘，32-bit 累加
    逐列解量化，數值與 matmul(x16, dequantize(qw, float32)) 相同
    """
    if qw.codes.ndim != 2 or x.shape[-1] != qw.codes.shape[0]:
        raise DimensionError(f"qmatmul 形狀不一致: {x.shape} × {qw.codes.shape}")
    x16 = to_bfloat16(x)
    decoded = _decode(qw, np.float32)
    out = np.zeros(x.shape[:-1] + (qw.codes.shape[1],), dtype=np.float32)
    for t in range(x.shape[-1]):
        out += x16[..., t:t + 1] * (decoded[t] * qw.scales[t])
    return out


def token_qmatmul(a: Tensor, qw: QuantizedMatrix) -> Tensor:
    """逐 token 版本：a (..., H, k) 與堆疊量化權重 (H, k, c)"""
    if qw.codes.ndim != 3 or a.shape[-2:] != qw.codes.shape[:2]:
        raise DimensionError(f"token_qmatmul 形狀不一致: {a.shape} × {qw.codes.shape}")
    a16 = to_bfloat16(a)
    decoded = _decode(qw, np.float32)
    out = np.zeros(a.shape[:-1] + (qw.codes.shape[2],), dtype=np.float32)
    for t in range(a.shape[-1]):
        out += a16[..., t:t + 1] * (decoded[:, t, :] * qw.scales[:, t, None])
    return out


def linear(x: Tensor, w: Any) -> Tensor:
    """依權重型別選擇全精度或 W8A16 乘法"""
    if isinstance(w, QuantizedMatrix):
        return qmatmul(x, w)
    return matmul(x, w)


def token_linear(a: Tensor, w: Any) -> Tensor:
    if isinstance(w, QuantizedMatrix):
        return token_qmatmul(a, w)
    return token_matmul(a, w)


def quantize_params(params: ParamTree, scheme: Optional[QuantScheme] = None) -> ParamTree:
    """將 weight_fields 宣告的權重替換為 QuantizedMatrix；偏置與 layer norm 保持浮點"""
    scheme = scheme or QuantScheme()
    replaced = {
        name: quantize(value, scheme)
        for name, value in params.named_weights().items()
        if isinstance(value, np.ndarray)
    }
    logger.info("已量化 %d 個權重矩陣 (%s)", len(replaced), scheme.format)
    return params.replace_tensors(replaced)


def is_quantized(params: ParamTree) -> bool:
    return any(isinstance(v, QuantizedMatrix) for v in params.named_tensors().values())


def footprint(
    params: Optional[ParamTree],
    scheme: Optional[QuantScheme] = None,
    originals: Optional[Dict[str, np.ndarray]] = None,
) -> FootprintReport:
    """
    權重矩陣位元組數：16-bit = 2·#weights；W8A16 = 1·#weights + 4·#rows
    originals 提供時，對量化矩陣另計最大往返誤差
    """
    matrices = []
    weights = params.named_weights() if params is not None else {}
    for name, value in weights.items():
        shape = value.shape
        rows = int(np.prod(shape[:-1]))
        size = int(np.prod(shape))
        error = None
        if originals is not None and name in originals:
            restored = dequantize(value) if isinstance(value, QuantizedMatrix) else value
            error = float(np.max(np.abs(originals[name] - restored)))
        matrices.append(MatrixFootprint(
            name=name, rows=rows, cols=int(shape[-1]),
            bytes_16bit=2 * size, bytes_w8a16=size + 4 * rows,
            max_roundtrip_error=error,
        ))

    bytes_16bit = sum(m.bytes_16bit for m in matrices)
    bytes_w8a16 = sum(m.bytes_w8a16 for m in matrices)
    return FootprintReport(
        scheme=scheme.format if scheme else None,
        matrices=matrices,
        bytes_16bit=bytes_16bit,
        bytes_w8a16=bytes_w8a16,
        ratio=bytes_16bit / bytes_w8a16 if bytes_w8a16 else None,
    )
