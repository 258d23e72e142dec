"""
二進位檢查點 (固定 little-endian)

    magic "UGSEP" | u32 版本 | u32 長度 + 模型配置 JSON | u32 記錄數
    每筆記錄: u16 名稱長度 + 名稱 | u8 dtype 標記 | u8 維度數 | u32 × 維度
              f32 / f64: 逐列 payload
              q8: u8 格式標記 | 1 byte × 權重碼 | f32 × 每列縮放
"""
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from models.param_models import QuantizedMatrix
from models.ugsep_models import ModelConfig, QuantScheme
from services.errors import CheckpointError
from services.model import RankModel, build_model

logger = logging.getLogger(__name__)

MAGIC = b"UGSEP"
FORMAT_VERSION = 1

DTYPE_TAGS = {"f32": 0, "f64": 1, "q8": 2}
_NUMPY_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_LE_TYPES = {"f32": "<f4", "f64": "<f8"}
SCHEME_TAGS = {"int8-symmetric": 0, "fp8-e4m3-emulated": 1}
_CODE_TYPES = {"int8-symmetric": "<i1", "fp8-e4m3-emulated": "<u1"}


def _tag_of(value: Any) -> str:
    if isinstance(value, QuantizedMatrix):
        return "q8"
    try:
        return _NUMPY_TAGS[value.dtype]
    except KeyError:
        raise CheckpointError(f"不支援的 dtype: {value.dtype}")


def encode_checkpoint(config: ModelConfig, tensors: Dict[str, Any]) -> bytes:
    config_bytes = config.model_dump_json().encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(config_bytes)), config_bytes,
              struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        tag = _tag_of(value)
        name_bytes = name.encode("utf-8")
        shape = value.shape
        chunks.append(struct.pack("<H", len(name_bytes)) + name_bytes)
        chunks.append(struct.pack(f"<BB{len(shape)}I", DTYPE_TAGS[tag], len(shape), *shape))
        if tag == "q8":
            fmt = value.scheme.format
            chunks.append(struct.pack("<B", SCHEME_TAGS[fmt]))
            chunks.append(np.ascontiguousarray(value.codes, dtype=_CODE_TYPES[fmt]).tobytes())
            chunks.append(np.ascontiguousarray(value.scales, dtype="<f4").tobytes())
        else:
            chunks.append(np.ascontiguousarray(value, dtype=_LE_TYPES[tag]).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"檢查點截斷：需要 {size} bytes，位置 {self.offset}，總長 {len(self.data)}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def decode_checkpoint(data: bytes) -> Tuple[ModelConfig, Dict[str, Any]]:
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("不是 UGSEP 檢查點 (magic 不符)")
    version, config_len = reader.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"檢查點版本 {version} 與支援的版本 {FORMAT_VERSION} 不一致")
    config = ModelConfig.model_validate_json(reader.take(config_len).decode("utf-8"))

    tag_names = {v: k for k, v in DTYPE_TAGS.items()}
    scheme_names = {v: k for k, v in SCHEME_TAGS.items()}
    tensors: Dict[str, Any] = {}
    (count,) = reader.unpack("<I")
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        tag_code, ndim = reader.unpack("<BB")
        if tag_code not in tag_names:
            raise CheckpointError(f"記錄 {name} 的 dtype 標記無效: {tag_code}")
        shape = reader.unpack(f"<{ndim}I")
        tag = tag_names[tag_code]
        if tag == "q8":
            (scheme_code,) = reader.unpack("<B")
            if scheme_code not in scheme_names:
                raise CheckpointError(f"記錄 {name} 的量化格式標記無效: {scheme_code}")
            fmt = scheme_names[scheme_code]
            codes = reader.array(_CODE_TYPES[fmt], shape)
            scales = reader.array("<f4", shape[:-1])
            tensors[name] = QuantizedMatrix(codes=codes, scales=scales, scheme=QuantScheme(format=fmt))
        else:
            tensors[name] = reader.array(_LE_TYPES[tag], shape)
    if reader.offset != len(data):
        raise CheckpointError(f"檢查點尾端有 {len(data) - reader.offset} bytes 多餘資料")
    return config, tensors


def save_checkpoint(path: Union[str, Path], model: RankModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model.config, model.named_tensors()))
    logger.info("已寫入檢查點 %s", path)
    return path


def load_checkpoint(path: Union[str, Path]) -> RankModel:
    """讀取檢查點並依內嵌配置重建模型；名稱與形狀必須與配置推導的參數完全一致"""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"找不到檢查點: {path}")
    config, tensors = decode_checkpoint(path.read_bytes())
    template = build_model(config.model_copy(update={"fault_inject_mask": False}))
    expected = template.named_tensors()
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"檢查點參數名稱不符: 缺少 {missing}, 多出 {extra}")
    for name, value in tensors.items():
        if tuple(value.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"參數 {name} 形狀 {value.shape} 與配置推導的 {expected[name].shape} 不一致")
    return RankModel(config, template.params.replace_tensors(tensors))
