"""
可學習參數的數據模型
參數容器皆為 ParamTree：欄位可為 numpy 陣列、QuantizedMatrix、巢狀 ParamTree 或其列表，
以點分名稱 (例如 "blocks.0.ffn_u.W1") 攤平，供梯度、最佳化與檢查點共用
weight_fields 宣告可量化的權重欄位；偏置與 layer norm 參數不在其中
"""
from typing import Any, ClassVar, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from models.ugsep_models import QuantScheme


class QuantizedMatrix(BaseModel):
    """8-bit 權重碼 + 每列縮放 (W8A16)；可帶前導堆疊維度 (..., r, c)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    codes: np.ndarray = Field(..., description="int8 (對稱) 或 uint8 (E4M3 位元) 權重碼")
    scales: np.ndarray = Field(..., description="float32 每列縮放，形狀 (..., r)")
    scheme: QuantScheme

    @property
    def shape(self):
        return self.codes.shape

    @property
    def size(self) -> int:
        return int(self.codes.size)


class ParamTree(BaseModel):
    """參數樹基底"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    weight_fields: ClassVar[Tuple[str, ...]] = ()

    def named_weights(self, prefix: str = "") -> Dict[str, Any]:
        """只含 weight_fields 的攤平字典 (W8A16 量化與 footprint 的對象)"""
        weights: Dict[str, Any] = {}
        for field_name in type(self).model_fields:
            value = getattr(self, field_name)
            key = f"{prefix}{field_name}"
            if isinstance(value, ParamTree):
                weights.update(value.named_weights(key + "."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    weights.update(item.named_weights(f"{key}.{i}."))
            elif field_name in self.weight_fields and value is not None:
                weights[key] = value
        return weights

    def named_tensors(self, prefix: str = "") -> Dict[str, Any]:
        """依欄位宣告順序攤平為 {名稱: 陣列}"""
        tensors: Dict[str, Any] = {}
        for field_name in type(self).model_fields:
            value = getattr(self, field_name)
            key = f"{prefix}{field_name}"
            if isinstance(value, ParamTree):
                tensors.update(value.named_tensors(key + "."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    tensors.update(item.named_tensors(f"{key}.{i}."))
            elif isinstance(value, (np.ndarray, QuantizedMatrix)):
                tensors[key] = value
        return tensors

    def replace_tensors(self, tensors: Dict[str, Any]) -> "ParamTree":
        """以同名陣列替換，回傳新的參數樹 (未出現的名稱保持原值)"""
        update = {}
        for field_name in type(self).model_fields:
            value = getattr(self, field_name)
            if isinstance(value, ParamTree):
                update[field_name] = value.replace_tensors(_subtree(tensors, field_name))
            elif isinstance(value, list):
                update[field_name] = [
                    item.replace_tensors(_subtree(tensors, f"{field_name}.{i}"))
                    for i, item in enumerate(value)
                ]
            elif field_name in tensors:
                update[field_name] = tensors[field_name]
        return self.model_copy(update=update)


def _subtree(tensors: Dict[str, Any], prefix: str) -> Dict[str, Any]:
    head = prefix + "."
    return {key[len(head):]: value for key, value in tensors.items() if key.startswith(head)}


class LayerNormParams(ParamTree):
    """layer norm 的 gamma / beta"""
    gamma: np.ndarray
    beta: np.ndarray


class PerTokenFFNParams(ParamTree):
    """逐 token FFN：第 t 組權重只處理第 t 列"""
    weight_fields: ClassVar[Tuple[str, ...]] = ("W1", "W2")

    W1: Any = Field(..., description="(H, in, hidden)")
    b1: np.ndarray = Field(..., description="(H, hidden)")
    W2: Any = Field(..., description="(H, hidden, out)")
    b2: np.ndarray = Field(..., description="(H, out)")

    @property
    def num_tokens(self) -> int:
        return int(self.b1.shape[0])


class MixerBlockParams(ParamTree):
    """RankMixer 區塊參數"""
    ln_mix: LayerNormParams
    ffn: PerTokenFFNParams
    ln_out: LayerNormParams


class CompensationParams(ParamTree):
    """資訊補償投影：攤平的 U 列 (c_u·d) 映射為 c_g×d 增量"""
    weight_fields: ClassVar[Tuple[str, ...]] = ("W",)

    W: Any = Field(..., description="(c_u·d, c_g·d)")
    b: np.ndarray = Field(..., description="(c_g·d,)，零初始化")


class AttentionParams(ParamTree):
    """單頭注意力投影"""
    weight_fields: ClassVar[Tuple[str, ...]] = ("W_Q", "W_K", "W_V")

    W_Q: Any
    W_K: Any
    W_V: Any

    @property
    def d_attn(self) -> int:
        return int(self.W_Q.shape[1])


class ResidualAttentionParams(ParamTree):
    """分離殘差交叉注意力：Q 來自 FFN 輸出，K / V 來自區塊輸入，W_O 投影回 D"""
    weight_fields: ClassVar[Tuple[str, ...]] = ("W_Q", "W_K", "W_V", "W_O")

    W_Q: Any
    W_K: Any
    W_V: Any
    W_O: Any

    @property
    def d_attn(self) -> int:
        return int(self.W_Q.shape[1])


class UGSepBlockParams(ParamTree):
    """UG-Sep 區塊參數"""
    ln_mix: LayerNormParams
    ffn_u: Optional[PerTokenFFNParams] = Field(None, description="可重用 FFN (c_u 組)；c_u = 0 時為 None")
    ffn_g: PerTokenFFNParams = Field(..., description="不可重用 FFN (c_g 組)")
    ln_out: LayerNormParams
    compensation: Optional[CompensationParams] = None
    residual_attn: Optional[ResidualAttentionParams] = None


class ReadoutParams(ParamTree):
    """讀出頭：平均池化 → 線性 → sigmoid"""
    weight_fields: ClassVar[Tuple[str, ...]] = ("w",)

    w: Any = Field(..., description="(D, 1)")
    b: np.ndarray = Field(..., description="(1,)")


class ModelParams(ParamTree):
    """整個模型的參數"""
    blocks: List[ParamTree]
    readout: ReadoutParams
