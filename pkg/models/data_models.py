"""
合成 CTR 資料集的數據模型
"""
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from models.ugsep_models import DataConfig


class SyntheticDataset(BaseModel):
    """可由 (seed, 形狀配置, 教師配置) 完全重建的資料集；樣本依使用者優先排列"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: DataConfig
    user_tokens: np.ndarray = Field(..., description="(使用者數, n, D)")
    candidate_tokens: np.ndarray = Field(..., description="(使用者數, k, m, D)")
    teacher_logits: np.ndarray = Field(..., description="(使用者數·k,) 教師 logit (含偏置)")
    labels: np.ndarray = Field(..., description="(使用者數·k,) 0/1 標籤")
    train_mask: np.ndarray = Field(..., description="(使用者數·k,) True 為訓練集")
    bias: float = Field(..., description="校準後的教師偏置")

    @property
    def num_examples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.train_mask)

    @property
    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.train_mask)

    def features(self, indices) -> np.ndarray:
        """樣本索引 → concat(U-token, G-token)，形狀 (..., T, D)"""
        indices = np.asarray(indices, dtype=np.int64)
        k = self.candidate_tokens.shape[1]
        users, candidates = indices // k, indices % k
        return np.concatenate([self.user_tokens[users], self.candidate_tokens[users, candidates]], axis=-2)
