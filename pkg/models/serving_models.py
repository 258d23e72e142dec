"""
排序請求的數據模型
一個請求包含 M 位使用者，每位使用者有自己的 U-token 與候選列表
"""
from typing import List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class UserRecord(BaseModel):
    """單一使用者：U-token (n×D) 與候選 G-token (k×m×D)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    u_tokens: np.ndarray = Field(..., description="(n, D)")
    candidates: np.ndarray = Field(..., description="(k, m, D)，k >= 1")

    @field_validator("u_tokens")
    @classmethod
    def validate_u_tokens(cls, v):
        if v.ndim != 2:
            raise ValueError(f"u_tokens 必須為 (n, D): {v.shape}")
        return v

    @field_validator("candidates")
    @classmethod
    def validate_candidates(cls, v):
        if v.ndim != 3 or v.shape[0] < 1:
            raise ValueError(f"candidates 必須為 (k, m, D) 且 k >= 1: {v.shape}")
        return v

    @model_validator(mode="after")
    def validate_width(self):
        if self.u_tokens.shape[1] != self.candidates.shape[2]:
            raise ValueError(f"U 與 G 的 D 不一致: {self.u_tokens.shape} / {self.candidates.shape}")
        return self


class Request(BaseModel):
    """排序請求"""
    users: List[UserRecord] = Field(..., min_length=1)

    @model_validator(mode="after")
    def validate_users(self):
        u_shapes = {u.u_tokens.shape for u in self.users}
        g_shapes = {u.candidates.shape[1:] for u in self.users}
        if len(u_shapes) != 1 or len(g_shapes) != 1:
            raise ValueError(f"所有使用者的 token 形狀必須一致: U {u_shapes}, G {g_shapes}")
        return self

    @property
    def M(self) -> int:
        return len(self.users)

    @property
    def candidate_sizes(self) -> List[int]:
        return [int(u.candidates.shape[0]) for u in self.users]

    @property
    def N(self) -> int:
        return sum(self.candidate_sizes)
