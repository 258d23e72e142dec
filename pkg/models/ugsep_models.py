"""
UG-Sep 引擎的配置模型 (Pydantic v2)
使用 Pydantic 進行配置驗證和 JSON 序列化
"""
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def parse_ratio(ratio: str, heads: int) -> Tuple[int, int]:
    """將 "a:b" 比例換算為 (c_u, c_g)，c_u + c_g = heads"""
    try:
        a, b = (int(part) for part in ratio.split(":"))
    except ValueError:
        raise ValueError(f"比例格式錯誤 (應為 a:b): {ratio}")
    if a < 0 or b < 1:
        raise ValueError(f"比例必須滿足 a >= 0, b >= 1: {ratio}")
    if (heads * a) % (a + b) != 0:
        raise ValueError(f"比例 {ratio} 無法在 H={heads} 下整除")
    c_u = heads * a // (a + b)
    return c_u, heads - c_u


def proportional_split(n: int, m: int, heads: int) -> Tuple[int, int]:
    """預設 c_u / c_g：依 n / m 比例四捨五入，且 c_g >= 1"""
    c_u = int(round(heads * n / (n + m)))
    c_u = min(max(c_u, 0), heads - 1)
    return c_u, heads - c_u


class MixerConfig(BaseModel):
    """RankMixer 區塊形狀配置"""
    model_config = ConfigDict(frozen=True)

    T: int = Field(..., ge=1, description="輸入 token 數")
    D: int = Field(..., ge=1, description="每個 token 的隱藏維度")
    H: int = Field(..., ge=1, description="head 數 (= 輸出 token 數)")
    d_hidden: int = Field(..., ge=1, description="FFN 內層維度")
    activation: str = Field("gelu", pattern="^(gelu|relu)$", description="啟動函數")
    eps: float = Field(1e-5, gt=0, description="layer norm eps")

    @model_validator(mode="after")
    def validate_heads(self):
        if self.D % self.H != 0:
            raise ValueError(f"H={self.H} 必須整除 D={self.D}")
        return self

    @property
    def d_head(self) -> int:
        return self.D // self.H

    @property
    def mixed_dim(self) -> int:
        """mixup 後每列的維度 T·D′"""
        return self.T * self.d_head


class UGPartition(BaseModel):
    """U/G token 分區：輸入 n 個 U-token、m 個 G-token；mixup 後 c_u 列 U、c_g 列 G"""
    model_config = ConfigDict(frozen=True)

    n: int = Field(..., ge=0, description="輸入 U-token 數")
    m: int = Field(..., ge=1, description="輸入 G-token 數")
    c_u: int = Field(..., ge=0, description="mixup 後 U 列數")
    c_g: int = Field(..., ge=1, description="mixup 後 G 列數")

    @property
    def T(self) -> int:
        return self.n + self.m

    @property
    def H(self) -> int:
        return self.c_u + self.c_g

    @property
    def is_plain(self) -> bool:
        """輸入與輸出的 U/G 數量相同，可直接殘差"""
        return self.n == self.c_u and self.m == self.c_g

    def output_partition(self) -> "UGPartition":
        """區塊輸出作為下一個區塊輸入時的分區 (保持相同 c_u / c_g)"""
        return UGPartition(n=self.c_u, m=self.c_g, c_u=self.c_u, c_g=self.c_g)


class BlockOptions(BaseModel):
    """UG-Sep 區塊選項"""
    model_config = ConfigDict(frozen=True)

    residual: str = Field("plain", pattern="^(plain|separated)$", description="殘差模式")
    compensation: bool = Field(False, description="是否啟用資訊補償")
    d_attn: int = Field(8, ge=1, description="分離殘差交叉注意力維度")


class QuantScheme(BaseModel):
    """權重量化方案"""
    model_config = ConfigDict(frozen=True)

    format: str = Field("int8-symmetric", pattern="^(int8-symmetric|fp8-e4m3-emulated)$",
                        description="8-bit 格式")
    granularity: str = Field("per-row", pattern="^per-row$", description="縮放粒度")


class ModelConfig(BaseModel):
    """排序模型配置 (區塊堆疊 + 讀出頭)"""
    variant: str = Field("ugsep", pattern="^(baseline|ugsep)$", description="baseline 或 ugsep")
    n: int = Field(6, ge=0, description="輸入 U-token 數")
    m: int = Field(6, ge=1, description="輸入 G-token 數")
    D: int = Field(24, ge=1, description="token 隱藏維度")
    H: int = Field(12, ge=1, description="head 數")
    d_hidden: int = Field(32, ge=1, description="FFN 內層維度")
    num_blocks: int = Field(2, ge=1, description="區塊數")
    activation: str = Field("gelu", pattern="^(gelu|relu)$")
    eps: float = Field(1e-5, gt=0)
    ratio: Optional[str] = Field(None, description="U:G 比例 (a:b)，未指定時依 n:m 比例")
    compensation: bool = Field(False, description="資訊補償")
    residual: str = Field("auto", pattern="^(auto|plain|separated)$", description="殘差模式")
    d_attn: int = Field(8, ge=1, description="分離殘差注意力維度")
    dtype: str = Field("float64", pattern="^(float64|float32)$")
    init_seed: int = Field(0, ge=0, description="權重初始化種子")
    fault_inject_mask: bool = Field(False, description="故障注入：第一個區塊遮罩翻轉一個 0")

    @model_validator(mode="after")
    def validate_shapes(self):
        if self.D % self.H != 0:
            raise ValueError(f"H={self.H} 必須整除 D={self.D}")
        if self.variant == "baseline" and self.H != self.T:
            raise ValueError(f"baseline 使用直接殘差，H={self.H} 必須等於 T={self.T}")
        if self.variant == "ugsep":
            c_u, c_g = self.head_split()
            if self.residual == "plain" and (c_u, c_g) != (self.n, self.m):
                raise ValueError(f"直接殘差要求 (n, m) = (c_u, c_g)，實際為 ({self.n}, {self.m}) 與 ({c_u}, {c_g})")
            if c_u > 0 and self.n == 0:
                raise ValueError("c_u > 0 時至少需要一個 U-token 輸入")
        return self

    @property
    def T(self) -> int:
        return self.n + self.m

    def head_split(self) -> Tuple[int, int]:
        """mixup 後的 (c_u, c_g)"""
        if self.variant == "baseline":
            return 0, self.H
        if self.ratio is not None:
            return parse_ratio(self.ratio, self.H)
        return proportional_split(self.n, self.m, self.H)


class DataConfig(BaseModel):
    """合成 CTR 資料配置"""
    seed: int = Field(0, ge=0)
    num_users: int = Field(400, ge=1)
    candidates_per_user: int = Field(10, ge=1)
    n: int = Field(6, ge=0, description="每位使用者的 U-token 數")
    m: int = Field(6, ge=1, description="每個候選的 G-token 數")
    D: int = Field(24, ge=1)
    temperature: float = Field(1.0, gt=0, description="標籤雜訊溫度")
    signal_scale: float = Field(3.0, gt=0, description="標準化 logit 的尺度")
    interaction_weight: float = Field(0.8, ge=0, le=1, description="U×G 雙線性項在 logit 中的權重")
    base_rate: float = Field(0.3, ge=0.05, le=0.5, description="目標正樣本比例")
    train_fraction: float = Field(0.8, gt=0, lt=1)


class TrainConfig(BaseModel):
    """訓練配置 (動量 SGD)"""
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(64, ge=1)
    steps: int = Field(1500, ge=0)
    seed: int = Field(0, ge=0)
    log_every: int = Field(100, ge=1)


class CandidateSizeSpec(BaseModel):
    """候選數量分佈"""
    kind: str = Field("fixed", pattern="^(fixed|uniform)$")
    value: int = Field(8, ge=1, description="fixed 模式的候選數")
    low: int = Field(1, ge=1, description="uniform 下界")
    high: int = Field(16, ge=1, description="uniform 上界 (含)")

    @model_validator(mode="after")
    def validate_range(self):
        if self.kind == "uniform" and self.high < self.low:
            raise ValueError("uniform 上界必須 >= 下界")
        return self


class WorkloadSpec(BaseModel):
    """服務負載規格"""
    seed: int = Field(0, ge=0)
    M: int = Field(4, ge=1, description="每個請求的使用者數")
    candidate_size: CandidateSizeSpec = Field(default_factory=CandidateSizeSpec)
    model_ref: Optional[str] = Field(None, description="檢查點路徑；未指定時使用隨機權重")


class ServeConfig(BaseModel):
    """基準測試配置"""
    workload: WorkloadSpec = Field(default_factory=WorkloadSpec)
    repetitions: int = Field(5, description="計時重複次數")
    quant: QuantScheme = Field(default_factory=QuantScheme)
    workers: int = Field(1, ge=1)

    @field_validator("repetitions")
    @classmethod
    def validate_repetitions(cls, v):
        if v < 3:
            raise ValueError(f"repetitions 必須 >= 3: {v}")
        return v


class VerifyConfig(BaseModel):
    """驗證配置"""
    trials: int = Field(100, ge=1)
    requests: int = Field(50, ge=1)
    max_users: int = Field(8, ge=1)
    max_candidates: int = Field(16, ge=1)


class AblationConfig(BaseModel):
    """消融實驗配置"""
    ratios: List[str] = Field(default_factory=lambda: ["1:2", "1:1", "3:1"])
    compensation_ratios: List[str] = Field(default_factory=lambda: ["1:1", "3:1"])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])


class RunConfig(BaseModel):
    """完整執行配置"""
    seed: int = Field(0, ge=0)
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    serve: ServeConfig = Field(default_factory=ServeConfig)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    quant: QuantScheme = Field(default_factory=QuantScheme)

    @model_validator(mode="after")
    def validate_data_matches_model(self):
        if (self.data.n, self.data.m, self.data.D) != (self.model.n, self.model.m, self.model.D):
            raise ValueError(
                f"資料 token 形狀 (n={self.data.n}, m={self.data.m}, D={self.data.D}) "
                f"與模型 (n={self.model.n}, m={self.model.m}, D={self.model.D}) 不一致"
            )
        return self

    def reseeded(self, seed: int) -> "RunConfig":
        """以單一種子覆寫所有區段的種子"""
        return self.model_copy(update={
            "seed": seed,
            "model": self.model.model_copy(update={"init_seed": seed}),
            "data": self.data.model_copy(update={"seed": seed}),
            "train": self.train.model_copy(update={"seed": seed}),
            "serve": self.serve.model_copy(update={
                "workload": self.serve.workload.model_copy(update={"seed": seed}),
            }),
        })
