"""
報告相關的數據模型 (Pydantic v2)
所有報告以 JSON 輸出，並帶 schema_version 欄位
"""
from typing import Dict, List, Optional

from pydantic import BaseModel, Field

SCHEMA_VERSION = 1


class ParamGradientCheck(BaseModel):
    """單一參數的梯度檢查結果"""
    index: int
    name: str
    entries_checked: int
    max_rel_error: float
    worst_entry: Optional[List[int]] = None
    passed: bool


class GradientCheckReport(BaseModel):
    """梯度檢查報告"""
    schema_version: int = SCHEMA_VERSION
    max_rel_error: float
    tol: float
    h: float
    passed: bool
    params: List[ParamGradientCheck] = []


class Divergence(BaseModel):
    """第一個不一致的元素"""
    row: int
    col: int
    trial: int


class BlockSeparability(BaseModel):
    """單一區塊的可分離性結果"""
    block_index: int
    rows_checked: int
    trials: int
    passed: bool = Field(..., serialization_alias="pass")
    first_divergence: Optional[Divergence] = None


class SeparabilityReport(BaseModel):
    """可分離性驗證報告"""
    schema_version: int = SCHEMA_VERSION
    trials: int
    passed: bool
    blocks: List[BlockSeparability] = []


class EquivalenceReport(BaseModel):
    """快取服務與完整服務的等價性報告"""
    schema_version: int = SCHEMA_VERSION
    requests: int
    passed: bool
    failures: List[str] = []


class VerifyReport(BaseModel):
    """verify 指令的總報告"""
    schema_version: int = SCHEMA_VERSION
    passed: bool
    separability: SeparabilityReport
    equivalence: EquivalenceReport


class FlopsLedger(BaseModel):
    """乘加次數帳本"""
    schema_version: int = SCHEMA_VERSION
    mode: str
    M: int
    N: int
    F_U: int = Field(..., description="每位使用者的可重用路徑乘加數")
    F_G: int = Field(..., description="每個候選的不可重用路徑乘加數")
    components: Dict[str, int] = Field(default_factory=dict, description="各元件每樣本乘加數")
    total: int
    naive_total: int
    cached_total: int
    ratio: float = Field(..., description="cached_total / naive_total")
    ratio_exact: str = Field(..., description="約分後的分數 a/b")
    block_ffn_reusable_fraction: float


class WallClock(BaseModel):
    """牆鐘時間 (毫秒)"""
    p50: float
    p90: float


class BenchModeReport(BaseModel):
    """單一服務模式的基準結果"""
    mode: str
    wallclock_ms: Optional[WallClock] = None
    flops: FlopsLedger
    equivalence: str = Field(..., pattern="^(pass|fail|n/a)$")


class BenchReport(BaseModel):
    """bench 指令報告"""
    schema_version: int = SCHEMA_VERSION
    workload: Dict
    repetitions: int
    modes: List[BenchModeReport]
    note: str


class MatrixFootprint(BaseModel):
    """單一權重矩陣的位元組數"""
    name: str
    rows: int
    cols: int
    bytes_16bit: int
    bytes_w8a16: int
    max_roundtrip_error: Optional[float] = None


class FootprintReport(BaseModel):
    """模型權重位元組報告"""
    schema_version: int = SCHEMA_VERSION
    scheme: Optional[str] = None
    matrices: List[MatrixFootprint] = []
    bytes_16bit: int
    bytes_w8a16: int
    ratio: Optional[float] = Field(None, description="16-bit / W8A16；零參數時為 None")
    max_score_drift: Optional[float] = Field(None, description="固定評估批次上量化前後的最大分數差")


class TrainResult(BaseModel):
    """訓練結果與指標軌跡"""
    schema_version: int = SCHEMA_VERSION
    variant: str
    steps: int
    loss_trace: List[float] = []
    initial_test_auc: float
    test_auc: float


class AblationRow(BaseModel):
    """消融表的一列"""
    variant: str
    ratio: str
    compensation: bool
    auc: float
    delta_auc: float
    seed_aucs: List[float] = []


class AblationTable(BaseModel):
    """消融表"""
    schema_version: int = SCHEMA_VERSION
    kind: str
    baseline_auc: float
    rows: List[AblationRow] = []
