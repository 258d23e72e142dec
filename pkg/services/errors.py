"""
UG-Sep 引擎的例外類別
所有領域錯誤都繼承 UGSepError，CLI 邊界依類別轉換為結束碼
"""
from typing import Optional


class UGSepError(Exception):
    """UG-Sep 引擎的基底例外"""


class DimensionError(UGSepError, ValueError):
    """張量形狀不一致"""


class ConfigurationError(UGSepError, ValueError):
    """配置或分區參數不一致"""


class EvaluationError(UGSepError):
    """函數值非有限 (梯度檢查時)"""


class IntegrityError(UGSepError):
    """快取路徑與完整路徑的 U 側輸出不一致"""

    def __init__(self, message: str, block_index: Optional[int] = None):
        super().__init__(message)
        self.block_index = block_index


class TrainingError(UGSepError):
    """訓練發散 (loss 出現 NaN / Inf)"""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class MetricError(UGSepError, ValueError):
    """評估指標無法計算"""


class GenerationError(UGSepError):
    """合成資料退化 (標籤全部相同)"""


class CheckpointError(UGSepError):
    """檢查點格式錯誤"""


class QuantizationError(UGSepError):
    """量化輸入無效"""
