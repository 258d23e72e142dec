"""
pytest 共用設定：slow 標記的測試只在 UGSEP_RUN_SLOW=1 時執行
"""
import os

import pytest


def pytest_collection_modifyitems(config, items):
    if os.getenv("UGSEP_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="設定 UGSEP_RUN_SLOW=1 以執行長時間測試")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
