"""
測試所有依賴的導入
"""


def test_imports():
    print("🔍 測試基本 Python 模組...")
    import sys
    print(f"✅ Python 版本: {sys.version}")

    print("\n🔍 測試數據處理...")
    import numpy as np
    print(f"✅ NumPy 版本: {np.__version__}")

    import pandas as pd
    print(f"✅ Pandas 版本: {pd.__version__}")

    import scipy
    print(f"✅ SciPy 版本: {scipy.__version__}")

    import sklearn
    print(f"✅ scikit-learn 版本: {sklearn.__version__}")

    print("\n🔍 測試 Pydantic...")
    import pydantic
    print(f"✅ Pydantic 版本: {pydantic.__version__}")

    import dotenv  # noqa: F401
    print("✅ python-dotenv 導入成功")

    print("\n🔍 測試自定義模組...")
    from models.ugsep_models import RunConfig  # noqa: F401
    from models.report_models import SCHEMA_VERSION
    print(f"✅ 配置與報告模型導入成功 (schema {SCHEMA_VERSION})")

    from services.ugsep import UGSepBlock  # noqa: F401
    from services.serving import serve_cached  # noqa: F401
    from services.synthetic import train  # noqa: F401
    print("✅ 核心服務導入成功")

    from api.ugsep_commands import cmd_verify  # noqa: F401
    from app import create_app
    assert create_app().prog == "ugsep"
    print("✅ 命令列導入成功")


if __name__ == "__main__":
    try:
        test_imports()
        print("\n🎉 所有依賴測試通過！可以執行 ugsep 指令了。")
    except ImportError as e:
        print(f"❌ 導入錯誤: {e}")
        print("請執行: pip install -r requirements.txt")
