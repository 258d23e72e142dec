"""
UG-Sep 命令列啟動腳本
"""

import os
import sys

# 將當前目錄添加到 Python 路徑，以支援直接導入
current_dir = os.path.dirname(os.path.abspath(__file__))
if current_dir not in sys.path:
    sys.path.insert(0, current_dir)

if __name__ == '__main__':
    # 檢查依賴
    try:
        import numpy
        import pandas
        import pydantic
        import scipy
        import sklearn
        import dotenv
    except ImportError as e:
        print(f"❌ 缺少依賴: {e}", file=sys.stderr)
        print("請執行: pip install -r requirements.txt", file=sys.stderr)
        sys.exit(2)
    print("✅ 所有依賴檢查通過", file=sys.stderr)

    from app import main
    sys.exit(main())
