"""
UG-Sep 命令列主程式
ugsep verify|train|eval|ablate|bench|quantize
"""
import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

# 將當前目錄添加到 Python 路徑，以支援直接導入
current_dir = os.path.dirname(os.path.abspath(__file__))
if current_dir not in sys.path:
    sys.path.insert(0, current_dir)

from api.ugsep_commands import (  # noqa: E402
    cmd_ablate, cmd_bench, cmd_eval, cmd_quantize, cmd_train, cmd_verify,
)
from models.ugsep_models import QuantScheme  # noqa: E402

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str = "INFO") -> None:
    """日誌寫到 stderr，stdout 只輸出 JSON 報告"""
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT,
                        stream=sys.stderr, force=True)


def create_app() -> argparse.ArgumentParser:
    """工廠函數創建命令列解析器"""
    parser = argparse.ArgumentParser(prog="ugsep", description="UG-Sep 排序模型引擎")
    parser.add_argument("--log-level", default=os.getenv("UGSEP_LOG_LEVEL", "INFO"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub, out=True):
        sub.add_argument("--config", help="RunConfig JSON 路徑 (未指定時使用預設配置)")
        sub.add_argument("--seed", type=int, help="覆寫所有種子")
        if out:
            sub.add_argument("--out", help="輸出目錄")

    common(commands.add_parser("verify", help="可分離性與快取等價性驗證"))
    common(commands.add_parser("train", help="在合成資料上訓練並寫出檢查點"))

    evaluate = commands.add_parser("eval", help="以檢查點重新計算測試 AUC")
    common(evaluate, out=False)
    evaluate.add_argument("--checkpoint", required=True)

    ablate = commands.add_parser("ablate", help="比例與資訊補償消融")
    common(ablate)
    ablate.add_argument("--which", default="all", choices=["ratios", "compensation", "all"])
    ablate.add_argument("--workers", type=int, default=1)

    bench = commands.add_parser("bench", help="naive / cached / cached+W8A16 基準測試")
    common(bench)
    bench.add_argument("--flops-only", action="store_true", help="只計算乘加帳本 (輸出可重現)")

    quantize = commands.add_parser("quantize", help="W8A16 量化檢查點")
    quantize.add_argument("--checkpoint", required=True, help="輸入 f32/f64 檢查點")
    quantize.add_argument("--out", required=True, help="輸出 q8 檢查點路徑")
    quantize.add_argument("--scheme", default="int8-symmetric", choices=["int8-symmetric", "fp8-e4m3-emulated"])
    quantize.add_argument("--seed", type=int, default=0, help="分數漂移評估批次的種子")
    return parser


def dispatch(args: argparse.Namespace):
    if args.command == "verify":
        return cmd_verify(args.config, args.out, args.seed)
    if args.command == "train":
        return cmd_train(args.config, args.out, args.seed)
    if args.command == "eval":
        return cmd_eval(args.config, args.checkpoint, args.seed)
    if args.command == "ablate":
        return cmd_ablate(args.config, args.which, args.out, args.seed, args.workers)
    if args.command == "bench":
        return cmd_bench(args.config, args.out, args.seed, args.flops_only)
    return cmd_quantize(args.checkpoint, args.out, QuantScheme(format=args.scheme), args.seed)


def main(argv: Optional[List[str]] = None) -> int:
    # 載入環境變數 (UGSEP_SEED)
    load_dotenv()
    args = create_app().parse_args(argv)
    configure_logging(args.log_level)
    code, payload = dispatch(args)
    print(json.dumps(payload, indent=2, ensure_ascii=False))
    return code


if __name__ == '__main__':
    sys.exit(main())
