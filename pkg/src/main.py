"""
NeuroVolve - 脑肿瘤 MRI 体数据工具箱
主程序入口
"""
import os
import sys

# 添加 src 目录到路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from ui.cli import EXIT_USAGE, NeuroVolveCLI


def main() -> int:
    """主函数"""
    try:
        app = NeuroVolveCLI()
        return app.run()
    except KeyboardInterrupt:
        print("已中断", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"程序运行失败: {e}", file=sys.stderr)
        import traceback
        traceback.print_exc()
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
