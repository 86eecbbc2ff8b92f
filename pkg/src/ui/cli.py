"""
命令行界面
子命令：expand（离线扩增）、score（评估）、fuse（模型融合）、phantom（体模生成）、preview（预览图）
退出码：0 成功，1 部分失败，2 用法/配置错误
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from core.augment.pipeline import REPORT_FILENAME, expand_dataset
from core.ensemble import fuse_case_set
from core.exceptions import ConfigError, EnsembleError, NeuroVolveError, PreviewError
from core.file_manager import FileManager
from core.image_processor import DEFAULT_GUTTER, ImageProcessor
from core.metrics import REGIONS, score_directories
from core.phantom import PhantomSpec, generate_dataset
from core.settings_manager import ConfigManager, ToolConfig
from utils.validators import Validators

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2

DEFAULT_PHANTOM_JITTER = 0.1


class NeuroVolveCLI:
    """命令行应用"""

    def __init__(self):
        self.parser = self.build_parser()

    def build_parser(self) -> argparse.ArgumentParser:
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument("--workers", type=int, default=None, help="并行进程数（默认取配置或 CPU 核数）")
        common.add_argument("--log-level", default="WARNING",
                            choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="日志级别")

        parser = argparse.ArgumentParser(prog="neurovolve", description="脑肿瘤 MRI 体数据增强、融合与评估工具")
        sub = parser.add_subparsers(dest="command", required=True)

        p = sub.add_parser("expand", parents=[common], help="离线扩增数据集")
        p.add_argument("--input", required=True, help="输入病例根目录")
        p.add_argument("--output", required=True, help="输出根目录")
        p.add_argument("--config", help="JSON 配置文件")
        p.add_argument("--replicates", type=int, required=True, help="每个病例的增强副本数")
        p.add_argument("--include-originals", action="store_true", help="同时复制原始病例")
        p.set_defaults(handler=self.cmd_expand)

        p = sub.add_parser("score", parents=[common], help="计算 LSD / NSD")
        p.add_argument("--gt", required=True, help="真值目录")
        p.add_argument("--pred", required=True, help="预测目录")
        p.add_argument("--out", required=True, help="CSV 输出路径")
        p.add_argument("--json", help="可选的 JSON 输出路径")
        p.add_argument("--config", help="JSON 配置文件")
        p.set_defaults(handler=self.cmd_score)

        p = sub.add_parser("fuse", parents=[common], help="融合多个模型的预测")
        p.add_argument("--members", nargs="+", required=True, help="成员预测目录")
        p.add_argument("--output", required=True, help="输出目录")
        p.add_argument("--config", help="JSON 配置文件")
        p.set_defaults(handler=self.cmd_fuse)

        p = sub.add_parser("phantom", parents=[common], help="生成合成体模数据集")
        p.add_argument("--count", type=int, required=True, help="病例数")
        p.add_argument("--output", required=True, help="输出根目录")
        p.add_argument("--spec", help="体模规格 JSON")
        p.add_argument("--validation", type=int, default=0, help="验证集病例数（>0 时分 training/validation）")
        p.add_argument("--seed", type=int, help="覆盖规格中的种子")
        p.add_argument("--jitter", type=float, default=DEFAULT_PHANTOM_JITTER, help="相对几何扰动幅度")
        p.set_defaults(handler=self.cmd_phantom)

        p = sub.add_parser("preview", parents=[common], help="生成轴位切片预览图")
        p.add_argument("--case", required=True, help="病例目录")
        p.add_argument("--slice", type=int, required=True, help="轴位切片索引")
        p.add_argument("--out", required=True, help="PNG 输出路径")
        p.add_argument("--gutter", type=int, default=DEFAULT_GUTTER, help="面板间隔像素")
        p.add_argument("--config", help="JSON 配置文件")
        p.set_defaults(handler=self.cmd_preview)
        return parser

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """
        解析参数并执行子命令

        Returns:
            退出码
        """
        args = self.parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, args.log_level),
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        ok, msg = Validators.validate_worker_count(args.workers)
        if not ok:
            self.parser.error(msg)
        try:
            return args.handler(args)
        except ConfigError as e:
            print(f"配置错误: {e}", file=sys.stderr)
            return EXIT_USAGE

    def _config(self, args: argparse.Namespace) -> ToolConfig:
        config = ConfigManager(getattr(args, "config", None)).build()
        if args.workers is not None:
            config = replace(config, workers=args.workers)
        return config

    def cmd_expand(self, args: argparse.Namespace) -> int:
        ok, msg = Validators.validate_replicates(args.replicates)
        if not ok:
            self.parser.error(msg)
        config = self._config(args)
        report = expand_dataset(args.input, args.output, config.pipeline, args.replicates,
                                config.label_scheme, args.include_originals, config.workers)
        print(f"扩增报告: {Path(args.output) / REPORT_FILENAME}")
        print(f"读取 {len(report.cases_read)} 例，写出 {len(report.written)} 例（种子 {config.global_seed}）")
        if report.failed_count or not report.cases_read:
            print(f"失败病例数: {report.failed_count}", file=sys.stderr)
            return EXIT_PARTIAL
        return EXIT_OK

    def cmd_score(self, args: argparse.Namespace) -> int:
        config = self._config(args)
        report = score_directories(args.gt, args.pred, config.label_scheme, config.metrics, config.workers)
        report.to_csv(args.out)
        if args.json:
            report.to_json(args.json)
        if report.is_empty:
            print("没有可配对评估的病例", file=sys.stderr)
            return EXIT_PARTIAL
        for region in REGIONS:
            mean = report.means[region]
            print(f"{region.value}: LSD={mean.lsd:.3f} NSD={mean.nsd:.3f}")
        print(f"AVG: LSD={report.avg_lsd:.3f} NSD={report.avg_nsd:.3f}")
        if report.missing:
            print(f"缺少对应病例: {', '.join(report.missing)}", file=sys.stderr)
            return EXIT_PARTIAL
        return EXIT_OK

    def cmd_fuse(self, args: argparse.Namespace) -> int:
        config = self._config(args)
        try:
            report = fuse_case_set(args.members, args.output, config.ensemble, config.label_scheme, config.workers)
        except EnsembleError as e:
            print(f"融合参数错误: {e}", file=sys.stderr)
            return EXIT_USAGE
        print(f"融合完成: {len(report.fused)} 例（{report.mode}）")
        if report.failed_count:
            print(f"跳过病例数: {report.failed_count}", file=sys.stderr)
            return EXIT_PARTIAL
        return EXIT_OK

    def cmd_phantom(self, args: argparse.Namespace) -> int:
        ok, msg = Validators.validate_case_count(args.count)
        if not ok:
            self.parser.error(msg)
        if not (0 <= args.validation <= args.count):
            self.parser.error(f"验证集病例数必须在 0-{args.count} 之间，当前值: {args.validation}")
        if args.jitter < 0:
            self.parser.error(f"jitter 不能为负，当前值: {args.jitter}")
        try:
            spec = PhantomSpec.load(args.spec) if args.spec else PhantomSpec()
            if args.seed is not None:
                spec = replace(spec, seed=args.seed)
        except (NeuroVolveError, OSError) as e:
            print(f"体模规格错误: {e}", file=sys.stderr)
            return EXIT_USAGE
        written = generate_dataset(args.count, spec, args.jitter, args.output, args.validation,
                                   workers=args.workers or 1)
        print(f"已生成 {len(written)} 个体模病例: {args.output}")
        return EXIT_OK

    def cmd_preview(self, args: argparse.Namespace) -> int:
        config = self._config(args)
        try:
            case = FileManager.load_case(args.case, config.label_scheme)
        except (NeuroVolveError, OSError) as e:
            print(f"无法读取病例: {FileManager.describe_failure(e)}", file=sys.stderr)
            return EXIT_PARTIAL
        try:
            image = ImageProcessor.create_preview(case, args.slice, config.label_scheme, args.gutter)
        except PreviewError as e:
            print(f"预览参数错误: {e}", file=sys.stderr)
            return EXIT_USAGE
        path = ImageProcessor.save_png(image, args.out)
        print(f"预览图: {path}（{image.width}×{image.height}）")
        return EXIT_OK


def run(argv: Optional[List[str]] = None) -> int:
    return NeuroVolveCLI().run(argv)
