"""
配置管理模块
负责加载、校验和保存工具配置（严格模式：未知键报错）
"""
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional, TypeVar, Union

from core.augment.pipeline import PipelineSpec
from core.ensemble import EnsembleSpec
from core.exceptions import ConfigError, LabelSchemeError
from core.metrics import MetricParams
from core.volume import LabelScheme
from utils.file_utils import atomic_write_json
from utils.validators import Validators

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SEED_ENV_VAR = "NEUROVOLVE_SEED"

T = TypeVar("T")


@dataclass(frozen=True)
class ToolConfig:
    """解析后的工具配置"""
    label_scheme: LabelScheme
    pipeline: PipelineSpec
    ensemble: EnsembleSpec
    metrics: MetricParams
    workers: int
    global_seed: int
    seed_source: str = "pipeline"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label_scheme": self.label_scheme.to_dict(),
            "pipeline": self.pipeline.to_dict(),
            "ensemble": self.ensemble.to_dict(),
            "metrics": self.metrics.to_dict(),
            "workers": self.workers,
            "global_seed": self.global_seed,
        }


def _build_section(key: str, build: Callable[[Dict[str, Any]], T], values: Any) -> T:
    """构建配置节；类型错误统一转换为带键名的 ConfigError"""
    if not isinstance(values, dict):
        raise ConfigError(f"配置节必须是对象，当前值: {values!r}", key=key)
    try:
        return build(values)
    except ConfigError:
        raise
    except (LabelSchemeError, TypeError, ValueError, AttributeError) as e:
        raise ConfigError(str(e), key=key)


class ConfigManager:
    """工具配置管理器"""

    def __init__(self, config_file: Optional[PathLike] = None, environ: Optional[Dict[str, str]] = None):
        """
        初始化配置管理器

        Args:
            config_file: 配置文件路径；None 时只使用默认配置
            environ: 环境变量（默认 os.environ）
        """
        self.config_file = Path(config_file) if config_file is not None else None
        self.environ = os.environ if environ is None else environ
        self.default_settings: Dict[str, Any] = {
            "label_scheme": LabelScheme().to_dict(),
            "pipeline": {},
            "ensemble": {},
            "metrics": {},
            "workers": None,
            "global_seed": None,
        }
        self.settings = self.load_settings()

    def load_settings(self) -> Dict[str, Any]:
        """
        从文件加载设置并与默认设置合并

        Returns:
            设置字典

        Raises:
            ConfigError: 文件不存在、JSON 语法错误或出现未知键
        """
        settings = dict(self.default_settings)
        if self.config_file is None:
            return settings
        if not self.config_file.is_file():
            raise ConfigError(f"配置文件不存在: {self.config_file}")
        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件格式错误: {e.msg}（列 {e.colno}）", line=e.lineno)
        if not isinstance(loaded, dict):
            raise ConfigError("配置文件顶层必须是 JSON 对象")
        for key in loaded:
            if key not in self.default_settings:
                raise ConfigError(f"未知配置项，允许: {sorted(self.default_settings)}", key=key)
        settings.update(loaded)
        logger.debug("已加载配置文件: %s", self.config_file)
        return settings

    def save_settings(self, path: Optional[PathLike] = None) -> Path:
        """保存当前设置到文件"""
        target = Path(path) if path is not None else self.config_file
        if target is None:
            raise ConfigError("没有指定配置文件路径")
        atomic_write_json(target, self.settings)
        return target

    def _env_seed(self) -> Optional[int]:
        raw = self.environ.get(SEED_ENV_VAR)
        if raw is None or raw.strip() == "":
            return None
        try:
            return int(raw.strip(), 0)
        except ValueError:
            raise ConfigError(f"环境变量 {SEED_ENV_VAR} 不是整数: {raw!r}", key=SEED_ENV_VAR)

    def build(self) -> ToolConfig:
        """
        构建类型化配置

        种子优先级：环境变量 NEUROVOLVE_SEED > 配置 global_seed > pipeline.global_seed

        Returns:
            ToolConfig
        """
        s = self.settings

        scheme_values = s["label_scheme"] or {}
        allowed = set(LabelScheme().to_dict())
        for key in scheme_values if isinstance(scheme_values, dict) else ():
            if key not in allowed:
                raise ConfigError(f"未知配置项，允许: {sorted(allowed)}", key=f"label_scheme.{key}")
        scheme = _build_section("label_scheme", LabelScheme.from_dict, scheme_values)
        pipeline = _build_section("pipeline", PipelineSpec.from_dict, s["pipeline"] or {})
        ensemble = _build_section("ensemble", EnsembleSpec.from_dict, s["ensemble"] or {})
        metrics = _build_section("metrics", MetricParams.from_dict, s["metrics"] or {})

        workers = s["workers"]
        if workers is None:
            workers = os.cpu_count() or 1
        ok, msg = Validators.validate_worker_count(workers)
        if not ok:
            raise ConfigError(msg, key="workers")

        env_seed = self._env_seed()
        if env_seed is not None:
            seed, source = env_seed, "env"
        elif s["global_seed"] is not None:
            if not isinstance(s["global_seed"], int) or isinstance(s["global_seed"], bool):
                raise ConfigError(f"global_seed 必须是整数: {s['global_seed']!r}", key="global_seed")
            seed, source = s["global_seed"], "config"
        else:
            seed, source = pipeline.global_seed, "pipeline"

        return ToolConfig(scheme, pipeline.with_seed(seed), ensemble, metrics, workers, seed, source)
