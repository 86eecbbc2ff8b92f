"""
异常定义模块
工具箱内所有可预期错误的统一层次结构
"""
from typing import Optional


class NeuroVolveError(Exception):
    """工具箱错误基类"""


class NiftiFormatError(NeuroVolveError, ValueError):
    """NIfTI 文件格式错误（携带文件路径与出错字段）"""

    def __init__(self, message: str, path: str = "", field: Optional[str] = None):
        self.path = str(path)
        self.field = field
        detail = f" [字段: {field}]" if field else ""
        super().__init__(f"{message}: {self.path}{detail}")


class GeometryMismatchError(NeuroVolveError, ValueError):
    """体数据网格（尺寸/间距/仿射）不一致"""


class LabelSchemeError(NeuroVolveError, ValueError):
    """标签值不在标签方案内"""


class MissingModalityError(NeuroVolveError, FileNotFoundError):
    """病例目录缺少模态文件"""

    def __init__(self, modality: str, directory: str):
        self.modality = modality
        self.directory = str(directory)
        super().__init__(f"缺少模态 {modality}: {self.directory}")


class AugmentationError(NeuroVolveError, ValueError):
    """数据增强参数或输入错误"""


class MetricError(NeuroVolveError, ValueError):
    """评估指标输入错误"""


class EnsembleError(NeuroVolveError, ValueError):
    """模型融合输入错误"""


class PhantomSpecError(NeuroVolveError, ValueError):
    """体模规格不满足嵌套/包含约束"""


class PreviewError(NeuroVolveError, ValueError):
    """预览图参数错误（如切片越界）"""


class ConfigError(NeuroVolveError, ValueError):
    """配置文件错误（携带键名与行号）"""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        context = []
        if key:
            context.append(f"键: {key}")
        if line is not None:
            context.append(f"行: {line}")
        suffix = f" ({', '.join(context)})" if context else ""
        super().__init__(f"{message}{suffix}")
