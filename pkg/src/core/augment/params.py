"""
增强变换参数
每种变换一个参数类，支持严格的 JSON 字典解析（未知键报错）
"""
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Sequence, Tuple, Type, TypeVar, Union

from core.exceptions import ConfigError
from utils.validators import Validators

Range = Tuple[float, float]
AxisRanges = Tuple[Range, Range, Range]
RangeLike = Union[float, Sequence[float], Sequence[Sequence[float]]]

P = TypeVar("P")


def per_axis_ranges(value: RangeLike, name: str, symmetric_scalar: bool = True) -> AxisRanges:
    """
    将区间参数规范化为三个轴的 (下限, 上限)

    Args:
        value: 标量 a（→ (-a, a)）、一个区间或三个区间
        name: 参数名
        symmetric_scalar: 是否允许标量写法

    Returns:
        ((lo, hi), (lo, hi), (lo, hi))
    """
    if isinstance(value, (int, float)):
        if not symmetric_scalar:
            raise ConfigError(f"{name} 需要区间而不是标量", key=name)
        a = abs(float(value))
        return ((-a, a),) * 3
    items = list(value)
    if len(items) == 2 and all(isinstance(v, (int, float)) for v in items):
        pair = (float(items[0]), float(items[1]))
        ranges = (pair,) * 3
    elif len(items) == 3:
        ranges = tuple((float(lo), float(hi)) for lo, hi in items)
    else:
        raise ConfigError(f"{name} 格式无法识别: {value!r}", key=name)
    for axis_range in ranges:
        ok, msg = Validators.validate_range(axis_range, name)
        if not ok:
            raise ConfigError(msg, key=name)
    return ranges


def _check_keys(cls: type, data: Dict[str, Any], path: str) -> None:
    allowed = {f.name for f in fields(cls)}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"未知配置项，允许: {sorted(allowed)}", key=f"{path}.{key}")


def _to_jsonable(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_to_jsonable(v) for v in value]
    return value


class _ParamsMixin:
    @classmethod
    def from_dict(cls: Type[P], data: Dict[str, Any], path: str = "parameters") -> P:
        _check_keys(cls, data, path)
        try:
            return cls(**data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"参数无效: {e}", key=path)

    def to_dict(self) -> Dict[str, Any]:
        return {k: _to_jsonable(v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class AffineParams(_ParamsMixin):
    """旋转（度）、缩放、平移（mm）的采样区间，按 x/y/z 轴给出"""
    rotation_deg: RangeLike = (-10.0, 10.0)
    scale: RangeLike = (0.9, 1.1)
    translation_mm: RangeLike = (-5.0, 5.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation_deg", per_axis_ranges(self.rotation_deg, "rotation_deg"))
        object.__setattr__(self, "scale", per_axis_ranges(self.scale, "scale", symmetric_scalar=False))
        object.__setattr__(self, "translation_mm", per_axis_ranges(self.translation_mm, "translation_mm"))
        if any(hi <= 0 for _, hi in self.scale):
            raise ConfigError(f"缩放区间上限必须为正: {self.scale}", key="scale")


@dataclass(frozen=True)
class FlipParams(_ParamsMixin):
    """x/y/z 各轴的翻转概率（默认只翻转左右轴 x）"""
    axes_probabilities: Tuple[float, float, float] = (0.5, 0.0, 0.0)

    def __post_init__(self):
        probs = tuple(float(p) for p in self.axes_probabilities)
        if len(probs) != 3:
            raise ConfigError(f"需要三个轴的翻转概率: {self.axes_probabilities}", key="axes_probabilities")
        for p in probs:
            ok, msg = Validators.validate_probability(p, "axes_probabilities")
            if not ok:
                raise ConfigError(msg, key="axes_probabilities")
        object.__setattr__(self, "axes_probabilities", probs)


@dataclass(frozen=True)
class BiasFieldParams(_ParamsMixin):
    order: int = 3
    coefficient_range: Tuple[float, float] = (-0.3, 0.3)

    def __post_init__(self):
        if not isinstance(self.order, int) or self.order < 0:
            raise ConfigError(f"偏置场阶数必须 ≥ 0: {self.order}", key="order")
        rng = tuple(float(v) for v in self.coefficient_range)
        ok, msg = Validators.validate_range(rng, "coefficient_range")
        if not ok:
            raise ConfigError(msg, key="coefficient_range")
        object.__setattr__(self, "coefficient_range", rng)


def _check_elastic(grid_shape: Sequence[int], max_displacement_mm: float) -> Tuple[int, int, int]:
    shape = tuple(int(n) for n in grid_shape)
    ok, msg = Validators.validate_grid_shape(shape)
    if not ok:
        raise ConfigError(msg, key="grid_shape")
    ok, msg = Validators.validate_non_negative(max_displacement_mm, "max_displacement_mm")
    if not ok:
        raise ConfigError(msg, key="max_displacement_mm")
    return shape


@dataclass(frozen=True)
class ElasticParams(_ParamsMixin):
    grid_shape: Tuple[int, int, int] = (7, 7, 7)
    max_displacement_mm: float = 6.0

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", _check_elastic(self.grid_shape, self.max_displacement_mm))
        object.__setattr__(self, "max_displacement_mm", float(self.max_displacement_mm))


@dataclass(frozen=True)
class LabelMaskedElasticParams(_ParamsMixin):
    """肿瘤区域内弹性形变：位移上限大于全脑弹性形变"""
    grid_shape: Tuple[int, int, int] = (7, 7, 7)
    max_displacement_mm: float = 10.0
    dilation_vox: int = 5
    sigma_vox: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", _check_elastic(self.grid_shape, self.max_displacement_mm))
        object.__setattr__(self, "max_displacement_mm", float(self.max_displacement_mm))
        if not isinstance(self.dilation_vox, int) or self.dilation_vox < 0:
            raise ConfigError(f"膨胀体素数必须是非负整数: {self.dilation_vox}", key="dilation_vox")
        ok, msg = Validators.validate_non_negative(self.sigma_vox, "sigma_vox")
        if not ok:
            raise ConfigError(msg, key="sigma_vox")
        object.__setattr__(self, "sigma_vox", float(self.sigma_vox))
