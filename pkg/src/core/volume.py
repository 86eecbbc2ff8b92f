"""
体数据核心模块
提供三维体数据、BraTS 标签方案、肿瘤子区域与病例模型
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, FrozenSet, Iterator, Optional, Tuple

import numpy as np

from core.exceptions import GeometryMismatchError, LabelSchemeError

logger = logging.getLogger(__name__)

# 同一病例内各体数据间距/仿射允许的差异（mm）
GEOMETRY_TOLERANCE_MM = 1e-3


class VolumeKind(str, Enum):
    """体数据类型：连续强度或整数标签"""
    INTENSITY = "intensity"
    LABEL = "label"


class Region(str, Enum):
    """肿瘤评估子区域（嵌套：ET ⊆ TC ⊆ WT）"""
    ET = "ET"
    TC = "TC"
    WT = "WT"


class Modality(str, Enum):
    """MRI 序列，值为 BraTS 文件名后缀"""
    T1 = "t1n"
    T1CE = "t1c"
    T2 = "t2w"
    FLAIR = "t2f"


MODALITY_ORDER: Tuple[Modality, ...] = (Modality.T1, Modality.T1CE, Modality.T2, Modality.FLAIR)


@dataclass(frozen=True)
class Volume3D:
    """
    三维标量网格

    数据以 (nx, ny, nz) 数组保存，按 [x, y, z] 索引；展平时 x 变化最快（见 flat）。
    标签存为 int32；强度保留 float64，其余类型转为 float32。
    构造后数组被置为只读，可在多个工作进程/线程间共享。
    """
    data: np.ndarray
    spacing: Tuple[float, float, float]
    affine: np.ndarray
    kind: VolumeKind = VolumeKind.INTENSITY

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise GeometryMismatchError(f"体数据必须是三维且各维度为正，当前形状: {data.shape}")

        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise GeometryMismatchError(f"体素间距必须为三个正数，当前值: {self.spacing}")

        affine = np.array(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise GeometryMismatchError(f"仿射矩阵必须为 4×4，当前形状: {affine.shape}")
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise GeometryMismatchError("仿射矩阵左上 3×3 部分奇异")

        kind = VolumeKind(self.kind)
        if kind == VolumeKind.LABEL:
            if not np.issubdtype(data.dtype, np.integer):
                rounded = np.rint(data)
                if not np.array_equal(rounded, data):
                    raise LabelSchemeError("标签体数据包含非整数值")
                data = rounded
            if data.size and data.min() < 0:
                raise LabelSchemeError(f"标签体数据包含负值: {int(data.min())}")
            data = data.astype(np.int32, copy=False)
        elif data.dtype != np.float64:
            data = data.astype(np.float32, copy=False)

        data = np.array(data, copy=True)
        data.setflags(write=False)
        affine.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "kind", kind)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def flat(self) -> np.ndarray:
        """x 变化最快的一维视图（长度 nx·ny·nz）"""
        return self.data.ravel(order="F")

    @property
    def is_label(self) -> bool:
        return self.kind == VolumeKind.LABEL

    @classmethod
    def from_flat(cls, flat: np.ndarray, dims: Tuple[int, int, int],
                  spacing: Tuple[float, float, float], affine: Optional[np.ndarray] = None,
                  kind: VolumeKind = VolumeKind.INTENSITY) -> "Volume3D":
        """
        由 x 最快顺序的一维数组构建体数据

        Args:
            flat: 长度为 nx·ny·nz 的数组
            dims: (nx, ny, nz)
            spacing: 体素间距（mm）
            affine: 仿射矩阵，None 时使用 diag(spacing)
            kind: 体数据类型

        Returns:
            Volume3D
        """
        flat = np.asarray(flat)
        expected = int(np.prod(dims))
        if flat.size != expected:
            raise GeometryMismatchError(f"数据长度 {flat.size} 与尺寸 {dims} 不符（应为 {expected}）")
        if affine is None:
            affine = np.diag([*spacing, 1.0])
        return cls(flat.reshape(dims, order="F"), spacing, affine, kind)

    def with_data(self, data: np.ndarray, kind: Optional[VolumeKind] = None) -> "Volume3D":
        """在同一网格上创建新的体数据"""
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise GeometryMismatchError(f"新数据形状 {data.shape} 与网格 {self.dims} 不符")
        return Volume3D(data, self.spacing, self.affine, kind or self.kind)

    def grid_difference(self, other: "Volume3D", tolerance: float = GEOMETRY_TOLERANCE_MM) -> Optional[str]:
        """返回网格差异描述，一致时返回 None"""
        if self.dims != other.dims:
            return f"尺寸 {self.dims} ≠ {other.dims}"
        if not np.allclose(self.spacing, other.spacing, rtol=0.0, atol=tolerance):
            return f"间距 {self.spacing} ≠ {other.spacing}"
        if not np.allclose(self.affine, other.affine, rtol=0.0, atol=tolerance):
            return "仿射矩阵不同"
        return None


@dataclass(frozen=True)
class LabelScheme:
    """
    BraTS 标签方案

    默认 {0 背景, 1 坏死核心 NCR, 2 水肿 ED, 3 增强肿瘤 ET}；
    复合区域 ET = {et}, TC = {ncr, et}, WT = {ncr, ed, et}。
    """
    background: int = 0
    ncr: int = 1
    ed: int = 2
    et: int = 3

    def __post_init__(self):
        values = [self.background, self.ncr, self.ed, self.et]
        if not all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in values):
            raise LabelSchemeError(f"标签值必须是整数: {values}")
        if len(set(values)) != 4:
            raise LabelSchemeError(f"标签方案中的四个整数必须两两不同: {values}")
        if any(v < 0 for v in values):
            raise LabelSchemeError(f"标签值不能为负: {values}")

    @property
    def labels(self) -> FrozenSet[int]:
        return frozenset((self.background, self.ncr, self.ed, self.et))

    @property
    def sorted_labels(self) -> Tuple[int, ...]:
        return tuple(sorted(self.labels))

    def composite(self, region: Region) -> FrozenSet[int]:
        region = Region(region)
        if region == Region.ET:
            return frozenset((self.et,))
        if region == Region.TC:
            return frozenset((self.ncr, self.et))
        return frozenset((self.ncr, self.ed, self.et))

    def unknown_labels(self, seg: Volume3D) -> Tuple[int, ...]:
        """返回标签体数据中不属于本方案的标签值"""
        present = np.unique(seg.data)
        return tuple(int(v) for v in present if int(v) not in self.labels)

    def check(self, seg: Volume3D) -> None:
        unknown = self.unknown_labels(seg)
        if unknown:
            raise LabelSchemeError(f"分割中存在方案外标签: {list(unknown)}（方案: {sorted(self.labels)}）")

    @classmethod
    def from_dict(cls, values: Dict[str, int]) -> "LabelScheme":
        return cls(**values)

    def to_dict(self) -> Dict[str, int]:
        return {"background": self.background, "ncr": self.ncr, "ed": self.ed, "et": self.et}


@dataclass(frozen=True)
class RegionMask:
    """二值区域掩膜"""
    region: Region
    mask: Volume3D

    def __post_init__(self):
        if not self.mask.is_label or not np.isin(self.mask.data, (0, 1)).all():
            raise LabelSchemeError("区域掩膜必须是 {0,1} 二值标签体数据")

    @property
    def array(self) -> np.ndarray:
        return self.mask.data.astype(bool)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.mask.data))


def region_mask(seg: Volume3D, region: Region, scheme: LabelScheme) -> RegionMask:
    """
    由标签体数据提取子区域掩膜

    Args:
        seg: 标签体数据
        region: ET / TC / WT
        scheme: 标签方案

    Returns:
        RegionMask（体素属于区域复合标签集时为 1）
    """
    if not seg.is_label:
        raise LabelSchemeError("region_mask 需要标签体数据")
    scheme.check(seg)
    composite = sorted(scheme.composite(region))
    mask = np.isin(seg.data, composite).astype(np.uint8)
    return RegionMask(Region(region), seg.with_data(mask, VolumeKind.LABEL))


@dataclass(frozen=True)
class Case:
    """
    单个受试者：四个模态 + 可选分割

    所有体数据必须位于同一网格。
    """
    case_id: str
    modalities: Dict[Modality, Volume3D]
    segmentation: Optional[Volume3D] = None

    def __post_init__(self):
        modalities = {Modality(k): v for k, v in self.modalities.items()}
        object.__setattr__(self, "modalities", modalities)
        if not modalities:
            raise GeometryMismatchError(f"病例 {self.case_id} 没有任何模态")
        for modality, vol in modalities.items():
            if vol.is_label:
                raise GeometryMismatchError(f"模态 {modality.name} 必须是强度体数据")
        if self.segmentation is not None and not self.segmentation.is_label:
            raise GeometryMismatchError("分割必须是标签体数据")

        reference_name, reference = next(iter(self._named_volumes()))
        for name, vol in self._named_volumes():
            diff = reference.grid_difference(vol)
            if diff is not None:
                raise GeometryMismatchError(
                    f"病例 {self.case_id} 网格不一致: {name} 与 {reference_name} {diff}")

    def _named_volumes(self) -> Iterator[Tuple[str, Volume3D]]:
        for modality in MODALITY_ORDER:
            if modality in self.modalities:
                yield modality.name, self.modalities[modality]
        if self.segmentation is not None:
            yield "SEG", self.segmentation

    @property
    def reference(self) -> Volume3D:
        return next(iter(self._named_volumes()))[1]

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.reference.dims

    @property
    def spacing(self) -> Tuple[float, float, float]:
        return self.reference.spacing

    @property
    def affine(self) -> np.ndarray:
        return self.reference.affine

    def volumes(self) -> Iterator[Tuple[str, Volume3D]]:
        """按固定顺序（T1, T1CE, T2, FLAIR, SEG）遍历所有体数据"""
        return self._named_volumes()

    def map_volumes(self, intensity_fn: Callable[[Modality, np.ndarray], np.ndarray],
                    label_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> "Case":
        """
        对所有体数据应用同一变换，返回新病例

        Args:
            intensity_fn: (模态, 强度数组) -> 新数组
            label_fn: 标签数组 -> 新数组，None 时分割保持不变

        Returns:
            新的 Case（网格不变）
        """
        modalities = {
            modality: vol.with_data(intensity_fn(modality, vol.data))
            for modality, vol in self.modalities.items()
        }
        segmentation = self.segmentation
        if segmentation is not None and label_fn is not None:
            segmentation = segmentation.with_data(label_fn(segmentation.data))
        return Case(self.case_id, modalities, segmentation)

    def with_id(self, case_id: str) -> "Case":
        return Case(case_id, dict(self.modalities), self.segmentation)

    def equals(self, other: "Case") -> bool:
        """逐体素比较（忽略病例编号）"""
        if set(self.modalities) != set(other.modalities):
            return False
        for modality, vol in self.modalities.items():
            if not np.array_equal(vol.data, other.modalities[modality].data):
                return False
        if (self.segmentation is None) != (other.segmentation is None):
            return False
        if self.segmentation is not None:
            return bool(np.array_equal(self.segmentation.data, other.segmentation.data))
        return True
