"""
弹性形变模块
粗控制网格随机位移 → 三线性上采样为稠密位移场 → 反向采样；
以及只在肿瘤区域内生效的标签掩膜弹性形变
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from core.augment.rng import RngStream
from core.exceptions import AugmentationError
from core.volume import Case, LabelScheme, Region, region_mask
from utils.validators import Validators

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DisplacementField:
    """稠密位移场，vectors 形状 (3, nx, ny, nz)，单位 mm"""
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 4 or vectors.shape[0] != 3:
            raise AugmentationError(f"位移场形状必须为 (3, nx, ny, nz)，当前: {vectors.shape}")
        if not np.isfinite(vectors).all():
            raise AugmentationError("位移场包含非有限值")
        object.__setattr__(self, "vectors", vectors)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.vectors.shape[1:])

    @property
    def is_zero(self) -> bool:
        return not np.any(self.vectors)

    def weighted(self, weight: np.ndarray) -> "DisplacementField":
        """逐体素乘以权重 w(x)"""
        if weight.shape != self.dims:
            raise AugmentationError(f"权重形状 {weight.shape} 与位移场 {self.dims} 不符")
        return DisplacementField(self.vectors * weight[None])

    def max_norm(self) -> float:
        return float(np.sqrt((self.vectors ** 2).sum(axis=0)).max())


def sample_control_grid(grid_shape: Sequence[int], max_disp_mm: float, rng: RngStream) -> np.ndarray:
    """
    采样控制点位移，各分量均匀分布于 [-max, +max]，边界控制点固定为 0

    Returns:
        形状 (3, gx, gy, gz) 的数组
    """
    ok, msg = Validators.validate_grid_shape(tuple(int(n) for n in grid_shape))
    if not ok:
        raise AugmentationError(msg)
    if max_disp_mm < 0:
        raise AugmentationError(f"最大位移不能为负: {max_disp_mm}")
    control = rng.uniform_array(-max_disp_mm, max_disp_mm, (3, *grid_shape))
    control[:, [0, -1], :, :] = 0.0
    control[:, :, [0, -1], :] = 0.0
    control[:, :, :, [0, -1]] = 0.0
    return control


def upsample_control_grid(control: np.ndarray, dims: Sequence[int]) -> DisplacementField:
    """
    将控制网格三线性插值到稠密网格

    控制点 k 位于体素坐标 k·(n-1)/(g-1)，首尾控制点与体数据边界面重合。
    """
    grid_shape = control.shape[1:]
    axes = [np.linspace(0.0, g - 1.0, int(n)) if n > 1 else np.zeros(1) for g, n in zip(grid_shape, dims)]
    coords = np.meshgrid(*axes, indexing="ij")
    vectors = np.stack([
        ndimage.map_coordinates(control[c], coords, order=1, mode="nearest")
        for c in range(3)
    ])
    return DisplacementField(vectors)


def random_elastic_field(dims: Sequence[int], grid_shape: Sequence[int], max_disp_mm: float,
                         rng: RngStream) -> DisplacementField:
    """采样一个稠密弹性位移场"""
    return upsample_control_grid(sample_control_grid(grid_shape, max_disp_mm, rng), dims)


def warp_array(data: np.ndarray, field: DisplacementField, spacing: Sequence[float], order: int) -> np.ndarray:
    """
    反向采样：输出体素 x 取输入在 x − u(x) 处的值，越界填 0

    Args:
        data: 三维数组
        field: 位移场（mm）
        spacing: 体素间距（mm）
        order: 1 为三线性（强度），0 为最近邻（标签）

    Returns:
        形变后的数组
    """
    if data.shape != field.dims:
        raise AugmentationError(f"数据形状 {data.shape} 与位移场 {field.dims} 不符")
    s = np.asarray(spacing, dtype=np.float64)[:, None, None, None]
    coords = np.indices(data.shape, dtype=np.float64) - field.vectors / s
    source = data.astype(np.float64) if order > 0 else data
    return ndimage.map_coordinates(source, coords, order=order, mode="constant", cval=0, prefilter=False)


def warp_case(case: Case, field: DisplacementField, keep: Optional[np.ndarray] = None) -> Case:
    """
    用同一个位移场形变病例的全部体数据

    Args:
        case: 病例
        field: 位移场
        keep: 可选布尔掩膜，为 True 的体素原样保留输入值

    Returns:
        新病例
    """
    if field.is_zero:
        return case

    def finish(original: np.ndarray, warped: np.ndarray) -> np.ndarray:
        if keep is None:
            return warped
        return np.where(keep, original, warped)

    return case.map_volumes(
        lambda _m, data: finish(data, warp_array(data, field, case.spacing, order=1)),
        lambda data: finish(data, warp_array(data, field, case.spacing, order=0)),
    )


def random_elastic(case: Case, grid_shape: Sequence[int], max_disp_mm: float, rng: RngStream) -> Case:
    """
    全脑随机弹性形变

    Args:
        case: 病例
        grid_shape: 控制网格（每轴 ≥ 2）
        max_disp_mm: 控制点位移分量上限（mm，≥ 0）
        rng: 随机流

    Returns:
        新病例
    """
    field = random_elastic_field(case.dims, grid_shape, max_disp_mm, rng)
    logger.debug("弹性形变: 最大位移 %.3f mm", field.max_norm())
    return warp_case(case, field)


def tumor_weight(wt: np.ndarray, dilation_vox: int, sigma_vox: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    计算肿瘤区域软权重 w(x) ∈ [0, 1]

    先以 26 连通结构元把 WT 膨胀 dilation_vox 次，再做标准差 sigma_vox 的高斯平滑 s；
    取 s_edge 为膨胀区域外的最大值、s_wt 为 WT 上的最小值，
    w = clip((s − s_edge) / (s_wt − s_edge), 0, 1)。
    因此 WT 上 w = 1，膨胀区域外 w = 0。

    Args:
        wt: WT 布尔掩膜（非空）
        dilation_vox: 膨胀体素数
        sigma_vox: 平滑标准差（体素）

    Returns:
        (权重数组, 膨胀后的支撑区域)
    """
    if dilation_vox > 0:
        structure = ndimage.generate_binary_structure(3, 3)
        support = ndimage.binary_dilation(wt, structure=structure, iterations=dilation_vox)
    else:
        support = wt.copy()

    if sigma_vox <= 0:
        return support.astype(np.float64), support

    smoothed = ndimage.gaussian_filter(support.astype(np.float64), sigma_vox)
    outside = ~support
    s_edge = float(smoothed[outside].max()) if outside.any() else 0.0
    s_wt = float(smoothed[wt].min())
    if s_wt <= s_edge:
        logger.warning("平滑后肿瘤权重无法归一化（s_wt=%.4f ≤ s_edge=%.4f），改用硬掩膜", s_wt, s_edge)
        return wt.astype(np.float64), support
    weight = np.clip((smoothed - s_edge) / (s_wt - s_edge), 0.0, 1.0)
    weight[outside] = 0.0
    return weight, support


def label_masked_elastic(case: Case, scheme: LabelScheme, grid_shape: Sequence[int], max_disp_mm: float,
                         dilation_vox: int, sigma_vox: float, rng: RngStream) -> Case:
    """
    标签掩膜弹性形变：只在肿瘤（WT）及其邻域内形变，周围脑组织逐位保持不变

    Args:
        case: 带分割的病例
        scheme: 标签方案
        grid_shape: 控制网格
        max_disp_mm: 控制点位移分量上限（mm）
        dilation_vox: WT 膨胀体素数
        sigma_vox: 权重平滑标准差（体素）
        rng: 随机流

    Returns:
        新病例；WT 为空时原样返回并记录警告

    Raises:
        AugmentationError: 病例没有分割
    """
    if case.segmentation is None:
        raise AugmentationError(f"病例 {case.case_id} 没有分割，无法执行标签掩膜弹性形变")
    if max_disp_mm < 0:
        raise AugmentationError(f"最大位移不能为负: {max_disp_mm}")

    wt = region_mask(case.segmentation, Region.WT, scheme).array
    field = random_elastic_field(case.dims, grid_shape, max_disp_mm, rng)
    if not wt.any():
        logger.warning("病例 %s 的 WT 为空，标签掩膜弹性形变不生效", case.case_id)
        return case

    weight, _support = tumor_weight(wt, dilation_vox, sigma_vox)
    masked = field.weighted(weight)
    logger.debug("标签掩膜弹性形变: 病例 %s 最大位移 %.3f mm", case.case_id, masked.max_norm())
    return warp_case(case, masked, keep=weight == 0)
