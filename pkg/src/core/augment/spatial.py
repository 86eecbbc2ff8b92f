"""
全脑空间变换：随机仿射与随机翻转
同一个变换实例作用于病例的全部模态与分割（强度三线性插值，标签最近邻）
"""
import logging
import math
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from core.augment.params import AffineParams
from core.augment.rng import RngStream
from core.exceptions import AugmentationError
from core.volume import Case

logger = logging.getLogger(__name__)

MAX_SCALE_ATTEMPTS = 100


def rotation_matrix(angles_deg: Sequence[float]) -> np.ndarray:
    """绕 x、y、z 轴依次旋转的 3×3 矩阵（R = Rz·Ry·Rx）"""
    ax, ay, az = (math.radians(a) for a in angles_deg)
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def sample_affine(params: AffineParams, rng: RngStream) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    采样一组仿射参数

    缩放 ≤ 0 时在内部重新采样，不会返回退化矩阵。

    Returns:
        (旋转角度[3], 缩放[3], 平移 mm[3])
    """
    angles = np.array([rng.uniform(lo, hi) for lo, hi in params.rotation_deg])
    scales = np.empty(3)
    for axis, (lo, hi) in enumerate(params.scale):
        for _ in range(MAX_SCALE_ATTEMPTS):
            scales[axis] = rng.uniform(lo, hi)
            if scales[axis] > 0:
                break
            logger.debug("采样到退化缩放 %.4f，重新采样", scales[axis])
        else:
            raise AugmentationError(f"连续 {MAX_SCALE_ATTEMPTS} 次采样到非正缩放，区间: {(lo, hi)}")
    translation = np.array([rng.uniform(lo, hi) for lo, hi in params.translation_mm])
    return angles, scales, translation


def voxel_affine(angles_deg: Sequence[float], scales: Sequence[float], translation_mm: Sequence[float],
                 dims: Sequence[int], spacing: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """
    将物理空间（mm，绕网格中心）的仿射换算为体素索引空间的反向映射

    输出体素 o 在输入中的采样位置为 matrix @ o + offset。

    Returns:
        (matrix 3×3, offset 3)
    """
    s = np.asarray(spacing, dtype=np.float64)
    center = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    forward = rotation_matrix(angles_deg) @ np.diag(np.asarray(scales, dtype=np.float64))
    inverse = np.linalg.inv(forward)
    # S⁻¹·M⁻¹·S，逐元素写成 m_ij·s_j/s_i 使恒等变换保持精确
    matrix = inverse * (s[None, :] / s[:, None])
    offset = center - matrix @ center - (inverse @ np.asarray(translation_mm, dtype=np.float64)) / s
    return matrix, offset


def _is_identity(matrix: np.ndarray, offset: np.ndarray) -> bool:
    return bool(np.array_equal(matrix, np.eye(3)) and not np.any(offset))


def apply_affine(case: Case, angles_deg: Sequence[float], scales: Sequence[float],
                 translation_mm: Sequence[float]) -> Case:
    """以给定参数对整个病例做仿射变换，越界处填充背景 0"""
    matrix, offset = voxel_affine(angles_deg, scales, translation_mm, case.dims, case.spacing)
    if _is_identity(matrix, offset):
        return case

    def warp_intensity(_modality, data: np.ndarray) -> np.ndarray:
        return ndimage.affine_transform(data.astype(np.float64), matrix, offset=offset,
                                        order=1, mode="constant", cval=0.0)

    def warp_label(data: np.ndarray) -> np.ndarray:
        return ndimage.affine_transform(data, matrix, offset=offset, order=0, mode="constant", cval=0)

    return case.map_volumes(warp_intensity, warp_label)


def random_affine(case: Case, params: AffineParams, rng: RngStream) -> Case:
    """
    随机仿射变换

    Args:
        case: 病例
        params: 旋转/缩放/平移采样区间
        rng: 随机流

    Returns:
        变换后的病例（网格不变）
    """
    angles, scales, translation = sample_affine(params, rng)
    logger.debug("仿射: 旋转 %s 缩放 %s 平移 %s", angles, scales, translation)
    return apply_affine(case, angles, scales, translation)


def random_flip(case: Case, axes_probabilities: Sequence[float], rng: RngStream) -> Case:
    """
    随机翻转：每个轴独立地以各自概率镜像，无插值

    Args:
        case: 病例
        axes_probabilities: x/y/z 轴的翻转概率
        rng: 随机流

    Returns:
        翻转后的病例
    """
    if len(axes_probabilities) != 3:
        raise AugmentationError(f"需要三个轴的翻转概率: {axes_probabilities}")
    # 三个轴总是各抽一次，保证随机流消耗与结果无关
    draws = [rng.uniform() for _ in range(3)]
    axes = tuple(axis for axis, (u, p) in enumerate(zip(draws, axes_probabilities)) if u < p)
    if not axes:
        return case
    logger.debug("翻转轴: %s", axes)
    return case.map_volumes(lambda _m, data: np.flip(data, axis=axes),
                            lambda data: np.flip(data, axis=axes))
