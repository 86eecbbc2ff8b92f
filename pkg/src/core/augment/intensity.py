"""
MRI 偏置场模拟
乘性场 B(x) = exp(P(x))，P 为归一化坐标 [-1, 1]³ 上的多项式
"""
import logging
from typing import List, Sequence, Tuple

import numpy as np

from core.augment.rng import RngStream
from core.exceptions import AugmentationError
from core.volume import Case, Modality

logger = logging.getLogger(__name__)


def polynomial_terms(order: int) -> List[Tuple[int, int, int]]:
    """
    全部满足 i + j + k ≤ order 的指数三元组（含常数项），顺序固定

    Args:
        order: 多项式阶数

    Returns:
        [(i, j, k), ...]，第一个为 (0, 0, 0)
    """
    if order < 0:
        raise AugmentationError(f"偏置场阶数必须 ≥ 0: {order}")
    terms = []
    for i in range(order + 1):
        for j in range(order + 1 - i):
            for k in range(order + 1 - i - j):
                terms.append((i, j, k))
    return terms


def normalized_axis(n: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)


def bias_field(dims: Sequence[int], order: int, coefficients: Sequence[float]) -> np.ndarray:
    """
    按给定系数计算乘性偏置场

    Args:
        dims: (nx, ny, nz)
        order: 多项式阶数
        coefficients: 与 polynomial_terms(order) 一一对应的系数

    Returns:
        形状为 dims 的正值场
    """
    terms = polynomial_terms(order)
    if len(coefficients) != len(terms):
        raise AugmentationError(f"系数个数 {len(coefficients)} 与多项式项数 {len(terms)} 不符")
    x, y, z = (normalized_axis(int(n)) for n in dims)
    poly = np.zeros(tuple(int(n) for n in dims), dtype=np.float64)
    for (i, j, k), c in zip(terms, coefficients):
        if c == 0:
            continue
        poly += c * (x[:, None, None] ** i) * (y[None, :, None] ** j) * (z[None, None, :] ** k)
    return np.exp(poly)


def random_bias_field(case: Case, order: int, coeff_range: Sequence[float], rng: RngStream) -> Case:
    """
    随机偏置场：每个模态独立采样系数，分割保持不变

    Args:
        case: 病例
        order: 多项式阶数（≥ 0）
        coeff_range: 系数均匀采样区间 (下限, 上限)
        rng: 随机流

    Returns:
        新病例
    """
    lo, hi = float(coeff_range[0]), float(coeff_range[1])
    n_terms = len(polynomial_terms(order))
    # 按模态名排序采样，保证与字典顺序无关
    coefficients = {m: rng.uniform_array(lo, hi, (n_terms,)) for m in sorted(case.modalities, key=lambda m: m.name)}

    def apply(modality: Modality, data: np.ndarray) -> np.ndarray:
        field = bias_field(data.shape, order, coefficients[modality])
        return data.astype(np.float64) * field

    return case.map_volumes(apply)
