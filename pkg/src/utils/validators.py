"""
参数验证工具模块
提供各种参数校验功能
"""
from typing import Optional, Sequence, Tuple


class Validators:
    """参数验证器"""

    @staticmethod
    def validate_probability(value: float, name: str = "probability") -> Tuple[bool, Optional[str]]:
        """
        验证概率是否在 [0, 1] 内

        Args:
            value: 概率值
            name: 参数名（用于错误信息）

        Returns:
            (是否合法, 错误信息)
        """
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            return False, f"{name} 必须是数值，当前值: {value!r}"
        if not (0.0 <= float(value) <= 1.0):
            return False, f"{name} 必须在 0-1 之间，当前值: {value}"
        return True, None

    @staticmethod
    def validate_replicates(count: int) -> Tuple[bool, Optional[str]]:
        """验证每个病例的增强副本数"""
        if not isinstance(count, int) or count < 1:
            return False, f"副本数必须 ≥ 1，当前值: {count}"
        return True, None

    @staticmethod
    def validate_case_count(count: int) -> Tuple[bool, Optional[str]]:
        if not isinstance(count, int) or count < 1:
            return False, f"病例数必须 ≥ 1，当前值: {count}"
        return True, None

    @staticmethod
    def validate_worker_count(workers: Optional[int]) -> Tuple[bool, Optional[str]]:
        if workers is None:
            return True, None
        if not isinstance(workers, int) or workers < 1:
            return False, f"工作进程数必须 ≥ 1，当前值: {workers}"
        return True, None

    @staticmethod
    def validate_connectivity(connectivity: int) -> Tuple[bool, Optional[str]]:
        """连通性只能是 6、18 或 26"""
        if connectivity not in (6, 18, 26):
            return False, f"连通性必须是 6/18/26 之一，当前值: {connectivity}"
        return True, None

    @staticmethod
    def validate_grid_shape(shape: Sequence[int]) -> Tuple[bool, Optional[str]]:
        """
        验证弹性形变控制网格

        Args:
            shape: 三个轴上的控制点数

        Returns:
            (是否合法, 错误信息)
        """
        if len(shape) != 3 or any(not isinstance(n, int) for n in shape):
            return False, f"控制网格必须是三个整数，当前值: {shape}"
        if any(n < 2 for n in shape):
            return False, f"控制网格每个轴至少 2 个控制点，当前值: {tuple(shape)}"
        return True, None

    @staticmethod
    def validate_range(value: Sequence[float], name: str) -> Tuple[bool, Optional[str]]:
        """验证 (下限, 上限) 区间"""
        if len(value) != 2:
            return False, f"{name} 必须是 (下限, 上限)，当前值: {value}"
        if float(value[0]) > float(value[1]):
            return False, f"{name} 下限大于上限: {value}"
        return True, None

    @staticmethod
    def validate_non_negative(value: float, name: str) -> Tuple[bool, Optional[str]]:
        if float(value) < 0:
            return False, f"{name} 不能为负，当前值: {value}"
        return True, None

    @staticmethod
    def validate_slice_index(index: int, depth: int) -> Tuple[bool, Optional[str]]:
        """
        验证轴位切片索引

        Args:
            index: 切片索引
            depth: z 方向体素数

        Returns:
            (是否合法, 错误信息)
        """
        if not (0 <= index < depth):
            return False, f"切片索引必须在 0-{depth - 1} 之间，当前值: {index}"
        return True, None
