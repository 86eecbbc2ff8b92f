"""
可复现随机流
由 (全局种子, 病例编号, 副本序号, 变换序号) 经稳定哈希派生每个变换的随机数生成器
"""
import hashlib
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np


def stable_seed(*parts: Union[int, str]) -> int:
    """64 位稳定哈希（blake2b），与平台和 Python 哈希随机化无关"""
    key = "|".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """单个变换实例使用的随机流"""
    seed: int
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "generator", np.random.Generator(np.random.PCG64(int(self.seed))))

    @classmethod
    def derive(cls, global_seed: int, case_id: str, replicate_index: int, transform_index: int) -> "RngStream":
        """
        派生 (病例, 副本, 变换) 的随机流

        Args:
            global_seed: 全局种子
            case_id: 原始病例编号
            replicate_index: 副本序号
            transform_index: 变换在流水线中的序号

        Returns:
            RngStream
        """
        return cls(stable_seed(global_seed, case_id, replicate_index, transform_index))

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return float(self.generator.uniform(low, high))

    def uniform_array(self, low: float, high: float, size: Sequence[int]) -> np.ndarray:
        return self.generator.uniform(low, high, size=tuple(size))
