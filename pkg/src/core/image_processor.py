"""
图像处理核心模块
生成病例轴位切片预览：四个模态加一张带分割叠加的 FLAIR 横向拼接
"""
import io
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from skimage import exposure

from core.exceptions import PreviewError
from core.volume import MODALITY_ORDER, Case, LabelScheme, Modality, Volume3D
from utils.file_utils import atomic_write_bytes
from utils.validators import Validators

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# 与分割可视化惯例一致：ET 蓝、NCR（TC 中除 ET 外的部分）红、ED 绿
OVERLAY_COLORS = {
    "et": (0, 0, 255),
    "ncr": (255, 0, 0),
    "ed": (0, 255, 0),
}
DEFAULT_GUTTER = 4
WINDOW_PERCENTILES = (0.5, 99.5)


class ImageProcessor:
    """预览图处理器"""

    @staticmethod
    def axial_slice(volume: Volume3D, index: int) -> np.ndarray:
        """
        取轴位切片并转为图像方向

        Args:
            volume: 体数据
            index: z 方向切片索引

        Returns:
            二维数组，行对应 y（自上而下递减），列对应 x
        """
        ok, msg = Validators.validate_slice_index(index, volume.dims[2])
        if not ok:
            raise PreviewError(msg)
        return np.asarray(volume.data[:, :, index]).T[::-1]

    @staticmethod
    def window_range(volume: Volume3D, percentiles: Tuple[float, float] = WINDOW_PERCENTILES) -> Tuple[float, float]:
        """按整个模态的百分位数计算窗宽窗位"""
        lo, hi = np.percentile(volume.data, percentiles)
        return float(lo), float(hi)

    @staticmethod
    def window_to_uint8(image: np.ndarray, window: Tuple[float, float]) -> np.ndarray:
        """
        窗口映射到 [0, 255]

        Args:
            image: 二维强度数组
            window: (下限, 上限)，超出部分截断

        Returns:
            uint8 灰度图
        """
        lo, hi = window
        if hi <= lo:
            return np.zeros(image.shape, dtype=np.uint8)
        scaled = exposure.rescale_intensity(image.astype(np.float64), in_range=(lo, hi), out_range=(0.0, 255.0))
        return np.rint(scaled).astype(np.uint8)

    @staticmethod
    def overlay_segmentation(gray: np.ndarray, labels: Optional[np.ndarray],
                             scheme: LabelScheme) -> np.ndarray:
        """
        在灰度图上不透明地绘制分割颜色

        Returns:
            (H, W, 3) 的 uint8 RGB 数组
        """
        rgb = np.repeat(gray[:, :, None], 3, axis=2)
        if labels is None:
            return rgb
        for name, color in OVERLAY_COLORS.items():
            rgb[labels == getattr(scheme, name)] = color
        return rgb

    @staticmethod
    def compose_montage(panels: Sequence[np.ndarray], gutter: int = DEFAULT_GUTTER) -> Image.Image:
        """
        将若干同尺寸面板横向拼接，面板之间留黑色间隔

        Args:
            panels: (H, W) 灰度或 (H, W, 3) RGB 的 uint8 数组
            gutter: 间隔像素

        Returns:
            RGB 图像，宽度 = 面板数 × W + (面板数 − 1) × gutter
        """
        if not panels:
            raise PreviewError("没有可拼接的面板")
        if gutter < 0:
            raise PreviewError(f"间隔不能为负: {gutter}")
        height, width = panels[0].shape[:2]
        montage = Image.new("RGB", (len(panels) * width + (len(panels) - 1) * gutter, height), (0, 0, 0))
        for i, panel in enumerate(panels):
            if panel.shape[:2] != (height, width):
                raise PreviewError(f"面板尺寸不一致: {panel.shape[:2]} ≠ {(height, width)}")
            tile = Image.fromarray(np.ascontiguousarray(panel, dtype=np.uint8)).convert("RGB")
            montage.paste(tile, (i * (width + gutter), 0))
        return montage

    @staticmethod
    def create_preview(case: Case, slice_index: int, scheme: Optional[LabelScheme] = None,
                       gutter: int = DEFAULT_GUTTER) -> Image.Image:
        """
        生成病例预览拼图：T1、T1CE、T2、FLAIR、FLAIR + 分割

        Args:
            case: 病例
            slice_index: 轴位切片索引（0 ≤ K < nz）
            scheme: 标签方案
            gutter: 面板间隔像素

        Returns:
            PIL 图像
        """
        scheme = scheme or LabelScheme()
        panels: List[np.ndarray] = []
        for modality in MODALITY_ORDER:
            volume = case.modalities[modality]
            image = ImageProcessor.axial_slice(volume, slice_index)
            panels.append(ImageProcessor.window_to_uint8(image, ImageProcessor.window_range(volume)))

        labels = None
        if case.segmentation is not None:
            labels = ImageProcessor.axial_slice(case.segmentation, slice_index)
        flair_index = MODALITY_ORDER.index(Modality.FLAIR)
        panels.append(ImageProcessor.overlay_segmentation(panels[flair_index], labels, scheme))
        return ImageProcessor.compose_montage(panels, gutter)

    @staticmethod
    def save_png(image: Image.Image, path: PathLike) -> Path:
        """以 PNG 格式原子写出"""
        buffer = io.BytesIO()
        image.save(buffer, format="PNG")
        path = Path(path)
        atomic_write_bytes(path, buffer.getvalue())
        logger.debug("预览图已保存: %s（%dx%d）", path, image.width, image.height)
        return path

    @staticmethod
    def color_counts(image: Image.Image) -> Dict[str, int]:
        """统计叠加颜色的像素数，键为 et / ncr / ed"""
        array = np.asarray(image.convert("RGB"))
        return {name: int(np.all(array == color, axis=-1).sum()) for name, color in OVERLAY_COLORS.items()}
