"""
文件管理模块
负责 BraTS 目录布局：病例读写、命名、输出目录与预测文件发现
"""
import logging
import os
import re
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from core.exceptions import MissingModalityError
from core.nifti_io import read_nifti, write_nifti
from core.volume import MODALITY_ORDER, Case, LabelScheme, VolumeKind

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

NIFTI_SUFFIXES = (".nii.gz", ".nii")
SEG_SUFFIX = "seg"
PROB_SUFFIX = "prob"


class FileManager:
    """文件管理器"""

    @staticmethod
    def create_output_folder(base_path: PathLike, folder_name: str = "") -> Tuple[bool, str]:
        """
        创建输出文件夹

        Args:
            base_path: 基础路径
            folder_name: 子文件夹名称，为空时直接创建 base_path

        Returns:
            (是否成功, 文件夹完整路径或错误信息)
        """
        try:
            output_path = os.path.join(str(base_path), folder_name) if folder_name else str(base_path)
            os.makedirs(output_path, exist_ok=True)
            return True, output_path
        except OSError as e:
            return False, f"无法创建输出文件夹: {str(e)}"

    @staticmethod
    def generate_filename(case_id: str, suffix: str, compressed: bool = True) -> str:
        """
        生成 BraTS 风格文件名

        Args:
            case_id: 病例编号，如 "BraTS-SSA-00007-000"
            suffix: 后缀，如 "t1n" / "seg"；为空时不带后缀
            compressed: 是否使用 .nii.gz

        Returns:
            文件名，如 "BraTS-SSA-00007-000-t1n.nii.gz"
        """
        ext = ".nii.gz" if compressed else ".nii"
        return f"{case_id}-{suffix}{ext}" if suffix else f"{case_id}{ext}"

    @staticmethod
    def augmented_case_id(case_id: str, replicate_index: int) -> str:
        return f"{case_id}-aug{replicate_index}"

    @staticmethod
    def find_nifti(directory: PathLike, stem: str) -> Optional[Path]:
        """按 .nii.gz、.nii 的顺序查找 <stem> 文件"""
        for ext in NIFTI_SUFFIXES:
            candidate = Path(directory) / f"{stem}{ext}"
            if candidate.is_file():
                return candidate
        return None

    @staticmethod
    def strip_nifti_suffix(name: str) -> Optional[str]:
        for ext in NIFTI_SUFFIXES:
            if name.endswith(ext):
                return name[: -len(ext)]
        return None

    @staticmethod
    def list_case_dirs(input_dir: PathLike) -> List[Path]:
        """列出输入目录下所有病例子目录（按名称排序）"""
        root = Path(input_dir)
        if not root.is_dir():
            return []
        return sorted((p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")),
                      key=lambda p: p.name)

    @staticmethod
    def load_case(directory: PathLike, scheme: LabelScheme) -> Case:
        """
        读取 BraTS 布局的病例目录

        目录名即病例编号，文件为 <id>-t1n/-t1c/-t2w/-t2f/-seg(.nii.gz|.nii)，分割可选。

        Args:
            directory: 病例目录
            scheme: 标签方案（用于校验分割标签）

        Returns:
            Case（已校验各体数据网格一致）

        Raises:
            MissingModalityError: 缺少模态文件
            GeometryMismatchError: 网格不一致
        """
        directory = Path(directory)
        if not directory.is_dir():
            raise MissingModalityError("ALL", str(directory))
        case_id = directory.name

        modalities = {}
        for modality in MODALITY_ORDER:
            path = FileManager.find_nifti(directory, f"{case_id}-{modality.value}")
            if path is None:
                raise MissingModalityError(modality.name, str(directory))
            modalities[modality] = read_nifti(path, VolumeKind.INTENSITY)

        segmentation = None
        seg_path = FileManager.find_nifti(directory, f"{case_id}-{SEG_SUFFIX}")
        if seg_path is not None:
            segmentation = read_nifti(seg_path, VolumeKind.LABEL)
            scheme.check(segmentation)

        case = Case(case_id, modalities, segmentation)
        logger.debug("已读取病例 %s（分割: %s）", case_id, segmentation is not None)
        return case

    @staticmethod
    def save_case(case: Case, output_root: PathLike) -> Path:
        """
        按 BraTS 布局写出病例

        Args:
            case: 病例
            output_root: 输出根目录

        Returns:
            病例目录路径
        """
        case_dir = Path(output_root) / case.case_id
        case_dir.mkdir(parents=True, exist_ok=True)
        for modality in MODALITY_ORDER:
            if modality in case.modalities:
                write_nifti(case.modalities[modality],
                            case_dir / FileManager.generate_filename(case.case_id, modality.value))
        if case.segmentation is not None:
            write_nifti(case.segmentation, case_dir / FileManager.generate_filename(case.case_id, SEG_SUFFIX))
        return case_dir

    @staticmethod
    def find_segmentations(root: PathLike) -> Dict[str, Path]:
        """
        发现预测/标注树中的分割文件

        支持两种布局：
            - 扁平：<root>/<id>.nii.gz 或 <root>/<id>-seg.nii.gz
            - 病例目录：<root>/<id>/<id>-seg.nii.gz

        Returns:
            病例编号 -> 分割文件路径
        """
        root = Path(root)
        found: Dict[str, Path] = {}
        if not root.is_dir():
            return found
        # 同名时 .nii.gz 排在 .nii 之前
        entries = sorted(root.iterdir(), key=lambda p: (FileManager.strip_nifti_suffix(p.name) or p.name,
                                                         not p.name.endswith(".gz")))
        for entry in entries:
            if entry.is_dir():
                seg = FileManager.find_nifti(entry, f"{entry.name}-{SEG_SUFFIX}")
                if seg is not None:
                    found[entry.name] = seg
                continue
            stem = FileManager.strip_nifti_suffix(entry.name)
            if stem is None or re.search(rf"-{PROB_SUFFIX}(-\d+)?$", stem):
                continue
            case_id = stem[: -len(f"-{SEG_SUFFIX}")] if stem.endswith(f"-{SEG_SUFFIX}") else stem
            found.setdefault(case_id, entry)
        return found

    @staticmethod
    def find_probabilities(root: PathLike) -> Dict[str, Union[Path, Dict[int, Path]]]:
        """
        发现概率文件

        Returns:
            病例编号 -> 四维 <id>-prob 文件路径，或 {标签: <id>-prob-<标签> 文件路径}
        """
        root = Path(root)
        found: Dict[str, Union[Path, Dict[int, Path]]] = {}
        if not root.is_dir():
            return found

        files: List[Path] = []
        for entry in sorted(root.iterdir(), key=lambda p: p.name):
            if entry.is_dir():
                files.extend(sorted(p for p in entry.iterdir() if p.is_file()))
            elif entry.is_file():
                files.append(entry)

        pattern = re.compile(rf"^(?P<case>.+)-{PROB_SUFFIX}(?:-(?P<label>\d+))?$")
        for path in files:
            stem = FileManager.strip_nifti_suffix(path.name)
            match = pattern.match(stem) if stem else None
            if match is None:
                continue
            case_id = match.group("case")
            if match.group("label") is None:
                found.setdefault(case_id, path)
            else:
                per_label = found.setdefault(case_id, {})
                if isinstance(per_label, dict):
                    per_label.setdefault(int(match.group("label")), path)
        return found

    @staticmethod
    def describe_failure(error: Exception) -> str:
        """将异常转换为报告中的一行描述"""
        return f"{type(error).__name__}: {error}"
