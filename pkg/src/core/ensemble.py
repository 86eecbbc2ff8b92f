"""
多模型预测融合
概率平均后取 argmax（默认），或逐体素多数投票（只有硬标签时的回退）
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.exceptions import ConfigError, EnsembleError, NeuroVolveError
from core.file_manager import FileManager
from core.nifti_io import read_nifti, read_nifti_channels, write_nifti
from core.volume import LabelScheme, Volume3D, VolumeKind
from utils.file_utils import atomic_write_json

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PROBABILITY_SUM_TOLERANCE = 1e-5
REPORT_FILENAME = "fusion_report.json"


@dataclass(frozen=True)
class ProbabilityVolume:
    """
    逐体素的标签概率向量

    probabilities 形状 (nx, ny, nz, L)，第 c 个通道对应 labels[c]（升序）。
    """
    probabilities: np.ndarray
    labels: Tuple[int, ...]
    grid: Volume3D

    def __post_init__(self):
        probs = np.asarray(self.probabilities, dtype=np.float64)
        labels = tuple(int(v) for v in self.labels)
        if probs.ndim != 4 or probs.shape[:3] != self.grid.dims:
            raise EnsembleError(f"概率数组形状 {probs.shape} 与网格 {self.grid.dims} 不符")
        if probs.shape[3] != len(labels):
            raise EnsembleError(f"通道数 {probs.shape[3]} 与标签数 {len(labels)} 不符")
        if list(labels) != sorted(set(labels)):
            raise EnsembleError(f"标签必须严格升序: {labels}")
        if probs.size and probs.min() < 0:
            raise EnsembleError("概率不能为负")
        deviation = np.abs(probs.sum(axis=3) - 1.0)
        if deviation.size and deviation.max() > PROBABILITY_SUM_TOLERANCE:
            raise EnsembleError(f"逐体素概率之和必须为 1，最大偏差 {deviation.max():.2e}")
        probs.setflags(write=False)
        object.__setattr__(self, "probabilities", probs)
        object.__setattr__(self, "labels", labels)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.grid.dims

    @classmethod
    def from_labels(cls, seg: Volume3D, labels: Sequence[int]) -> "ProbabilityVolume":
        """硬标签转为 one-hot 概率"""
        labels = tuple(sorted(int(v) for v in labels))
        unknown = set(np.unique(seg.data).tolist()) - set(labels)
        if unknown:
            raise EnsembleError(f"分割中存在标签集合之外的值: {sorted(unknown)}")
        probs = np.stack([(seg.data == v) for v in labels], axis=-1).astype(np.float64)
        return cls(probs, labels, seg)

    def argmax(self) -> Volume3D:
        """逐体素取概率最大的标签，并列时取较小的标签"""
        index = np.argmax(self.probabilities, axis=3)
        return self.grid.with_data(np.asarray(self.labels)[index], VolumeKind.LABEL)


def _check_grids(volumes: Sequence[Volume3D]) -> None:
    reference = volumes[0]
    for i, vol in enumerate(volumes[1:], start=1):
        difference = reference.grid_difference(vol)
        if difference is not None:
            raise EnsembleError(f"成员 {i} 与成员 0 网格不一致: {difference}")


def _normalized_weights(weights: Optional[Sequence[float]], count: int) -> np.ndarray:
    if weights is None:
        return np.full(count, 1.0 / count)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (count,):
        raise EnsembleError(f"权重个数 {w.size} 与成员数 {count} 不符")
    if not np.all(w > 0):
        raise EnsembleError(f"权重必须为正: {w.tolist()}")
    return w / w.sum()


def fuse_probabilities(members: Sequence[ProbabilityVolume], weights: Optional[Sequence[float]] = None) -> Volume3D:
    """
    概率融合：逐体素加权平均后取 argmax

    Args:
        members: 至少一个概率体，网格与标签集合一致
        weights: 正权重，None 为等权；内部归一化

    Returns:
        融合后的标签体数据
    """
    if not members:
        raise EnsembleError("至少需要一个成员")
    _check_grids([m.grid for m in members])
    labels = members[0].labels
    for i, m in enumerate(members[1:], start=1):
        if m.labels != labels:
            raise EnsembleError(f"成员 {i} 的标签集合 {m.labels} 与成员 0 {labels} 不同")
    w = _normalized_weights(weights, len(members))

    if np.all(w == w[0]):
        weighted = np.stack([m.probabilities for m in members])
    else:
        weighted = np.stack([wk * m.probabilities for wk, m in zip(w, members)])
    # 沿成员轴排序后求和，结果与成员顺序无关
    total = np.sort(weighted, axis=0).sum(axis=0)
    index = np.argmax(total, axis=3)
    return members[0].grid.with_data(np.asarray(labels)[index], VolumeKind.LABEL)


def fuse_labels_vote(members: Sequence[Volume3D], background: int = 0) -> Volume3D:
    """
    多数投票：逐体素取众数

    并列时取并列集合中最小的非背景标签；背景只有在唯一众数时胜出。

    Args:
        members: 至少一个标签体数据
        background: 背景标签

    Returns:
        融合后的标签体数据
    """
    if not members:
        raise EnsembleError("至少需要一个成员")
    _check_grids(members)
    stacked = np.stack([m.data for m in members])
    present = sorted(int(v) for v in np.unique(stacked))
    candidates = [v for v in present if v != background] + ([background] if background in present else [])
    counts = np.stack([(stacked == v).sum(axis=0) for v in candidates])
    # argmax 取第一个最大值：候选按非背景升序、背景最后排列
    winner = np.asarray(candidates)[np.argmax(counts, axis=0)]
    return members[0].with_data(winner, VolumeKind.LABEL)


class EnsembleMode(str, Enum):
    PROBABILITY_MEAN = "ProbabilityMean"
    MAJORITY_VOTE = "MajorityVote"


@dataclass(frozen=True)
class EnsembleSpec:
    """集成规格：成员名称（如 S、M、R）、权重、融合方式"""
    members: Tuple[str, ...] = ()
    weights: Optional[Tuple[float, ...]] = None
    mode: EnsembleMode = EnsembleMode.PROBABILITY_MEAN

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(str(m) for m in self.members))
        try:
            object.__setattr__(self, "mode", EnsembleMode(self.mode))
        except ValueError:
            allowed = [m.value for m in EnsembleMode]
            raise ConfigError(f"未知融合方式 {self.mode!r}，允许: {allowed}", key="mode")
        if self.weights is not None:
            weights = tuple(float(w) for w in self.weights)
            if any(w <= 0 for w in weights):
                raise ConfigError(f"权重必须为正: {list(weights)}", key="weights")
            if self.members and len(weights) != len(self.members):
                raise ConfigError(f"权重个数 {len(weights)} 与成员数 {len(self.members)} 不符", key="weights")
            object.__setattr__(self, "weights", weights)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str = "ensemble") -> "EnsembleSpec":
        allowed = {"members", "weights", "mode"}
        for key in data:
            if key not in allowed:
                raise ConfigError(f"未知配置项，允许: {sorted(allowed)}", key=f"{path}.{key}")
        return cls(tuple(data.get("members", ())), data.get("weights"),
                   data.get("mode", EnsembleMode.PROBABILITY_MEAN.value))

    def to_dict(self) -> Dict[str, Any]:
        return {"members": list(self.members),
                "weights": None if self.weights is None else list(self.weights),
                "mode": self.mode.value}

    def bind(self, member_dirs: Sequence[PathLike]) -> "EnsembleSpec":
        """
        将规格绑定到成员目录；未配置成员名称时使用目录名

        Raises:
            EnsembleError: 目录数与配置的成员/权重个数不一致
        """
        count = len(member_dirs)
        if count < 1:
            raise EnsembleError("至少需要一个成员目录")
        if self.members and len(self.members) != count:
            raise EnsembleError(f"配置了 {len(self.members)} 个成员，但给出了 {count} 个目录")
        if self.weights is not None and len(self.weights) != count:
            raise EnsembleError(f"权重个数 {len(self.weights)} 与成员目录数 {count} 不符")
        members = self.members or tuple(Path(d).name for d in member_dirs)
        return EnsembleSpec(members, self.weights, self.mode)


@dataclass
class FusionReport:
    mode: str
    members: List[str]
    fused: List[str] = field(default_factory=list)
    methods: Dict[str, str] = field(default_factory=dict)
    skipped: List[Dict[str, str]] = field(default_factory=list)

    @property
    def failed_count(self) -> int:
        return len(self.skipped)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "members": self.members,
            "counts": {"fused": len(self.fused), "skipped": len(self.skipped)},
            "fused": self.fused,
            "methods": self.methods,
            "skipped": self.skipped,
        }

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        atomic_write_json(path, self.to_dict())
        return path


MemberFiles = Dict[str, Any]


def _load_probability(source: Union[Path, Dict[int, Path]], scheme: LabelScheme) -> ProbabilityVolume:
    labels = scheme.sorted_labels
    if isinstance(source, dict):
        if set(source) != set(labels):
            raise EnsembleError(f"逐标签概率文件 {sorted(source)} 与标签方案 {list(labels)} 不一致")
        volumes = [read_nifti(source[v], VolumeKind.INTENSITY) for v in labels]
        _check_grids(volumes)
        probs = np.stack([vol.data.astype(np.float64) for vol in volumes], axis=-1)
        return ProbabilityVolume(probs, labels, volumes[0])
    probs, reference = read_nifti_channels(source)
    return ProbabilityVolume(probs, labels, reference)


def _fuse_one(case_id: str, member_files: List[MemberFiles], spec: EnsembleSpec, scheme: LabelScheme,
              output_dir: str) -> str:
    """融合单个病例并写出，返回使用的方法（在工作进程中执行）"""
    has_prob = [files.get("prob") is not None for files in member_files]
    if spec.mode == EnsembleMode.PROBABILITY_MEAN and any(has_prob):
        members = []
        for files in member_files:
            if files.get("prob") is not None:
                members.append(_load_probability(files["prob"], scheme))
            else:
                seg = read_nifti(files["seg"], VolumeKind.LABEL)
                members.append(ProbabilityVolume.from_labels(seg, scheme.sorted_labels))
        fused = fuse_probabilities(members, spec.weights)
        method = "probability"
    else:
        segs = []
        for files in member_files:
            if files.get("seg") is not None:
                seg = read_nifti(files["seg"], VolumeKind.LABEL)
                scheme.check(seg)
                segs.append(seg)
            else:
                segs.append(_load_probability(files["prob"], scheme).argmax())
        fused = fuse_labels_vote(segs, scheme.background)
        method = "vote"
    scheme.check(fused)
    write_nifti(fused, Path(output_dir) / FileManager.generate_filename(case_id, ""))
    return method


def fuse_case_set(member_dirs: Sequence[PathLike], output_dir: PathLike, spec: Optional[EnsembleSpec] = None,
                  scheme: Optional[LabelScheme] = None, workers: int = 1) -> FusionReport:
    """
    批量融合多个模型的预测目录

    Args:
        member_dirs: 成员预测目录（扁平或 BraTS 病例目录布局）
        output_dir: 输出目录，融合结果写为 <id>.nii.gz
        spec: 集成规格
        scheme: 标签方案
        workers: 并行进程数

    Returns:
        FusionReport（同时写入 <output_dir>/fusion_report.json）
    """
    spec = (spec or EnsembleSpec()).bind(member_dirs)
    scheme = scheme or LabelScheme()

    inventories = []
    for directory in member_dirs:
        segs = FileManager.find_segmentations(directory)
        probs = FileManager.find_probabilities(directory)
        if not segs and not probs:
            logger.warning("成员目录中没有找到预测: %s", directory)
        inventories.append({cid: {"seg": segs.get(cid), "prob": probs.get(cid)}
                            for cid in set(segs) | set(probs)})

    success, output_path = FileManager.create_output_folder(output_dir)
    if not success:
        raise OSError(output_path)

    report = FusionReport(spec.mode.value, list(spec.members))
    all_ids = sorted(set().union(*(inv.keys() for inv in inventories)))
    jobs = []
    for case_id in all_ids:
        absent = [name for name, inv in zip(spec.members, inventories) if case_id not in inv]
        if absent:
            reason = f"成员 {absent} 缺少该病例"
            logger.error("跳过病例 %s: %s", case_id, reason)
            report.skipped.append({"case_id": case_id, "reason": reason})
            continue
        jobs.append((case_id, [inv[case_id] for inv in inventories], spec, scheme, output_path))

    results: Dict[str, Any] = {}
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {job[0]: pool.submit(_fuse_one, *job) for job in jobs}
            for case_id, future in futures.items():
                try:
                    results[case_id] = future.result()
                except (NeuroVolveError, OSError) as e:
                    results[case_id] = e
    else:
        for job in jobs:
            try:
                results[job[0]] = _fuse_one(*job)
            except (NeuroVolveError, OSError) as e:
                results[job[0]] = e

    for case_id in sorted(results):
        outcome = results[case_id]
        if isinstance(outcome, Exception):
            logger.error("病例 %s 融合失败: %s", case_id, outcome)
            report.skipped.append({"case_id": case_id, "reason": FileManager.describe_failure(outcome)})
        else:
            report.fused.append(case_id)
            report.methods[case_id] = outcome
    report.skipped.sort(key=lambda s: s["case_id"])

    report.save(Path(output_path) / REPORT_FILENAME)
    logger.info("融合完成: %d 例，跳过 %d 例", len(report.fused), len(report.skipped))
    return report
