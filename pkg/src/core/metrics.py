"""
评估指标模块
病灶级 Dice（LSD）与 1 mm 归一化表面距离（NSD），按 ET / TC / WT 子区域计算并汇总
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage

from core.exceptions import ConfigError, GeometryMismatchError, MetricError, NeuroVolveError
from core.file_manager import FileManager
from core.nifti_io import read_nifti
from core.volume import LabelScheme, Region, Volume3D, VolumeKind, region_mask
from utils.file_utils import atomic_write_json, atomic_write_text
from utils.validators import Validators

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

REGIONS = (Region.ET, Region.TC, Region.WT)
SURFACE_TOLERANCE_EPS = 1e-9
# 6 / 18 / 26 连通 → generate_binary_structure 的 connectivity 参数
CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


def _as_mask(mask: Union[np.ndarray, Volume3D]) -> np.ndarray:
    data = mask.data if isinstance(mask, Volume3D) else np.asarray(mask)
    if data.ndim != 3:
        raise MetricError(f"掩膜必须是三维数组，当前维度: {data.ndim}")
    return data.astype(bool)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MetricError(f"掩膜尺寸不一致: {a.shape} ≠ {b.shape}")


def dice(a: Union[np.ndarray, Volume3D], b: Union[np.ndarray, Volume3D]) -> float:
    """
    Dice 系数 2|a∩b| / (|a|+|b|)，两个掩膜都为空时返回 1.0
    """
    a, b = _as_mask(a), _as_mask(b)
    _check_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass(frozen=True)
class ComponentLabeling:
    """
    连通域标记结果

    labels 中 0 为背景，编号 1..count 按 x 最快的扫描顺序首次出现的先后分配。
    """
    labels: np.ndarray
    count: int
    sizes: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def mask(self, component_id: int) -> np.ndarray:
        return self.labels == component_id

    def voxels(self, component_id: int) -> np.ndarray:
        """该连通域的体素索引，形状 (k, 3)"""
        return np.argwhere(self.labels == component_id)

    def size(self, component_id: int) -> int:
        return int(self.sizes[component_id - 1])

    def volume_mm3(self, component_id: int) -> float:
        return self.size(component_id) * float(np.prod(self.spacing))


def _structure(connectivity: int) -> np.ndarray:
    ok, msg = Validators.validate_connectivity(connectivity)
    if not ok:
        raise MetricError(msg)
    return ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])


def connected_components(mask: Union[np.ndarray, Volume3D], connectivity: int = 26,
                         spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> ComponentLabeling:
    """
    三维连通域标记

    Args:
        mask: 二值掩膜
        connectivity: 6、18 或 26
        spacing: 体素间距（用于体积）

    Returns:
        ComponentLabeling
    """
    data = _as_mask(mask)
    raw, count = ndimage.label(data, structure=_structure(connectivity))
    # 按 x 最快扫描顺序重新编号，结果与 ndimage 内部编号方式无关
    flat = raw.ravel(order="F")
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    old_ids = ids[keep][np.argsort(first[keep], kind="stable")]
    lut = np.zeros(count + 1, dtype=np.int32)
    lut[old_ids] = np.arange(1, count + 1, dtype=np.int32)
    labels = lut[raw]
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return ComponentLabeling(labels, int(count), sizes, tuple(float(s) for s in spacing))


@dataclass(frozen=True)
class LesionParams:
    connectivity: int = 26
    dilation_vox: int = 3
    min_lesion_vox: int = 0

    def __post_init__(self):
        ok, msg = Validators.validate_connectivity(self.connectivity)
        if not ok:
            raise ConfigError(msg, key="connectivity")
        for name in ("dilation_vox", "min_lesion_vox"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ConfigError(f"{name} 必须是非负整数: {value}", key=name)


@dataclass(frozen=True)
class LesionMatch:
    """单个 GT 病灶的匹配结果"""
    lesion_id: int
    size_vox: int
    volume_mm3: float
    matched_pred_ids: Tuple[int, ...] = ()
    dice: float = 0.0
    excluded: bool = False

    @property
    def is_false_negative(self) -> bool:
        return not self.excluded and not self.matched_pred_ids


@dataclass(frozen=True)
class LesionMatchReport:
    lesions: Tuple[LesionMatch, ...] = ()
    false_positives: Tuple[int, ...] = ()
    excluded_predictions: Tuple[int, ...] = ()

    @property
    def false_negatives(self) -> Tuple[int, ...]:
        return tuple(m.lesion_id for m in self.lesions if m.is_false_negative)

    @property
    def scores(self) -> List[float]:
        """参与平均的分数：每个保留的 GT 病灶一个，每个假阳性一个 0"""
        return [m.dice for m in self.lesions if not m.excluded] + [0.0] * len(self.false_positives)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lesions": [{
                "lesion_id": m.lesion_id, "size_vox": m.size_vox, "volume_mm3": m.volume_mm3,
                "matched_pred_ids": list(m.matched_pred_ids), "dice": m.dice, "excluded": m.excluded,
            } for m in self.lesions],
            "false_positives": list(self.false_positives),
            "false_negatives": list(self.false_negatives),
            "excluded_predictions": list(self.excluded_predictions),
        }


def _zone_slices(slices: Tuple[slice, ...], pad: int, shape: Tuple[int, ...]) -> Tuple[slice, ...]:
    return tuple(slice(max(s.start - pad, 0), min(s.stop + pad, n)) for s, n in zip(slices, shape))


def lesion_wise_dice(gt: Union[np.ndarray, Volume3D], pred: Union[np.ndarray, Volume3D],
                     spacing: Sequence[float] = (1.0, 1.0, 1.0),
                     params: Optional[LesionParams] = None) -> Tuple[float, LesionMatchReport]:
    """
    病灶级 Dice

    每个 GT 病灶以 6 连通结构膨胀 dilation_vox 次得到匹配区；与匹配区相交的预测连通域
    归入该病灶，跨多个匹配区时归入重叠体素最多者（并列取编号小者）。
    病灶分数为未膨胀病灶与其全部预测连通域并集的 Dice；未匹配的预测连通域（假阳性）
    与未命中的病灶（假阴性）记 0。小于 min_lesion_vox 的病灶与假阳性不计入。

    Args:
        gt: 真值掩膜
        pred: 预测掩膜
        spacing: 体素间距 mm
        params: 连通性、膨胀半径、最小病灶体素数

    Returns:
        (LSD, LesionMatchReport)
    """
    params = params or LesionParams()
    gt, pred = _as_mask(gt), _as_mask(pred)
    _check_pair(gt, pred)
    if not gt.any() and not pred.any():
        return 1.0, LesionMatchReport()

    gt_cc = connected_components(gt, params.connectivity, spacing)
    pred_cc = connected_components(pred, params.connectivity, spacing)
    zone_structure = ndimage.generate_binary_structure(3, 1)
    kept = [lid for lid in range(1, gt_cc.count + 1) if gt_cc.size(lid) >= params.min_lesion_vox]

    # overlap[i, p]：第 i 个保留病灶的匹配区与预测连通域 p 的重叠体素数
    overlap = np.zeros((len(kept), pred_cc.count + 1), dtype=np.int64)
    bounding = ndimage.find_objects(gt_cc.labels)
    for row, lid in enumerate(kept):
        window = _zone_slices(bounding[lid - 1], params.dilation_vox, gt.shape)
        zone = gt_cc.labels[window] == lid
        if params.dilation_vox > 0:
            zone = ndimage.binary_dilation(zone, structure=zone_structure, iterations=params.dilation_vox)
        overlap[row] = np.bincount(pred_cc.labels[window][zone], minlength=pred_cc.count + 1)

    assigned: Dict[int, List[int]] = {lid: [] for lid in kept}
    false_positives, excluded_predictions = [], []
    for pid in range(1, pred_cc.count + 1):
        column = overlap[:, pid]
        if column.size and column.max() > 0:
            assigned[kept[int(np.argmax(column))]].append(pid)
        elif pred_cc.size(pid) >= params.min_lesion_vox:
            false_positives.append(pid)
        else:
            excluded_predictions.append(pid)

    matches = []
    for lid in range(1, gt_cc.count + 1):
        size, volume = gt_cc.size(lid), gt_cc.volume_mm3(lid)
        if lid not in assigned:
            matches.append(LesionMatch(lid, size, volume, excluded=True))
            continue
        pids = tuple(assigned[lid])
        score = dice(gt_cc.mask(lid), np.isin(pred_cc.labels, pids)) if pids else 0.0
        matches.append(LesionMatch(lid, size, volume, pids, score))

    report = LesionMatchReport(tuple(matches), tuple(false_positives), tuple(excluded_predictions))
    scores = report.scores
    if not scores:
        return 1.0, report
    return math.fsum(scores) / len(scores), report


def surface_voxels(mask: Union[np.ndarray, Volume3D]) -> np.ndarray:
    """
    表面体素：至少有一个 6 邻域体素在掩膜外（体数据边界外视为掩膜外）
    """
    data = _as_mask(mask)
    if not data.any():
        return data.copy()
    interior = ndimage.binary_erosion(data, structure=ndimage.generate_binary_structure(3, 1), border_value=0)
    return data & ~interior


def nsd(gt: Union[np.ndarray, Volume3D], pred: Union[np.ndarray, Volume3D],
        spacing: Sequence[float] = (1.0, 1.0, 1.0), tau_mm: float = 1.0) -> float:
    """
    归一化表面距离

    Args:
        gt: 真值掩膜
        pred: 预测掩膜
        spacing: 体素间距 mm（各向异性）
        tau_mm: 容差 τ

    Returns:
        两个表面上距对方表面不超过 τ 的点所占比例
    """
    if tau_mm < 0:
        raise MetricError(f"容差不能为负: {tau_mm}")
    gt, pred = _as_mask(gt), _as_mask(pred)
    _check_pair(gt, pred)
    gt_any, pred_any = gt.any(), pred.any()
    if not gt_any and not pred_any:
        return 1.0
    if not gt_any or not pred_any:
        return 0.0

    sampling = tuple(float(s) for s in spacing)
    surface_gt, surface_pred = surface_voxels(gt), surface_voxels(pred)
    to_gt = ndimage.distance_transform_edt(~surface_gt, sampling=sampling)
    to_pred = ndimage.distance_transform_edt(~surface_pred, sampling=sampling)
    limit = tau_mm + SURFACE_TOLERANCE_EPS
    within = int((to_gt[surface_pred] <= limit).sum()) + int((to_pred[surface_gt] <= limit).sum())
    return within / (int(surface_pred.sum()) + int(surface_gt.sum()))


@dataclass(frozen=True)
class MetricParams:
    """评估参数（对应配置文件中的 metrics 节）"""
    connectivity: int = 26
    dilation_vox: int = 3
    min_lesion_vox: int = 0
    tau_mm: float = 1.0

    def __post_init__(self):
        LesionParams(self.connectivity, self.dilation_vox, self.min_lesion_vox)
        ok, msg = Validators.validate_non_negative(self.tau_mm, "tau_mm")
        if not ok:
            raise ConfigError(msg, key="tau_mm")

    @property
    def lesion_params(self) -> LesionParams:
        return LesionParams(self.connectivity, self.dilation_vox, self.min_lesion_vox)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str = "metrics") -> "MetricParams":
        allowed = {"connectivity", "dilation_vox", "min_lesion_vox", "tau_mm"}
        for key in data:
            if key not in allowed:
                raise ConfigError(f"未知配置项，允许: {sorted(allowed)}", key=f"{path}.{key}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return {"connectivity": self.connectivity, "dilation_vox": self.dilation_vox,
                "min_lesion_vox": self.min_lesion_vox, "tau_mm": self.tau_mm}


@dataclass(frozen=True)
class RegionScore:
    region: Region
    lsd: float
    nsd: float


@dataclass
class CaseScores:
    """一个病例在三个子区域上的分数（报告中的一行组）"""
    case_id: str
    scores: Dict[Region, RegionScore] = field(default_factory=dict)

    def __getitem__(self, region: Region) -> RegionScore:
        return self.scores[Region(region)]


def score_case(gt_seg: Volume3D, pred_seg: Volume3D, scheme: Optional[LabelScheme] = None,
               params: Optional[MetricParams] = None, case_id: str = "") -> CaseScores:
    """
    对一个病例按 ET / TC / WT 计算 LSD 与 NSD

    Raises:
        GeometryMismatchError: 两个分割不在同一网格
    """
    scheme = scheme or LabelScheme()
    params = params or MetricParams()
    difference = gt_seg.grid_difference(pred_seg)
    if difference is not None:
        raise GeometryMismatchError(f"病例 {case_id or '?'} 的真值与预测网格不一致: {difference}")

    row = CaseScores(case_id)
    for region in REGIONS:
        gt_mask = region_mask(gt_seg, region, scheme).array
        pred_mask = region_mask(pred_seg, region, scheme).array
        lsd, _report = lesion_wise_dice(gt_mask, pred_mask, gt_seg.spacing, params.lesion_params)
        surface = nsd(gt_mask, pred_mask, gt_seg.spacing, params.tau_mm)
        row.scores[region] = RegionScore(region, lsd, surface)
        logger.debug("%s %s: LSD=%.4f NSD=%.4f", case_id, region.value, lsd, surface)
    return row


@dataclass
class ScoreReport:
    """
    分数报告：逐病例行、各区域均值以及 AVG（三个区域均值的算术平均）
    """
    rows: List[CaseScores]
    means: Dict[Region, RegionScore]
    avg_lsd: float
    avg_nsd: float
    missing: List[str] = field(default_factory=list)

    @classmethod
    def empty(cls, missing: Sequence[str] = ()) -> "ScoreReport":
        """没有任何可评估病例时的空报告"""
        return cls([], {}, math.nan, math.nan, list(missing))

    @property
    def is_empty(self) -> bool:
        return not self.rows

    def to_frame(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            for region in REGIONS:
                score = row[region]
                records.append({"case_id": row.case_id, "region": region.value, "lsd": score.lsd, "nsd": score.nsd})
        if self.is_empty:
            return pd.DataFrame.from_records(records, columns=["case_id", "region", "lsd", "nsd"])
        for region in REGIONS:
            mean = self.means[region]
            records.append({"case_id": "MEAN", "region": region.value, "lsd": mean.lsd, "nsd": mean.nsd})
        records.append({"case_id": "AVG", "region": "AVG", "lsd": self.avg_lsd, "nsd": self.avg_nsd})
        return pd.DataFrame.from_records(records, columns=["case_id", "region", "lsd", "nsd"])

    def to_csv(self, path: PathLike) -> Path:
        path = Path(path)
        atomic_write_text(path, self.to_frame().to_csv(index=False, lineterminator="\n"))
        return path

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cases": {row.case_id: {r.value: {"lsd": row[r].lsd, "nsd": row[r].nsd} for r in REGIONS}
                      for row in self.rows},
            "means": {r.value: {"lsd": self.means[r].lsd, "nsd": self.means[r].nsd} for r in self.means},
            "avg": None if self.is_empty else {"lsd": self.avg_lsd, "nsd": self.avg_nsd},
            "missing": list(self.missing),
        }

    def to_json(self, path: PathLike) -> Path:
        path = Path(path)
        atomic_write_json(path, self.to_dict())
        return path


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def aggregate(rows: Sequence[CaseScores]) -> ScoreReport:
    """
    汇总逐病例分数

    Args:
        rows: 至少一行

    Returns:
        ScoreReport，行按病例编号排序，结果与完成顺序无关
    """
    if not rows:
        raise MetricError("没有可汇总的病例分数")
    rows = sorted(rows, key=lambda r: r.case_id)
    means = {
        region: RegionScore(region, _mean([r[region].lsd for r in rows]), _mean([r[region].nsd for r in rows]))
        for region in REGIONS
    }
    avg_lsd = _mean([means[r].lsd for r in REGIONS])
    avg_nsd = _mean([means[r].nsd for r in REGIONS])
    return ScoreReport(list(rows), means, avg_lsd, avg_nsd)


def _score_pair(case_id: str, gt_path: str, pred_path: str, scheme: LabelScheme,
                params: MetricParams) -> CaseScores:
    gt_seg = read_nifti(gt_path, VolumeKind.LABEL)
    pred_seg = read_nifti(pred_path, VolumeKind.LABEL)
    return score_case(gt_seg, pred_seg, scheme, params, case_id)


def score_directories(gt_root: PathLike, pred_root: PathLike, scheme: Optional[LabelScheme] = None,
                      params: Optional[MetricParams] = None, workers: int = 1) -> ScoreReport:
    """
    按病例编号配对真值树与预测树并逐例评估

    只出现在其中一棵树里的病例，以及读取/评估失败的病例，记入 ScoreReport.missing。

    Args:
        gt_root: 真值根目录（BraTS 病例目录或扁平布局）
        pred_root: 预测根目录
        scheme: 标签方案
        params: 评估参数
        workers: 并行进程数

    Returns:
        ScoreReport；没有可评估病例时为空报告
    """
    scheme = scheme or LabelScheme()
    params = params or MetricParams()
    gt_files = FileManager.find_segmentations(gt_root)
    pred_files = FileManager.find_segmentations(pred_root)
    common = sorted(set(gt_files) & set(pred_files))
    missing = sorted(set(gt_files) ^ set(pred_files))
    for case_id in missing:
        side = "预测" if case_id in gt_files else "真值"
        logger.error("病例 %s 缺少%s分割", case_id, side)

    jobs = [(cid, str(gt_files[cid]), str(pred_files[cid]), scheme, params) for cid in common]
    rows: List[CaseScores] = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {job[0]: pool.submit(_score_pair, *job) for job in jobs}
            for case_id, future in futures.items():
                try:
                    rows.append(future.result())
                except (NeuroVolveError, OSError) as e:
                    logger.error("病例 %s 评估失败: %s", case_id, e)
                    missing.append(case_id)
    else:
        for job in jobs:
            try:
                rows.append(_score_pair(*job))
            except (NeuroVolveError, OSError) as e:
                logger.error("病例 %s 评估失败: %s", job[0], e)
                missing.append(job[0])

    missing = sorted(missing)
    if not rows:
        return ScoreReport.empty(missing)
    report = aggregate(rows)
    report.missing = missing
    return report
