"""
分割感知的离线增强流水线
按顺序串联各变换；概率变换以各自随机流的第一次均匀抽样决定是否生效，
标签掩膜变换总是生效。expand_dataset 为每个病例生成若干增强副本。
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from core.augment.elastic import label_masked_elastic, random_elastic
from core.augment.intensity import random_bias_field
from core.augment.params import (AffineParams, BiasFieldParams, ElasticParams, FlipParams,
                                 LabelMaskedElasticParams)
from core.augment.rng import RngStream
from core.augment.spatial import random_affine, random_flip
from core.exceptions import ConfigError, NeuroVolveError
from core.file_manager import FileManager
from core.volume import Case, LabelScheme
from utils.file_utils import atomic_write_json
from utils.validators import Validators

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

REPORT_FILENAME = "expansion_report.json"
DEFAULT_GLOBAL_SEED = 2025


class TransformKind(str, Enum):
    AFFINE = "Affine"
    FLIP = "Flip"
    BIAS_FIELD = "BiasField"
    ELASTIC = "Elastic"
    LABEL_MASKED_ELASTIC = "LabelMaskedElastic"


PARAMETER_TYPES = {
    TransformKind.AFFINE: AffineParams,
    TransformKind.FLIP: FlipParams,
    TransformKind.BIAS_FIELD: BiasFieldParams,
    TransformKind.ELASTIC: ElasticParams,
    TransformKind.LABEL_MASKED_ELASTIC: LabelMaskedElasticParams,
}


@dataclass(frozen=True)
class TransformSpec:
    """单个变换：类型、生效概率与参数"""
    kind: TransformKind
    probability: float = 1.0
    parameters: Any = None

    def __post_init__(self):
        kind = TransformKind(self.kind)
        object.__setattr__(self, "kind", kind)
        ok, msg = Validators.validate_probability(self.probability)
        if not ok:
            raise ConfigError(msg, key="probability")
        if kind == TransformKind.LABEL_MASKED_ELASTIC and float(self.probability) != 1.0:
            raise ConfigError("LabelMaskedElastic 的概率固定为 1.0", key="probability")
        object.__setattr__(self, "probability", float(self.probability))

        param_type = PARAMETER_TYPES[kind]
        if self.parameters is None:
            object.__setattr__(self, "parameters", param_type())
        elif isinstance(self.parameters, dict):
            object.__setattr__(self, "parameters", param_type.from_dict(self.parameters))
        elif not isinstance(self.parameters, param_type):
            raise ConfigError(f"{kind.value} 需要 {param_type.__name__} 参数", key="parameters")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str = "transforms") -> "TransformSpec":
        unknown = set(data) - {"kind", "probability", "parameters"}
        if unknown:
            raise ConfigError(f"未知配置项 {sorted(unknown)}", key=f"{path}.{sorted(unknown)[0]}")
        if "kind" not in data:
            raise ConfigError("缺少变换类型", key=f"{path}.kind")
        try:
            kind = TransformKind(data["kind"])
        except ValueError:
            allowed = [k.value for k in TransformKind]
            raise ConfigError(f"未知变换类型 {data['kind']!r}，允许: {allowed}", key=f"{path}.kind")
        probability = data.get("probability", 1.0)
        parameters = PARAMETER_TYPES[kind].from_dict(data.get("parameters", {}), f"{path}.parameters")
        return cls(kind, probability, parameters)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "probability": self.probability, "parameters": self.parameters.to_dict()}


@dataclass(frozen=True)
class PipelineSpec:
    """有序变换列表与全局种子"""
    transforms: Tuple[TransformSpec, ...] = ()
    global_seed: int = DEFAULT_GLOBAL_SEED

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        object.__setattr__(self, "global_seed", int(self.global_seed))

    @classmethod
    def default(cls, global_seed: int = DEFAULT_GLOBAL_SEED) -> "PipelineSpec":
        """
        默认流水线：仿射 0.5，左右翻转 0.5，偏置场 0.3，弹性 0.3，标签掩膜弹性 1.0
        """
        return cls((
            TransformSpec(TransformKind.AFFINE, 0.5, AffineParams()),
            TransformSpec(TransformKind.FLIP, 1.0, FlipParams((0.5, 0.0, 0.0))),
            TransformSpec(TransformKind.BIAS_FIELD, 0.3, BiasFieldParams()),
            TransformSpec(TransformKind.ELASTIC, 0.3, ElasticParams()),
            TransformSpec(TransformKind.LABEL_MASKED_ELASTIC, 1.0, LabelMaskedElasticParams()),
        ), global_seed)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str = "pipeline") -> "PipelineSpec":
        unknown = set(data) - {"transforms", "global_seed"}
        if unknown:
            raise ConfigError(f"未知配置项 {sorted(unknown)}", key=f"{path}.{sorted(unknown)[0]}")
        seed = data.get("global_seed", DEFAULT_GLOBAL_SEED)
        if "transforms" not in data:
            return cls.default(seed)
        transforms = tuple(TransformSpec.from_dict(t, f"{path}.transforms[{i}]")
                           for i, t in enumerate(data["transforms"]))
        return cls(transforms, seed)

    def to_dict(self) -> Dict[str, Any]:
        return {"global_seed": self.global_seed, "transforms": [t.to_dict() for t in self.transforms]}

    def with_seed(self, global_seed: int) -> "PipelineSpec":
        return PipelineSpec(self.transforms, global_seed)


def _dispatch(case: Case, spec: TransformSpec, rng: RngStream, scheme: LabelScheme) -> Case:
    p = spec.parameters
    if spec.kind == TransformKind.AFFINE:
        return random_affine(case, p, rng)
    if spec.kind == TransformKind.FLIP:
        return random_flip(case, p.axes_probabilities, rng)
    if spec.kind == TransformKind.BIAS_FIELD:
        return random_bias_field(case, p.order, p.coefficient_range, rng)
    if spec.kind == TransformKind.ELASTIC:
        return random_elastic(case, p.grid_shape, p.max_displacement_mm, rng)
    return label_masked_elastic(case, scheme, p.grid_shape, p.max_displacement_mm,
                                p.dilation_vox, p.sigma_vox, rng)


def transform_seeds(spec: PipelineSpec, case_id: str, replicate_index: int) -> List[int]:
    """每个变换派生的随机流种子（写入扩增报告）"""
    return [RngStream.derive(spec.global_seed, case_id, replicate_index, i).seed
            for i in range(len(spec.transforms))]


def apply_pipeline(case: Case, spec: PipelineSpec, replicate_index: int,
                   scheme: Optional[LabelScheme] = None) -> Case:
    """
    对病例应用整条流水线

    Args:
        case: 原始病例
        spec: 流水线规格
        replicate_index: 副本序号
        scheme: 标签方案（标签掩膜变换使用）

    Returns:
        新病例，编号为 "<id>-aug<replicate_index>"
    """
    scheme = scheme or LabelScheme()
    result = case
    for index, transform in enumerate(spec.transforms):
        rng = RngStream.derive(spec.global_seed, case.case_id, replicate_index, index)
        if transform.kind != TransformKind.LABEL_MASKED_ELASTIC:
            draw = rng.uniform()
            if draw >= transform.probability:
                logger.debug("%s 副本 %d: 跳过 %s", case.case_id, replicate_index, transform.kind.value)
                continue
        logger.debug("%s 副本 %d: 应用 %s", case.case_id, replicate_index, transform.kind.value)
        result = _dispatch(result, transform, rng, scheme)
    return result.with_id(FileManager.augmented_case_id(case.case_id, replicate_index))


@dataclass
class ExpansionReport:
    """数据集扩增报告"""
    replicates: int
    global_seed: int
    include_originals: bool = False
    cases_read: List[str] = field(default_factory=list)
    written: List[str] = field(default_factory=list)
    originals: List[str] = field(default_factory=list)
    skipped: List[Dict[str, str]] = field(default_factory=list)
    seeds: Dict[str, List[int]] = field(default_factory=dict)

    @property
    def failed_count(self) -> int:
        return len(self.skipped)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "replicates": self.replicates,
            "global_seed": self.global_seed,
            "include_originals": self.include_originals,
            "counts": {
                "input_cases": len(self.cases_read) + len(self.skipped),
                "cases_read": len(self.cases_read),
                "augmented_written": len(self.written),
                "originals_written": len(self.originals),
                "skipped": len(self.skipped),
            },
            "cases_read": self.cases_read,
            "written": self.written,
            "originals": self.originals,
            "skipped": self.skipped,
            "seeds": self.seeds,
        }

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        atomic_write_json(path, self.to_dict())
        return path


def _expand_one(case_dir: str, output_dir: str, spec: PipelineSpec, replicates: int,
                scheme: LabelScheme, include_originals: bool) -> Dict[str, Any]:
    """处理单个病例目录（在工作进程中执行）"""
    outcome: Dict[str, Any] = {"dir": Path(case_dir).name, "written": [], "seeds": {}, "original": None}
    try:
        case = FileManager.load_case(case_dir, scheme)
        outcome["case_id"] = case.case_id
        if include_originals:
            FileManager.save_case(case, output_dir)
            outcome["original"] = case.case_id
        for replicate in range(replicates):
            augmented = apply_pipeline(case, spec, replicate, scheme)
            FileManager.save_case(augmented, output_dir)
            outcome["written"].append(augmented.case_id)
            outcome["seeds"][augmented.case_id] = transform_seeds(spec, case.case_id, replicate)
    except (NeuroVolveError, OSError) as e:
        outcome["error"] = FileManager.describe_failure(e)
    return outcome


def expand_dataset(input_dir: PathLike, output_dir: PathLike, spec: PipelineSpec, replicates: int,
                   scheme: Optional[LabelScheme] = None, include_originals: bool = False,
                   workers: int = 1) -> ExpansionReport:
    """
    离线扩增数据集：每个输入病例生成 replicates 个增强副本（BraTS 布局）

    Args:
        input_dir: 输入根目录（每个子目录一个病例）
        output_dir: 输出根目录
        spec: 流水线规格
        replicates: 每个病例的副本数（≥ 1）
        scheme: 标签方案
        include_originals: 是否同时复制原始病例
        workers: 并行进程数；1 为串行

    Returns:
        ExpansionReport（同时写入 <output_dir>/expansion_report.json）
    """
    ok, msg = Validators.validate_replicates(replicates)
    if not ok:
        raise ConfigError(msg, key="replicates")
    ok, msg = Validators.validate_worker_count(workers)
    if not ok:
        raise ConfigError(msg, key="workers")
    scheme = scheme or LabelScheme()

    case_dirs = [str(p) for p in FileManager.list_case_dirs(input_dir)]
    if not case_dirs:
        logger.warning("输入目录中没有病例: %s", input_dir)
    success, output_path = FileManager.create_output_folder(output_dir)
    if not success:
        raise OSError(output_path)

    args = [(d, output_path, spec, replicates, scheme, include_originals) for d in case_dirs]
    if workers > 1 and len(case_dirs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_expand_one, *zip(*args)))
    else:
        outcomes = [_expand_one(*a) for a in args]

    report = ExpansionReport(replicates=replicates, global_seed=spec.global_seed,
                             include_originals=include_originals)
    for outcome in outcomes:
        if "error" in outcome:
            logger.error("跳过病例目录 %s: %s", outcome["dir"], outcome["error"])
            report.skipped.append({"dir": outcome["dir"], "reason": outcome["error"]})
            # 失败前已写出的副本仍在磁盘上
            report.written.extend(outcome["written"])
            report.seeds.update(outcome["seeds"])
            continue
        report.cases_read.append(outcome["case_id"])
        report.written.extend(outcome["written"])
        report.seeds.update(outcome["seeds"])
        if outcome["original"]:
            report.originals.append(outcome["original"])

    report.save(Path(output_path) / REPORT_FILENAME)
    logger.info("扩增完成: 读取 %d 例，写出 %d 例，跳过 %d 例",
                len(report.cases_read), len(report.written), len(report.skipped))
    return report
