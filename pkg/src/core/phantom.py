"""
合成体模生成
以嵌套椭球构造 BraTS 布局的病例：几何已知，可直接给出体素数与表面的解析参照
"""
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.augment.rng import stable_seed
from core.exceptions import ConfigError, PhantomSpecError
from core.file_manager import FileManager
from core.volume import MODALITY_ORDER, Case, LabelScheme, Modality, Volume3D, VolumeKind
from utils.file_utils import atomic_write_json
from utils.validators import Validators

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CASE_ID_TEMPLATE = "BraTS-PHANTOM-{index:05d}-000"
TRAINING_DIR = "training"
VALIDATION_DIR = "validation"
MAX_JITTER_ATTEMPTS = 50
_SURFACE_SAMPLES = 24


@dataclass(frozen=True)
class Ellipsoid:
    """轴对齐椭球，中心与半径单位均为 mm；半径全为 0 表示空"""
    center: Tuple[float, float, float]
    radii: Tuple[float, float, float]

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        radii = tuple(float(r) for r in self.radii)
        if len(center) != 3 or len(radii) != 3:
            raise PhantomSpecError(f"椭球中心与半径都需要三个分量: {self.center}, {self.radii}")
        if any(r < 0 for r in radii) or (any(r == 0 for r in radii) and any(r > 0 for r in radii)):
            raise PhantomSpecError(f"椭球半径必须全为正或全为 0: {radii}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radii", radii)

    @property
    def is_empty(self) -> bool:
        return not any(self.radii)

    @property
    def volume_mm3(self) -> float:
        return 4.0 / 3.0 * np.pi * float(np.prod(self.radii))

    def level(self, points: np.ndarray) -> np.ndarray:
        """隐式函数 Σ((p−c)/r)²，点的最后一维为 xyz"""
        if self.is_empty:
            return np.full(points.shape[:-1], np.inf)
        return (((points - np.asarray(self.center)) / np.asarray(self.radii)) ** 2).sum(axis=-1)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return self.level(points) <= 1.0

    def surface_points(self, samples: int = _SURFACE_SAMPLES) -> np.ndarray:
        theta = np.linspace(0.0, np.pi, samples)
        phi = np.linspace(0.0, 2.0 * np.pi, 2 * samples, endpoint=False)
        t, p = np.meshgrid(theta, phi, indexing="ij")
        unit = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1).reshape(-1, 3)
        return np.asarray(self.center) + unit * np.asarray(self.radii)

    def inside(self, other: "Ellipsoid") -> bool:
        """本椭球是否严格位于 other 内部（表面采样判定）"""
        if self.is_empty:
            return True
        if other.is_empty:
            return False
        return bool((other.level(self.surface_points()) < 1.0).all())

    def shifted(self, offset: Sequence[float]) -> "Ellipsoid":
        return Ellipsoid(tuple(np.asarray(self.center) + np.asarray(offset)), self.radii)

    def scaled(self, factor: float) -> "Ellipsoid":
        return Ellipsoid(self.center, tuple(r * factor for r in self.radii))

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str) -> "Ellipsoid":
        _check_keys(data, {"center", "radii"}, path)
        for key in ("center", "radii"):
            if key not in data:
                raise ConfigError("缺少椭球参数", key=f"{path}.{key}")
        return cls(tuple(data["center"]), tuple(data["radii"]))

    def to_dict(self) -> Dict[str, Any]:
        return {"center": list(self.center), "radii": list(self.radii)}


def _check_keys(data: Dict[str, Any], allowed: set, path: str) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(f"未知配置项，允许: {sorted(allowed)}", key=f"{path}.{key}")


@dataclass(frozen=True)
class TumorSpec:
    """嵌套肿瘤：NCR 核心 ⊂ ET 外壳 ⊂ ED 外缘"""
    ncr: Ellipsoid
    et: Ellipsoid
    ed: Ellipsoid

    def __post_init__(self):
        if not self.ncr.inside(self.et):
            raise PhantomSpecError("NCR 椭球必须严格位于 ET 椭球内部")
        if not self.et.inside(self.ed):
            raise PhantomSpecError("ET 椭球必须严格位于 ED 椭球内部")

    @property
    def outermost(self) -> Ellipsoid:
        for shell in (self.ed, self.et, self.ncr):
            if not shell.is_empty:
                return shell
        return self.ed

    def shifted(self, offset: Sequence[float]) -> "TumorSpec":
        return TumorSpec(self.ncr.shifted(offset), self.et.shifted(offset), self.ed.shifted(offset))

    def scaled(self, factor: float) -> "TumorSpec":
        return TumorSpec(self.ncr.scaled(factor), self.et.scaled(factor), self.ed.scaled(factor))

    @classmethod
    def centered(cls, center: Sequence[float], ncr_radius: float, et_radius: float, ed_radius: float) -> "TumorSpec":
        """同心球形肿瘤"""
        return cls(*(Ellipsoid(tuple(center), (r, r, r)) for r in (ncr_radius, et_radius, ed_radius)))

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str = "tumor") -> "TumorSpec":
        _check_keys(data, {"ncr", "et", "ed"}, path)
        for key in ("ncr", "et", "ed"):
            if key not in data:
                raise ConfigError("缺少肿瘤分层", key=f"{path}.{key}")
        return cls(*(Ellipsoid.from_dict(data[k], f"{path}.{k}") for k in ("ncr", "et", "ed")))

    def to_dict(self) -> Dict[str, Any]:
        return {"ncr": self.ncr.to_dict(), "et": self.et.to_dict(), "ed": self.ed.to_dict()}


@dataclass(frozen=True)
class TissueIntensity:
    """单个模态中各组织的平均强度"""
    brain: float
    ed: float
    ncr: float
    et: float

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str) -> "TissueIntensity":
        _check_keys(data, {"brain", "ed", "ncr", "et"}, path)
        return cls(**{k: float(v) for k, v in data.items()})

    def to_dict(self) -> Dict[str, float]:
        return {"brain": self.brain, "ed": self.ed, "ncr": self.ncr, "et": self.et}


DEFAULT_INTENSITIES = {
    Modality.T1: TissueIntensity(brain=0.6, ed=0.5, ncr=0.3, et=0.55),
    Modality.T1CE: TissueIntensity(brain=0.6, ed=0.55, ncr=0.25, et=1.0),
    Modality.T2: TissueIntensity(brain=0.5, ed=0.9, ncr=0.95, et=0.7),
    Modality.FLAIR: TissueIntensity(brain=0.45, ed=1.0, ncr=0.6, et=0.8),
}


def _default_brain() -> Ellipsoid:
    return Ellipsoid((31.5, 31.5, 31.5), (27.0, 24.0, 25.0))


def _default_tumor() -> TumorSpec:
    return TumorSpec.centered((32.0, 32.0, 32.0), 5.0, 8.0, 13.0)


@dataclass(frozen=True)
class PhantomSpec:
    """
    体模规格

    默认 64³、1 mm 各向同性；体素 [i, j, k] 的中心位于 (i·sx, j·sy, k·sz) mm。
    """
    dims: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    brain: Ellipsoid = field(default_factory=_default_brain)
    tumor: TumorSpec = field(default_factory=_default_tumor)
    intensities: Dict[Modality, TissueIntensity] = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(n < 1 for n in dims):
            raise PhantomSpecError(f"体模尺寸必须为三个正整数: {self.dims}")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise PhantomSpecError(f"体素间距必须为三个正数: {self.spacing}")
        missing = [m.name for m in MODALITY_ORDER if m not in self.intensities]
        if missing:
            raise PhantomSpecError(f"缺少模态强度配置: {missing}")
        ok, msg = Validators.validate_non_negative(self.noise_std, "noise_std")
        if not ok:
            raise PhantomSpecError(msg)
        if self.brain.is_empty:
            raise PhantomSpecError("脑椭球不能为空")
        if not self.tumor.outermost.inside(self.brain):
            raise PhantomSpecError("肿瘤必须位于脑椭球内部")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "noise_std", float(self.noise_std))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def affine(self) -> np.ndarray:
        return np.diag([*self.spacing, 1.0])

    def voxel_centers(self) -> np.ndarray:
        """形状 (nx, ny, nz, 3) 的体素中心坐标（mm）"""
        axes = [np.arange(n, dtype=np.float64) * s for n, s in zip(self.dims, self.spacing)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str = "phantom") -> "PhantomSpec":
        _check_keys(data, {"dims", "spacing", "brain", "tumor", "intensities", "noise_std", "seed"}, path)
        kwargs: Dict[str, Any] = {}
        for key in ("dims", "spacing"):
            if key in data:
                kwargs[key] = tuple(data[key])
        if "brain" in data:
            kwargs["brain"] = Ellipsoid.from_dict(data["brain"], f"{path}.brain")
        if "tumor" in data:
            kwargs["tumor"] = TumorSpec.from_dict(data["tumor"], f"{path}.tumor")
        if "intensities" in data:
            intensities = dict(DEFAULT_INTENSITIES)
            for name, values in data["intensities"].items():
                try:
                    modality = Modality[name]
                except KeyError:
                    raise ConfigError(f"未知模态，允许: {[m.name for m in Modality]}", key=f"{path}.intensities.{name}")
                intensities[modality] = TissueIntensity.from_dict(values, f"{path}.intensities.{name}")
            kwargs["intensities"] = intensities
        for key in ("noise_std", "seed"):
            if key in data:
                kwargs[key] = data[key]
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "brain": self.brain.to_dict(),
            "tumor": self.tumor.to_dict(),
            "intensities": {m.name: self.intensities[m].to_dict() for m in MODALITY_ORDER},
            "noise_std": self.noise_std,
            "seed": self.seed,
        }

    @classmethod
    def load(cls, path: PathLike) -> "PhantomSpec":
        """从 JSON 文件读取（严格：未知键报错）"""
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"体模规格 JSON 语法错误: {e.msg}（列 {e.colno}）", line=e.lineno)
        return cls.from_dict(data)

    def save(self, path: PathLike) -> None:
        atomic_write_json(path, self.to_dict())


def segmentation_array(spec: PhantomSpec, scheme: Optional[LabelScheme] = None) -> np.ndarray:
    """按椭球归属分配标签：ED、ET、NCR 依次覆盖，最内层胜出"""
    scheme = scheme or LabelScheme()
    points = spec.voxel_centers()
    labels = np.full(spec.dims, scheme.background, dtype=np.int32)
    for shell, value in ((spec.tumor.ed, scheme.ed), (spec.tumor.et, scheme.et), (spec.tumor.ncr, scheme.ncr)):
        labels[shell.contains(points)] = value
    return labels


def generate_case(spec: PhantomSpec, case_id: str = CASE_ID_TEMPLATE.format(index=1),
                  scheme: Optional[LabelScheme] = None) -> Case:
    """
    生成一个体模病例

    Args:
        spec: 体模规格
        case_id: 病例编号
        scheme: 标签方案

    Returns:
        Case；同一规格（含种子）总是得到逐位相同的结果
    """
    scheme = scheme or LabelScheme()
    brain = spec.brain.contains(spec.voxel_centers())
    labels = segmentation_array(spec, scheme)
    rng = np.random.Generator(np.random.PCG64(spec.seed))

    modalities = {}
    for modality in MODALITY_ORDER:
        tissue = spec.intensities[modality]
        data = np.zeros(spec.dims, dtype=np.float64)
        data[brain] = tissue.brain
        data[labels == scheme.ed] = tissue.ed
        data[labels == scheme.et] = tissue.et
        data[labels == scheme.ncr] = tissue.ncr
        noise = rng.normal(0.0, spec.noise_std, size=spec.dims) if spec.noise_std > 0 else 0.0
        data = np.where(brain, data + noise, 0.0)
        modalities[modality] = Volume3D(data, spec.spacing, spec.affine, VolumeKind.INTENSITY)

    segmentation = Volume3D(labels, spec.spacing, spec.affine, VolumeKind.LABEL)
    return Case(case_id, modalities, segmentation)


def jittered_spec(base: PhantomSpec, index: int, jitter: float) -> PhantomSpec:
    """
    第 index 个病例的几何扰动规格

    肿瘤半径乘以 (1 + u·jitter)，中心沿各轴平移 u·jitter·ED 半径（u ~ U[-1, 1]）；
    jitter > 0 时噪声种子也随病例变化。扰动后肿瘤越出脑椭球则重新采样。
    """
    if jitter < 0:
        raise PhantomSpecError(f"jitter 不能为负: {jitter}")
    if jitter == 0:
        return base
    rng = np.random.Generator(np.random.PCG64(stable_seed(base.seed, "phantom", index)))
    reach = np.asarray(base.tumor.outermost.radii)
    for _ in range(MAX_JITTER_ATTEMPTS):
        factor = 1.0 + rng.uniform(-jitter, jitter)
        offset = rng.uniform(-jitter, jitter, size=3) * reach
        try:
            tumor = base.tumor.scaled(factor).shifted(offset)
            return replace(base, tumor=tumor, seed=stable_seed(base.seed, index))
        except PhantomSpecError:
            continue
    raise PhantomSpecError(f"连续 {MAX_JITTER_ATTEMPTS} 次扰动都使肿瘤越出脑椭球（jitter={jitter}）")


def _write_one(index: int, base: PhantomSpec, jitter: float, target: str, scheme: LabelScheme) -> str:
    case_id = CASE_ID_TEMPLATE.format(index=index)
    case = generate_case(jittered_spec(base, index, jitter), case_id, scheme)
    return str(FileManager.save_case(case, target))


def generate_dataset(n: int, base_spec: PhantomSpec, jitter: float, output_dir: PathLike,
                     validation_count: int = 0, scheme: Optional[LabelScheme] = None,
                     workers: int = 1) -> List[Path]:
    """
    生成 n 个体模病例（BraTS 布局），编号 BraTS-PHANTOM-00001-000 起

    Args:
        n: 病例数（≥ 1）
        base_spec: 基础规格
        jitter: 相对几何扰动幅度，0 表示所有病例除编号外完全相同
        output_dir: 输出根目录
        validation_count: > 0 时最后这些病例写入 validation/，其余写入 training/
        scheme: 标签方案
        workers: 并行进程数

    Returns:
        写出的病例目录列表
    """
    ok, msg = Validators.validate_case_count(n)
    if not ok:
        raise PhantomSpecError(msg)
    if not (0 <= validation_count <= n):
        raise PhantomSpecError(f"验证集病例数必须在 0-{n} 之间: {validation_count}")
    scheme = scheme or LabelScheme()

    training_count = n - validation_count
    targets = []
    for index in range(1, n + 1):
        if validation_count == 0:
            folder = ""
        else:
            folder = TRAINING_DIR if index <= training_count else VALIDATION_DIR
        success, path = FileManager.create_output_folder(output_dir, folder)
        if not success:
            raise OSError(path)
        targets.append(path)

    jobs = [(index, base_spec, jitter, targets[index - 1], scheme) for index in range(1, n + 1)]
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            written = list(pool.map(_write_one, *zip(*jobs)))
    else:
        written = [_write_one(*job) for job in jobs]

    logger.info("已生成 %d 个体模病例（训练 %d / 验证 %d）", n, training_count, validation_count)
    return [Path(p) for p in written]
