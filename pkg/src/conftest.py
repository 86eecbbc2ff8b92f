"""
测试公共夹具：小尺寸体模病例
"""
import numpy as np
import pytest

from core.phantom import Ellipsoid, PhantomSpec, TumorSpec, generate_case
from core.volume import MODALITY_ORDER, Case, Volume3D, VolumeKind


def small_phantom_spec(seed: int = 0, dims=(24, 24, 24), center=(11.5, 11.5, 11.5),
                       radii=(2.0, 3.5, 5.0)) -> PhantomSpec:
    """24³ 体模：脑半径 10 mm，同心球形肿瘤"""
    return PhantomSpec(
        dims=dims,
        brain=Ellipsoid(center, (10.0, 10.0, 10.0)),
        tumor=TumorSpec.centered(center, *radii),
        seed=seed,
    )


def random_case(rng: np.random.Generator, dims=(12, 10, 8), spacing=(1.0, 1.0, 1.0), labels=(0, 1, 2, 3),
                case_id: str = "BraTS-TEST-00001-000") -> Case:
    """随机强度与随机标签的病例"""
    affine = np.diag([*spacing, 1.0])
    modalities = {m: Volume3D(rng.random(dims), spacing, affine) for m in MODALITY_ORDER}
    seg = Volume3D(rng.choice(labels, size=dims), spacing, affine, VolumeKind.LABEL)
    return Case(case_id, modalities, seg)


@pytest.fixture
def phantom_case() -> Case:
    return generate_case(small_phantom_spec(), "BraTS-PHANTOM-00001-000")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
