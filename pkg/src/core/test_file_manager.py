"""
BraTS 目录布局测试
"""
import numpy as np
import pytest

from core.exceptions import GeometryMismatchError, MissingModalityError
from core.file_manager import FileManager
from core.nifti_io import write_nifti
from core.volume import LabelScheme, Volume3D, VolumeKind


@pytest.fixture
def case_dir(tmp_path, phantom_case):
    return FileManager.save_case(phantom_case, tmp_path)


def test_load_case_roundtrip(case_dir, phantom_case):
    case = FileManager.load_case(case_dir, LabelScheme())
    assert case.case_id == phantom_case.case_id
    np.testing.assert_array_equal(case.segmentation.data, phantom_case.segmentation.data)


def test_load_case_missing_t2(case_dir):
    (case_dir / f"{case_dir.name}-t2w.nii.gz").unlink()
    with pytest.raises(MissingModalityError) as info:
        FileManager.load_case(case_dir, LabelScheme())
    assert info.value.modality == "T2"
    assert "T2" in str(info.value)


def test_load_case_segmentation_is_optional(case_dir):
    (case_dir / f"{case_dir.name}-seg.nii.gz").unlink()
    assert FileManager.load_case(case_dir, LabelScheme()).segmentation is None


@pytest.mark.parametrize("offset, accepted", [(0.01, False), (0.0004, True)])
def test_load_case_segmentation_spacing_tolerance(case_dir, phantom_case, offset, accepted):
    seg = phantom_case.segmentation
    spacing = (seg.spacing[0] + offset, seg.spacing[1], seg.spacing[2])
    shifted = Volume3D(seg.data, spacing, np.diag([*spacing, 1.0]), VolumeKind.LABEL)
    write_nifti(shifted, case_dir / f"{case_dir.name}-seg.nii.gz")
    if accepted:
        assert FileManager.load_case(case_dir, LabelScheme()).segmentation is not None
    else:
        with pytest.raises(GeometryMismatchError):
            FileManager.load_case(case_dir, LabelScheme())


def test_augmented_case_id():
    assert FileManager.augmented_case_id("BraTS-GLI-00001-000", 3) == "BraTS-GLI-00001-000-aug3"
