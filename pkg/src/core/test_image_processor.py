"""
预览图测试
"""
import numpy as np
import pytest
from PIL import Image

from conftest import random_case
from core.exceptions import PreviewError
from core.image_processor import DEFAULT_GUTTER, ImageProcessor
from core.volume import Case, Volume3D


def test_montage_geometry(rng):
    case = random_case(rng, dims=(12, 10, 8))
    for gutter in (0, DEFAULT_GUTTER, 7):
        image = ImageProcessor.create_preview(case, 3, gutter=gutter)
        assert image.size == (5 * 12 + 4 * gutter, 10)
        assert image.mode == "RGB"


def test_gutter_is_black(rng):
    case = random_case(rng, dims=(6, 5, 4))
    array = np.asarray(ImageProcessor.create_preview(case, 0, gutter=3))
    assert not array[:, 6:9].any()


def test_slice_orientation():
    data = np.zeros((3, 2, 1))
    data[2, 1, 0] = 1.0
    image = ImageProcessor.axial_slice(Volume3D(data, (1, 1, 1), np.eye(4)), 0)
    assert image.shape == (2, 3)
    assert image[0, 2] == 1.0


@pytest.mark.parametrize("index", [-1, 8, 100])
def test_slice_out_of_range(rng, index):
    case = random_case(rng, dims=(6, 6, 8))
    with pytest.raises(PreviewError):
        ImageProcessor.create_preview(case, index)


def test_background_segmentation_has_no_overlay(phantom_case):
    seg = phantom_case.segmentation
    empty = Case(phantom_case.case_id, phantom_case.modalities, seg.with_data(np.zeros(seg.dims, dtype=np.int32)))
    counts = ImageProcessor.color_counts(ImageProcessor.create_preview(empty, 12))
    assert counts == {"et": 0, "ncr": 0, "ed": 0}
    unlabeled = Case(phantom_case.case_id, phantom_case.modalities)
    assert sum(ImageProcessor.color_counts(ImageProcessor.create_preview(unlabeled, 12)).values()) == 0


def test_centered_tumor_shows_all_colors(phantom_case):
    counts = ImageProcessor.color_counts(ImageProcessor.create_preview(phantom_case, 11))
    assert counts["et"] > 0 and counts["ncr"] > 0 and counts["ed"] > 0
    labels = phantom_case.segmentation.data[:, :, 11]
    assert counts["ncr"] == int((labels == 1).sum())
    assert counts["ed"] == int((labels == 2).sum())


def test_constant_volume_windows_to_black():
    out = ImageProcessor.window_to_uint8(np.full((3, 3), 5.0), (5.0, 5.0))
    assert out.dtype == np.uint8 and not out.any()
    ramp = ImageProcessor.window_to_uint8(np.array([[-1.0, 0.0, 0.5, 1.0, 2.0]]), (0.0, 1.0))
    np.testing.assert_array_equal(ramp, [[0, 0, 128, 255, 255]])


def test_save_png(tmp_path, rng):
    image = ImageProcessor.create_preview(random_case(rng), 2)
    path = ImageProcessor.save_png(image, tmp_path / "preview.png")
    with Image.open(path) as loaded:
        assert loaded.size == image.size
        assert loaded.format == "PNG"
