"""
评估指标测试
快速实现与逐体素暴力参照实现逐一比对
"""
import itertools
import json
import math
from collections import deque

import numpy as np
import pandas as pd
import pytest
from scipy import ndimage

from conftest import small_phantom_spec
from core.exceptions import GeometryMismatchError, MetricError
from core.metrics import (CaseScores, LesionParams, MetricParams, RegionScore, aggregate, connected_components,
                          dice, lesion_wise_dice, nsd, score_case, score_directories, surface_voxels)
from core.nifti_io import write_nifti
from core.phantom import generate_case
from core.volume import LabelScheme, Region, Volume3D, VolumeKind, region_mask

SCHEME = LabelScheme()


# ---------------------------------------------------------------- 暴力参照实现

def _neighbours(connectivity):
    offsets = []
    for d in itertools.product((-1, 0, 1), repeat=3):
        order = sum(abs(v) for v in d)
        if order == 0:
            continue
        if connectivity == 6 and order > 1:
            continue
        if connectivity == 18 and order > 2:
            continue
        offsets.append(d)
    return offsets


def oracle_dice(a, b):
    sa = {tuple(p) for p in np.argwhere(a)}
    sb = {tuple(p) for p in np.argwhere(b)}
    if not sa and not sb:
        return 1.0
    return 2.0 * len(sa & sb) / (len(sa) + len(sb))


def oracle_components(mask, connectivity):
    """广度优先搜索，按 x 最快扫描顺序编号"""
    labels = np.zeros(mask.shape, dtype=int)
    count = 0
    nx, ny, nz = mask.shape
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not mask[x, y, z] or labels[x, y, z]:
                    continue
                count += 1
                labels[x, y, z] = count
                queue = deque([(x, y, z)])
                while queue:
                    p = queue.popleft()
                    for d in _neighbours(connectivity):
                        q = (p[0] + d[0], p[1] + d[1], p[2] + d[2])
                        if all(0 <= q[i] < mask.shape[i] for i in range(3)) and mask[q] and not labels[q]:
                            labels[q] = count
                            queue.append(q)
    return labels, count


def oracle_surface(mask):
    out = np.zeros(mask.shape, dtype=bool)
    for p in np.argwhere(mask):
        for d in _neighbours(6):
            q = tuple(p + np.array(d))
            if not all(0 <= q[i] < mask.shape[i] for i in range(3)) or not mask[q]:
                out[tuple(p)] = True
                break
    return out


def oracle_nsd(gt, pred, spacing, tau):
    if not gt.any() and not pred.any():
        return 1.0
    if not gt.any() or not pred.any():
        return 0.0
    s = np.asarray(spacing, dtype=float)
    pg = np.argwhere(oracle_surface(gt)) * s
    pp = np.argwhere(oracle_surface(pred)) * s
    d = np.sqrt(((pp[:, None, :] - pg[None, :, :]) ** 2).sum(axis=-1))
    limit = tau + 1e-9
    within = (d.min(axis=1) <= limit).sum() + (d.min(axis=0) <= limit).sum()
    return within / (len(pp) + len(pg))


def oracle_lesion_wise(gt, pred, connectivity=26, dilation=3, min_vox=0):
    if not gt.any() and not pred.any():
        return 1.0
    gl, gn = oracle_components(gt, connectivity)
    pl, pn = oracle_components(pred, connectivity)
    kept = [g for g in range(1, gn + 1) if (gl == g).sum() >= min_vox]
    coords = np.indices(gt.shape).reshape(3, -1).T
    zones = {}
    for g in kept:
        members = np.argwhere(gl == g)
        # 迭代 6 连通膨胀 = 曼哈顿距离不超过 dilation
        dist = np.abs(coords[:, None, :] - members[None, :, :]).sum(axis=-1).min(axis=1)
        zones[g] = (dist <= dilation).reshape(gt.shape)
    assigned = {g: [] for g in kept}
    fp = 0
    for p in range(1, pn + 1):
        comp = pl == p
        best, best_overlap = None, 0
        for g in kept:
            overlap = int((comp & zones[g]).sum())
            if overlap > best_overlap:
                best, best_overlap = g, overlap
        if best is not None:
            assigned[best].append(p)
        elif comp.sum() >= min_vox:
            fp += 1
    scores = [oracle_dice(gl == g, np.isin(pl, assigned[g])) if assigned[g] else 0.0 for g in kept]
    scores += [0.0] * fp
    return sum(scores) / len(scores) if scores else 1.0


def _random_mask(rng, shape, density):
    """随机团块：随机种子点经平滑后阈值化"""
    noise = rng.random(shape)
    smooth = ndimage.uniform_filter(noise, size=3, mode="constant")
    return smooth > np.quantile(smooth, 1.0 - density)


def _random_pairs(count):
    rng = np.random.default_rng(2024)
    for _ in range(count):
        shape = tuple(int(n) for n in rng.integers(4, 11, size=3))
        spacing = tuple(float(s) for s in rng.choice([0.5, 1.0, 1.5, 2.0], size=3))
        gt = _random_mask(rng, shape, rng.uniform(0.0, 0.35))
        pred = _random_mask(rng, shape, rng.uniform(0.0, 0.35))
        yield gt, pred, spacing


# ---------------------------------------------------------------- Dice

def test_dice_cube_slab():
    a = np.zeros((20, 10, 10), dtype=bool)
    b = np.zeros_like(a)
    a[0:10] = True
    b[5:15] = True
    assert dice(a, b) == pytest.approx(0.5)


def test_dice_edge_cases():
    empty = np.zeros((3, 3, 3), dtype=bool)
    full = np.ones((3, 3, 3), dtype=bool)
    assert dice(empty, empty) == 1.0
    assert dice(full, full) == 1.0
    assert dice(full, empty) == 0.0
    with pytest.raises(MetricError):
        dice(full, np.ones((3, 3, 4), dtype=bool))


# ---------------------------------------------------------------- 连通域

def test_components_basic_cases():
    cube = np.zeros((8, 8, 8), dtype=bool)
    cube[1:4, 1:4, 1:4] = True
    assert connected_components(cube, 6).count == 1

    two = cube.copy()
    two[6:8, 1:4, 1:4] = True
    for connectivity in (6, 18, 26):
        assert connected_components(two, connectivity).count == 2

    corner = np.zeros((2, 2, 2), dtype=bool)
    corner[0, 0, 0] = corner[1, 1, 1] = True
    assert connected_components(corner, 26).count == 1
    assert connected_components(corner, 18).count == 2
    assert connected_components(corner, 6).count == 2


def test_component_ids_follow_scan_order():
    mask = np.zeros((5, 5, 5), dtype=bool)
    mask[4, 0, 0] = True
    mask[0, 4, 4] = True
    labeling = connected_components(mask, 6)
    assert labeling.labels[4, 0, 0] == 1
    assert labeling.labels[0, 4, 4] == 2
    assert labeling.size(1) == 1


@pytest.mark.parametrize("connectivity", [6, 18, 26])
def test_components_match_oracle(connectivity):
    rng = np.random.default_rng(connectivity)
    for _ in range(10):
        mask = rng.random((7, 6, 5)) < 0.3
        labeling = connected_components(mask, connectivity)
        expected, count = oracle_components(mask, connectivity)
        assert labeling.count == count
        np.testing.assert_array_equal(labeling.labels, expected)


def test_invalid_connectivity():
    with pytest.raises(MetricError):
        connected_components(np.ones((2, 2, 2), dtype=bool), 8)


# ---------------------------------------------------------------- 表面与 NSD

def test_surface_voxels_cube():
    mask = np.zeros((5, 5, 5), dtype=bool)
    mask[1:4, 1:4, 1:4] = True
    surface = surface_voxels(mask)
    assert surface.sum() == 26
    assert not surface[2, 2, 2]

    single = np.zeros((3, 3, 3), dtype=bool)
    single[1, 1, 1] = True
    np.testing.assert_array_equal(surface_voxels(single), single)
    assert not surface_voxels(np.zeros((3, 3, 3), dtype=bool)).any()


def test_surface_touching_volume_border():
    full = np.ones((3, 3, 3), dtype=bool)
    assert surface_voxels(full).sum() == 26


def test_nsd_edge_cases():
    a = np.zeros((6, 6, 6), dtype=bool)
    a[1:4, 1:4, 1:4] = True
    empty = np.zeros_like(a)
    assert nsd(a, a) == 1.0
    assert nsd(empty, empty) == 1.0
    assert nsd(a, empty) == 0.0
    assert nsd(empty, a) == 0.0


def test_nsd_one_voxel_shift_within_tolerance():
    gt = np.zeros((12, 12, 12), dtype=bool)
    gt[3:8, 3:8, 3:8] = True
    pred = np.roll(gt, 1, axis=0)
    assert nsd(gt, pred, (1.0, 1.0, 1.0), 1.0) == 1.0


def test_nsd_three_voxel_shift_matches_oracle():
    gt = np.zeros((14, 12, 12), dtype=bool)
    gt[3:8, 3:8, 3:8] = True
    pred = np.roll(gt, 3, axis=0)
    value = nsd(gt, pred, (1.0, 1.0, 1.0), 1.0)
    assert 0.0 < value < 1.0
    assert value == pytest.approx(oracle_nsd(gt, pred, (1.0, 1.0, 1.0), 1.0), abs=1e-9)


def test_nsd_symmetric_and_monotone():
    for gt, pred, spacing in _random_pairs(20):
        previous = -1.0
        for tau in (0.0, 0.5, 1.0, 2.0, 4.0):
            value = nsd(gt, pred, spacing, tau)
            assert value == pytest.approx(nsd(pred, gt, spacing, tau), abs=1e-12)
            assert value >= previous
            previous = value


# ---------------------------------------------------------------- 病灶级 Dice

def test_lesion_wise_identical():
    gt = np.zeros((10, 10, 10), dtype=bool)
    gt[2:5, 2:5, 2:5] = True
    score, report = lesion_wise_dice(gt, gt)
    assert score == 1.0
    assert report.false_positives == () and report.false_negatives == ()


def test_lesion_wise_spurious_prediction():
    gt = np.zeros((30, 10, 10), dtype=bool)
    gt[2:5, 2:5, 2:5] = True
    pred = gt.copy()
    pred[22:25, 2:5, 2:5] = True
    score, report = lesion_wise_dice(gt, pred)
    assert score == pytest.approx(0.5)
    assert len(report.false_positives) == 1


def test_lesion_wise_missed_lesion():
    gt = np.zeros((30, 10, 10), dtype=bool)
    gt[2:5, 2:5, 2:5] = True
    gt[22:25, 2:5, 2:5] = True
    pred = np.zeros_like(gt)
    pred[2:5, 2:5, 2:5] = True
    score, report = lesion_wise_dice(gt, pred)
    assert score == pytest.approx(0.5)
    assert report.false_negatives == (2,)


def test_lesion_wise_empty_cases():
    empty = np.zeros((5, 5, 5), dtype=bool)
    some = empty.copy()
    some[1, 1, 1] = True
    assert lesion_wise_dice(empty, empty)[0] == 1.0
    assert lesion_wise_dice(empty, some)[0] == 0.0
    assert lesion_wise_dice(some, empty)[0] == 0.0


def test_lesion_wise_equals_dice_for_single_components():
    gt = np.zeros((12, 12, 12), dtype=bool)
    gt[2:8, 2:8, 2:8] = True
    pred = np.zeros_like(gt)
    pred[4:10, 3:9, 2:8] = True
    assert lesion_wise_dice(gt, pred)[0] == pytest.approx(dice(gt, pred), abs=1e-12)


def test_lesion_wise_small_lesions_excluded():
    gt = np.zeros((20, 10, 10), dtype=bool)
    gt[2:6, 2:6, 2:6] = True
    gt[15, 5, 5] = True
    pred = gt.copy()
    pred[15, 5, 5] = False
    pred[18, 8, 8] = True
    score, report = lesion_wise_dice(gt, pred, params=LesionParams(min_lesion_vox=2))
    assert score == 1.0
    assert report.lesions[1].excluded
    assert report.excluded_predictions == (2,)


def test_metrics_match_oracles_on_random_pairs():
    taus = (0.5, 1.0, 2.0)
    for gt, pred, spacing in _random_pairs(200):
        assert dice(gt, pred) == pytest.approx(oracle_dice(gt, pred), abs=1e-9)
        for tau in taus:
            assert nsd(gt, pred, spacing, tau) == pytest.approx(oracle_nsd(gt, pred, spacing, tau), abs=1e-9)
        score, _ = lesion_wise_dice(gt, pred, spacing, LesionParams(26, 3, 0))
        assert score == pytest.approx(oracle_lesion_wise(gt, pred, 26, 3, 0), abs=1e-9)


def test_lesion_wise_matches_oracle_with_other_params():
    for gt, pred, spacing in _random_pairs(40):
        score, _ = lesion_wise_dice(gt, pred, spacing, LesionParams(6, 1, 3))
        assert score == pytest.approx(oracle_lesion_wise(gt, pred, 6, 1, 3), abs=1e-9)


# ---------------------------------------------------------------- 病例评分与汇总

def test_score_case_perfect_and_empty(phantom_case):
    seg = phantom_case.segmentation
    row = score_case(seg, seg, SCHEME, case_id="p")
    for region in Region:
        assert row[region].lsd == 1.0 and row[region].nsd == 1.0

    background = seg.with_data(np.zeros(seg.dims, dtype=np.int32))
    row = score_case(seg, background, SCHEME)
    for region in Region:
        assert row[region].lsd == 0.0 and row[region].nsd == 0.0


def test_score_case_phantom_pair_matches_oracle():
    gt_seg = generate_case(small_phantom_spec()).segmentation
    shifted = small_phantom_spec(center=(12.5, 11.5, 11.5))
    pred_seg = generate_case(shifted).segmentation
    row = score_case(gt_seg, pred_seg, SCHEME)
    for region in Region:
        gt = region_mask(gt_seg, region, SCHEME).array
        pred = region_mask(pred_seg, region, SCHEME).array
        assert row[region].lsd == pytest.approx(oracle_lesion_wise(gt, pred), abs=1e-9)
        assert row[region].nsd == pytest.approx(oracle_nsd(gt, pred, (1, 1, 1), 1.0), abs=1e-9)


def test_score_case_geometry_mismatch(phantom_case):
    seg = phantom_case.segmentation
    other = Volume3D(seg.data, (1.0, 1.0, 2.0), np.diag([1.0, 1.0, 2.0, 1.0]), VolumeKind.LABEL)
    with pytest.raises(GeometryMismatchError):
        score_case(seg, other)


def _row(case_id, lsd, nsd_values):
    return CaseScores(case_id, {r: RegionScore(r, l, n) for r, l, n in zip((Region.ET, Region.TC, Region.WT),
                                                                          lsd, nsd_values)})


def test_aggregate_reproduces_table_average():
    report = aggregate([_row("M+R", (0.860, 0.846, 0.897), (0.852, 0.780, 0.812))])
    assert report.avg_lsd == pytest.approx((0.860 + 0.846 + 0.897) / 3, abs=1e-9)
    assert report.avg_nsd == pytest.approx((0.852 + 0.780 + 0.812) / 3, abs=1e-9)
    # 表中三位小数的输入各有 ±0.0005 的舍入误差
    assert abs(report.avg_lsd - 0.867) < 1e-3
    assert round(report.avg_nsd, 3) == 0.815


def test_aggregate_means_and_order():
    rows = [_row("b", (1.0, 0.5, 0.0), (0.2, 0.4, 0.6)), _row("a", (0.0, 0.5, 1.0), (0.6, 0.4, 0.2))]
    report = aggregate(rows)
    assert [r.case_id for r in report.rows] == ["a", "b"]
    for region in Region:
        assert report.means[region].lsd == pytest.approx(0.5)
        assert report.means[region].nsd == pytest.approx(0.4)
    assert report.avg_lsd == pytest.approx(math.fsum(report.means[r].lsd for r in Region) / 3, abs=1e-9)
    assert aggregate(list(reversed(rows))).to_dict() == report.to_dict()


def test_aggregate_single_row_and_empty():
    row = _row("only", (0.1, 0.2, 0.3), (0.4, 0.5, 0.6))
    report = aggregate([row])
    assert report.means[Region.TC].lsd == 0.2
    with pytest.raises(MetricError):
        aggregate([])


def test_report_csv_and_json(tmp_path):
    report = aggregate([_row("c1", (1.0, 1.0, 1.0), (1.0, 1.0, 1.0)), _row("c2", (0.0, 0.5, 1.0), (0.5, 0.5, 0.5))])
    report.to_csv(tmp_path / "scores.csv")
    frame = pd.read_csv(tmp_path / "scores.csv")
    assert list(frame.columns) == ["case_id", "region", "lsd", "nsd"]
    assert len(frame) == 6 + 3 + 1
    assert frame.iloc[-1]["case_id"] == "AVG"
    assert (frame[frame["case_id"] == "c1"][["lsd", "nsd"]] == 1.0).all().all()

    report.to_json(tmp_path / "scores.json")
    data = json.loads((tmp_path / "scores.json").read_text(encoding="utf-8"))
    assert set(data) == {"cases", "means", "avg", "missing"}
    assert data["means"]["TC"]["lsd"] == pytest.approx(0.75)


def test_metric_params_strict():
    assert MetricParams.from_dict({"tau_mm": 2.0}).tau_mm == 2.0
    with pytest.raises(ValueError):
        MetricParams.from_dict({"hausdorff": True})


def test_score_directories_pairs_cases(tmp_path):
    gt_dir, pred_dir = tmp_path / "gt", tmp_path / "pred"
    gt_dir.mkdir()
    pred_dir.mkdir()
    seg = generate_case(small_phantom_spec()).segmentation
    for case_id in ("A", "B"):
        write_nifti(seg, gt_dir / f"{case_id}-seg.nii.gz")
    write_nifti(seg, pred_dir / "A.nii.gz")
    write_nifti(seg, pred_dir / "C.nii.gz")
    report = score_directories(gt_dir, pred_dir, SCHEME)
    assert [r.case_id for r in report.rows] == ["A"]
    assert report.missing == ["B", "C"]
    assert report.avg_lsd == 1.0


def test_score_directories_disjoint(tmp_path):
    (tmp_path / "gt").mkdir()
    (tmp_path / "pred").mkdir()
    seg = generate_case(small_phantom_spec(radii=(0.0, 0.0, 0.0))).segmentation
    write_nifti(seg, tmp_path / "gt" / "A.nii.gz")
    write_nifti(seg, tmp_path / "pred" / "B.nii.gz")
    report = score_directories(tmp_path / "gt", tmp_path / "pred")
    assert report.is_empty
    assert report.to_frame().empty

