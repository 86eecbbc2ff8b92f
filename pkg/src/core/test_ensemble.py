"""
模型融合测试
"""
import json

import numpy as np
import pytest

from core.ensemble import (EnsembleMode, EnsembleSpec, ProbabilityVolume, REPORT_FILENAME, fuse_case_set,
                           fuse_labels_vote, fuse_probabilities)
from core.exceptions import ConfigError, EnsembleError
from core.nifti_io import read_nifti, read_nifti_channels, write_nifti, write_nifti_channels
from core.volume import Volume3D, VolumeKind

LABELS = (0, 1, 2, 3)


def _grid(dims=(4, 3, 2), spacing=(1.0, 1.0, 1.0)):
    return Volume3D(np.zeros(dims), spacing, np.diag([*spacing, 1.0]))


def _seg(data, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data)
    return Volume3D(data, spacing, np.diag([*spacing, 1.0]), VolumeKind.LABEL)


def _random_probs(rng, dims=(4, 3, 2)):
    probs = rng.random((*dims, len(LABELS)))
    probs /= probs.sum(axis=-1, keepdims=True)
    return ProbabilityVolume(probs, LABELS, _grid(dims))


def _single_voxel(vector):
    return ProbabilityVolume(np.asarray(vector, dtype=float).reshape(1, 1, 1, -1), LABELS, _grid((1, 1, 1)))


def test_probability_mean_example():
    fused = fuse_probabilities([_single_voxel([0.6, 0.4, 0, 0]), _single_voxel([0.2, 0.8, 0, 0])])
    assert fused.data[0, 0, 0] == 1
    assert fused.is_label


def test_probability_tie_takes_smaller_label():
    fused = fuse_probabilities([_single_voxel([0.5, 0.5, 0, 0])])
    assert fused.data[0, 0, 0] == 0


def test_weights_change_the_winner():
    a, b = _single_voxel([0.7, 0.3, 0, 0]), _single_voxel([0.1, 0.9, 0, 0])
    assert fuse_probabilities([a, b], [3.0, 1.0]).data[0, 0, 0] == 0
    assert fuse_probabilities([a, b], [1.0, 3.0]).data[0, 0, 0] == 1
    with pytest.raises(EnsembleError):
        fuse_probabilities([a, b], [1.0, 0.0])
    with pytest.raises(EnsembleError):
        fuse_probabilities([a, b], [1.0])


def test_fusion_idempotent(rng):
    member = _random_probs(rng)
    expected = member.argmax().data
    for k in (1, 2, 3):
        np.testing.assert_array_equal(fuse_probabilities([member] * k).data, expected)


def test_fusion_permutation_invariant(rng):
    members = [_random_probs(rng) for _ in range(4)]
    weights = [1.0, 2.0, 0.5, 1.5]
    reference = fuse_probabilities(members, weights).data
    for order in ([3, 2, 1, 0], [1, 3, 0, 2]):
        permuted = fuse_probabilities([members[i] for i in order], [weights[i] for i in order])
        np.testing.assert_array_equal(permuted.data, reference)


def test_probability_volume_validation():
    grid = _grid((1, 1, 1))
    with pytest.raises(EnsembleError):
        ProbabilityVolume(np.array([0.5, 0.4, 0.0, 0.0]).reshape(1, 1, 1, 4), LABELS, grid)
    with pytest.raises(EnsembleError):
        ProbabilityVolume(np.array([1.2, -0.2, 0.0, 0.0]).reshape(1, 1, 1, 4), LABELS, grid)
    with pytest.raises(EnsembleError):
        ProbabilityVolume(np.ones((1, 1, 1, 3)) / 3, LABELS, grid)
    with pytest.raises(EnsembleError):
        ProbabilityVolume(np.ones((2, 1, 1, 4)) / 4, LABELS, grid)


def test_members_must_share_grid_and_labels():
    a = _single_voxel([1, 0, 0, 0])
    shifted = ProbabilityVolume(np.array([1.0, 0, 0, 0]).reshape(1, 1, 1, 4), LABELS,
                                _grid((1, 1, 1), (1.0, 1.0, 2.0)))
    with pytest.raises(EnsembleError):
        fuse_probabilities([a, shifted])
    other_labels = ProbabilityVolume(np.array([1.0, 0, 0, 0]).reshape(1, 1, 1, 4), (0, 1, 2, 4), _grid((1, 1, 1)))
    with pytest.raises(EnsembleError):
        fuse_probabilities([a, other_labels])
    with pytest.raises(EnsembleError):
        fuse_probabilities([])


def test_one_hot_from_labels():
    seg = _seg(np.array([0, 1, 2, 3]).reshape(2, 2, 1))
    volume = ProbabilityVolume.from_labels(seg, LABELS)
    np.testing.assert_array_equal(volume.argmax().data, seg.data)
    with pytest.raises(EnsembleError):
        ProbabilityVolume.from_labels(_seg(np.full((1, 1, 1), 4)), LABELS)


@pytest.mark.parametrize("votes, expected", [
    ((1, 1, 2), 1),
    ((0, 3), 3),
    ((0, 0, 3), 0),
    ((2, 1), 1),
    ((3, 2, 2, 3, 0), 2),
])
def test_majority_vote(votes, expected):
    members = [_seg(np.full((1, 1, 1), v)) for v in votes]
    assert fuse_labels_vote(members).data[0, 0, 0] == expected


def test_vote_matches_per_voxel_oracle(rng):
    members = [_seg(rng.choice(LABELS, size=(5, 4, 3))) for _ in range(4)]
    fused = fuse_labels_vote(members).data
    stacked = np.stack([m.data for m in members])
    for index in np.ndindex(fused.shape):
        column = stacked[(slice(None), *index)].tolist()
        counts = {v: column.count(v) for v in set(column)}
        top = max(counts.values())
        winners = [v for v, c in counts.items() if c == top]
        nonzero = sorted(v for v in winners if v != 0)
        assert fused[index] == (nonzero[0] if nonzero else 0)


def test_spec_from_dict_and_bind():
    spec = EnsembleSpec.from_dict({"members": ["S", "M", "R"], "weights": [1, 1, 2]})
    assert spec.mode == EnsembleMode.PROBABILITY_MEAN
    assert spec.weights == (1.0, 1.0, 2.0)
    assert EnsembleSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(EnsembleError):
        spec.bind(["a", "b"])
    assert EnsembleSpec().bind(["/x/model_a", "/x/model_b"]).members == ("model_a", "model_b")
    with pytest.raises(ConfigError):
        EnsembleSpec.from_dict({"members": ["S"], "strategy": "stacking"})
    with pytest.raises(ConfigError):
        EnsembleSpec.from_dict({"mode": "Median"})
    with pytest.raises(ConfigError):
        EnsembleSpec.from_dict({"members": ["S", "M"], "weights": [1.0]})


def _write_member(root, name, segs):
    directory = root / name
    directory.mkdir()
    for case_id, data in segs.items():
        write_nifti(_seg(data), directory / f"{case_id}.nii.gz")
    return directory


def test_fuse_case_set_votes_and_skips_missing(tmp_path, rng):
    dims = (6, 5, 4)
    cases = {f"BraTS-GLI-{i:05d}-000": [rng.choice(LABELS, size=dims) for _ in range(3)] for i in range(5)}
    dirs = []
    for m, name in enumerate(("S", "M", "R")):
        segs = {cid: arrays[m] for cid, arrays in cases.items()}
        if name == "R":
            segs.pop("BraTS-GLI-00004-000")
        dirs.append(_write_member(tmp_path, name, segs))

    out = tmp_path / "fused"
    report = fuse_case_set(dirs, out)
    assert len(report.fused) == 4
    assert [s["case_id"] for s in report.skipped] == ["BraTS-GLI-00004-000"]
    assert set(report.methods.values()) == {"vote"}
    assert report.members == ["S", "M", "R"]

    for case_id in report.fused:
        fused = read_nifti(out / f"{case_id}.nii.gz", VolumeKind.LABEL)
        expected = fuse_labels_vote([_seg(a) for a in cases[case_id]])
        np.testing.assert_array_equal(fused.data, expected.data)
    assert not (out / "BraTS-GLI-00004-000.nii.gz").exists()

    saved = json.loads((out / REPORT_FILENAME).read_text(encoding="utf-8"))
    assert saved["counts"] == {"fused": 4, "skipped": 1}


def test_fuse_case_set_identical_members(tmp_path, rng):
    data = rng.choice(LABELS, size=(4, 4, 4))
    dirs = [_write_member(tmp_path, name, {"c1": data}) for name in ("a", "b")]
    fuse_case_set(dirs, tmp_path / "out")
    np.testing.assert_array_equal(read_nifti(tmp_path / "out" / "c1.nii.gz").data, data)


def test_fuse_case_set_mixes_probabilities_and_labels(tmp_path, rng):
    dims = (4, 3, 2)
    prob_dir = tmp_path / "soft"
    prob_dir.mkdir()
    soft = _random_probs(rng, dims)
    write_nifti_channels(soft.probabilities, soft.grid, prob_dir / "c1-prob.nii.gz")
    hard = rng.choice(LABELS, size=dims)
    hard_dir = _write_member(tmp_path, "hard", {"c1": hard})

    report = fuse_case_set([prob_dir, hard_dir], tmp_path / "out")
    assert report.methods == {"c1": "probability"}
    stored, grid = read_nifti_channels(prob_dir / "c1-prob.nii.gz")
    expected = fuse_probabilities([ProbabilityVolume(stored, LABELS, grid),
                                   ProbabilityVolume.from_labels(_seg(hard), LABELS)])
    np.testing.assert_array_equal(read_nifti(tmp_path / "out" / "c1.nii.gz").data, expected.data)


def test_fuse_case_set_parallel_matches_serial(tmp_path, rng):
    cases = {f"c{i}": [rng.choice(LABELS, size=(5, 5, 5)) for _ in range(3)] for i in range(4)}
    dirs = [_write_member(tmp_path, f"m{m}", {cid: a[m] for cid, a in cases.items()}) for m in range(3)]
    fuse_case_set(dirs, tmp_path / "serial", workers=1)
    fuse_case_set(dirs, tmp_path / "parallel", workers=2)
    for case_id in cases:
        name = f"{case_id}.nii.gz"
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "parallel" / name).read_bytes()
