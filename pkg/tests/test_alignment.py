import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fusionlm.alignment import (FrameTrack, ManifestRow, assign_frames, attach_features,
                                load_segments, read_feature_file, read_manifest,
                                write_feature_file, write_manifest)
from fusionlm.errors import DataError
from fusionlm.tokenizer import encode, train_vocab


@pytest.mark.parametrize("n,k,expected", [
    (6, 3, [0, 0, 1, 1, 2, 2]),
    (6, 4, [0, 0, 1, 2, 2, 3]),
    (2, 5, [0, 2]),
])
def test_assign_examples(n, k, expected):
    assert assign_frames(n, k).tolist() == expected


@pytest.mark.parametrize("n,k", [(0, 3), (3, 0)])
def test_assign_rejects_empty(n, k):
    with pytest.raises(DataError):
        assign_frames(n, k)


@given(st.integers(1, 200), st.integers(1, 200))
def test_assign_properties(n, k):
    idx = assign_frames(n, k)
    assert len(idx) == n
    assert idx.min() >= 0 and idx.max() < k
    assert np.all(np.diff(idx) >= 0)
    if n >= k:
        counts = np.bincount(idx, minlength=k)
        assert counts.min() >= 1 and counts.max() - counts.min() <= 1


def test_attach_missing_track():
    seg = attach_features([1, 5, 6, 2], None, 3, "s0")
    assert seg.features.shape == (4, 3) and not seg.features.any()
    assert seg.has_visual is False


def test_attach_replicates_and_subsamples():
    f = np.array([1.0, 2.0])
    seg = attach_features([1, 5, 6, 2], FrameTrack(np.stack([f, f])), 2)
    assert np.array_equal(seg.features, np.stack([f] * 4)) and seg.has_visual
    frames = np.arange(12.0).reshape(6, 2)
    seg = attach_features([1, 5, 2], FrameTrack(frames), 2)
    assert np.array_equal(seg.features, frames[[0, 2, 4]])
    assert seg.tokens.tolist() == [1, 5, 2]


def test_attach_dimension_mismatch_names_segment():
    with pytest.raises(DataError, match="seg-17"):
        attach_features([1, 2], FrameTrack(np.ones((2, 4))), 3, "seg-17")


def test_frame_track_validation():
    with pytest.raises(DataError):
        FrameTrack(np.array([[np.nan]]))
    with pytest.raises(DataError):
        FrameTrack(np.zeros((0, 3)))


def test_blinded_segment_is_zero():
    seg = attach_features([1, 2, 3], FrameTrack(np.ones((1, 2))), 2).blinded()
    assert not seg.features.any() and seg.has_visual is False


def test_feature_file_round_trip_is_exact(tmp_path):
    frames = np.random.default_rng(3).normal(size=(5, 7))
    write_feature_file(tmp_path / "f.txt", frames)
    assert (tmp_path / "f.txt").read_text().splitlines()[0] == "5 7"
    assert np.array_equal(read_feature_file(tmp_path / "f.txt").frames, frames)


def test_feature_file_errors(tmp_path):
    (tmp_path / "bad.txt").write_text("2 2\n1 2 3\n")
    with pytest.raises(DataError):
        read_feature_file(tmp_path / "bad.txt")
    with pytest.raises(DataError):
        read_feature_file(tmp_path / "missing.txt")


def test_manifest_round_trip_and_load(tmp_path):
    (tmp_path / "feats").mkdir()
    write_feature_file(tmp_path / "feats" / "a.txt", np.eye(2))
    rows = [ManifestRow("a", "cut the onion", "feats/a.txt"), ManifestRow("b", "cut it", "-")]
    write_manifest(tmp_path / "m.tsv", rows)
    assert read_manifest(tmp_path / "m.tsv") == rows
    vocab = train_vocab([r.transcript for r in rows], 100)
    segs = load_segments(tmp_path / "m.tsv", vocab)
    assert [s.id for s in segs] == ["a", "b"]
    assert segs[0].has_visual and not segs[1].has_visual
    assert segs[0].tokens.tolist() == encode(vocab, "cut the onion")
    assert segs[0].features.shape == (5, 2) and not segs[1].features.any()


def test_manifest_bad_header(tmp_path):
    (tmp_path / "m.tsv").write_text("id\ttext\n")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "m.tsv")
