"""Window/stride splitting and overlap-averaged reassembly."""

import numpy as np
import pytest

from emorec.errors import ConfigError, ContractError, CoverageError
from emorec.segmentation import (
    FrameSequence,
    SegmentationConfig,
    nominal_segment_count,
    reassemble,
    split,
    take_window,
)


def make_seq(n, d=2, seed=0):
    rng = np.random.default_rng(seed)
    return FrameSequence(
        f"vid{n}", rng.normal(size=(n, d)), rng.normal(size=(n, 2)),
        np.ones(n, dtype=bool), "va",
    )


def test_split_n10_w4_s3():
    segs = split(make_seq(10), SegmentationConfig(4, 3))
    assert [s.start for s in segs] == [1, 4, 7, 10]
    assert [s.index for s in segs] == [1, 2, 3, 4]
    last = segs[-1]
    assert last.pad_mask.tolist() == [True, False, False, False]
    assert np.allclose(last.frames[1:], 0.0)


def test_split_drops_empty_trailing_segment():
    # nominal floor(5/5)+1 = 2 but the second segment would start at 6 > 5
    assert nominal_segment_count(5, 5) == 2
    segs = split(make_seq(5), SegmentationConfig(5, 5))
    assert len(segs) == 1
    assert segs[0].pad_mask.all()


def test_split_reference_defaults_w300_s200():
    segs = split(make_seq(300), SegmentationConfig(300, 200))
    assert [s.start for s in segs] == [1, 201]
    spans = [set(range(s.start, s.start + s.real_length)) for s in segs]
    assert len(spans[0] & spans[1]) == 100  # overlap of 100 frames


def test_split_start_index_formula():
    cfg = SegmentationConfig(7, 4)
    for seg in split(make_seq(30), cfg):
        assert seg.start == (seg.index - 1) * cfg.stride + 1


def test_split_empty_sequence_rejected():
    with pytest.raises(ContractError):
        FrameSequence("v", np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, dtype=bool), "va")


def test_overlap_rule_enforced():
    with pytest.raises(ConfigError, match="s <= w"):
        SegmentationConfig(4, 5)
    with pytest.raises(ConfigError):
        SegmentationConfig(0, 1)


def test_take_window_pads_labels():
    seq = make_seq(10)
    seg = split(seq, SegmentationConfig(4, 3))[-1]
    labels = take_window(seq.labels, seg)
    assert labels.shape == (4, 2)
    assert np.allclose(labels[0], seq.labels[9])
    assert np.allclose(labels[1:], 0.0)


def test_reassemble_disjoint_concatenates():
    seq = make_seq(8)
    cfg = SegmentationConfig(4, 4)
    segs = split(seq, cfg)
    preds = [(s, np.full((4, 1), float(i))) for i, s in enumerate(segs)]
    out = reassemble(preds)
    assert out.shape == (8, 1)
    assert np.allclose(out[:4], 0.0) and np.allclose(out[4:], 1.0)


def test_reassemble_averages_two_covers():
    seq = make_seq(6)
    segs = split(seq, SegmentationConfig(4, 2))
    preds = []
    for s in segs:
        value = 0.2 if s.index == 1 else 0.4
        preds.append((s, np.full((4, 1), value)))
    out = reassemble(preds)
    # frames 3..4 are covered by segments 1 and 2 -> mean 0.3
    assert np.allclose(out[2], 0.3)


def test_reassemble_matches_bruteforce_cover_oracle():
    rng = np.random.default_rng(9)
    seq = make_seq(10)
    cfg = SegmentationConfig(4, 3)
    segs = split(seq, cfg)
    preds = [(s, rng.normal(size=(4, 3))) for s in segs]
    out = reassemble(preds)

    # oracle: enumerate covering segments per frame and average directly
    for frame in range(1, 11):
        covering = []
        for seg, pred in preds:
            row = frame - seg.start
            if 0 <= row < seg.window and seg.pad_mask[row]:
                covering.append(pred[row])
        assert covering, "every frame must be covered"
        assert np.allclose(out[frame - 1], np.mean(covering, axis=0), atol=1e-12)


def test_reassemble_is_permutation_invariant():
    rng = np.random.default_rng(2)
    seq = make_seq(12)
    segs = split(seq, SegmentationConfig(5, 3))
    preds = [(s, rng.normal(size=(5, 2))) for s in segs]
    out1 = reassemble(preds)
    out2 = reassemble(preds[::-1])
    assert np.array_equal(out1, out2)


def test_reassemble_detects_gap():
    seq = make_seq(10)
    segs = split(seq, SegmentationConfig(4, 3))
    preds = [(s, np.zeros((4, 1))) for s in segs if s.index != 2]
    # dropping segment 2 leaves frames 5..6 uncovered for w=4, s=3
    with pytest.raises(CoverageError):
        reassemble(preds)


def test_coverage_and_overlap_properties_spot_checks():
    for n, w, s in [(17, 5, 2), (23, 23, 7), (9, 4, 4), (50, 13, 13)]:
        segs = split(make_seq(n, d=1, seed=n), SegmentationConfig(w, s))
        covered = set()
        for seg in segs:
            covered |= set(range(seg.start, seg.start + seg.real_length))
            assert seg.real_length <= w
        assert covered == set(range(1, n + 1))
        for first, second in zip(segs, segs[1:]):
            if first.start + w - 1 <= n:  # first window fully fits
                overlap = set(range(first.start, first.start + first.real_length)) & set(
                    range(second.start, second.start + second.real_length)
                )
                assert len(overlap) == w - s
