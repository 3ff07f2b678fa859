"""Sliding-window segmentation of per-video frame sequences.

A video with ``n`` frames, window ``w`` and stride ``s`` is nominally cut
into ``floor(n/s) + 1`` segments where segment ``i`` (1-based) spans frames
``(i-1)*s + 1 .. (i-1)*s + w``. Nominal segments whose start lies past the
last frame would be empty and are dropped; the final kept segment is
zero-padded to ``w`` with its pad mask marking the fake tail. With
``s <= w`` consecutive segments overlap by ``w - s`` frames, so every frame
is covered at least once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, CoverageError


@dataclass
class FrameSequence:
    """Per-video features plus aligned per-frame labels and validity mask."""

    video_id: str
    features: np.ndarray | None  # [n, d] or None when only labels are known
    labels: np.ndarray           # [n, ...] per-task layout
    valid: np.ndarray            # [n] bool; False = masked out of losses/metrics
    task: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.valid = np.asarray(self.valid, dtype=bool)
        n = len(self.labels)
        if n < 1:
            raise ContractError(f"sequence {self.video_id!r} has no frames")
        if len(self.valid) != n:
            raise ContractError(
                f"sequence {self.video_id!r}: valid mask length {len(self.valid)} != {n} frames"
            )
        if self.features is not None:
            self.features = np.asarray(self.features)
            if self.features.ndim != 2 or len(self.features) != n:
                raise ContractError(
                    f"sequence {self.video_id!r}: features {self.features.shape} "
                    f"do not align with {n} frames"
                )

    @property
    def num_frames(self):
        return len(self.labels)


@dataclass
class Segment:
    """One window of ``w`` frame features; ``pad_mask`` is True on real frames."""

    video_id: str
    index: int      # 1-based segment number
    start: int      # 1-based frame index, equals (index-1)*stride + 1
    frames: np.ndarray
    pad_mask: np.ndarray

    @property
    def window(self):
        return len(self.frames)

    @property
    def real_length(self):
        return int(self.pad_mask.sum())


@dataclass(frozen=True)
class SegmentationConfig:
    window: int
    stride: int

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ConfigError(f"window/stride must be >= 1, got w={self.window} s={self.stride}")
        if self.stride > self.window:
            raise ConfigError(
                f"stride {self.stride} > window {self.window}; overlap rule requires s <= w"
            )


def nominal_segment_count(n, stride):
    """floor(n/s) + 1 segments before empty trailing windows are dropped."""
    return n // stride + 1


def segment_starts(n, cfg):
    """1-based start frames of the kept segments."""
    starts = []
    for i in range(1, nominal_segment_count(n, cfg.stride) + 1):
        start = (i - 1) * cfg.stride + 1
        if start > n:
            break  # would contain no real frame
        starts.append(start)
    return starts


def split(seq: FrameSequence, cfg: SegmentationConfig):
    """Cut a sequence into overlapping, zero-padded segments."""
    if seq.features is None:
        raise ContractError(f"sequence {seq.video_id!r} has no features to segment")
    n, d = seq.features.shape
    if n < 1:
        raise ContractError(f"sequence {seq.video_id!r} is empty")
    w = cfg.window
    segments = []
    for i, start in enumerate(segment_starts(n, cfg), start=1):
        end = min(start + w - 1, n)
        real = end - start + 1
        frames = np.zeros((w, d), dtype=seq.features.dtype)
        frames[:real] = seq.features[start - 1:end]
        pad_mask = np.zeros(w, dtype=bool)
        pad_mask[:real] = True
        segments.append(Segment(seq.video_id, i, start, frames, pad_mask))
    return segments


def take_window(values, segment):
    """Slice per-frame ``values`` to a segment's window, zero-padding the tail."""
    w = segment.window
    real = segment.real_length
    out = np.zeros((w,) + values.shape[1:], dtype=values.dtype)
    out[:real] = values[segment.start - 1:segment.start - 1 + real]
    return out


def reassemble(predictions):
    """Combine per-segment predictions back into per-frame predictions.

    ``predictions`` is a list of ``(Segment, array[w, out_dim])``. Each
    frame's value is the arithmetic mean over all segments covering it;
    padded positions contribute nothing. The result covers frames
    ``1..n`` where ``n`` is the last real frame seen.
    """
    if not predictions:
        raise ContractError("no segment predictions to reassemble")
    n = max(seg.start - 1 + seg.real_length for seg, _ in predictions)
    out_dim = predictions[0][1].shape[1]
    total = np.zeros((n, out_dim))
    count = np.zeros(n)
    for seg, pred in predictions:
        if pred.shape[0] != seg.window:
            raise ContractError(
                f"prediction rows {pred.shape[0]} != segment window {seg.window}"
            )
        rows = np.flatnonzero(seg.pad_mask)
        frame_idx = seg.start - 1 + rows
        np.add.at(total, frame_idx, pred[rows])
        np.add.at(count, frame_idx, 1.0)
    uncovered = np.flatnonzero(count == 0)
    if uncovered.size:
        raise CoverageError(f"frames {uncovered + 1} are covered by no segment")
    return total / count[:, None]
