"""Dataset ingestion, prediction export, and the synthetic data generator.

Directory layout (all files little-endian, text files UTF-8):

* ``annotations/{VA,EXPR,AU}/<video>.txt`` — header line, then one
  comma-separated record per frame. VA: two floats in [-1, 1] (``-5`` for
  frames with no usable annotation); Expr: one int 0..7 or ``-1``;
  AU: twelve ints 0/1 or ``-1``.
* ``features/<video>.bin`` — one tensor blob (u32 rank, u32 extents,
  float32 data) holding the [n, d] frame features.
* ``folds.txt`` — ``video_id,fold`` lines.
* ``oracle.json`` — generator ground truth (mixing matrices) plus the
  achieved oracle scores, written by ``generate_synthetic``.

The synthetic process is linear-Gaussian with pointwise nonlinearities:
a smooth latent walk ``z`` drives features ``A z + noise`` and labels
``VA = tanh(B z)``, ``Expr = argmax(C z)``, ``AU = [D z > 0]``, so the
Bayes-optimal predictor (pseudo-inverse recovery of z) is computable and
its scores give quantitative acceptance targets without any real corpus.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tasks
from .autodiff import read_tensor_blob, write_tensor_blob
from .errors import AnnotationError, ConfigError
from .metrics import au_f1, ccc, macro_f1
from .segmentation import FrameSequence

_HEADERS = {
    tasks.VA: "valence,arousal",
    tasks.EXPR: "expression",
    tasks.AU: ",".join(tasks.AU_NAMES),
}

_ARITY = {tasks.VA: 2, tasks.EXPR: 1, tasks.AU: 12}


# -- annotation files ---------------------------------------------------------


def parse_annotation_file(path, task):
    """Read one per-frame label file; returns (labels, valid)."""
    tasks.check_task(task)
    arity = _ARITY[task]
    rows, valid = [], []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise AnnotationError("empty annotation file", path)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != arity:
            raise AnnotationError(
                f"expected {arity} fields, got {len(fields)}", path, lineno
            )
        try:
            values = [float(f) for f in fields]
        except ValueError as exc:
            raise AnnotationError(f"bad number: {exc}", path, lineno) from None
        rows.append(values)
        valid.append(_validate_record(values, task, path, lineno))
    if not rows:
        raise AnnotationError("no records after header", path)
    labels = np.asarray(rows)
    if task == tasks.EXPR:
        labels = labels.reshape(-1).astype(np.int64)
    elif task == tasks.AU:
        labels = labels.astype(np.int64)
    valid = np.asarray(valid, dtype=bool)
    if task == tasks.VA:
        labels = np.where(valid[:, None], labels, 0.0)
    else:
        labels = np.where(valid if task == tasks.EXPR else valid[:, None], labels, -1)
    return labels, valid


def _validate_record(values, task, path, lineno):
    """Range-check one record; returns False when it is the invalid sentinel."""
    if task == tasks.VA:
        if all(v == tasks.VA_INVALID for v in values):
            return False
        if not all(-1.0 <= v <= 1.0 for v in values):
            raise AnnotationError(f"VA values {values} outside [-1, 1]", path, lineno)
        return True
    if task == tasks.EXPR:
        v = values[0]
        if v != int(v):
            raise AnnotationError(f"expression id {v} is not an integer", path, lineno)
        if int(v) == tasks.LABEL_INVALID:
            return False
        if not 0 <= int(v) <= 7:
            raise AnnotationError(f"expression id {int(v)} outside 0..7", path, lineno)
        return True
    ints = [int(v) for v in values]
    if any(v != i for v, i in zip(values, ints)):
        raise AnnotationError(f"AU values must be integers, got {values}", path, lineno)
    if any(i == tasks.LABEL_INVALID for i in ints):
        return False
    if not all(i in (0, 1) for i in ints):
        raise AnnotationError(f"AU values {ints} must be 0/1 or -1", path, lineno)
    return True


def write_annotation_file(path, task, labels, valid=None):
    tasks.check_task(task)
    labels = np.asarray(labels)
    n = len(labels)
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    lines = [_HEADERS[task]]
    for i in range(n):
        if task == tasks.VA:
            if valid[i]:
                lines.append(f"{labels[i, 0]:.6f},{labels[i, 1]:.6f}")
            else:
                lines.append(f"{tasks.VA_INVALID:.6f},{tasks.VA_INVALID:.6f}")
        elif task == tasks.EXPR:
            lines.append(str(int(labels[i]) if valid[i] else tasks.LABEL_INVALID))
        else:
            row = labels[i].astype(int) if valid[i] else np.full(12, tasks.LABEL_INVALID)
            lines.append(",".join(str(int(v)) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_annotations(annotations_dir, task):
    """All ``<task>/<video>.txt`` files as label-only FrameSequences."""
    task_dir = os.path.join(annotations_dir, tasks.TASK_DIRS[tasks.check_task(task)])
    if not os.path.isdir(task_dir):
        raise AnnotationError(f"missing annotation directory for task {task}", task_dir)
    seqs = []
    for name in sorted(os.listdir(task_dir)):
        if not name.endswith(".txt"):
            continue
        labels, valid = parse_annotation_file(os.path.join(task_dir, name), task)
        seqs.append(FrameSequence(name[:-4], None, labels, valid, task))
    if not seqs:
        raise AnnotationError(f"no annotation files for task {task}", task_dir)
    return seqs


# -- features and folds -------------------------------------------------------


def write_features(path, features):
    with open(path, "wb") as fh:
        write_tensor_blob(fh, features)


def read_features(path):
    with open(path, "rb") as fh:
        return read_tensor_blob(fh).astype(np.float64)


def write_folds(path, fold_of):
    with open(path, "w", encoding="utf-8") as fh:
        for vid in sorted(fold_of):
            fh.write(f"{vid},{fold_of[vid]}\n")


def read_folds(path):
    fold_of = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                vid, fold = line.strip().rsplit(",", 1)
                fold_of[vid] = int(fold)
            except ValueError:
                raise AnnotationError("expected video_id,fold", path, lineno) from None
    return fold_of


def load_dataset(root, task):
    """Sequences with features attached, plus the fold map if present."""
    seqs = load_annotations(os.path.join(root, "annotations"), task)
    feat_dir = os.path.join(root, "features")
    out = []
    for seq in seqs:
        feat_path = os.path.join(feat_dir, f"{seq.video_id}.bin")
        if not os.path.isfile(feat_path):
            raise AnnotationError(f"missing features for video {seq.video_id}", feat_path)
        features = read_features(feat_path)
        if len(features) != seq.num_frames:
            raise AnnotationError(
                f"features rows {len(features)} != {seq.num_frames} frames", feat_path
            )
        out.append(FrameSequence(seq.video_id, features, seq.labels, seq.valid, task))
    folds_path = os.path.join(root, "folds.txt")
    fold_of = read_folds(folds_path) if os.path.isfile(folds_path) else None
    return out, fold_of


# -- prediction export --------------------------------------------------------


def write_predictions(preds, out_dir, task, au_threshold=0.5, write_au_probs=True):
    """Write raw per-frame outputs in the annotation layout for scoring.

    VA values are written as-is; Expr logits as argmax ids; AU logits as
    thresholded 0/1 with an optional ``<video>.probs.txt`` sidecar of
    sigmoid probabilities.
    """
    task_dir = os.path.join(out_dir, tasks.TASK_DIRS[tasks.check_task(task)])
    os.makedirs(task_dir, exist_ok=True)
    for vid, pred in preds.items():
        pred = np.asarray(pred)
        path = os.path.join(task_dir, f"{vid}.txt")
        if task == tasks.VA:
            write_annotation_file(path, task, np.clip(pred, -1.0, 1.0))
        elif task == tasks.EXPR:
            write_annotation_file(path, task, pred.argmax(axis=1))
        else:
            probs = 1.0 / (1.0 + np.exp(-np.clip(pred, -60, 60)))
            write_annotation_file(path, task, (probs >= au_threshold).astype(int))
            if write_au_probs:
                with open(os.path.join(task_dir, f"{vid}.probs.txt"), "w") as fh:
                    fh.write(_HEADERS[tasks.AU] + "\n")
                    for row in probs:
                        fh.write(",".join(f"{v:.6f}" for v in row) + "\n")


# -- synthetic generator ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    num_videos: int = 10
    frames_per_video: int = 600
    latent_dim: int = 4
    feature_dim: int = 32
    noise_std: float = 0.1
    seed: int = 0
    invalid_frac: float = 0.02
    folds: int = 5

    def __post_init__(self):
        if min(self.num_videos, self.frames_per_video, self.latent_dim, self.feature_dim) < 1:
            raise ConfigError("synthetic spec sizes must be positive")
        if not 0.0 <= self.invalid_frac < 1.0:
            raise ConfigError(f"invalid_frac must be in [0, 1), got {self.invalid_frac}")


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    sequences: dict        # task -> list[FrameSequence]
    matrices: dict         # A, B, C, D as arrays
    fold_of: dict
    oracle_scores: dict


# Latent walk: z <- 0.95 z + 0.05 u with u ~ N(0, I), box-smoothed over 5
# frames, then normalized per dimension. noise_std only perturbs the
# observed features, so noise_std=0 makes the oracle exact.
_AR_KEEP = 0.95
_AR_INNOVATION = 0.05
_SMOOTH_WIDTH = 5


def _latent_walk(n, dim, rng):
    z = np.zeros((n, dim))
    state = rng.normal(0.0, _AR_INNOVATION / np.sqrt(1 - _AR_KEEP ** 2), dim)
    for t in range(n):
        state = _AR_KEEP * state + _AR_INNOVATION * rng.normal(0.0, 1.0, dim)
        z[t] = state
    kernel = np.ones(_SMOOTH_WIDTH) / _SMOOTH_WIDTH
    pad = _SMOOTH_WIDTH // 2
    padded = np.pad(z, ((pad, pad), (0, 0)), mode="edge")
    smoothed = np.stack(
        [np.convolve(padded[:, d], kernel, mode="valid") for d in range(dim)], axis=1
    )
    return smoothed


def _unit_rows(rng, rows, dim):
    m = rng.normal(0.0, 1.0, (rows, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _expr_directions(rng, latent_dim):
    # 8 class directions; when the latent is 4-d use a randomly rotated
    # signed basis so the argmax classes are exactly balanced.
    if latent_dim == 4:
        q, _ = np.linalg.qr(rng.normal(0.0, 1.0, (4, 4)))
        return np.concatenate([q.T, -q.T], axis=0)
    return _unit_rows(rng, 8, latent_dim)


def generate_synthetic(spec: SyntheticSpec, out_dir=None):
    """Build the synthetic dataset; optionally write it in the external
    directory layout. Deterministic per spec (identical bytes per seed)."""
    rng = np.random.default_rng(spec.seed)
    mix = rng.normal(0.0, 1.0, (spec.feature_dim, spec.latent_dim))  # A
    va_dirs = _unit_rows(rng, 2, spec.latent_dim)                     # B
    expr_dirs = _expr_directions(rng, spec.latent_dim)                # C
    au_dirs = _unit_rows(rng, 12, spec.latent_dim)                    # D

    walks = [
        _latent_walk(spec.frames_per_video, spec.latent_dim, rng)
        for _ in range(spec.num_videos)
    ]
    stacked = np.concatenate(walks)
    mu, sd = stacked.mean(axis=0), stacked.std(axis=0)
    walks = [(z - mu) / sd for z in walks]

    sequences = {t: [] for t in tasks.TASKS}
    features_by_vid = {}
    for i, z in enumerate(walks):
        vid = f"video_{i:03d}"
        feats = z @ mix.T + spec.noise_std * rng.normal(
            0.0, 1.0, (spec.frames_per_video, spec.feature_dim)
        )
        valid = rng.random(spec.frames_per_video) >= spec.invalid_frac
        if not valid.any():
            valid[0] = True
        va = np.tanh(z @ va_dirs.T)
        expr = (z @ expr_dirs.T).argmax(axis=1)
        au = (z @ au_dirs.T > 0).astype(np.int64)
        features_by_vid[vid] = feats
        sequences[tasks.VA].append(FrameSequence(vid, feats, va, valid, tasks.VA))
        sequences[tasks.EXPR].append(FrameSequence(vid, feats, expr, valid, tasks.EXPR))
        sequences[tasks.AU].append(FrameSequence(vid, feats, au, valid, tasks.AU))

    fold_of = {f"video_{i:03d}": i % spec.folds for i in range(spec.num_videos)}
    matrices = {"A": mix, "B": va_dirs, "C": expr_dirs, "D": au_dirs}
    oracle_scores = compute_oracle_scores(sequences, matrices)
    ds = SyntheticDataset(spec, sequences, matrices, fold_of, oracle_scores)
    if out_dir is not None:
        write_synthetic(ds, out_dir)
    return ds


def oracle_predict(features, matrices):
    """Bayes-style readout: recover z with the pseudo-inverse of A, then
    apply the label maps. Returns (va, expr_scores, au_scores)."""
    z_hat = features @ np.linalg.pinv(matrices["A"]).T
    return (
        np.tanh(z_hat @ matrices["B"].T),
        z_hat @ matrices["C"].T,
        z_hat @ matrices["D"].T,
    )


def compute_oracle_scores(sequences, matrices):
    """Oracle metrics over all valid frames; the acceptance reference."""
    va_p, va_t, ex_p, ex_t, au_p, au_t = [], [], [], [], [], []
    for seq in sequences[tasks.VA]:
        va_hat, _, _ = oracle_predict(seq.features, matrices)
        va_p.append(va_hat[seq.valid])
        va_t.append(seq.labels[seq.valid])
    for seq in sequences[tasks.EXPR]:
        _, ex_hat, _ = oracle_predict(seq.features, matrices)
        ex_p.append(ex_hat[seq.valid].argmax(axis=1))
        ex_t.append(seq.labels[seq.valid])
    for seq in sequences[tasks.AU]:
        _, _, au_hat = oracle_predict(seq.features, matrices)
        au_p.append(au_hat[seq.valid])
        au_t.append(seq.labels[seq.valid])
    va_p, va_t = np.concatenate(va_p), np.concatenate(va_t)
    expr_macro, _ = macro_f1(np.concatenate(ex_p), np.concatenate(ex_t), 8)
    au_macro, _ = au_f1(np.concatenate(au_p), np.concatenate(au_t))
    return {
        "ccc_valence": ccc(va_p[:, 0], va_t[:, 0]),
        "ccc_arousal": ccc(va_p[:, 1], va_t[:, 1]),
        "expr_macro_f1": expr_macro,
        "au_macro_f1": au_macro,
    }


def write_synthetic(ds: SyntheticDataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    for task in tasks.TASKS:
        task_dir = os.path.join(out_dir, "annotations", tasks.TASK_DIRS[task])
        os.makedirs(task_dir, exist_ok=True)
        for seq in ds.sequences[task]:
            write_annotation_file(
                os.path.join(task_dir, f"{seq.video_id}.txt"), task, seq.labels, seq.valid
            )
    for seq in ds.sequences[tasks.VA]:
        write_features(os.path.join(feat_dir, f"{seq.video_id}.bin"), seq.features)
    write_folds(os.path.join(out_dir, "folds.txt"), ds.fold_of)
    payload = {
        "spec": asdict(ds.spec),
        "oracle_scores": ds.oracle_scores,
        "matrices": {k: v.tolist() for k, v in ds.matrices.items()},
    }
    with open(os.path.join(out_dir, "oracle.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- synthetic frame rendering (image path for the MAE extractor) ------------


def render_frames(features, size=32):
    """Deterministic smooth grayscale frames driven by the feature vector.

    Gives the MAE extractor path something to chew on; uint8 [n, size, size].
    """
    features = np.asarray(features)
    n, d = features.shape
    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    k = min(d, 6)
    basis = np.stack(
        [np.sin(2 * np.pi * ((j // 2 + 1) * (xs if j % 2 == 0 else ys))) for j in range(k)]
    )
    field = np.tensordot(features[:, :k], basis, axes=1)
    lo, hi = field.min(), field.max()
    span = hi - lo if hi > lo else 1.0
    return np.round(255 * (field - lo) / span).astype(np.uint8)


def write_frame_images(ds: SyntheticDataset, out_dir, size=32):
    """Render each video's frames to PGM files under images/<video_id>/."""
    from PIL import Image

    img_root = os.path.join(out_dir, "images")
    for seq in ds.sequences[tasks.VA]:
        vid_dir = os.path.join(img_root, seq.video_id)
        os.makedirs(vid_dir, exist_ok=True)
        frames = render_frames(seq.features, size)
        for t, frame in enumerate(frames):
            Image.fromarray(frame, mode="L").save(os.path.join(vid_dir, f"{t:05d}.pgm"))
    return img_root


def load_frame_images(images_dir):
    """Read a tree of per-video raster frames: images/<video>/<frame>.(pgm|ppm|png).

    Returns a dict video_id -> uint8 array [n, h, w, c].
    """
    from PIL import Image

    videos = {}
    for vid in sorted(os.listdir(images_dir)):
        vid_dir = os.path.join(images_dir, vid)
        if not os.path.isdir(vid_dir):
            continue
        frames = []
        for name in sorted(os.listdir(vid_dir)):
            if not name.lower().endswith((".pgm", ".ppm", ".png")):
                continue
            with Image.open(os.path.join(vid_dir, name)) as img:
                arr = np.asarray(img)
            frames.append(arr[..., None] if arr.ndim == 2 else arr)
        if frames:
            videos[vid] = np.stack(frames)
    if not videos:
        raise AnnotationError("no video frame directories found", images_dir)
    return videos
