"""Command-line entry point: one subcommand per pipeline stage.

Machine-readable results go to stdout as JSON; progress lines go to
stderr. Exit codes: 0 success, 1 validation/parse failure, 2 runtime
failure. Every command with an output directory writes a ``manifest.json``
(resolved config + seed + versions) beside its outputs.
"""

from __future__ import annotations

import os
import sys


def _cap_threads():
    cap = os.environ.get("AFFECT_NUM_THREADS")
    if cap:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
            "VECLIB_MAXIMUM_THREADS",
        ):
            os.environ.setdefault(var, cap)


_cap_threads()  # must run before numpy comes in

import argparse
import json
import platform

import numpy as np

from . import __version__, checkpoint, data, mae, report, tasks, training
from .errors import DivergenceError, EmorecError
from .segmentation import SegmentationConfig

PAPER_DEFAULTS_NOTE = (
    "Reference recipe (see configs/paper.cfg): lr 3e-5, weight decay 1e-5, "
    "dropout 0.3, batch size 32, window 300, stride 200."
)

# Config keys that describe the segment model itself; stored in checkpoints
# so `predict` can rebuild it.
MODEL_KEYS = (
    "window", "stride", "tcn_kernel", "tcn_dilations", "tcn_channels",
    "model_dim", "encoder_depth", "encoder_heads", "ffn_dim", "head_hidden",
    "dropout",
)

MAE_KEYS = (
    "mae_image_size", "mae_channels", "mae_patch_size", "mae_enc_width",
    "mae_enc_depth", "mae_enc_heads", "mae_dec_width", "mae_dec_depth",
    "mae_dec_heads", "mae_mask_ratio",
)


def log(message):
    print(f"[emorec] {message}", file=sys.stderr)


def emit(payload):
    print(json.dumps(payload, indent=2, sort_keys=True))


def _meta_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _json_ready(cfg):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}


def write_manifest(out_dir, command, args, cfg=None, seed=None):
    plain = {
        k: (list(v) if isinstance(v, tuple) else v)
        for k, v in args.items()
        if isinstance(v, (str, int, float, bool, tuple, list, type(None)))
    }
    payload = {
        "command": command,
        "args": plain,
        "seed": seed,
        "config": _json_ready(cfg) if cfg else None,
        "versions": {
            "emorec": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    os.makedirs(out_dir, exist_ok=True)
    report.write_json(os.path.join(out_dir, "manifest.json"), payload)


def _mae_config(cfg):
    return mae.MaeConfig(
        image_size=cfg["mae_image_size"], channels=cfg["mae_channels"],
        patch_size=cfg["mae_patch_size"], enc_width=cfg["mae_enc_width"],
        enc_depth=cfg["mae_enc_depth"], enc_heads=cfg["mae_enc_heads"],
        dec_width=cfg["mae_dec_width"], dec_depth=cfg["mae_dec_depth"],
        dec_heads=cfg["mae_dec_heads"], mask_ratio=cfg["mae_mask_ratio"],
    )


def _model_meta(kind, cfg, keys, extra=None):
    meta = {"kind": kind}
    meta.update({k: _meta_value(cfg[k]) for k in keys})
    if extra:
        meta.update({k: _meta_value(v) for k, v in extra.items()})
    return meta


def load_segment_model(path):
    meta, arrays = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "segment-model":
        raise EmorecError(f"{path}: expected a segment-model checkpoint, got {meta.get('kind')}")
    cfg = training.resolve_config({k: meta[k] for k in MODEL_KEYS})
    model = training.build_model(
        cfg, feature_dim=int(meta["feature_dim"]), task=meta["task"],
        rng=np.random.default_rng(0),
    )
    checkpoint.load_into_model(model, arrays)
    model.eval()
    return model, meta, cfg


def load_mae_like(path, rng):
    meta, arrays = checkpoint.load_checkpoint(path)
    cfg = training.resolve_config({k: meta[k] for k in MAE_KEYS})
    model = mae.MaeModel(_mae_config(cfg), rng)
    if meta.get("kind") == "mae":
        checkpoint.load_into_model(model, arrays)
        model.eval()
        return model, meta, cfg
    if meta.get("kind") == "classifier":
        clf = mae.finetune_head_swap(
            model, num_classes=int(meta["num_classes"]),
            hidden=int(meta["hidden"]), rng=rng,
        )
        checkpoint.load_into_model(clf, arrays)
        clf.eval()
        return clf, meta, cfg
    raise EmorecError(f"{path}: expected an mae/classifier checkpoint, got {meta.get('kind')}")


# -- subcommands -------------------------------------------------------------


def cmd_gen_synthetic(args):
    spec = data.SyntheticSpec(
        num_videos=args.videos, frames_per_video=args.frames,
        latent_dim=args.latent_dim, feature_dim=args.feature_dim,
        noise_std=args.noise_std, seed=args.seed,
        invalid_frac=args.invalid_frac, folds=args.folds,
    )
    log(f"generating synthetic dataset into {args.out}")
    ds = data.generate_synthetic(spec, args.out)
    if args.images:
        log("rendering per-frame images")
        data.write_frame_images(ds, args.out, size=args.image_size)
    for name, score in ds.oracle_scores.items():
        log(f"oracle {name}: {score:.4f}")
    write_manifest(args.out, "gen-synthetic", vars(args),
                   cfg=asdict_spec(spec), seed=args.seed)
    emit({"out": args.out, "oracle_scores": ds.oracle_scores,
          "videos": spec.num_videos, "frames_per_video": spec.frames_per_video})
    return 0


def asdict_spec(spec):
    from dataclasses import asdict

    return asdict(spec)


def _split_train_val(seqs, fold_of, val_fold):
    train = [s for s in seqs if fold_of[s.video_id] != val_fold]
    val = [s for s in seqs if fold_of[s.video_id] == val_fold]
    if not train or not val:
        raise EmorecError(f"validation fold {val_fold} leaves an empty split")
    return train, val


def cmd_train(args):
    cfg = training.resolve_config(path=args.config)
    seqs, fold_of = data.load_dataset(args.data, args.task)
    if fold_of is None:
        fold_of = training.assign_folds({s.video_id for s in seqs}, 5)
    train_seqs, val_seqs = _split_train_val(seqs, fold_of, args.val_fold)
    seg_cfg = training.seg_config_from(cfg)
    feature_dim = seqs[0].features.shape[1]
    model = training.build_model(cfg, feature_dim, args.task, np.random.default_rng(args.seed))
    log(f"training task={args.task} on {len(train_seqs)} videos, "
        f"validating on fold {args.val_fold} ({len(val_seqs)} videos)")
    result = training.train_task(
        args.task, model, train_seqs, val_seqs, seg_cfg,
        training.optim_config_from(cfg), seed=args.seed,
        ccc_per_video=cfg["eval_ccc_per_video"],
    )
    if result.halted:
        log("training halted on divergence; keeping best parameters seen")
    final_report, _ = training.evaluate_sequences(
        model, val_seqs, seg_cfg, args.task, fold=args.val_fold,
        ccc_per_video=cfg["eval_ccc_per_video"],
    )
    os.makedirs(args.out, exist_ok=True)
    meta = _model_meta("segment-model", cfg, MODEL_KEYS,
                       extra={"task": args.task, "feature_dim": feature_dim})
    checkpoint.save_checkpoint(os.path.join(args.out, "model.ckpt"), meta, model)
    report.write_run_outputs(args.out, result, args.task)
    report.write_json(os.path.join(args.out, "metrics.json"), final_report.to_dict())
    write_manifest(args.out, "train", vars(args), cfg=cfg, seed=args.seed)
    emit({
        "task": args.task,
        "report": final_report.to_dict(),
        "best_epoch": result.best_epoch,
        "halted": result.halted,
        "checkpoint": os.path.join(args.out, "model.ckpt"),
    })
    return 0


def cmd_predict(args):
    model, meta, cfg = load_segment_model(args.checkpoint)
    task = meta["task"]
    seqs, _ = data.load_dataset(args.data, task)
    seg_cfg = SegmentationConfig(int(meta["window"]), int(meta["stride"]))
    log(f"predicting task={task} for {len(seqs)} videos")
    preds = training.predict_sequences(model, seqs, seg_cfg)
    data.write_predictions(preds, args.out, task)
    write_manifest(args.out, "predict", vars(args), cfg=cfg, seed=args.seed)
    emit({"task": task, "out": args.out, "videos": sorted(preds)})
    return 0


def _load_flat_annotations(dir_path, task):
    out = {}
    for name in sorted(os.listdir(dir_path)):
        if not name.endswith(".txt") or name.endswith(".probs.txt"):
            continue
        labels, valid = data.parse_annotation_file(os.path.join(dir_path, name), task)
        out[name[:-4]] = (labels, valid)
    if not out:
        raise EmorecError(f"no annotation files in {dir_path}")
    return out


def cmd_evaluate(args):
    golds = _load_flat_annotations(args.gold, args.task)
    preds = _load_flat_annotations(args.pred, args.task)
    missing = sorted(set(golds) - set(preds))
    if missing:
        raise EmorecError(f"predictions missing for videos: {missing}")
    pred_cat, gold_cat = [], []
    for vid, (gold_labels, gold_valid) in sorted(golds.items()):
        pred_labels, pred_valid = preds[vid]
        if len(pred_labels) != len(gold_labels):
            raise EmorecError(
                f"{vid}: prediction has {len(pred_labels)} frames, gold has {len(gold_labels)}"
            )
        mask = gold_valid & pred_valid
        pred_cat.append(pred_labels[mask])
        gold_cat.append(gold_labels[mask])
    pred_cat = np.concatenate(pred_cat)
    gold_cat = np.concatenate(gold_cat)
    from . import metrics as M

    if args.task == tasks.VA:
        rep = M.MetricReport(
            args.task,
            ccc_v=M.ccc(pred_cat[:, 0], gold_cat[:, 0]),
            ccc_a=M.ccc(pred_cat[:, 1], gold_cat[:, 1]),
        )
    elif args.task == tasks.EXPR:
        macro, per_class = M.macro_f1(pred_cat, gold_cat, 8)
        rep = M.MetricReport(args.task, macro_f1=macro, per_class=per_class.tolist())
    else:
        macro, per_unit = M.au_binary_f1(pred_cat, gold_cat)
        rep = M.MetricReport(args.task, macro_f1=macro, per_class=per_unit.tolist())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report.write_json(os.path.join(args.out, "metrics.json"), rep.to_dict())
        write_manifest(args.out, "evaluate", vars(args), seed=args.seed)
    emit(rep.to_dict())
    return 0


def cmd_run_folds(args):
    cfg = training.resolve_config(path=args.config)
    task_list = [t.strip() for t in args.tasks.split(",") if t.strip()]
    datasets = {}
    fold_of = None
    for task in task_list:
        tasks.check_task(task)
        datasets[task], fold_of = data.load_dataset(args.data, task)
    vids = {s.video_id for s in datasets[task_list[0]]}
    if fold_of is None or set(fold_of.values()) != set(range(args.k)):
        log(f"assigning {args.k} folds round-robin over {len(vids)} videos")
        fold_of = training.assign_folds(vids, args.k)
    table = training.run_folds(datasets, args.k, cfg, seed=args.seed,
                               fold_of=fold_of, progress=log)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report.write_json(os.path.join(args.out, "report.json"), table)
        report.write_fold_csv(os.path.join(args.out, "report.csv"), table)
        report.plot_fold_table(table, os.path.join(args.out, "fold_scores.png"))
        write_manifest(args.out, "run-folds", vars(args), cfg=cfg, seed=args.seed)
    emit(table)
    return 0


def cmd_pretrain_mae(args):
    cfg = training.resolve_config(path=args.config)
    rng = np.random.default_rng(args.seed)
    mae_cfg = _mae_config(cfg)
    if args.images:
        videos = data.load_frame_images(args.images)
        images = np.concatenate(list(videos.values()))
    else:
        images = mae.synthetic_images(args.synthetic_images, mae_cfg.image_size, rng,
                                      channels=mae_cfg.channels)
    steps = args.steps if args.steps is not None else cfg["mae_steps"]
    log(f"pre-training MAE on {len(images)} images for {steps} steps")
    model = mae.MaeModel(mae_cfg, rng)
    history = mae.pretrain(model, images, steps, cfg["mae_batch_size"], cfg["mae_lr"],
                           seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    meta = _model_meta("mae", cfg, MAE_KEYS)
    checkpoint.save_checkpoint(os.path.join(args.out, "mae.ckpt"), meta, model)
    report.write_training_log(os.path.join(args.out, "mae_log.csv"), history)
    report.plot_mae_history(history, os.path.join(args.out, "mae_curve.png"))
    write_manifest(args.out, "pretrain-mae", vars(args), cfg=cfg, seed=args.seed)
    emit({
        "steps": steps,
        "first_loss": history[0]["loss"],
        "final_loss": history[-1]["loss"],
        "checkpoint": os.path.join(args.out, "mae.ckpt"),
    })
    return 0


def cmd_finetune_mae(args):
    cfg = training.resolve_config(path=args.config)
    rng = np.random.default_rng(args.seed)
    model, _, _ = load_mae_like(args.checkpoint, rng)
    if isinstance(model, mae.FrameClassifier):
        raise EmorecError("expected an mae checkpoint, got an already fine-tuned classifier")
    classifier = mae.finetune_head_swap(
        model, num_classes=8, hidden=cfg["classifier_hidden"], rng=rng,
    )
    videos = data.load_frame_images(args.images)
    images, ids = [], []
    for vid, frames in sorted(videos.items()):
        path = os.path.join(args.labels, f"{vid}.txt")
        labels, valid = data.parse_annotation_file(path, tasks.EXPR)
        if len(labels) != len(frames):
            raise EmorecError(f"{vid}: {len(frames)} frames but {len(labels)} labels")
        images.append(frames[valid])
        ids.append(labels[valid])
    images = np.concatenate(images)
    ids = np.concatenate(ids)
    log(f"fine-tuning on {len(images)} labelled frames")
    history = mae.finetune_classifier(
        classifier, images, ids, cfg["finetune_epochs"], cfg["finetune_batch_size"],
        cfg["finetune_lr"], seed=args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    meta = _model_meta("classifier", cfg, MAE_KEYS,
                       extra={"num_classes": 8, "hidden": cfg["classifier_hidden"]})
    checkpoint.save_checkpoint(os.path.join(args.out, "classifier.ckpt"), meta, classifier)
    report.write_training_log(os.path.join(args.out, "finetune_log.csv"), history)
    write_manifest(args.out, "finetune-mae", vars(args), cfg=cfg, seed=args.seed)
    emit({"final_loss": history[-1]["loss"] if history else None,
          "checkpoint": os.path.join(args.out, "classifier.ckpt")})
    return 0


def cmd_extract_features(args):
    rng = np.random.default_rng(args.seed)
    model, meta, _ = load_mae_like(args.checkpoint, rng)
    videos = data.load_frame_images(args.images)
    feat_dir = os.path.join(args.out, "features")
    os.makedirs(feat_dir, exist_ok=True)
    dims = None
    for vid, frames in sorted(videos.items()):
        feats = mae.extract_features(model, frames)
        dims = feats.shape[1]
        data.write_features(os.path.join(feat_dir, f"{vid}.bin"), feats)
        log(f"{vid}: {feats.shape[0]} frames -> {dims}-d features")
    write_manifest(args.out, "extract-features", vars(args), seed=args.seed)
    emit({"out": feat_dir, "videos": sorted(videos), "feature_dim": dims})
    return 0


# -- parser ------------------------------------------------------------------


class Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def build_parser():
    parser = Parser(
        prog="emorec",
        description=__doc__,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=0, help="random seed")
        p.add_argument("--out", required=out_required, default=None,
                       help="output directory")

    p = sub.add_parser("gen-synthetic", help="generate the synthetic dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--videos", type=int, default=10)
    p.add_argument("--frames", type=int, default=600, help="frames per video")
    p.add_argument("--latent-dim", type=int, default=4)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--invalid-frac", type=float, default=0.02)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--images", action="store_true", help="also render frame images")
    p.add_argument("--image-size", type=int, default=32)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train one task on a dataset directory",
                       epilog=PAPER_DEFAULTS_NOTE,
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--task", required=True, choices=tasks.TASKS)
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--val-fold", type=int, default=0, help="held-out fold id")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write per-frame predictions from a checkpoint",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score prediction files against gold files",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p, out_required=False)
    p.add_argument("--task", required=True, choices=tasks.TASKS)
    p.add_argument("--pred", required=True, help="directory of predicted <video>.txt")
    p.add_argument("--gold", required=True, help="directory of gold <video>.txt")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-folds", help="cross-validated training over video-disjoint folds",
                       epilog=PAPER_DEFAULTS_NOTE,
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p, out_required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=5, help="number of folds")
    p.add_argument("--tasks", default="va,expr,au", help="comma-separated task list")
    p.set_defaults(func=cmd_run_folds)

    p = sub.add_parser("pretrain-mae", help="masked-autoencoder pre-training (toy scale)",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--images", default=None, help="images/<video>/<frame>.pgm tree")
    p.add_argument("--synthetic-images", type=int, default=64,
                   help="synthetic image count when --images is not given")
    p.add_argument("--steps", type=int, default=None, help="override mae_steps")
    p.set_defaults(func=cmd_pretrain_mae)

    p = sub.add_parser("finetune-mae", help="swap the decoder for a classification head "
                                            "and fine-tune on expression labels",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--checkpoint", required=True, help="mae checkpoint")
    p.add_argument("--images", required=True, help="images/<video>/<frame>.pgm tree")
    p.add_argument("--labels", required=True, help="directory of EXPR <video>.txt files")
    p.set_defaults(func=cmd_finetune_mae)

    p = sub.add_parser("extract-features", help="pooled encoder features per frame",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--checkpoint", required=True, help="mae or classifier checkpoint")
    p.add_argument("--images", required=True, help="images/<video>/<frame>.pgm tree")
    p.set_defaults(func=cmd_extract_features)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DivergenceError as exc:
        log(f"runtime failure: {exc}")
        return 2
    except EmorecError as exc:
        log(f"error: {exc}")
        return 1
    except (FileNotFoundError, NotADirectoryError) as exc:
        log(f"error: {exc}")
        return 1
    except OSError as exc:
        log(f"i/o failure: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
