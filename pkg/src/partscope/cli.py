"""Command-line entry point: ``partscope <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 numerical failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as datasets
from .config import ConfigError, load_config
from .evaluate import (
    REPORT_KEYS, evaluate_model, kmeans_report, labels_from_masks, landmark_baseline, predict_masks,
    segmentation_scores, write_report,
)
from .features import FeatureProviderSpec, make_provider
from .segmenter import CheckpointError, load_checkpoint
from .trainer import NumericalError, TrainConfig, configure_threads, train
from .types import IGNORE, LabelGrid

log = logging.getLogger("partscope")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

# fixed overlay palette, one color per part id (mod 12)
PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180],
    [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 190], [0, 128, 128], [170, 110, 40],
], dtype=np.uint8)
BACKGROUND_GRAY = 128

BASELINE_KINDS = {"kmeans": None, "midpoint": "image-midpoint", "kp-center": "gt-keypoint-center",
                  "single-kp": "single-gt-keypoint"}


class UsageError(Exception):
    pass


def overlay(image: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend (H, W, 3) uint8 ``image`` with part colors; unlabeled pixels become gray."""
    out = np.full(image.shape, BACKGROUND_GRAY, dtype=np.float64)
    fg = labels != IGNORE
    colors = PALETTE[labels[fg] % len(PALETTE)].astype(np.float64)
    out[fg] = (1 - alpha) * image[fg] + alpha * colors
    return np.round(out).astype(np.uint8)


# ------------------------------------------------------------------ helpers

def _samples(manifest, split, class_name=None, saliency=None):
    samples = datasets.load(manifest, split, class_name)
    if not samples:
        raise UsageError(f"no {split} samples in {manifest}" + (f" for class {class_name!r}" if class_name else ""))
    if saliency:
        samples = datasets.load_saliency_masks(saliency, samples)
    return samples


def _config(cls, path):
    if not Path(path).exists():
        raise UsageError(f"config file not found: {path}")
    return load_config(cls, path)


def _checkpoint(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _read_labels(directory, samples):
    out = []
    for s in samples:
        p = Path(directory) / f"{s.sample_id}.png"
        if not p.exists():
            raise UsageError(f"no label file for sample {s.sample_id} at {p}")
        out.append(np.where(s.fg.numpy(), LabelGrid.load(p).data, IGNORE))
    return out


def _report_for(samples, train_samples, model=None, labels=None):
    if labels is not None:
        return segmentation_scores(labels, samples)
    return evaluate_model(model, train_samples, samples)


# ------------------------------------------------------------------ commands

def cmd_synth_generate(args) -> int:
    spec = _config(datasets.SyntheticSpec, args.spec)
    print(datasets.generate(spec, args.out))
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config(TrainConfig, args.config)
    samples = _samples(args.data, "train", args.class_name, args.saliency)
    state = train(config, samples, args.out, resume=args.resume)
    print(f"trained {state.step} steps -> {Path(args.out) / 'segmenter.pseg'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.labels is None and args.checkpoint is None:
        raise UsageError("eval needs --checkpoint or --labels")
    model = _checkpoint(args.checkpoint) if args.labels is None else None
    test = _samples(args.data, args.split, saliency=args.saliency)
    manifest = datasets.Manifest.read(args.data)
    has_train = bool(manifest.select("train")) and args.split != "train"
    train_samples = _samples(args.data, "train", saliency=args.saliency) if has_train and model else []
    labels = _read_labels(args.labels, test) if args.labels else None
    report = _report_for(test, train_samples, model, labels)

    per_class = {}
    classes = sorted({s.class_name for s in test if s.class_name})
    if len(classes) > 1:
        for c in classes:
            idx = [i for i, s in enumerate(test) if s.class_name == c]
            sub = [test[i] for i in idx]
            tr = [s for s in train_samples if s.class_name == c]
            per_class[c] = _report_for(sub, tr, model, None if labels is None else [labels[i] for i in idx])
    write_report(args.report, report, per_class)
    print(" ".join(f"{k}={report.get(k)}" for k in REPORT_KEYS))
    return EXIT_OK


def cmd_baseline(args) -> int:
    train_samples = _samples(args.data, "train", args.class_name)
    test = _samples(args.data, "test", args.class_name)
    if args.kind == "kmeans":
        provider = make_provider(FeatureProviderSpec(args.provider, tuple(args.layers or ()), seed=args.provider_seed,
                                                     path=args.provider_path))
        report, labels = kmeans_report(train_samples, test, provider, args.K, args.seed)
        if args.labels_out:
            out = Path(args.labels_out)
            out.mkdir(parents=True, exist_ok=True)
            for s, lab in zip(test, labels):
                LabelGrid(lab).save(out / f"{s.sample_id}.png")
    else:
        if any(s.keypoints is None for s in train_samples + test):
            raise UsageError(f"--kind {args.kind} needs keypoint files for every sample")
        report = {"kp_error": landmark_baseline(BASELINE_KINDS[args.kind], train_samples, test, args.keypoint)}
    write_report(args.report, report)
    print(" ".join(f"{k}={report.get(k)}" for k in REPORT_KEYS))
    return EXIT_OK


def cmd_visualize(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    model = _checkpoint(args.checkpoint)
    samples = _samples(args.data, args.split)[:args.n]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not samples:
        return EXIT_OK
    labels = labels_from_masks(predict_masks(model, samples), samples)
    from PIL import Image as PILImage

    for s, lab in zip(samples, labels):
        img = np.round(s.image.permute(1, 2, 0).numpy() * 255).astype(np.uint8)
        PILImage.fromarray(overlay(img, lab, args.alpha)).save(out / f"{s.sample_id}.png")
    print(f"wrote {len(samples)} overlays to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partscope", description="Self-supervised part segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-generate", help="write a synthetic part dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_generate)

    s = sub.add_parser("train", help="train a segmenter")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--class", dest="class_name")
    s.add_argument("--saliency", help="directory of <sample_id>.png masks replacing the annotated foreground")
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint (or saved label grids)")
    s.add_argument("--checkpoint")
    s.add_argument("--labels", help="directory of <sample_id>.png label grids to score instead of a model")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=datasets.SPLITS)
    s.add_argument("--report", required=True)
    s.add_argument("--saliency")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("baseline", help="run a clustering or landmark baseline")
    s.add_argument("--kind", required=True, choices=sorted(BASELINE_KINDS))
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--class", dest="class_name")
    s.add_argument("--K", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--keypoint", type=int, default=0, help="keypoint index for single-kp")
    s.add_argument("--provider", default="toy-cnn")
    s.add_argument("--layers", nargs="*")
    s.add_argument("--provider-seed", type=int, default=0)
    s.add_argument("--provider-path")
    s.add_argument("--labels-out")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("visualize", help="write colored part overlays")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--split", default="test", choices=datasets.SPLITS)
    s.add_argument("--alpha", type=float, default=0.5)
    s.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    configure_threads()
    try:
        return args.func(args)
    except datasets.DatasetError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
