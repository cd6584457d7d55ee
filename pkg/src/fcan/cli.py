"""``fcan`` command line: generate, train, eval, ablate, visualize, gradcheck.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 check failure.

Every command that writes files builds its output in a temporary sibling
directory and renames it into place when done, so ``--out`` either holds a
complete result or is left untouched.
"""

import argparse
import contextlib
import os
import shutil
import sys
import tempfile
from dataclasses import replace

import numpy as np

from . import checkpoint
from . import config as cfgmod
from . import tensor as tn
from .ablate import Ablation, write_csv, write_metrics
from .attention import attention_distribution, argmax_location, score_map
from .checks import run_all
from .classifier import model_from_state
from .data import Dataset, generate_dataset, load_dataset, load_ppm, save_ppm, write_dataset
from .features import extract_features, region_to_patch
from .train import ARMS, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (see fcan.config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--force", action="store_true", help="replace a non-empty --out")
    common.add_argument("--reward", choices=("greedy", "delayed"), help="override train.reward")
    common.add_argument("--parts", type=int, help="override train.parts (number of glimpses)")

    p = _Parser(prog="fcan", description="Fully convolutional attention networks at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write the synthetic glyph dataset")
    for name, text in (("train", "three-step training"), ("ablate", "comparison runs and CSV tables")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--data", help="dataset root written by 'generate' (default: generate in memory)")
    s = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="dataset root or manifest file")
    s.add_argument("--split", default="test", choices=("train", "test"))
    s.add_argument("--arms", default="attention", help="comma-separated: attention,random,center")
    s = sub.add_parser("visualize", parents=[common], help="attention heatmap overlays")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True, help="PGM/PPM input image")
    s.add_argument("--alpha", type=float, default=0.5)
    sub.add_parser("gradcheck", parents=[common], help="gradient and estimator checks")
    return p


# ---------------------------------------------------------------- helpers

def resolve_config(args):
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    train_cfg = cfg.train
    if args.seed is not None:
        if args.command == "generate":
            cfg.task = replace(cfg.task, seed=args.seed)
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.reward:
        train_cfg = replace(train_cfg, reward=args.reward)
    if args.parts is not None:
        train_cfg = replace(train_cfg, parts=args.parts)
    cfg.train = train_cfg
    cfgmod.validate(cfg, "command line")
    return cfg


def check_out_dir(path, force):
    if not path:
        raise UsageError("--out is required for this command")
    if os.path.exists(path):
        if not os.path.isdir(path):
            raise UsageError(f"--out {path} exists and is not a directory")
        if os.listdir(path) and not force:
            raise UsageError(f"--out {path} is not empty; pass --force to replace it")


@contextlib.contextmanager
def atomic_dir(path, force):
    """Yield a temporary directory that replaces ``path`` on success."""
    check_out_dir(path, force)
    path = os.path.abspath(path)
    parent = os.path.dirname(path)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=f".{os.path.basename(path)}.", dir=parent)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if os.path.exists(path):
        old = tempfile.mkdtemp(prefix=f".{os.path.basename(path)}.old.", dir=parent)
        os.rename(path, os.path.join(old, "x"))
        os.rename(tmp, path)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.rename(tmp, path)


def load_splits(cfg, data_root):
    if data_root is None:
        return generate_dataset(cfg.task)
    return tuple(load_data(data_root, split) for split in ("train", "test"))


def load_data(path, split="test", num_classes=None):
    manifest = os.path.join(path, f"{split}.txt") if os.path.isdir(path) else path
    if not os.path.exists(manifest):
        raise DataError(f"manifest {manifest} not found")
    task_cfg = os.path.join(os.path.dirname(os.path.abspath(manifest)), "task.cfg")
    declared = None
    if os.path.exists(task_cfg):
        declared = cfgmod.load(task_cfg).task.num_classes
    if num_classes is not None and declared is not None and declared != num_classes:
        raise DataError(f"checkpoint has {num_classes} classes but {task_cfg} declares {declared}")
    ds = load_dataset(manifest, num_classes)
    if declared is not None and len(ds):
        ds = Dataset(ds.images, ds.labels, ds.rects, ds.paths, declared)
    return ds


def _say(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    cfg = resolve_config(args)
    with atomic_dir(args.out, args.force) as tmp:
        train_set, test_set = write_dataset(tmp, cfg.task)
    _say(f"wrote {len(train_set)} train and {len(test_set)} test images to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_config(args)
    check_out_dir(args.out, args.force)
    train_set, _ = load_splits(cfg, args.data)
    with atomic_dir(args.out, args.force) as tmp:
        with open(os.path.join(tmp, "config.cfg"), "w") as f:
            f.write(cfgmod.dumps(cfg))
        model, reports = train(train_set.images, train_set.labels, cfg.train, train_set.num_classes,
                               log_path=os.path.join(tmp, "log.jsonl"),
                               ckpt_dir=os.path.join(tmp, "checkpoints"))
        write_metrics(os.path.join(tmp, "metrics.csv"), reports)
    last = reports[-1]
    _say(f"trained {len(reports)} epochs; final step {last.step} val_acc={last.val_acc:.4f}; "
         f"checkpoints in {os.path.join(args.out, 'checkpoints')}")
    return EXIT_OK


def _load_model(path):
    try:
        return model_from_state(checkpoint.load(path))
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}") from None


def cmd_eval(args):
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    bad = [a for a in arms if a not in ARMS]
    if bad:
        raise UsageError(f"unknown arm {bad[0]!r}; choose from {', '.join(ARMS)}")
    if args.out:
        check_out_dir(args.out, args.force)
    model = _load_model(args.checkpoint)
    ds = load_data(args.data, args.split, model.num_classes)
    if len(ds) == 0:
        raise DataError(f"no samples in {args.data} ({args.split})")
    if tuple(ds.images.shape[-2:]) != tuple(model.image_size):
        raise DataError(f"images are {ds.images.shape[-2:]} but the checkpoint expects {model.image_size}")
    rows = []
    for arm in arms:
        ev = evaluate(model, ds.images, ds.labels, arm)
        rows.append((arm, ev["acc"], ev["n"]))
        _say(f"{arm}: accuracy {ev['acc']:.4f} over {ev['n']} samples")
    if args.out:
        with atomic_dir(args.out, args.force) as tmp:
            write_csv(os.path.join(tmp, "eval.csv"), ("arm", "accuracy", "n"), rows)
    return EXIT_OK


def cmd_ablate(args):
    cfg = resolve_config(args)
    check_out_dir(args.out, args.force)
    train_set, test_set = load_splits(cfg, args.data)
    with atomic_dir(args.out, args.force) as tmp:
        with open(os.path.join(tmp, "config.cfg"), "w") as f:
            f.write(cfgmod.dumps(cfg))
        tables = Ablation(train_set, test_set, cfg, tmp, log=_say).write_all()
    for name, rows in tables.items():
        _say(f"{name}: {rows}")
    return EXIT_OK


def overlay(image, probs, rect, alpha=0.5):
    """RGB overlay: probabilities scaled to [0, 1] by their maximum and
    upsampled by cell replication, blended over the image, with the
    rectangle (top, left, h, w) outlined in red."""
    img = np.asarray(image, dtype=float)
    gray = img.mean(axis=0) if img.shape[0] != 1 else img[0]
    h, w = gray.shape
    gh, gw = probs.shape
    heat = probs / probs.max()
    heat = np.repeat(np.repeat(heat, h // gh, axis=0), w // gw, axis=1)
    rgb = np.stack([(1 - alpha) * gray + alpha * heat] * 3)
    top, left, rh, rw = rect
    bottom, right = top + rh - 1, left + rw - 1
    red = np.array([1.0, 0.0, 0.0])[:, None]
    rgb[:, top, left:right + 1] = red
    rgb[:, bottom, left:right + 1] = red
    rgb[:, top:bottom + 1, left] = red
    rgb[:, top:bottom + 1, right] = red
    return np.clip(rgb, 0.0, 1.0)


def cmd_visualize(args):
    model = _load_model(args.checkpoint)
    if model.T == 0:
        raise DataError("checkpoint has no attention heads to visualize")
    try:
        image = load_ppm(args.image)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {args.image}: {e}") from None
    if image.shape[0] != model.backbone.in_channels or tuple(image.shape[1:]) != tuple(model.image_size):
        raise DataError(f"image {image.shape} does not match the checkpoint input "
                        f"{model.backbone.in_channels}x{model.image_size[0]}x{model.image_size[1]}")
    fmap = extract_features(tn.Tensor(image), model.backbone)
    with atomic_dir(args.out, args.force) as tmp:
        for head in model.heads:
            dist = attention_distribution(score_map(fmap, head), head.t)
            rect = region_to_patch(argmax_location(dist), head.region, fmap)
            save_ppm(os.path.join(tmp, f"attention_t{head.t}.ppm"), overlay(image, dist.probs, rect, args.alpha))
    _say(f"wrote {model.T} overlays to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    lines = []

    def out(msg):
        lines.append(msg)
        _say(msg)
    ok = run_all(args.seed or 0, out)
    if args.out:
        with atomic_dir(args.out, args.force) as tmp:
            with open(os.path.join(tmp, "gradcheck.txt"), "w") as f:
                f.write("\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "visualize": cmd_visualize, "gradcheck": cmd_gradcheck}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code
    try:
        return COMMANDS[args.command](args)
    except (UsageError, cfgmod.ConfigError) as e:
        print(f"fcan {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, ValueError) as e:
        print(f"fcan {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
