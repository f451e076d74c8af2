"""Command-line interface: gen, train, adapt, sweep and report.

Every command that writes artifacts also writes its fully resolved
configuration as ``key=value`` lines next to them; passing that file back
with ``--config`` reproduces the run (explicit flags still win).
Exit codes are 0 on success, 1 on runtime failure and 2 on usage errors.
"""

import argparse
import math
import os
import sys
from collections import defaultdict

import numpy as np

from dynseg import adapt as A
from dynseg import data as D
from dynseg import model as M
from dynseg import scalespace as ss
from dynseg import train as TR

CONFIG_NAME = "config.txt"


class UsageError(Exception):
    pass


# --- argument types ------------------------------------------------------------


def _positive_float(text):
    value = float(text)
    if not (value > 0 and math.isfinite(value)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _non_negative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text}") from None
    if h < 4 or w < 4 or h % 4 or w % 4:
        raise argparse.ArgumentTypeError(f"height and width must be positive multiples of 4, got {text}")
    return h, w


def _list_of(item_type):
    def parse(text):
        items = [t for t in text.split(",") if t]
        if not items:
            raise argparse.ArgumentTypeError("expected a comma-separated list")
        return [item_type(t) for t in items]
    return parse


def _choices_list(choices):
    def check(text):
        if text not in choices:
            raise argparse.ArgumentTypeError(f"{text!r} is not one of {', '.join(choices)}")
        return text
    return _list_of(check)


# --- parser --------------------------------------------------------------------


def _add_generator_flags(p):
    spec = D.GeneratorSpec()
    p.add_argument("--noise", type=float, default=spec.noise, help="pixel noise std")
    p.add_argument("--min-shapes", type=_positive_int, default=spec.min_shapes)
    p.add_argument("--max-shapes", type=_positive_int, default=spec.max_shapes)
    p.add_argument("--radius-min", type=_positive_float, default=spec.radius_range[0])
    p.add_argument("--radius-max", type=_positive_float, default=spec.radius_range[1])


def build_parser():
    parser = argparse.ArgumentParser(prog="dynseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=_positive_int, default=100)
    p.add_argument("--scale", type=_positive_float, default=1.0)
    p.add_argument("--size", type=_size, default=(64, 64))
    p.add_argument("--seed", type=int, default=0)
    _add_generator_flags(p)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV (default: next to the checkpoint)")
    defaults = TR.TrainConfig()
    p.add_argument("--epochs", type=_positive_int, default=defaults.epochs)
    p.add_argument("--batch-size", type=_positive_int, default=defaults.batch_size)
    p.add_argument("--lr", type=_positive_float, default=defaults.base_lr)
    p.add_argument("--momentum", type=float, default=defaults.momentum)
    p.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    p.add_argument("--poly-power", type=_positive_float, default=defaults.poly_power)
    p.add_argument("--augment", choices=("none", "scale_flip"), default=defaults.augment)
    p.add_argument("--seed", type=int, default=defaults.seed)
    _add_generator_flags(p)

    adapt_defaults = A.AdaptConfig()
    p = sub.add_parser("adapt", help="adapt a trained model to every image of a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="metrics.csv", help="metrics CSV")
    p.add_argument("--mode", choices=A.MODES, default=adapt_defaults.mode)
    p.add_argument("--variables", choices=A.VARIABLES, default=adapt_defaults.variables)
    p.add_argument("--steps", type=_non_negative_int, default=adapt_defaults.steps)
    p.add_argument("--lr", type=_positive_float, default=adapt_defaults.learning_rate)
    p.add_argument("--seed", type=int, default=0, help="value of the CSV seed column")
    p.add_argument("--dump-maps", help="directory for per-step prediction, entropy and sigma PGMs")

    p = sub.add_parser("sweep", help="mIoU grid over scales, modes, variables and seeds")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--scales", type=_list_of(_positive_float), default=[1.0, 1.5, 2.0, 2.5, 3.0])
    p.add_argument("--modes", type=_choices_list(A.MODES), default=["baseline", "entropy", "oracle"])
    p.add_argument("--variables", type=_choices_list(A.VARIABLES), default=["both"])
    p.add_argument("--steps", type=_list_of(_non_negative_int), default=[adapt_defaults.steps])
    p.add_argument("--lr", type=_positive_float, default=adapt_defaults.learning_rate)
    p.add_argument("--seeds", type=_list_of(int), default=[1, 2, 3, 4, 5])
    p.add_argument("--count", type=_positive_int, default=8, help="test scenes per seed")
    p.add_argument("--size", type=_size, default=(64, 64))
    _add_generator_flags(p)

    p = sub.add_parser("report", help="aggregate metrics CSVs into a method x scale table")
    p.add_argument("inputs", nargs="+", help="metrics CSV files")
    p.add_argument("--out", default="report.txt")

    for action in sub.choices.values():
        action.add_argument("--config", help="key=value file recorded by an earlier run")
    return parser


# --- config records --------------------------------------------------------------

_NOT_RECORDED = {"config", "command", "inputs"}


def _format_value(value):
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    if isinstance(value, list):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(args):
    lines = [f"command={args.command}"]
    for key in sorted(vars(args)):
        value = getattr(args, key)
        if key in _NOT_RECORDED or value is None:
            continue
        lines.append(f"{key}={_format_value(value)}")
    if args.command == "report":
        lines.append("inputs=" + ",".join(args.inputs))
    return "\n".join(lines) + "\n"


def _config_tokens(path, command):
    tokens = []
    positional = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}: line {lineno}: expected key=value")
            key = key.strip()
            if key == "command":
                if value != command:
                    raise UsageError(f"{path} records command {value!r}, not {command!r}")
                continue
            if key == "inputs":
                positional = value.split(",")
                continue
            tokens += ["--" + key.replace("_", "-"), value]
    return tokens, positional


def parse_args(argv):
    parser = build_parser()
    argv = list(argv)
    if argv and argv[0] in COMMANDS:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv[1:])
        if known.config:
            try:
                tokens, positional = _config_tokens(known.config, argv[0])
            except OSError as exc:
                parser.error(f"cannot read config: {exc}")
            except UsageError as exc:
                parser.error(str(exc))
            rest = argv[1:]
            if positional and not _has_positional(rest):
                rest = positional + rest
            argv = [argv[0]] + tokens + rest
    args = parser.parse_args(argv)
    _validate(parser, args)
    return args


def _has_positional(rest):
    # report's only flags take a value, so a token after a non-flag is positional
    skip = False
    for tok in rest:
        if skip:
            skip = False
        elif tok.startswith("--"):
            skip = "=" not in tok
        else:
            return True
    return False


def _validate(parser, args):
    if hasattr(args, "min_shapes") and args.min_shapes > args.max_shapes:
        parser.error("--min-shapes exceeds --max-shapes")
    if hasattr(args, "radius_min") and args.radius_min > args.radius_max:
        parser.error("--radius-min exceeds --radius-max")
    if hasattr(args, "noise") and not (args.noise >= 0 and math.isfinite(args.noise)):
        parser.error("--noise must be a non-negative number")


def _generator_spec(args):
    return D.GeneratorSpec(min_shapes=args.min_shapes, max_shapes=args.max_shapes,
                           radius_range=(args.radius_min, args.radius_max), noise=args.noise)


def _write_config(path, args):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(format_config(args))


def _sidecar(path, suffix):
    root, _ = os.path.splitext(path)
    return root + suffix


# --- commands ----------------------------------------------------------------------


def cmd_gen(args):
    spec = _generator_spec(args)
    scenes = D.make_set(args.seed, args.count, args.size, args.scale, spec)
    D.write_dataset(args.out, scenes)
    _write_config(os.path.join(args.out, CONFIG_NAME), args)
    print(f"generated {args.count} scenes at scale {args.scale:g}")


def cmd_train(args):
    scenes = D.read_dataset(args.data)
    cfg = TR.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr,
                         momentum=args.momentum, weight_decay=args.weight_decay,
                         poly_power=args.poly_power, augment=args.augment, seed=args.seed)
    backbone, head, log = TR.train_model(
        scenes, cfg, _generator_spec(args),
        progress=lambda row: print(f"epoch {row[0] + 1}/{cfg.epochs} loss {row[2]:.4f} train mIoU {row[3]:.4f}"))
    directory = os.path.dirname(args.out)
    if directory:
        os.makedirs(directory, exist_ok=True)
    M.save_checkpoint(args.out, backbone, head)
    log_path = args.log or _sidecar(args.out, "_log.csv")
    with open(log_path, "w") as fh:
        fh.write(TR.format_log(log))
    _write_config(_sidecar(args.out, "_config.txt"), args)
    print(f"wrote {args.out} and {log_path}")


def _to_gray8(values, top):
    return np.round(np.clip(values / top, 0.0, 1.0) * 255.0).astype(np.uint8)


def _dump_maps(directory, index, trajectory, num_classes):
    ln_c = math.log(num_classes)
    for rec in trajectory.records:
        stem = os.path.join(directory, f"{index:05d}_step{rec.step:03d}")
        maps = rec.maps
        pred = (maps["prediction"].astype(np.int64) * (255 // (num_classes - 1))).astype(np.uint8)
        D.write_pgm(stem + "_prediction.pgm", pred, 255)
        D.write_pgm(stem + "_entropy.pgm", _to_gray8(maps["entropy"], ln_c), 255)
        D.write_pgm(stem + "_sigma.pgm", _to_gray8(maps["sigma"], ss.RADIUS_CAP), 255)


def cmd_adapt(args):
    backbone, head = M.load_checkpoint(args.ckpt)
    scenes = D.read_dataset(args.data, require_labels=False)
    if args.mode in ("oracle", "adversary") and any(s.labels is None for s in scenes):
        raise RuntimeError(f"mode {args.mode} needs label files in {args.data}")
    cfg = A.AdaptConfig(steps=args.steps, learning_rate=args.lr, mode=args.mode, variables=args.variables)
    if args.dump_maps:
        os.makedirs(args.dump_maps, exist_ok=True)
    by_scale = defaultdict(list)
    for idx, scene in enumerate(scenes):
        traj = A.adapt_episode(scene.image, backbone, head, scene.labels, cfg, keep_maps=bool(args.dump_maps))
        if args.dump_maps:
            _dump_maps(args.dump_maps, idx, traj, head.num_classes)
        by_scale[scene.scale].append(traj)
    rows = []
    for scale in sorted(by_scale):
        trajs = by_scale[scale]
        if all(t.records[-1].inter is not None for t in trajs):
            _, miou = D.miou_from_counts(sum(t.at(cfg.steps).inter for t in trajs),
                                         sum(t.at(cfg.steps).union for t in trajs))
        else:
            miou = float("nan")
        rows.append(A.SweepRow(scale, cfg.mode, cfg.variables, cfg.steps, args.seed, miou,
                               float(np.mean([t.at(0).mean_entropy for t in trajs])),
                               float(np.mean([t.at(cfg.steps).mean_entropy for t in trajs]))))
    _write_text(args.out, A.format_csv(rows))
    _write_config(_sidecar(args.out, "_config.txt"), args)
    print(f"adapted {len(scenes)} images; wrote {args.out}")


def cmd_sweep(args):
    backbone, head = M.load_checkpoint(args.ckpt)
    cfgs = []
    for mode in args.modes:
        for variables in (["both"] if mode == "baseline" else args.variables):
            cfgs.append(A.AdaptConfig(steps=max(args.steps), learning_rate=args.lr, mode=mode,
                                      variables=variables))
    rows = A.sweep(backbone, head, args.seeds, args.count, args.scales, cfgs, steps_list=args.steps,
                   size=args.size, spec=_generator_spec(args))
    _write_text(args.out, A.format_csv(rows))
    _write_config(_sidecar(args.out, "_config.txt"), args)
    print(f"wrote {len(rows)} rows to {args.out}")


def format_report(rows):
    """Method x scale table of seed-mean mIoU (percent), scales ascending."""
    if not rows:
        raise ValueError("no metric rows to report")
    scales = sorted({r.scale for r in rows})
    cells = defaultdict(list)
    for r in rows:
        cells[(r.mode, r.variables, r.steps), r.scale].append(r.miou)
    methods = sorted({key for key, _ in cells}, key=lambda k: (A.MODES.index(k[0]), k[1], k[2]))
    modes_seen = defaultdict(int)
    for mode, _, _ in methods:
        modes_seen[mode] += 1

    def label(key):
        mode, variables, steps = key
        if mode == "baseline" or modes_seen[mode] == 1:
            return mode
        return f"{mode} ({variables}, {steps} steps)"

    labels = [label(k) for k in methods]
    width = max(len("method"), *(len(s) for s in labels))
    header = "method".ljust(width) + "".join(f"{s:>9.2f}x" for s in scales)
    lines = [header, "-" * len(header)]
    for key, name in zip(methods, labels):
        row = name.ljust(width)
        for scale in scales:
            values = cells.get((key, scale))
            row += f"{100 * float(np.mean(values)):>10.1f}" if values else f"{'-':>10}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def cmd_report(args):
    rows = []
    for path in args.inputs:
        with open(path) as fh:
            text = fh.read()
        if not text.strip():
            raise ValueError(f"{path} is empty")
        rows += A.parse_csv(text)
    if not rows:
        raise ValueError("input CSVs contain no metric rows")
    _write_text(args.out, format_report(rows))
    _write_config(_sidecar(args.out, "_config.txt"), args)
    print(f"wrote {args.out}")


def _write_text(path, text):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "adapt": cmd_adapt, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"dynseg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
