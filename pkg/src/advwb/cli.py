"""Command-line entry point: ``advwb <command> [flags]``.

Config files are plain text, one ``key = value`` per line, ``#`` starts a
comment.  Keys are the long flag names (``learning-rate`` or
``learning_rate``).  Flags given on the command line win over the file.
Each command writes its fully resolved config next to its outputs, and
that file can be passed back with ``--config`` to repeat the run.

Exit status: 0 success, 1 invalid input or usage, 2 failure while running.
"""

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ContainerError, PGMFormatError, ShapeError

OUTPUT_ROOT_ENV = "ADVWB_OUTPUT_ROOT"


class UsageError(Exception):
    """Invalid flags, config keys or inputs (exit status 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\nhint: run `{self.prog} --help` for the accepted flags")


def _progress(msg):
    print(msg, file=sys.stderr, flush=True)


def _output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or "runs")


def _default_out(args, name):
    if not args.out:
        args.out = str(_output_root() / name)  # recorded in the resolved config
    return Path(args.out)


# ---------------------------------------------------------------------------
# config files


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected `key = value`, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in values:
            raise UsageError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def format_config(command, args):
    lines = [f"# advwb {__version__} resolved config for `{command}`", f"command = {command}"]
    for key in sorted(vars(args)):
        if key in ("command", "config", "func"):
            continue
        value = getattr(args, key)
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_resolved_config(command, args, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(command, args))


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _apply_config(sub, argv):
    """Re-parse ``argv`` with defaults taken from ``--config``, if any."""
    peek = argparse.ArgumentParser(add_help=False)
    peek.add_argument("--config")
    pre, _ = peek.parse_known_args(argv)
    if not pre.config:
        return sub.parse_args(argv)
    path = Path(pre.config)
    if not path.is_file():
        raise UsageError(f"config file {path} not found\nhint: check the path or drop --config")
    values = parse_config_text(path.read_text(encoding="utf-8"), str(path))
    command = values.pop("command", None)
    if command is not None and command != sub.prog.split()[-1]:
        raise UsageError(f"{path} was written for `{command}`, not `{sub.prog.split()[-1]}`")
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, text in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            known = ", ".join(sorted(k for k in actions if k not in ("help", "config")))
            raise UsageError(f"{path}: unknown key {key!r}\nhint: valid keys are {known}")
        if isinstance(action, argparse._StoreTrueAction):
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise UsageError(f"{path}: {key} must be true or false, got {text!r}")
            defaults[key] = low in _TRUE
        elif action.nargs in ("+", "*"):
            defaults[key] = [action.type(v) if action.type else v for v in text.split(",") if v.strip()]
        else:
            try:
                defaults[key] = action.type(text) if action.type else text
            except (TypeError, ValueError):
                raise UsageError(f"{path}: cannot read {key} = {text!r}") from None
            if action.choices and defaults[key] not in action.choices:
                raise UsageError(f"{path}: {key} must be one of {', '.join(map(str, action.choices))}")
    sub.set_defaults(**defaults)
    # required flags may now come from the file
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False
    return sub.parse_args(argv)


# ---------------------------------------------------------------------------
# helpers


def _load_split(path, split):
    """``path/split`` when it exists (synth output), else ``path`` itself."""
    from .data_io import load_dataset

    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset directory {p} does not exist\nhint: create it with `advwb synth --out {p}`")
    return load_dataset(p / split if (p / split).is_dir() else p)


def _load_model(path):
    from .model import load_model

    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"model {p} not found\nhint: train one with `advwb train --out {p}`")
    if not Path(str(p) + ".json").is_file():
        raise FileNotFoundError(f"model metadata {p}.json missing\nhint: keep the .json sidecar next to the weights")
    return load_model(p)


def _attack_config(args, eps=0.0):
    from .attacks import AttackConfig

    return AttackConfig(
        epsilon=eps, steps=args.steps, step_size=args.step_size, random_start=not args.no_random_start,
        seed=args.seed, batch_size=args.attack_batch_size,
    )


def _schedule(text):
    from .attacks import EpsilonSchedule

    try:
        return EpsilonSchedule.parse(text)
    except ValueError as exc:
        raise UsageError(f"--schedule: {exc}\nhint: use `default` or a comma list starting at 0, e.g. 0,0.01,0.02")


def _indices(text):
    return [int(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    from .data_io import SynthConfig, generate_synthetic, save_dataset

    out = _default_out(args, "data")
    n_test = args.n_test if args.n_test is not None else max(2, args.n // 4)
    base = dict(size=args.size, channels=args.channels, imbalance_ratio=args.imbalance_ratio,
                noise_amplitude=args.noise)
    for split, n, seed in (("train", args.n, args.seed), ("test", n_test, args.seed + 1)):
        ds = generate_synthetic(SynthConfig(n=n, seed=seed, **base))
        save_dataset(ds, out / split)
        _progress(f"wrote {len(ds)} {split} images to {out / split}")
    write_resolved_config("synth", args, out / "run.config")
    return out


def cmd_train(args):
    from .model import ModelConfig, build_model, save_model
    from .trainer import TrainConfig, train

    data = _load_split(args.data, "train")
    out = _default_out(args, f"model_{args.head}.atwb")
    out.parent.mkdir(parents=True, exist_ok=True)
    mcfg = ModelConfig(
        input_shape=tuple(data.images.shape[1:]), class_count=data.class_count, head_kind=args.head,
        stage_channels=tuple(args.channels), blocks_per_stage=args.blocks, attention_heads=args.attention_heads,
        dropout_p=args.dropout,
    )
    tcfg = TrainConfig(
        learning_rate=args.learning_rate, adam_epsilon=args.adam_epsilon, max_epochs=args.epochs,
        patience=args.patience, min_delta=args.min_delta, batch_size=args.batch_size, seed=args.seed,
        epoch_subsample_fraction=args.subsample,
    )
    model = build_model(mcfg, seed=args.seed)
    model, history = train(model, data, tcfg, progress=_progress)
    save_model(model, out, {"data": str(args.data), "data_provenance": data.provenance})
    history.write_csv(str(out) + ".history.csv")
    write_resolved_config("train", args, str(out) + ".config")
    _progress(f"best val_acc {history.best_val_acc:.4f} at epoch {history.best_epoch}; wrote {out}")
    return out


def cmd_attack(args):
    from .attacks import pgd_linf
    from .data_io import save_container

    model = _load_model(args.model)
    data = _load_split(args.data, "test")
    out = _default_out(args, "adversarial.atwb")
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg = _attack_config(args, args.epsilon)
    res = pgd_linf(model, data.images, data.labels, cfg, workers=args.workers)
    save_container({"x_adv": res.x_adv, "labels": data.labels.astype(np.float64)}, out)
    with open(str(out) + ".csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "prediction", "success", "loss", "linf"])
        for i in range(len(res)):
            w.writerow([i, int(data.labels[i]), int(res.predictions[i]), int(res.success[i]),
                        f"{res.loss[i]:.6g}", f"{res.linf[i]:.6g}"])
    write_resolved_config("attack", args, str(out) + ".config")
    _progress(f"eps={cfg.epsilon:g}: robust accuracy {res.accuracy:.4f}; wrote {out}")
    return out


def cmd_evaluate(args):
    from .report import content_hash, robustness_curve, write_curve_csv

    model = _load_model(args.model)
    data = _load_split(args.data, "test")
    schedule = _schedule(args.schedule)
    out = _default_out(args, f"curve_{model.head_kind}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    curve = robustness_curve(
        model, data.images, data.labels, schedule, _attack_config(args), args.workers, macro=args.macro,
        model_id=content_hash(args.model),
    )
    write_curve_csv(curve, out)
    write_resolved_config("evaluate", args, str(out) + ".config")
    for eps, acc, _ in curve.points:
        _progress(f"eps={eps:<8g} accuracy={acc:.4f}")
    return out


def cmd_explain(args):
    from .attacks import pgd_linf
    from .explain import difference_map, export_maps, grad_cam

    model = _load_model(args.model)
    data = _load_split(args.data, "test")
    idx = _indices(args.indices)
    bad = [i for i in idx if not 0 <= i < len(data)]
    if bad:
        raise UsageError(f"--indices {bad} out of range for {len(data)} images")
    out = _default_out(args, "maps")
    x, y = data.images[idx], data.labels[idx]
    x_adv = x
    if args.epsilon > 0:
        x_adv = pgd_linf(model, x, y, _attack_config(args, args.epsilon), image_ids=idx).x_adv
    for row, i in enumerate(idx):
        amap = grad_cam(model, x_adv[row], int(y[row]), args.layer)
        diff = difference_map(x[row], x_adv[row]) if args.epsilon > 0 else None
        export_maps(out, i, args.epsilon, model.head_kind, amap=amap, diff=diff)
    write_resolved_config("explain", args, out / "run.config")
    _progress(f"wrote maps for {len(idx)} images to {out}")
    return out


def cmd_report(args):
    from .report import Report, read_curve_csv, render_svg

    curves = []
    for p in args.curves:
        if not Path(p).is_file():
            raise FileNotFoundError(f"curve {p} not found\nhint: produce it with `advwb evaluate --out {p}`")
        curves.append(read_curve_csv(p))
    out = _default_out(args, "robustness.svg")
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"curves": [{"path": str(p), **c.metadata()} for p, c in zip(args.curves, curves)]}
    render_svg(Report(curves, meta, log_x=args.log_x), out)
    write_resolved_config("report", args, str(out) + ".config")
    _progress(f"wrote {out}")
    return out


def cmd_experiment(args):
    from .experiment import ExperimentConfig, run_experiment

    out = _default_out(args, "experiment")
    cfg = ExperimentConfig(
        seed=args.seed, n_train=args.n, n_test=args.n_test, max_epochs=args.epochs, attack_steps=args.steps,
        schedule=tuple(_schedule(args.schedule)), sample_images=args.samples, workers=args.workers,
    )
    start = time.perf_counter()
    result = run_experiment(out, cfg, progress=_progress)
    write_resolved_config("experiment", args, out / "run.config")
    _progress(f"done in {time.perf_counter() - start:.1f}s; clean accuracy {result.clean_accuracy}; outputs in {out}")
    return out


# ---------------------------------------------------------------------------
# parser


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise ValueError
    return v


_positive_int.__name__ = "positive integer"


def _attack_flags(p, steps=40):
    p.add_argument("--steps", type=int, default=steps, help="PGD iterations T (default %(default)s)")
    p.add_argument("--step-size", type=float, default=None, help="PGD step; default 2.5*eps/T")
    p.add_argument("--no-random-start", action="store_true", help="start PGD at the clean image")
    p.add_argument("--attack-batch-size", type=_positive_int, default=32)
    p.add_argument("--workers", type=_positive_int, default=1, help="worker processes (1 is bitwise reproducible)")


def build_parser():
    parser = _Parser(prog="advwb", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"advwb {__version__}")
    subs = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    subs.required = True

    def sub(name, func, help_text):
        p = subs.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help=f"output path (default under ${OUTPUT_ROOT_ENV} or ./runs)")
        p.set_defaults(func=func)
        return p

    p = sub("synth", cmd_synth, "generate the synthetic blob/ring dataset (train and test splits)")
    p.add_argument("--n", type=_positive_int, default=2000, help="training images")
    p.add_argument("--n-test", type=_positive_int, default=None, help="test images (default n/4)")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--channels", type=int, choices=(1, 3), default=1)
    p.add_argument("--imbalance-ratio", type=float, default=1.0, help="class-0 : class-1 count ratio")
    p.add_argument("--noise", type=float, default=0.05, help="additive noise amplitude")

    p = sub("train", cmd_train, "train one classifier (baseline or attention head)")
    p.add_argument("--data", required=True, help="dataset directory (uses DATA/train if present)")
    p.add_argument("--head", choices=("baseline", "attention"), default="baseline")
    p.add_argument("--epochs", type=_positive_int, default=300)
    p.add_argument("--patience", type=_positive_int, default=40)
    p.add_argument("--min-delta", type=float, default=0.001)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--adam-epsilon", type=float, default=0.1)
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--subsample", type=float, default=1.0, help="fraction of the training set seen per epoch")
    p.add_argument("--channels", type=_positive_int, nargs="+", default=[16, 32, 64], help="stage widths")
    p.add_argument("--blocks", type=_positive_int, default=2, help="residual blocks per stage")
    p.add_argument("--attention-heads", type=_positive_int, default=16)
    p.add_argument("--dropout", type=float, default=0.5)

    p = sub("attack", cmd_attack, "PGD-attack a dataset at one radius")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset directory (uses DATA/test if present)")
    p.add_argument("--epsilon", type=float, required=True)
    _attack_flags(p)

    p = sub("evaluate", cmd_evaluate, "accuracy versus epsilon under warm-started PGD")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset directory (uses DATA/test if present)")
    p.add_argument("--schedule", default="default", help="`default` or a comma list of radii starting at 0")
    p.add_argument("--macro", action="store_true", help="class-balanced (macro) accuracy instead of micro")
    _attack_flags(p)

    p = sub("explain", cmd_explain, "Grad-CAM and difference maps as PGM files")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--indices", default="0,1,2,3,4,5,6,7", help="comma list of test image indices")
    p.add_argument("--epsilon", type=float, default=0.0, help="attack radius; 0 maps the clean images")
    p.add_argument("--layer", default=None, help="Grad-CAM layer (default: last residual block)")
    _attack_flags(p)

    p = sub("report", cmd_report, "plot robustness curves to SVG")
    p.add_argument("--curves", nargs="+", required=True, help="curve CSVs sharing one schedule")
    p.add_argument("--log-x", action="store_true", help="logarithmic epsilon axis")

    p = sub("experiment", cmd_experiment, "desk-scale pipeline: synth, train both heads, sweep, maps, SVG")
    p.add_argument("--n", type=_positive_int, default=2000)
    p.add_argument("--n-test", type=_positive_int, default=500)
    p.add_argument("--epochs", type=_positive_int, default=12)
    p.add_argument("--steps", type=_positive_int, default=10)
    p.add_argument("--schedule", default="default")
    p.add_argument("--samples", type=_positive_int, default=8)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.set_defaults(seed=7)
    return parser, subs


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    from .kernels import tune_allocator

    tune_allocator()
    parser, subs = build_parser()
    try:
        if not argv or argv[0].startswith("-"):
            parser.parse_args(argv)  # --help / --version / error
        name = argv[0]
        if name not in subs.choices:
            parser.parse_args(argv)
        args = _apply_config(subs.choices[name], argv[1:])
        args.command = name
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, NotADirectoryError, ContainerError, PGMFormatError, ShapeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if "hint:" not in str(exc):
            print("hint: check the input paths and flag values; --help lists every flag", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        print("hint: rerun with the written .config file; a diverging run may need a lower --learning-rate",
              file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
