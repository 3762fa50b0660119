"""Command-line interface.

Every command prints line-delimited ``key=value`` records on stdout.
Failures print one ``error=<category> message=...`` record on stderr and
exit with the code listed in ``EXIT_CODES``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import metrics
from .checkpoint import load_checkpoint, save_checkpoint
from .data import GENERATORS, Dataset, DomainShift, SyntheticDomainSpec, generate_dataset, load_dataset
from .errors import CheckpointError, ConfigError, LatentCoreError
from .gradcheck import check_model
from .network import ArchConfig, build, make_rng, parameter_budget, trainable_fraction
from .trainer import (
    LAMBDA_SWEEP,
    TrainConfig,
    adapt_task,
    data_fraction_sweep,
    evaluate,
    lambda_sweep,
    train_source,
)

EXIT_CODES = {
    "error": 1,
    "config": 2,
    "task": 3,
    "checkpoint": 4,
    "shape": 5,
    "numeric": 6,
    "freeze": 7,
}


def _emit(line: str) -> None:
    print(line, flush=True)


def _floats(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# -- shared flag groups -------------------------------------------------------

def _add_data_flags(p: argparse.ArgumentParser, shifted: bool) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data", type=Path, help="record file to load instead of generating data")
    g.add_argument("--generator", choices=GENERATORS, default="shapes")
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--samples-per-class", type=int, default=200)
    g.add_argument("--resolution", type=int, help="image size (default: the architecture's)")
    g.add_argument("--data-seed", type=int, help="seed of the generated images (default: --seed)")
    g.add_argument("--test-fraction", type=float, default=0.2)
    if shifted:
        g.add_argument("--invert", action="store_true", help="invert colours")
        g.add_argument("--rotation", type=int, default=0, help="quarter turns")
        g.add_argument("--noise", type=float, default=0.0, help="additive noise std")
        g.add_argument("--relabel", action="store_true", help="permute class labels")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--lr-step", type=int)
    g.add_argument("--lr-decay", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--lambda-orth", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--no-augment", action="store_true")


def _train_config(args, arch_name: str) -> TrainConfig:
    overrides = {
        key: getattr(args, key)
        for key in ("epochs", "lr", "lr_step", "lr_decay", "momentum", "weight_decay",
                    "lambda_orth", "batch_size")
        if getattr(args, key) is not None
    }
    if args.no_augment:
        overrides["augment"] = False
    overrides["seed"] = args.seed
    return TrainConfig.preset(arch_name, **overrides)


def _arch_name(config: ArchConfig) -> str:
    return "desk" if config.channels == ArchConfig.desk().channels else "default"


def _dataset(args, resolution: int, shifted: bool) -> Dataset:
    if args.data is not None:
        return load_dataset(args.data)
    shift = DomainShift()
    if shifted:
        shift = DomainShift(args.invert, args.rotation, args.noise, args.relabel)
    spec = SyntheticDomainSpec(
        generator=args.generator,
        num_classes=args.classes,
        samples_per_class=args.samples_per_class,
        resolution=args.resolution or resolution,
        shift=shift,
        seed=args.seed if args.data_seed is None else args.data_seed,
    )
    return generate_dataset(spec)


def _split(dataset: Dataset, args):
    if not 0.0 <= args.test_fraction < 1.0:
        raise ConfigError("--test-fraction must lie in [0, 1)")
    if args.test_fraction == 0.0:
        return dataset, None
    return dataset.split(args.test_fraction, seed=args.seed)


# -- commands -------------------------------------------------------------------

def cmd_train_source(args) -> int:
    config = ArchConfig.preset(args.arch, num_classes=args.classes)
    train, test = _split(_dataset(args, config.input_resolution, shifted=False), args)
    if train.num_classes != config.num_classes:
        config = ArchConfig.preset(args.arch, num_classes=train.num_classes)
    model = build(config, source_task=args.task, seed=args.seed)
    tc = _train_config(args, args.arch)
    result = train_source(model, train, tc, eval_set=test, log=_emit)
    save_checkpoint(model, args.out)
    _emit(f"checkpoint={args.out} task={args.task} final_train_accuracy={result.final_accuracy:.4f} "
          f"parameters={model.parameter_count(args.task)}")
    return 0


def cmd_adapt(args) -> int:
    model = load_checkpoint(args.checkpoint)
    train, test = _split(_dataset(args, model.config.input_resolution, shifted=True), args)
    model.add_task(args.task, train.num_classes, from_task=args.from_task,
                   factor_init=args.factor_init, head_init=args.head_init, seed=args.seed)
    tc = _train_config(args, _arch_name(model.config))
    result = adapt_task(model, args.task, train, tc, eval_set=test, mode=args.mode, log=_emit)
    out = args.out or args.checkpoint
    save_checkpoint(model, out)
    _emit(f"checkpoint={out} task={args.task} mode={args.mode} "
          f"final_train_accuracy={result.final_accuracy:.4f} "
          f"trainable_fraction={trainable_fraction(model, args.task, args.mode):.6f}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = _dataset(args, model.config.input_resolution, shifted=True)
    if args.test_fraction > 0:
        _, dataset = _split(dataset, args)
    loss, acc = evaluate(model, args.task, dataset)
    _emit(f"task={args.task} n={len(dataset)} loss={loss:.6f} accuracy={acc:.4f} error={1 - acc:.4f}")
    return 0


def cmd_score(args) -> int:
    try:
        lines = Path(args.errors).read_text().splitlines()
    except FileNotFoundError:
        raise ConfigError(f"errors file not found: {args.errors}") from None
    errors, config = metrics.read_error_records(lines)
    points = metrics.task_points(errors, config)
    for name, value in points.items():
        _emit(f"task={name} error={errors[name]:g} points={value:.6f}")
    total = sum(points.values())
    line = f"total={total:.6f} rounded={metrics.round_score(total)}"
    if args.relative_params is not None:
        es = metrics.escore(total, args.relative_params)
        line += f" escore={es:.6f} escore_rounded={metrics.round_score(es)}"
    _emit(line)
    return 0


def cmd_analyze_params(args) -> int:
    config = ArchConfig.preset(args.arch)
    report = metrics.param_report(config.layouts())
    if args.table:
        for row in report.table().splitlines():
            _emit(row)
    else:
        for line in report.records():
            _emit(line)
    for rule in args.truncate:
        ranks = [metrics.truncate(lay, rule).ranks for lay in config.layouts()]
        for row in metrics.compression_report(config.layouts(), {rule: ranks}):
            _emit(row.to_line())
    budget = parameter_budget(config)
    _emit(f"model_parameters={budget['total']} adapt_parameters={budget['adapt']} "
          f"adapt_fraction={budget['adapt'] / budget['total']:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    config = ArchConfig.preset(args.arch, num_classes=args.classes)
    model = build(config, seed=args.seed)
    rng = make_rng(args.seed)
    res = args.resolution or config.input_resolution
    images = rng.random((args.batch, config.in_channels, res, res))
    labels = rng.integers(0, config.num_classes, size=args.batch)
    task = model.source_task
    if args.mode != "source":
        model.freeze_cores()
        task = "probe"
        model.add_task(task, seed=args.seed)
    report = check_model(model, task, images, labels, lam=args.lambda_orth, mode=args.mode,
                         h=args.h, max_coords=args.max_coords or None, seed=args.seed)
    for line in report.records():
        _emit(line)
    return 0 if report.passed else EXIT_CODES["numeric"]


def _sweep_setup(args):
    model = load_checkpoint(args.checkpoint)
    dataset = _dataset(args, model.config.input_resolution, shifted=True)
    if args.test_fraction <= 0:
        raise ConfigError("sweeps need a held-out split (--test-fraction > 0)")
    train, test = _split(dataset, args)
    return model, train, test, _train_config(args, _arch_name(model.config))


def cmd_sweep_data(args) -> int:
    model, train, test, tc = _sweep_setup(args)
    rows = data_fraction_sweep(model, args.task, train, test, args.fractions, tc,
                               mode=args.mode, seed=args.seed)
    for row in rows:
        _emit(row.to_line("fraction"))
    return 0


def cmd_sweep_lambda(args) -> int:
    model, train, test, tc = _sweep_setup(args)
    rows = lambda_sweep(model, args.task, train, test, args.lambdas, tc, seed=args.seed)
    for row in rows:
        _emit(row.to_line("lambda"))
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentcore", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = command("train-source", cmd_train_source, "build a model and train it on a source domain")
    p.add_argument("--arch", choices=("desk", "default"), default="desk")
    p.add_argument("--task", default="source")
    p.add_argument("--out", type=Path, required=True)
    _add_data_flags(p, shifted=False)
    _add_train_flags(p)

    p = command("adapt", cmd_adapt, "register a new task and fit it on the frozen cores")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, help="output checkpoint (default: overwrite --checkpoint)")
    p.add_argument("--task", required=True)
    p.add_argument("--from-task", help="task to initialise from (default: source task)")
    p.add_argument("--mode", choices=("adapt", "head"), default="adapt")
    p.add_argument("--factor-init", choices=("copy", "random-orthonormal"), default="copy")
    p.add_argument("--head-init", choices=("uniform", "copy", "auto"), default="uniform")
    _add_data_flags(p, shifted=True)
    _add_train_flags(p)

    p = command("eval", cmd_eval, "evaluate a task of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--task", required=True)
    _add_data_flags(p, shifted=True)

    p = command("score", cmd_score, "Decathlon score from task=... error=... baseline=... lines")
    p.add_argument("--errors", type=Path, required=True)
    p.add_argument("--relative-params", type=float, help="model size relative to the base network")

    p = command("analyze-params", cmd_analyze_params, "task-specific parameter counts per scheme")
    p.add_argument("--arch", choices=("desk", "default"), default="default")
    p.add_argument("--table", action="store_true", help="human-readable table")
    p.add_argument("--truncate", action="append", default=[],
                   choices=("none", "blocks-1", "channels-half"),
                   help="also report compression ratios for a rank truncation (repeatable)")

    p = command("gradcheck", cmd_gradcheck, "finite-difference check of the training gradients")
    p.add_argument("--arch", choices=("desk", "default"), default="desk")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--resolution", type=int)
    p.add_argument("--mode", choices=("source", "adapt"), default="source")
    p.add_argument("--lambda-orth", type=float, default=1e-3)
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--max-coords", type=int, default=24,
                   help="coordinates sampled per tensor (0: all)")

    for name, func, text in (("sweep-data", cmd_sweep_data, "adaptation accuracy vs. training-set fraction"),
                             ("sweep-lambda", cmd_sweep_lambda, "adaptation accuracy vs. orthogonality weight")):
        p = command(name, func, text)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--task", default="target")
        if name == "sweep-data":
            p.add_argument("--fractions", type=_floats, default=[0.1, 0.25, 0.5, 1.0])
            p.add_argument("--mode", choices=("adapt", "head"), default="adapt")
        else:
            p.add_argument("--lambdas", type=_floats, default=list(LAMBDA_SWEEP))
        _add_data_flags(p, shifted=True)
        _add_train_flags(p)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s %(message)s")
    try:
        return args.func(args)
    except LatentCoreError as exc:
        print(f"error={exc.category} type={type(exc).__name__} message={str(exc)!r}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        err = CheckpointError(str(exc))
        print(f"error={err.category} type=OSError message={str(exc)!r}", file=sys.stderr)
        return EXIT_CODES["checkpoint"]


if __name__ == "__main__":
    sys.exit(main())
