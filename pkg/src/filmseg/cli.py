"""Command-line entry point wiring generators, training, and experiments.

Every command is deterministic for fixed flags: dataset manifests, result
CSVs and checkpoints are byte-stable across runs on one platform. The
FILMSEG_SEED environment variable overrides the base seed of any command.
Exit codes: 0 success, 1 verification or experiment failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .data import (
    AMBIGUOUS_CLASSES,
    MULTIORGAN_CLASSES,
    gen_ambiguous_dataset,
    gen_multiorgan_dataset,
    read_dataset,
    split_per_subject,
    write_dataset,
)
from .evaluate import (
    ExperimentReport,
    aggregate,
    emit_report,
    label_swap_matrix,
    per_sample_dice,
    read_results_csv,
    write_swap_matrix_csv,
)
from .experiments import EXPERIMENT_KINDS, ExperimentConfig, run_experiment
from .gradcheck import run_gradient_checks
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .train import TrainConfig, train, write_curves_csv


class CliError(Exception):
    pass


def _parse_counts(text: str) -> dict[int, int]:
    names = {name: i for i, name in enumerate(MULTIORGAN_CLASSES)}
    counts = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" in part:
            name, _, value = part.partition("=")
            if name not in names:
                raise CliError(f"unknown class {name!r}, expected one of {list(names)}")
            counts[names[name]] = int(value)
        else:
            for cid in names.values():
                counts[cid] = int(part)
    if not counts:
        raise CliError(f"could not parse counts from {text!r}")
    return counts


def _parse_size(text: str) -> tuple[int, int]:
    h, _, w = text.partition("x")
    return (int(h), int(w or h))


def _base_seed(args) -> int:
    env = os.environ.get("FILMSEG_SEED")
    return int(env) if env else args.seed


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--depth", type=int, default=3, help="pooling/up-conv stages (default 3)")
    p.add_argument("--base-filters", type=int, default=8, help="channels of the first block (default 8)")
    p.add_argument("--n-classes", type=int, default=3, help="metadata classes (default 3)")
    p.add_argument("--no-film", action="store_true", help="plain U-Net: modulation fixed to gamma=1, beta=0")


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.001, help="initial learning rate (default 0.001)")
    p.add_argument("--max-epochs", type=int, default=200, help="cosine period and epoch cap (default 200)")
    p.add_argument("--patience", type=int, default=50, help="early-stopping plateau length (default 50)")
    p.add_argument("--epsilon", type=float, default=0.001, help="early-stopping improvement threshold")


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size,
        initial_lr=args.lr,
        max_epochs=args.max_epochs,
        patience=args.patience,
        epsilon=args.epsilon,
        seed=seed,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="filmseg",
        description="Metadata-conditioned U-Net segmentation experiments on synthetic corpora.",
    )
    parser.add_argument("--config", type=str, default=None,
                        help="key=value file supplying flag defaults (flags override)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--kind", choices=("ambiguous", "multiorgan"), required=True)
    p.add_argument("--counts", default="12", help="subjects per class, e.g. '30' or 'disk=2,square=12'")
    p.add_argument("--size", default="32x32", help="image size HxW (default 32x32)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")

    p = sub.add_parser("train", help="train one model on a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory (checkpoint.ckpt, curves.csv)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--constant-metadata", action="store_true",
                   help="feed every sample the same class-0 vector (the no-metadata control)")
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("train", "valid", "test", "all"), default="test")
    p.add_argument("--seed", type=int, default=0, help="split seed (default 0)")

    p = sub.add_parser("experiment", help="run a full multi-repetition experiment")
    p.add_argument("--experiment", choices=EXPERIMENT_KINDS, required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, help="parallel training processes")
    p.add_argument("--sweep-sizes", default="2,4,6,8,12")
    p.add_argument("--sweep-test-subjects", type=int, default=25)
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("label-swap", help="label-swap matrix of a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("train", "valid", "test", "all"), default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional directory for swap_matrix.csv")

    p = sub.add_parser("gradcheck", help="finite-difference verification of every operator")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("report", help="re-emit summary and figures from a results.csv")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--experiment", default="report", help="title used in the figures")
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    # flags override file values, so file entries become parser defaults
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=str, default=None)
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return argv
    path = Path(known.config)
    if not path.exists():
        raise CliError(f"config file {path} not found")
    overrides = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}: malformed line {line!r}")
        overrides[key.strip().replace("-", "_")] = value.strip()
    for sub_action in parser._subparsers._group_actions[0].choices.values():  # type: ignore[union-attr]
        known_dests = {a.dest: a for a in sub_action._actions}
        usable = {}
        for key, value in overrides.items():
            if key in known_dests:
                action = known_dests[key]
                if isinstance(action, argparse._StoreTrueAction):
                    usable[key] = value.lower() in ("1", "true", "yes")
                elif action.type is not None:
                    usable[key] = action.type(value)
                else:
                    usable[key] = value
        sub_action.set_defaults(**usable)
    return argv


def _load_samples(path: str):
    samples = read_dataset(path)
    if not samples:
        raise CliError(f"dataset {path} is empty")
    return samples


def _split_subset(samples, which: str, seed: int):
    if which == "all":
        return samples
    split = split_per_subject(samples, seed=seed)
    wanted = set(getattr(split, which))
    return [s for s in samples if s.subject_id in wanted]


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"output directory {out} is not empty (use --force)")
    seed = _base_seed(args)
    size = _parse_size(args.size)
    if args.kind == "ambiguous":
        n = int(args.counts)
        samples = gen_ambiguous_dataset(n, size=size, seed=seed)
        names = AMBIGUOUS_CLASSES
    else:
        counts = _parse_counts(args.counts)
        samples = gen_multiorgan_dataset(counts, size=size, seed=seed)
        names = MULTIORGAN_CLASSES
    write_dataset(samples, out)
    print(f"wrote {len(samples)} subjects to {out}")
    per_class = {}
    for s in samples:
        per_class[s.class_id] = per_class.get(s.class_id, 0) + 1
    for cid in sorted(per_class):
        print(f"  {names[cid]}: {per_class[cid]} subjects")
    return 0


def cmd_train(args) -> int:
    samples = _load_samples(args.dataset)
    seed = _base_seed(args)
    split = split_per_subject(samples, seed=seed)
    mcfg = ModelConfig(depth=args.depth, in_channels=samples[0].image.shape[0],
                       base_filters=args.base_filters, n_metadata_classes=args.n_classes,
                       film_enabled=not args.no_film)
    model = init_params(mcfg, seed)
    result = train(model, samples, split, _train_config(args, seed),
                   metadata_mode="constant" if args.constant_metadata else "true")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / "checkpoint.ckpt")
    write_curves_csv(result.curves, out / "curves.csv")
    print(f"trained {len(result.curves)} epochs, best valid loss "
          f"{result.best_valid_loss:.4f} at epoch {result.best_epoch}")
    print(f"wrote {out / 'checkpoint.ckpt'} and {out / 'curves.csv'}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    samples = _split_subset(_load_samples(args.dataset), args.split, _base_seed(args))
    scores = np.asarray(per_sample_dice(model, samples))
    classes = np.asarray([s.class_id for s in samples])
    mean, std = aggregate(scores)
    print(f"{args.split}: mean dice {mean:.4f} ({'n/a' if std is None else f'{std:.4f}'} std, n={len(samples)})")
    for cid in sorted(set(classes.tolist())):
        sel = classes == cid
        print(f"  class {cid}: {float(scores[sel].mean()):.4f} (n={int(sel.sum())})")
    return 0


def cmd_experiment(args) -> int:
    samples = _load_samples(args.dataset)
    cfg = ExperimentConfig(
        repetitions=args.repetitions,
        base_seed=_base_seed(args),
        workers=args.workers,
        depth=args.depth,
        base_filters=args.base_filters,
        in_channels=samples[0].image.shape[0],
        n_classes=args.n_classes,
        sweep_sizes=tuple(int(s) for s in args.sweep_sizes.split(",")),
        sweep_test_subjects=args.sweep_test_subjects,
        train=_train_config(args, 0),
    )
    report = run_experiment(args.experiment, samples, cfg)
    files = emit_report(report, args.out)
    print(f"{args.experiment}: {len(report.rows)} result rows from {args.repetitions} repetitions")
    for arm in report.arms():
        means = {g: round(report.mean(arm, g), 4) for g in report.groups()}
        print(f"  {arm}: {means}")
    for (arm, group), p in sorted(report.p_values.items()):
        print(f"  p[{arm} > {report.reference_arm}, {group}] = {p:.5f}")
    print(f"wrote {', '.join(files)} to {args.out}")
    return 0


def cmd_label_swap(args) -> int:
    model = load_checkpoint(args.checkpoint)
    samples = _split_subset(_load_samples(args.dataset), args.split, _base_seed(args))
    matrix = label_swap_matrix(model, samples, model.config.n_metadata_classes)
    n = model.config.n_metadata_classes
    names = AMBIGUOUS_CLASSES if n == len(AMBIGUOUS_CLASSES) else tuple(str(i) for i in range(n))
    print("label-swap matrix (rows true label, columns input label):")
    for t in range(n):
        row = " ".join("  absent" if np.isnan(v) else f"{v:8.4f}" for v in matrix[t])
        print(f"  {names[t]:>12}: {row}")
    if args.out:
        report = ExperimentReport("label-swap", tuple(names), swap_matrices=[matrix])
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_swap_matrix_csv(report, Path(args.out) / "swap_matrix.csv")
        print(f"wrote swap_matrix.csv to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradient_checks(seed=_base_seed(args))
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<28} max rel error {r.max_error:.3e}  (tolerance {r.tolerance:.0e})")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 1 if failed else 0


def cmd_report(args) -> int:
    rows = read_results_csv(args.results)
    if not rows:
        raise CliError(f"{args.results} holds no result rows")
    class_names = tuple(dict.fromkeys(g for _, g, _, _ in rows if g != "all"))
    report = ExperimentReport(args.experiment, class_names, rows=rows)
    files = emit_report(report, args.out)
    print(f"re-emitted {', '.join(files)} to {args.out}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "label-swap": cmd_label_swap,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
