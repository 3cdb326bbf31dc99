"""Command-line harness: ``promptdistill <command> [options]``.

Commands: gen-data, train-template, train-promptnet, evaluate, ablate.
Global flags (accepted before or after the command): --config, --out,
--seed, --trace, --dry-run, --quiet.

The output root is ``--out``, else the PROMPTDISTILL_OUT environment
variable, else ``out_dir`` from the config (default ``runs``).

Exit codes: 0 success, 1 ablation verdict not satisfied or a sub-run failed,
2 usage or validation error, 3 numeric failure, 4 I/O or corrupt file.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import OUT_ENV, ExperimentConfig, load_config, resolve_out_dir
from .errors import ConfigError, CorruptFileError, NumericError, PromptDistillError, UsageError, VersionMismatchError
from .experiment import DATASET_FILE, dataset_for, oracle_gate, promptnet_job, run_ablation, split_for, template_job
from .metrics import evaluate_scores
from .model import PromptNet, check_volume, load_checkpoint, save_checkpoint
from .synthdata import dataset_digest, generate_dataset, split_sizes, write_dataset
from .training import PROMPT_MODES, BatchTrace, predict_scores

log = logging.getLogger("promptdistill")

EXIT_OK, EXIT_VERDICT, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    """Global flags; subparsers get SUPPRESS defaults so a flag given before
    the command is not clobbered by the subparser's default."""
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=d(None), help="experiment config file (INI)")
    p.add_argument("--out", metavar="DIR", default=d(None), help=f"output root (overrides ${OUT_ENV} and the config)")
    p.add_argument("--seed", type=int, default=d(None), help="override the seed (see command help)")
    p.add_argument("--trace", action="store_true", default=d(False), help="write a per-step BatchTrace CSV")
    p.add_argument("--dry-run", action="store_true", default=d(False), help="validate and report, write nothing")
    p.add_argument("-q", "--quiet", action="store_true", default=d(False), help="only warnings on stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptdistill",
        description="Privileged-feature distillation experiments on synthetic multi-contrast volumes.",
        parents=[_global_flags(False)],
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = [_global_flags(True)]

    g = sub.add_parser("gen-data", parents=common, help="generate and write a synthetic dataset")
    g.add_argument("--output", metavar="FILE", help=f"dataset file (default <out>/{DATASET_FILE})")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-template", parents=common, help="stage 1: train the template on CE (or all) channels")
    t.add_argument("--dataset", metavar="FILE", help="dataset file (default: generate from the config)")
    t.add_argument("--channels", choices=("ce", "all"), help="template input channels (default from config)")
    t.set_defaults(func=cmd_train_template)

    p = sub.add_parser("train-promptnet", parents=common, help="stage 2: train PromptNet on NE channels")
    p.add_argument("--dataset", metavar="FILE", help="dataset file (default: generate from the config)")
    p.add_argument("--template", metavar="CKPT", help="template checkpoint (required unless --prompt-mode off)")
    p.add_argument("--prompt-mode", choices=PROMPT_MODES, help="prompt loss mode (default from config)")
    p.set_defaults(func=cmd_train_promptnet)

    e = sub.add_parser("evaluate", parents=common, help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", metavar="CKPT", required=True)
    e.add_argument("--dataset", metavar="FILE", help="dataset file (default: generate from the config)")
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--channels", choices=("ne", "ce", "all"), help="input channels (default: the checkpoint's own)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", parents=common, help="off / fixed / adaptive rows over all repeat seeds")
    a.add_argument("--dataset", metavar="FILE", help="dataset file (default: generate from the config)")
    a.add_argument("--jobs", type=int, help="worker processes for independent sub-runs (default from config)")
    a.set_defaults(func=cmd_ablate)
    return parser


# -- helpers --------------------------------------------------------------------


def _load(args) -> tuple[ExperimentConfig, Path]:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "dataset", None):
        config = replace(config, dataset_path=args.dataset)
    return config, resolve_out_dir(args.out, config)


def _seed(args, config: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else config.seeds[0]


def _write_config(out: Path, config: ExperimentConfig) -> None:
    (out / "config.ini").write_text(config.to_ini())


class _TraceWriter:
    def __init__(self, path: Path):
        self.path = path
        self.buf = io.StringIO()
        self.w = csv.writer(self.buf, lineterminator="\n")
        self.w.writerow(BatchTrace.CSV_HEADER)

    def __call__(self, trace: BatchTrace) -> None:
        for row in trace.rows():
            self.w.writerow(row)

    def close(self) -> None:
        self.path.write_text(self.buf.getvalue())


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    """``--seed`` overrides the dataset seed."""
    config, out = _load(args)
    spec = config.dataset if args.seed is None else replace(config.dataset, seed=args.seed)
    spec.validate()
    samples = generate_dataset(spec)
    if args.dry_run:
        n_pos = sum(s.label for s in samples)
        sizes = split_sizes({0: len(samples) - n_pos, 1: n_pos}, config.train_fraction)
        n_train = sum(sizes.values())
        e = spec.volume_extent
        print(f"samples {len(samples)} (class 0: {len(samples) - n_pos}, class 1: {n_pos}); volumes {e}x{e}x{e}")
        print(f"split {n_train} train / {len(samples) - n_train} test at train_fraction {config.train_fraction}")
        print(f"approx file size {len(samples) * 5 * e**3 * 8 / 2**20:.1f} MiB (dry run, nothing written)")
        return EXIT_OK
    path = Path(args.output) if args.output else out / DATASET_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(samples, path, spec)
    print(f"{dataset_digest(path)}  {path}")
    return EXIT_OK


def cmd_train_template(args) -> int:
    """``--seed`` overrides the training seed (default: first repeat seed)."""
    config, out = _load(args)
    if args.channels:
        config = replace(config, template_channels=args.channels)
    seed = _seed(args, config)
    samples, _ = dataset_for(config, out, write=False)
    check_volume(samples[0].ce_volume.shape[1:])
    train, test = split_for(config, samples)
    if args.dry_run:
        print(f"would train template on {config.template_channels!r}: {len(train)} train / {len(test)} test, seed {seed}")
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, config)
    ckpt, report = template_job(config, train, test, seed)
    ckpt.metadata["config"] = config.to_dict()
    stem = out / f"template_seed{seed}"
    save_checkpoint(ckpt, stem.with_suffix(".ckpt"))
    Path(f"{stem}_report.csv").write_text(report.to_csv())
    print(report.to_csv(), end="")
    print(f"checkpoint {stem.with_suffix('.ckpt')}")
    return EXIT_OK


def cmd_train_promptnet(args) -> int:
    """``--seed`` overrides the training seed (default: first repeat seed)."""
    config, out = _load(args)
    mode = args.prompt_mode or config.train.prompt_mode
    if mode != "off" and not args.template:
        raise UsageError(f"--template is required with --prompt-mode {mode}")
    seed = _seed(args, config)
    template = load_checkpoint(args.template) if args.template and mode != "off" else None
    if template is not None:
        if template.kind != "template":
            raise UsageError(f"{args.template} is a {template.kind} checkpoint, not a template")
        if template.model.config.feature_dim != config.encoder.feature_dim:
            raise ConfigError(
                f"template feature_dim {template.model.config.feature_dim} != PromptNet feature_dim {config.encoder.feature_dim}"
            )
    samples, _ = dataset_for(config, out, write=False)
    check_volume(samples[0].ne_volume.shape[1:])
    train, test = split_for(config, samples)
    if args.dry_run:
        print(f"would train PromptNet ({mode}) on NE channels: {len(train)} train / {len(test)} test, seed {seed}")
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, config)
    stem = out / f"promptnet_{mode}_seed{seed}"
    trace = _TraceWriter(Path(f"{stem}_trace.csv")) if args.trace else None
    ckpt, report = promptnet_job(config, train, test, template, seed, mode, on_batch=trace)
    if trace:
        trace.close()
    ckpt.metadata["config"] = config.to_dict()
    save_checkpoint(ckpt, stem.with_suffix(".ckpt"))
    Path(f"{stem}_report.csv").write_text(report.to_csv())
    print(report.to_csv(), end="")
    print(f"checkpoint {stem.with_suffix('.ckpt')}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config, out = _load(args)
    ckpt = load_checkpoint(args.checkpoint)
    samples, _ = dataset_for(config, out, write=False)
    if args.split == "all":
        subset = samples
    else:
        train, test = split_for(config, samples)
        subset = test if args.split == "test" else train
    channels = args.channels or ("ne" if isinstance(ckpt.model, PromptNet) else ckpt.metadata.get("channels", "ce"))
    scores = predict_scores(ckpt, subset, channels)
    if args.dry_run:
        print(f"would evaluate {ckpt.kind} checkpoint on {len(subset)} {args.split} samples ({channels})")
        return EXIT_OK
    label = f"{ckpt.kind}:{ckpt.metadata.get('prompt_mode', ckpt.metadata.get('channels', ''))}"
    report = evaluate_scores(
        scores, [s.label for s in subset], seed=int(ckpt.metadata.get("seed", 0)),
        config_digest=config.digest(split=args.split), label=label,
    )
    text = report.to_csv()
    out.mkdir(parents=True, exist_ok=True)
    Path(out / f"eval_{Path(args.checkpoint).stem}_{args.split}.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    """``--seed S`` shifts the repeat seeds to S, S+1, ... (same count)."""
    config, out = _load(args)
    if args.seed is not None:
        config = replace(config, seeds=tuple(range(args.seed, args.seed + len(config.seeds))))
    jobs = args.jobs or config.jobs
    if jobs < 1:
        raise UsageError(f"--jobs must be >= 1, got {jobs}")
    if args.dry_run:
        samples, _ = dataset_for(config, out, write=False)
        train, test = split_for(config, samples)
        gate = oracle_gate(samples)
        print(gate.line())
        n = len(config.seeds)
        print(f"would run {n} templates + {3 * n} PromptNet runs: {len(train)} train / {len(test)} test, seeds {list(config.seeds)}")
        return EXIT_OK
    result = run_ablation(config, out, jobs=jobs, echo=log.info)
    print(result.markdown(), end="")
    for failure in result.failures:
        print(f"sub-run failed: {failure}", file=sys.stderr)
    if not result.passed:
        print("per-seed test AUC:")
        print(result.per_seed_table())
        return EXIT_VERDICT
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (CorruptFileError, VersionMismatchError, OSError)):
        return EXIT_IO
    if isinstance(exc, PromptDistillError):
        return EXIT_USAGE
    raise exc


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
        force=True,
    )
    log.info("promptdistill %s started %s", args.command, time.strftime("%Y-%m-%dT%H:%M:%S"))
    try:
        return args.func(args)
    except (PromptDistillError, OSError) as exc:
        code = exit_code_for(exc)
        print(f"promptdistill {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
