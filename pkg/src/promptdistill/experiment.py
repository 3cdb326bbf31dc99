"""Reproducible experiment runs: single-stage jobs and the three-row ablation.

Ablation rows share the dataset, split, seeds and the per-seed template, so
the prompt mode is the only thing that varies between them. Sub-runs can be
spread over worker processes; results are always assembled in a fixed order,
so outputs do not depend on ``jobs``.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .config import ExperimentConfig
from .metrics import METRIC_NAMES, Aggregate, MetricSummary, RunReport, aggregate, aggregates_to_csv, aggregates_to_markdown, evaluate_scores, roc_auc
from .model import ModelCheckpoint, load_checkpoint, save_checkpoint
from .synthdata import Sample, generate_dataset, lesion_intensity_scores, read_dataset, split, write_dataset
from .training import predict_scores, train_promptnet, train_template

log = logging.getLogger(__name__)

ABLATION_ROWS = (("off", "✗", "✗"), ("fixed", "✓", "✗"), ("adaptive", "✓", "✓"))
MIN_AUC_MARGIN = 0.01
DATASET_FILE = "dataset.pdd"


def dataset_for(config: ExperimentConfig, out_dir: Path, write: bool = True) -> tuple[list[Sample], Path | None]:
    """Read the configured dataset file, or generate one from the spec (written to ``out_dir``)."""
    if config.dataset_path:
        path = Path(config.dataset_path)
        if not path.is_file():
            raise FileNotFoundError(f"dataset file not found: {path}")
        samples, _ = read_dataset(path)
        return samples, path
    samples = generate_dataset(config.dataset)
    path = None
    if write:
        path = out_dir / DATASET_FILE
        write_dataset(samples, path, config.dataset)
    return samples, path


def split_for(config: ExperimentConfig, samples: list[Sample]) -> tuple[list[Sample], list[Sample]]:
    return split(samples, config.train_fraction, config.split_seed)


def labels_of(samples: list[Sample]) -> list[int]:
    return [s.label for s in samples]


@dataclass
class OracleGate:
    ce_auc: float
    ne_auc: float

    @property
    def gap(self) -> float:
        return self.ce_auc - self.ne_auc

    def line(self) -> str:
        return f"privileged-signal oracle: CE AUC {self.ce_auc:.4f}, NE AUC {self.ne_auc:.4f}, gap {self.gap:+.4f}"


def oracle_gate(samples: list[Sample]) -> OracleGate:
    """Threshold-classifier AUC of the mean lesion intensity on CE versus NE channels."""
    y = labels_of(samples)
    return OracleGate(roc_auc(lesion_intensity_scores(samples, "ce"), y), roc_auc(lesion_intensity_scores(samples, "ne"), y))


# -- single jobs ----------------------------------------------------------------


def template_job(config: ExperimentConfig, train: list[Sample], test: list[Sample], seed: int) -> tuple[ModelCheckpoint, RunReport]:
    ckpt = train_template(train, config.template_encoder(), config.train_config(seed), channels=config.template_channels)
    scores = predict_scores(ckpt, test, config.template_channels)
    digest = config.digest(stage="template")
    return ckpt, evaluate_scores(scores, labels_of(test), seed=seed, config_digest=digest, label="template")


def promptnet_job(
    config: ExperimentConfig,
    train: list[Sample],
    test: list[Sample],
    template: ModelCheckpoint | None,
    seed: int,
    mode: str,
    on_batch=None,
) -> tuple[ModelCheckpoint, RunReport]:
    ckpt = train_promptnet(train, template, config.promptnet_encoder(), config.train_config(seed, mode), on_batch=on_batch)
    scores = predict_scores(ckpt, test)
    digest = config.digest(stage="promptnet", prompt_mode=mode)
    return ckpt, evaluate_scores(scores, labels_of(test), seed=seed, config_digest=digest, label=mode)


# -- worker entry points (top-level so they pickle) -----------------------------


def _worker_template(config: ExperimentConfig, dataset_path: str, seed: int, ckpt_path: str) -> RunReport:
    samples, _ = read_dataset(dataset_path) if dataset_path else (generate_dataset(config.dataset), None)
    train, test = split_for(config, samples)
    ckpt, report = template_job(config, train, test, seed)
    save_checkpoint(ckpt, ckpt_path)
    return report


def _worker_promptnet(config: ExperimentConfig, dataset_path: str, seed: int, mode: str, template_path: str, ckpt_path: str) -> RunReport:
    samples, _ = read_dataset(dataset_path) if dataset_path else (generate_dataset(config.dataset), None)
    train, test = split_for(config, samples)
    template = load_checkpoint(template_path) if mode != "off" else None
    ckpt, report = promptnet_job(config, train, test, template, seed, mode)
    save_checkpoint(ckpt, ckpt_path)
    return report


# -- ablation -------------------------------------------------------------------


@dataclass
class AblationResult:
    gate: OracleGate
    templates: list[RunReport]
    runs: dict[str, list[RunReport]]
    rows: list[Aggregate] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    def mean_auc(self, mode: str) -> float:
        return next(a for a in self.rows if a.label == mode)["auc"].mean

    @property
    def ordering_holds(self) -> bool:
        off, fixed, adaptive = (self.mean_auc(m) for m in ("off", "fixed", "adaptive"))
        return adaptive >= fixed >= off

    @property
    def margin(self) -> float:
        return self.mean_auc("adaptive") - self.mean_auc("off")

    @property
    def passed(self) -> bool:
        return not self.failures and self.ordering_holds and self.margin >= MIN_AUC_MARGIN

    def verdict(self) -> str:
        if self.failures:
            return f"verdict: INCOMPLETE ({len(self.failures)} sub-run(s) failed)"
        off, fixed, adaptive = (self.mean_auc(m) for m in ("off", "fixed", "adaptive"))
        status = "SATISFIED" if self.passed else "NOT SATISFIED"
        return (
            f"verdict: ordering adaptive >= fixed >= off on mean AUC ({adaptive:.4f} >= {fixed:.4f} >= {off:.4f}) "
            f"{'holds' if self.ordering_holds else 'fails'}; margin adaptive - off = {self.margin:+.4f} "
            f"(required >= {MIN_AUC_MARGIN}); {status}"
        )

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "l_prompt", "w_adaptive", "seed", "config_digest", *METRIC_NAMES])
        for mode, lp, wa in ABLATION_ROWS:
            for r in self.runs.get(mode, []):
                w.writerow([mode, lp, wa, *r.csv_row()[1:]])
        return buf.getvalue()

    def templates_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.templates:
            w.writerow(self.templates[0].csv_header())
            for r in self.templates:
                w.writerow(r.csv_row())
        return buf.getvalue()

    def _leading(self) -> dict[str, list[str]]:
        marks = {m: (lp, wa) for m, lp, wa in ABLATION_ROWS}
        return {"l_prompt": [marks[a.label][0] for a in self.rows], "w_adaptive": [marks[a.label][1] for a in self.rows]}

    def summary_csv(self) -> str:
        return aggregates_to_csv(self.rows, self._leading())

    def markdown(self) -> str:
        parts = [
            "# Ablation: prompt loss and adaptive weighting",
            "",
            self.gate.line(),
            "",
            aggregates_to_markdown(self.rows, self._leading()) if self.rows else "(no complete rows)\n",
            self.verdict(),
            "",
        ]
        return "\n".join(parts)

    def per_seed_table(self) -> str:
        seeds = sorted({r.seed for rs in self.runs.values() for r in rs})
        head = "seed  " + "  ".join(f"{m:>9s}" for m, _, _ in ABLATION_ROWS)
        lines = [head]
        for s in seeds:
            cells = []
            for m, _, _ in ABLATION_ROWS:
                r = next((r for r in self.runs.get(m, []) if r.seed == s), None)
                cells.append(f"{r.auc:9.4f}" if r is not None and r.auc is not None else f"{'n/a':>9s}")
            lines.append(f"{s:<4d}  " + "  ".join(cells))
        return "\n".join(lines)


def run_ablation(config: ExperimentConfig, out_dir, jobs: int | None = None, echo=print) -> AblationResult:
    """Template per seed, then off/fixed/adaptive rows against that template.

    Writes ``templates.csv``, ``ablation_runs.csv``, ``ablation.csv`` and
    ``ablation.md`` into ``out_dir`` (partial files survive a failing sub-run).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(config.to_ini())
    jobs = jobs or config.jobs
    started = time.perf_counter()

    samples, dataset_path = dataset_for(config, out_dir)
    gate = oracle_gate(samples)
    echo(gate.line())
    train, test = split_for(config, samples)
    echo(f"split: {len(train)} train / {len(test)} test; seeds {list(config.seeds)}; jobs {jobs}")

    tdir, pdir = out_dir / "templates", out_dir / "promptnet"
    tdir.mkdir(exist_ok=True)
    pdir.mkdir(exist_ok=True)
    tpath = {s: tdir / f"template_seed{s}.ckpt" for s in config.seeds}
    ppath = {(m, s): pdir / f"{m}_seed{s}.ckpt" for m, _, _ in ABLATION_ROWS for s in config.seeds}
    result = AblationResult(gate, [], {m: [] for m, _, _ in ABLATION_ROWS})

    def flush():
        (out_dir / "templates.csv").write_text(result.templates_csv())
        (out_dir / "ablation_runs.csv").write_text(result.runs_csv())

    ds_arg = str(dataset_path) if dataset_path else ""
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            tfut = {s: pool.submit(_worker_template, config, ds_arg, s, str(tpath[s])) for s in config.seeds}
            # "off" rows need no template, so they start immediately
            pfut = {("off", s): pool.submit(_worker_promptnet, config, ds_arg, s, "off", "", str(ppath["off", s])) for s in config.seeds}
            for s in config.seeds:
                try:
                    result.templates.append(tfut[s].result())
                except Exception as exc:  # noqa: BLE001 - reported, other runs continue
                    result.failures.append(f"template seed {s}: {exc}")
                    continue
                for m in ("fixed", "adaptive"):
                    pfut[m, s] = pool.submit(_worker_promptnet, config, ds_arg, s, m, str(tpath[s]), str(ppath[m, s]))
            for m, _, _ in ABLATION_ROWS:
                for s in config.seeds:
                    if (m, s) not in pfut:
                        continue
                    try:
                        result.runs[m].append(pfut[m, s].result())
                    except Exception as exc:  # noqa: BLE001
                        result.failures.append(f"{m} seed {s}: {exc}")
    else:
        for s in config.seeds:
            try:
                ckpt, rep = template_job(config, train, test, s)
                save_checkpoint(ckpt, tpath[s])
                result.templates.append(rep)
                echo(f"template seed {s}: AUC {rep.auc:.4f}")
            except Exception as exc:  # noqa: BLE001
                result.failures.append(f"template seed {s}: {exc}")
                flush()
                continue
            for m, _, _ in ABLATION_ROWS:
                try:
                    pk, rep = promptnet_job(config, train, test, ckpt if m != "off" else None, s, m)
                    save_checkpoint(pk, ppath[m, s])
                    result.runs[m].append(rep)
                    echo(f"{m:>8s} seed {s}: AUC {rep.auc:.4f}")
                except Exception as exc:  # noqa: BLE001
                    result.failures.append(f"{m} seed {s}: {exc}")
                flush()

    flush()
    if not result.failures:
        result.rows = [aggregate(result.runs[m], label=m) if len(result.runs[m]) > 1 else _single(result.runs[m], m)
                       for m, _, _ in ABLATION_ROWS]
        (out_dir / "ablation.csv").write_text(result.summary_csv())
    (out_dir / "ablation.md").write_text(result.markdown())
    log.info("ablation finished in %.1f s", time.perf_counter() - started)
    return result


def _single(reports: list[RunReport], label: str) -> Aggregate:
    """Aggregate of one run: its values with zero spread."""
    r = reports[0]
    return Aggregate(label, 1, r.config_digest, {m: MetricSummary(getattr(r, m), 0.0 if getattr(r, m) is not None else None) for m in METRIC_NAMES})
