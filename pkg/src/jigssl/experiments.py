"""Protocol runners: labelled-fraction sweep, domain adaptation and OOD detection, plus report rendering."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataset import (K_PERCENTS, DatasetManifest, SampleRecord, load_manifest, make_folds, plan_for_k)
from .metrics import EvaluationReport, format_metrics_row, write_roc_csv
from .model import build_model, save_checkpoint
from .ood import evaluate_ood
from .permset import PermutationSet, generate_permutation_set
from .training import TrainConfig, TrainData, evaluate, preset, train

log = logging.getLogger(__name__)

ARMS = ("baseline", "ssl")
METRICS = ("accuracy", "f1", "sensitivity", "specificity", "precision")
METRIC_TITLES = {"accuracy": "Accuracy (%)", "f1": "F1 Score", "sensitivity": "Sensitivity",
                 "specificity": "Specificity", "precision": "Precision"}

# CPU-scale defaults used by the "desk" preset
DESK_DEFAULTS = dict(image_side=48, epochs=12, learning_rate=1e-3, weight_decay=0.005, lam=1.0, P=30,
                     batch_size_supervised=32, batch_size_unsupervised=32)


@dataclass
class ExperimentConfig:
    protocol: str = "fraction-sweep"
    manifest: str = ""
    k_list: tuple[float, ...] = K_PERCENTS
    n_folds: int = 5
    # subset of fold indices to run; None runs all
    folds: tuple[int, ...] | None = None
    fold_strategy: str = "rotation"
    val_fraction: float = 0.2
    split_seed: int = 0
    seeds: tuple[int, ...] = (0,)
    preset: str = "desk"
    perm_seed: int = 0
    source_modality: str = "WLI"
    target_modality: str = "NBI"
    ood_mode: str = "identity"
    ood_M: int = 4
    negate_kl: bool = False
    output_dir: str = "runs"
    workers: int = 1
    train_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.protocol not in ("fraction-sweep", "domain-adaptation", "ood"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        self.k_list = tuple(float(k) for k in self.k_list)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.folds is not None:
            self.folds = tuple(int(f) for f in self.folds)
        if self.protocol == "domain-adaptation" and self.source_modality == self.target_modality:
            raise ValueError("domain adaptation needs distinct source and target modalities")
        if self.preset not in ("desk", "clinical"):
            raise ValueError(f"unknown preset {self.preset!r}")

    @classmethod
    def from_mapping(cls, mapping: dict) -> ExperimentConfig:
        """Keys naming ExperimentConfig fields set them; TrainConfig field names become train overrides."""
        own = {f.name for f in fields(cls)}
        train_keys = {f.name for f in fields(TrainConfig)}
        kw, overrides = {}, dict(mapping.get("train_overrides", {}))
        for k, v in mapping.items():
            if k == "train_overrides":
                continue
            if k in own:
                kw[k] = v
            elif k in train_keys:
                overrides[k] = v
            else:
                raise ValueError(f"unknown config key {k!r}")
        return cls(**kw, train_overrides=overrides)


def train_config_for(cfg: ExperimentConfig, arm: str, k: float, seed: int) -> TrainConfig:
    if cfg.preset == "clinical":
        tc = preset(arm, k, **cfg.train_overrides)
    else:
        tc = TrainConfig(**{**DESK_DEFAULTS, **cfg.train_overrides})
        if arm == "baseline":
            tc = replace(tc, lam=0.0, lam_ramp=False)
    return replace(tc, k_percent=k, seed=seed)


_PERMSETS: dict[tuple, PermutationSet] = {}


def permset_for(tc: TrainConfig, perm_seed: int) -> PermutationSet:
    key = (tc.grid_size, tc.P, tc.perm_pool_size, perm_seed)
    if key not in _PERMSETS:
        _PERMSETS[key] = generate_permutation_set(tc.grid_size, tc.P, tc.perm_pool_size, perm_seed)
    return _PERMSETS[key]


def run_arm(arm: str, data: TrainData, tc: TrainConfig, perm_seed: int = 0, test_images=None, test_labels=None):
    """Train one arm; returns ``(model, permset, history, report)`` with the report on the test set if given."""
    ssl = arm == "ssl"
    permset = permset_for(tc, perm_seed) if ssl else None
    model = build_model(tc.encoder, tc.P if ssl else None, seed=tc.seed)
    model, history = train(model, data, permset, tc)
    if test_images is None:
        test_images, test_labels = data.val_images, data.val_labels
    report = evaluate(model, test_images, test_labels, tc.image_side)
    return model, permset, history, report


# --------------------------------------------------------------------------- fraction sweep


@dataclass
class CellResult:
    k_percent: float
    fold: int
    seed: int
    arm: str
    report: dict | None
    error: str | None = None
    supervised_ids: tuple[str, ...] = ()
    validation_ids: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.report is not None


@dataclass
class SweepReport:
    cells: list[CellResult] = field(default_factory=list)

    @property
    def failed(self) -> list[CellResult]:
        return [c for c in self.cells if not c.ok]

    def k_values(self) -> list[float]:
        return sorted({c.k_percent for c in self.cells})

    def values(self, k: float, arm: str, metric: str) -> list[float]:
        return [c.report[metric] for c in self.cells
                if c.ok and c.k_percent == k and c.arm == arm and c.report.get(metric) is not None]

    def summary(self) -> list[dict]:
        """Median and standard deviation over folds x seeds for each (k, arm)."""
        rows = []
        for k in self.k_values():
            for arm in ARMS:
                cells = [c for c in self.cells if c.k_percent == k and c.arm == arm]
                if not cells:
                    continue
                row = {"k_percent": k, "arm": arm, "n": sum(c.ok for c in cells),
                       "failed": sum(not c.ok for c in cells)}
                for m in METRICS:
                    v = self.values(k, arm, m)
                    row[f"{m}_median"] = float(np.median(v)) if v else None
                    row[f"{m}_std"] = float(np.std(v, ddof=1)) if len(v) > 1 else (0.0 if v else None)
                rows.append(row)
        return rows

    def to_json(self) -> str:
        return json.dumps([asdict(c) for c in self.cells], indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> SweepReport:
        cells = []
        for d in json.loads(text):
            d["supervised_ids"] = tuple(d.get("supervised_ids", ()))
            d["validation_ids"] = tuple(d.get("validation_ids", ()))
            cells.append(CellResult(**d))
        return cls(cells)


_IMAGE_CACHE: dict = {}


def _sweep_cell(args) -> list[CellResult]:
    cfg, manifest, template, k, seed = args
    torch.set_num_threads(1)
    plan = plan_for_k(template, manifest, k, seed=seed)
    data = TrainData.from_plan(manifest, plan, _IMAGE_CACHE)
    sup_ids = tuple(sorted(plan.supervised_record_ids))
    val_ids = tuple(sorted(plan.validation_record_ids))
    out = []
    for arm in ARMS:
        tc = train_config_for(cfg, arm, k, seed)
        try:
            *_, report = run_arm(arm, data, tc, cfg.perm_seed)
            out.append(CellResult(k, plan.fold_index, seed, arm, report.as_dict(), None, sup_ids, val_ids))
        except Exception as exc:  # a failed cell is recorded and the sweep continues
            log.warning("cell k=%s fold=%s seed=%s arm=%s failed: %s", k, plan.fold_index, seed, arm, exc)
            out.append(CellResult(k, plan.fold_index, seed, arm, None, f"{type(exc).__name__}: {exc}",
                                  sup_ids, val_ids))
    return out


def run_fraction_sweep(cfg: ExperimentConfig, manifest: DatasetManifest | None = None) -> SweepReport:
    """Baseline and SSL arms on identical D_K / validation splits for every (k, fold, seed)."""
    manifest = manifest or load_manifest(cfg.manifest)
    templates = make_folds(manifest, cfg.n_folds, cfg.val_fraction, cfg.split_seed, cfg.fold_strategy)
    folds = cfg.folds if cfg.folds is not None else range(cfg.n_folds)
    jobs = [(cfg, manifest, templates[f], k, s) for f in folds for k in cfg.k_list for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(j) for j in jobs]
    return SweepReport([c for r in results for c in r])


def _num(v) -> str:
    return "" if v is None else f"{v:.6f}"


def write_sweep_csv(report: SweepReport, path: str | Path) -> None:
    cols = ["k_percent", "arm", "n", "failed"] + [f"{m}_{s}" for m in METRICS for s in ("median", "std")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in report.summary():
            w.writerow([row["k_percent"], row["arm"], row["n"], row["failed"]] +
                       [_num(row[c]) for c in cols[4:]])


def write_cells_csv(report: SweepReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k_percent", "fold", "seed", "arm", "status"] + list(METRICS))
        for c in report.cells:
            vals = [_num(c.report.get(m)) if c.ok else "" for m in METRICS]
            w.writerow([c.k_percent, c.fold, c.seed, c.arm, "ok" if c.ok else "failed"] + vals)


def _cell(v, metric) -> str:
    if v is None:
        return "n/a"
    return f"{v * 100:.2f}" if metric == "accuracy" else f"{v:.2f}"


def _k_label(k: float) -> str:
    return f"{k:g}%"


def sweep_markdown(report: SweepReport) -> str:
    """Rows by labelled fraction (smallest first); each metric split into Baseline / SSL columns."""
    head = ["Labeled Data"] + [f"{METRIC_TITLES[m]} {arm_title}" for m in METRICS
                               for arm_title in ("Baseline", "SSL")]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    summary = {(r["k_percent"], r["arm"]): r for r in report.summary()}
    for k in report.k_values():
        row = [_k_label(k)]
        for m in METRICS:
            for arm in ARMS:
                r = summary.get((k, arm))
                row.append(_cell(r[f"{m}_median"], m) if r else "n/a")
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def _plot_sweep(report: SweepReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    summary = report.summary()
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, metric in zip(axes, ("accuracy", "f1")):
        for arm in ARMS:
            rows = [r for r in summary if r["arm"] == arm and r[f"{metric}_median"] is not None]
            if not rows:
                continue
            ks = np.array([r["k_percent"] for r in rows])
            med = np.array([r[f"{metric}_median"] for r in rows])
            std = np.array([r[f"{metric}_std"] for r in rows])
            ax.plot(ks, med, marker="o", label=arm)
            ax.fill_between(ks, med - std, med + std, alpha=0.2)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("labeled data (%)")
        ax.set_ylabel(METRIC_TITLES[metric])
        if ax.lines:
            ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def render_report(report, out_dir: str | Path, formats: Sequence[str] = ("csv", "markdown", "plot")) -> list[Path]:
    """Write report files; ``report`` is a SweepReport, DomainAdaptationReport or OODReport."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if isinstance(report, SweepReport):
        if "csv" in formats:
            write_sweep_csv(report, out / "sweep_summary.csv")
            write_cells_csv(report, out / "sweep_cells.csv")
            written += [out / "sweep_summary.csv", out / "sweep_cells.csv"]
        if "markdown" in formats:
            (out / "sweep_table.md").write_text(sweep_markdown(report))
            written.append(out / "sweep_table.md")
        if "plot" in formats and report.summary():
            _plot_sweep(report, out / "sweep_metrics.png")
            written.append(out / "sweep_metrics.png")
        (out / "sweep_cells.json").write_text(report.to_json())
        written.append(out / "sweep_cells.json")
    elif isinstance(report, DomainAdaptationReport):
        written += report.render(out, formats)
    elif isinstance(report, OODReport):
        written += report.render(out, formats)
    else:
        raise TypeError(f"cannot render {type(report).__name__}")
    return written


# --------------------------------------------------------------------------- domain adaptation


def _mean_report(reports: Sequence[dict]) -> dict:
    out = {}
    for m in METRICS:
        v = [r[m] for r in reports if r.get(m) is not None]
        out[m] = float(np.mean(v)) if v else None
    return out


@dataclass
class DomainAdaptationReport:
    runs: dict[str, list[dict]]
    train_counts: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_json(cls, text: str) -> DomainAdaptationReport:
        return cls(**json.loads(text))

    @property
    def baseline(self) -> dict:
        return _mean_report(self.runs["baseline"])

    @property
    def ssl(self) -> dict:
        return _mean_report(self.runs["ssl"])

    def markdown(self) -> str:
        head = ["", "Accuracy", "F1 Score", "Sensitivity", "Specificity", "Precision"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for arm, title in (("baseline", "Baseline"), ("ssl", "SSL")):
            r = EvaluationReport(**{m: getattr(self, arm)[m] for m in METRICS})
            acc, *rest = format_metrics_row(r).split(" / ")
            lines.append("| " + " | ".join([title, acc + "%"] + rest) + " |")
        return "\n".join(lines) + "\n"

    def render(self, out: Path, formats) -> list[Path]:
        written = []
        if "csv" in formats:
            with open(out / "domain_adaptation.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["arm", "seed"] + list(METRICS))
                for arm in ARMS:
                    for i, r in enumerate(self.runs[arm]):
                        w.writerow([arm, r.get("seed", i)] + [_num(r.get(m)) for m in METRICS])
                    w.writerow([arm, "mean"] + [_num(getattr(self, arm)[m]) for m in METRICS])
            written.append(out / "domain_adaptation.csv")
        if "markdown" in formats:
            (out / "domain_adaptation.md").write_text(self.markdown())
            written.append(out / "domain_adaptation.md")
        (out / "domain_adaptation.json").write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        written.append(out / "domain_adaptation.json")
        return written


def domain_split(manifest: DatasetManifest, source: str = "WLI", target: str = "NBI"):
    """(labelled source, unlabelled target, labelled target test) record tuples."""
    src = tuple(r for r in manifest.records if r.labeled and r.modality == source)
    tgt_u = tuple(r for r in manifest.records if not r.labeled and r.modality == target)
    tgt_test = tuple(r for r in manifest.records if r.labeled and r.modality == target)
    if not src or not tgt_u or not tgt_test:
        raise ValueError(f"manifest lacks labelled {source}, unlabelled {target} or labelled {target} records")
    return src, tgt_u, tgt_test


def run_domain_adaptation(cfg: ExperimentConfig, manifest: DatasetManifest | None = None,
                          return_models: bool = False):
    """Supervised phase on labelled source; SSL's jigsaw phase also sees unlabelled target; test on labelled target."""
    manifest = manifest or load_manifest(cfg.manifest)
    src, tgt_u, tgt_test = domain_split(manifest, cfg.source_modality, cfg.target_modality)
    data = TrainData.from_records(manifest, src, src + tgt_u, (), _IMAGE_CACHE)
    test = TrainData.from_records(manifest, tgt_test, (), (), _IMAGE_CACHE)
    runs: dict[str, list[dict]] = {arm: [] for arm in ARMS}
    models = []
    for seed in cfg.seeds:
        for arm in ARMS:
            tc = train_config_for(cfg, arm, 100.0, seed)
            model, permset, _, rep = run_arm(arm, data, tc, cfg.perm_seed, test.sup_images, test.sup_labels)
            runs[arm].append({"seed": seed, **rep.as_dict()})
            models.append((arm, seed, model, permset, tc))
    report = DomainAdaptationReport(runs, {"labeled_source": len(src), "unlabeled_target": len(tgt_u),
                                           "labeled_target_test": len(tgt_test)})
    return (report, models) if return_models else report


# --------------------------------------------------------------------------- OOD


@dataclass
class OODReport:
    runs: list[dict]
    roc: dict[str, list] = field(default_factory=dict)

    @classmethod
    def from_json(cls, text: str) -> OODReport:
        d = json.loads(text)
        return cls(d["runs"], {k: [tuple(p) for p in v] for k, v in d.get("roc", {}).items()})

    def median(self, key: str) -> float:
        return float(np.median([r[key] for r in self.runs]))

    @property
    def baseline_auroc(self) -> float:
        return self.median("baseline")

    @property
    def ssl_auroc(self) -> float:
        return self.median("ssl")

    def markdown(self) -> str:
        return ("| Model | AUROC |\n|---|---|\n"
                f"| Baseline | {self.baseline_auroc:.2f} |\n"
                f"| SSL | {self.ssl_auroc:.2f} |\n")

    def render(self, out: Path, formats) -> list[Path]:
        written = []
        if "csv" in formats:
            with open(out / "ood_summary.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                keys = ["baseline", "ssl", "ssl_kl_only"]
                w.writerow(["seed"] + keys)
                for r in self.runs:
                    w.writerow([r["seed"]] + [_num(r.get(k)) for k in keys])
                w.writerow(["median"] + [_num(self.median(k)) if all(k in r for r in self.runs) else ""
                                         for k in keys])
            written.append(out / "ood_summary.csv")
            for name, pts in self.roc.items():
                write_roc_csv(pts, out / f"ood_roc_{name}.csv")
                written.append(out / f"ood_roc_{name}.csv")
        if "markdown" in formats:
            (out / "ood.md").write_text(self.markdown())
            written.append(out / "ood.md")
        if "plot" in formats and self.roc:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt

            fig, ax = plt.subplots(figsize=(5, 5))
            labels = {"baseline": f"Baseline (AUROC {self.baseline_auroc:.2f})",
                      "ssl": f"SSL (AUROC {self.ssl_auroc:.2f})"}
            for name, pts in self.roc.items():
                ax.plot([p[1] for p in pts], [p[2] for p in pts], label=labels.get(name, name))
            ax.plot([0, 1], [0, 1], "k--", lw=0.8)
            ax.set_xlabel("False positive rate")
            ax.set_ylabel("True positive rate")
            ax.legend(loc="lower right")
            fig.tight_layout()
            fig.savefig(out / "ood_roc.png", metadata={"Software": None})
            plt.close(fig)
            written.append(out / "ood_roc.png")
        (out / "ood.json").write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        written.append(out / "ood.json")
        return written


def ood_split(manifest: DatasetManifest, cfg: ExperimentConfig):
    """In-distribution train/test by video plus out-of-distribution test frames.

    Held-out in-distribution videos come from fold 0 of the video-level split
    over labelled in-distribution records.
    """
    ind = manifest.filter(lambda r: r.modality == cfg.source_modality)
    template = make_folds(ind, cfg.n_folds, cfg.val_fraction, cfg.split_seed, cfg.fold_strategy)[0]
    sup = template.supervised(ind)
    unsup = template.unsupervised(ind)
    in_test = template.validation(ind)
    out_test = tuple(r for r in manifest.records if r.labeled and r.modality == cfg.target_modality)
    if not out_test:
        raise ValueError(f"no labelled {cfg.target_modality} records for OOD testing")
    return sup, unsup, in_test, out_test


def run_ood_experiment(cfg: ExperimentConfig, manifest: DatasetManifest | None = None) -> OODReport:
    """Train on in-distribution data only, then score held-out in-distribution vs shifted-modality frames."""
    manifest = manifest or load_manifest(cfg.manifest)
    sup, unsup, in_test, out_test = ood_split(manifest, cfg)
    data = TrainData.from_records(manifest, sup, unsup, in_test, _IMAGE_CACHE)
    test_in = TrainData.from_records(manifest, in_test, (), (), _IMAGE_CACHE).sup_images
    test_out = TrainData.from_records(manifest, out_test, (), (), _IMAGE_CACHE).sup_images
    runs, rocs = [], []
    for seed in cfg.seeds:
        row = {"seed": seed}
        curves = {}
        for arm in ARMS:
            tc = train_config_for(cfg, arm, 100.0, seed)
            model, permset, _, _ = run_arm(arm, data, tc, cfg.perm_seed)
            spec = tc.tile_spec
            kw = dict(M=cfg.ood_M, seed=seed, scramble_fraction=tc.scramble_fraction, negate_kl=cfg.negate_kl)
            if arm == "baseline":
                res = evaluate_ood(model, test_in, test_out, None, spec, "baseline", **kw)
                row["baseline"], curves["baseline"] = res["auroc"], res["roc"]
            else:
                res = evaluate_ood(model, test_in, test_out, permset, spec, cfg.ood_mode, **kw)
                row["ssl"], curves["ssl"] = res["auroc"], res["roc"]
                row["ssl_kl_only"] = evaluate_ood(model, test_in, test_out, None, spec, "baseline", **kw)["auroc"]
        runs.append(row)
        rocs.append(curves)
    # ROC curves come from the run with the median SSL AUROC
    order = np.argsort([r["ssl"] for r in runs], kind="stable")
    pick = int(order[(len(order) - 1) // 2])
    return OODReport(runs, rocs[pick])


REPORT_FILES = {
    "sweep_cells.json": SweepReport,
    "domain_adaptation.json": DomainAdaptationReport,
    "ood.json": OODReport,
}


def load_report(directory: str | Path):
    """Load whichever saved report lives in ``directory``."""
    d = Path(directory)
    for name, cls in REPORT_FILES.items():
        if (d / name).exists():
            return cls.from_json((d / name).read_text())
    raise FileNotFoundError(f"no saved report in {d}")


PROTOCOLS = {
    "fraction-sweep": run_fraction_sweep,
    "domain-adaptation": run_domain_adaptation,
    "ood": run_ood_experiment,
}


def run_protocol(cfg: ExperimentConfig, manifest: DatasetManifest | None = None):
    return PROTOCOLS[cfg.protocol](cfg, manifest)
