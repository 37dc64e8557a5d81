"""Confusion-based metrics, AUC, repeated-split evaluation and table rendering."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataio import DatasetManifest, SplitPlan
from .train import History

METRICS = ("accuracy", "sensitivity", "specificity", "auc")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with malignant (label 1) as the positive class."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else math.nan

    @property
    def sensitivity(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else math.nan

    @property
    def specificity(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else math.nan

    # explicit per-class recalls so either sensitivity convention can be read off
    @property
    def malignant_recall(self) -> float:
        return self.sensitivity

    @property
    def benign_recall(self) -> float:
        return self.specificity


def _p_malignant(preds) -> np.ndarray:
    p = np.asarray(preds, dtype=np.float64)
    return p[:, 1] if p.ndim == 2 else p


def confusion(preds, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """``preds`` are probability pairs (m, 2) or p(malignant) scores (m,)."""
    p = _p_malignant(preds)
    y = np.asarray(labels).astype(np.int64)
    if len(p) != len(y):
        raise ValueError(f"confusion: {len(p)} predictions vs {len(y)} labels")
    pos = p >= threshold
    return ConfusionMatrix(int((pos & (y == 1)).sum()), int((pos & (y == 0)).sum()),
                           int((~pos & (y == 0)).sum()), int((~pos & (y == 1)).sum()))


def auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve over all distinct score thresholds."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.ndim != 1:
        raise ValueError(f"auc expects 1-d p(malignant) scores, got shape {s.shape}")
    if len(s) != len(y):
        raise ValueError(f"auc: {len(s)} scores vs {len(y)} labels")
    npos, nneg = int((y == 1).sum()), int((y == 0).sum())
    if npos == 0 or nneg == 0:
        raise ValueError("auc needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # cut only where the score changes so tied scores form one diagonal step
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0, tps] / npos
    fpr = np.r_[0, fps] / nneg
    return float(np.trapezoid(tpr, fpr))


# ---------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    name: str
    rows: list[dict] = field(default_factory=list)
    curves: list[list[tuple]] = field(default_factory=list)

    def values(self, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.rows], dtype=np.float64)

    def mean(self, metric: str) -> float:
        return float(self.values(metric).mean())

    def std(self, metric: str) -> float:
        v = self.values(metric)
        return float(v.std(ddof=1)) if len(v) > 1 else 0.0

    @property
    def convergence_epoch(self) -> float:
        return self.mean("convergence_epoch")

    def summary(self) -> dict:
        out = {"name": self.name, "repetitions": len(self.rows)}
        for m in METRICS + ("convergence_epoch",):
            out[m] = {"mean": self.mean(m), "std": self.std(m)}
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "rows": self.rows, "summary": self.summary()}


def pct(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def metric_row(scores: np.ndarray, labels: np.ndarray, history: History | None = None) -> dict:
    cm = confusion(scores, labels)
    try:
        a = auc(_p_malignant(scores), labels)
    except ValueError:
        a = math.nan
    row = {"accuracy": cm.accuracy, "sensitivity": cm.sensitivity, "specificity": cm.specificity,
           "auc": a, "malignant_recall": cm.malignant_recall, "benign_recall": cm.benign_recall,
           "tp": cm.tp, "fp": cm.fp, "tn": cm.tn, "fn": cm.fn,
           "convergence_epoch": history.convergence_epoch if history else 0,
           "epochs": history.stopped_epoch if history else 0}
    return row


class PatientLeakageError(RuntimeError):
    pass


# fit(train_idx, seed) -> (predict(test_idx) -> (scores, labels), history or None)
Recipe = Callable[[np.ndarray, int], tuple[Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]], History | None]]


def repetition_seed(plan_seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([plan_seed, rep, 0xCF]).generate_state(1)[0])


def run_cv(recipe: Recipe, manifest: DatasetManifest, plan: SplitPlan, name: str = "model",
           jobs: int = 1) -> EvalReport:
    """Fit and score a fresh model per repetition of the plan."""
    patients = np.array(manifest.patients)

    def one(r: int):
        tr, te = (np.asarray(i, dtype=np.int64) for i in plan.repetitions[r])
        leak = set(patients[tr]) & set(patients[te])
        if leak:
            raise PatientLeakageError(f"repetition {r}: patients in both train and test: {sorted(leak)[:3]}")
        try:
            predict, hist = recipe(tr, repetition_seed(plan.seed, r))
            scores, labels = predict(te)
        except Exception as exc:
            raise RuntimeError(f"repetition {r} failed: {exc}") from exc
        row = metric_row(scores, labels, hist)
        row["repetition"] = r
        return row, (hist.curve_rows() if hist else [])

    reps = range(len(plan.repetitions))
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(one, reps))
    else:
        results = [one(r) for r in reps]
    return EvalReport(name, [r for r, _ in results], [c for _, c in results])


def render_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table, mean ± std in percent, malignant as positive class."""
    head = ["model", "accuracy%", "sensitivity%", "specificity%", "auc%", "conv.epoch"]
    lines = []
    single = False
    for r in reports:
        cells = [r.name] + [pct(r.mean(m), r.std(m)) for m in METRICS]
        cells.append(f"{r.mean('convergence_epoch'):.1f}")
        single |= len(r.rows) < 2
        lines.append(cells)
    widths = [max(len(h), *(len(c[i]) for c in lines)) for i, h in enumerate(head)]
    out = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
    out.append("  ".join("-" * w for w in widths))
    out += ["  ".join(c.ljust(w) for c, w in zip(cells, widths)) for cells in lines]
    out.append("sensitivity = malignant recall, specificity = benign recall (malignant is positive).")
    if single:
        out.append("* single repetition: std shown as 0.00")
    return "\n".join(out) + "\n"


def report_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "repetitions"] + [f"{m}_{s}" for m in METRICS + ("convergence_epoch",) for s in ("mean", "std")])
    for r in reports:
        w.writerow([r.name, len(r.rows)] + [f"{v:.6f}" for m in METRICS + ("convergence_epoch",)
                                            for v in (r.mean(m), r.std(m))])
    return buf.getvalue()


def rows_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    if report.rows:
        keys = list(report.rows[0])
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for row in report.rows:
            w.writerow([f"{row[k]:.6f}" if isinstance(row[k], float) else row[k] for k in keys])
    return buf.getvalue()


def curve_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
    for e, a, b, c in rows:
        w.writerow([e, f"{a:.8f}", f"{b:.8f}", f"{c:.6f}"])
    return buf.getvalue()


def emit_report(reports: EvalReport | Sequence[EvalReport], out_dir: str | Path, stem: str = "report") -> list[Path]:
    """Write ``<stem>.csv``, ``<stem>.txt``, per-model raw rows and loss curves."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for path, text in ((d / f"{stem}.csv", report_csv(reports)), (d / f"{stem}.txt", render_table(reports))):
        path.write_text(text, encoding="utf-8")
        written.append(path)
    for r in reports:
        p = d / f"{r.name}_rows.csv"
        p.write_text(rows_csv(r))
        written.append(p)
        for i, c in enumerate(r.curves):
            if c:
                p = d / f"{r.name}_curve_rep{i}.csv"
                p.write_text(curve_csv(c))
                written.append(p)
    return written
