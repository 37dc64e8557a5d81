"""Experiment drivers: expert grid, consult sizes, KDL vs the unaided student.

Every random choice is derived from one root seed via :func:`derive_seed`, so
any single cell or repetition can be rerun on its own.
"""

from __future__ import annotations

import dataclasses
import json
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataio import DatasetManifest, SplitPlan, plan_splits
from .experts import (FAMILIES, ConsultEnsemble, TrainedModel, build_consult, consult_predict,
                      finetune_expert, load_model, pretrain_expert, proxy_textures, save_model,
                      select_experts, train_consult)
from .inputs import Views
from .kdl import build_kdl, consult_cues, kdl_predict, train_kdl
from .metrics import EvalReport, PatientLeakageError, metric_row, repetition_seed
from .train import Dataset, History, TrainConfig, stratified_carve

EXPERT_KEYS = FAMILIES + ("densely_connected_v1",)


def parse_expert_key(key: str) -> tuple[str, int]:
    if key.endswith("_v1"):
        family, variant = key[:-3], 1
    else:
        family, variant = key, 0
    if family not in FAMILIES or (variant == 1 and family != "densely_connected"):
        raise ValueError(f"unknown expert {key!r}; expected one of {EXPERT_KEYS}")
    return family, variant


def derive_seed(seed: int, *parts) -> int:
    """Counter-style child seed: stable for a given root seed and label path."""
    words = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def _tc(**kw) -> Callable[[], TrainConfig]:
    return lambda: TrainConfig(**kw)


@dataclass
class ExperimentConfig:
    """Desk-scale defaults; the library-level TrainConfig keeps the long schedule."""

    size: int = 64
    repetitions: int = 10
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    seed: int = 0
    proxy_count: int = 400
    experts: tuple[str, ...] = EXPERT_KEYS
    pretrain: TrainConfig = field(default_factory=_tc(max_epochs=12, early_stop_patience=4))
    finetune: TrainConfig = field(default_factory=_tc(max_epochs=30, early_stop_patience=6))
    head: TrainConfig = field(default_factory=_tc(learning_rate=0.01, max_epochs=300, early_stop_patience=30))
    student: TrainConfig = field(default_factory=_tc(max_epochs=60, early_stop_patience=10))

    def __post_init__(self):
        for k in self.experts:
            parse_expert_key(k)
        self.experts = tuple(self.experts)
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not 0 < self.val_fraction < 0.5:
            raise ValueError(f"val_fraction must be in (0, 0.5), got {self.val_fraction}")

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.to_dict() if isinstance(v, TrainConfig) else (list(v) if isinstance(v, tuple) else v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kw = {}
        names = {f.name: f for f in dataclasses.fields(cls)}
        for k, v in d.items():
            if k not in names:
                raise ValueError(f"unknown experiment setting {k!r}")
            if k in ("pretrain", "finetune", "head", "student"):
                base = getattr(cls(), k).to_dict()
                base.update(v)
                v = TrainConfig(**base)
            elif k == "experts":
                v = tuple(v)
            kw[k] = v
        return cls(**kw)


def seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(cfg, seed=seed)


# ---------------------------------------------------------------------------
# pretraining (data independent, so done once per expert and root seed)

class PretrainStore:
    """Memoised proxy-pretrained experts, optionally mirrored to a directory."""

    def __init__(self, cfg: ExperimentConfig, directory: str | Path | None = None, log=None):
        self.cfg = cfg
        self.dir = Path(directory) if directory else None
        self.log = log
        self._mem: dict[str, TrainedModel] = {}
        self._proxy: tuple[Dataset, Dataset] | None = None
        self._lock = threading.RLock()

    def proxy(self) -> tuple[Dataset, Dataset]:
        if self._proxy is None:
            c = self.cfg
            self._proxy = (proxy_textures(c.proxy_count, c.size, derive_seed(c.seed, "proxy", "train")),
                           proxy_textures(max(c.proxy_count // 5, 8), c.size, derive_seed(c.seed, "proxy", "val")))
        return self._proxy

    def get(self, key: str) -> TrainedModel:
        with self._lock:
            return self._get(key)

    def _get(self, key: str) -> TrainedModel:
        if key in self._mem:
            return self._mem[key]
        family, variant = parse_expert_key(key)
        stem = self.dir / f"pretrained_{key}" if self.dir else None
        if stem is not None and stem.with_suffix(".fct").exists():
            model, extra = load_model(stem)
            tm = TrainedModel(model, History(**extra["history"]), extra["meta"])
        else:
            tr, va = self.proxy()
            tm = pretrain_expert(family, tr, va, seeded(self.cfg.pretrain, derive_seed(self.cfg.seed, "pretrain", key)),
                                 variant)
            if self.log:
                self.log(f"pretrained {key}: proxy val acc {tm.meta['proxy_val_acc']:.3f}")
            if stem is not None:
                self.dir.mkdir(parents=True, exist_ok=True)
                save_model(stem, tm.model, {"history": tm.history.to_dict(), "meta": tm.meta})
        self._mem[key] = tm
        return tm


# ---------------------------------------------------------------------------
# repeated-split runner shared by all studies

# fit(train_idx, seed, rep) -> {report name: (predict(test_idx) -> (scores, labels), history)}
MultiRecipe = Callable[[np.ndarray, int, int], dict]


def run_cv_multi(fit: MultiRecipe, manifest: DatasetManifest, plan: SplitPlan, log=None,
                 jobs: int = 1) -> list[EvalReport]:
    """Like :func:`metrics.run_cv` but one fit may yield several named models per repetition.

    Repetitions may run on ``jobs`` threads; results are merged in repetition
    order so reports do not depend on scheduling.
    """
    patients = np.array(manifest.patients)
    for r, (tr, te) in enumerate(plan.repetitions):
        leak = set(patients[np.asarray(tr, dtype=np.int64)]) & set(patients[np.asarray(te, dtype=np.int64)])
        if leak:
            raise PatientLeakageError(f"repetition {r}: patients in both train and test: {sorted(leak)[:3]}")

    def one(r):
        tr, te = (np.asarray(i, dtype=np.int64) for i in plan.repetitions[r])
        try:
            out = fit(tr, repetition_seed(plan.seed, r), r)
            rows = {}
            for name, (predict, hist) in out.items():
                scores, labels = predict(te)
                row = metric_row(scores, labels, hist)
                row["repetition"] = r
                rows[name] = (row, hist.curve_rows() if hist else [])
        except PatientLeakageError:
            raise
        except Exception as exc:
            raise RuntimeError(f"repetition {r} failed: {exc}") from exc
        if log:
            log(f"repetition {r + 1}/{len(plan.repetitions)}: " +
                ", ".join(f"{n} acc {row['accuracy']:.3f}" for n, (row, _) in rows.items()))
        return rows

    reps = range(len(plan.repetitions))
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(one, reps))
    else:
        results = [one(r) for r in reps]
    reports: dict[str, EvalReport] = {}
    for rows in results:
        for name, (row, curve) in rows.items():
            rep = reports.setdefault(name, EvalReport(name))
            rep.rows.append(row)
            rep.curves.append(curve)
    return list(reports.values())


def _carve_rows(views: Views, manifest: DatasetManifest, train_idx: np.ndarray, fraction: float,
                seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Patient-grouped (fit, val) view rows for the given training samples."""
    patients = np.array(manifest.patients)
    fit, val = stratified_carve(manifest.labels[train_idx], patients[train_idx], fraction, seed)
    return views.rows_for(train_idx[fit]), views.rows_for(train_idx[val])


def _carve(views: Views, manifest: DatasetManifest, train_idx: np.ndarray, fraction: float,
           seed: int) -> tuple[Dataset, Dataset]:
    fr, vr = _carve_rows(views, manifest, train_idx, fraction, seed)
    return Dataset((views.x[fr],), views.labels[fr]), Dataset((views.x[vr],), views.labels[vr])


def _scorer(views: Views, predict_fn) -> Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]:
    def predict(test_idx):
        rows = views.rows_for(test_idx)
        return predict_fn(views.x[rows]), views.labels[rows]
    return predict


def cell_name(key: str, mode: str, freeze_fraction: float) -> str:
    return f"{key}_{mode}_f{round(freeze_fraction * 100):02d}"


def finetune_cell(store: PretrainStore, key: str, freeze_fraction: float, fit_set: Dataset, val_set: Dataset,
                  cfg: ExperimentConfig, rep_seed: int, mode: str) -> TrainedModel:
    seed = derive_seed(rep_seed, "finetune", key, mode, freeze_fraction)
    tm = finetune_expert(store.get(key), freeze_fraction, fit_set, val_set, seeded(cfg.finetune, seed))
    tm.meta["key"] = key
    tm.meta["mode"] = mode
    return tm


# ---------------------------------------------------------------------------
# studies

def grid_study(manifest: DatasetManifest, views: dict[str, Views], cfg: ExperimentConfig,
               freezes: Sequence[float] = (0.0, 0.25, 0.5, 0.75), store: PretrainStore | None = None,
               plan: SplitPlan | None = None, log=None, jobs: int = 1) -> list[EvalReport]:
    """Experts x freeze fractions x input modes; one report per cell."""
    store = store or PretrainStore(cfg, log=log)
    plan = plan or plan_splits(manifest, cfg.repetitions, cfg.train_fraction, derive_seed(cfg.seed, "plan"))

    def fit(train_idx, rep_seed, r):
        out = {}
        for mode, v in views.items():
            fit_set, val_set = _carve(v, manifest, train_idx, cfg.val_fraction, derive_seed(rep_seed, "carve"))
            for key in cfg.experts:
                for f in freezes:
                    try:
                        tm = finetune_cell(store, key, f, fit_set, val_set, cfg, rep_seed, mode)
                    except Exception as exc:
                        raise RuntimeError(f"grid cell {cell_name(key, mode, f)}: {exc}") from exc
                    out[cell_name(key, mode, f)] = (_scorer(v, tm.model.predict_proba), tm.history)
        return out

    return run_cv_multi(fit, manifest, plan, log, jobs)


def consult_study(manifest: DatasetManifest, views: Views, cfg: ExperimentConfig, sizes: Sequence[int] = (3, 5, 7),
                  freeze_fraction: float = 0.0, store: PretrainStore | None = None,
                  plan: SplitPlan | None = None, log=None, jobs: int = 1) -> list[EvalReport]:
    """Single experts and EC-n consults, all fitted per repetition on the same splits.

    Experts are ranked by validation accuracy on the repetition's carve; EC-n
    stacks the top n.
    """
    if max(sizes) > len(cfg.experts):
        raise ValueError(f"consult size {max(sizes)} exceeds the {len(cfg.experts)} candidate experts")
    store = store or PretrainStore(cfg, log=log)
    plan = plan or plan_splits(manifest, cfg.repetitions, cfg.train_fraction, derive_seed(cfg.seed, "plan"))

    def fit(train_idx, rep_seed, r):
        fit_set, val_set = _carve(views, manifest, train_idx, cfg.val_fraction, derive_seed(rep_seed, "carve"))
        cands = [finetune_cell(store, k, freeze_fraction, fit_set, val_set, cfg, rep_seed, views.mode)
                 for k in cfg.experts]
        out = {cell_name(tm.meta["key"], views.mode, freeze_fraction): (_scorer(views, tm.model.predict_proba),
                                                                         tm.history) for tm in cands}
        for n in sizes:
            ens = build_consult(select_experts(cands, n), seed=derive_seed(rep_seed, "consult", n))
            hist = train_consult(ens, fit_set, val_set, seeded(cfg.head, derive_seed(rep_seed, "head", n)))
            out[f"EC-{n}"] = (_scorer(views, lambda x, e=ens: consult_predict(e, x)), hist)
        return out

    return run_cv_multi(fit, manifest, plan, log, jobs)


def fit_consult_bundle(manifest: DatasetManifest, views: Views, cfg: ExperimentConfig, n: int,
                       freeze_fraction: float = 0.0, store: PretrainStore | None = None,
                       log=None) -> ConsultEnsemble:
    """Fit one EC-n on a whole (D1-style) manifest with a patient-grouped validation carve."""
    store = store or PretrainStore(cfg, log=log)
    idx = np.arange(len(manifest))
    root = derive_seed(cfg.seed, "bundle", n)
    fit_set, val_set = _carve(views, manifest, idx, cfg.val_fraction, derive_seed(root, "carve"))
    cands = []
    for k in cfg.experts:
        tm = finetune_cell(store, k, freeze_fraction, fit_set, val_set, cfg, root, views.mode)
        if log:
            log(f"expert {k}: val acc {tm.meta['val_acc']:.3f}")
        cands.append(tm)
    ens = build_consult(select_experts(cands, n), seed=derive_seed(root, "consult"))
    train_consult(ens, fit_set, val_set, seeded(cfg.head, derive_seed(root, "head")))
    ens.info = {"patients": sorted(manifest.patient_set), "manifest": manifest.name, "size": n,
                "mode": views.mode, "freeze_fraction": freeze_fraction}
    return ens


def bundle_patients(ensemble: ConsultEnsemble) -> set[str]:
    return set(ensemble.info.get("patients", []))


def refuse_leakage(ensemble: ConsultEnsemble, manifest: DatasetManifest) -> None:
    overlap = bundle_patients(ensemble) & manifest.patient_set
    if overlap:
        raise PatientLeakageError(f"patient leakage: {len(overlap)} patients of {manifest.name!r} were used to fit "
                                  f"the consult bundle, e.g. {sorted(overlap)[:3]}")


def kdl_study(manifest: DatasetManifest, views: Views, ensemble: ConsultEnsemble, cfg: ExperimentConfig,
              cue_join: str = "features", unaided: bool = True, plan: SplitPlan | None = None,
              log=None, sink: Callable[[int, str, object], None] | None = None, jobs: int = 1,
              name: str | None = None) -> list[EvalReport]:
    """KDL-EC-n (and optionally the unaided student, same init and splits) per repetition.

    ``sink(rep, name, model)`` receives each trained model, e.g. to write checkpoints.
    """
    refuse_leakage(ensemble, manifest)
    plan = plan or plan_splits(manifest, cfg.repetitions, cfg.train_fraction, derive_seed(cfg.seed, "plan"))
    name = name or f"KDL-EC-{ensemble.n}"
    cues = consult_cues(ensemble, views.x)

    def fit(train_idx, rep_seed, r):
        out = {}
        fr, vr = _carve_rows(views, manifest, train_idx, cfg.val_fraction, derive_seed(rep_seed, "carve"))
        init = derive_seed(rep_seed, "student")
        tcfg = seeded(cfg.student, derive_seed(rep_seed, "student-train"))
        for label, ens in [(name, ensemble)] + ([("unaided", None)] if unaided else []):
            model = build_kdl(ens, cfg.size, init, cue_join)
            # the consult is frozen, so its cue columns are computed once for the whole manifest
            extra = (cues,) if ens is not None else ()
            tr_set = Dataset((views.x[fr],) + tuple(c[fr] for c in extra), views.labels[fr])
            va_set = Dataset((views.x[vr],) + tuple(c[vr] for c in extra), views.labels[vr])
            hist = train_kdl(model, tr_set, va_set, tcfg)
            if sink:
                sink(r, label, model)
            out[label] = (_scorer(views, lambda x, m=model: kdl_predict(m, x)), hist)
        return out

    return run_cv_multi(fit, manifest, plan, log, jobs)


def resolved_config(cfg: ExperimentConfig, **extra) -> str:
    d = {"experiment": cfg.to_dict()}
    d.update(extra)
    return json.dumps(d, indent=2, sort_keys=True, default=str)
