"""Command-line entry point: generate, featurize, pretrain, finetune, consult, kdl, experiment, explain, report.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (InfeasibleSplitError, ManifestError, check_disjoint, generate_synthetic, load_manifest,
                     plan_splits)
from .experiment import (EXPERT_KEYS, ExperimentConfig, PretrainStore, cell_name, consult_study, derive_seed,
                         finetune_cell, fit_consult_bundle, grid_study, kdl_study, refuse_leakage, resolved_config,
                         seeded, _carve, _carve_rows)
from .experts import load_consult, load_model, save_consult, save_model
from .features import INPUT_MODES, mode_views
from .gradcam import gradcam, overlay
from .inputs import CACHE_ENV, fusion_for, load_fusions, prepare_views
from .kdl import CUE_JOINS, build_kdl, consult_cues, load_kdl, save_kdl, train_kdl
from .metrics import EvalReport, PatientLeakageError, emit_report, render_table, report_csv
from .tensor import save_tensors
from .train import Dataset

log = logging.getLogger("fusecad")

CLASS_NAMES = ("benign", "malignant")


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# helpers

def _csv(text: str, conv=str) -> list:
    try:
        return [conv(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"bad list {text!r}: {exc}") from None


def _load_toml(path: str | None) -> dict:
    if not path:
        return {}
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib

    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        return tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{p}: {exc}") from None


def experiment_config(args) -> ExperimentConfig:
    """TOML file first, then any explicitly given flags on top."""
    file_cfg = _load_toml(getattr(args, "config", None))
    d = dict(file_cfg.get("experiment", {}))
    for key in ("size", "repetitions", "seed", "proxy_count"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if getattr(args, "experts", None):
        d["experts"] = _csv(args.experts)
    for phase in ("pretrain", "finetune", "head", "student"):
        for flag, field in (("max_epochs", "max_epochs"), ("patience", "early_stop_patience"),
                            ("lr", "learning_rate"), ("batch_size", "batch_size")):
            v = getattr(args, f"{phase}_{flag}", None)
            if v is not None:
                d.setdefault(phase, {})[field] = v
    try:
        return ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid experiment settings: {exc}") from None


def _manifest(path, name=None):
    if path is None:
        raise UsageError("--manifest is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"manifest not found: {p}")
    return load_manifest(p, name=name)


def _out_dir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_config(out: Path, args, cfg: ExperimentConfig | None = None, **extra) -> None:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}
    text = resolved_config(cfg, flags=flags, **extra) if cfg else json.dumps({"flags": flags, **extra}, indent=2,
                                                                             sort_keys=True, default=str)
    (out / "run_config.json").write_text(text + "\n")


def _bundle(path) -> "object":
    p = Path(path)
    if not p.exists():
        raise UsageError(f"bundle path not found: {p}")
    return load_consult(p)


def _mode(mode: str) -> str:
    if mode not in INPUT_MODES:
        raise UsageError(f"input mode must be one of {INPUT_MODES}, got {mode!r}")
    return mode


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args) -> None:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if not 0 < args.malignant_fraction < 1:
        raise UsageError(f"--malignant-fraction must be in (0, 1), got {args.malignant_fraction}")
    out = _out_dir(args.out)
    try:
        m = generate_synthetic(out, args.count, args.patients, args.malignant_fraction, args.size, args.seed,
                               args.name, args.patient_prefix)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write_config(out, args)
    digest = hashlib.sha256((out / "manifest.csv").read_bytes()).hexdigest()
    print(f"wrote {len(m)} images from {len(m.patient_set)} patients to {out} (manifest sha256 {digest[:16]})")


def cmd_featurize(args) -> None:
    m = _manifest(args.manifest)
    out = _out_dir(args.out)
    for s in m.samples:
        fo = fusion_for(s.image_path, args.cache)
        save_tensors(out / (Path(s.image_path).stem + ".fct"),
                     {"fusion": fo.data, "padding": np.array(fo.padding, dtype=np.float64)})
    _write_config(out, args)
    print(f"featurized {len(m)} images into {out}")


def cmd_pretrain(args) -> None:
    cfg = experiment_config(args)
    out = _out_dir(args.out)
    store = PretrainStore(cfg, out, log=log.info)
    for key in cfg.experts:
        tm = store.get(key)
        print(f"{key}: proxy val acc {tm.meta['proxy_val_acc']:.3f} after {tm.history.stopped_epoch} epochs")
    _write_config(out, args, cfg)


def cmd_finetune(args) -> None:
    cfg = experiment_config(args)
    if args.expert not in EXPERT_KEYS:
        raise UsageError(f"--expert must be one of {EXPERT_KEYS}")
    if not 0 <= args.freeze <= 1:
        raise UsageError(f"--freeze must be in [0, 1], got {args.freeze}")
    m = _manifest(args.manifest)
    mode = _mode(args.input_mode)
    v = prepare_views(m, mode, cfg.size)
    out = _out_dir(args.out)
    store = PretrainStore(cfg, args.pretrained, log=log.info)
    root = derive_seed(cfg.seed, "finetune-cmd")
    fit_set, val_set = _carve(v, m, np.arange(len(m)), cfg.val_fraction, derive_seed(root, "carve"))
    tm = finetune_cell(store, args.expert, args.freeze, fit_set, val_set, cfg, root, mode)
    name = cell_name(args.expert, mode, args.freeze)
    save_model(out / name, tm.model, {"history": tm.history.to_dict(), "meta": tm.meta})
    _write_config(out, args, cfg)
    print(f"{name}: val acc {tm.meta['val_acc']:.3f}, best epoch {tm.history.convergence_epoch}")


def cmd_consult(args) -> None:
    cfg = experiment_config(args)
    if not 2 <= args.consult_size <= len(cfg.experts):
        raise UsageError(f"--consult-size must be in [2, {len(cfg.experts)}]")
    m = _manifest(args.manifest)
    mode = _mode(args.input_mode)
    v = prepare_views(m, mode, cfg.size)
    out = _out_dir(args.out)
    store = PretrainStore(cfg, args.pretrained, log=log.info)
    ens = fit_consult_bundle(m, v, cfg, args.consult_size, args.freeze, store, log=log.info)
    save_consult(out, ens)
    _write_config(out, args, cfg)
    print(f"EC-{ens.n} bundle written to {out}: " + ", ".join(e.get("key", "?") for e in ens.meta))


def cmd_kdl(args) -> None:
    cfg = experiment_config(args)
    m = _manifest(args.manifest)
    ens = _bundle(args.consult_bundle)
    refuse_leakage(ens, m)
    v = prepare_views(m, _mode(args.input_mode), cfg.size)
    out = _out_dir(args.out)
    root = derive_seed(cfg.seed, "kdl-cmd")
    fr, vr = _carve_rows(v, m, np.arange(len(m)), cfg.val_fraction, derive_seed(root, "carve"))
    model = build_kdl(ens, cfg.size, derive_seed(root, "student"), args.cue_join)
    cues = consult_cues(ens, v.x)
    hist = train_kdl(model, Dataset((v.x[fr], cues[fr]), v.labels[fr]), Dataset((v.x[vr], cues[vr]), v.labels[vr]),
                     seeded(cfg.student, derive_seed(root, "student-train")))
    save_kdl(out, model, {"history": hist.to_dict(), "input_mode": v.mode})
    _write_config(out, args, cfg)
    print(f"KDL-EC-{ens.n} trained: best epoch {hist.convergence_epoch}, val acc {hist.val_acc[hist.convergence_epoch - 1]:.3f}")


def _views_for(m, modes, size):
    fusions = load_fusions(m)
    return {mode: prepare_views(m, mode, size, fusions) for mode in modes}


def cmd_experiment(args) -> None:
    cfg = experiment_config(args)
    out = _out_dir(args.out)
    m = _manifest(args.manifest or args.train_manifest)
    plan = plan_splits(m, cfg.repetitions, cfg.train_fraction, derive_seed(cfg.seed, "plan"))
    (out / "splits.json").write_text(plan.to_json())
    extra = {}
    if args.study == "grid":
        modes = [_mode(x) for x in _csv(args.inputs)]
        freezes = _csv(args.freeze, float)
        if any(not 0 <= f <= 1 for f in freezes):
            raise UsageError("--freeze fractions must lie in [0, 1]")
        reports = grid_study(m, _views_for(m, modes, cfg.size), cfg, freezes,
                             PretrainStore(cfg, args.pretrained, log=log.info), plan, log.info, args.jobs)
    elif args.study == "consult":
        sizes = _csv(args.consult_sizes, int)
        if any(not 2 <= n <= len(cfg.experts) for n in sizes):
            raise UsageError(f"--consult-sizes must lie in [2, {len(cfg.experts)}]")
        v = prepare_views(m, _mode(args.input_mode), cfg.size)
        reports = consult_study(m, v, cfg, sizes, args.freeze_fraction,
                                PretrainStore(cfg, args.pretrained, log=log.info), plan, log.info, args.jobs)
    else:
        mode = _mode(args.input_mode)
        if args.consult_bundle:
            ens = _bundle(args.consult_bundle)
        elif args.consult_manifest:
            d1 = _manifest(args.consult_manifest)
            check_disjoint(d1, m)
            ens = fit_consult_bundle(d1, prepare_views(d1, mode, cfg.size), cfg, args.consult_size,
                                     store=PretrainStore(cfg, args.pretrained, log=log.info), log=log.info)
            save_consult(out / "consult", ens)
        else:
            raise UsageError("experiment kdl needs --consult-bundle or --consult-manifest (a disjoint D1-style set)")
        if ens.n != args.consult_size and args.consult_bundle:
            log.warning("bundle holds EC-%d; --consult-size %d ignored", ens.n, args.consult_size)
        refuse_leakage(ens, m)
        v = prepare_views(m, mode, cfg.size)
        ckpt = out / "checkpoints"

        def sink(rep, label, model):
            save_kdl(ckpt / f"rep{rep:02d}_{label}", model)

        reports = kdl_study(m, v, ens, cfg, args.cue_join, not args.no_unaided, plan, log.info, sink, args.jobs)
        extra["consult_experts"] = [e.get("key") for e in ens.meta]
    emit_report(reports, out, "report")
    (out / "report.json").write_text(json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True) + "\n")
    _write_config(out, args, cfg, **extra)
    print(render_table(reports), end="")


def _explain_model(path: Path):
    if (path / "kdl.json").exists():
        return load_kdl(path)
    if path.suffix in (".json", ".fct") or path.with_suffix(".json").exists():
        return load_model(path.with_suffix(""))[0]
    raise UsageError(f"{path}: expected a KDL checkpoint directory or a model stem")


def _predict(model, x):
    from .kdl import KdlModel, kdl_predict
    if isinstance(model, KdlModel):
        return kdl_predict(model, x)
    return model.predict_proba(x)


def cmd_explain(args) -> None:
    bundle = Path(args.bundle)
    if not bundle.exists():
        raise UsageError(f"bundle path not found: {bundle}")
    model = _explain_model(bundle)
    modes = [_mode(x) for x in _csv(args.modes)]
    images = [Path(p) for p in args.images]
    missing = [str(p) for p in images if not p.exists()]
    if missing:
        raise UsageError(f"image(s) not found: {', '.join(missing)}")
    if not 0 <= args.alpha <= 1:
        raise UsageError(f"--alpha must be in [0, 1], got {args.alpha}")
    out = _out_dir(args.out)
    size = model.input_shape[-1]
    from .features import downsample
    from .gradcam import bilinear_resize
    n = 0
    for path in images:
        fo = fusion_for(path)
        for mode in modes:
            views = [v for v in mode_views(fo, mode)]
            if views[0].shape[-1] != size:
                views = [downsample(v.transpose(1, 2, 0), size).transpose(2, 0, 1) for v in views]
            probs = np.mean([_predict(model, v) for v in views], axis=0)
            cls = int(np.argmax(probs))
            # augmented mode: average the maps of its three separate views
            heat = np.mean([gradcam(model, v, cls, args.layer) for v in views], axis=0)
            peak = heat.max()
            heat = heat / peak if peak > 0 else heat
            gray = fo.cropped()[..., 0]
            h, w = gray.shape
            full = bilinear_resize(heat, *fo.data.shape[:2])[:h, :w] if heat.shape != fo.data.shape[:2] else heat[:h, :w]
            stem = f"{path.stem}_{mode}_{CLASS_NAMES[cls]}"
            overlay(np.round(gray * 255).astype(np.uint8), full, args.alpha, out / f"{stem}.ppm")
            save_tensors(out / f"{stem}.fct", {"heatmap": full, "probabilities": probs})
            n += 1
    _write_config(out, args)
    print(f"wrote {n} overlays to {out}")


def cmd_report(args) -> None:
    reports = []
    for p in args.reports:
        p = Path(p)
        if p.is_dir():
            p = p / "report.json"
        if not p.exists():
            raise UsageError(f"report not found: {p}")
        for d in json.loads(p.read_text()):
            reports.append(EvalReport(d["name"], d["rows"]))
    if args.out:
        out = _out_dir(args.out)
        (out / "combined.csv").write_text(report_csv(reports))
        (out / "combined.txt").write_text(render_table(reports))
    print(render_table(reports), end="")


# ---------------------------------------------------------------------------
# parser

def _add_common(p, experiment: bool = True):
    p.add_argument("--seed", type=int, default=None, help="root seed (default 0, or the config file's)")
    p.add_argument("-v", "--verbose", action="store_true")
    if experiment:
        p.add_argument("--config", help="TOML file with an [experiment] table; flags override it")
        p.add_argument("--size", type=int, default=None, help="network input size in pixels")
        p.add_argument("--repetitions", type=int, default=None)
        p.add_argument("--proxy-count", dest="proxy_count", type=int, default=None)
        p.add_argument("--experts", default=None, help=f"comma list from {','.join(EXPERT_KEYS)}")
        p.add_argument("--pretrained", default=None, help="directory caching proxy-pretrained experts")
        p.add_argument("--jobs", type=int, default=1, help="parallel repetitions")
        for phase in ("pretrain", "finetune", "head", "student"):
            p.add_argument(f"--{phase}-max-epochs", dest=f"{phase}_max_epochs", type=int, default=None)
            p.add_argument(f"--{phase}-patience", dest=f"{phase}_patience", type=int, default=None)
            p.add_argument(f"--{phase}-lr", dest=f"{phase}_lr", type=float, default=None)
            p.add_argument(f"--{phase}-batch-size", dest=f"{phase}_batch_size", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fusecad", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fusecad {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic nodule dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--malignant-fraction", type=float, default=0.2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--patient-prefix", default="P")
    _add_common(p, experiment=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("featurize", help="compute fusion objects for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache", default=None, help=f"cache directory (default ${CACHE_ENV})")
    _add_common(p, experiment=False)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("pretrain", help="pretrain experts on the proxy texture task")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune one pretrained expert")
    p.add_argument("--manifest", required=True)
    p.add_argument("--expert", required=True)
    p.add_argument("--freeze", type=float, default=0.0)
    p.add_argument("--input-mode", default="fused")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("consult", help="fit an EC-n bundle on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--consult-size", type=int, default=3)
    p.add_argument("--freeze", type=float, default=0.0)
    p.add_argument("--input-mode", default="fused")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_consult)

    p = sub.add_parser("kdl", help="train a KDL student against a consult bundle")
    p.add_argument("--manifest", required=True)
    p.add_argument("--consult-bundle", required=True)
    p.add_argument("--cue-join", choices=CUE_JOINS, default="features")
    p.add_argument("--input-mode", default="fused")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_kdl)

    p = sub.add_parser("experiment", help="repeated-split studies")
    p.add_argument("study", choices=("grid", "consult", "kdl"))
    p.add_argument("--manifest", default=None)
    p.add_argument("--train-manifest", default=None, help="alias of --manifest for kdl studies")
    p.add_argument("--out", required=True)
    p.add_argument("--inputs", default="raw,augmented,fused")
    p.add_argument("--freeze", default="0,0.25,0.5,0.75")
    p.add_argument("--freeze-fraction", type=float, default=0.0, help="consult/kdl expert freeze fraction")
    p.add_argument("--input-mode", default="fused")
    p.add_argument("--consult-sizes", default="3,5,7")
    p.add_argument("--consult-size", type=int, default=3)
    p.add_argument("--consult-bundle", default=None)
    p.add_argument("--consult-manifest", default=None, help="D1-style manifest to fit the consult on")
    p.add_argument("--cue-join", choices=CUE_JOINS, default="features")
    p.add_argument("--no-unaided", action="store_true", help="skip the unaided student baseline")
    _add_common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("explain", help="Grad-CAM overlays")
    p.add_argument("--bundle", required=True, help="KDL checkpoint directory or model stem")
    p.add_argument("--modes", default="raw,augmented,fused")
    p.add_argument("--layer", default=None)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("images", nargs="+")
    _add_common(p, experiment=False)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="merge report.json files into one table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", default=None)
    _add_common(p, experiment=False)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "seed", None) is None and args.command in ("generate", "featurize", "explain", "report"):
        args.seed = 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (UsageError, ManifestError, InfeasibleSplitError, PatientLeakageError, FileNotFoundError) as exc:
        print(f"fusecad {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("traceback", exc_info=True)
        print(f"fusecad {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
