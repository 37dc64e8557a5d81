"""Knowledge-driven student: dense-net features joined with a frozen consult's cue."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import layers as L
from . import tensor as T
from .experts import HEAD_SIZES, ConsultEnsemble, bundle_hash, load_consult, load_model, save_consult, save_model
from .layers import Model
from .tensor import Tensor
from .train import Dataset, History, TrainConfig, no_grad, softmax_np, train

CUE_JOINS = ("features", "probabilities")
FEATURE_WIDTH = 32


def student_specs(cue_join: str = "features", feature_width: int = FEATURE_WIDTH) -> list[L.LayerSpec]:
    if cue_join not in CUE_JOINS:
        raise ValueError(f"cue_join must be one of {CUE_JOINS}, got {cue_join!r}")
    specs = [L.input_norm_conv(8), L.max_pool(4),
             L.dense_block(4, 8), L.max_pool(),
             L.dense_block(4, 8), L.global_avg_pool(),
             L.dense(feature_width), L.relu()]
    if cue_join == "probabilities":
        specs.append(L.dense(2))
    return specs


class KdlModel:
    """Student network + (optional) frozen consult cue + 3-layer head.

    With ``ensemble=None`` this is the unaided student: same student and head,
    no cue columns.
    """

    def __init__(self, student: Model, head: Model, ensemble: ConsultEnsemble | None = None,
                 cue_join: str = "features"):
        self.student = student
        self.head = head
        self.ensemble = ensemble
        self.cue_join = cue_join
        want = student.output_shape[0] + (2 if ensemble is not None else 0)
        if head.input_shape != (want,):
            raise T.ShapeError(f"head input width {head.input_shape[0]} does not match student+cue width {want}")
        if ensemble is not None:
            for p in ensemble.parameters().values():
                p.requires_grad = False

    @property
    def input_shape(self):
        return self.student.input_shape

    def parameters(self, trainable_only: bool = False) -> dict[str, Tensor]:
        out = {f"student.{k}": p for k, p in self.student.params.items()}
        out.update({f"head.{k}": p for k, p in self.head.params.items()})
        if self.ensemble is not None:
            out.update({f"cue.{k}": p for k, p in self.ensemble.parameters().items()})
        if trainable_only:
            out = {k: p for k, p in out.items() if p.requires_grad}
        return out

    def cue(self, x, tap=None) -> Tensor:
        sub = None if tap is None else (lambda name, t: tap(f"cue.{name}", t))
        return T.stop_gradient(T.softmax(self.ensemble.forward(x, tap=sub)))

    def forward(self, x, cue=None, tap=None) -> Tensor:
        sub = None if tap is None else (lambda name, t: tap(f"student.{name}", t))
        f = self.student.forward(x, tap=sub)
        if self.cue_join == "probabilities":
            f = T.softmax(f)
        if self.ensemble is None:
            return self.head.forward(f)
        c = self.cue(x, tap) if cue is None else T.stop_gradient(T.as_tensor(cue))
        return self.head.forward(T.concat([f, c], axis=1))

    def snapshot(self) -> bytes:
        return self.student.snapshot() + self.head.snapshot()


def kdl_head(width: int, sizes=HEAD_SIZES, seed: int = 0) -> Model:
    specs = [L.dense(sizes[0], role="head"), L.relu(), L.dense(sizes[1], role="head"), L.relu(),
             L.dense(2, role="head"), L.softmax()]
    return Model(specs, (width,), seed)


def build_kdl(ensemble: ConsultEnsemble | None, size: int = 64, seed: int = 0, cue_join: str = "features",
              head_sizes=HEAD_SIZES, student: Model | None = None) -> KdlModel:
    if student is None:
        student = Model(student_specs(cue_join), (3, size, size), seed)
    if ensemble is not None and ensemble.input_shape != student.input_shape:
        raise T.ShapeError(f"consult input {ensemble.input_shape} vs student input {student.input_shape}")
    width = student.output_shape[0] + (2 if ensemble is not None else 0)
    return KdlModel(student, kdl_head(width, head_sizes, seed + 1), ensemble, cue_join)


def consult_cues(ensemble: ConsultEnsemble, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Consult probability pairs for a batch, computed once (the consult never changes)."""
    out = []
    with no_grad(ensemble):
        for s in range(0, len(x), batch_size):
            out.append(T.softmax(ensemble.forward(Tensor(x[s:s + batch_size]))).data)
    return np.concatenate(out, axis=0)


def kdl_dataset(model: KdlModel, x: np.ndarray, labels: np.ndarray) -> Dataset:
    if model.ensemble is None:
        return Dataset((x,), labels)
    return Dataset((x, consult_cues(model.ensemble, x)), labels)


def train_kdl(model: KdlModel, train_set: Dataset, val_set: Dataset, config: TrainConfig, log=None) -> History:
    """Train student and head; cue columns are attached here if the sets only carry images."""
    if model.ensemble is not None and len(train_set.inputs) == 1:
        train_set = kdl_dataset(model, train_set.inputs[0], train_set.labels)
        val_set = kdl_dataset(model, val_set.inputs[0], val_set.labels)
    return train(model, train_set, val_set, config, log=log)


def kdl_predict(model: KdlModel, x, batch_size: int = 64) -> np.ndarray:
    """Probability pairs for a (c, h, w) / (h, w, 3) input or a (m, c, h, w) batch."""
    if hasattr(x, "data") and not isinstance(x, np.ndarray):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        if x.shape[-1] == 3 and x.shape[0] != 3:
            x = x.transpose(2, 0, 1)
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise T.ShapeError(f"kdl input shape mismatch: expected {model.input_shape}, got {x.shape[1:]}")
    out = []
    with no_grad(model):
        for s in range(0, len(x), batch_size):
            out.append(softmax_np(model.forward(Tensor(x[s:s + batch_size])).data))
    probs = np.concatenate(out, axis=0)
    return probs[0] if single else probs


# ---------------------------------------------------------------------------
# persistence: student + head, with the consult bundle nested under cue/

def save_kdl(directory: str | Path, model: KdlModel, extra: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_model(d / "student", model.student)
    save_model(d / "head", model.head)
    if model.ensemble is not None:
        save_consult(d / "cue", model.ensemble)
    desc = {"kind": "kdl", "cue_join": model.cue_join, "aided": model.ensemble is not None}
    if model.ensemble is not None:
        desc["cue_bundle_sha256"] = bundle_hash(d / "cue")
    if extra:
        desc.update(extra)
    (d / "kdl.json").write_text(json.dumps(desc, indent=1, sort_keys=True, default=str))


def load_kdl(directory: str | Path) -> KdlModel:
    d = Path(directory)
    if not (d / "kdl.json").exists():
        raise FileNotFoundError(f"{d}: not a KDL checkpoint (kdl.json missing)")
    desc = json.loads((d / "kdl.json").read_text())
    student, _ = load_model(d / "student")
    head, _ = load_model(d / "head")
    ens = None
    if desc.get("aided"):
        want = desc.get("cue_bundle_sha256")
        if want is not None and bundle_hash(d / "cue") != want:
            raise ValueError(f"{d}: cue bundle hash mismatch; the nested consult was modified")
        ens = load_consult(d / "cue")
    return KdlModel(student, head, ens, desc["cue_join"])
