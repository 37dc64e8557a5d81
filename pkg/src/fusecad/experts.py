"""Toy expert topologies, proxy pretraining, fine-tuning and the stacking consult."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers as L
from . import tensor as T
from .layers import Model, freeze, freeze_all, swap_head
from .tensor import Tensor
from .train import Dataset, History, TrainConfig, evaluate_loss, no_grad, softmax_np, train

FAMILIES = ("plain_shallow", "plain_deep", "residual", "grouped_residual", "multi_branch", "densely_connected")

HEAD_SIZES = (32, 16)


def expert_specs(family: str, variant: int = 0, classes: int = 2) -> list[L.LayerSpec]:
    """Layer list for one expert family; ``variant`` 1 gives the second dense-net implementation."""
    head = [L.dense(classes, role="head"), L.softmax()]
    norm = [L.input_norm_conv(8)]
    # every family starts with a stride-4 stem so 3x3 work happens at 16x16 and below
    if family == "plain_shallow":
        body = [L.max_pool(2), L.conv2d(16, 5, stride=2), L.relu(), L.max_pool(),
                L.conv2d(32, 3), L.relu(), L.max_pool(),
                L.conv2d(32, 3), L.relu(), L.global_avg_pool(),
                L.dense(32), L.relu()]
    elif family == "plain_deep":
        body = [L.max_pool(4),
                L.conv2d(16), L.relu(), L.conv2d(16), L.relu(), L.max_pool(),
                L.conv2d(32), L.relu(), L.conv2d(32), L.relu(), L.max_pool(),
                L.conv2d(32), L.relu(), L.conv2d(32), L.relu(), L.global_avg_pool()]
    elif family == "residual":
        body = [L.max_pool(2), L.conv2d(16, 3, stride=2), L.relu(),
                L.residual(16), L.residual(32, stride=2), L.residual(32), L.global_avg_pool()]
    elif family == "grouped_residual":
        body = [L.max_pool(2), L.conv2d(16, 3, stride=2), L.relu(),
                L.residual(32, groups=4, bottleneck=16),
                L.residual(32, stride=2, groups=4, bottleneck=16),
                L.residual(32, groups=4, bottleneck=16), L.global_avg_pool()]
    elif family == "multi_branch":
        body = [L.max_pool(2), L.conv2d(16, 3, stride=2), L.relu(),
                L.inception(8, 8, 16, 4, 8), L.max_pool(),
                L.inception(16, 12, 24, 4, 8), L.global_avg_pool()]
    elif family == "densely_connected":
        k, g = ((4, 8), (3, 12))[variant]
        body = [L.max_pool(2), L.conv2d(16, 3, stride=2), L.relu(),
                L.dense_block(k, g), L.conv2d(24, 1), L.relu(), L.avg_pool(),
                L.dense_block(k, g), L.global_avg_pool()]
    else:
        raise ValueError(f"unknown expert family {family!r}; expected one of {FAMILIES}")
    return norm + body + head


def build_expert(family: str, size: int = 64, seed: int = 0, variant: int = 0, classes: int = 2) -> Model:
    return Model(expert_specs(family, variant, classes), (3, size, size), seed)


@dataclass
class TrainedModel:
    model: Model
    history: History
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# proxy task

PROXY_CLASSES = ("stripes", "blobs", "checker", "speckle")


def proxy_textures(count: int, size: int = 64, seed: int = 0) -> Dataset:
    """Balanced 4-class procedural texture set, grayscale replicated to 3 channels."""
    rng = np.random.default_rng([seed, 0x7E47])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    xs, ys = [], []
    for i in range(count):
        cls = i % 4
        th = rng.uniform(0, np.pi)
        u = xx * np.cos(th) + yy * np.sin(th)
        v = -xx * np.sin(th) + yy * np.cos(th)
        if cls == 0:
            img = np.sin(2 * np.pi * rng.uniform(0.06, 0.2) * u + rng.uniform(0, 2 * np.pi))
        elif cls == 1:
            img = np.zeros((size, size))
            for _ in range(int(rng.integers(3, 9))):
                cy, cx = rng.uniform(0, size, 2)
                r = rng.uniform(3, 9)
                img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        elif cls == 2:
            per = rng.uniform(5, 12)
            img = np.sign(np.sin(np.pi * u / per) * np.sin(np.pi * v / per))
        else:
            img = rng.standard_normal((size, size))
            img = (img + np.roll(img, 1, 0) + np.roll(img, 1, 1)) / 3
        img = (img - img.min()) / (np.ptp(img) + 1e-12)
        img = np.clip(img * rng.uniform(0.6, 1.0) + rng.uniform(0, 0.3) + rng.normal(0, 0.12, img.shape), 0, 1)
        xs.append(np.repeat(img[None], 3, axis=0))
        ys.append(cls)
    return Dataset((np.stack(xs),), np.array(ys))


def pretrain_expert(family: str, proxy_train: Dataset, proxy_val: Dataset, config: TrainConfig,
                    variant: int = 0) -> TrainedModel:
    """Train a 4-class expert on the proxy textures; the body becomes the prior knowledge."""
    size = proxy_train.inputs[0].shape[-1]
    model = build_expert(family, size, config.seed, variant, classes=len(PROXY_CLASSES))
    hist = train(model, proxy_train, proxy_val, config, multiclass=True)
    _, acc, _ = evaluate_loss(model, proxy_val, config.class_weights, multiclass=True)
    return TrainedModel(model, hist, {"family": family, "variant": variant, "proxy_val_acc": acc})


def finetune_expert(pretrained: TrainedModel, freeze_fraction: float, train_set: Dataset,
                    val_set: Dataset, config: TrainConfig) -> TrainedModel:
    """Resize the head to 2 units, freeze the body prefix, and train on the target data."""
    model = swap_head(pretrained.model, 2, config.seed)
    for p in model.params.values():
        p.requires_grad = True
    freeze(model, freeze_fraction)
    hist = train(model, train_set, val_set, config)
    val_loss, val_acc, _ = evaluate_loss(model, val_set, config.class_weights)
    meta = dict(pretrained.meta, freeze_fraction=freeze_fraction, val_acc=val_acc, val_loss=val_loss)
    meta.pop("proxy_val_acc", None)
    return TrainedModel(model, hist, meta)


def select_experts(candidates: Sequence[TrainedModel], n: int) -> list[TrainedModel]:
    """Top-n candidates by validation accuracy (ties: lower validation loss, then given order)."""
    ranked = sorted(range(len(candidates)),
                    key=lambda i: (-candidates[i].meta["val_acc"], candidates[i].meta["val_loss"], i))
    if n > len(ranked):
        raise ValueError(f"requested {n} experts but only {len(ranked)} candidates")
    return [candidates[i] for i in ranked[:n]]


# ---------------------------------------------------------------------------
# consult

def stacking_head(n_inputs: int, sizes=HEAD_SIZES, seed: int = 0) -> Model:
    specs = [L.dense(sizes[0], role="head"), L.relu(), L.dense(sizes[1], role="head"), L.relu(),
             L.dense(2, role="head"), L.softmax()]
    return Model(specs, (n_inputs,), seed)


class ConsultEnsemble:
    """n frozen experts whose probability pairs feed a 3-layer trainable stacking head."""

    def __init__(self, experts: Sequence[Model], head: Model, meta: list[dict] | None = None,
                 info: dict | None = None):
        self.experts = list(experts)
        self.head = head
        self.meta = meta or [{} for _ in self.experts]
        # provenance (e.g. the fitting manifest's patients, for leakage refusal)
        self.info = dict(info or {})
        for e in self.experts:
            freeze_all(e)

    @property
    def n(self) -> int:
        return len(self.experts)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.experts[0].input_shape

    def parameters(self, trainable_only: bool = False) -> dict[str, Tensor]:
        out = {}
        for i, e in enumerate(self.experts):
            out.update({f"expert{i}.{k}": p for k, p in e.params.items()})
        out.update({f"head.{k}": p for k, p in self.head.params.items()})
        if trainable_only:
            out = {k: p for k, p in out.items() if p.requires_grad}
        return out

    def expert_features(self, x, tap=None) -> Tensor:
        """Concatenated expert probabilities, detached from the experts."""
        probs = []
        for i, e in enumerate(self.experts):
            sub = None if tap is None else (lambda name, t, i=i: tap(f"e{i}.{name}", t))
            probs.append(T.softmax(e.forward(x, tap=sub)))
        return T.stop_gradient(T.concat(probs, axis=1)) if tap is None else T.concat(probs, axis=1)

    def forward(self, x, tap=None) -> Tensor:
        return self.head.forward(self.expert_features(x, tap))

    def expert_probabilities(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        with no_grad(self):
            for s in range(0, len(x), batch_size):
                out.append(self.expert_features(Tensor(x[s:s + batch_size])).data)
        return np.concatenate(out, axis=0)

    def expert_snapshot(self) -> bytes:
        return b"".join(e.snapshot() for e in self.experts)


def build_consult(experts: Sequence[TrainedModel | Model], head_sizes=HEAD_SIZES, seed: int = 0) -> ConsultEnsemble:
    if len(experts) < 2:
        raise ValueError(f"a consult needs at least 2 experts, got {len(experts)}")
    models = [e.model if isinstance(e, TrainedModel) else e for e in experts]
    shape = models[0].input_shape
    for m in models[1:]:
        if m.input_shape != shape:
            raise T.ShapeError(f"expert input-shape mismatch: {m.input_shape} vs {shape}")
    for m in models:
        if m.output_shape != (2,):
            raise T.ShapeError(f"experts must emit 2 classes, got output shape {m.output_shape}")
    meta = [dict(e.meta, rank=r) if isinstance(e, TrainedModel) else {"rank": r} for r, e in enumerate(experts)]
    return ConsultEnsemble(models, stacking_head(2 * len(models), head_sizes, seed), meta)


def train_consult(ensemble: ConsultEnsemble, train_set: Dataset, val_set: Dataset,
                  config: TrainConfig) -> History:
    """Fit only the stacking head; expert outputs are computed once since experts are frozen."""
    ftr = Dataset((ensemble.expert_probabilities(train_set.inputs[0]),), train_set.labels)
    fva = Dataset((ensemble.expert_probabilities(val_set.inputs[0]),), val_set.labels)
    return train(ensemble.head, ftr, fva, config)


def consult_predict(ensemble: ConsultEnsemble, x) -> np.ndarray:
    """Probability pairs for one (c, h, w) / (h, w, 3) input or a batch (m, c, h, w)."""
    if hasattr(x, "data") and not isinstance(x, np.ndarray):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        if x.shape[-1] == 3 and x.shape[0] != 3:
            x = x.transpose(2, 0, 1)
        x = x[None]
    if x.shape[1:] != ensemble.input_shape:
        raise T.ShapeError(f"consult input shape mismatch: expected {ensemble.input_shape}, got {x.shape[1:]}")
    feats = ensemble.expert_probabilities(x)
    probs = softmax_np(ensemble.head._const_forward(feats).data)
    return probs[0] if single else probs


# ---------------------------------------------------------------------------
# persistence

def save_model(path_stem: str | Path, model: Model, extra: dict | None = None) -> None:
    path_stem = Path(path_stem)
    T.save_tensors(path_stem.with_suffix(".fct"), {k: model.params[k] for k in sorted(model.params)})
    desc = model.describe()
    if extra:
        desc.update(extra)
    path_stem.with_suffix(".json").write_text(json.dumps(desc, indent=1, sort_keys=True))


def load_model(path_stem: str | Path) -> tuple[Model, dict]:
    path_stem = Path(path_stem)
    desc = json.loads(path_stem.with_suffix(".json").read_text())
    model = Model.from_description(desc)
    model.load_state(T.load_tensors(path_stem.with_suffix(".fct")))
    return model, desc


def save_consult(directory: str | Path, ensemble: ConsultEnsemble, extra: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, e in enumerate(ensemble.experts):
        save_model(d / f"expert{i}", e)
    save_model(d / "head", ensemble.head)
    desc = {"n": ensemble.n, "experts": ensemble.meta, "info": ensemble.info}
    if extra:
        desc.update(extra)
    (d / "consult.json").write_text(json.dumps(desc, indent=1, sort_keys=True, default=str))


def load_consult(directory: str | Path) -> ConsultEnsemble:
    d = Path(directory)
    if not (d / "consult.json").exists():
        raise FileNotFoundError(f"{d}: not a consult bundle (consult.json missing)")
    desc = json.loads((d / "consult.json").read_text())
    experts = [load_model(d / f"expert{i}")[0] for i in range(desc["n"])]
    head, _ = load_model(d / "head")
    return ConsultEnsemble(experts, head, desc["experts"], desc.get("info"))


def bundle_hash(directory: str | Path) -> str:
    import hashlib

    h = hashlib.sha256()
    for f in sorted(Path(directory).rglob("*")):
        if f.is_file():
            h.update(f.relative_to(directory).as_posix().encode())
            h.update(f.read_bytes())
    return h.hexdigest()
