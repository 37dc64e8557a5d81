"""Layer specs and the sequential model graph built from them.

A model is an ordered list of :class:`LayerSpec`.  Composite kinds
(``dense_block``, ``residual``, ``inception``) own several convolutions; each
convolution or dense map counts as one parameterized layer for freezing.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

ROLES = ("input", "body", "head")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    opts: dict = field(default_factory=dict)
    role: str = "body"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], dict(d.get("opts", {})), d.get("role", "body"))


# spec constructors ---------------------------------------------------------

def conv2d(out_channels, kernel=3, stride=1, padding=None, groups=1, role="body"):
    pad = kernel // 2 if padding is None else padding
    return LayerSpec("conv2d", dict(out_channels=out_channels, kernel=kernel, stride=stride,
                                    padding=pad, groups=groups), role)


def input_norm_conv(out_channels):
    return LayerSpec("input_norm_conv", dict(out_channels=out_channels), "input")


def dense(units, role="body"):
    return LayerSpec("dense", dict(units=units), role)


def relu():
    return LayerSpec("relu")


def softmax():
    return LayerSpec("softmax", role="head")


def global_avg_pool():
    return LayerSpec("global_avg_pool")


def max_pool(size=2):
    return LayerSpec("max_pool", dict(size=size))


def avg_pool(size=2):
    return LayerSpec("avg_pool", dict(size=size))


def flatten():
    return LayerSpec("flatten")


def dense_block(layers=4, growth=8):
    return LayerSpec("dense_block", dict(layers=layers, growth=growth))


def residual(out_channels, stride=1, groups=1, bottleneck=None):
    return LayerSpec("residual", dict(out_channels=out_channels, stride=stride, groups=groups,
                                      bottleneck=bottleneck))


def inception(b1, b3_reduce, b3, b5_reduce, b5):
    return LayerSpec("inception", dict(b1=b1, b3_reduce=b3_reduce, b3=b3, b5_reduce=b5_reduce, b5=b5))


# parameter init ------------------------------------------------------------

def _rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def he_normal(seed: int, name: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return _rng(seed, name).standard_normal(shape) * math.sqrt(2.0 / fan_in)


@dataclass
class Unit:
    """One parameterized layer: a weight and a bias."""

    name: str
    role: str
    params: list[str]


class _Builder:
    """Shape inference and parameter creation while walking the specs."""

    def __init__(self, seed: int):
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.units: list[Unit] = []

    def conv(self, name, role, cin, cout, k, groups=1):
        w = he_normal(self.seed, name + ".w", (cout, cin // groups, k, k), cin // groups * k * k)
        self.params[name + ".w"] = Tensor(w, requires_grad=True, name=name + ".w")
        self.params[name + ".b"] = Tensor(np.zeros(cout), requires_grad=True, name=name + ".b")
        self.units.append(Unit(name, role, [name + ".w", name + ".b"]))

    def dense(self, name, role, fin, fout):
        w = he_normal(self.seed, name + ".w", (fin, fout), fin)
        self.params[name + ".w"] = Tensor(w, requires_grad=True, name=name + ".w")
        self.params[name + ".b"] = Tensor(np.zeros(fout), requires_grad=True, name=name + ".b")
        self.units.append(Unit(name, role, [name + ".w", name + ".b"]))


def _conv(p, name, x, stride=1, padding=0, groups=1):
    return T.conv2d(x, p[name + ".w"], p[name + ".b"], stride, padding, groups)


def _dense(p, name, x):
    return T.bias_add(T.matmul(x, p[name + ".w"]), p[name + ".b"])


def _build_layer(b: _Builder, idx: int, spec: LayerSpec, shape: tuple) -> tuple[Callable, tuple]:
    """Create parameters for one spec; return its forward fn and output shape."""
    k, o, role = spec.kind, spec.opts, spec.role
    pre = f"{idx}.{k}"
    if k in ("conv2d", "input_norm_conv"):
        c, h, w = shape
        ker = o.get("kernel", 1) if k == "conv2d" else 1
        stride = o.get("stride", 1) if k == "conv2d" else 1
        pad = o.get("padding", 0) if k == "conv2d" else 0
        groups = o.get("groups", 1) if k == "conv2d" else 1
        cout = o["out_channels"]
        b.conv(pre, role, c, cout, ker, groups)
        ho, wo = (h + 2 * pad - ker) // stride + 1, (w + 2 * pad - ker) // stride + 1
        return (lambda p, x: _conv(p, pre, x, stride, pad, groups)), (cout, ho, wo)
    if k == "dense":
        if len(shape) != 1:
            raise T.ShapeError(f"dense layer {idx} needs a flat input, got {shape}")
        b.dense(pre, role, shape[0], o["units"])
        return (lambda p, x: _dense(p, pre, x)), (o["units"],)
    if k == "relu":
        return (lambda p, x: T.relu(x)), shape
    if k == "softmax":
        return (lambda p, x: T.softmax(x)), shape
    if k == "global_avg_pool":
        return (lambda p, x: T.global_avg_pool(x)), (shape[0],)
    if k in ("max_pool", "avg_pool"):
        s = o.get("size", 2)
        fn = T.max_pool2d if k == "max_pool" else T.avg_pool2d
        return (lambda p, x: fn(x, s)), (shape[0], shape[1] // s, shape[2] // s)
    if k == "flatten":
        flat = int(np.prod(shape))
        return (lambda p, x: T.reshape(x, (x.shape[0], flat))), (flat,)
    if k == "dense_block":
        c, h, w = shape
        n_inner, g = o["layers"], o["growth"]
        names = []
        for j in range(n_inner):
            nm = f"{pre}.{j}"
            b.conv(nm, role, c + j * g, g, 3)
            names.append(nm)

        def fwd(p, x):
            feats = x
            for nm in names:
                new = T.relu(_conv(p, nm, feats, 1, 1))
                feats = T.concat([feats, new], axis=1)
            return feats

        return fwd, (c + n_inner * g, h, w)
    if k == "residual":
        c, h, w = shape
        cout, stride, groups = o["out_channels"], o.get("stride", 1), o.get("groups", 1)
        mid = o.get("bottleneck")
        if mid:
            b.conv(pre + ".a", role, c, mid, 1)
            b.conv(pre + ".b", role, mid, mid, 3, groups)
            b.conv(pre + ".c", role, mid, cout, 1)
        else:
            b.conv(pre + ".a", role, c, cout, 3, groups)
            b.conv(pre + ".b", role, cout, cout, 3, groups)
        project = stride != 1 or c != cout
        if project:
            b.conv(pre + ".proj", role, c, cout, 1)

        def fwd(p, x):
            if mid:
                y = T.relu(_conv(p, pre + ".a", x))
                y = T.relu(_conv(p, pre + ".b", y, stride, 1, groups))
                y = _conv(p, pre + ".c", y)
            else:
                y = T.relu(_conv(p, pre + ".a", x, stride, 1, groups))
                y = _conv(p, pre + ".b", y, 1, 1, groups)
            sc = _conv(p, pre + ".proj", x, stride, 0) if project else x
            return T.relu(T.add(y, sc))

        ho, wo = (h + 2 - 3) // stride + 1, (w + 2 - 3) // stride + 1
        return fwd, (cout, ho, wo)
    if k == "inception":
        c, h, w = shape
        b.conv(pre + ".b1", role, c, o["b1"], 1)
        b.conv(pre + ".b3r", role, c, o["b3_reduce"], 1)
        b.conv(pre + ".b3", role, o["b3_reduce"], o["b3"], 3)
        b.conv(pre + ".b5r", role, c, o["b5_reduce"], 1)
        b.conv(pre + ".b5", role, o["b5_reduce"], o["b5"], 5)

        def fwd(p, x):
            y1 = T.relu(_conv(p, pre + ".b1", x))
            y3 = T.relu(_conv(p, pre + ".b3", T.relu(_conv(p, pre + ".b3r", x)), 1, 1))
            y5 = T.relu(_conv(p, pre + ".b5", T.relu(_conv(p, pre + ".b5r", x)), 1, 2))
            return T.concat([y1, y3, y5], axis=1)

        return fwd, (o["b1"] + o["b3"] + o["b5"], h, w)
    raise ValueError(f"unknown layer kind {k!r}")


SPATIAL_KINDS = {"conv2d", "input_norm_conv", "dense_block", "residual", "inception", "max_pool", "avg_pool"}


class Tap:
    """Detaches one named layer output into a gradient-tracking leaf (used by Grad-CAM)."""

    def __init__(self, name: str):
        self.name = name
        self.tensor: Tensor | None = None

    def __call__(self, name: str, t: Tensor) -> Tensor:
        if name != self.name:
            return t
        leaf = Tensor(t.data, requires_grad=True, name=name)
        self.tensor = leaf
        return leaf


class Model:
    """A sequential network with named parameters and a per-parameter trainable flag.

    ``forward`` returns logits: a trailing softmax spec is applied only by
    :meth:`predict_proba`.  ``trainable`` is carried by each parameter's
    ``requires_grad``.
    """

    def __init__(self, specs: list[LayerSpec], input_shape: tuple[int, ...], seed: int = 0):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.freeze_fraction = 0.0
        b = _Builder(seed)
        self._fns = []
        self.shapes = []
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            fn, shape = _build_layer(b, i, spec, shape)
            self._fns.append(fn)
            self.shapes.append(shape)
        self.params: dict[str, Tensor] = b.params
        self.units: list[Unit] = b.units
        self.output_shape = shape

    # structure --------------------------------------------------------------
    def layer_name(self, i: int) -> str:
        return f"{i}.{self.specs[i].kind}"

    def spatial_layers(self) -> list[str]:
        return [self.layer_name(i) for i, s in enumerate(self.specs)
                if s.kind in SPATIAL_KINDS and len(self.shapes[i]) == 3]

    def default_cam_layer(self) -> str:
        """Last dense block if any, else the last spatial layer with learnable filters."""
        for i in range(len(self.specs) - 1, -1, -1):
            if self.specs[i].kind == "dense_block":
                return self.layer_name(i)
        for i in range(len(self.specs) - 1, -1, -1):
            if self.specs[i].kind in ("conv2d", "residual", "inception") and len(self.shapes[i]) == 3:
                return self.layer_name(i)
        raise ValueError("model has no spatial layer")

    @property
    def trainable_mask(self) -> dict[str, bool]:
        return {k: p.requires_grad for k, p in self.params.items()}

    def parameters(self, trainable_only: bool = False) -> dict[str, Tensor]:
        if trainable_only:
            return {k: p for k, p in self.params.items() if p.requires_grad}
        return dict(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # compute ------------------------------------------------------------------
    def forward(self, x, tap: Callable | None = None) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[1:] != self.input_shape:
            raise T.ShapeError(f"model input shape mismatch: expected (n, {self.input_shape}), got {x.shape}")
        last = len(self.specs) - 1
        for i, fn in enumerate(self._fns):
            if i == last and self.specs[i].kind == "softmax":
                break
            x = fn(self.params, x)
            if tap is not None:
                x = tap(self.layer_name(i), x)
        return x

    __call__ = forward

    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        for s in range(0, len(x), batch_size):
            out.append(T.softmax(self._const_forward(x[s:s + batch_size])).data)
        return np.concatenate(out, axis=0)

    def _const_forward(self, x: np.ndarray) -> Tensor:
        # evaluation without building a graph
        saved = {k: p.requires_grad for k, p in self.params.items()}
        try:
            for p in self.params.values():
                p.requires_grad = False
            return self.forward(Tensor(x))
        finally:
            for k, p in self.params.items():
                p.requires_grad = saved[k]

    # state --------------------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k!r} in state")
            if state[k].shape != p.shape:
                raise T.ShapeError(f"parameter {k}: shape mismatch {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def snapshot(self, names=None) -> bytes:
        keys = sorted(self.params) if names is None else sorted(names)
        return T.tensors_bytes((k, self.params[k].data) for k in keys)

    def describe(self) -> dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "seed": self.seed,
            "freeze_fraction": self.freeze_fraction,
            "layers": [s.to_dict() for s in self.specs],
            "trainable": {k: v for k, v in sorted(self.trainable_mask.items())},
        }

    @classmethod
    def from_description(cls, d: dict) -> "Model":
        m = cls([LayerSpec.from_dict(s) for s in d["layers"]], tuple(d["input_shape"]), d.get("seed", 0))
        m.freeze_fraction = d.get("freeze_fraction", 0.0)
        for k, flag in d.get("trainable", {}).items():
            m.params[k].requires_grad = bool(flag)
        return m


def freezable_units(model: Model) -> list[Unit]:
    return [u for u in model.units if u.role == "body"]


def freeze(model: Model, fraction: float) -> Model:
    """Mark the first ceil(fraction * L) body layers non-trainable, everything else trainable.

    L counts parameterized body layers in definition order; ``input`` and
    ``head`` roles are never frozen.  Idempotent.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"freeze fraction must be in [0, 1], got {fraction}")
    units = freezable_units(model)
    n_frozen = math.ceil(fraction * len(units) - 1e-9)
    frozen = {p for u in units[:n_frozen] for p in u.params}
    for k, p in model.params.items():
        p.requires_grad = k not in frozen
        if not p.requires_grad:
            p.grad = None
    model.freeze_fraction = fraction
    return model


def freeze_all(model: Model) -> Model:
    for p in model.params.values():
        p.requires_grad = False
        p.grad = None
    return model


def swap_head(model: Model, units: int, seed: int) -> Model:
    """Rebuild the model with its last dense layer resized to ``units`` (fresh init).

    All other parameters and trainable flags carry over.
    """
    specs = list(model.specs)
    last_dense = max(i for i, s in enumerate(specs) if s.kind == "dense")
    specs[last_dense] = dense(units, role="head")
    new = Model(specs, model.input_shape, seed)
    head_prefix = f"{last_dense}.dense"
    for k, p in model.params.items():
        if k.startswith(head_prefix + "."):
            continue
        new.params[k].data = p.data.copy()
        new.params[k].requires_grad = p.requires_grad
    new.freeze_fraction = model.freeze_fraction
    return new
