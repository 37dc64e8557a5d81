"""Small random networks and a whole-model finite-difference check, shared by unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from fusecad import layers as L
from fusecad import tensor as T
from fusecad.layers import Model
from oracles import central_differences, relative_error


def random_network(rng: np.random.Generator, seed: int) -> tuple[Model, np.ndarray]:
    """A tiny model on a 1- or 3-channel 8x8 input; every layer kind appears across a handful of draws."""
    cin = int(rng.choice([1, 3]))
    c = int(rng.choice([2, 4]))
    specs = [L.input_norm_conv(c)] if rng.random() < 0.5 else [L.conv2d(c, kernel=3)]
    specs.append(L.relu())
    body = rng.choice(["dense_block", "residual", "residual_bottleneck", "inception", "grouped"])
    if body == "dense_block":
        specs.append(L.dense_block(layers=2, growth=2))
    elif body == "residual":
        specs.append(L.residual(c + 2, stride=2))
    elif body == "residual_bottleneck":
        specs.append(L.residual(c, bottleneck=2))
    elif body == "inception":
        specs.append(L.inception(1, 2, 2, 1, 2))
    else:
        specs += [L.conv2d(c, kernel=3, groups=2), L.relu()]
    specs.append(L.max_pool(2) if rng.random() < 0.5 else L.avg_pool(2))
    if rng.random() < 0.5:
        specs += [L.global_avg_pool()]
    else:
        specs += [L.flatten(), L.dense(5), L.relu()]
    specs += [L.dense(2, role="head"), L.softmax()]
    model = Model(specs, (cin, 8, 8), seed)
    # zero biases put exact zeros of a post-relu map on the next relu's kink, where
    # finite differences are meaningless; random biases keep the check away from it
    for k, p in model.params.items():
        if k.endswith(".b"):
            p.data = rng.normal(0, 0.1, p.shape)
    x = rng.normal(size=(2, cin, 8, 8))
    return model, x


def model_gradcheck(model: Model, x: np.ndarray, seed: int = 0, softmax: bool = False,
                    retry_above: float = 1e-5) -> dict[str, float]:
    """Worst elementwise relative error per trainable parameter for sum(out * r).

    ``out`` is the logits, or the trailing softmax of them when ``softmax`` is set.
    """
    r = np.random.default_rng(seed).normal(size=(x.shape[0],) + model.output_shape)

    def fwd():
        out = model.forward(T.Tensor(x))
        return T.softmax(out) if softmax else out

    def f():
        return float((fwd().data * r).sum())

    model.zero_grad()
    out = fwd()
    T.backward(out, r)
    params = model.parameters(trainable_only=True)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    saved = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        numeric = central_differences(f, [p.data for p in params.values()])
        errs = {k: relative_error(analytic[k], n) for k, n in zip(params, numeric)}
        # a relu/max-pool decision within eps of flipping spoils the quotient (needs a smaller
        # step) and tiny entries drown in round-off (needs a larger one); a wrong analytic
        # gradient stays wrong at every step
        for k in [k for k, e in errs.items() if e > retry_above]:
            for eps in (1e-7, 1e-5):
                again = central_differences(f, [params[k].data], eps=eps)[0]
                errs[k] = min(errs[k], relative_error(analytic[k], again))
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]
    return errs


def layer_kinds(model: Model) -> set[str]:
    kinds = {s.kind for s in model.specs}
    for s in model.specs:
        if s.kind == "residual" and s.opts.get("bottleneck"):
            kinds.add("residual_bottleneck")
        if s.kind == "conv2d" and s.opts.get("groups", 1) > 1:
            kinds.add("grouped_conv")
    return kinds
