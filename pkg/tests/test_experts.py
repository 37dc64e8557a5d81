import math

import numpy as np
import pytest

from fusecad import tensor as T
from fusecad.experts import (FAMILIES, TrainedModel, build_consult, build_expert, bundle_hash, consult_predict,
                             finetune_expert, load_consult, pretrain_expert, proxy_textures, save_consult,
                             select_experts, train_consult)
from fusecad.layers import freezable_units
from fusecad.train import Dataset, History, TrainConfig

SIZE = 32


@pytest.fixture(scope="module")
def pretrained():
    tr, va = proxy_textures(160, SIZE, seed=1), proxy_textures(40, SIZE, seed=2)
    cfg = TrainConfig(max_epochs=8, early_stop_patience=3, seed=3, learning_rate=0.003)
    return pretrain_expert("plain_shallow", tr, va, cfg), (tr, va, cfg)


def _binary(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.random((n, 3, SIZE, SIZE)) * 0.2
    x[y == 1, :, 8:24, 8:24] += 0.6
    return Dataset((x,), y)


def _trained(model, acc, loss=0.5):
    return TrainedModel(model, History(), {"val_acc": acc, "val_loss": loss})


@pytest.mark.parametrize("family", FAMILIES)
def test_every_family_builds_and_emits_probabilities(family):
    m = build_expert(family, SIZE, seed=0)
    p = m.predict_proba(np.random.default_rng(0).random((2, 3, SIZE, SIZE)))
    assert p.shape == (2, 2) and np.allclose(p.sum(1), 1, atol=1e-12)
    assert len(freezable_units(m)) >= 3


def test_dense_variants_differ():
    a, b = build_expert("densely_connected", SIZE, variant=0), build_expert("densely_connected", SIZE, variant=1)
    assert sorted(a.params) != sorted(b.params)


def test_unknown_family():
    with pytest.raises(ValueError, match="unknown expert family"):
        build_expert("vgg", SIZE)


def test_proxy_pretraining_beats_chance_and_is_deterministic(pretrained):
    tm, (tr, va, cfg) = pretrained
    assert tm.model.output_shape == (4,)
    assert tm.meta["proxy_val_acc"] > 0.5
    again = pretrain_expert("plain_shallow", tr, va, cfg)
    assert again.model.snapshot() == tm.model.snapshot()


def test_finetune_freezes_prefix_and_swaps_head(pretrained):
    tm, _ = pretrained
    data = _binary(24, 0)
    units = freezable_units(tm.model)
    n_frozen = math.ceil(0.5 * len(units))
    cfg = TrainConfig(max_epochs=3, early_stop_patience=2, seed=1)
    ft = finetune_expert(tm, 0.5, data, data, cfg)
    assert ft.model.output_shape == (2,)
    for i, u in enumerate(units):
        for k in u.params:
            same = np.array_equal(ft.model.params[k].data, tm.model.params[k].data)
            assert ft.model.params[k].requires_grad == (i >= n_frozen)
            if i < n_frozen:
                assert same
    assert {"val_acc", "val_loss", "freeze_fraction"} <= set(ft.meta)


def test_finetune_full_freeze_changes_only_head(pretrained):
    tm, _ = pretrained
    data = _binary(16, 1)
    ft = finetune_expert(tm, 1.0, data, data, TrainConfig(max_epochs=2, early_stop_patience=1))
    body = {p for u in freezable_units(tm.model) for p in u.params} | {"0.input_norm_conv.w", "0.input_norm_conv.b"}
    for k in body:
        assert ft.model.params[k].data.tobytes() != b"" and ft.model.params[k].requires_grad is (k.startswith("0."))
        if not k.startswith("0."):
            assert np.array_equal(ft.model.params[k].data, tm.model.params[k].data)


def test_consult_width_and_errors():
    ms = [build_expert("plain_shallow", SIZE, seed=s) for s in range(3)]
    ens = build_consult(ms)
    assert ens.head.input_shape == (6,)
    assert all(not p.requires_grad for e in ens.experts for p in e.params.values())
    with pytest.raises(ValueError):
        build_consult(ms[:1])
    with pytest.raises(T.ShapeError):
        build_consult([ms[0], build_expert("plain_shallow", 40)])
    seven = [build_expert(f, SIZE) for f in FAMILIES] + [build_expert("densely_connected", SIZE, variant=1)]
    assert build_consult(seven).head.input_shape == (14,)


def test_train_consult_touches_head_only_and_batch_equals_loop():
    ms = [build_expert(f, SIZE, seed=i) for i, f in enumerate(("plain_shallow", "residual", "multi_branch"))]
    ens = build_consult(ms, seed=2)
    data = _binary(20, 3)
    snap = ens.expert_snapshot()
    train_consult(ens, data, data, TrainConfig(max_epochs=10, early_stop_patience=9))
    assert ens.expert_snapshot() == snap
    assert set(ens.parameters(trainable_only=True)) == {f"head.{k}" for k in ens.head.params}
    batch = consult_predict(ens, data.inputs[0][:5])
    loop = np.stack([consult_predict(ens, x) for x in data.inputs[0][:5]])
    assert np.allclose(batch.sum(1), 1, atol=1e-9)
    # BLAS summation order depends on batch size, so bitwise equality is not guaranteed
    assert np.max(np.abs(batch - loop)) < 1e-12
    hwc = data.inputs[0][0].transpose(1, 2, 0)
    assert np.max(np.abs(consult_predict(ens, hwc) - batch[0])) < 1e-12
    with pytest.raises(T.ShapeError):
        consult_predict(ens, np.zeros((1, 3, 8, 8)))


def test_head_only_gradients_during_forward_backward():
    ens = build_consult([build_expert("plain_shallow", SIZE, seed=s) for s in range(2)])
    out = ens.forward(T.Tensor(np.random.default_rng(0).random((2, 3, SIZE, SIZE))))
    T.backward(T.sum(out))
    grads = {k for k, p in ens.parameters().items() if p.grad is not None}
    assert grads and all(k.startswith("head.") for k in grads)


def test_degenerate_constant_experts_learn_majority():
    ms = [build_expert("plain_shallow", SIZE, seed=s) for s in range(3)]
    for m in ms:
        for k, p in m.params.items():
            p.data = np.zeros_like(p.data)  # every expert outputs (0.5, 0.5)
    ens = build_consult(ms, seed=4)
    rng = np.random.default_rng(5)
    y = (rng.random(40) < 0.9).astype(int)  # malignant majority even after the 0.2 weighting
    data = Dataset((rng.random((40, 3, SIZE, SIZE)),), y)
    train_consult(ens, data, data, TrainConfig(max_epochs=200, early_stop_patience=20, learning_rate=0.01))
    pred = consult_predict(ens, data.inputs[0]).argmax(1)
    assert np.all(pred == 1)


def test_identical_experts_permutation_symmetry():
    base = build_expert("plain_shallow", SIZE, seed=7)
    twin = build_expert("plain_shallow", SIZE, seed=7)
    other = build_expert("residual", SIZE, seed=8)
    a = build_consult([base, twin, other], seed=1)
    b = build_consult([twin, base, other], seed=1)
    x = np.random.default_rng(1).random((3, 3, SIZE, SIZE))
    assert np.array_equal(consult_predict(a, x), consult_predict(b, x))


def test_select_experts_ranking():
    ms = [build_expert("plain_shallow", SIZE, seed=s) for s in range(4)]
    cands = [_trained(ms[0], 0.7), _trained(ms[1], 0.9, 0.4), _trained(ms[2], 0.9, 0.3), _trained(ms[3], 0.8)]
    assert select_experts(cands, 3) == [cands[2], cands[1], cands[3]]
    with pytest.raises(ValueError):
        select_experts(cands, 5)


def test_consult_save_load_roundtrip(tmp_path):
    ens = build_consult([build_expert("plain_shallow", SIZE, seed=s) for s in range(2)], seed=3)
    ens.info = {"patients": ["P1"]}
    save_consult(tmp_path / "b", ens)
    back = load_consult(tmp_path / "b")
    x = np.random.default_rng(2).random((2, 3, SIZE, SIZE))
    assert np.array_equal(consult_predict(back, x), consult_predict(ens, x))
    assert back.info == {"patients": ["P1"]}
    save_consult(tmp_path / "c", ens)
    assert bundle_hash(tmp_path / "b") == bundle_hash(tmp_path / "c")
    with pytest.raises(FileNotFoundError):
        load_consult(tmp_path / "missing")
