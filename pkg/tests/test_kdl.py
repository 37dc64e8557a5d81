import json

import numpy as np
import pytest

from fusecad import tensor as T
from fusecad.experts import build_consult, build_expert
from fusecad.kdl import KdlModel, build_kdl, kdl_dataset, kdl_head, kdl_predict, load_kdl, save_kdl, train_kdl
from fusecad.layers import Model
from fusecad.train import Dataset, TrainConfig, train

S = 16


@pytest.fixture(scope="module")
def ensemble():
    return build_consult([build_expert(f, S, seed=i) for i, f in enumerate(("plain_shallow", "residual", "plain_deep"))],
                         seed=9)


def _images(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.random((n, 3, S, S)) * 0.3
    x[y == 1, :, 4:12, 4:12] += 0.5
    return x, y


def test_head_width(ensemble):
    m = build_kdl(ensemble, S)
    assert m.student.output_shape == (32,) and m.head.input_shape == (34,)
    assert build_kdl(None, S).head.input_shape == (32,)
    assert build_kdl(ensemble, S, cue_join="probabilities").head.input_shape == (4,)
    with pytest.raises(T.ShapeError):
        KdlModel(m.student, kdl_head(33), ensemble)
    with pytest.raises(T.ShapeError):
        build_kdl(ensemble, 24)
    with pytest.raises(ValueError):
        build_kdl(ensemble, S, cue_join="logits")


def test_gradient_flow_partition(ensemble):
    m = build_kdl(ensemble, S, seed=2)
    x, _ = _images(4, 0)
    T.backward(T.sum(m.forward(T.Tensor(x))))
    params = m.parameters()
    for k, p in params.items():
        if k.startswith("cue."):
            assert p.grad is None, k
        else:
            assert p.grad is not None and p.grad.shape == p.shape, k


def test_training_leaves_consult_byte_identical(ensemble):
    snap = ensemble.expert_snapshot() + ensemble.head.snapshot()
    x, y = _images(24, 1)
    m = build_kdl(ensemble, S, seed=3)
    hist = train_kdl(m, Dataset((x,), y), Dataset((x,), y), TrainConfig(max_epochs=3, early_stop_patience=2))
    assert ensemble.expert_snapshot() + ensemble.head.snapshot() == snap
    assert 1 <= hist.convergence_epoch <= 3


def test_zero_cue_degenerates_to_unaided(ensemble):
    """A zero cue contributes nothing forward and gets zero gradient, so Adam leaves its rows untouched."""
    x, y = _images(40, 2)
    cfg = TrainConfig(max_epochs=6, early_stop_patience=5, seed=11)
    unaided = build_kdl(None, S, seed=4)
    aided = build_kdl(ensemble, S, seed=4)
    aided.student.load_state(unaided.student.state())
    head = unaided.head.state()
    for k, v in head.items():
        if k == "0.dense.w":
            v = np.vstack([v, np.random.default_rng(0).normal(size=(2, v.shape[1]))])
        aided.head.params[k].data = v.copy()
    zero = np.zeros((len(y), 2))
    h_u = train(unaided, Dataset((x[:30],), y[:30]), Dataset((x[30:],), y[30:]), cfg)
    h_a = train(aided, Dataset((x[:30], zero[:30]), y[:30]), Dataset((x[30:], zero[30:]), y[30:]), cfg)
    assert len(h_u.train_loss) == len(h_a.train_loss)
    assert np.max(np.abs(np.array(h_u.train_loss) - h_a.train_loss)) < 1e-9
    assert np.max(np.abs(np.array(h_u.val_loss) - h_a.val_loss)) < 1e-9


def test_one_hot_oracle_cue_is_read_off_quickly(ensemble):
    rng = np.random.default_rng(5)

    def data(n):
        y = rng.integers(0, 2, n)
        return Dataset((rng.random((n, 3, S, S)), np.eye(2)[y]), y)

    tr, va = data(2048), data(128)
    m = build_kdl(ensemble, S, seed=1)
    hist = train(m, tr, va, TrainConfig(max_epochs=5, early_stop_patience=4))
    assert min(hist.val_loss) < 0.01 and max(hist.val_acc) == 1.0


def test_predict_sums_batch_loop_and_reload(ensemble, tmp_path):
    m = build_kdl(ensemble, S, seed=6)
    x, _ = _images(5, 3)
    p = kdl_predict(m, x)
    assert np.allclose(p.sum(1), 1, atol=1e-9)
    loop = np.stack([kdl_predict(m, xi) for xi in x])
    assert np.max(np.abs(p - loop)) < 1e-12
    save_kdl(tmp_path / "k", m, extra={"note": "t"})
    desc = json.loads((tmp_path / "k" / "kdl.json").read_text())
    assert desc["aided"] and len(desc["cue_bundle_sha256"]) == 64
    back = load_kdl(tmp_path / "k")
    assert np.array_equal(kdl_predict(back, x), p)
    with pytest.raises(T.ShapeError):
        kdl_predict(m, np.zeros((1, 3, 8, 8)))


def test_tampered_cue_bundle_is_rejected(ensemble, tmp_path):
    save_kdl(tmp_path / "k", build_kdl(ensemble, S))
    f = tmp_path / "k" / "cue" / "head.fct"
    raw = bytearray(f.read_bytes())
    raw[-1] ^= 1
    f.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="hash mismatch"):
        load_kdl(tmp_path / "k")
    with pytest.raises(FileNotFoundError):
        load_kdl(tmp_path / "nothing")


def test_unaided_roundtrip(tmp_path):
    m = build_kdl(None, S, seed=2)
    save_kdl(tmp_path / "u", m)
    x, _ = _images(3, 4)
    assert np.array_equal(kdl_predict(load_kdl(tmp_path / "u"), x), kdl_predict(m, x))


def test_kdl_dataset_attaches_cues(ensemble):
    x, y = _images(6, 6)
    ds = kdl_dataset(build_kdl(ensemble, S), x, y)
    assert len(ds.inputs) == 2 and ds.inputs[1].shape == (6, 2)
    assert np.allclose(ds.inputs[1].sum(1), 1)
    assert isinstance(build_kdl(None, S).student, Model)
