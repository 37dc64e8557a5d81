import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fusecad import tensor as T
from fusecad.tensor import GraphError, ShapeError, Tensor
from oracles import central_differences, relative_error

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def naive_conv(x, w, b, stride, pad, groups):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    og = o // groups
    for i in range(n):
        for k in range(o):
            g = k // og
            for r in range(ho):
                for q in range(wo):
                    patch = xp[i, g * cg:(g + 1) * cg, r * stride:r * stride + kh, q * stride:q * stride + kw]
                    out[i, k, r, q] = (patch * w[k]).sum() + (b[k] if b is not None else 0)
    return out


# -- forward examples ---------------------------------------------------------

def test_identity_matmul():
    assert T.matmul(Tensor([[1.0]]), Tensor([[5.0]])).data.tolist() == [[5.0]]


def test_relu_values():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_softmax_symmetric():
    assert T.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_no_broadcast_outside_bias_add():
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    out = T.bias_add(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0]))
    assert out.data.tolist() == [[1, 2, 3], [1, 2, 3]]


# -- backward examples ----------------------------------------------------------

def test_square_derivative():
    x = leaf([3.0])
    T.mul(x, x).backward()
    assert x.grad.tolist() == [6.0]


def test_sum_grad_all_ones(rng):
    x = leaf(rng.normal(size=(3, 4)))
    T.sum(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_errors():
    with pytest.raises(GraphError):
        T.backward(Tensor([1.0]))  # no graph recorded
    x = leaf([1.0, 2.0])
    y = T.scale(x, 2.0)
    with pytest.raises(ShapeError):
        T.backward(y, np.ones(3))
    T.backward(y, np.ones(2))
    with pytest.raises(GraphError):
        T.backward(y, np.ones(2))


def test_non_grad_tensors_get_no_grad(rng):
    x = Tensor(rng.normal(size=(2, 2)))
    w = leaf(rng.normal(size=(2, 2)))
    T.sum(T.matmul(x, w)).backward()
    assert x.grad is None and w.grad is not None


def test_gradients_accumulate_across_uses():
    x = leaf([2.0])
    T.add(x, x).backward()
    assert x.grad.tolist() == [2.0]
    T.scale(x, 3.0).backward()
    assert x.grad.tolist() == [5.0]


def test_stop_gradient():
    x = leaf([1.0, 2.0])
    w = leaf([3.0, 4.0])
    s = T.stop_gradient(x)
    assert s.data.tolist() == [1.0, 2.0]
    T.sum(T.mul(s, w)).backward()
    assert x.grad is None
    assert w.grad.tolist() == [1.0, 2.0]


# -- finite-difference checks per op -----------------------------------------------

def _check(f, leaves, tol=1e-5):
    out = f()
    seed = np.random.default_rng(0).normal(size=out.shape)
    T.backward(out, seed)
    numeric = central_differences(lambda: float((f().data * seed).sum()), [p.data for p in leaves])
    for p, g in zip(leaves, numeric):
        assert relative_error(p.grad, g) < tol, p.name


@pytest.mark.parametrize("op", ["add", "mul", "scale", "matmul", "relu", "log", "softmax", "sum",
                                "reshape", "concat", "bias_add"])
def test_elementwise_ops_gradcheck(op, rng):
    a = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
    b = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
    c = leaf(rng.normal(size=4))
    a.data[0, 0] = -0.7  # exercise the relu kink side
    fns = {
        "add": (lambda: T.add(a, b), [a, b]),
        "mul": (lambda: T.mul(a, b), [a, b]),
        "scale": (lambda: T.scale(a, -1.5), [a]),
        "matmul": (lambda: T.matmul(a, T.reshape(b, (4, 3))), [a, b]),
        "relu": (lambda: T.relu(a), [a]),
        "log": (lambda: T.log(b), [b]),
        "softmax": (lambda: T.softmax(a), [a]),
        "sum": (lambda: T.sum(T.mul(a, b)), [a, b]),
        "reshape": (lambda: T.reshape(a, (2, 6)), [a]),
        "concat": (lambda: T.concat([a, b], axis=0), [a, b]),
        "bias_add": (lambda: T.bias_add(a, c), [a, c]),
    }
    f, leaves = fns[op]
    _check(f, leaves)


@pytest.mark.parametrize("stride,pad,groups,k", [(1, 0, 1, 3), (2, 1, 1, 3), (1, 2, 2, 5), (3, 1, 4, 3),
                                                 (1, 0, 1, 1), (2, 0, 2, 1)])
def test_conv2d_forward_matches_loops_and_gradcheck(stride, pad, groups, k, rng):
    x = leaf(rng.normal(size=(2, 4, 7, 6)))
    w = leaf(rng.normal(size=(4, 4 // groups, k, k)))
    b = leaf(rng.normal(size=4))
    out = T.conv2d(x, w, b, stride, pad, groups)
    np.testing.assert_allclose(out.data, naive_conv(x.data, w.data, b.data, stride, pad, groups), atol=1e-12)
    _check(lambda: T.conv2d(x, w, b, stride, pad, groups), [x, w, b])


@pytest.mark.parametrize("pool", ["max", "avg", "gap"])
def test_pool_gradcheck(pool, rng):
    x = leaf(rng.normal(size=(2, 3, 6, 5)))
    f = {"max": lambda: T.max_pool2d(x, 2), "avg": lambda: T.avg_pool2d(x, 2),
         "gap": lambda: T.global_avg_pool(x)}[pool]
    _check(f, [x])


def test_max_pool_ties_share_gradient():
    x = leaf(np.ones((1, 1, 2, 2)))
    T.sum(T.max_pool2d(x, 2)).backward()
    assert np.allclose(x.grad, 0.25)


def test_losses_gradcheck(rng):
    z = leaf(rng.normal(size=(6, 2)))
    y = np.array([0, 1, 1, 0, 1, 0])
    _check(lambda: T.weighted_bce_logits(z, y, (0.2, 1.0)), [z])
    z4 = leaf(rng.normal(size=(5, 4)))
    _check(lambda: T.cross_entropy_logits(z4, np.array([0, 3, 2, 1, 1])), [z4])


def test_bce_logits_equals_bce_of_softmax(rng):
    z = rng.normal(size=(8, 2)) * 3
    y = rng.integers(0, 2, 8)
    p = T.softmax(Tensor(z)).data[:, 1]
    a = T.weighted_bce_logits(Tensor(z), y, (0.2, 1.0)).data
    b = T.weighted_bce(Tensor(p), y, (0.2, 1.0)).data
    assert abs(a.item() - b.item()) < 1e-12


# -- properties -----------------------------------------------------------------------

@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=finite))
def test_softmax_rows_sum_to_one(a):
    s = T.softmax(Tensor(a)).data
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all((s > 0) & (s < 1))


@given(arrays(np.float64, (2, 3, 5, 5), elements=finite))
def test_forward_is_bit_deterministic(a):
    w = Tensor(np.linspace(-1, 1, 3 * 3 * 9).reshape(3, 3, 3, 3))
    one = T.max_pool2d(T.relu(T.conv2d(Tensor(a), w, padding=1)), 2).data
    two = T.max_pool2d(T.relu(T.conv2d(Tensor(a), w, padding=1)), 2).data
    assert one.tobytes() == two.tobytes()


@given(arrays(np.float64, (3, 4), elements=finite))
def test_zero_seed_gives_zero_grads(a):
    x = leaf(a)
    w = leaf(np.ones((4, 2)))
    T.backward(T.softmax(T.matmul(T.relu(x), w)), np.zeros((3, 2)))
    assert not np.any(x.grad) and not np.any(w.grad)


@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       arrays(np.float64, st.tuples(st.integers(0, 3), st.integers(1, 4)), elements=finite),
                       max_size=4))
def test_fct1_roundtrip(tmp_path_factory, mapping):
    p = tmp_path_factory.mktemp("fct") / "t.fct"
    T.save_tensors(p, mapping)
    back = T.load_tensors(p)
    assert list(back) == list(mapping)
    for k in mapping:
        assert back[k].shape == mapping[k].shape and back[k].tobytes() == mapping[k].tobytes()


def test_fct1_layout(tmp_path):
    import struct

    p = tmp_path / "x.fct"
    T.save_tensors(p, {"ab": np.array([[1.0, 2.0]])})
    raw = p.read_bytes()
    assert raw[:4] == b"FCT1"
    assert struct.unpack_from("<Q", raw, 4)[0] == 1
    assert struct.unpack_from("<I", raw, 12)[0] == 2 and raw[16:18] == b"ab"
    assert struct.unpack_from("<I", raw, 18)[0] == 2
    assert struct.unpack_from("<2Q", raw, 22) == (1, 2)
    assert struct.unpack_from("<2d", raw, 38) == (1.0, 2.0)
    p.write_bytes(raw + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        T.load_tensors(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="FCT1"):
        T.load_tensors(p)
