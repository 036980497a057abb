import numpy as np
import pytest
from hypothesis import given, strategies as st

from loraprun import numcore as nc
from loraprun.numcore import Tensor

F64 = np.float64


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


def weighted(out: Tensor, seed: int = 0) -> Tensor:
    """Random-weighted sum so every output coordinate carries a distinct upstream gradient."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return nc.sum_(nc.mul(out, Tensor(w.astype(out.data.dtype))))


# ---------------------------------------------------------------- forward examples


def test_matmul_shape():
    out = nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1))))
    assert out.shape == (2, 1)
    np.testing.assert_array_equal(out.data, [[3.0], [3.0]])


def test_softmax_symmetric():
    np.testing.assert_allclose(nc.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_large_logits_stay_finite():
    out = nc.softmax(Tensor([[1e4, 0.0, -1e4]]))
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data, [[1.0, 0.0, 0.0]])


def test_softmax_mask_blocks_positions():
    mask = np.array([[0.0, -1e9, 0.0]], dtype=np.float32)
    np.testing.assert_allclose(nc.softmax(Tensor([[1.0, 5.0, 1.0]]), mask).data, [[0.5, 0.0, 0.5]])


def test_layer_norm_constant_vector_is_zero():
    x = Tensor(np.full((2, 6), 3.5))
    out = nc.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 6)))


def test_layer_norm_eps_inside_sqrt():
    x = np.array([[1.0, -1.0]])
    out = nc.layer_norm(Tensor(x), Tensor(np.ones(2)), None, eps=1e-5)
    np.testing.assert_allclose(out.data, x / np.sqrt(1.0 + 1e-5), rtol=1e-6)


def test_gelu_reference_values():
    x = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    with nc.precision(F64):
        np.testing.assert_allclose(nc.gelu(t64(x)).data, ref, rtol=1e-12, atol=1e-15)


def test_gelu_saturates_without_overflow():
    x = np.array([-1e6, -100.0, 100.0, 1e6], dtype=np.float32)
    with nc.detect_anomalies():
        out = nc.gelu(Tensor(x)).data
    np.testing.assert_allclose(out, [0.0, 0.0, 100.0, 1e6], atol=1e-5, rtol=1e-6)


def test_cross_entropy_uniform_is_log_v():
    logits = Tensor(np.zeros((1, 3, 7)))
    assert nc.cross_entropy(logits, np.array([[1, 2, 3]])).item() == pytest.approx(np.log(7), rel=1e-6)


def test_cross_entropy_all_ignored_raises():
    with pytest.raises(ValueError):
        nc.cross_entropy(Tensor(np.zeros((1, 2, 4))), np.zeros((1, 2), dtype=int), ignore_index=0)


def test_shape_errors_name_the_op():
    with pytest.raises(nc.ShapeError, match="matmul"):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(nc.ShapeError, match="add"):
        nc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2,))))
    with pytest.raises(nc.ShapeError, match="embedding"):
        nc.embedding(Tensor(np.ones((4, 2))), np.array([4]))


def test_anomaly_detection_names_node():
    x = Tensor(np.array([1.0, 1e30], dtype=np.float32))
    with nc.detect_anomalies(), pytest.raises(nc.NonFiniteError, match="mul"), np.errstate(over="ignore"):
        nc.mul(x, x)


def test_graph_evaluate_and_backward():
    g = nc.Graph(lambda x, y: {"out": nc.sum_(nc.mul(x, y)), "prod": nc.mul(x, y)})
    outs = nc.evaluate(g, {"x": np.array([3.0, 1.0]), "y": np.array([5.0, 2.0])})
    assert outs["out"].item() == 17.0
    grads = g.backward("out")
    np.testing.assert_array_equal(grads["x"], [5.0, 2.0])
    np.testing.assert_array_equal(grads["y"], [3.0, 1.0])
    with pytest.raises(nc.ShapeError):
        g.backward("prod")


def test_graph_nodes_topologically_ordered():
    g = nc.Graph(lambda a, b: nc.sum_(nc.tanh(nc.add(nc.mul(a, b), a))))
    g.evaluate({"a": np.ones(3), "b": np.ones(3)})
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    for i, node in enumerate(g.nodes):
        for p in node.parents:
            assert pos.get(id(p), -1) < i


def test_evaluate_deterministic():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
    f = nc.Graph(lambda x, w: nc.gelu(nc.linear(x, w)))
    a = f.evaluate({"x": x, "w": w})["out"].data.copy()
    b = f.evaluate({"x": x, "w": w})["out"].data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- backward semantics


def test_sum_grad_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    nc.backward(nc.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_product_rule_scalars():
    x, y = Tensor(3.0, requires_grad=True), Tensor(5.0, requires_grad=True)
    nc.backward(nc.mul(x, y))
    assert x.grad == 5.0 and y.grad == 3.0


def test_cross_entropy_grad_hand_value():
    z = Tensor(np.zeros((1, 2)), requires_grad=True)
    nc.backward(nc.cross_entropy(z, np.array([0])))
    np.testing.assert_allclose(z.grad, [[-0.5, 0.5]])


def test_frozen_leaf_never_gets_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    w = Tensor(np.ones(3), requires_grad=False)
    nc.backward(nc.sum_(nc.mul(x, w)))
    assert w.grad is None and x.grad is not None


def test_non_scalar_loss_rejected():
    with pytest.raises(nc.ShapeError):
        nc.backward(Tensor(np.ones(3), requires_grad=True))


def test_reused_leaf_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    nc.backward(nc.sum_(nc.mul(x, x)))
    np.testing.assert_allclose(x.grad, [4.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with nc.no_grad():
        y = nc.tanh(x)
    assert not y.requires_grad and y.parents == ()


def test_loss_sum_equals_sum_of_backwards():
    rng = np.random.default_rng(5)
    xd, wd = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))

    def losses(x, w):
        h = nc.linear(x, w)
        return nc.sum_(nc.tanh(h)), nc.mean(nc.gelu(h))

    x, w = t64(xd), t64(wd)
    with nc.precision(F64):
        l1, l2 = losses(x, w)
        nc.backward(nc.add(l1, l2))
        joint = x.grad.copy(), w.grad.copy()
        x.grad = w.grad = None
        l1, _ = losses(x, w)
        nc.backward(l1)
        _, l2 = losses(x, w)
        nc.backward(l2)
    np.testing.assert_allclose(x.grad, joint[0], rtol=1e-6)
    np.testing.assert_allclose(w.grad, joint[1], rtol=1e-6)


# ---------------------------------------------------------------- finite differences


def test_fd_quadratic():
    err = nc.finite_diff_check(lambda x: nc.sum_(nc.mul(x, x)), {"x": np.array([2.0])}, 1e-5)
    assert err <= 1e-6


def test_fd_rejects_nondeterminism():
    calls = iter(range(1000))

    def f(x):
        return nc.sum_(nc.scale(x, 1.0 + next(calls)))

    with pytest.raises(RuntimeError):
        nc.finite_diff_check(f, {"x": np.ones(2)})


PRIMITIVES = {
    "add": (lambda a, b: nc.add(a, b), [(3, 4), (3, 4)]),
    "bias_add": (lambda a, b: nc.add(a, b), [(2, 3, 4), (4,)]),
    "sub": (lambda a, b: nc.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: nc.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: nc.scale(a, -1.7), [(5,)]),
    "gelu": (lambda a: nc.gelu(a), [(4, 5)]),
    "relu": (lambda a: nc.relu(a), [(4, 5)]),
    "tanh": (lambda a: nc.tanh(a), [(4, 5)]),
    "sum": (lambda a: nc.sum_(a), [(3, 3)]),
    "mean": (lambda a: nc.mean(a), [(3, 3)]),
    "reshape": (lambda a: nc.reshape(a, (6, 2)), [(3, 4)]),
    "transpose": (lambda a: nc.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "concat": (lambda a, b: nc.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "matmul": (lambda a, b: nc.matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
    "linear": (lambda x, w, b: nc.linear(x, w, b), [(2, 3, 4), (5, 4), (5,)]),
    "lora_linear": (lambda x, w, b, d, u: nc.lora_linear(x, w, b, d, u, 2.0),
                    [(2, 3, 6), (5, 6), (5,), (2, 6), (5, 2)]),
    "softmax": (lambda a: nc.softmax(a, np.array([0.0, -1e9, 0.0, 0.0])), [(3, 4)]),
    "layer_norm": (lambda x, g, b: nc.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    "embedding": (lambda t: nc.embedding(t, np.array([[0, 2, 2], [3, 0, 1]])), [(4, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("trial", range(10))
def test_primitive_gradients(name, trial):
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(1000 * trial + len(name))
    keys = [f"a{i}" for i in range(len(shapes))]
    point = {k: rng.normal(size=s) for k, s in zip(keys, shapes)}
    if name == "relu":  # keep clear of the kink
        point["a0"] = np.where(np.abs(point["a0"]) < 0.1, 0.5, point["a0"])

    def f(**kw):
        return weighted(fn(*(kw[k] for k in keys)), seed=trial)

    assert nc.finite_diff_check(f, point, epsilon=1e-5) <= 1e-5


@pytest.mark.parametrize("trial", range(10))
def test_cross_entropy_gradient(trial):
    rng = np.random.default_rng(trial)
    targets = rng.integers(0, 5, size=(2, 3))
    targets[0, 1] = 0
    f = lambda z: nc.cross_entropy(z, targets, ignore_index=0 if trial % 2 else None)
    assert nc.finite_diff_check(f, {"z": rng.normal(size=(2, 3, 5))}) <= 1e-5


def test_lora_linear_grads_only_on_adapter_when_base_frozen():
    rng = np.random.default_rng(0)
    with nc.precision(F64):
        x = t64(rng.normal(size=(3, 4)), grad=False)
        w = t64(rng.normal(size=(5, 4)), grad=False)
        b = t64(rng.normal(size=5), grad=False)
        down, up = t64(rng.normal(size=(2, 4))), t64(rng.normal(size=(5, 2)))
        f = lambda down, up: weighted(nc.lora_linear(x, w, b, down, up, 16.0))
        err = nc.finite_diff_check(f, {"down": down, "up": up})
    assert err <= 1e-5
    assert w.grad is None and b.grad is None and x.grad is None
    assert np.abs(down.grad).sum() > 0 and np.abs(up.grad).sum() > 0


def test_attention_block_gradient():
    from loraprun.model import Attention, Dense

    rng = np.random.default_rng(3)
    with nc.precision(F64):
        dense = [Dense(p, t64(rng.normal(0, 0.3, size=(8, 8))), t64(rng.normal(0, 0.1, size=8)))
                 for p in "qkvo"]
        attn = Attention(*dense, n_heads=2)
        x = t64(rng.normal(size=(2, 3, 8)))
        mask = np.zeros((2, 1, 1, 3))
        mask[1, ..., -1] = -1e9
        point = {"x": x, **{f"{d.name}.weight": d.weight for d in dense}}
        f = lambda **kw: weighted(attn(x, mask=mask)[0])
        # key bias gets a structurally zero gradient (softmax is shift invariant), so leave biases out
        assert nc.finite_diff_check(f, point) <= 1e-5


# ---------------------------------------------------------------- properties


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_linear_matches_numpy(n, din, dout, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(n, din)), rng.normal(size=(dout, din)), rng.normal(size=dout)
    with nc.precision(F64):
        out = nc.linear(t64(x), t64(w), t64(b)).data
    np.testing.assert_allclose(out, x @ w.T + b, rtol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    p = nc.softmax(t64(np.array([vals]))).data
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


@given(st.integers(1, 5), st.integers(2, 6), st.integers(0, 2 ** 31 - 1))
def test_grad_shape_matches_data(rows, cols, seed):
    x = Tensor(np.random.default_rng(seed).normal(size=(rows, cols)), requires_grad=True)
    nc.backward(nc.sum_(nc.layer_norm(x, Tensor(np.ones(cols), requires_grad=True))))
    assert x.grad.shape == x.shape


def test_default_dtype_is_float32():
    assert Tensor([1.0]).data.dtype == np.float32
    with nc.precision(F64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert nc.default_dtype() == np.float32
