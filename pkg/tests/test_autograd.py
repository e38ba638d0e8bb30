
import numpy as np
import pytest

from eventloc.autograd import (
    AdamState, Initializer, ModelWeights, ShapeError, Tensor, adam_step, conv_gru_step, load_weights,
    onecycle_lr, ops, save_weights,
)
from gradcheck import check

pytestmark = pytest.mark.usefixtures("f64")


def test_conv2d_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_hand_sum():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 10.0


@pytest.mark.parametrize("h,w,k,s,p", [(7, 5, 3, 1, 1), (8, 8, 3, 2, 1), (6, 9, 1, 1, 0), (9, 7, 5, 2, 2), (5, 5, 3, 1, 0)])
def test_conv2d_output_extent(h, w, k, s, p):
    out = ops.conv2d(Tensor(np.zeros((2, 3, h, w))), Tensor(np.zeros((4, 3, k, k))), stride=s, padding=p)
    assert out.shape == (2, 4, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


def test_conv2d_flushes_subnormal_operands():
    x = np.full((1, 1, 3, 3), 1e-40, dtype=np.float32)
    x[0, 0, 1, 1] = 2.0
    k = Tensor(np.ones((1, 1, 1, 1), np.float32))
    out = ops.conv2d(Tensor(x), k)
    assert out.data[0, 0, 1, 1] == 2.0 and np.count_nonzero(out.data) == 1
    assert ops.flush_subnormal(np.array([1e-300, 1.0])).tolist() == [1e-300, 1.0]  # normal in float64


def test_conv2d_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))
    assert "(1, 3, 4, 4)" in str(err.value) and "(2, 2, 3, 3)" in str(err.value)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (2, 0)])
def test_conv2d_gradients(seed, stride, padding):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 6, 5))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    proj = rng.standard_normal((2, 4, (6 + 2 * padding - 3) // stride + 1, (5 + 2 * padding - 3) // stride + 1))
    err = check(lambda x, k, b: ops.sum(ops.conv2d(x, k, b, stride, padding) * proj), [x, k, b])
    assert err < 1e-3


def _gru_weights(rng, hidden, inputs, scale=0.3):
    w = ModelWeights()
    for gate in ("convz", "convr", "convq"):
        w.add(f"g.{gate}.weight", rng.standard_normal((hidden, hidden + inputs, 3, 3)) * scale)
        w.add(f"g.{gate}.bias", rng.standard_normal(hidden) * scale)
    return w


def test_gru_zero_weights_halves_hidden():
    w = ModelWeights()
    init = Initializer(w, 0, np.float64)
    init.gru("g", 4, 3)
    for p in w.params.values():
        p.data[...] = 0
    h = np.random.default_rng(0).uniform(-1, 1, (1, 4, 5, 6))
    out = conv_gru_step(Tensor(h), Tensor(np.ones((1, 3, 5, 6))), w, "g")
    np.testing.assert_allclose(out.data, 0.5 * h, atol=1e-15)


def test_gru_shape_and_range():
    rng = np.random.default_rng(1)
    w = ModelWeights()
    Initializer(w, 0, np.float64).gru("g", 64, 8)
    h = np.tanh(rng.standard_normal((1, 64, 36, 64)))
    out = conv_gru_step(Tensor(h), Tensor(rng.standard_normal((1, 8, 36, 64)) * 10), w, "g")
    assert out.shape == h.shape
    assert np.all(np.abs(out.data) < 1)


def test_gru_spatial_mismatch():
    w = _gru_weights(np.random.default_rng(0), 2, 2)
    with pytest.raises(ShapeError):
        conv_gru_step(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 5))), w, "g")


@pytest.mark.parametrize("seed", range(3))
def test_gru_gradients(seed):
    rng = np.random.default_rng(seed)
    w = _gru_weights(rng, 3, 2)
    names = w.names()
    h = np.tanh(rng.standard_normal((1, 3, 4, 5)))
    x = rng.standard_normal((1, 2, 4, 5))
    proj = rng.standard_normal((1, 3, 4, 5))

    def build(h, x, *params):
        ww = ModelWeights(params=dict(zip(names, params)))
        return ops.sum(conv_gru_step(h, x, ww, "g") * proj)

    err = check(build, [h, x] + [w[n].data for n in names])
    assert err < 1e-3


def test_bilinear_identity_and_midpoint():
    rng = np.random.default_rng(0)
    field = rng.standard_normal((1, 2, 4, 5))
    grid = ops.coords_grid(1, 4, 5)
    out = ops.bilinear_sample(Tensor(field), Tensor(grid))
    np.testing.assert_array_equal(out.data, field)
    a, b = 3.0, 7.0
    mid = ops.bilinear_sample(Tensor(np.array([a, b]).reshape(1, 1, 1, 2)), Tensor(np.array([[[[0.5, 0.0]]]])))
    assert mid.data.item() == (a + b) / 2


def test_bilinear_out_of_bounds_is_zero():
    field = np.ones((1, 1, 3, 3))
    out = ops.bilinear_sample(Tensor(field), Tensor(np.array([[[[-1.5, 1.0], [1.0, 3.5], [2.5, 1.0]]]])))
    np.testing.assert_allclose(out.data.ravel(), [0.0, 0.0, 0.5])


@pytest.mark.parametrize("seed", range(5))
def test_bilinear_gradients(seed):
    rng = np.random.default_rng(seed)
    field = rng.standard_normal((1, 2, 5, 5))
    coords = rng.uniform(-1.5, 5.5, (1, 3, 4, 2))
    proj = rng.standard_normal((1, 2, 3, 4))
    err = check(lambda f, c: ops.sum(ops.bilinear_sample(f, c) * proj), [field, coords])
    assert err < 1e-3


@pytest.mark.parametrize("op", ["sigmoid", "tanh", "relu", "norm", "avg_pool2", "upsample", "log", "matmul", "div",
                                "instance_norm"])
def test_elementwise_gradients(op):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 4, 6))
    proj = rng.standard_normal((1, 2, 4, 6))
    builds = {
        "sigmoid": lambda t: ops.sum(ops.sigmoid(t) * proj),
        "tanh": lambda t: ops.sum(ops.tanh(t) * 2.0),
        "relu": lambda t: ops.sum(ops.relu(t) * t),
        "norm": lambda t: ops.sum(ops.norm(t, axis=1)),
        "avg_pool2": lambda t: ops.sum(ops.square(ops.avg_pool2(t))),
        "upsample": lambda t: ops.sum(ops.square(ops.upsample(t, 4))),
        "log": lambda t: ops.sum(ops.log(ops.sigmoid(t))),
        "matmul": lambda t: ops.sum(ops.square(ops.matmul(t, ops.transpose(t, (0, 1, 3, 2))))),
        "div": lambda t: ops.sum(ops.div(t, ops.sigmoid(t) + 1.0)),
        "instance_norm": lambda t: ops.sum(ops.instance_norm(t) * proj),
    }
    assert check(builds[op], [x]) < 1e-3


def test_backward_accumulates_shared_parents():
    t = Tensor(np.array(3.0), requires_grad=True)
    (t * t + t).backward()
    assert t.grad == 7.0


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 3, 8, 8)))
    k = Tensor(rng.standard_normal((5, 3, 3, 3)))
    a = ops.conv2d(x, k, padding=1).data
    b = ops.conv2d(x, k, padding=1).data
    assert np.array_equal(a, b)


def _single_param(value):
    w = ModelWeights()
    w.add("p", np.array([value], dtype=np.float64))
    return w


def test_adam_zero_gradient_fixed_point():
    w = _single_param(1.5)
    state = AdamState()
    for _ in range(3):
        adam_step(w, {"p": np.zeros(1)}, state, lr=0.1, weight_decay=0.0)
    assert w["p"].data[0] == 1.5


def test_adam_first_step():
    w = _single_param(1.0)
    adam_step(w, {"p": np.ones(1)}, AdamState(), lr=0.1)
    # bias-corrected m/sqrt(v) is exactly 1 on the first step
    assert w["p"].data[0] == pytest.approx(0.9, abs=1e-7)


def test_adam_missing_gradient():
    w = _single_param(1.0)
    w.add("q", np.zeros(2))
    with pytest.raises(KeyError, match="q"):
        adam_step(w, {"p": np.ones(1)}, AdamState(), lr=0.1)


def test_onecycle_endpoints():
    peak, total = 4e-5, 1000
    assert onecycle_lr(0, total, peak) < peak
    assert onecycle_lr(300, total, peak) == pytest.approx(peak)
    assert onecycle_lr(total, total, peak) == pytest.approx(peak / 25)
    lrs = [onecycle_lr(s, total, peak) for s in range(total + 1)]
    assert max(lrs) == pytest.approx(peak)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    w = ModelWeights(meta={"channels": [1, 2], "iters": 12})
    w.add("a.weight", rng.standard_normal((3, 2, 3, 3)).astype(np.float32))
    w.add("a.bias", rng.standard_normal(3).astype(np.float32))
    w.add("s", np.array(2.5, dtype=np.float32))
    path = tmp_path / "w.ckpt"
    save_weights(w, path)
    assert path.read_bytes()[:8] == b"LEARCKPT"
    back = load_weights(path)
    assert back.meta == w.meta
    assert back.names() == w.names()
    for n in w.names():
        assert back[n].data.tobytes() == w[n].data.tobytes()
