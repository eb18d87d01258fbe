import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fhs.autodiff import (NonFiniteError, SgdConfig, ShapeError, Tape, TapeError, Tensor,
                          backward, forward, load_checkpoint, save_checkpoint, sgd_step)

from conftest import central_diff, rel_err


# -- forward -----------------------------------------------------------------


def test_identity_program():
    tape = Tape(lambda t, x: t.identity(x), signature=[(3,)])
    out = forward(tape, [Tensor([1.0, 2.0, 3.0])])
    assert out.data.tolist() == [1.0, 2.0, 3.0]


def test_softmax_of_equal_logits_is_uniform():
    out = Tape().softmax(Tensor([[0.0, 0.0]]))
    assert out.data.tolist() == [[0.5, 0.5]]


def test_identity_matmul():
    out = Tape().matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[3.0], [4.0]]


def test_signature_mismatch_rejected():
    tape = Tape(lambda t, x: t.identity(x), signature=[(None, 2)])
    forward(tape, [np.zeros((5, 2))])
    with pytest.raises(ShapeError):
        forward(tape, [np.zeros((5, 3))])
    with pytest.raises(ShapeError):
        forward(tape, [np.zeros((5, 2)), np.zeros(1)])


def test_non_finite_values_are_errors():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tape().log(Tensor([0.0], requires_grad=True))
    with pytest.raises(NonFiniteError):
        Tape().exp(Tensor([1000.0]))


def test_shape_errors():
    t = Tape()
    with pytest.raises(ShapeError):
        t.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        t.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


# -- backward ----------------------------------------------------------------


def test_sum_gradient_is_ones():
    x = Tensor([1.0, -2.0, 5.0], requires_grad=True)
    tape = Tape()
    tape.backward(tape.sum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_square_gradient():
    x = Tensor([3.0], requires_grad=True)
    tape = Tape()
    tape.backward(tape.sum(tape.mul(x, x)))
    assert x.grad.tolist() == [6.0]


def test_backward_before_forward():
    with pytest.raises(TapeError, match="before forward"):
        Tape().backward()
    with pytest.raises(TapeError):
        backward(Tape(lambda t, x: t.identity(x)))


def test_gradients_accumulate_until_zeroed():
    x = Tensor([2.0], requires_grad=True)
    for _ in range(2):
        tape = Tape()
        tape.backward(tape.sum(tape.scale(x, 3.0)))
    assert x.grad.tolist() == [6.0]
    x.zero_grad()
    assert x.grad.tolist() == [0.0]


def test_each_op_visited_once():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    tape = Tape()
    a = tape.relu(x)
    b = tape.add(a, a)          # fan-out: a is used twice
    loss = tape.sum(tape.mul(b, a))
    tape.backward(loss)
    assert tape.visits == len(tape.ops) == 4
    # d/dx sum(2a * a) = 4a
    assert np.array_equal(x.grad, 4 * np.ones((2, 2)))


def test_relu_derivative_at_zero_is_zero():
    x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
    tape = Tape()
    tape.backward(tape.sum(tape.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(7)
    # 5 trainable scalars: w1 [1x2], w2 [2x1], b2 [1]
    w1 = Tensor(rng.uniform(-2, 2, (1, 2)), requires_grad=True)
    w2 = Tensor(rng.uniform(-2, 2, (2, 1)), requires_grad=True)
    b2 = Tensor(rng.uniform(-2, 2, 1), requires_grad=True)
    x = Tensor(rng.uniform(-2, 2, (6, 1)))
    params = [w1, w2, b2]
    assert sum(p.data.size for p in params) == 5
    tape = Tape()
    y = tape.add(tape.matmul(tape.relu(tape.matmul(x, w1)), w2), b2)
    tape.backward(tape.sum(tape.mul(y, y)))

    def f():
        hh = np.maximum(x.data @ w1.data, 0)
        return float(((hh @ w2.data + b2.data) ** 2).sum())

    for p in params:
        assert rel_err(p.grad, central_diff(f, p.data)) < 1e-4


def _unary_cases():
    return {
        "identity": lambda t, x: t.identity(x),
        "negate": lambda t, x: t.negate(x),
        "scale": lambda t, x: t.scale(x, -1.7),
        "relu": lambda t, x: t.relu(x),
        "exp": lambda t, x: t.exp(x),
        "log": lambda t, x: t.log(t.add(t.mul(x, x), Tensor(np.ones(x.shape)))),
        "clamp": lambda t, x: t.clamp(x, -1.0, 1.0),
        "softmax": lambda t, x: t.softmax(x),
        "log_softmax": lambda t, x: t.log_softmax(x),
        "mean": lambda t, x: t.mean(x),
        "grl": lambda t, x: t.grl(x, 0.7),
        "concat": lambda t, x: t.concat([x, t.scale(x, 2.0)], axis=1),
        "cross_entropy": lambda t, x: t.cross_entropy(x, np.array([0, 2, 1])),
        "matmul": lambda t, x: t.matmul(x, Tensor(np.arange(6.0).reshape(3, 2) - 2)),
        "add_bias": lambda t, x: t.add(x, Tensor(np.array([0.5, -1.0, 2.0]))),
        "sub": lambda t, x: t.sub(x, t.mul(x, x)),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
def test_primitive_gradients_match_finite_differences(name):
    fn = _unary_cases()[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    x0 = rng.uniform(-2, 2, (3, 3))
    # keep clamp/relu away from their kinks
    x0 = np.where(np.abs(x0) < 0.05, 0.3, x0)
    x0 = np.where(np.abs(np.abs(x0) - 1.0) < 0.05, 0.5, x0)
    weights = rng.uniform(-1, 1, fn(Tape(), Tensor(x0)).shape)
    sign = -0.7 if name == "grl" else 1.0

    x = Tensor(x0.copy(), requires_grad=True)
    tape = Tape()
    out = fn(tape, x)
    tape.backward(out, output_grad=weights)

    def f():
        return float((fn(Tape(), Tensor(x0)).data * weights).sum())

    fd = central_diff(f, x0)
    assert rel_err(x.grad, sign * fd) < 1e-4


def test_reparameterize_gradients():
    rng = np.random.default_rng(3)
    m0, lv0, n0 = (rng.uniform(-2, 2, (4, 2)) for _ in range(3))
    m, lv = Tensor(m0.copy(), requires_grad=True), Tensor(lv0.copy(), requires_grad=True)
    tape = Tape()
    tape.backward(tape.sum(tape.reparameterize(m, lv, Tensor(n0))))
    assert np.array_equal(m.grad, np.ones_like(m0))
    fd = central_diff(lambda: float((m0 + np.exp(0.5 * lv0) * n0).sum()), lv0)
    assert rel_err(lv.grad, fd) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8))
def test_softmax_rows_are_distributions(logits):
    s = Tape().softmax(Tensor([logits])).data
    assert np.all(s > 0) and np.all(s < 1)
    assert abs(s.sum() - 1.0) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-2, 2, (3, 4))
    w = Tensor(rng.uniform(-1, 1, (4, 2)))

    def grads(ca, cb):
        x = Tensor(x0.copy(), requires_grad=True)
        t = Tape()
        z = t.matmul(x, w)
        l1 = t.sum(t.exp(t.scale(z, 0.3)))
        l2 = t.cross_entropy(z, np.array([0, 1, 1]))
        t.backward(t.add(t.scale(l1, ca), t.scale(l2, cb)))
        return x.grad

    combined = grads(a, b)
    assert np.allclose(combined, a * grads(1.0, 0.0) + b * grads(0.0, 1.0), atol=1e-10, rtol=0)


def test_repeated_passes_bitwise_identical():
    def run():
        rng = np.random.default_rng(11)
        w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(8, 5)))
        t = Tape()
        t.backward(t.cross_entropy(t.matmul(x, w), rng.integers(0, 3, 8)))
        return w.grad.tobytes()

    assert run() == run()


# -- sgd ---------------------------------------------------------------------


def test_sgd_single_step():
    p = Tensor([1.0], requires_grad=True)
    p.accumulate(np.array([2.0]))
    sgd_step([p], SgdConfig(learning_rate=0.01))
    assert p.data.tolist() == [0.98]
    assert p.grad.tolist() == [0.0]


def test_sgd_zero_grad_and_zero_lr_are_fixed_points():
    p = Tensor([1.5, -2.0], requires_grad=True)
    p.accumulate(np.zeros(2))
    sgd_step([p], SgdConfig())
    assert p.data.tolist() == [1.5, -2.0]
    p.accumulate(np.array([3.0, 4.0]))
    sgd_step([p], 0.0)
    assert p.data.tolist() == [1.5, -2.0]


def test_sgd_requires_gradients():
    with pytest.raises(TapeError):
        sgd_step([Tensor([1.0], requires_grad=True)], SgdConfig())


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"learning_rate": -1}, {"batch_size": 0}])
def test_sgd_config_validation(kw):
    with pytest.raises(ValueError):
        SgdConfig(**kw)


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    tensors = {"a.W": rng.normal(size=(3, 4)), "b": rng.normal(size=7), "s": np.array(np.pi)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tensors)
    back = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": np.array([[1.0, 2.0]])})
    blob = path.read_bytes()
    assert blob == b"FHS1 1\nw 2 1 2\n" + np.array([1.0, 2.0], dtype="<f8").tobytes()


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": np.ones(4)})
    blob = path.read_bytes()
    for bad, msg in [(b"XXXX" + blob[4:], "magic"), (blob[:-3], "truncated"),
                     (blob + b"\0", "trailing")]:
        path.write_bytes(bad)
        with pytest.raises(ValueError, match=msg):
            load_checkpoint(path)
