import numpy as np
import numpy.testing as npt
import pytest

from loopformer import tensor as T
from loopformer.tensor import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    check_gradients,
    max_rel_err,
    numeric_grad,
    precision,
)


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    npt.assert_array_equal(T.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_hand_case():
    a = Tensor([[1.0, 0.0], [0.0, 0.0]])
    b = Tensor([[0.0, 1.0], [1.0, 0.0]])
    npt.assert_array_equal(T.matmul(a, b).data, [[0, 1], [0, 0]])


def test_matmul_shape_error_mentions_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_gradient_fd():
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}
    err = check_gradients(lambda t: T.sum_(T.matmul(t["a"], t["b"])), arrays)
    assert err < 1e-6


def test_softmax_symmetry():
    y = T.softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
    npt.assert_allclose(y.data, [1 / 3] * 3, rtol=1e-7)


def test_softmax_no_overflow():
    y = T.softmax_lastdim(Tensor([1000.0, 0.0]))
    assert np.isfinite(y.data).all()
    npt.assert_allclose(y.data, [1.0, 0.0], atol=1e-12)


def test_softmax_matches_direct_formula():
    rng = np.random.default_rng(1)
    x = rng.normal(size=4)
    with precision("double"):
        y = T.softmax_lastdim(Tensor(x))
    oracle = np.exp(x) / np.exp(x).sum()
    npt.assert_allclose(y.data, oracle, atol=1e-12)


def test_silu_values():
    assert T.silu(Tensor(0.0)).item() == 0.0
    big = T.silu(Tensor(50.0)).item()
    assert abs(big - 50.0) < 1e-6


def test_silu_gradient_fd():
    rng = np.random.default_rng(2)
    err = check_gradients(lambda t: T.sum_(T.silu(t["x"])), {"x": rng.normal(size=7)})
    assert err < 1e-6


def test_relu_values_and_zero_convention():
    assert T.relu(Tensor(-1.0)).item() == 0.0
    assert T.relu(Tensor(2.0)).item() == 2.0
    x = Tensor([0.0], requires_grad=True)
    with Tape() as tape:
        y = T.sum_(T.relu(x))
    tape.backward(y)
    npt.assert_array_equal(x.grad, [0.0])


def test_rmsnorm_constant_vector():
    for c in (3.0, -2.5):
        y = T.rmsnorm(Tensor([c] * 4, dtype=np.float64), Tensor(np.ones(4, dtype=np.float64)))
        npt.assert_allclose(y.data, np.sign(c) * np.ones(4), rtol=1e-6)


def test_rmsnorm_zero_vector():
    y = T.rmsnorm(Tensor(np.zeros(4)), Tensor(np.ones(4)))
    npt.assert_array_equal(y.data, np.zeros(4))


def test_rmsnorm_gradient_fd():
    rng = np.random.default_rng(3)
    arrays = {"x": rng.normal(size=(3, 5)), "g": rng.normal(size=5)}
    err = check_gradients(lambda t: T.sum_(T.rmsnorm(t["x"], t["g"])), arrays)
    assert err < 1e-5


def naive_dwconv(x, kernel):
    T_, m = x.shape
    _, k = kernel.shape
    out = np.zeros_like(x)
    for t in range(T_):
        for c in range(m):
            for j in range(k):
                src = t - (k - 1) + j
                if 0 <= src < T_:
                    out[t, c] += kernel[c, j] * x[src, c]
    return out


def test_dwconv_k1_identity():
    x = Tensor(np.arange(6.0).reshape(3, 2))
    y = T.dwconv1d(x, Tensor(np.ones((2, 1))))
    npt.assert_array_equal(y.data, x.data)


def test_dwconv_hand_case():
    a, b = 0.5, 2.0
    y = T.dwconv1d(Tensor([[1.0], [2.0], [3.0]]), Tensor([[a, b]]))
    npt.assert_allclose(y.data[:, 0], [b * 1, a * 1 + b * 2, a * 2 + b * 3], rtol=1e-7)


def test_dwconv_matches_naive_loop():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 3))
    kernel = rng.normal(size=(3, 2))
    with precision("double"):
        y = T.dwconv1d(Tensor(x), Tensor(kernel))
    npt.assert_allclose(y.data, naive_dwconv(x, kernel), atol=1e-12)


def test_dwconv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.dwconv1d(Tensor(np.zeros((4, 3))), Tensor(np.zeros((2, 2))))


def test_dwconv_pad_contract():
    with pytest.raises(ShapeError):
        T.dwconv1d(Tensor(np.zeros((4, 2))), Tensor(np.zeros((2, 2))), pad_left=0)


def test_detach_stop_gradient_semantics():
    w = Tensor([1.5, -2.0, 0.5], requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(T.mul(T.detach(w), w))
    tape.backward(loss)
    npt.assert_array_equal(w.grad, w.data)


def test_detach_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = T.sum_(T.mul(T.detach(x), T.detach(x)))
    tape.backward(y)
    assert x.grad is None


def test_detach_equals_constant_replacement_bitwise():
    rng = np.random.default_rng(5)
    xv = rng.normal(size=4)
    wv = rng.normal(size=4)
    with precision("double"):
        w1 = Tensor(wv, requires_grad=True)
        x1 = Tensor(xv, requires_grad=True)
        with Tape() as tape1:
            mid = T.silu(T.mul(x1, w1))
            loss1 = T.sum_(T.mul(T.detach(mid), w1))
        tape1.backward(loss1)

        w2 = Tensor(wv, requires_grad=True)
        with Tape() as tape2:
            const = Tensor(T.silu(T.mul(Tensor(xv), Tensor(wv))).data)
            loss2 = T.sum_(T.mul(const, w2))
        tape2.backward(loss2)
    npt.assert_array_equal(w1.grad, w2.grad)
    assert x1.grad is None


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((1, 4)))
    loss = T.cross_entropy(logits, np.array([2]))
    npt.assert_allclose(loss.item(), np.log(4), rtol=1e-6)


def test_cross_entropy_confident_logits():
    logits = np.zeros((1, 4))
    logits[0, 1] = 1e6
    loss = T.cross_entropy(Tensor(logits), np.array([1]))
    assert loss.item() < 1e-6


def test_cross_entropy_all_ignored():
    logits = Tensor(np.zeros((2, 4)), requires_grad=True)
    with Tape() as tape:
        loss = T.cross_entropy(logits, np.array([-1, -1]), ignore_index=-1)
    assert loss.item() == 0.0
    tape.backward(loss)
    npt.assert_array_equal(logits.grad, np.zeros((2, 4)))


def test_cross_entropy_gradient_fd():
    rng = np.random.default_rng(6)
    targets = np.array([0, 2, -1, 1])
    err = check_gradients(
        lambda t: T.cross_entropy(t["l"], targets, ignore_index=-1),
        {"l": rng.normal(size=(4, 3))},
    )
    assert err < 1e-5


def test_embedding_gather_and_grad():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    ids = np.array([1, 1, 3])
    with Tape() as tape:
        out = T.sum_(T.embedding(table, ids))
    tape.backward(out)
    expected = np.zeros((4, 3))
    expected[1] = 2.0
    expected[3] = 1.0
    npt.assert_array_equal(table.grad, expected)
    with pytest.raises(ShapeError):
        T.embedding(table, np.array([4]))


def test_shared_subexpression_accumulates():
    # y = x*x + x*x has closed-form gradient 4x
    x = Tensor([1.0, -2.0], requires_grad=True)
    with Tape() as tape:
        sq = T.mul(x, x)
        y = T.sum_(T.add(sq, sq))
    tape.backward(y)
    npt.assert_allclose(x.grad, 4 * x.data, rtol=1e-7)


@pytest.mark.parametrize(
    "name,build,shapes",
    [
        ("add", lambda t: T.sum_(T.add(t["a"], t["b"])), {"a": (3, 4), "b": (3, 4)}),
        ("add_broadcast", lambda t: T.sum_(T.add(t["a"], t["b"])), {"a": (3, 4), "b": (4,)}),
        ("sub", lambda t: T.sum_(T.sub(t["a"], t["b"])), {"a": (2, 3), "b": (2, 3)}),
        ("mul", lambda t: T.sum_(T.mul(t["a"], t["b"])), {"a": (3, 4), "b": (3, 4)}),
        ("mul_broadcast", lambda t: T.sum_(T.mul(t["a"], t["b"])), {"a": (2, 3, 4), "b": (3, 1)}),
        ("neg", lambda t: T.sum_(T.neg(t["a"])), {"a": (5,)}),
        ("matmul", lambda t: T.sum_(T.matmul(t["a"], t["b"])), {"a": (3, 4), "b": (4, 2)}),
        ("matmul_batched", lambda t: T.sum_(T.matmul(t["a"], t["b"])), {"a": (2, 3, 4), "b": (4, 3)}),
        ("silu", lambda t: T.sum_(T.silu(t["a"])), {"a": (6,)}),
        ("relu", lambda t: T.sum_(T.relu(t["a"])), {"a": (6,)}),
        ("sigmoid", lambda t: T.sum_(T.sigmoid(t["a"])), {"a": (6,)}),
        ("softmax", lambda t: T.sum_(T.mul(t["a"], T.softmax_lastdim(t["a"]))), {"a": (3, 5)}),
        ("rmsnorm", lambda t: T.sum_(T.silu(T.rmsnorm(t["a"], t["g"]))), {"a": (3, 4), "g": (4,)}),
        ("dwconv", lambda t: T.sum_(T.dwconv1d(t["a"], t["k"])), {"a": (5, 3), "k": (3, 2)}),
        ("mean", lambda t: T.sum_(T.mean(t["a"], axis=1, keepdims=True)), {"a": (3, 4)}),
        ("mean_all", lambda t: T.mean(t["a"]), {"a": (3, 4)}),
        ("reshape", lambda t: T.sum_(T.silu(T.reshape(t["a"], (6, 2)))), {"a": (3, 4)}),
        ("transpose", lambda t: T.sum_(T.silu(T.transpose(t["a"]))), {"a": (3, 4)}),
        ("narrow", lambda t: T.sum_(T.silu(T.narrow(t["a"], 1, 1, 2))), {"a": (3, 4)}),
        ("concat", lambda t: T.sum_(T.silu(T.concat([t["a"], t["b"]], axis=-1))), {"a": (3, 2), "b": (3, 3)}),
    ],
)
def test_gradients_random_sweep(name, build, shapes):
    # 20 seeds per op, double precision, h=1e-5, tolerance 1e-4
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(hash(name) % 2**32 + seed)
        arrays = {k: rng.normal(size=s) for k, s in shapes.items()}
        worst = max(worst, check_gradients(build, arrays))
    assert worst < 1e-4, f"{name}: max rel err {worst:.3g}"


def test_forward_backward_determinism():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(4, 8)).astype(np.float32))
        w = Tensor(rng.normal(size=(8, 8)).astype(np.float32), requires_grad=True)
        g = Tensor(np.ones(8, dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            h = T.rmsnorm(T.silu(T.matmul(x, w)), g)
            loss = T.sum_(T.mul(h, h))
        tape.backward(loss)
        return loss.item(), w.grad.copy(), g.grad.copy()

    l1, wg1, gg1 = run()
    l2, wg2, gg2 = run()
    assert l1 == l2
    npt.assert_array_equal(wg1, wg2)
    npt.assert_array_equal(gg1, gg2)


def test_no_grad_suppresses_recording():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        with T.no_grad():
            h = T.mul(w, w)
        assert not h.requires_grad
        loss = T.sum_(T.mul(h, w))
    assert len(tape) == 2
    tape.backward(loss)
    npt.assert_array_equal(w.grad, h.data)


def test_debug_mode_flags_nonfinite(monkeypatch):
    monkeypatch.setattr(T, "_DEBUG_FINITE", True)
    with pytest.raises(NumericError):
        T.mul(Tensor([1e308]), Tensor([1e308]))


def test_numeric_grad_helper():
    x = np.array([1.0, 2.0])
    g = numeric_grad(lambda v: float((v ** 2).sum()), x)
    npt.assert_allclose(g, 2 * x, atol=1e-8)
    assert max_rel_err(g, 2 * x) < 1e-8
