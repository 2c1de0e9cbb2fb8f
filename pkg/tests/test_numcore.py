import numpy as np
import pytest

from instructlight import numcore as nc
from instructlight.numcore import Parameter, Tensor

from gradcheck import check_gradients, random_loss_weights, scalarize


def t64(arr, grad=True):
    return nc.tensor(arr, dtype=np.float64, requires_grad=grad)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    b = np.arange(12, dtype=np.float32).reshape(3, 4)
    out = nc.matmul(nc.tensor(np.eye(3)), nc.tensor(b))
    np.testing.assert_array_equal(out.data, b)


def test_matmul_hand_case():
    a = nc.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = nc.tensor([[1.0], [1.0]])
    out = nc.matmul(a, b)
    np.testing.assert_allclose(out.data, [[3.0], [7.0]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 7))
    b = rng.normal(size=(7, 3))
    expected = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                expected[i, j] += a[i, k] * b[k, j]
    out = nc.matmul(t64(a, grad=False), t64(b, grad=False))
    assert np.abs(out.data - expected).max() < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        nc.matmul(nc.tensor(np.ones((2, 3))), nc.tensor(np.ones((4, 2))))


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv2d_1x1_identity():
    x = np.random.default_rng(1).normal(size=(1, 1, 6, 5)).astype(np.float32)
    w = np.ones((1, 1, 1, 1), dtype=np.float32)
    out = nc.conv2d(nc.tensor(x), nc.tensor(w))
    np.testing.assert_allclose(out.data, x)


def test_conv2d_all_ones_counts():
    x = nc.tensor(np.ones((1, 1, 5, 5)))
    w = nc.tensor(np.ones((1, 1, 3, 3)))
    out = nc.conv2d(x, w, stride=1, padding=1).data[0, 0]
    assert out[2, 2] == 9.0
    assert out[0, 0] == 4.0
    assert out[0, 4] == 4.0
    assert out[4, 0] == 4.0


def _conv_loops(x, w, stride, padding):
    n, cin, ih, iw = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (ih + 2 * padding - kh) // stride + 1
    ow = (iw + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for o in range(cout):
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[b, c, y * stride + i, xx * stride + j] * w[o, c, i, j]
                    out[b, o, y, xx] = acc
    return out


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_against_nested_loops(stride, padding):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    out = nc.conv2d(t64(x, grad=False), t64(w, grad=False), stride=stride, padding=padding)
    expected = _conv_loops(x, w, stride, padding)
    assert np.abs(out.data - expected).max() < 1e-5


def test_conv2d_channel_mismatch():
    with pytest.raises(ValueError):
        nc.conv2d(nc.tensor(np.ones((1, 2, 4, 4))), nc.tensor(np.ones((1, 3, 3, 3))))


# ---------------------------------------------------------------------------
# layer_norm
# ---------------------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    x = nc.tensor(np.full((3, 8), 2.5))
    out = nc.layer_norm(x, eps=1e-5)
    assert np.abs(out.data).max() < 1e-6


def test_layer_norm_already_normalized_row():
    x = nc.tensor([[1.0, -1.0]])
    out = nc.layer_norm(x, gain=nc.tensor([1.0, 1.0]), bias=nc.tensor([0.0, 0.0]), eps=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_moments():
    rng = np.random.default_rng(3)
    x = nc.tensor(rng.normal(2.0, 3.0, size=(4, 64)), dtype=np.float64)
    out = nc.layer_norm(x, eps=1e-8).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-6
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ValueError):
        nc.layer_norm(nc.tensor(np.ones((2, 2))), eps=0.0)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def test_attention_single_key_value():
    q = nc.tensor(np.random.default_rng(4).normal(size=(3, 8)))
    k = nc.tensor(np.random.default_rng(5).normal(size=(1, 8)))
    v = nc.tensor([[1.0, 2.0, 3.0, 4.0]])
    out, w = nc.scaled_dot_attention(q, k, v)
    np.testing.assert_allclose(w.data, np.ones((3, 1)))
    np.testing.assert_allclose(out.data, np.tile(v.data, (3, 1)))


def test_attention_identical_keys_uniform():
    q = nc.tensor(np.random.default_rng(6).normal(size=(2, 4)))
    k = nc.tensor(np.tile(np.random.default_rng(7).normal(size=(1, 4)), (5, 1)))
    v = nc.tensor(np.random.default_rng(8).normal(size=(5, 4)))
    _, w = nc.scaled_dot_attention(q, k, v)
    np.testing.assert_allclose(w.data, np.full((2, 5), 0.2), atol=1e-7)


def test_attention_against_softmax_matmul_oracle():
    rng = np.random.default_rng(9)
    q = rng.normal(size=(4, 8))
    k = rng.normal(size=(6, 8))
    v = rng.normal(size=(6, 8))
    logits = q @ k.T / np.sqrt(8)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    w_ref = e / e.sum(axis=-1, keepdims=True)
    out_ref = w_ref @ v
    out, w = nc.scaled_dot_attention(t64(q, False), t64(k, False), t64(v, False))
    assert np.abs(out.data - out_ref).max() < 1e-6
    assert np.abs(w.data - w_ref).max() < 1e-6


def test_attention_rows_sum_to_one_with_mask():
    rng = np.random.default_rng(10)
    q = t64(rng.normal(size=(2, 3, 4)), grad=False)
    k = t64(rng.normal(size=(2, 5, 4)), grad=False)
    v = t64(rng.normal(size=(2, 5, 4)), grad=False)
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=np.float64)[:, None, :]
    _, w = nc.scaled_dot_attention(q, k, v, mask=mask)
    np.testing.assert_allclose(w.data.sum(axis=-1), np.ones((2, 3)), atol=1e-9)
    assert np.abs(w.data[0, :, 3:]).max() < 1e-12


def test_attention_dim_mismatch():
    with pytest.raises(ValueError):
        nc.scaled_dot_attention(nc.tensor(np.ones((2, 3))), nc.tensor(np.ones((4, 5))),
                                nc.tensor(np.ones((4, 5))))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = t64(np.random.default_rng(11).normal(size=(3, 4)))
    nc.backward(nc.tsum(x))
    np.testing.assert_allclose(x.grad, np.ones((3, 4)))


def test_backward_squared_norm():
    arr = np.random.default_rng(12).normal(size=(5,))
    x = t64(arr.reshape(1, 5))
    nc.backward(nc.tsum(nc.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * arr.reshape(1, 5), rtol=1e-12)


def test_backward_rejects_non_scalar():
    x = t64(np.ones((2, 2)))
    with pytest.raises(ValueError):
        nc.backward(nc.mul(x, 2.0))


def test_backward_accumulates_through_shared_node():
    x = t64(np.array([[1.0, 2.0]]))
    y = nc.add(x, x)
    nc.backward(nc.tsum(y))
    np.testing.assert_allclose(x.grad, [[2.0, 2.0]])


# ---------------------------------------------------------------------------
# gradient-check property over the op set (float64, small dims)
# ---------------------------------------------------------------------------

def test_gradcheck_matmul_batched():
    rng = np.random.default_rng(20)
    a = t64(rng.normal(size=(2, 3, 4)))
    b = t64(rng.normal(size=(4, 5)))
    w = random_loss_weights(rng, (2, 3, 5))
    check_gradients(lambda: scalarize(nc.matmul(a, b), w), [a, b])


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
def test_gradcheck_conv2d(stride, padding):
    rng = np.random.default_rng(21)
    x = t64(rng.normal(size=(2, 2, 5, 5)))
    w = t64(rng.normal(size=(3, 2, 3, 3)))
    out_shape = nc.conv2d(x, w, stride=stride, padding=padding).data.shape
    lw = random_loss_weights(rng, out_shape)
    check_gradients(lambda: scalarize(nc.conv2d(x, w, stride=stride, padding=padding), lw), [x, w])


def test_gradcheck_layer_norm():
    rng = np.random.default_rng(22)
    x = t64(rng.normal(size=(3, 6)))
    g = t64(rng.normal(size=(6,)))
    b = t64(rng.normal(size=(6,)))
    lw = random_loss_weights(rng, (3, 6))
    check_gradients(lambda: scalarize(nc.layer_norm(x, g, b, eps=1e-5), lw), [x, g, b])


def test_gradcheck_attention_masked():
    rng = np.random.default_rng(23)
    q = t64(rng.normal(size=(2, 3, 4)))
    k = t64(rng.normal(size=(2, 5, 4)))
    v = t64(rng.normal(size=(2, 5, 4)))
    mask = np.array([[1, 1, 1, 1, 0], [1, 1, 1, 1, 1]], dtype=np.float64)[:, None, :]
    lw = random_loss_weights(rng, (2, 3, 4))
    check_gradients(lambda: scalarize(nc.scaled_dot_attention(q, k, v, mask=mask)[0], lw), [q, k, v])


def test_gradcheck_pointwise_and_reductions():
    rng = np.random.default_rng(24)
    x = t64(rng.normal(size=(4, 5)))
    lw = random_loss_weights(rng, (4, 5))

    check_gradients(lambda: scalarize(nc.silu(x), lw), [x])
    check_gradients(lambda: scalarize(nc.sigmoid(x), lw), [x])
    check_gradients(lambda: scalarize(nc.softmax(x), lw), [x])
    check_gradients(lambda: nc.tmean(nc.mul(x, x)), [x])
    lw2 = random_loss_weights(rng, (5,))
    check_gradients(lambda: scalarize(nc.tsum(x, axis=0), lw2), [x])


def test_gradcheck_shape_ops():
    rng = np.random.default_rng(25)
    x = t64(rng.normal(size=(2, 3, 4)))
    y = t64(rng.normal(size=(2, 2, 4)))
    lw = random_loss_weights(rng, (2, 5, 4))
    check_gradients(lambda: scalarize(nc.concat([x, y], axis=1), lw), [x, y])

    lw3 = random_loss_weights(rng, (4, 3, 2))
    check_gradients(lambda: scalarize(nc.transpose(x, (2, 1, 0)), lw3), [x])

    lw4 = random_loss_weights(rng, (6, 4))
    check_gradients(lambda: scalarize(nc.reshape(x, (6, 4)), lw4), [x])


def test_gradcheck_embedding_and_upsample():
    rng = np.random.default_rng(26)
    table = t64(rng.normal(size=(7, 3)))
    ids = np.array([[0, 2, 2], [6, 1, 0]])
    lw = random_loss_weights(rng, (2, 3, 3))
    check_gradients(lambda: scalarize(nc.embedding(table, ids), lw), [table])

    x = t64(rng.normal(size=(1, 2, 3, 3)))
    lw2 = random_loss_weights(rng, (1, 2, 6, 6))
    check_gradients(lambda: scalarize(nc.upsample_nearest(x, 2), lw2), [x])


def test_gradcheck_broadcast_add_mul():
    rng = np.random.default_rng(27)
    x = t64(rng.normal(size=(3, 4)))
    b = t64(rng.normal(size=(4,)))
    lw = random_loss_weights(rng, (3, 4))
    check_gradients(lambda: scalarize(nc.add(x, b), lw), [x, b])
    check_gradients(lambda: scalarize(nc.mul(x, b), lw), [x, b])


# ---------------------------------------------------------------------------
# freezing / determinism / NaN policy
# ---------------------------------------------------------------------------

def test_frozen_parameter_gets_no_gradient():
    frozen = Parameter(np.ones((2, 2)), "frozen", trainable=False)
    live = Parameter(np.ones((2, 2)), "live", trainable=True)
    out = nc.tsum(nc.mul(nc.add(frozen.tensor, live.tensor), 3.0))
    nc.backward(out)
    assert frozen.grad is None
    assert live.grad is not None
    np.testing.assert_allclose(live.grad, np.full((2, 2), 3.0))


def test_trainable_toggle_clears_gradient():
    p = Parameter(np.ones(3), "p", trainable=True)
    nc.backward(nc.tsum(nc.mul(p.tensor, p.tensor)))
    assert p.grad is not None
    p.trainable = False
    assert p.grad is None


def test_deterministic_forward():
    def run():
        rng = np.random.default_rng(42)
        x = nc.tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
        w = nc.tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32))
        h = nc.conv2d(x, w, padding=1)
        h = nc.silu(h)
        return nc.layer_norm(nc.reshape(h, (2, -1))).data.tobytes()

    assert run() == run()


def test_non_finite_forward_raises():
    big = nc.tensor(np.array([1e38, 1e38], dtype=np.float32))
    with np.errstate(over="ignore"):
        with pytest.raises(nc.NonFiniteError):
            nc.mul(big, 1e10)
    with pytest.raises(nc.NonFiniteError):
        nc.Tensor(np.array([np.nan, 1.0]))


def test_no_grad_blocks_graph():
    x = t64(np.ones((2, 2)))
    with nc.no_grad():
        y = nc.mul(x, 2.0)
    assert not y.requires_grad
    z = nc.mul(x, 2.0)
    assert z.requires_grad


def test_gradcheck_channel_norm():
    rng = np.random.default_rng(28)
    x = t64(rng.normal(size=(2, 5, 3, 3)))
    g = t64(rng.normal(size=(5,)))
    b = t64(rng.normal(size=(5,)))
    lw = random_loss_weights(rng, (2, 5, 3, 3))
    check_gradients(lambda: scalarize(nc.channel_norm(x, g, b, eps=1e-5), lw), [x, g, b])


def test_channel_norm_moments():
    rng = np.random.default_rng(29)
    x = nc.tensor(rng.normal(1.0, 2.0, size=(2, 32, 4, 4)), dtype=np.float64)
    ones = nc.tensor(np.ones(32), dtype=np.float64)
    zeros = nc.tensor(np.zeros(32), dtype=np.float64)
    out = nc.channel_norm(x, ones, zeros, eps=1e-8).data
    assert np.abs(out.mean(axis=1)).max() < 1e-6
    assert np.abs(out.var(axis=1) - 1.0).max() < 1e-4
