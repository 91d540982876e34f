import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focusnav import autodiff as ad
from focusnav.autodiff import Tensor
from focusnav.autodiff.gradcheck import check_gradients, relative_error

TOL = 1e-4


def rand(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def weighted_sum(y, rng_seed=7):
    # A fixed random projection makes every output entry matter.
    w = np.random.default_rng(rng_seed).normal(size=y.shape)
    return (y * Tensor(w)).sum()


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal((Tensor(np.eye(4)) @ Tensor(a)).data, a)


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)


def test_shape_error_names_op():
    with pytest.raises(ad.ShapeError, match="matmul"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ad.ShapeError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


UNARY = {
    "exp": ad.exp,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "relu": ad.relu,
    "sin": ad.sin,
    "cos": ad.cos,
    "square": ad.square,
    "softmax0": lambda x: ad.softmax(x, axis=0),
    "softmax1": lambda x: ad.softmax(x, axis=-1),
    "log_softmax": lambda x: ad.log_softmax(x, axis=-1),
    "max0": lambda x: ad.max_over_axis(x, 0),
    "max1": lambda x: ad.max_over_axis(x, 1),
    "mean": lambda x: ad.mean(x, axis=1),
    "sum": lambda x: ad.sum_(x, axis=0, keepdims=True),
    "reshape": lambda x: ad.reshape(x, (2, 12)),
    "transpose": lambda x: ad.transpose(x, (1, 0)),
    "slice": lambda x: x[1:3, ::2],
    "fancy_index": lambda x: x[np.array([0, 0, 3]), :],
    "clip": lambda x: ad.clip(x, -0.5, 0.5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = rand(rng, 4, 6)
    if name == "relu" or name == "clip":
        x.data[np.abs(x.data) < 0.05] += 0.2  # keep away from kinks
    err = check_gradients(lambda: weighted_sum(UNARY[name](x)), [x])
    assert err <= TOL, err


def test_log_gradient():
    rng = np.random.default_rng(1)
    x = rand(rng, 3, 4, positive=True)
    assert check_gradients(lambda: weighted_sum(ad.log(x)), [x]) <= TOL


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_broadcast_gradients(op):
    rng = np.random.default_rng(2)
    a = rand(rng, 3, 4)
    b = rand(rng, 4, positive=True)
    fn = getattr(ad, op)
    assert check_gradients(lambda: weighted_sum(fn(a, b)), [a, b]) <= TOL


def test_matmul_batched_gradient():
    rng = np.random.default_rng(3)
    a = rand(rng, 2, 3, 4)
    b = rand(rng, 4, 5)
    assert check_gradients(lambda: weighted_sum(a @ b), [a, b]) <= TOL


def test_concat_stack_take_gradient():
    rng = np.random.default_rng(4)
    a, b = rand(rng, 2, 3), rand(rng, 4, 3)
    idx = np.array([[0, 5], [5, 1], [2, 2]])
    assert check_gradients(lambda: weighted_sum(ad.take_rows(ad.concat([a, b], 0), idx)), [a, b]) <= TOL
    assert check_gradients(lambda: weighted_sum(ad.stack([a, a * 2.0], axis=1)), [a]) <= TOL


def test_layernorm_gradient():
    rng = np.random.default_rng(5)
    x, g, b = rand(rng, 3, 2, 8), rand(rng, 8), rand(rng, 8)
    assert check_gradients(lambda: weighted_sum(ad.layernorm(x, g, b)), [x, g, b]) <= TOL


def test_layernorm_forward_reference():
    x = np.random.default_rng(6).normal(size=(5, 7))
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    out = ad.layernorm(Tensor(x), Tensor(np.ones(7)), Tensor(np.zeros(7))).data
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("stride,padding,dilation", [(1, 1, 1), (2, 1, 1), (1, 0, 1), (1, 2, 2)])
def test_conv2d_gradient_and_reference(stride, padding, dilation):
    rng = np.random.default_rng(7)
    x, w, b = rand(rng, 2, 3, 7, 7), rand(rng, 4, 3, 3, 3), rand(rng, 4)
    out = ad.conv2d(x, w, b, stride=stride, padding=padding, dilation=dilation).data
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    span = 2 * dilation + 1
    Ho = (xp.shape[2] - span) // stride + 1
    ref = np.zeros((2, 4, Ho, Ho))
    for i in range(Ho):
        for j in range(Ho):
            patch = xp[:, :, i * stride:i * stride + span:dilation, j * stride:j * stride + span:dilation]
            ref[:, :, i, j] = np.einsum("bcij,ocij->bo", patch, w.data) + b.data
    np.testing.assert_allclose(out, ref, atol=1e-12)
    err = check_gradients(lambda: weighted_sum(ad.conv2d(x, w, b, stride=stride, padding=padding, dilation=dilation)),
                          [x, w, b])
    assert err <= TOL


def test_scatter_rows_gradient():
    rng = np.random.default_rng(41)
    x = rand(rng, 3, 4)
    idx = np.array([5, 0, 2])
    out = ad.scatter_rows(x, idx, 6)
    np.testing.assert_array_equal(out.data[[1, 3, 4]], 0.0)
    np.testing.assert_array_equal(out.data[idx], x.data)
    assert check_gradients(lambda: weighted_sum(ad.scatter_rows(x, idx, 6)), [x]) <= TOL


def test_conv3d_gradient_and_reference():
    rng = np.random.default_rng(8)
    x, w, b = rand(rng, 1, 2, 3, 4, 4), rand(rng, 3, 2, 3, 3, 3), rand(rng, 3)
    out = ad.conv3d(x, w, b, padding=1).data
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for d in range(3):
        for i in range(4):
            for j in range(4):
                ref[:, :, d, i, j] = np.einsum("bcxyz,ocxyz->bo", xp[:, :, d:d + 3, i:i + 3, j:j + 3], w.data) + b.data
    np.testing.assert_allclose(out, ref, atol=1e-12)
    assert check_gradients(lambda: weighted_sum(ad.conv3d(x, w, b, padding=1)), [x, w, b]) <= TOL


def test_conv3d_rejects_large_kernels():
    with pytest.raises(ad.ShapeError):
        ad.conv3d(Tensor(np.zeros((1, 1, 5, 5, 5))), Tensor(np.zeros((1, 1, 5, 5, 5))))


def test_pool_and_upsample_gradients():
    rng = np.random.default_rng(9)
    x = rand(rng, 2, 3, 4, 6)
    assert check_gradients(lambda: weighted_sum(ad.max_pool2d(x, 2)), [x]) <= TOL
    assert check_gradients(lambda: weighted_sum(ad.upsample_nearest2d(x, 2)), [x]) <= TOL
    np.testing.assert_array_equal(ad.max_pool2d(x, 2).data[0, 0, 0, 0], x.data[0, 0, :2, :2].max())


def test_gru_cell_gradient_and_reference():
    rng = np.random.default_rng(10)
    H = 5
    x, h = rand(rng, 3, 4), rand(rng, 3, H)
    wi, wh, bi, bh = rand(rng, 4, 3 * H), rand(rng, H, 3 * H), rand(rng, 3 * H), rand(rng, 3 * H)

    def sig(a):
        return 1 / (1 + np.exp(-a))

    gi = x.data @ wi.data + bi.data
    gh = h.data @ wh.data + bh.data
    r = sig(gi[:, :H] + gh[:, :H])
    z = sig(gi[:, H:2 * H] + gh[:, H:2 * H])
    n = np.tanh(gi[:, 2 * H:] + r * gh[:, 2 * H:])
    ref = (1 - z) * n + z * h.data
    np.testing.assert_allclose(ad.gru_cell(x, h, wi, wh, bi, bh).data, ref, atol=1e-12)
    err = check_gradients(lambda: weighted_sum(ad.gru_cell(x, h, wi, wh, bi, bh)), [x, h, wi, wh, bi, bh])
    assert err <= TOL


def test_attention_gradient_with_mask():
    rng = np.random.default_rng(11)
    q, k, v = rand(rng, 2, 3, 4), rand(rng, 2, 3, 4), rand(rng, 2, 3, 4)
    mask = ad.causal_mask(3)
    assert check_gradients(lambda: weighted_sum(ad.attention(q, k, v, mask)[0]), [q, k, v]) <= TOL


def test_modules_gradient():
    rng = np.random.default_rng(12)
    enc = ad.EncoderLayer(8, 2, rng)
    dec = ad.DecoderLayer(8, 2, rng)
    x, mem = rand(rng, 2, 3, 8), rand(rng, 2, 5, 8)
    params = enc.parameters() + dec.parameters()

    def loss():
        return weighted_sum(dec(enc(x), mem, ad.causal_mask(3)))

    assert check_gradients(loss, params + [x, mem], max_entries=6) <= TOL


# -- sinusoidal position embedding --------------------------------------------

def test_pe_origin_pattern():
    pe = ad.sinusoidal_pe(np.zeros((1, 2)), 16).data[0]
    np.testing.assert_array_equal(pe, np.tile([0.0, 1.0], 8))


def test_pe_identical_rows_and_dim_error():
    c = np.array([[1.3, -0.7], [1.3, -0.7]])
    pe = ad.sinusoidal_pe(c, 32).data
    np.testing.assert_array_equal(pe[0], pe[1])
    with pytest.raises(ValueError):
        ad.sinusoidal_pe(c, 30)


def test_pe_similarity_decays_with_distance():
    # Numeric sweep over half the shortest wavelength (0.4 m): every band's
    # cosine term is decreasing there, so the dot product must be too.
    d = 32
    ref = ad.sinusoidal_pe(np.zeros((1, 2)), d).data[0]
    xs = np.linspace(0.0, 0.2, 21)
    sims = np.array([ad.sinusoidal_pe(np.array([[x, 0.0]]), d).data[0] @ ref for x in xs])
    assert sims[0] == pytest.approx(d / 2)
    assert np.all(np.diff(sims) < 0)
    far = [ad.sinusoidal_pe(np.array([[x, 0.0]]), d).data[0] @ ref for x in np.linspace(0.3, 3.0, 28)]
    assert max(far) < sims[0] - 1.0


def test_pe_gradient_wrt_coords():
    rng = np.random.default_rng(13)
    c = rand(rng, 3, 2)
    assert check_gradients(lambda: weighted_sum(ad.sinusoidal_pe(c, 16)), [c]) <= TOL


# -- Gumbel-Softmax ------------------------------------------------------------

def test_gumbel_confident_logits():
    rng = np.random.default_rng(0)
    logits = Tensor(np.tile([-10.0, 10.0], (100_000, 1)))
    y = ad.gumbel_softmax(logits, 1.0, True, rng).data
    assert y[:, 1].mean() > 0.999


def test_gumbel_equal_logits_fifty_fifty():
    rng = np.random.default_rng(1)
    y = ad.gumbel_softmax(Tensor(np.zeros((100_000, 2))), 1.0, True, rng).data
    assert abs(y[:, 1].mean() - 0.5) <= 0.01


def test_gumbel_hard_is_one_hot_with_soft_gradient():
    rng = np.random.default_rng(2)
    logits = rand(rng, 50, 2)
    y = ad.gumbel_softmax(logits, 0.7, True, np.random.default_rng(3))
    assert set(np.unique(y.data)) <= {0.0, 1.0}
    np.testing.assert_array_equal(y.data.sum(-1), 1.0)
    # Straight-through gradient equals the soft-sample gradient for the same noise.
    (y * Tensor(np.arange(100).reshape(50, 2))).sum().backward()
    g_hard = logits.grad.copy()
    logits.grad = None
    soft = ad.gumbel_softmax(logits, 0.7, False, np.random.default_rng(3))
    (soft * Tensor(np.arange(100).reshape(50, 2))).sum().backward()
    np.testing.assert_allclose(g_hard, logits.grad, atol=1e-15)


def test_gumbel_soft_gradient_fd():
    logits = rand(np.random.default_rng(4), 6, 2)
    err = check_gradients(lambda: weighted_sum(ad.gumbel_softmax(logits, 0.5, False, np.random.default_rng(5))), [logits])
    assert err <= TOL


def test_gumbel_low_temperature_converges_to_categorical():
    logits = np.array([0.3, -0.4])
    p = np.exp(logits) / np.exp(logits).sum()
    soft = ad.gumbel_softmax(Tensor(np.tile(logits, (100_000, 1))), 0.1, False, np.random.default_rng(6)).data
    np.testing.assert_allclose(soft.mean(0), p, atol=0.02)
    np.testing.assert_allclose((soft[:, 1] > 0.5).mean(), p[1], atol=0.02)


def test_gumbel_deterministic_under_seed():
    a = ad.gumbel_softmax(Tensor(np.zeros((10, 2))), 1.0, False, np.random.default_rng(9)).data
    b = ad.gumbel_softmax(Tensor(np.zeros((10, 2))), 1.0, False, np.random.default_rng(9)).data
    np.testing.assert_array_equal(a, b)


# -- Adam ----------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    new, _ = ad.adam_step(p, [np.zeros(2)], ad.AdamState(), lr=0.1)
    np.testing.assert_array_equal(new[0], p[0])


def test_adam_constant_gradient_step_is_lr_times_sign():
    # Closed form: with constant g, bias-corrected m/sqrt(v) = g/|g| exactly
    # (up to eps), so every step moves by lr * sign(g).
    p = [np.array([0.0, 0.0])]
    g = np.array([3.0, -0.02])
    state = ad.AdamState()
    for _ in range(200):
        prev = p[0].copy()
        p, state = ad.adam_step(p, [g], state, lr=0.01, eps=1e-12)
    np.testing.assert_allclose(p[0] - prev, -0.01 * np.sign(g), rtol=1e-8)


def test_adam_deterministic_and_shape_error():
    def run():
        p, s = [np.ones(3)], ad.AdamState()
        for i in range(5):
            p, s = ad.adam_step(p, [np.full(3, np.sin(i))], s, lr=0.05)
        return p[0]

    np.testing.assert_array_equal(run(), run())
    with pytest.raises(ad.ShapeError):
        ad.adam_step([np.ones(3)], [np.ones(2)], ad.AdamState())


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32), "b": np.float32([1.5]),
               "scalar": np.array(2.0, dtype=np.float32)}
    path = tmp_path / "x.fnv"
    ad.save_tensors(path, tensors)
    assert path.read_bytes()[:4] == b"FNV1"
    back = ad.load_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == np.asarray(tensors[k], dtype="<f4").tobytes()


def test_checkpoint_rejects_corrupt(tmp_path):
    path = tmp_path / "bad.fnv"
    path.write_bytes(b"XXXX")
    with pytest.raises(ad.CheckpointError):
        ad.load_tensors(path)
    ad.save_tensors(path, {"w": np.ones((2, 2))})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ad.CheckpointError):
        ad.load_tensors(path)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_softmax_rows_are_distributions(xs):
    y = ad.softmax(Tensor(np.array(xs))).data
    assert np.all(y >= 0)
    assert abs(y.sum() - 1.0) < 1e-12


def test_relative_error_helper():
    assert relative_error(np.ones(3), np.ones(3)) == 0.0
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
