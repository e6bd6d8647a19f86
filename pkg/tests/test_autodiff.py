import numpy as np
import pytest

from gradutil import max_rel_error, probe_pairs
from steerlab.autodiff import (AdamW, AdamWConfig, Conv2d, Linear, Tensor, backward, checkpoint, concat,
                               finite_difference_oracle, no_grad, relative_error)
from steerlab.autodiff import functional as F
from steerlab.autodiff.tensor import unbroadcast
from steerlab.errors import ConfigurationError, ContractError, NumericError, ShapeError

RNG = np.random.default_rng(1234)


def rnd(*shape):
    return RNG.standard_normal(shape)


def weighted(out, seed=7):
    """Reduce any output to a scalar with fixed random weights (avoids symmetric gradients)."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * w).sum()


OPS = {
    "add_broadcast": (lambda a, b: weighted(a + b), [rnd(3, 4), rnd(4)]),
    "sub": (lambda a, b: weighted(a - b), [rnd(3, 4), rnd(3, 4)]),
    "rsub": (lambda a: weighted(2.0 - a), [rnd(5)]),
    "neg": (lambda a: weighted(-a), [rnd(2, 3)]),
    "mul_broadcast": (lambda a, b: weighted(a * b), [rnd(2, 3, 4), rnd(1, 3, 1)]),
    "div_const": (lambda a: weighted(a / 3.0), [rnd(3, 3)]),
    "reshape": (lambda a: weighted(a.reshape(6, 2)), [rnd(3, 4)]),
    "transpose": (lambda a: weighted(a.transpose(2, 0, 1)), [rnd(2, 3, 4)]),
    "sum_axis": (lambda a: weighted(a.sum(axis=1, keepdims=True)), [rnd(3, 4, 2)]),
    "mean": (lambda a: weighted(a.mean(axis=(0, 2))), [rnd(3, 4, 2)]),
    "concat": (lambda a, b: weighted(concat([a, b], axis=-1)), [rnd(2, 3, 2), rnd(2, 3, 5)]),
    "linear": (lambda x, w, b: weighted(F.linear(x, w, b)), [rnd(4, 5), rnd(5, 3), rnd(3)]),
    "conv2d": (lambda x, k, b: weighted(F.conv2d(x, k, b)), [rnd(2, 5, 4, 3), rnd(4, 3, 3, 3), rnd(4)]),
    "group_norm": (lambda x: weighted(F.group_norm(x, 2)), [rnd(2, 3, 3, 4)]),
    "sigmoid": (lambda x: weighted(F.sigmoid(x)), [rnd(4, 4)]),
    "silu": (lambda x: weighted(F.silu(x)), [rnd(4, 4)]),
    "avg_pool2": (lambda x: weighted(F.avg_pool2(x)), [rnd(1, 4, 6, 2)]),
    "upsample2": (lambda x: weighted(F.upsample2(x)), [rnd(1, 2, 3, 2)]),
    "embedding": (lambda t: weighted(F.embedding(t, [[0, 2], [2, 1]])), [rnd(3, 4)]),
    "mse_loss": (lambda p: F.mse_loss(p, np.ones((3, 4))), [rnd(3, 4)]),
    "cross_entropy": (lambda z: F.cross_entropy(z, [0, 2, 1]), [rnd(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_oracle(name):
    fn, arrays = OPS[name]
    pairs = probe_pairs(fn, arrays, n_probes=24)
    assert len(pairs) >= 20
    assert max_rel_error(pairs) < 1e-3, name


def test_reused_node_accumulates_gradient():
    # x appears twice in the graph; topological order must sum both paths
    pairs = probe_pairs(lambda x: weighted(F.silu(x) * x + x), [rnd(3, 3)])
    assert max_rel_error(pairs) < 1e-3


def test_division_by_tensor_is_rejected():
    with pytest.raises(TypeError):
        Tensor(rnd(2)) / Tensor(rnd(2))


def test_unbroadcast_sums_expanded_axes():
    g = np.ones((2, 3, 4))
    assert unbroadcast(g, (4,)).tolist() == [6.0] * 4
    assert unbroadcast(g, (3, 1)).shape == (3, 1)
    assert np.all(unbroadcast(g, (3, 1)) == 8.0)


def test_no_grad_builds_no_graph():
    w = Tensor(rnd(3), requires_grad=True)
    with no_grad():
        y = (w * 2.0).sum()
    assert y._parents == ()
    y2 = (w * 2.0).sum()
    backward(y2)
    assert np.allclose(w.grad, 2.0)


def test_tensor_defaults_to_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, np.float64)).dtype == np.float64


def test_conv_shape_error():
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(rnd(1, 4, 4, 2)), Tensor(rnd(3, 5, 3, 3)))


def test_groupnorm_rejects_indivisible_channels():
    with pytest.raises((ShapeError, ConfigurationError)):
        F.group_norm(Tensor(rnd(1, 2, 2, 6)), 4)


def test_groupnorm_constant_input_is_exactly_zero():
    x = Tensor(np.full((2, 3, 3, 4), 0.7, np.float32))
    assert np.all(F.group_norm(x, 2).data == 0.0)


def test_groupnorm_matches_reference_statistics():
    x = rnd(2, 4, 4, 6).astype(np.float32)
    out = F.group_norm(Tensor(x), 3).data.astype(np.float64)
    ref = x.astype(np.float64).reshape(2, 16, 3, 2)
    mu = ref.mean(axis=(1, 3), keepdims=True)
    var = ref.var(axis=(1, 3), keepdims=True)
    ref = ((ref - mu) / np.sqrt(var + 1e-5)).reshape(x.shape)
    assert np.max(np.abs(out - ref)) < 1e-5


def test_conv2d_matches_direct_loop():
    x = rnd(1, 4, 5, 2)
    k = rnd(3, 2, 3, 3)
    out = F.conv2d(Tensor(x), Tensor(k)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 4, 5, 3))
    for i in range(4):
        for j in range(5):
            patch = xp[0, i:i + 3, j:j + 3, :]  # [3, 3, C]
            ref[0, i, j] = np.einsum("hwc,ochw->o", patch, k)
    assert np.max(np.abs(out - ref)) < 1e-10


def test_cross_entropy_value():
    z = np.array([[2.0, 0.0, -1.0]])
    expect = -np.log(np.exp(2.0) / np.exp(z).sum())
    assert float(F.cross_entropy(Tensor(z), [0]).data) == pytest.approx(expect, rel=1e-12)


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        F.embedding(Tensor(rnd(3, 2)), [3])


def test_oracle_rejects_bad_step_and_nonfinite():
    with pytest.raises(ConfigurationError):
        finite_difference_oracle(lambda xs: 0.0, [np.zeros(2)], h=1.0)
    with pytest.raises(NumericError):
        finite_difference_oracle(lambda xs: float("nan"), [np.zeros(2)])


def test_oracle_on_quadratic():
    a = np.array([1.0, -2.0, 3.0])
    g = finite_difference_oracle(lambda xs: float(np.sum(xs[0] ** 2)), [a])[0]
    assert np.allclose(g, 2 * a, atol=1e-8)
    assert relative_error(g, 2 * a) < 1e-8


# -- optimiser -----------------------------------------------------------------------


def test_adamw_cosine_schedule():
    opt = AdamW([Tensor(np.zeros(1), requires_grad=True)], AdamWConfig(lr=1.0, total_steps=4))
    assert [opt.lr_at(n) for n in range(5)] == pytest.approx([1.0, 0.8535533905932737, 0.5, 0.14644660940672627, 0.0])


def test_adamw_first_step_is_signed_lr():
    p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    opt = AdamW([p], AdamWConfig(lr=0.1, total_steps=10, clip_norm=None))
    p.grad = np.array([3.0, -0.5])
    opt.step()
    assert np.allclose(p.data, [0.9, 1.1], atol=1e-6)


def test_adamw_decoupled_weight_decay():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW([p], AdamWConfig(lr=0.1, weight_decay=0.5, total_steps=10, clip_norm=None))
    p.grad = np.array([0.0])
    opt.step()
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adamw_requires_gradients_and_finite_norm():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = AdamW([("w", p)], AdamWConfig())
    with pytest.raises(ContractError):
        opt.step()
    p.grad = np.array([np.inf, 0.0])
    with pytest.raises(NumericError):
        opt.step()


def test_adamw_clips_global_norm():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = AdamW([p], AdamWConfig(lr=0.1, clip_norm=1.0))
    p.grad = np.array([30.0, 40.0])
    opt.step()
    assert opt.last_grad_norm == pytest.approx(50.0)


def test_adamw_fits_linear_regression():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((64, 3))
    w_true = np.array([1.5, -2.0, 0.5])
    y = X @ w_true
    lin = Linear(3, 1, rng)
    opt = AdamW(lin.trainable_parameters(), AdamWConfig(lr=0.05, total_steps=400))
    for _ in range(400):
        loss = F.mse_loss(lin(X.astype(np.float32)), y[:, None])
        opt.zero_grad()
        backward(loss)
        opt.step()
    assert np.allclose(lin.weight.data[:, 0], w_true, atol=0.05)


# -- modules and checkpoints -----------------------------------------------------------


def test_module_state_dict_roundtrip_and_freeze():
    conv = Conv2d(2, 3, np.random.default_rng(0))
    other = Conv2d(2, 3, np.random.default_rng(1))
    other.load_state_dict(conv.state_dict())
    x = rnd(1, 4, 4, 2).astype(np.float32)
    assert np.array_equal(conv(x).data, other(x).data)
    conv.freeze()
    assert conv.trainable_parameters() == []


def test_load_state_dict_errors():
    lin = Linear(2, 3, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        lin.load_state_dict({"weight": np.zeros((2, 3))})
    with pytest.raises(ConfigurationError):
        lin.load_state_dict({"weight": np.zeros((3, 3)), "bias": np.zeros(3)})


def test_checkpoint_roundtrip_bytes_and_hash(tmp_path):
    recs = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "scalar": np.float32(2.5) * np.ones(()),
            "ünï": np.zeros((1, 0, 2), np.float32)}
    h = checkpoint.save(tmp_path / "c.stlb", recs)
    back = checkpoint.load(tmp_path / "c.stlb")
    assert list(back) == list(recs)
    for k in recs:
        assert back[k].shape == np.asarray(recs[k]).shape
        assert np.array_equal(back[k], recs[k])
    assert checkpoint.digest(back) == h
    assert checkpoint.dumps(back) == (tmp_path / "c.stlb").read_bytes()


def test_checkpoint_rejects_corruption():
    blob = checkpoint.dumps({"a": np.ones(3, np.float32)})
    with pytest.raises(ConfigurationError):
        checkpoint.loads(b"XXXX" + blob[4:])
    with pytest.raises(ConfigurationError):
        checkpoint.loads(blob + b"\0")


# -- hand-checked values --------------------------------------------------------------


def test_linear_hand_values():
    eye = F.linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    assert eye.data.tolist() == [[1.0, 2.0]]
    y = F.linear(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    assert y.data.tolist() == [[6.0]]


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 1\)|\(4, 1\).*\(2, 3\)"):
        F.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 1))))


def test_conv_identity_and_box_kernels():
    x = rnd(1, 5, 5, 2)
    k = np.zeros((2, 2, 3, 3))
    k[0, 0, 1, 1] = k[1, 1, 1, 1] = 1.0
    assert np.array_equal(F.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(2))).data, x)
    box = F.conv2d(Tensor(np.full((1, 5, 5, 1), 0.5)), Tensor(np.ones((1, 1, 3, 3)))).data
    assert box[0, 2, 2, 0] == pytest.approx(4.5)
    assert box[0, 0, 0, 0] == pytest.approx(2.0)  # corner sees 4 pixels under zero padding


def test_sum_of_linear_and_conv_gradients_at_1e4():
    # the tighter per-op tolerance with the oracle's default step
    for fn, arrays in (OPS["linear"], OPS["conv2d"], OPS["group_norm"]):
        assert max_rel_error(probe_pairs(fn, arrays, h=1e-3)) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_groupnorm_statistics(seed):
    x = np.random.default_rng(seed).standard_normal((2, 4, 4, 8)) * 3.0 + 1.5
    y = F.group_norm(Tensor(x.astype(np.float32)), 4).data.astype(np.float64).reshape(2, 16, 4, 2)
    assert np.all(np.abs(y.mean(axis=(1, 3))) < 1e-5)
    assert np.all(np.abs(y.var(axis=(1, 3)) - 1.0) < 1e-3)


def test_activation_values():
    assert float(F.activation(Tensor(0.0), "silu").data) == 0.0
    assert float(F.activation(Tensor(0.0), "sigmoid").data) == 0.5
    assert float(F.silu(Tensor(np.float64(1.0))).data) == pytest.approx(0.7310585786300049, abs=1e-12)
    with pytest.raises(ConfigurationError):
        F.activation(Tensor(0.0), "relu")


def test_backward_simple_sums():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    backward(x.sum())
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    y = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    backward((y * y).sum())
    assert y.grad.tolist() == [2.0, -4.0, 6.0]


def test_backward_rejects_non_scalar_and_leaves_unreachable():
    a = Tensor(rnd(3), requires_grad=True)
    b = Tensor(rnd(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(a * 2.0)
    backward((a * 2.0).sum())
    assert b.grad is None


@pytest.mark.parametrize("seed", range(20))
def test_composed_ops_property(seed):
    rng = np.random.default_rng(100 + seed)
    x, w, k = rng.standard_normal((1, 4, 4, 2)), rng.standard_normal((2, 3)), rng.standard_normal((2, 2, 3, 3))

    def fn(x, w, k):
        h = F.silu(F.group_norm(F.conv2d(x, k), 2))
        return weighted(F.linear(F.avg_pool2(h), w), seed)

    assert max_rel_error(probe_pairs(fn, [x, w, k], n_probes=20, seed=seed)) < 1e-3


def test_adamw_zero_gradient_no_decay_is_identity_and_counts_steps():
    p = Tensor(np.array([1.5, -0.5]), requires_grad=True)
    opt = AdamW([p], AdamWConfig(lr=0.1))
    for n in range(3):
        p.grad = np.zeros(2)
        opt.step()
        assert opt.step_count == n + 1
    assert p.data.tolist() == [1.5, -0.5]


def test_adamw_first_step_closed_form():
    # m_hat = g, v_hat = g^2, so the first update is lr * g / (|g| + eps)
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = AdamW([p], AdamWConfig(lr=0.1, betas=(0.9, 0.999), clip_norm=None, total_steps=100))
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(-0.1 / (1.0 + 1e-8), rel=1e-6)


def test_oracle_textbook_functions():
    g = finite_difference_oracle(lambda xs: float(xs[0][0] ** 2), [np.array([3.0])], h=1e-3)
    assert g[0][0] == pytest.approx(6.0, abs=1e-6)
    g = finite_difference_oracle(lambda xs: float(np.sin(xs[0][0])), [np.array([0.0])], h=1e-3)
    assert g[0][0] == pytest.approx(1.0, abs=1e-6)


def test_forward_is_bit_deterministic():
    x, k = rnd(2, 6, 6, 3).astype(np.float32), rnd(4, 3, 3, 3).astype(np.float32)
    a = F.group_norm(F.conv2d(Tensor(x), Tensor(k)), 2).data
    b = F.group_norm(F.conv2d(Tensor(x.copy()), Tensor(k.copy())), 2).data
    assert a.tobytes() == b.tobytes()


def test_checkpoint_header_layout():
    blob = checkpoint.dumps({"w": np.ones((2, 3), np.float32)})
    assert blob[:4] == b"STLB"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 1
    assert int.from_bytes(blob[12:14], "little") == 1 and blob[14:15] == b"w"
    assert blob[15] == 2
    assert len(blob) == 16 + 8 + 24
