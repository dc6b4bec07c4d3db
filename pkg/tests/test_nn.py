import numpy as np
import pytest

from rvqsynth.nn import (Conv1d, Dense, DivergenceError, Module, Parameter,
                         SelfAttention, TransformerBlock, adam_step,
                         build_layer, finite_difference_grad, forward_layer)
from rvqsynth.tensor import ShapeError, Tensor


def rng():
    return np.random.default_rng(0)


def test_dense_matches_manual():
    layer = Dense(3, 2, rng())
    x = rng().normal(0.0, 1.0, (5, 3))
    out = layer(Tensor(x)).data
    np.testing.assert_allclose(out, x @ layer.weight.data + layer.bias.data)


def test_dense_shape_check():
    layer = Dense(3, 2, rng())
    with pytest.raises(ShapeError):
        layer(Tensor(np.zeros((5, 4))))


def test_conv1d_causal_matches_manual():
    layer = Conv1d(2, 3, kernel=2, rng=rng(), mode="causal")
    x = rng().normal(0.0, 1.0, (1, 6, 2))
    out = layer(Tensor(x)).data[0]
    w, b = layer.weight.data, layer.bias.data
    for t in range(6):
        prev = x[0, t - 1] if t > 0 else np.zeros(2)
        want = prev @ w[0] + x[0, t] @ w[1] + b
        np.testing.assert_allclose(out[t], want)


def test_conv1d_causal_never_reads_future():
    layer = Conv1d(2, 2, kernel=3, rng=rng(), dilation=2, mode="causal")
    x = rng().normal(0.0, 1.0, (1, 10, 2))
    base = layer(Tensor(x)).data.copy()
    x2 = x.copy()
    x2[0, 7:] += 100.0
    np.testing.assert_array_equal(layer(Tensor(x2)).data[0, :7], base[0, :7])


def test_conv1d_same_is_centered():
    layer = Conv1d(1, 1, kernel=3, rng=rng(), mode="same", bias=False)
    x = np.zeros((1, 7, 1))
    x[0, 3, 0] = 1.0
    out = layer(Tensor(x)).data[0, :, 0]
    w = layer.weight.data[:, 0, 0]
    np.testing.assert_allclose(out[2:5], w[::-1])
    np.testing.assert_allclose(out[:2], 0.0)
    np.testing.assert_allclose(out[5:], 0.0)


def test_conv1d_same_rejects_even_kernel():
    with pytest.raises(ValueError):
        Conv1d(1, 1, kernel=2, rng=rng(), mode="same")


def test_attention_causal_mask():
    layer = SelfAttention(8, 2, rng(), causal=True)
    x = rng().normal(0.0, 1.0, (1, 5, 8))
    base = layer(Tensor(x)).data.copy()
    x2 = x.copy()
    x2[0, 3:] += 10.0
    np.testing.assert_array_equal(layer(Tensor(x2)).data[0, :3], base[0, :3])


def test_attention_rows_mix_when_not_causal():
    layer = SelfAttention(8, 2, rng(), causal=False)
    x = rng().normal(0.0, 1.0, (1, 5, 8))
    base = layer(Tensor(x)).data.copy()
    x2 = x.copy()
    x2[0, 4] += 10.0
    assert not np.allclose(layer(Tensor(x2)).data[0, 0], base[0, 0])


def test_transformer_block_grad_flows():
    block = TransformerBlock(8, 2, rng())
    x = Tensor(rng().normal(0.0, 1.0, (2, 4, 8)), requires_grad=True)
    block(x).sum().backward()
    assert np.any(x.grad != 0.0)
    for p in block.parameters().values():
        assert p.grad.shape == p.data.shape


def test_module_parameter_discovery_nested():
    class Net(Module):
        def __init__(self):
            self.a = Dense(2, 2, rng())
            self.blocks = [Dense(2, 2, rng()), Dense(2, 2, rng())]
            self.w = Parameter(np.zeros(3))

    names = set(Net().parameters())
    assert {"a.weight", "a.bias", "blocks.0.weight", "blocks.1.bias",
            "w"} <= names


def test_adam_reduces_quadratic():
    p = Parameter(np.array([5.0, -3.0]))
    for _ in range(300):
        p.grad = 2.0 * p.data
        adam_step([p], lr=0.05)
    assert np.all(np.abs(p.data) < 0.1)


def test_adam_aborts_on_nonfinite_grad_without_update():
    p = Parameter(np.ones(2))
    q = Parameter(np.ones(2))
    p.grad = np.array([1.0, np.nan])
    q.grad = np.ones(2)
    before_q = q.data.copy()
    with pytest.raises(DivergenceError):
        adam_step([q, p], lr=0.1)
    np.testing.assert_array_equal(q.data, before_q)
    assert q.adam_step == 0


def test_build_layer_roundtrip_specs():
    layers = [Dense(3, 4, rng()),
              Conv1d(3, 4, 3, rng(), dilation=2, mode="same"),
              SelfAttention(8, 2, rng(), causal=False)]
    for layer in layers:
        rebuilt = build_layer(layer.spec, rng())
        assert rebuilt.spec == layer.spec


def test_build_layer_rejects_unknown_kind():
    with pytest.raises(ValueError):
        build_layer({"kind": "pooling"}, rng())


def test_forward_layer_accepts_arrays():
    layer = Dense(2, 2, rng())
    out = forward_layer(layer, np.ones((3, 2)))
    assert isinstance(out, Tensor)


def test_finite_difference_matches_analytic():
    x = rng().normal(0.0, 1.0, (3,))
    g = finite_difference_grad(lambda a: float((a ** 2).sum()), x.copy())
    np.testing.assert_allclose(g, 2 * x, atol=1e-6)
