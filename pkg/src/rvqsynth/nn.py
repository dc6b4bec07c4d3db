"""Layers, parameters, and the Adam optimizer.

Layer hyperparameters are plain data (see ``Layer.spec``) so checkpoints can
describe their own architecture. All layers operate on batched sequences of
shape (B, T, C); Dense also accepts (N, C).
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, concat, pad_axis, softmax


class DivergenceError(RuntimeError):
    """Raised when training produces non-finite values."""


class Parameter(Tensor):
    """A trainable tensor with Adam accumulators."""

    __slots__ = ("adam_m", "adam_v", "adam_step")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.adam_step = 0

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """Standard bias-corrected Adam update. Aborts before touching any
    parameter if any gradient is non-finite."""
    params = list(params)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError("non-finite gradient; step aborted")
    for p in params:
        p.adam_step += 1
        t = p.adam_step
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * p.grad
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * p.grad * p.grad
        mhat = p.adam_m / (1.0 - beta1 ** t)
        vhat = p.adam_v / (1.0 - beta2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


class Module:
    """Base class providing parameter discovery by attribute walking."""

    def parameters(self) -> dict:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                out[name] = value
            elif isinstance(value, Module):
                for sub, p in value.parameters().items():
                    out[f"{name}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.parameters().items():
                            out[f"{name}.{i}.{sub}"] = p
                    elif isinstance(item, Parameter):
                        out[f"{name}.{i}"] = item
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    scale = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-scale, scale, size=shape)


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(_init(rng, in_dim, (in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    @property
    def spec(self):
        return {"kind": "dense", "in_dim": self.in_dim, "out_dim": self.out_dim,
                "bias": self.bias is not None}

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(
                f"dense expects last dim {self.in_dim}, got {x.shape}")
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv1d(Module):
    """1-D convolution over the time axis of (B, T, C) input.

    ``mode='causal'`` reads only indices <= t; ``mode='same'`` uses a centered
    window (odd kernel sizes only).
    """

    def __init__(self, in_dim: int, out_dim: int, kernel: int,
                 rng: np.random.Generator, dilation: int = 1,
                 mode: str = "causal", bias: bool = True):
        if mode not in ("causal", "same"):
            raise ValueError(f"unknown conv mode {mode!r}")
        if mode == "same" and kernel % 2 == 0:
            raise ValueError("'same' convolution requires an odd kernel size")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.kernel = kernel
        self.dilation = dilation
        self.mode = mode
        self.weight = Parameter(_init(rng, in_dim * kernel, (kernel, in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    @property
    def spec(self):
        return {"kind": "conv1d", "in_dim": self.in_dim, "out_dim": self.out_dim,
                "kernel": self.kernel, "dilation": self.dilation,
                "mode": self.mode, "bias": self.bias is not None}

    @property
    def radius(self) -> int:
        """Half-width of the centered receptive field ('same' mode)."""
        return (self.kernel - 1) // 2 * self.dilation

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"conv1d expects last dim {self.in_dim}, got {x.shape}")
        T = x.shape[-2]
        k, d = self.kernel, self.dilation
        if self.mode == "causal":
            before, after = (k - 1) * d, 0
        else:
            before = after = (k - 1) // 2 * d
        padded = pad_axis(x, x.ndim - 2, before, after)
        out = None
        for tap in range(k):
            idx = [slice(None)] * x.ndim
            idx[-2] = slice(tap * d, tap * d + T)
            term = padded[tuple(idx)] @ self.weight[tap]
            out = term if out is None else out + term
        if self.bias is not None:
            out = out + self.bias
        return out


class SelfAttention(Module):
    """Multi-head self-attention with an optional causal mask."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator,
                 causal: bool = True):
        if width % heads != 0:
            raise ValueError("width must be divisible by heads")
        self.width = width
        self.heads = heads
        self.causal = causal
        self.wq = Dense(width, width, rng)
        self.wk = Dense(width, width, rng)
        self.wv = Dense(width, width, rng)
        self.wo = Dense(width, width, rng)

    @property
    def spec(self):
        return {"kind": "attention", "width": self.width, "heads": self.heads,
                "causal": self.causal}

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.width:
            raise ShapeError(f"attention expects (B, L, {self.width}), got {x.shape}")
        B, L, W = x.shape
        nh = self.heads
        dh = W // nh

        def split(t):
            return t.reshape(B, L, nh, dh).swapaxes(1, 2)  # (B, nh, L, dh)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        if self.causal:
            mask = np.triu(np.full((L, L), -1e30), k=1)
            scores = scores + Tensor(mask)
        attn = softmax(scores, axis=-1)
        out = (attn @ v).swapaxes(1, 2).reshape(B, L, W)
        return self.wo(out)


class TransformerBlock(Module):
    """Pre-activation attention + feedforward block with residuals."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator,
                 causal: bool = True, ff_mult: int = 2):
        self.attn = SelfAttention(width, heads, rng, causal=causal)
        self.ff1 = Dense(width, ff_mult * width, rng)
        self.ff2 = Dense(ff_mult * width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(x)
        return x + self.ff2(self.ff1(x).leaky_relu(0.1))


def build_layer(spec: dict, rng: np.random.Generator):
    """Construct a layer from its data description."""
    kind = spec["kind"]
    if kind == "dense":
        return Dense(spec["in_dim"], spec["out_dim"], rng, bias=spec.get("bias", True))
    if kind == "conv1d":
        return Conv1d(spec["in_dim"], spec["out_dim"], spec["kernel"], rng,
                      dilation=spec.get("dilation", 1), mode=spec.get("mode", "causal"),
                      bias=spec.get("bias", True))
    if kind == "attention":
        return SelfAttention(spec["width"], spec["heads"], rng,
                             causal=spec.get("causal", True))
    raise ValueError(f"unknown layer kind {kind!r}")


def forward_layer(layer, x) -> Tensor:
    """Apply a layer to an input array or Tensor."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    return layer(x)


def finite_difference_grad(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g
