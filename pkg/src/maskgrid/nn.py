"""Network building blocks on top of the autograd tensor.

Modules hold parameters and child modules as plain attributes; parameter
names follow attribute paths ("blocks.0.attn.qkv.weight") so checkpoint
entries are stable across runs.
"""

from __future__ import annotations

import contextlib
import warnings
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


@contextlib.contextmanager
def frozen(*modules: "Module"):
    """Temporarily stop gradient collection for the modules' parameters.

    Gradients still flow *through* their operations to upstream inputs;
    only the parameters themselves stop accumulating.
    """
    params = [p for m in modules for p in m.parameters()]
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, prev):
            p.requires_grad = flag


class Module:
    """Base class: parameter discovery, train/eval mode, state dicts."""

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name == "training":
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self) -> "Module":
        for m in self.modules():
            m.training = True
        return self

    def eval(self) -> "Module":
        for m in self.modules():
            m.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: np.array(p.data) for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(
                f"state dict mismatch: missing {missing or 'none'}, unexpected {extra or 'none'}"
            )
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"parameter {name}: checkpoint extents {arr.shape} != model extents {p.data.shape}"
                )
            p.data = arr.copy()


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        bias: bool = True,
    ):
        super().__init__()
        k = kernel_size
        if padding is None:
            padding = (k - 1) // 2
        self.stride = stride
        self.padding = padding
        std = float(np.sqrt(2.0 / (in_channels * k * k)))
        self.weight = Tensor(
            rng.normal(0.0, std, size=(out_channels, in_channels, k, k)),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1)
        return out


class Linear(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
        init_std: float | None = None,
        zero_init: bool = False,
    ):
        super().__init__()
        if zero_init:
            w = np.zeros((in_features, out_features))
        else:
            std = init_std if init_std is not None else float(np.sqrt(2.0 / in_features))
            w = rng.normal(0.0, std, size=(in_features, out_features))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        out = T.matmul(x.reshape(-1, x.shape[-1]), self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(*lead, self.weight.shape[1])


def layernorm(x: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalize to zero mean, unit variance along one axis (no affine)."""
    if x.shape[axis % x.ndim] < 1:
        raise ValueError(f"layernorm axis {axis} has extent 0")
    return T.normalize_core(x, eps, axis)


class LayerNorm(Module):
    """Layer normalization with learned scale/offset along `axis`."""

    def __init__(self, channels: int, axis: int = -1, eps: float = 1e-5):
        super().__init__()
        self.axis = axis
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        xn = layernorm(x, eps=self.eps, axis=self.axis)
        if self.axis == -1 or self.axis == x.ndim - 1:
            return xn * self.gamma + self.beta
        shape = [1] * x.ndim
        shape[self.axis] = self.gamma.shape[0]
        return xn * self.gamma.reshape(shape) + self.beta.reshape(shape)


class Embedding(Module):
    def __init__(self, rows: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        self.weight = Tensor(rng.normal(0.0, std, size=(rows, dim)), requires_grad=True)

    def forward(self, idx: np.ndarray) -> Tensor:
        return T.gather_rows(self.weight, np.asarray(idx))


def softmax(logits: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Stable softmax of `logits / temperature` along `axis`.

    Higher temperature flattens the distribution; lower sharpens it.
    """
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be > 0, got {temperature}")
    z = logits if temperature == 1.0 else logits * (1.0 / temperature)
    return T.softmax_core(z, axis=axis)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits - Tensor(logits.data.max(axis=axis, keepdims=True))
    return z - T.log(T.sum_(T.exp(z), axis=axis, keepdims=True))


def attention(q: Tensor, k: Tensor, v: Tensor, dropout_mask: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention over (N, heads, L, d) tensors."""
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.ndim != 4:
            raise ValueError(f"attention {name} must be 4-d (N, heads, L, d), got {t.shape}")
    if not (q.shape == k.shape == v.shape):
        raise ValueError(
            f"attention extents differ: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    d = q.shape[-1]
    scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / float(np.sqrt(d)))
    weights = softmax(scores, axis=-1)
    if dropout_mask is not None:
        weights = weights * dropout_mask
    return T.matmul(weights, v)


def gelu(x: Tensor) -> Tensor:
    c = float(np.sqrt(2.0 / np.pi))
    return 0.5 * x * (1.0 + T.tanh(c * (x + 0.044715 * x * x * x)))


def dropout_mask(shape, p: float, rng: np.random.Generator) -> Tensor:
    keep = (rng.random(shape) >= p).astype(np.float32) / (1.0 - p)
    return Tensor(keep)


def token_nll(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under (R, K) logits."""
    lsm = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=np.float32)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -T.sum_(lsm * Tensor(onehot)) * (1.0 / max(1, len(labels)))


def nearest_upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of an NCHW tensor."""
    n, c, h, w = x.shape
    out = x.reshape(n, c, h, 1, w, 1)
    out = T.broadcast_to(out, (n, c, h, 2, w, 2))
    return out.reshape(n, c, 2 * h, 2 * w)


def avgpool2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.reshape(n, c, h // 2, 2, w // 2, 2)
    return T.mean(out, axis=(3, 5))


# -- optimizer ---------------------------------------------------------------


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: list[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(
    params: list[Tensor],
    lr: float,
    betas: tuple[float, float],
    state: AdamState,
    eps: float = 1e-8,
) -> None:
    """One Adam update over `params`; parameters without grads are skipped."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, p in enumerate(params):
        if p.grad is None:
            warnings.warn(f"adam_step: parameter {i} has no grad, skipping")
            continue
        g = p.grad.data
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        mh = state.m[i] / bc1
        vh = state.v[i] / bc2
        p.data = p.data - np.float32(lr) * mh / (np.sqrt(vh) + eps)


class Adam:
    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState(self.params)

    def step(self) -> None:
        adam_step(self.params, self.lr, self.betas, self.state, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
