"""Transformer building blocks: linear layers, layer norm, FFN, attention, patch embedding."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import trunc_normal
from .tensor import ShapeError, Tensor

ACTIVATIONS = {"gelu": T.gelu, "relu": T.relu}


class Module:
    """Parameter container.

    Parameters are the ``requires_grad`` tensors reachable through attributes,
    sub-modules and lists of sub-modules, named by their attribute path.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: stored {state[name].shape} vs model {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def astype(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, std: float = 0.02):
        self.weight = T.parameter(trunc_normal(rng, (out_features, in_features), std))
        self.bias = T.parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gamma = T.parameter(np.ones(dim))
        self.beta = T.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    """Two-layer perceptron ``w2 · act(w1 · x + b1) + b2``."""

    def __init__(self, dim: int, rng: np.random.Generator, expansion: int = 4,
                 activation: str = "gelu", hidden: int | None = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        hidden = hidden if hidden is not None else expansion * dim
        self.w1 = T.parameter(trunc_normal(rng, (hidden, dim)))
        self.b1 = T.parameter(np.zeros(hidden))
        self.w2 = T.parameter(trunc_normal(rng, (dim, hidden)))
        self.b2 = T.parameter(np.zeros(dim))
        self.activation = activation

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return ffn_forward(self, x)


def ffn_forward(f: FeedForward, x: Tensor) -> Tensor:
    if x.shape[-1] != f.dim:
        raise ShapeError(f"ffn: input width {x.shape[-1]} but expert expects {f.dim}")
    h = ACTIVATIONS[f.activation](T.linear(x, f.w1, f.b1))
    return T.linear(h, f.w2, f.b2)


class MultiHeadAttention(Module):
    """Multi-head self-attention; head ``h`` uses rows ``h*dh:(h+1)*dh`` of each projection."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads < 1 or dim % heads:
            raise ValueError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        return mha_forward(self, x)


def mha_forward(m: MultiHeadAttention, x: Tensor) -> Tensor:
    """Self-attention over ``x[T, d]`` or ``x[B, T, d]``; residual is the caller's job."""
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    o, weights = T.attention(m.q(x), m.k(x), m.v(x), m.heads)
    m.last_weights = weights
    y = m.out(o)
    return T.reshape(y, y.shape[1:]) if single else y


def patchify(images: Tensor, patch: int) -> Tensor:
    """``[B, C, H, W]`` -> ``[B, (H/p)(W/p), C·p·p]`` in row-major patch order."""
    B, C, H, W = images.shape
    if H % patch or W % patch:
        raise ShapeError(f"image {H}x{W} is not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    x = T.reshape(images, (B, C, gh, patch, gw, patch))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (B, gh * gw, C * patch * patch))


class PatchEmbed(Module):
    """Non-overlapping patch projection (a stride-``p`` convolution), layer norm, positions."""

    def __init__(self, channels: int, patch: int, dim: int, num_tokens: int,
                 rng: np.random.Generator, norm: bool = True):
        self.patch = patch
        self.proj = Linear(channels * patch * patch, dim, rng)
        self.norm = LayerNorm(dim) if norm else None
        self.pos = T.parameter(trunc_normal(rng, (num_tokens, dim)))

    def __call__(self, images: Tensor) -> Tensor:
        return patch_embed(self, images)


def patch_embed(pe: PatchEmbed, images: Tensor) -> Tensor:
    """Images ``[C, H, W]`` or ``[B, C, H, W]`` to tokens ``[T, d]`` / ``[B, T, d]``."""
    single = images.ndim == 3
    if single:
        images = T.reshape(images, (1,) + images.shape)
    tokens = pe.proj(patchify(images, pe.patch))
    if pe.norm is not None:
        tokens = pe.norm(tokens)
    if tokens.shape[1] != pe.pos.shape[0]:
        raise ShapeError(f"patch_embed: {tokens.shape[1]} patches but {pe.pos.shape[0]} positions")
    tokens = T.add_bias(tokens, pe.pos)
    return T.reshape(tokens, tokens.shape[1:]) if single else tokens
