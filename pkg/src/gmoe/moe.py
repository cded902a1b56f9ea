"""Sparse mixture-of-experts: routers, noisy top-k gating, load estimation, dispatch."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import FeedForward, LayerNorm, Module, MultiHeadAttention, ffn_forward, mha_forward
from .rng import trunc_normal
from .tensor import ShapeError, Tensor

ROUTER_KINDS = ("linear", "cosine")


@dataclass
class RouterConfig:
    kind: str = "cosine"
    k: int = 2
    num_experts: int = 6
    temperature: float = 0.07
    embed_dim: int | None = None
    noise_enabled: bool = True
    noise_std: float | None = None

    def __post_init__(self):
        if self.kind not in ROUTER_KINDS:
            raise ValueError(f"router kind must be one of {ROUTER_KINDS}, got {self.kind!r}")
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        if not 1 <= self.k <= self.num_experts:
            raise ValueError(f"k={self.k} must satisfy 1 <= k <= num_experts={self.num_experts}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.noise_std is not None and self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def std(self) -> float:
        """Routing noise scale; 1/N unless overridden."""
        return 1.0 / self.num_experts if self.noise_std is None else float(self.noise_std)


class Router(Module):
    def __init__(self, dim: int, cfg: RouterConfig, rng: np.random.Generator):
        self.cfg = cfg
        if cfg.kind == "linear":
            self.W = T.parameter(trunc_normal(rng, (cfg.num_experts, dim)))
            self.E = None
        else:
            de = cfg.embed_dim or dim
            self.W = T.parameter(trunc_normal(rng, (de, dim)))
            E = rng.standard_normal((de, cfg.num_experts))
            E /= np.linalg.norm(E, axis=0, keepdims=True)
            self.E = T.parameter(E)


@dataclass
class GateDecision:
    """Routing result for ``T`` tokens over ``N`` experts.

    ``selected[t]`` lists the ``k`` chosen experts in rank order, so
    ``selected[:, 0]`` is the top-1 choice.
    """

    raw_logits: Tensor
    noisy_logits: Tensor
    gate_weights: Tensor
    selected: np.ndarray
    load_prob: Tensor
    mask: np.ndarray = field(repr=False, default=None)

    @property
    def num_tokens(self) -> int:
        return self.selected.shape[0]

    @property
    def top1(self) -> np.ndarray:
        return self.selected[:, 0]


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Per-row indices of the ``k`` largest entries, largest first, ties to the lower index."""
    scores = np.asarray(scores)
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top-k needs 1 <= k <= {n}, got k={k}")
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def top_k_mask(scores, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the ``k`` largest entries per row, zero the rest; kept values are not renormalized."""
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=float)
    idx = top_k_indices(data, k)
    mask = np.zeros(data.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=-1)
    return mask, np.where(mask, data, 0.0)


def add_routing_noise(logits: Tensor, std: float, rng: np.random.Generator | None,
                      train_mode: bool = True) -> Tensor:
    """Add iid N(0, std²) to every logit in training mode; identity otherwise."""
    if std < 0:
        raise ValueError(f"noise std must be >= 0, got {std}")
    if not train_mode or std == 0:
        return logits
    if rng is None:
        raise ValueError("routing noise needs an explicit random generator")
    noise = rng.standard_normal(logits.shape).astype(logits.dtype) * std
    return T.add(logits, Tensor(noise))


def load_probability(raw_logits: Tensor, k: int, std: float,
                     noisy_logits: Tensor | None = None) -> Tensor:
    """Probability that each expert stays in the top-k when only its own noise is redrawn.

    ``p[t, e] = 1 - Phi((eta - raw[t, e]) / std)`` where ``eta`` is the k-th
    largest noisy logit among the other experts of token ``t``.  With
    ``std == 0`` the hard indicator ``raw > eta`` is returned instead.
    """
    noisy = raw_logits if noisy_logits is None else noisy_logits
    if noisy.shape != raw_logits.shape or raw_logits.ndim != 2:
        raise ShapeError(f"load_probability: raw {raw_logits.shape}, noisy {noisy.shape}")
    if std < 0:
        raise ValueError("std must be >= 0")
    n_tok, n_exp = raw_logits.shape
    if k >= n_exp:
        # fewer than k rivals: every expert is always kept
        return Tensor(np.ones(raw_logits.shape, dtype=raw_logits.dtype))
    order = np.argsort(-noisy.data, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(n_exp)[None, :].repeat(n_tok, 0), axis=1)
    # k-th largest among the others: skip over e itself when it sits in the top k
    pos = np.where(rank < k, k, k - 1)
    jstar = np.take_along_axis(order, pos, axis=1)
    rows = np.arange(n_tok)[:, None].repeat(n_exp, 1)
    thresh = noisy[rows, jstar]
    if std == 0:
        return Tensor((raw_logits.data > thresh.data).astype(raw_logits.dtype))
    return T.normal_cdf(T.scale(T.sub(raw_logits, thresh), 1.0 / std))


def router_logits(x: Tensor, router: Router) -> Tensor:
    cfg = router.cfg
    if cfg.kind == "linear":
        return T.linear(x, router.W)
    u = T.normalize_rows(T.linear(x, router.W))
    e = T.normalize_rows(T.transpose(router.E))
    return T.scale(T.matmul(u, T.transpose(e)), 1.0 / cfg.temperature)


def _gate(raw: Tensor, cfg: RouterConfig, k: int, train_mode: bool,
          rng: np.random.Generator | None) -> GateDecision:
    noise_on = train_mode and cfg.noise_enabled
    noisy = add_routing_noise(raw, cfg.std, rng, train_mode=noise_on)
    probs = T.softmax(noisy, axis=1)
    idx = top_k_indices(noisy.data, k)
    mask = np.zeros(raw.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=1)
    gates = T.mul(probs, Tensor(mask.astype(raw.dtype)))
    load = load_probability(raw, k, cfg.std, noisy)
    return GateDecision(raw, noisy, gates, idx, load, mask)


def linear_route(x: Tensor, router: Router, k: int | None = None, train_mode: bool = False,
                 rng: np.random.Generator | None = None) -> GateDecision:
    if router.cfg.kind != "linear":
        raise ValueError("linear_route needs a linear router")
    return _gate(router_logits(x, router), router.cfg, k or router.cfg.k, train_mode, rng)


def cosine_route(x: Tensor, router: Router, k: int | None = None, train_mode: bool = False,
                 rng: np.random.Generator | None = None) -> GateDecision:
    if router.cfg.kind != "cosine":
        raise ValueError("cosine_route needs a cosine router")
    return _gate(router_logits(x, router), router.cfg, k or router.cfg.k, train_mode, rng)


def route(x: Tensor, router: Router, k: int | None = None, train_mode: bool = False,
          rng: np.random.Generator | None = None) -> GateDecision:
    fn = linear_route if router.cfg.kind == "linear" else cosine_route
    return fn(x, router, k, train_mode, rng)


class MoELayer(Module):
    """A router plus ``N`` identically shaped expert FFNs."""

    def __init__(self, dim: int, cfg: RouterConfig, rng: np.random.Generator,
                 expansion: int = 4, activation: str = "gelu"):
        self.cfg = cfg
        self.router = Router(dim, cfg, rng)
        self.experts = [FeedForward(dim, rng, expansion, activation) for _ in range(cfg.num_experts)]
        self.last_evaluated: list[int] = []


def moe_forward(layer: MoELayer, x: Tensor, k: int | None = None, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, GateDecision]:
    """Route ``x[T, d]`` and mix the selected experts' outputs by their gate weights.

    Only experts chosen by at least one token run, and only on those tokens.
    """
    if x.ndim != 2 or x.shape[1] != layer.experts[0].dim:
        raise ShapeError(f"moe_forward: expected [T, {layer.experts[0].dim}], got {x.shape}")
    dec = route(x, layer.router, k, train_mode, rng)
    n_tok = x.shape[0]
    out = None
    layer.last_evaluated = []
    for e, expert in enumerate(layer.experts):
        rows = np.flatnonzero(dec.mask[:, e])
        if rows.size == 0:
            continue
        layer.last_evaluated.append(e)
        y = ffn_forward(expert, x[rows])
        part = T.index_add(n_tok, rows, T.scale_rows(y, dec.gate_weights[rows, e]))
        out = part if out is None else T.add(out, part)
    return out, dec


class Block(Module):
    """Pre-norm transformer block whose FFN is either plain or a mixture of experts."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 moe: RouterConfig | None = None, expansion: int = 4, activation: str = "gelu"):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        if moe is None:
            self.mlp = FeedForward(dim, rng, expansion, activation)
        else:
            self.mlp = MoELayer(dim, moe, rng, expansion, activation)

    @property
    def is_moe(self) -> bool:
        return isinstance(self.mlp, MoELayer)


def block_forward(block: Block, x_in: Tensor, train_mode: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[Tensor, GateDecision | None]:
    """``x = attn(ln1(x_in)) + x_in``; ``x_out = mlp(ln2(x)) + x`` on ``[B, T, d]`` or ``[T, d]``."""
    x = T.add(mha_forward(block.attn, block.ln1(x_in)), x_in)
    h = block.ln2(x)
    if not block.is_moe:
        return T.add(ffn_forward(block.mlp, h), x), None
    flat = T.reshape(h, (-1, h.shape[-1]))
    y, dec = moe_forward(block.mlp, flat, train_mode=train_mode, rng=rng)
    return T.add(T.reshape(y, x.shape), x), dec


def moe_block_forward(block: Block, x_in: Tensor, train_mode: bool = False,
                      rng: np.random.Generator | None = None) -> tuple[Tensor, GateDecision]:
    if not block.is_moe:
        raise ValueError("moe_block_forward needs a block carrying an MoE layer")
    return block_forward(block, x_in, train_mode, rng)
