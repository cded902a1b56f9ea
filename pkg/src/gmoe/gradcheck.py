"""Finite-difference gradient suite over every differentiable operation.

Each check draws random inputs, reduces the operation's output to a scalar
through a fixed random projection and compares autodiff against central
differences with :func:`gmoe.tensor.gradient_check`.  Inputs are kept away
from kinks (relu at 0, ties in max and top-k) where central differences are
not a valid oracle.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .losses import importance_loss, load_loss, squared_cv, total_loss
from .models import ModelConfig, build_gmoe, model_forward
from .moe import Block, MoELayer, RouterConfig, load_probability, moe_block_forward, moe_forward, route
from .nn import FeedForward, MultiHeadAttention, PatchEmbed, ffn_forward, mha_forward, patch_embed
from .rng import stream
from .tensor import Tensor

TOLERANCE = 1e-4

# composed checks mix exp, erf and a temperature-0.07 softmax; at h=1e-6
# roundoff (~1e-10 in the difference quotient) swamps entries near 1e-8, so
# larger steps trade it against the O(h^2) truncation term
COMPOSED_H = 3e-5
MODEL_H = 1e-4
COMPOSED_SCALE = 0.25

Check = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor], float]]


def _p(rng, *shape, lo=None):
    x = rng.standard_normal(shape)
    if lo is not None:
        x = np.where(np.abs(x) < lo, np.sign(x + 1e-300) * lo, x)
    return T.parameter(x)


def _projected(out_fn, shape, rng):
    r = Tensor(rng.standard_normal(shape))
    if shape == ():
        return out_fn
    return lambda: T.tsum(T.mul(out_fn(), r))


def _unary(op, positive=False, away=None):
    def build(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        x = _p(rng, *shape, lo=away)
        if positive:
            x.data = np.abs(x.data) + 0.5
        return _projected(lambda: op(x), shape, rng), [x], 1e-6
    return build


def _binary(op, denom=False):
    def build(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        a, b = _p(rng, *shape), _p(rng, *shape)
        if denom:
            b.data = np.sign(b.data) * (np.abs(b.data) + 0.5)
        return _projected(lambda: op(a, b), shape, rng), [a, b], 1e-6
    return build


def _reduce(op):
    def build(rng):
        shape = tuple(rng.integers(1, 5, size=3))
        axis = int(rng.integers(0, 3))
        x = _p(rng, *shape)
        out_shape = shape[:axis] + shape[axis + 1:]
        return _projected(lambda: op(x, axis), out_shape, rng), [x], 1e-6
    return build


def _tmax(rng):
    shape = tuple(rng.integers(1, 5, size=2))
    x = T.parameter(rng.permutation(np.arange(np.prod(shape))).reshape(shape) * 0.1
                    + rng.uniform(-0.01, 0.01, shape))
    return _projected(lambda: T.tmax(x, 1), (shape[0],), rng), [x], 1e-6


def _reshape_transpose(rng):
    x = _p(rng, 2, 3, 4)
    return _projected(lambda: T.transpose(T.reshape(x, (3, 2, 4)), (2, 0, 1)), (4, 3, 2), rng), [x], 1e-6


def _getitem(rng):
    x = _p(rng, 5, 3)
    idx = rng.integers(0, 5, size=7)
    return _projected(lambda: x[idx], (7, 3), rng), [x], 1e-6


def _index_add(rng):
    v = _p(rng, 6, 3)
    idx = rng.integers(0, 4, size=6)
    return _projected(lambda: T.index_add(4, idx, v), (4, 3), rng), [v], 1e-6


def _concat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 4, 3)
    return _projected(lambda: T.concat([a, b], axis=0), (6, 3), rng), [a, b], 1e-6


def _matmul(rng):
    m, k, n = rng.integers(1, 6, size=3)
    a, b = _p(rng, 2, m, k), _p(rng, k, n)
    return _projected(lambda: T.matmul(a, b), (2, m, n), rng), [a, b], 1e-6


def _add_bias(rng):
    x, b = _p(rng, 2, 3, 4), _p(rng, 4)
    return _projected(lambda: T.add_bias(x, b), (2, 3, 4), rng), [x, b], 1e-6


def _linear(rng):
    x, w, b = _p(rng, 2, 3, 4), _p(rng, 5, 4), _p(rng, 5)
    return _projected(lambda: T.linear(x, w, b), (2, 3, 5), rng), [x, w, b], 1e-6


def _scale_rows(rng):
    x, w = _p(rng, 4, 3), _p(rng, 4)
    return _projected(lambda: T.scale_rows(x, w), (4, 3), rng), [x, w], 1e-6


def _l2_norm(rng):
    x = _p(rng, 3, 4)
    return (lambda: T.l2_norm(x)), [x], 1e-6


def _normalize_rows(rng):
    x = _p(rng, 4, 5)
    return _projected(lambda: T.normalize_rows(x), (4, 5), rng), [x], 1e-6


def _softmax(log):
    def build(rng):
        x = _p(rng, 3, 5)
        op = T.log_softmax if log else T.softmax
        return _projected(lambda: op(x, axis=-1), (3, 5), rng), [x], 1e-6
    return build


def _layer_norm(rng):
    x, g, b = _p(rng, 3, 6), _p(rng, 6), _p(rng, 6)
    return _projected(lambda: T.layer_norm(x, g, b), (3, 6), rng), [x, g, b], 1e-6


def _attention(rng):
    q, k, v = _p(rng, 2, 4, 6), _p(rng, 2, 4, 6), _p(rng, 2, 4, 6)
    return _projected(lambda: T.attention(q, k, v, 2)[0], (2, 4, 6), rng), [q, k, v], 1e-6


def _cross_entropy(rng):
    x = _p(rng, 4, 3)
    y = rng.integers(0, 3, size=4)
    return (lambda: T.cross_entropy(x, y)), [x], 1e-6


def randomize(module, rng, scale: float = COMPOSED_SCALE) -> None:
    """Overwrite every parameter with O(``scale``) random values (layer-norm gains near 1)."""
    for name, p in module.named_parameters():
        if name.endswith("gamma"):
            p.data = 1.0 + 0.3 * rng.standard_normal(p.shape)
        else:
            p.data = scale * rng.standard_normal(p.shape)


def _ffn(rng):
    f = FeedForward(4, rng, expansion=2)
    randomize(f, rng, 0.5)
    x = _p(rng, 3, 4)
    return _projected(lambda: ffn_forward(f, x), (3, 4), rng), [x] + f.parameters(), COMPOSED_H


def _mha(rng):
    m = MultiHeadAttention(4, 2, rng)
    randomize(m, rng, 0.5)
    x = _p(rng, 2, 3, 4)
    params = [x] + [p for n, p in m.named_parameters() if n != "k.bias"]
    return _projected(lambda: mha_forward(m, x), (2, 3, 4), rng), params, COMPOSED_H


def _patch_embed(rng):
    pe = PatchEmbed(2, 2, 4, 4, rng)
    randomize(pe, rng, 0.5)
    img = _p(rng, 2, 2, 4, 4)
    return _projected(lambda: patch_embed(pe, img), (2, 4, 4), rng), [img] + pe.parameters(), COMPOSED_H


def _separated_layer(kind, n, k, rng, dim=4):
    layer = MoELayer(dim, RouterConfig(kind=kind, k=k, num_experts=n, embed_dim=64 if kind == "cosine" else None),
                     rng, expansion=2)
    randomize(layer, rng)
    return layer


def _route(kind):
    def build(rng):
        layer = _separated_layer(kind, 4, 2, rng)
        x = _p(rng, 5, 4)
        r = Tensor(rng.standard_normal((5, 4)))

        def f():
            dec = route(x, layer.router)
            return T.add(T.tsum(T.mul(dec.gate_weights, r)), T.tsum(T.mul(dec.load_prob, r)))
        return f, [x] + layer.router.parameters(), COMPOSED_H
    return build


def _load_probability(rng):
    # logit gaps of a few std keep Phi out of its far tail, where gradients underflow the oracle
    raw = T.parameter(0.5 * rng.standard_normal((4, 5)))
    noisy = T.parameter(raw.data + 0.2 * rng.standard_normal((4, 5)))
    return _projected(lambda: load_probability(raw, 2, 0.5, noisy), (4, 5), rng), [raw, noisy], 1e-6


def _moe(rng):
    n = int(rng.integers(1, 5))
    layer = _separated_layer(str(rng.choice(["linear", "cosine"])), n, int(rng.integers(1, min(n, 2) + 1)), rng)
    x = _p(rng, 5, 4)
    return _projected(lambda: moe_forward(layer, x)[0], (5, 4), rng), [x] + layer.parameters(), COMPOSED_H


def _moe_block(rng):
    blk = Block(4, 2, rng, moe=RouterConfig(kind="cosine", k=2, num_experts=3, embed_dim=64))
    randomize(blk, rng)
    x = _p(rng, 2, 3, 4)
    params = [x] + [p for n, p in blk.named_parameters() if n != "attn.k.bias"]
    return _projected(lambda: moe_block_forward(blk, x)[0], (2, 3, 4), rng), params, COMPOSED_H


def _squared_cv(rng):
    v = T.parameter(np.abs(rng.standard_normal(5)) + 0.5)
    return (lambda: squared_cv(v)), [v], 1e-6


def _importance(rng):
    g = T.parameter(rng.uniform(0.1, 1.0, (6, 4)))
    return (lambda: importance_loss(g)), [g], 1e-6


def _load(rng):
    p = T.parameter(rng.uniform(0.1, 1.0, (6, 4)))
    return (lambda: load_loss(p)), [p], 1e-6


def _total(rng):
    cls, imp, load = (T.parameter(rng.uniform(0.1, 2.0)) for _ in range(3))
    return (lambda: total_loss(cls, imp, load, 0.01)), [cls, imp, load], 1e-6


OP_CHECKS: dict[str, Check] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, denom=True),
    "scale": _unary(lambda x: T.scale(x, -1.7)),
    "relu": _unary(T.relu, away=0.05),
    "gelu": _unary(T.gelu),
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "square": _unary(T.square),
    "sqrt": _unary(T.sqrt, positive=True),
    "normal_cdf": _unary(T.normal_cdf),
    "sum": _reduce(T.tsum),
    "mean": _reduce(T.mean),
    "max": _tmax,
    "reshape_transpose": _reshape_transpose,
    "getitem": _getitem,
    "index_add": _index_add,
    "concat": _concat,
    "matmul": _matmul,
    "add_bias": _add_bias,
    "linear": _linear,
    "scale_rows": _scale_rows,
    "l2_norm": _l2_norm,
    "normalize_rows": _normalize_rows,
    "softmax": _softmax(False),
    "log_softmax": _softmax(True),
    "layer_norm": _layer_norm,
    "attention": _attention,
    "cross_entropy": _cross_entropy,
    "ffn": _ffn,
    "mha": _mha,
    "patch_embed": _patch_embed,
    "route_linear": _route("linear"),
    "route_cosine": _route("cosine"),
    "load_probability": _load_probability,
    "moe_forward": _moe,
    "moe_block": _moe_block,
    "squared_cv": _squared_cv,
    "importance_loss": _importance,
    "load_loss": _load,
    "total_loss": _total,
}


def check_op(name: str, seed: int = 0, trials: int = 1) -> float:
    """Worst relative error of op ``name`` over ``trials`` random draws."""
    rng = stream(seed, f"gradcheck/{name}")
    worst = 0.0
    for _ in range(trials):
        f, params, h = OP_CHECKS[name](rng)
        worst = max(worst, T.gradient_check(f, params, h))
    return worst


def tiny_gmoe_config() -> ModelConfig:
    return ModelConfig(depth=2, dim=8, heads=2, patch_size=4, image_size=8, channels=1, num_classes=3,
                       placement=[0, 1],
                       moe=RouterConfig(kind="cosine", k=2, num_experts=3, embed_dim=64))


def tiny_gmoe_problem(seed: int = 0, lam: float = 0.01, train_mode: bool = False):
    """Tiny GMoE at random parameters with a fixed image batch.

    With ``train_mode`` the routing noise is redrawn from the same seed on
    every call, so the loss stays a deterministic function of the parameters.

    Returns ``(loss_fn, checked_params, key_biases)``.  Attention key biases
    are returned separately: softmax is invariant to them, so their true
    gradient is exactly zero and a relative error carries no information.
    """
    rng = stream(seed, "gradcheck/tiny_gmoe")
    model = build_gmoe(tiny_gmoe_config(), rng)
    randomize(model, rng)
    x = Tensor(rng.standard_normal((2, 1, 8, 8)))
    y = rng.integers(0, 3, size=2)

    def loss():
        noise = stream(seed, "gradcheck/tiny_gmoe_noise") if train_mode else None
        logits, trace = model_forward(model, x, train_mode, noise)
        imp = load = None
        for d in trace.decisions:
            i, l_ = importance_loss(d.gate_weights), load_loss(d.load_prob)
            imp = i if imp is None else T.add(imp, i)
            load = l_ if load is None else T.add(load, l_)
        return total_loss(T.cross_entropy(logits, y), imp, load, lam)

    named = list(model.named_parameters())
    checked = [p for n, p in named if not n.endswith("attn.k.bias")]
    key_biases = [p for n, p in named if n.endswith("attn.k.bias")]
    return loss, checked, key_biases


def key_bias_invariance(loss, key_biases, h: float = 1e-3) -> float:
    """Largest |gradient| or |loss change| when key biases move; ~0 up to roundoff."""
    for p in key_biases:
        p.grad = None
    out = loss()
    out.backward()
    worst = max(float(np.max(np.abs(p.grad))) if p.grad is not None else 0.0 for p in key_biases)
    base = out.item()
    with T.no_grad():
        for p in key_biases:
            orig = p.data.copy()
            p.data += h
            worst = max(worst, abs(loss().item() - base))
            p.data = orig
    return worst


def check_tiny_gmoe(seed: int = 0, train_mode: bool = False) -> float:
    loss, params, _ = tiny_gmoe_problem(seed, train_mode=train_mode)
    return T.gradient_check(loss, params, h=MODEL_H)


def run_suite(seed: int = 0, trials: int = 3, include_model: bool = True) -> dict[str, float]:
    results = {name: check_op(name, seed, trials) for name in OP_CHECKS}
    if include_model:
        results["tiny_gmoe"] = check_tiny_gmoe(seed)
        loss, _, kb = tiny_gmoe_problem(seed)
        # reported as a relative error against an O(1) loss, so it shares the tolerance
        results["tiny_gmoe_key_bias_invariance"] = key_bias_invariance(loss, kb)
    return results
