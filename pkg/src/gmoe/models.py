"""Model assembly: GMoE / ViT with configurable MoE placement, plus the synthetic-task MLP and FCN."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .moe import Block, GateDecision, RouterConfig, block_forward
from .nn import LayerNorm, Linear, Module, PatchEmbed
from .rng import trunc_normal
from .tensor import ShapeError, Tensor

PLACEMENTS = ("none", "every_two", "last_two")


def resolve_placement(policy, depth: int) -> list[int]:
    """Block indices (0-based) that carry an MoE layer.

    ``every_two`` picks every even block; ``last_two`` the two largest even
    indices not exceeding ``depth - 2`` (blocks 8 and 10 of a 12-block model).
    An explicit list of indices is validated and returned sorted.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if isinstance(policy, (list, tuple, set)):
        idx = sorted({int(i) for i in policy})
        if any(i < 0 or i >= depth for i in idx):
            raise ValueError(f"placement indices {idx} out of range for depth {depth}")
        return idx
    if policy == "none":
        return []
    if policy == "every_two":
        if depth < 2:
            raise ValueError("every_two placement needs depth >= 2")
        return list(range(0, depth, 2))
    if policy == "last_two":
        evens = list(range(0, depth - 1, 2))
        if len(evens) < 2:
            raise ValueError(f"last_two placement needs two even blocks below depth-1, depth={depth}")
        return evens[-2:]
    raise ValueError(f"unknown placement policy {policy!r}")


@dataclass
class ModelConfig:
    depth: int = 12
    dim: int = 384
    heads: int = 6
    patch_size: int = 16
    image_size: int = 224
    channels: int = 3
    num_classes: int = 1000
    placement: object = "last_two"
    moe: RouterConfig = field(default_factory=RouterConfig)
    expansion: int = 4
    activation: str = "gelu"
    input_kind: str = "image"
    input_dim: int = 0
    num_tokens: int = 0

    def __post_init__(self):
        if isinstance(self.moe, dict):
            self.moe = RouterConfig(**self.moe)
        if isinstance(self.placement, list):
            self.placement = [int(i) for i in self.placement]
        self.validate()

    def validate(self) -> None:
        errs = []
        if self.depth < 1:
            errs.append("depth must be >= 1")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            errs.append(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.num_classes < 1:
            errs.append("num_classes must be >= 1")
        if self.input_kind == "image":
            if self.patch_size < 1 or self.image_size % self.patch_size:
                errs.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        elif self.input_kind == "tokens":
            if self.input_dim < 1 or self.num_tokens < 1:
                errs.append("token input needs input_dim >= 1 and num_tokens >= 1")
        else:
            errs.append(f"input_kind must be 'image' or 'tokens', got {self.input_kind!r}")
        if errs:
            raise ValueError("invalid ModelConfig: " + "; ".join(errs))
        resolve_placement(self.placement, self.depth)

    @property
    def num_patches(self) -> int:
        if self.input_kind == "tokens":
            return self.num_tokens
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


def gmoe_s16(num_classes: int = 1000, **overrides) -> ModelConfig:
    """The GMoE-S/16 layout: 12 blocks, width 384, 6 heads, 6 experts, top-2 cosine routing."""
    cfg = dict(depth=12, dim=384, heads=6, patch_size=16, image_size=224, num_classes=num_classes,
               placement="last_two", moe=RouterConfig(kind="cosine", k=2, num_experts=6))
    cfg.update(overrides)
    return ModelConfig(**cfg)


@dataclass
class RoutingTrace:
    """Per MoE layer: each token's experts (rank order) and gate weights.

    Tokens are flattened sample-major; ``token_ids`` 0 is the class token.
    """

    layers: list[int] = field(default_factory=list)
    selected: list[np.ndarray] = field(default_factory=list)
    gate_weights: list[np.ndarray] = field(default_factory=list)
    sample_ids: np.ndarray | None = None
    token_ids: np.ndarray | None = None
    decisions: list[GateDecision] = field(default_factory=list, repr=False)

    def top1(self, layer_pos: int) -> np.ndarray:
        return self.selected[layer_pos][:, 0]


class TokenEmbed(Module):
    """Linear token projection, layer norm, learned positions."""

    def __init__(self, input_dim: int, dim: int, num_tokens: int, rng: np.random.Generator):
        self.proj = Linear(input_dim, dim, rng)
        self.norm = LayerNorm(dim)
        self.pos = T.parameter(trunc_normal(rng, (num_tokens, dim)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(self.norm(self.proj(x)), self.pos)


class GMoE(Module):
    """Vision transformer with a class token; blocks in ``moe_blocks`` route through experts."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.moe_blocks = resolve_placement(cfg.placement, cfg.depth)
        if cfg.input_kind == "image":
            self.embed = PatchEmbed(cfg.channels, cfg.patch_size, cfg.dim, cfg.num_patches, rng)
        else:
            self.embed = TokenEmbed(cfg.input_dim, cfg.dim, cfg.num_tokens, rng)
        self.cls = T.parameter(trunc_normal(rng, (cfg.dim,)))
        self.cls_pos = T.parameter(trunc_normal(rng, (cfg.dim,)))
        self.blocks = [
            Block(cfg.dim, cfg.heads, rng, cfg.moe if i in self.moe_blocks else None,
                  cfg.expansion, cfg.activation)
            for i in range(cfg.depth)
        ]
        self.norm = LayerNorm(cfg.dim)
        self.head = Linear(cfg.dim, cfg.num_classes, rng)

    def forward(self, x, train_mode: bool = False, rng: np.random.Generator | None = None):
        return model_forward(self, x, train_mode, rng)


def build_gmoe(cfg: ModelConfig, rng: np.random.Generator | int = 0) -> GMoE:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    cfg.validate()
    return GMoE(cfg, rng)


def gmoe_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of :func:`build_gmoe` for ``cfg``."""
    d, h = cfg.dim, cfg.expansion * cfg.dim
    ffn = 2 * d * h + h + d
    attn = 4 * (d * d + d)
    if cfg.input_kind == "image":
        embed = cfg.channels * cfg.patch_size ** 2 * d + d
    else:
        embed = cfg.input_dim * d + d
    embed += 2 * d + cfg.num_patches * d
    n = cfg.moe.num_experts
    if cfg.moe.kind == "linear":
        router = n * d
    else:
        de = cfg.moe.embed_dim or d
        router = de * d + de * n
    n_moe = len(resolve_placement(cfg.placement, cfg.depth))
    blocks = cfg.depth * (attn + 4 * d) + (cfg.depth - n_moe) * ffn + n_moe * (n * ffn + router)
    return embed + 2 * d + blocks + 2 * d + d * cfg.num_classes + cfg.num_classes


def model_forward(model, x, train_mode: bool = False, rng: np.random.Generator | None = None):
    """Logits ``[B, K]`` and a :class:`RoutingTrace` (empty for models without experts)."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    if not isinstance(model, GMoE):
        return model.forward(x), RoutingTrace()
    cfg = model.cfg
    if cfg.input_kind == "image":
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != cfg.channels:
            raise ShapeError(f"model_forward[embed]: expected [B, {cfg.channels}, H, W], got {x.shape}")
        if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
            raise ShapeError(f"model_forward[embed]: expected {cfg.image_size}px images, got {x.shape[2:]}")
    elif x.ndim != 3 or x.shape[1:] != (cfg.num_tokens, cfg.input_dim):
        raise ShapeError(f"model_forward[embed]: expected [B, {cfg.num_tokens}, {cfg.input_dim}], got {x.shape}")
    B = x.shape[0]
    tokens = model.embed(x)
    cls = T.reshape(T.add(model.cls, model.cls_pos), (1, 1, cfg.dim))
    cls = T.concat([cls] * B, axis=0)
    h = T.concat([cls, tokens], axis=1)
    n_tok = h.shape[1]
    trace = RoutingTrace(sample_ids=np.repeat(np.arange(B), n_tok),
                         token_ids=np.tile(np.arange(n_tok), B))
    for i, block in enumerate(model.blocks):
        h, dec = block_forward(block, h, train_mode, rng)
        if dec is not None:
            trace.layers.append(i)
            trace.selected.append(dec.selected.copy())
            trace.gate_weights.append(dec.gate_weights.data.copy())
            trace.decisions.append(dec)
    h = model.norm(h)
    return model.head(h[:, 0, :]), trace


class MLP(Module):
    """Fully connected net over the flattened sample; ``widths`` includes input and output."""

    def __init__(self, widths=(40, 100, 100, 4), rng: np.random.Generator | int = 0,
                 activation: str = "relu"):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"MLP widths must be >= 2 positive sizes, got {widths}")
        self.widths = widths
        self.layers = [Linear(a, b, rng, std=np.sqrt(2.0 / a)) for a, b in zip(widths[:-1], widths[1:])]
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        h = T.reshape(x, (x.shape[0], -1))
        if h.shape[1] != self.widths[0]:
            raise ShapeError(f"MLP expects {self.widths[0]} inputs per sample, got {h.shape[1]}")
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = T.relu(h)
        return h


class FCN(Module):
    """Two convolutions over the patch axis (kernel = one patch) and global pooling."""

    def __init__(self, in_channels: int = 4, filters: int = 20, num_classes: int | None = None,
                 rng: np.random.Generator | int = 0, pool: str = "mean"):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        if in_channels < 1 or filters < 1:
            raise ValueError("FCN sizes must be positive")
        if pool not in ("mean", "max"):
            raise ValueError(f"unknown pooling {pool!r}")
        self.pool = pool
        num_classes = num_classes or in_channels
        self.conv1 = Linear(in_channels, filters, rng, std=np.sqrt(2.0 / in_channels))
        self.conv2 = Linear(filters, num_classes, rng, std=np.sqrt(2.0 / filters))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(f"FCN expects [B, P, K] samples, got {x.shape}")
        h = T.relu(self.conv1(x))
        out = self.conv2(h)
        return T.mean(out, axis=1) if self.pool == "mean" else T.tmax(out, axis=1)


def build_mlp(hidden_sizes=(40, 100, 100, 4), rng=0) -> MLP:
    return MLP(hidden_sizes, rng)


def build_fcn(filters: int = 20, in_channels: int = 4, num_classes: int | None = None, rng=0,
              pool: str = "mean") -> FCN:
    return FCN(in_channels, filters, num_classes, rng, pool)


def describe_model(model) -> dict:
    """JSON-able description sufficient to rebuild ``model``'s architecture."""
    if isinstance(model, GMoE):
        return {"kind": "gmoe", "config": model.cfg.to_dict()}
    if isinstance(model, MLP):
        return {"kind": "mlp", "widths": model.widths, "activation": model.activation}
    if isinstance(model, FCN):
        return {"kind": "fcn", "in_channels": model.conv1.weight.shape[1],
                "filters": model.conv1.weight.shape[0], "num_classes": model.conv2.weight.shape[0],
                "pool": model.pool}
    raise TypeError(f"cannot describe {type(model).__name__}")


def model_from_meta(meta: dict, rng=0):
    kind = meta.get("kind")
    if kind == "gmoe":
        return build_gmoe(ModelConfig(**meta["config"]), rng)
    if kind == "mlp":
        return MLP(meta["widths"], rng, meta.get("activation", "relu"))
    if kind == "fcn":
        return FCN(meta["in_channels"], meta["filters"], meta["num_classes"], rng, meta.get("pool", "mean"))
    raise ValueError(f"unknown model kind {kind!r}")
