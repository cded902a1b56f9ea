import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmoe.models import (FCN, GMoE, MLP, ModelConfig, build_fcn, build_gmoe, build_mlp,
                         describe_model, gmoe_parameter_count, gmoe_s16, model_forward,
                         model_from_meta, resolve_placement)
from gmoe.moe import MoELayer, RouterConfig
from gmoe.nn import FeedForward
from gmoe.tensor import ShapeError, Tensor

from oracles import collapse_pair


def small_cfg(**kw):
    base = dict(depth=4, dim=8, heads=2, patch_size=4, image_size=8, channels=2, num_classes=3,
                placement="every_two", moe=RouterConfig(kind="cosine", k=2, num_experts=3))
    base.update(kw)
    return ModelConfig(**base)


# placement

@pytest.mark.parametrize("policy,depth,expected", [
    ("last_two", 12, [8, 10]),
    ("every_two", 12, [0, 2, 4, 6, 8, 10]),
    ("none", 12, []),
    ("last_two", 4, [0, 2]),
    ("last_two", 5, [0, 2]),
    ("every_two", 3, [0, 2]),
    ([3, 1], 4, [1, 3]),
])
def test_placement(policy, depth, expected):
    assert resolve_placement(policy, depth) == expected


@pytest.mark.parametrize("policy,depth", [("last_two", 3), ("every_two", 1), ("sideways", 12),
                                          ([12], 12), ("none", 0)])
def test_placement_errors(policy, depth):
    with pytest.raises(ValueError):
        resolve_placement(policy, depth)


@given(st.integers(2, 40))
def test_last_two_is_largest_even_pair(depth):
    try:
        got = resolve_placement("last_two", depth)
    except ValueError:
        assert depth < 4
        return
    evens = [i for i in range(depth) if i % 2 == 0 and i <= depth - 2]
    assert got == evens[-2:]


# construction

def test_gmoe_s16_layout():
    cfg = gmoe_s16()
    assert (cfg.depth, cfg.dim, cfg.heads, cfg.patch_size) == (12, 384, 6, 16)
    assert (cfg.moe.num_experts, cfg.moe.k, cfg.moe.kind) == (6, 2, "cosine")
    assert resolve_placement(cfg.placement, cfg.depth) == [8, 10]
    assert cfg.num_patches == 196


def test_gmoe_s16_parameter_count_frozen():
    assert gmoe_parameter_count(gmoe_s16()) == 34_166_632
    assert gmoe_parameter_count(gmoe_s16(placement="none")) == 22_051_432


def test_gmoe_s16_backbone_size_matches_published():
    head = 384 * 1000 + 1000
    assert round((gmoe_parameter_count(gmoe_s16()) - head) / 1e6, 1) == 33.8
    assert round((gmoe_parameter_count(gmoe_s16(placement="none")) - head) / 1e6, 1) == 21.7


@pytest.mark.parametrize("cfg", [
    small_cfg(),
    small_cfg(placement="none"),
    small_cfg(placement="last_two", moe=RouterConfig(kind="linear", k=1, num_experts=5)),
    small_cfg(moe=RouterConfig(kind="cosine", k=1, num_experts=2, embed_dim=5), expansion=2),
    small_cfg(input_kind="tokens", input_dim=7, num_tokens=6),
])
def test_parameter_count_matches_shape_sum(cfg):
    model = build_gmoe(cfg, 0)
    assert sum(p.data.size for p in model.parameters()) == gmoe_parameter_count(cfg)


def test_blocks_follow_placement():
    model = build_gmoe(small_cfg(placement="last_two"), 0)
    kinds = [type(b.mlp) for b in model.blocks]
    assert kinds == [MoELayer, FeedForward, MoELayer, FeedForward]


@pytest.mark.parametrize("kw", [dict(dim=7), dict(image_size=10), dict(num_classes=0),
                                dict(input_kind="audio"), dict(depth=0)])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        small_cfg(**kw)


# forward

def test_logits_shape_and_trace():
    model = build_gmoe(small_cfg(), 0)
    x = np.random.default_rng(0).standard_normal((3, 2, 8, 8))
    logits, trace = model_forward(model, x)
    assert logits.shape == (3, 3)
    assert trace.layers == [0, 2]
    assert all(s.shape == (3 * 5, 2) for s in trace.selected)
    assert trace.sample_ids.tolist()[:6] == [0, 0, 0, 0, 0, 1]
    assert trace.token_ids.tolist()[:6] == [0, 1, 2, 3, 4, 0]


def test_eval_forward_deterministic():
    model = build_gmoe(small_cfg(), 0)
    x = np.random.default_rng(1).standard_normal((2, 2, 8, 8))
    a = model_forward(model, x)[0].data
    b = model_forward(model, x)[0].data
    assert np.array_equal(a, b)


def test_train_forward_needs_stream_only_for_noise():
    model = build_gmoe(small_cfg(), 0)
    x = np.random.default_rng(1).standard_normal((2, 2, 8, 8))
    with pytest.raises(ValueError):
        model_forward(model, x, train_mode=True)
    a = model_forward(model, x, True, np.random.default_rng(5))[0].data
    b = model_forward(model, x, True, np.random.default_rng(5))[0].data
    assert np.array_equal(a, b)


def test_single_image_gets_batch_axis():
    model = build_gmoe(small_cfg(), 0)
    assert model_forward(model, np.zeros((2, 8, 8)))[0].shape == (1, 3)


@pytest.mark.parametrize("shape", [(1, 3, 8, 8), (1, 2, 12, 12), (2, 8, 8, 2)])
def test_forward_shape_errors_name_stage(shape):
    model = build_gmoe(small_cfg(), 0)
    with pytest.raises(ShapeError, match="embed"):
        model_forward(model, np.zeros(shape))


def test_single_expert_collapse_matches_plain_vit():
    moe, vit, x = collapse_pair()
    a, trace = model_forward(moe, x)
    b, _ = model_forward(vit, x)
    assert trace.layers == [0, 2]
    assert np.array_equal(a.data, b.data)


# synthetic-task models

def test_mlp_defaults():
    m = build_mlp()
    assert m.widths == [40, 100, 100, 4] and len(m.layers) == 3
    assert model_forward(m, np.zeros((5, 10, 4)))[0].shape == (5, 4)


def test_fcn_defaults():
    f = build_fcn()
    assert f.conv1.weight.shape == (20, 4) and f.conv2.weight.shape == (4, 20)
    assert model_forward(f, np.zeros((5, 10, 4)))[0].shape == (5, 4)


@pytest.mark.parametrize("pool", ["mean", "max"])
def test_fcn_patch_permutation_invariant(pool):
    rng = np.random.default_rng(0)
    f = build_fcn(rng=1, pool=pool)
    x = rng.standard_normal((6, 10, 4))
    perm = rng.permutation(10)
    a = f.forward(Tensor(x)).data
    b = f.forward(Tensor(x[:, perm])).data
    assert np.abs(a - b).max() <= 1e-9


def test_mlp_sensitive_to_pixel_permutation():
    rng = np.random.default_rng(0)
    m = build_mlp(rng=2)
    x = rng.standard_normal((6, 10, 4))
    swapped = x.copy()
    swapped[:, 0, [0, 1]] = swapped[:, 0, [1, 0]]
    assert np.abs(m.forward(Tensor(x)).data - m.forward(Tensor(swapped)).data).max() > 1e-6


def test_mlp_fcn_validation():
    with pytest.raises(ValueError):
        MLP([40])
    with pytest.raises(ValueError):
        FCN(filters=0)
    with pytest.raises(ValueError):
        FCN(pool="median")
    with pytest.raises(ShapeError):
        build_mlp().forward(Tensor(np.zeros((2, 9, 4))))
    with pytest.raises(ShapeError):
        build_fcn().forward(Tensor(np.zeros((2, 40))))


@pytest.mark.parametrize("model", [build_mlp(rng=3), build_fcn(rng=3, pool="max"),
                                   build_gmoe(small_cfg(), 3)])
def test_describe_roundtrip(model):
    meta = describe_model(model)
    rebuilt = model_from_meta(meta, 3)
    assert type(rebuilt) is type(model)
    assert [p.shape for p in rebuilt.parameters()] == [p.shape for p in model.parameters()]
    if isinstance(model, GMoE):
        assert rebuilt.cfg == model.cfg
