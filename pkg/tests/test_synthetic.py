import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmoe import container
from gmoe.container import BadMagicError, ChecksumError, TruncatedError
from gmoe.synthetic import (SPLITS, SyntheticSpec, generate, generate_token_clusters, load_dataset,
                            make_feature_basis, save_dataset, spec_of)


def small(**kw):
    base = dict(n_train=3000, n_eval=500, seed=3)
    base.update(kw)
    return generate(SyntheticSpec(**base))


# basis

@given(st.integers(1, 12), st.integers(0, 10_000))
@settings(max_examples=30)
def test_basis_orthonormal(K, seed):
    G = make_feature_basis(K, np.random.default_rng(seed))
    np.testing.assert_allclose(G.T @ G, np.eye(K), atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(G, axis=0), 1.0, atol=1e-12)


def test_basis_k1():
    G = make_feature_basis(1, np.random.default_rng(0))
    assert G.shape == (1, 1) and abs(G[0, 0]) == 1.0


# spec

def test_spec_defaults():
    s = SyntheticSpec()
    assert (s.P, s.K, s.n_train, s.n_eval, s.p1, s.p2) == (10, 4, 100_000, 2_000, 1.0, 1.0)


@pytest.mark.parametrize("kw", [dict(P=1), dict(K=1), dict(p1=0.0), dict(p2=1.5), dict(n_eval=0)])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SyntheticSpec(**kw)


# generation

def test_noiseless_features_exact():
    ds = small()
    basis = ds.arrays["basis"]
    tr = ds["train"]
    rows = np.arange(len(tr))
    assert np.all(tr.x[rows, 0, tr.y] == 1.0)
    assert np.array_equal(tr.meta["pixel_index"], tr.y)
    assert np.array_equal(tr.x[rows, tr.meta["patch_index"]], basis[:, tr.y].T)


def test_split_sizes_and_shapes():
    ds = small()
    assert list(ds.splits) == list(SPLITS)
    assert ds["train"].x.shape == (3000, 10, 4)
    assert all(len(ds[s]) == 500 for s in ("val", "test1", "test2"))


def test_noisy_pixel_rate_binomial():
    n, p = 20_000, 0.9
    tr = generate(SyntheticSpec(n_train=n, n_eval=10, p1=p, p2=p, seed=1))["train"]
    for hits in ((tr.meta["pixel_index"] == tr.y).sum(), (tr.meta["patch_class"] == tr.y).sum()):
        assert abs(hits - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_noisy_replacement_never_true_class():
    tr = generate(SyntheticSpec(n_train=5000, n_eval=10, p1=0.5, p2=0.5, seed=2))["train"]
    flipped = tr.meta["pixel_index"] != tr.y
    assert flipped.any()
    assert np.all(tr.x[np.flatnonzero(flipped), 0, tr.meta["pixel_index"][flipped]] == 1.0)


def test_feature_patch_never_patch_zero():
    ds = small()
    for s in SPLITS:
        idx = ds[s].meta["patch_index"]
        assert idx.min() >= 1 and idx.max() <= 9


def test_exactly_one_patch_is_a_basis_vector():
    ds = small()
    basis = ds.arrays["basis"]
    for s in SPLITS:
        x = ds[s].x[:, 1:]
        hits = np.zeros(x.shape[:2], dtype=int)
        for k in range(4):
            hits += np.all(x == basis[:, k], axis=-1)
        assert np.all(hits.sum(axis=1) == 1)


def test_labels_uniform():
    y = small(n_train=40_000)["train"].y
    counts = np.bincount(y, minlength=4)
    n, p = len(y), 0.25
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


def test_shifted_splits():
    ds = small()
    basis = ds.arrays["basis"]
    t1, t2 = ds["test1"], ds["test2"]
    assert np.array_equal(t1.meta["pixel_index"], (t1.y + 1) % 4)
    assert np.array_equal(t1.meta["patch_class"], t1.y)
    assert np.array_equal(t2.meta["patch_class"], (t2.y + 1) % 4)
    assert np.array_equal(t2.meta["pixel_index"], t2.y)
    own = basis[:, t2.y].T[:, None, :]
    assert not np.any(np.all(t2.x == own, axis=-1))


def test_nearest_basis_oracle_is_perfect_on_train():
    ds = small()
    basis = ds.arrays["basis"]
    tr = ds["train"]
    patches = tr.x[:, 1:]
    dist = np.linalg.norm(patches[:, :, None, :] - basis.T[None, None], axis=-1)
    best = dist.reshape(len(tr), -1).argmin(axis=1)
    assert np.array_equal(best % 4, tr.y)


def test_generation_deterministic():
    a, b = small(), small()
    for s in SPLITS:
        assert np.array_equal(a[s].x, b[s].x) and np.array_equal(a[s].y, b[s].y)
    assert not np.array_equal(small(seed=4)["train"].x, a["train"].x)


# token clusters

def test_token_clusters_nearest_center():
    ds = generate_token_clusters(4, 8, 16, 2000, np.random.default_rng(0))
    c = ds.arrays["centers"]
    tr = ds["train"]
    d = np.linalg.norm(tr.x[:, :, None, :] - c[None, None], axis=-1)
    assert np.mean(d.argmin(-1) == tr.meta["clusters"]) >= 0.999
    gaps = [np.linalg.norm(c[i] - c[j]) for i in range(4) for j in range(i + 1, 4)]
    assert min(gaps) >= 6.0 - 1e-9


def test_token_clusters_labels_from_multiset():
    tr = generate_token_clusters(3, 5, 6, 500, np.random.default_rng(1))["train"]
    assert np.array_equal(tr.y, np.sort(tr.meta["clusters"], axis=1).sum(axis=1) % 3)


def test_token_clusters_single_cluster():
    tr = generate_token_clusters(1, 4, 3, 50, np.random.default_rng(2))["train"]
    assert np.all(tr.meta["clusters"] == 0) and np.all(tr.y == 0)


def test_token_clusters_balanced_labels():
    y = generate_token_clusters(4, 8, 16, 20_000, np.random.default_rng(3))["train"].y
    counts = np.bincount(y, minlength=4)
    assert np.all(np.abs(counts - 5000) <= 3 * np.sqrt(20_000 * 0.25 * 0.75))


def test_token_clusters_low_dim_separation():
    ds = generate_token_clusters(5, 2, 2, 10, np.random.default_rng(4))
    c = ds.arrays["centers"]
    assert min(np.linalg.norm(c[i] - c[j]) for i in range(5) for j in range(i + 1, 5)) >= 8.0 - 1e-9


def test_token_clusters_validation():
    with pytest.raises(ValueError):
        generate_token_clusters(4, 0, 3, 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        generate_token_clusters(4, 2, 3, 10, np.random.default_rng(0), separation=5.0)


# container

def test_round_trip(tmp_path):
    ds = small(p1=0.9)
    path = tmp_path / "d.gmds"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert spec_of(back) == spec_of(ds)
    np.testing.assert_array_equal(back.arrays["basis"], ds.arrays["basis"])
    for s in SPLITS:
        assert back[s].x.tobytes() == ds[s].x.tobytes()
        assert np.array_equal(back[s].y, ds[s].y)
        for k in ds[s].meta:
            assert np.array_equal(back[s].meta[k], ds[s].meta[k])


def test_header_layout(tmp_path):
    path = tmp_path / "d.gmds"
    save_dataset(small(P=5), path)
    raw = path.read_bytes()
    assert raw[:8] == b"GMDS0001"
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    assert header["meta"]["info"]["spec"]["P"] == 5
    assert {"name", "dtype", "shape", "offset", "nbytes"} <= set(header["arrays"][0])


def test_corruption_detected(tmp_path):
    path = tmp_path / "d.gmds"
    save_dataset(small(), path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_dataset(path)


def test_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "d.gmds"
    save_dataset(small(), path)
    raw = path.read_bytes()
    with pytest.raises(BadMagicError):
        container.decode(raw, container.CHECKPOINT_MAGIC)
    with pytest.raises(TruncatedError):
        container.decode(raw[:14], container.DATASET_MAGIC)
    with pytest.raises(TruncatedError):
        container.decode(raw[:40], container.DATASET_MAGIC)


def test_big_endian_arrays_stored_little_endian():
    arr = np.arange(5, dtype=">f8")
    meta, arrays = container.decode(container.encode(b"GMDS0001", {}, {"a": arr}), b"GMDS0001")
    assert arrays["a"].dtype == np.dtype("<f8")
    np.testing.assert_array_equal(arrays["a"], arr)
