"""Synthetic distribution-shift datasets.

Each sample is ``P`` patches of ``K`` pixels and a label ``y`` in ``[0, K)``.
Two features predict ``y`` in training:

* pixel-level: pixel ``y`` of patch 0 is set to 1, the rest of patch 0 is N(0, 1);
* patch-level: one patch among ``1..P-1`` equals the basis vector ``c_y``.

``test1`` moves the pixel feature to ``(y + 1) mod K``; ``test2`` replaces the
patch feature with ``c_{(y + 1) mod K}``.  ``val`` is drawn like ``train``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import container

SPLITS = ("train", "val", "test1", "test2")


@dataclass
class SyntheticSpec:
    P: int = 10
    K: int = 4
    n_train: int = 100_000
    n_eval: int = 2_000
    p1: float = 1.0
    p2: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ValueError(f"need P >= 2 and K >= 2, got P={self.P}, K={self.K}")
        if not (0 < self.p1 <= 1 and 0 < self.p2 <= 1):
            raise ValueError(f"p1, p2 must lie in (0, 1], got {self.p1}, {self.p2}")
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("sample counts must be positive")


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray
    meta: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Dataset:
    """Named splits plus dataset-level arrays and a JSON-able description."""

    kind: str
    splits: dict[str, Split]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]

    @property
    def num_classes(self) -> int:
        return int(self.info["num_classes"])


def make_feature_basis(K: int, rng: np.random.Generator) -> np.ndarray:
    """Random orthogonal ``K×K`` matrix; column ``k`` is the feature vector ``c_k``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    q, r = np.linalg.qr(rng.standard_normal((K, K)))
    return q * np.sign(np.diag(r))


def _other_class(y: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    return (y + rng.integers(1, K, size=y.shape)) % K


def _split(n: int, kind: str, spec: SyntheticSpec, basis: np.ndarray,
           rng: np.random.Generator) -> Split:
    P, K = spec.P, spec.K
    y = rng.integers(0, K, size=n)
    x = rng.standard_normal((n, P, K))
    # fixed draw order whatever the probabilities, so p1/p2 never shift the stream
    keep_pixel = rng.random(n) < spec.p1
    keep_patch = rng.random(n) < spec.p2
    pixel_other = _other_class(y, K, rng)
    patch_other = _other_class(y, K, rng)
    loc = rng.integers(1, P, size=n)

    if kind == "test1":
        pixel = (y + 1) % K
    else:
        pixel = np.where(keep_pixel, y, pixel_other)
    if kind == "test2":
        patch_cls = (y + 1) % K
    else:
        patch_cls = np.where(keep_patch, y, patch_other)

    rows = np.arange(n)
    x[rows, 0, pixel] = 1.0
    x[rows, loc, :] = basis[:, patch_cls].T
    return Split(x, y, {"pixel_index": pixel, "patch_index": loc, "patch_class": patch_cls})


def generate(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> Dataset:
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    basis = make_feature_basis(spec.K, rng)
    splits = {}
    for name in SPLITS:
        n = spec.n_train if name == "train" else spec.n_eval
        splits[name] = _split(n, name, spec, basis, rng)
    info = {"spec": asdict(spec), "num_classes": spec.K}
    return Dataset("synthetic_dg", splits, {"basis": basis}, info)


def generate_token_clusters(n_clusters: int, tokens_per_sample: int, dim: int, n: int,
                            rng: np.random.Generator, n_eval: int | None = None,
                            sigma: float = 1.0, separation: float = 8.0) -> Dataset:
    """Token sequences drawn from well separated Gaussian clusters.

    Every token carries its cluster id in ``meta["clusters"]``; the sample
    label is the sum of its tokens' cluster ids modulo ``n_clusters``.
    Cluster centres sit at pairwise distance ``separation * sigma`` (>= 6σ).
    """
    if n_clusters < 1 or tokens_per_sample < 1 or dim < 1:
        raise ValueError("cluster count, tokens per sample and dim must be positive")
    if separation < 6:
        raise ValueError("separation must be at least 6 sigma")
    C = n_clusters
    if dim >= C:
        q, _ = np.linalg.qr(rng.standard_normal((dim, C)))
        centers = q.T * (separation * sigma / np.sqrt(2.0))
    else:
        centers = rng.standard_normal((C, dim))
        dmin = min(np.linalg.norm(centers[i] - centers[j]) for i in range(C) for j in range(i + 1, C)) if C > 1 else 1.0
        centers *= separation * sigma / dmin
    n_eval = n_eval if n_eval is not None else max(1, n // 5)

    def draw(count):
        ids = rng.integers(0, C, size=(count, tokens_per_sample))
        x = centers[ids] + sigma * rng.standard_normal((count, tokens_per_sample, dim))
        return Split(x, ids.sum(axis=1) % C, {"clusters": ids})

    splits = {"train": draw(n), "val": draw(n_eval)}
    info = {"num_classes": C, "n_clusters": C, "tokens_per_sample": tokens_per_sample,
            "dim": dim, "sigma": sigma, "separation": separation}
    return Dataset("token_clusters", splits, {"centers": centers}, info)


def save_dataset(ds: Dataset, path) -> None:
    arrays = {f"dataset/{k}": v for k, v in ds.arrays.items()}
    for name, split in ds.splits.items():
        arrays[f"{name}/x"] = split.x
        arrays[f"{name}/y"] = split.y
        for k, v in split.meta.items():
            arrays[f"{name}/meta/{k}"] = v
    meta = {"kind": ds.kind, "info": ds.info, "splits": list(ds.splits)}
    container.write(path, container.DATASET_MAGIC, meta, arrays)


def load_dataset(path) -> Dataset:
    meta, arrays = container.read(path, container.DATASET_MAGIC)
    splits = {}
    for name in meta["splits"]:
        prefix = f"{name}/meta/"
        extra = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        splits[name] = Split(arrays[f"{name}/x"], arrays[f"{name}/y"], extra)
    ds_arrays = {k[len("dataset/"):]: v for k, v in arrays.items() if k.startswith("dataset/")}
    return Dataset(meta["kind"], splits, ds_arrays, meta["info"])


def spec_of(ds: Dataset) -> SyntheticSpec:
    return SyntheticSpec(**ds.info["spec"])
