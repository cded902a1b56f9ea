"""One-shot MLP/FCN distribution-shift experiment on the synthetic dataset.

Both architectures train on data where a pixel-level and a patch-level feature
each determine the label.  ``test1`` breaks the pixel feature and ``test2``
breaks the patch feature, so the accuracy gap shows which feature a network
picked up.
"""

from __future__ import annotations

import numpy as np

from .models import build_fcn, build_mlp
from .rng import Streams
from .synthetic import SyntheticSpec, generate
from .trainer import TrainConfig, train, train_validation_select

VARIANTS = {"noiseless": (1.0, 1.0), "noisy": (0.9, 0.9)}
DEFAULT_ITERATIONS = {"mlp": 10_000, "fcn": 5_000}


def build_alignment_model(kind: str, K: int, P: int, rng):
    if kind == "mlp":
        return build_mlp((P * K, 100, 100, K), rng)
    if kind == "fcn":
        return build_fcn(20, K, K, rng, pool="max")
    raise ValueError(f"unknown model {kind!r}")


def alignment_experiment(variant: str, model: str, seed: int = 0, iterations: int | None = None,
                         n_train: int = 100_000, n_eval: int = 2_000, batch_size: int = 128,
                         eval_every: int | None = None, dataset=None) -> dict:
    """Train ``model`` once and report accuracies at the selected checkpoint.

    The checkpoint is chosen by train-validation selection (best ``val``).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    p1, p2 = VARIANTS[variant]
    iterations = iterations or DEFAULT_ITERATIONS[model]
    if dataset is None:
        dataset = generate(SyntheticSpec(n_train=n_train, n_eval=n_eval, p1=p1, p2=p2, seed=seed))
    spec = dataset.info["spec"]
    net = build_alignment_model(model, spec["K"], spec["P"], Streams(seed)["init"])
    cfg = TrainConfig(profile="synthetic", iterations=iterations, batch_size=batch_size,
                      eval_every=eval_every or max(1, iterations // 10), seed=seed,
                      precision="float32")
    checkpoints, _ = train(net, dataset, cfg)
    best = train_validation_select(checkpoints)
    return {
        "variant": variant, "model": model, "seed": seed, "iterations": iterations,
        "selected_iteration": best.iteration,
        "selected": {k: float(v) for k, v in best.accuracies.items()},
        "final": {k: float(v) for k, v in checkpoints[-1].accuracies.items()},
    }


def balancing_experiment(lam: float, seed: int = 0, iterations: int = 1_000, n_clusters: int = 4,
                         num_experts: int = 4, k: int = 1, tokens_per_sample: int = 8, dim: int = 16,
                         width: int = 16, depth: int = 2, n_train: int = 4_000, n_eval: int = 500,
                         batch_size: int = 32, learning_rate: float = 1e-3, dataset=None) -> dict:
    """Train a small GMoE on the token-cluster toy with balance weight ``lam``.

    Returns the final per-layer CV² of importance and load, expert token
    shares and specialization purity of tokens' cluster ids.
    """
    from .models import ModelConfig, build_gmoe
    from .moe import RouterConfig
    from .synthetic import generate_token_clusters
    from .telemetry import (balance_report, collect_traces, empty_histogram, record_routing,
                            specialization_purity, token_labels_for_trace)

    if dataset is None:
        dataset = generate_token_clusters(n_clusters, tokens_per_sample, dim, n_train,
                                          Streams(seed)["dataset"], n_eval=n_eval)
    cfg = ModelConfig(depth=depth, dim=width, heads=2, placement="every_two", input_kind="tokens",
                      input_dim=dim, num_tokens=tokens_per_sample, num_classes=n_clusters,
                      moe=RouterConfig(kind="cosine", k=k, num_experts=num_experts))
    model = build_gmoe(cfg, Streams(seed)["init"])
    tcfg = TrainConfig(profile="synthetic", learning_rate=learning_rate, iterations=iterations,
                       batch_size=batch_size, eval_every=iterations, lam=lam, seed=seed)
    checkpoints, _ = train(model, dataset, tcfg)
    val = dataset["val"]
    traces = collect_traces(model, val)
    report = balance_report(traces)
    purity = []
    for pos, layer in enumerate(traces[0].layers):
        hist = empty_histogram(n_clusters, num_experts, layer)
        for tr in traces:
            record_routing(tr, token_labels_for_trace(tr, val.meta["clusters"]), hist, pos)
        purity.append(specialization_purity(hist))
    return {
        "lam": lam, "seed": seed, "iterations": iterations,
        "accuracy": checkpoints[-1].accuracies["val"],
        "cv2_importance": [r["cv2_importance"] for r in report],
        "cv2_load": [r["cv2_load"] for r in report],
        "shares": [r["shares"] for r in report],
        "purity": purity,
    }
