"""Routing telemetry: expert/attribute histograms, specialization purity, balance reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import importance_loss, load_loss
from .models import RoutingTrace, model_forward
from .tensor import Tensor, concat, no_grad


@dataclass
class ExpertHistogram:
    """``counts[a, e]``: tokens with attribute ``a`` whose top-1 expert was ``e``."""

    counts: np.ndarray
    row_labels: list[str] = field(default_factory=list)
    layer: int = -1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: ExpertHistogram) -> ExpertHistogram:
        if self.counts.shape != other.counts.shape or self.layer != other.layer:
            raise ValueError("histograms differ in shape or layer")
        return ExpertHistogram(self.counts + other.counts, list(self.row_labels), self.layer)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["attribute"] + [f"expert_{e}" for e in range(self.counts.shape[1])])
            for label, row in zip(self.row_labels, self.counts):
                w.writerow([label] + [int(c) for c in row])


def empty_histogram(n_attributes: int, n_experts: int, layer: int = -1, labels=None) -> ExpertHistogram:
    labels = list(labels) if labels is not None else [str(a) for a in range(n_attributes)]
    return ExpertHistogram(np.zeros((n_attributes, n_experts), dtype=np.int64), labels, layer)


def record_routing(trace: RoutingTrace, token_labels, hist: ExpertHistogram | None = None,
                   layer_pos: int = 0, n_attributes: int | None = None,
                   n_experts: int | None = None) -> ExpertHistogram:
    """Add one count per token to ``hist[label, top1 expert]``; labels < 0 are skipped."""
    labels = np.asarray(token_labels).reshape(-1)
    top1 = trace.top1(layer_pos)
    if labels.shape[0] != top1.shape[0]:
        raise ValueError(f"{labels.shape[0]} token labels for {top1.shape[0]} routed tokens")
    if hist is None:
        n_attributes = n_attributes or int(labels.max()) + 1
        n_experts = n_experts or trace.gate_weights[layer_pos].shape[1]
        hist = empty_histogram(n_attributes, n_experts, trace.layers[layer_pos])
    keep = labels >= 0
    np.add.at(hist.counts, (labels[keep], top1[keep]), 1)
    return hist


def specialization_purity(hist: ExpertHistogram) -> float:
    """Fraction of tokens routed to their attribute's most used expert."""
    total = hist.counts.sum()
    if total == 0:
        raise ValueError("purity of an empty histogram")
    return float(hist.counts.max(axis=1).sum() / total)


def token_labels_for_trace(trace: RoutingTrace, per_token: np.ndarray) -> np.ndarray:
    """Map ``per_token[sample, patch]`` onto trace order; the class token gets -1."""
    tid = trace.token_ids
    labels = np.full(tid.shape, -1, dtype=np.int64)
    body = tid > 0
    labels[body] = per_token[trace.sample_ids[body], tid[body] - 1]
    return labels


def collect_traces(model, split, batch_size: int = 500, dtype=np.float64) -> list[RoutingTrace]:
    """Eval-mode (noise-free) routing traces over a whole split."""
    traces = []
    with no_grad():
        for s in range(0, len(split), batch_size):
            xb = Tensor(np.asarray(split.x[s:s + batch_size], dtype=dtype))
            _, tr = model_forward(model, xb, train_mode=False)
            tr.sample_ids = tr.sample_ids + s
            traces.append(tr)
    return traces


def balance_report(traces) -> list[dict]:
    """Per MoE layer: CV² of importance and load (the loss functions) and expert token shares."""
    if isinstance(traces, RoutingTrace):
        traces = [traces]
    if not traces or not traces[0].layers:
        return []
    report = []
    for pos, layer in enumerate(traces[0].layers):
        gates = concat([tr.decisions[pos].gate_weights for tr in traces], axis=0)
        loads = concat([tr.decisions[pos].load_prob for tr in traces], axis=0)
        sel = np.concatenate([tr.selected[pos] for tr in traces], axis=0)
        n_exp = gates.shape[1]
        counts = np.bincount(sel.reshape(-1), minlength=n_exp)
        report.append({
            "layer": int(layer),
            "cv2_importance": importance_loss(gates).item(),
            "cv2_load": load_loss(loads).item(),
            "shares": (counts / counts.sum()).tolist(),
        })
    return report


def write_balance_report(report: list[dict], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "balance.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with open(out / "balance.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "cv2_importance", "cv2_load", "expert", "share"])
        for r in report:
            for e, s in enumerate(r["shares"]):
                w.writerow([r["layer"], repr(r["cv2_importance"]), repr(r["cv2_load"]), e, repr(s)])
