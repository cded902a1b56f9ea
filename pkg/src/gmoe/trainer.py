"""Deterministic mini-batch training with Adam, evaluation, checkpoints and model selection."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import container
from . import tensor as T
from .losses import DEFAULT_LAMBDA, importance_loss, load_loss, total_loss
from .models import GMoE, describe_model, model_forward
from .rng import Streams
from .synthetic import Dataset, Split
from .tensor import NonFiniteError, Tensor, cross_entropy, no_grad

logger = logging.getLogger(__name__)

# learning rate, weight decay
PROFILES = {
    "pacs": (3e-5, 0.0),
    "vlcs": (3e-5, 1e-6),
    "officehome": (1e-5, 1e-6),
    "terrainc": (5e-5, 1e-4),
    "domainnet": (5e-5, 0.0),
    "synthetic": (1e-3, 0.0),
}

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8

CSV_COLUMNS = ("iteration", "split", "accuracy", "loss", "classification", "importance", "load", "total")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, detail: str = ""):
        super().__init__(f"non-finite loss at iteration {iteration}{': ' + detail if detail else ''}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    profile: str = "pacs"
    learning_rate: float | None = None
    weight_decay: float | None = None
    batch_size: int = 32
    iterations: int = 5000
    lam: float = DEFAULT_LAMBDA
    eval_every: int = 500
    seed: int = 0
    precision: str = "float64"
    eval_train_samples: int = 2000

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        lr, wd = PROFILES[self.profile]
        if self.learning_rate is None:
            self.learning_rate = lr
        if self.weight_decay is None:
            self.weight_decay = wd
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")
        if self.batch_size < 1 or self.iterations < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1, iterations >= 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be 'float64' or 'float32'")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0) -> AdamState:
    """One in-place Adam update with bias correction and decoupled weight decay."""
    state.t += 1
    b1c = 1.0 - BETA1 ** state.t
    b2c = 1.0 - BETA2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise T.ShapeError(f"adam_step: gradient {g.shape} for parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        if weight_decay:
            p.data = p.data - lr * weight_decay * p.data
        p.data = p.data - lr * (m / b1c) / (np.sqrt(v / b2c) + ADAM_EPS)
    return state


@dataclass
class Checkpoint:
    iteration: int
    state: dict[str, np.ndarray]
    accuracies: dict[str, float]
    losses: dict[str, float]
    balance: list[dict] = field(default_factory=list)


@dataclass
class Metrics:
    rows: list[dict] = field(default_factory=list)
    checkpoints: list[dict] = field(default_factory=list)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"checkpoints": self.checkpoints}


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def aux_losses(trace):
    """Summed importance and load losses over a trace's MoE layers (``None`` without experts)."""
    if not trace.decisions:
        return None, None
    imp = load = None
    for dec in trace.decisions:
        li, ll = importance_loss(dec.gate_weights), load_loss(dec.load_prob)
        imp = li if imp is None else T.add(imp, li)
        load = ll if load is None else T.add(load, ll)
    return imp, load


def evaluate(model, split: Split, batch_size: int = 500, dtype=np.float64) -> tuple[float, float]:
    """Argmax accuracy and mean cross-entropy with routing noise off."""
    n = len(split)
    if n == 0:
        raise ValueError("cannot evaluate on an empty split")
    correct, loss_sum = 0, 0.0
    with no_grad():
        for s in range(0, n, batch_size):
            xb = np.asarray(split.x[s:s + batch_size], dtype=dtype)
            yb = np.asarray(split.y[s:s + batch_size])
            logits, _ = model_forward(model, Tensor(xb), train_mode=False)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
            loss_sum += cross_entropy(logits, yb).item() * len(yb)
    return correct / n, loss_sum / n


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        perm = rng.permutation(n)
        for s in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[s:s + batch_size]


def train(model, dataset: Dataset, cfg: TrainConfig, out_dir=None, model_meta: dict | None = None):
    """Run ``cfg.iterations`` Adam steps; evaluate and checkpoint every ``cfg.eval_every``.

    Returns ``(checkpoints, metrics)``.  With ``out_dir`` the metrics CSV, JSON
    summary and one GMCK file per checkpoint are written there.
    """
    from .telemetry import balance_report, collect_traces

    model_meta = model_meta or describe_model(model)
    streams = Streams(cfg.seed)
    data_rng, noise_rng = streams["data"], streams["noise"]
    dtype = cfg.dtype
    model.astype(dtype)
    params = dict(model.named_parameters())
    state = AdamState()
    train_split = dataset["train"]
    eval_splits = {name: s for name, s in dataset.splits.items() if name != "train"}
    n_probe = min(cfg.eval_train_samples, len(train_split))
    eval_splits = {"train": Split(train_split.x[:n_probe], train_split.y[:n_probe]), **eval_splits}
    metrics, checkpoints = Metrics(), []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(",".join(CSV_COLUMNS) + "\n")

    window = {"classification": [], "importance": [], "load": [], "total": []}

    def record(it: int):
        losses = {k: float(np.mean(v)) if v else float("nan") for k, v in window.items()}
        for v in window.values():
            v.clear()
        accs, rows = {}, []
        for name, split in eval_splits.items():
            acc, loss = evaluate(model, split, dtype=dtype)
            accs[name] = acc
            rows.append({"iteration": it, "split": name, "accuracy": acc, "loss": loss, **losses})
        balance = []
        if isinstance(model, GMoE) and model.moe_blocks:
            probe = eval_splits.get("val", eval_splits["train"])
            balance = balance_report(collect_traces(model, probe, dtype=dtype))
        ck = Checkpoint(it, model.state_dict(), accs, losses, balance)
        checkpoints.append(ck)
        metrics.rows.extend(rows)
        summary = {"iteration": it, "accuracies": accs, "losses": losses, "balance": balance}
        metrics.checkpoints.append(summary)
        if out is not None:
            with open(out / "metrics.csv", "a") as fh:
                w = csv.writer(fh, lineterminator="\n")
                for r in rows:
                    w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
            save_checkpoint(out / f"ckpt_{it:06d}.gmck", model, state, it, model_meta, cfg, summary)
        logger.info("iter %d %s", it, " ".join(f"{k}={v:.4f}" for k, v in accs.items()))

    record(0)
    batches = _batches(len(train_split), cfg.batch_size, data_rng)
    for it in range(1, cfg.iterations + 1):
        idx = next(batches)
        xb = Tensor(np.asarray(train_split.x[idx], dtype=dtype))
        yb = train_split.y[idx]
        try:
            logits, trace = model_forward(model, xb, train_mode=True, rng=noise_rng)
            cls = cross_entropy(logits, yb)
            imp, load = aux_losses(trace)
            loss = cls if imp is None else total_loss(cls, imp, load, cfg.lam)
        except NonFiniteError as exc:
            raise TrainingDiverged(it, str(exc)) from exc
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(it)
        window["classification"].append(cls.item())
        window["importance"].append(0.0 if imp is None else imp.item())
        window["load"].append(0.0 if load is None else load.item())
        window["total"].append(loss.item())
        model.zero_grad()
        loss.backward()
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        adam_step(params, grads, state, cfg.learning_rate, cfg.weight_decay)
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            record(it)

    if out is not None:
        (out / "summary.json").write_text(json.dumps(metrics.summary(), indent=2, sort_keys=True))
    return checkpoints, metrics


def train_validation_select(checkpoints, split: str = "val"):
    """Checkpoint with the best pooled validation accuracy; ties go to the earliest."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    accs = [ck.accuracies[split] if isinstance(ck, Checkpoint) else ck["accuracies"][split]
            for ck in checkpoints]
    return checkpoints[int(np.argmax(accs))]


def save_checkpoint(path, model, state: AdamState | None, iteration: int, model_meta: dict,
                    cfg: TrainConfig | None = None, summary: dict | None = None) -> None:
    arrays = {f"param/{n}": p.data for n, p in model.named_parameters()}
    if state is not None:
        for n in sorted(state.m):
            arrays[f"adam_m/{n}"] = state.m[n]
            arrays[f"adam_v/{n}"] = state.v[n]
    meta = {"iteration": iteration, "model": model_meta, "adam_t": state.t if state else 0,
            "train": asdict(cfg) if cfg else None, "summary": summary}
    container.write(path, container.CHECKPOINT_MAGIC, _jsonable(meta), arrays)


def load_checkpoint(path):
    """``(model, meta, adam_state)`` from a GMCK file."""
    from .models import model_from_meta

    meta, arrays = container.read(path, container.CHECKPOINT_MAGIC)
    model = model_from_meta(meta["model"])
    state = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    model.astype(next(iter(state.values())).dtype)
    adam = AdamState(
        m={k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")},
        v={k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")},
        t=int(meta.get("adam_t", 0)),
    )
    return model, meta, adam


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj
