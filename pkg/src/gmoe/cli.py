"""Command-line interface: ``gmoe <command> [flags]``.

Exit status: 0 success, 1 validation failure (bad flags, bad config, failed
checks), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import synthetic
from .models import ModelConfig, build_fcn, build_gmoe, build_mlp, describe_model
from .moe import RouterConfig
from .rng import Streams
from .trainer import TrainConfig, evaluate, load_checkpoint, train, train_validation_select

log = logging.getLogger("gmoe")

DATASET_FILE = "dataset.gmds"


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# layered configuration: built-in defaults < config file < flags
# ---------------------------------------------------------------------------

def default_train_config() -> dict:
    return {
        "model": {
            "kind": "mlp",
            "seed": 0,
            "mlp": {"widths": [40, 100, 100, 4]},
            "fcn": {"filters": 20, "pool": "max"},
            "gmoe": {"depth": 4, "dim": 32, "heads": 4, "placement": "last_two",
                     "expansion": 4, "activation": "gelu",
                     "moe": {f.name: getattr(RouterConfig(kind="cosine", k=2, num_experts=4), f.name)
                             for f in fields(RouterConfig)}},
        },
        "train": {f.name: getattr(TrainConfig(profile="synthetic", iterations=2000, eval_every=200,
                                              batch_size=128), f.name)
                  for f in fields(TrainConfig)},
    }


def default_synth_config() -> dict:
    d = asdict(synthetic.SyntheticSpec())
    d.update({"kind": "synthetic_dg", "n_clusters": 4, "tokens_per_sample": 8, "dim": 16})
    return d


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def set_path(d: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def merge(base: dict, override: dict, known: set[str]) -> dict:
    out = copy.deepcopy(base)
    for key, value in flatten(override).items():
        if key not in known:
            raise ValidationError(f"unknown config key {key!r}")
        set_path(out, key, value)
    return out


def layered_config(defaults: dict, config_path, flag_values: dict) -> dict:
    known = set(flatten(defaults))
    cfg = copy.deepcopy(defaults)
    if config_path:
        loaded = yaml.safe_load(Path(config_path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValidationError(f"{config_path}: expected a key/value document")
        cfg = merge(cfg, loaded, known)
    overrides = {}
    for key, raw in flag_values.items():
        if raw is not None:
            set_path(overrides, key, yaml.safe_load(raw))
    return merge(cfg, overrides, known)


def add_key_flags(parser: argparse.ArgumentParser, defaults: dict) -> list[str]:
    keys = sorted(flatten(defaults))
    for key in keys:
        parser.add_argument(f"--{key}", dest=f"key:{key}", metavar="VALUE", default=None,
                            help=argparse.SUPPRESS)
    return keys


def key_flags(args: argparse.Namespace) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("key:")}


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def content_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(path, command: str, argv: list[str], config, seed, inputs: dict, outputs: dict) -> dict:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": {name: {"path": str(p), "hash": content_hash(p)} for name, p in inputs.items()},
        "outputs": {name: str(p) for name, p in outputs.items()},
    }
    if path is None:
        log.info("manifest %s", json.dumps(manifest, sort_keys=True))
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _dataset_path(data: str) -> Path:
    p = Path(data)
    return p / DATASET_FILE if p.is_dir() else p


def cmd_synth_gen(args, argv) -> int:
    cfg = layered_config(default_synth_config(), args.spec, key_flags(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {"spec": args.spec} if args.spec else {}
    write_manifest(out / "manifest.json", "synth-gen", argv, cfg, cfg["seed"], inputs,
                   {"dataset": out / DATASET_FILE})
    if cfg["kind"] == "synthetic_dg":
        spec = synthetic.SyntheticSpec(**{k: cfg[k] for k in ("P", "K", "n_train", "n_eval", "p1", "p2", "seed")})
        ds = synthetic.generate(spec)
    elif cfg["kind"] == "token_clusters":
        ds = synthetic.generate_token_clusters(cfg["n_clusters"], cfg["tokens_per_sample"], cfg["dim"],
                                               cfg["n_train"], np.random.default_rng(cfg["seed"]),
                                               n_eval=cfg["n_eval"])
    else:
        raise ValidationError(f"unknown dataset kind {cfg['kind']!r}")
    synthetic.save_dataset(ds, out / DATASET_FILE)
    print(json.dumps({"dataset": str(out / DATASET_FILE), "kind": ds.kind, "info": ds.info}, sort_keys=True))
    return 0


def build_model(model_cfg: dict, ds: synthetic.Dataset):
    kind = model_cfg["kind"]
    streams = Streams(model_cfg["seed"])
    x = ds["train"].x
    n_classes = ds.num_classes
    if kind == "mlp":
        widths = list(model_cfg["mlp"]["widths"])
        flat = int(np.prod(x.shape[1:]))
        if widths[0] != flat or widths[-1] != n_classes:
            raise ValidationError(f"MLP widths {widths} must start at {flat} inputs and end at {n_classes} classes")
        return build_mlp(widths, streams["init"])
    if kind == "fcn":
        return build_fcn(model_cfg["fcn"]["filters"], x.shape[2], n_classes, streams["init"],
                         pool=model_cfg["fcn"]["pool"])
    if kind == "gmoe":
        g = dict(model_cfg["gmoe"])
        g.update(input_kind="tokens", input_dim=x.shape[2], num_tokens=x.shape[1], num_classes=n_classes)
        return build_gmoe(ModelConfig(**g), streams["init"])
    raise ValidationError(f"unknown model kind {kind!r}")


def cmd_train(args, argv) -> int:
    cfg = layered_config(default_train_config(), args.config, key_flags(args))
    try:
        tcfg = TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    data = _dataset_path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {"data": data} | ({"config": args.config} if args.config else {})
    write_manifest(out / "manifest.json", "train", argv, cfg, tcfg.seed, inputs,
                   {"metrics": out / "metrics.csv", "summary": out / "summary.json"})
    ds = synthetic.load_dataset(data)
    try:
        model = build_model(cfg["model"], ds)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    checkpoints, _ = train(model, ds, tcfg, out_dir=out, model_meta=describe_model(model))
    best = train_validation_select(checkpoints) if "val" in ds.splits else checkpoints[-1]
    # file name only, so identical runs in different directories stay byte-identical
    result = {"selected_iteration": best.iteration, "accuracies": best.accuracies,
              "checkpoint": f"ckpt_{best.iteration:06d}.gmck"}
    (out / "selected.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    print(json.dumps(result | {"checkpoint": str(out / result["checkpoint"])}, sort_keys=True))
    return 0


def cmd_eval(args, argv) -> int:
    data = _dataset_path(args.data)
    write_manifest(args.manifest, "eval", argv, None, None,
                   {"checkpoint": args.checkpoint, "data": data}, {})
    model, meta, _ = load_checkpoint(args.checkpoint)
    ds = synthetic.load_dataset(data)
    dtype = next(iter(model.parameters())).dtype
    result = {"iteration": meta["iteration"], "splits": {}}
    for name, split in ds.splits.items():
        acc, loss = evaluate(model, split, dtype=dtype)
        result["splits"][name] = {"accuracy": acc, "loss": loss}
    print(json.dumps(result, sort_keys=True))
    return 0


def _token_attributes(ds: synthetic.Dataset, split: synthetic.Split) -> tuple[np.ndarray, list[str]]:
    if "clusters" in split.meta:
        n = ds.info["n_clusters"]
        return split.meta["clusters"], [f"cluster_{c}" for c in range(n)]
    n, P = split.x.shape[:2]
    roles = np.full((n, P), 2, dtype=np.int64)
    roles[:, 0] = 0
    roles[np.arange(n), split.meta["patch_index"]] = 1
    return roles, ["pixel_patch", "feature_patch", "noise_patch"]


def cmd_analyze_routing(args, argv) -> int:
    from . import telemetry

    data = _dataset_path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.json", "analyze-routing", argv, {"split": args.split}, None,
                   {"checkpoint": args.checkpoint, "data": data},
                   {"balance": out / "balance.json", "histograms": out / "histograms.json"})
    model, _, _ = load_checkpoint(args.checkpoint)
    if not getattr(model, "moe_blocks", None):
        raise ValidationError("checkpoint has no MoE layers to analyse")
    ds = synthetic.load_dataset(data)
    split = ds[args.split]
    dtype = next(iter(model.parameters())).dtype
    traces = telemetry.collect_traces(model, split, dtype=dtype)
    report = telemetry.balance_report(traces)
    telemetry.write_balance_report(report, out)
    per_token, labels = _token_attributes(ds, split)
    summary = []
    for pos, layer in enumerate(traces[0].layers):
        n_exp = traces[0].gate_weights[pos].shape[1]
        hist = telemetry.empty_histogram(len(labels), n_exp, layer, labels)
        for tr in traces:
            telemetry.record_routing(tr, telemetry.token_labels_for_trace(tr, per_token), hist, pos)
        hist.to_csv(out / f"histogram_layer{layer}.csv")
        summary.append({"layer": layer, "purity": telemetry.specialization_purity(hist),
                        "counts": hist.counts.tolist(), "attributes": labels})
    (out / "histograms.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps({"balance": report, "purity": {s["layer"]: s["purity"] for s in summary}}, sort_keys=True))
    return 0


def cmd_gradcheck(args, argv) -> int:
    from .gradcheck import TOLERANCE, run_suite

    write_manifest(args.manifest, "gradcheck", argv, {"seed": args.seed}, args.seed, {}, {})
    results = run_suite(seed=args.seed)
    worst = 0.0
    for name, err in results.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{status:4s} {name:32s} {err:.3e}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    return 0 if worst < TOLERANCE else 1


def cmd_alignment_exp(args, argv) -> int:
    from .experiments import alignment_experiment

    out = Path(args.out) if args.out else None
    seeds = [int(s) for s in args.seeds.split(",")]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / "manifest.json", "alignment-exp", argv,
                       {"variant": args.variant, "model": args.model, "seeds": seeds,
                        "iterations": args.iterations}, seeds, {}, {"result": out / "result.json"})
    results = [alignment_experiment(args.variant, args.model, seed=s, iterations=args.iterations,
                                    n_train=args.n_train) for s in seeds]
    summary = {"variant": args.variant, "model": args.model, "runs": results,
               "mean": {k: float(np.mean([r["selected"][k] for r in results]))
                        for k in ("val", "test1", "test2")}}
    if out is not None:
        (out / "result.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary["mean"] | {"variant": args.variant, "model": args.model}, sort_keys=True))
    return 0


def cmd_plot(args, argv) -> int:
    import csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(args.report, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{args.report} is empty")
    header, body = rows[0], rows[1:]
    fig, ax = plt.subplots(figsize=(6, 4))
    if header[0] == "attribute":
        counts = np.array([[float(c) for c in r[1:]] for r in body])
        frac = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)
        im = ax.imshow(frac, cmap="viridis", aspect="auto", vmin=0, vmax=1)
        ax.set_xticks(range(len(header) - 1), [h.replace("expert_", "") for h in header[1:]])
        ax.set_yticks(range(len(body)), [r[0] for r in body])
        ax.set_xlabel("expert")
        fig.colorbar(im, ax=ax, label="fraction of tokens")
    elif header[:2] == ["iteration", "split"]:
        splits = sorted({r[1] for r in body})
        for s in splits:
            pts = [(int(r[0]), float(r[2])) for r in body if r[1] == s]
            ax.plot(*zip(*pts), marker="o", label=s)
        ax.set_xlabel("iteration")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1)
        ax.legend()
    elif header[0] == "layer":
        layers = sorted({r[0] for r in body}, key=int)
        width = 0.8 / len(layers)
        for i, layer in enumerate(layers):
            pts = [(int(r[3]), float(r[4])) for r in body if r[0] == layer]
            xs, ys = zip(*pts)
            ax.bar(np.array(xs) + i * width, ys, width=width, label=f"layer {layer}")
        ax.set_xlabel("expert")
        ax.set_ylabel("token share")
        ax.legend()
    else:
        raise ValidationError(f"unrecognised report columns {header}")
    fig.tight_layout()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, dpi=120)
    plt.close(fig)
    return 0


def cmd_replay(args, argv) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    return main(manifest["argv"])


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gmoe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    s.add_argument("--spec")
    s.add_argument("--out", required=True)
    add_key_flags(s, default_synth_config())
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("train", help="train a model on a dataset")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    add_key_flags(s, default_train_config())
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on every split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze-routing", help="expert histograms and balance statistics")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="val")
    s.set_defaults(func=cmd_analyze_routing)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("alignment-exp", help="MLP/FCN distribution-shift experiment")
    s.add_argument("--variant", choices=("noiseless", "noisy"), required=True)
    s.add_argument("--model", choices=("mlp", "fcn"), required=True)
    s.add_argument("--seeds", default="0")
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--n-train", type=int, default=100_000)
    s.add_argument("--out")
    s.set_defaults(func=cmd_alignment_exp)

    s = sub.add_parser("plot", help="render a report CSV as a static image")
    s.add_argument("--report", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.time()
    try:
        code = args.func(args, argv)
    except ValidationError as exc:
        print(f"gmoe {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"gmoe {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    log.info("%s finished in %.1fs", args.command, time.time() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
