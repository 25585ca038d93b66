"""Command-line interface: ``train``, ``bench``, ``verify``, ``export-embeddings``.

Machine-readable JSON goes to stdout, human-readable text to stderr.
Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 verification failure.
Settings resolve as: flags > HYPNORM_SEED (seed only) > ``--config`` file > defaults.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import train as TR
from . import verify as V
from .layers import GraphContext
from .tensor import NonFiniteError, no_grad

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3
SEED_ENV = "HYPNORM_SEED"
CHECKPOINT_ARRAYS = "checkpoint.npz"
CHECKPOINT_META = "checkpoint.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _bool(s: str) -> bool:
    low = str(s).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _optional(conv):
    def inner(s):
        return None if str(s).strip().lower() in ("", "none", "null") else conv(s)
    return inner


CONVERTERS = {
    "curvature": float, "scale": _optional(float), "lr": _optional(float), "weight_decay": float,
    "beta1": float, "beta2": float, "eps": float, "clip_norm": _optional(float), "dropout": float,
    "epochs": int, "seed": int, "hidden": int, "layers": int, "heads": int, "dim": int, "negatives": int,
    "batch_size": int, "split_seed": int, "biases": _bool, "output": _optional(str),
}


def coerce(key: str, value: str):
    return CONVERTERS.get(key, str)(value)


def read_config_file(path) -> dict:
    """``key=value`` lines; ``#`` starts a comment; keys may use dashes or underscores."""
    known = {f.name for f in fields(TR.RunConfig)}
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = coerce(key, value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
    return out


def resolve_config(args: argparse.Namespace) -> TR.RunConfig:
    values = read_config_file(args.config) if args.config else {}
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    for f in fields(TR.RunConfig):
        given = getattr(args, f.name, None)
        if given is not None:
            values[f.name] = given
    try:
        return TR.RunConfig(**values)
    except TR.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="file of key=value lines")
    for f in fields(TR.RunConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, type=CONVERTERS.get(f.name, str), default=None,
                       help=f"default: {f.default!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pseudopoincare", description="Pseudo-Poincaré graph networks on the Poincaré ball.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train a model and emit per-epoch JSON records")
    _add_run_flags(p)

    p = sub.add_parser("bench", help="time training epochs of graph models")
    _add_run_flags(p)
    p.add_argument("--models", default="gcn,ngcn,hgcn,gat,ngat")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)

    p = sub.add_parser("verify", help="run the numeric identity suite")
    p.add_argument("--profile", choices=sorted(V.PROFILES), default="quick")
    p.add_argument("--verify-seed", type=int, default=0)

    p = sub.add_parser("export-embeddings", help="write node or entity embeddings as TSV")
    p.add_argument("--checkpoint", required=True, help="run directory holding checkpoint files")
    p.add_argument("--out", required=True, help="TSV path; labels go to <out stem>.labels.tsv")
    return parser


def _emit(obj) -> None:
    sys.stdout.write(TR.dumps(obj) + "\n")
    sys.stdout.flush()


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def save_checkpoint(out_dir: Path, cfg: TR.RunConfig, state: dict, epoch: int, val: float) -> None:
    """Write arrays and metadata via temporary files so an interrupted save keeps the old one."""
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / (CHECKPOINT_ARRAYS + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **state)
    os.replace(tmp, out_dir / CHECKPOINT_ARRAYS)
    meta = {"config": cfg.to_dict(), "epoch": epoch, "val_metric": val}
    tmp = out_dir / (CHECKPOINT_META + ".tmp")
    tmp.write_text(TR.dumps(meta) + "\n", encoding="utf-8")
    os.replace(tmp, out_dir / CHECKPOINT_META)


def load_checkpoint(path) -> tuple[TR.RunConfig, dict[str, np.ndarray], dict]:
    path = Path(path)
    if not (path / CHECKPOINT_META).exists() or not (path / CHECKPOINT_ARRAYS).exists():
        raise FileNotFoundError(f"no checkpoint in {path}")
    meta = json.loads((path / CHECKPOINT_META).read_text(encoding="utf-8"))
    with np.load(path / CHECKPOINT_ARRAYS) as z:
        state = {k: z[k] for k in z.files}
    return TR.RunConfig.from_dict(meta["config"]), state, meta


def cmd_train(cfg: TR.RunConfig) -> int:
    out_dir = Path(cfg.output) if cfg.output else None
    metrics_fh = timing_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w", encoding="utf-8", newline="\n")
        timing_fh = open(out_dir / "timing.jsonl", "w", encoding="utf-8", newline="\n")

    def on_epoch(rec, seconds):
        line = TR.dumps(rec) + "\n"
        if metrics_fh is not None:
            metrics_fh.write(line)
            timing_fh.write(TR.dumps({"epoch": rec["epoch"], "epoch_seconds": seconds}) + "\n")
        else:
            sys.stdout.write(line)

    def on_best(state, epoch, val):
        if out_dir is not None:
            save_checkpoint(out_dir, cfg, state, epoch, val)

    _say(f"training {cfg.model} on {cfg.dataset} ({cfg.task}) for {cfg.epochs} epochs, seed {cfg.seed}")
    try:
        result, _ = TR.run(cfg, on_epoch, on_best)
    finally:
        for fh in (metrics_fh, timing_fh):
            if fh is not None:
                fh.close()
    summary = {"task": cfg.task, "model": cfg.model, "dataset": cfg.dataset, "seed": cfg.seed,
               "epochs": len(result.records), **result.summary()}
    if out_dir is not None:
        (out_dir / "result.json").write_text(TR.dumps(summary) + "\n", encoding="utf-8")
    _emit(summary)
    _say(f"best epoch {result.best_epoch}; test {result.metric_name} {result.test_metric:.4f}")
    return EXIT_OK


def cmd_bench(cfg: TR.RunConfig, models: list[str], repeats: int, warmup: int) -> int:
    if repeats < 5:
        raise UsageError("--repeats must be >= 5")
    if cfg.task != "node_class":
        raise UsageError("bench times node-classification epochs; use --task node_class")
    graph = TR.resolve_node_graph(cfg.dataset, cfg.split_seed)
    entries = []
    for m in models:
        if m not in TR.GRAPH_MODELS:
            raise UsageError(f"cannot bench model {m!r}")
        mcfg = TR.RunConfig(**{**cfg.to_dict(), "model": m})
        entry = TR.bench_node_model(mcfg, graph, repeats, warmup)
        _say(f"{m:6s} {entry['mean']:.4f} s/epoch (sd {entry['stddev']:.4f})")
        entries.append(entry)
    means = {e["model"]: e["mean"] for e in entries}
    pairs = [("ngcn", "gcn"), ("ngcn", "hgcn"), ("ngat", "gat"), ("ngat", "hgcn")]
    ratios = {f"{a}/{b}": means[a] / means[b] for a, b in pairs if a in means and b in means}
    for k, v in ratios.items():
        _say(f"{k}: {v:.3f}")
    _emit({"dataset": cfg.dataset, "repeats": repeats, "warmup": warmup, "entries": entries, "ratios": ratios})
    return EXIT_OK


def cmd_verify(profile: str, seed: int = 0) -> int:
    report = V.suite_report(profile, seed)
    for c in report["checks"]:
        status = "ok  " if c["passed"] else "FAIL"
        kind = "" if c["hard"] else " (info)"
        _say(f"{status} {c['name']}: {c['value']:.3e}{kind}")
    _emit(report)
    if not report["passed"]:
        _say("failed: " + ", ".join(report["failed"]))
        return EXIT_VERIFY
    return EXIT_OK


def compute_embeddings(cfg: TR.RunConfig, state: dict) -> tuple[np.ndarray, list[str]]:
    """Rebuild the model from a checkpoint; return embeddings and one label string per row."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.task == "kg":
        kg = TR.resolve_kg(cfg.dataset, cfg.split_seed)
        model = TR.build_kg_model(cfg, kg, rng)
        model.load_state_dict(state)
        return model.entity.data.copy(), list(kg.entities)
    graph = TR.resolve_node_graph(cfg.dataset, cfg.split_seed)
    if cfg.task == "node_class":
        model = TR.build_node_classifier(cfg, graph, rng)
        edges = graph.edges
    else:
        specs = TR.encoder_specs(cfg.model, graph.features.shape[1], cfg.hidden, cfg.layers, 1 - cfg.dropout, cfg.heads)
        model = TR.LinkPredictor(TR.build_model(specs, cfg.norm_config if cfg.model.startswith("n") else None,
                                                rng, cfg.curvature))
        edges = TR.D.split_edges(graph, seed=cfg.split_seed).train_pos
    model.load_state_dict(state)
    with no_grad():
        z = model.embed(GraphContext(edges, graph.n), graph.features).data
    return z, [str(int(y)) for y in graph.labels]


def write_embeddings(z: np.ndarray, labels: list[str], out: Path) -> Path:
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for i, row in enumerate(z):
            fh.write("\t".join([str(i)] + [repr(float(v)) for v in row]) + "\n")
    labels_path = out.with_name(out.stem + ".labels.tsv")
    with open(labels_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{i}\t{lab}\n" for i, lab in enumerate(labels))
    return labels_path


def read_embeddings(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            rows.append([float(v) for v in parts[1:]])
    return np.array(rows)


def cmd_export_embeddings(checkpoint: str, out: str) -> int:
    try:
        cfg, state, _ = load_checkpoint(checkpoint)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    z, labels = compute_embeddings(cfg, state)
    labels_path = write_embeddings(z, labels, Path(out))
    _emit({"path": str(out), "labels_path": str(labels_path), "rows": int(z.shape[0]), "dim": int(z.shape[1])})
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train":
            return cmd_train(resolve_config(args))
        if args.command == "bench":
            models = [m for m in args.models.split(",") if m]
            return cmd_bench(resolve_config(args), models, args.repeats, args.warmup)
        if args.command == "verify":
            return cmd_verify(args.profile, args.verify_seed)
        return cmd_export_embeddings(args.checkpoint, args.out)
    except UsageError as exc:
        _say(f"error: {exc}")
        return EXIT_USAGE
    except TR.ConfigError as exc:
        _say(f"error: {exc}")
        return EXIT_USAGE
    except (TR.TrainingAborted, NonFiniteError) as exc:
        _say(f"numeric failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
