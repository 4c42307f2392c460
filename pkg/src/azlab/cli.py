"""Command line front end: ``azlab {train,decode,eval,collect,stats,visualize,demo}``.

Argument orders follow the original script sequence where one exists::

    azlab eval DEV_JSON PREDICTIONS_JSON
    azlab collect PREDICTION_DIR RESULTS_CSV --dataset DEV_JSON [--use-f1]
    azlab visualize RESULTS_CSV BASELINE OUT_SVG
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

from .harness import (ResultsTable, SweepPlan, average_runs, collect_results, decode,
                      dump_predictions, prediction_filename, run_ablation, stddev_of_difference)
from .heatmap import HeatmapSpec, write_heatmap
from .metrics import evaluate, format_report
from .model import SWEEP_ZONES, ModelConfig, Zone, ZoneSpec
from .synthetic import make_keyvalue_dataset
from .text import build_vocab, featurize_all, load_squad, read_dataset
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train, write_loss_trace

logger = logging.getLogger("azlab")


# ---------------------------------------------------------------- run configuration

@dataclass
class RunConfig:
    """Everything a run needs; loaded from JSON or ``section.key=value`` lines."""

    model: dict = field(default_factory=dict)      # ModelConfig fields except vocab_size
    train: dict = field(default_factory=dict)      # TrainConfig fields
    featurize: dict = field(default_factory=lambda: {
        "max_seq_length": 128, "doc_stride": 32, "max_query_length": 64})
    vocab_max_size: int = 30000
    lowercase: bool = True
    train_file: str | None = None
    dev_file: str | None = None
    out_dir: str = "out"
    seeds: list[int] = field(default_factory=lambda: [0])
    use_f1: bool = False
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        self.seeds = [int(s) for s in self.seeds]
        known = {f.name for f in fields(ModelConfig)} - {"vocab_size"}
        bad = set(self.model) - known
        if bad:
            raise ValueError(f"unknown model settings: {sorted(bad)}")
        bad = set(self.train) - {f.name for f in fields(TrainConfig)}
        if bad:
            raise ValueError(f"unknown train settings: {sorted(bad)}")
        bad = set(self.featurize) - {"max_seq_length", "doc_stride", "max_query_length"}
        if bad:
            raise ValueError(f"unknown featurize settings: {sorted(bad)}")

    def model_config(self, vocab_size: int) -> ModelConfig:
        opts = dict(self.model)
        opts.setdefault("max_positions", self.featurize["max_seq_length"])
        return ModelConfig(vocab_size=vocab_size, **opts)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed})

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text(encoding="utf-8")
        if text.lstrip().startswith("{"):
            data = json.loads(text)
        else:
            data = parse_key_values(text, str(path))
        base = cls()
        featurize = {**base.featurize, **data.pop("featurize", {})}
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"{path}: unknown settings {sorted(unknown)}")
        return cls(featurize=featurize, **data)


def _scalar(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_key_values(text: str, source: str = "<config>") -> dict:
    """``model.n_layers = 4`` style lines; ``#`` comments; ``seeds = 0,1,2``."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "seeds":
            value = [int(s) for s in raw.replace(",", " ").split()]
        else:
            value = _scalar(raw)
        target = out
        *parents, leaf = key.split(".")
        for p in parents:
            target = target.setdefault(p, {})
        target[leaf] = value
    return out


# ---------------------------------------------------------------- demo settings

# A 4-layer model small enough to train on one CPU core in a few minutes.  The task
# has a long loss plateau, so the demo uses BERT's warmup + linear decay schedule
# and a wider initializer than the fine-tuning default.
DEMO_DATA = {"n_keys": 16, "n_values": 16, "min_pairs": 2, "max_pairs": 3}
DEMO_SIZES = {"train": 4000, "dev": 200}
DEMO_CONFIG = {
    "model": {"n_layers": 4, "n_heads": 4, "d_model": 64, "d_ff": 256,
              "initializer_range": 0.1},
    "train": {"epochs": 100.0, "batch_size": 16, "learning_rate": 1e-3, "max_steps": 5000,
              "schedule": "linear", "warmup_proportion": 0.1},
    "featurize": {"max_seq_length": 32, "doc_stride": 16, "max_query_length": 8},
    "vocab_max_size": 100,
}


# ---------------------------------------------------------------- pipelines

def train_run(config: RunConfig, train_file, out, seed: int, loss_trace=None):
    examples = load_squad(read_dataset(train_file))
    vocab = build_vocab([e.context for e in examples] + [e.question for e in examples],
                        config.vocab_max_size, config.lowercase)
    features = featurize_all(examples, vocab, **config.featurize)
    ckpt = train(features, config.train_config(seed), config.model_config(len(vocab)), vocab,
                 config.featurize)
    save_checkpoint(ckpt, out)
    if loss_trace:
        write_loss_trace(ckpt.loss_trace, loss_trace)
    return ckpt


def run_demo(out_dir, seed: int = 0, workers: int = 1, max_steps: int | None = None) -> dict:
    """Synthetic corpus -> train -> baseline eval -> sweep -> collect -> heatmap."""
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_data = make_keyvalue_dataset(DEMO_SIZES["train"], seed=2 * seed + 1, title="train",
                                       **DEMO_DATA)
    dev_data = make_keyvalue_dataset(DEMO_SIZES["dev"], seed=2 * seed + 2, title="dev",
                                     **DEMO_DATA)
    for name, data in (("train.json", train_data), ("dev.json", dev_data)):
        (out_dir / name).write_text(json.dumps(data), encoding="utf-8")

    cfg = json.loads(json.dumps(DEMO_CONFIG))
    if max_steps is not None:
        cfg["train"]["max_steps"] = max_steps
    config = RunConfig(**cfg, seeds=[seed])
    ckpt = train_run(config, out_dir / "train.json", out_dir / "model.azlb", seed,
                     out_dir / "loss.csv")
    t_train = time.perf_counter() - t0

    examples = load_squad(dev_data)
    features = featurize_all(examples, ckpt.vocab, **config.featurize)
    baseline_preds = decode(ckpt, examples, features)
    (out_dir / "predictions.json").write_text(dump_predictions(baseline_preds), encoding="utf-8")
    baseline = evaluate(dev_data, baseline_preds)

    pred_dir = out_dir / "prediction"
    manifest = run_ablation(ckpt, examples, SweepPlan.default(ckpt.config.n_layers, pred_dir),
                            workers=workers, features=features)
    table = collect_results(pred_dir, dev_data, n_layers=ckpt.config.n_layers)
    table.write_csv(out_dir / "results.csv")
    write_heatmap(HeatmapSpec(table, round(baseline["exact"], 3)), out_dir / "heatmap.svg")

    summary = {
        "baseline": baseline,
        "train_seconds": round(t_train, 1),
        "total_seconds": round(time.perf_counter() - t0, 1),
        "final_loss": ckpt.loss_trace[-1],
        "initial_loss": ckpt.loss_trace[0],
        "failed_cells": sorted(k for k, v in manifest["cells"].items() if v["status"] != "ok"),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


# ---------------------------------------------------------------- subcommands

def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None):
        config.seeds = list(args.seed)
    return config


def cmd_train(args) -> int:
    config = _load_config(args)
    if args.max_steps is not None:
        config.train["max_steps"] = args.max_steps
    train_file = args.train_file or config.train_file
    if not train_file:
        raise ValueError("no training file: pass --train-file or set train_file in the config")
    out = str(args.out)
    if len(config.seeds) > 1 and "{seed}" not in out:
        raise ValueError("several seeds need a '{seed}' placeholder in --out")
    for seed in config.seeds:
        path = out.format(seed=seed)
        trace = args.loss_trace.format(seed=seed) if args.loss_trace else None
        ckpt = train_run(config, train_file, path, seed, trace)
        print(json.dumps({"checkpoint": path, "seed": seed, "steps": ckpt.metadata["steps"],
                          "final_loss": ckpt.loss_trace[-1] if ckpt.loss_trace else None}))
    return 0


def _mask_spec(args) -> ZoneSpec | None:
    if args.mask_zone is None:
        if args.mask_layer is not None:
            raise ValueError("--mask-layer needs --mask-zone")
        return None
    layer = None if args.mask_layer in (None, "none", "None") else int(args.mask_layer)
    return ZoneSpec(layer, Zone.parse(args.mask_zone))


def cmd_decode(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    examples = load_squad(read_dataset(args.dev_file))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.sweep:
        manifest = run_ablation(ckpt, examples, SweepPlan.default(ckpt.config.n_layers, out_dir),
                                workers=args.workers)
        failed = [k for k, v in manifest["cells"].items() if v["status"] != "ok"]
        if failed:
            raise RuntimeError(f"{len(failed)} sweep cell(s) failed, see manifest.json")
        return 0
    spec = _mask_spec(args)
    if spec is None:
        path = out_dir / "predictions.json"
        preds = decode(ckpt, examples)
    else:
        spec.check(ckpt.config.n_layers)
        path = out_dir / prediction_filename(spec)
        preds = decode(ckpt, examples, spec=spec)
    path.write_text(dump_predictions(preds), encoding="utf-8")
    print(path)
    return 0


def cmd_eval(args) -> int:
    with open(args.predictions, encoding="utf-8") as f:
        predictions = json.load(f)
    print(format_report(evaluate(read_dataset(args.dev_file), predictions)))
    return 0


def cmd_collect(args) -> int:
    table = collect_results(args.prediction_dir, read_dataset(args.dataset), args.use_f1)
    table.write_csv(args.results)
    return 0


def cmd_stats(args) -> int:
    metric = "f1" if args.use_f1 else "em"
    tables = [ResultsTable.read_csv(p, metric) for p in args.tables]
    if args.average:
        average_runs(tables).write_csv(args.average)
    if args.stddev:
        if len(tables) != 2:
            raise ValueError("--stddev takes exactly two tables (single run, averaged runs)")
        sd = stddev_of_difference(*tables)
        print(json.dumps({z.value: v for z, v in zip(SWEEP_ZONES, sd)}))
    if not (args.average or args.stddev):
        raise ValueError("nothing to do: pass --average OUT and/or --stddev")
    return 0


def cmd_visualize(args) -> int:
    table = ResultsTable.read_csv(args.results, "f1" if args.use_f1 else "em")
    spec = HeatmapSpec(table, args.baseline, bound=args.bound, annotate=not args.no_annotate,
                       orientation=args.orientation, title=args.title)
    write_heatmap(spec, args.out)
    return 0


def cmd_demo(args) -> int:
    summary = run_demo(args.out_dir, args.seed, args.workers, args.max_steps)
    print(json.dumps(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="azlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    t = sub.add_parser("train", help="fine-tune a span model on a SQuAD-format file")
    t.add_argument("--config", help="JSON or key=value run config")
    t.add_argument("--train-file")
    t.add_argument("--out", required=True, help="checkpoint path; may contain {seed}")
    t.add_argument("--seed", type=int, action="append", help="repeatable; overrides config seeds")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--loss-trace", help="CSV path for per-step losses; may contain {seed}")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="write predictions, optionally with a zone masked")
    d.add_argument("checkpoint")
    d.add_argument("dev_file")
    d.add_argument("--out-dir", required=True)
    d.add_argument("--mask-layer", help="0-based layer index, or 'none' for every layer")
    d.add_argument("--mask-zone", choices=[z.value for z in SWEEP_ZONES])
    d.add_argument("--sweep", action="store_true", help="decode every layer x zone cell")
    d.add_argument("--workers", type=int, default=1)
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="print EM/F1 JSON for a predictions file")
    e.add_argument("dev_file")
    e.add_argument("predictions")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("collect", help="score a sweep directory into results.csv")
    c.add_argument("prediction_dir")
    c.add_argument("results")
    c.add_argument("--dataset", required=True, help="gold SQuAD-format JSON")
    c.add_argument("--use-f1", action="store_true")
    c.set_defaults(func=cmd_collect)

    s = sub.add_parser("stats", help="average tables and compare single vs averaged runs")
    s.add_argument("tables", nargs="+")
    s.add_argument("--average", metavar="OUT")
    s.add_argument("--stddev", action="store_true")
    s.add_argument("--use-f1", action="store_true")
    s.set_defaults(func=cmd_stats)

    v = sub.add_parser("visualize", help="render the delta heatmap as SVG")
    v.add_argument("results")
    v.add_argument("baseline", type=float)
    v.add_argument("out")
    v.add_argument("--bound", type=float)
    v.add_argument("--no-annotate", action="store_true")
    v.add_argument("--orientation", default="zones-by-layers",
                   choices=["zones-by-layers", "layers-by-zones"])
    v.add_argument("--title")
    v.add_argument("--use-f1", action="store_true")
    v.set_defaults(func=cmd_visualize)

    m = sub.add_parser("demo", help="end-to-end run on the synthetic key-value corpus")
    m.add_argument("--out-dir", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--workers", type=int, default=1)
    m.add_argument("--max-steps", type=int)
    m.set_defaults(func=cmd_demo)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        print(f"azlab {args.command}: error: {exc}", file=sys.stderr)
        return 1
