"""Layer x zone ablation sweep, results tables and multi-run statistics."""
from __future__ import annotations

import csv
import json
import logging
import os
import re
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .metrics import evaluate
from .model import (IDENTITY_SPEC, SWEEP_ZONES, Zone, ZoneSpec, as_leaves, batch_logits,
                    best_across_windows, predict_span)
from .text import SquadExample, featurize_all

logger = logging.getLogger(__name__)

COLUMNS = tuple(z.value for z in SWEEP_ZONES)
CSV_HEADER = ("layer",) + COLUMNS
_FILE_RE = re.compile(r"^predictions_layer(\d+|all)_([a-z0-9]+)\.json$")


def round3(x: float) -> float:
    return float(Decimal(repr(float(x))).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN))


@dataclass
class ResultsTable:
    """L rows (layer 1..L) by the five sweep zones, in percent."""

    values: np.ndarray
    metric: str = "em"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(COLUMNS):
            raise ValueError(f"results table must be L x {len(COLUMNS)}, got {self.values.shape}")
        if self.metric not in ("em", "f1"):
            raise ValueError(f"metric must be 'em' or 'f1', got {self.metric!r}")

    @property
    def n_layers(self) -> int:
        return self.values.shape[0]

    def cell(self, layer: int, zone: Zone | str) -> float:
        """Value at 1-based ``layer``."""
        return float(self.values[layer - 1, COLUMNS.index(Zone.parse(zone).value)])

    def to_csv(self) -> str:
        lines = [",".join(CSV_HEADER)]
        for i, row in enumerate(self.values, start=1):
            lines.append(",".join([str(i)] + [f"{round3(v):.3f}" for v in row]))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read_csv(cls, path, metric: str = "em") -> "ResultsTable":
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        if not rows or tuple(h.strip().lower() for h in rows[0]) != CSV_HEADER:
            raise ValueError(f"{path}: header must be {','.join(CSV_HEADER)}")
        body = [r for r in rows[1:] if r]
        for k, r in enumerate(body, start=1):
            if len(r) != len(CSV_HEADER) or int(r[0]) != k:
                raise ValueError(f"{path}: malformed row {k}: {r}")
        return cls(np.array([[float(x) for x in r[1:]] for r in body]), metric)


@dataclass
class SweepPlan:
    cells: list[ZoneSpec]
    out_dir: Path
    use_f1: bool = False

    @classmethod
    def default(cls, n_layers: int, out_dir, use_f1: bool = False) -> "SweepPlan":
        cells = [ZoneSpec(i, z) for i in range(n_layers) for z in SWEEP_ZONES]
        return cls(cells, Path(out_dir), use_f1)


def prediction_filename(spec: ZoneSpec) -> str:
    layer = "all" if spec.layer is None else str(spec.layer)
    return f"predictions_layer{layer}_{spec.zone.value}.json"


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def dump_predictions(predictions: Mapping[str, str]) -> str:
    return json.dumps(dict(predictions), indent=4, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------- decoding

def featurize_dev(checkpoint, examples: Sequence[SquadExample]):
    opts = checkpoint.metadata.get("featurize", {})
    return featurize_all(examples, checkpoint.vocab,
                         opts.get("max_seq_length", 128), opts.get("doc_stride", 32),
                         opts.get("max_query_length", 64))


def decode(checkpoint, examples: Sequence[SquadExample], features=None,
           spec: ZoneSpec = IDENTITY_SPEC, batch_size: int = 32,
           max_answer_length: int = 30, n_best: int = 20) -> dict[str, str]:
    """qas_id -> predicted answer text under ``spec``, in example order."""
    if features is None:
        features = featurize_dev(checkpoint, examples)
    contexts = {ex.qas_id: ex.context for ex in examples}
    leaves = as_leaves(checkpoint.params)
    candidates: dict[str, list] = {ex.qas_id: [] for ex in examples}
    for i in range(0, len(features), batch_size):
        batch = features[i:i + batch_size]
        start, end = batch_logits(leaves, checkpoint.config, batch, spec)
        for k, feat in enumerate(batch):
            candidates[feat.qas_id].extend(
                predict_span(start.data[k], end.data[k], feat, contexts[feat.qas_id],
                             max_answer_length, n_best))
    return {qid: best_across_windows(c).text if c else "" for qid, c in candidates.items()}


def run_ablation(checkpoint, examples: Sequence[SquadExample], plan: SweepPlan,
                 workers: int = 1, features=None) -> dict:
    """Decode every plan cell and write one prediction file per cell plus manifest.json.

    A failing cell is recorded in the manifest and does not stop the others.
    """
    if not plan.cells:
        raise ValueError("empty sweep plan")
    out_dir = Path(plan.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"{out_dir}: not writable")
    if features is None:
        features = featurize_dev(checkpoint, examples)

    def run_cell(spec: ZoneSpec):
        name = prediction_filename(spec)
        t0 = time.perf_counter()
        try:
            spec.check(checkpoint.config.n_layers)
            preds = decode(checkpoint, examples, features, spec)
            _write_atomic(out_dir / name, dump_predictions(preds))
            status = {"status": "ok"}
        except Exception as exc:  # one bad cell must not sink the sweep
            logger.error("cell %s failed: %s", name, exc)
            status = {"status": "failed", "error": str(exc)}
        status.update(layer=spec.layer, zone=spec.zone.value,
                      seconds=round(time.perf_counter() - t0, 3))
        return name, status

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_cell, plan.cells))
    else:
        results = [run_cell(c) for c in plan.cells]

    manifest = {"metric": "f1" if plan.use_f1 else "em",
                "cells": {name: status for name, status in results}}
    _write_atomic(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------- collection

def collect_results(prediction_dir, dataset: Mapping, use_f1: bool = False,
                    n_layers: int | None = None) -> ResultsTable:
    """Score every predictions_layer{i}_{zone}.json into an L x 5 table."""
    prediction_dir = Path(prediction_dir)
    if n_layers is None:
        layers = [int(m.group(1)) for p in prediction_dir.iterdir()
                  if (m := _FILE_RE.match(p.name)) and m.group(1) != "all"]
        if not layers:
            raise FileNotFoundError(f"{prediction_dir}: no per-layer prediction files")
        n_layers = max(layers) + 1
    key = "f1" if use_f1 else "exact"
    values = np.zeros((n_layers, len(SWEEP_ZONES)))
    for i in range(n_layers):
        for j, zone in enumerate(SWEEP_ZONES):
            path = prediction_dir / prediction_filename(ZoneSpec(i, zone))
            if not path.exists():
                raise FileNotFoundError(
                    f"missing prediction file for layer {i} zone {zone.value}: {path}")
            with open(path, encoding="utf-8") as f:
                values[i, j] = round3(evaluate(dataset, json.load(f))[key])
    return ResultsTable(values, "f1" if use_f1 else "em")


def _check_same(tables: Sequence[ResultsTable]) -> None:
    first = tables[0]
    for t in tables[1:]:
        if t.values.shape != first.values.shape:
            raise ValueError(f"table shapes differ: {first.values.shape} vs {t.values.shape}")
        if t.metric != first.metric:
            raise ValueError(f"table metrics differ: {first.metric} vs {t.metric}")


def average_runs(tables: Sequence[ResultsTable]) -> ResultsTable:
    if not tables:
        raise ValueError("no tables to average")
    _check_same(tables)
    mean = np.mean([t.values for t in tables], axis=0)
    return ResultsTable(np.vectorize(round3)(mean), tables[0].metric)


def stddev_of_difference(a: ResultsTable, b: ResultsTable) -> tuple[float, ...]:
    """Per zone: sample standard deviation over layers of (b - a)."""
    _check_same([a, b])
    if a.n_layers < 2:
        raise ValueError("need at least two layers for a sample standard deviation")
    diff = b.values - a.values
    return tuple(statistics.stdev(diff[:, j]) for j in range(diff.shape[1]))
