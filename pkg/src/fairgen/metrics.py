"""Per-group accuracy, worst/average group accuracy, distribution distances and reports."""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .embed import EmbeddingBackend, embed_dataset, frechet_distance
from .errors import EvaluationError
from .groups import GroupedDataset, GroupKey

REPORT_FORMATS = ("csv", "markdown")


@dataclass(frozen=True)
class GroupMetrics:
    per_group_accuracy: Dict[GroupKey, float]
    group_sizes: Dict[GroupKey, int]
    wga: float
    aga: float
    sample_accuracy: float

    @classmethod
    def from_accuracies(cls, acc: Mapping[GroupKey, float], sizes: Mapping[GroupKey, int]) -> "GroupMetrics":
        if not acc:
            raise EvaluationError("no groups to summarise")
        keys = sorted(acc)
        vals = np.array([acc[g] for g in keys], dtype=np.float64)
        n = np.array([sizes[g] for g in keys], dtype=np.float64)
        return cls(
            per_group_accuracy={g: float(acc[g]) for g in keys},
            group_sizes={g: int(sizes[g]) for g in keys},
            wga=float(vals.min()),
            aga=float(vals.mean()),
            sample_accuracy=float((vals * n).sum() / n.sum()),
        )

    def to_dict(self) -> dict:
        return {
            "wga": self.wga,
            "aga": self.aga,
            "sample_accuracy": self.sample_accuracy,
            "per_group_accuracy": {str(g): v for g, v in self.per_group_accuracy.items()},
            "group_sizes": {str(g): v for g, v in self.group_sizes.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroupMetrics":
        return cls(
            per_group_accuracy={GroupKey.parse(k): float(v) for k, v in d["per_group_accuracy"].items()},
            group_sizes={GroupKey.parse(k): int(v) for k, v in d["group_sizes"].items()},
            wga=float(d["wga"]),
            aga=float(d["aga"]),
            sample_accuracy=float(d["sample_accuracy"]),
        )


def evaluate_predictions(pred, test: GroupedDataset) -> GroupMetrics:
    if len(test) == 0:
        raise EvaluationError("test set is empty")
    pred = np.asarray(pred)
    correct = pred == test.class_indices()
    index = test.group_index()
    empty = [g for g in test.all_groups() if g not in index]
    if empty:
        raise EvaluationError(f"test group {empty[0]} has no items")
    acc = {g: float(correct[ix].mean()) for g, ix in index.items()}
    return GroupMetrics.from_accuracies(acc, {g: len(ix) for g, ix in index.items()})


def evaluate(model, test: GroupedDataset) -> GroupMetrics:
    """Accuracy per group; WGA is the minimum, AGA the unweighted mean."""
    if len(test) == 0:
        raise EvaluationError("test set is empty")
    return evaluate_predictions(model.predict(test.images()), test)


def dump_metrics(metrics: GroupMetrics, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = dict(extra or {})
    doc["metrics"] = metrics.to_dict()
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def distribution_report(
    real: GroupedDataset,
    synth: GroupedDataset,
    backend: EmbeddingBackend,
    real_embs: Optional[Mapping[str, np.ndarray]] = None,
    synth_embs: Optional[Mapping[str, np.ndarray]] = None,
) -> Dict[GroupKey, float]:
    """Fréchet distance between real and synthetic embeddings, per group."""
    real_embs = real_embs if real_embs is not None else embed_dataset(real, backend)
    synth_embs = synth_embs if synth_embs is not None else embed_dataset(synth, backend)
    r_idx, s_idx = real.group_index(), synth.group_index()
    out = {}
    for g in sorted(set(r_idx) & set(s_idx)):
        a = np.stack([real_embs[real.items[i].id] for i in r_idx[g]])
        b = np.stack([synth_embs[synth.items[i].id] for i in s_idx[g]])
        out[g] = frechet_distance(a, b)
    return out


# -- reports ----------------------------------------------------------------

def column_name(g: GroupKey) -> str:
    # "|" would split a markdown cell
    return f"{g.class_label}/{g.bias_label}"


def _aggregate(runs: Sequence[Tuple[str, GroupMetrics]]):
    """Group runs by label (first-seen order) into mean/std per column."""
    by_label: Dict[str, List[GroupMetrics]] = {}
    for label, m in runs:
        by_label.setdefault(label, []).append(m)
    groups = sorted({g for _, m in runs for g in m.per_group_accuracy})
    rows = []
    for label, ms in by_label.items():
        cols = {"WGA": [m.wga for m in ms], "AGA": [m.aga for m in ms]}
        for g in groups:
            cols[column_name(g)] = [m.per_group_accuracy.get(g, np.nan) for m in ms]
        rows.append((label, len(ms), {k: (float(np.mean(v)), float(np.std(v))) for k, v in cols.items()}))
    return ["WGA", "AGA"] + [column_name(g) for g in groups], rows


def _cell(mean: float, std: float, n: int) -> str:
    m = f"{100 * mean:.2f}"
    return m if n == 1 else f"{m}±{100 * std:.2f}"


def emit_report(runs: Sequence[Tuple[str, GroupMetrics]], fmt: str = "markdown") -> str:
    """One row per label; accuracies in percent, ``mean±std`` over repeated labels."""
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"unknown report format {fmt!r}")
    columns, rows = _aggregate(runs)
    header = ["method", "seeds"] + columns
    body = [[label, str(n)] + [_cell(*stats[c], n) for c in columns] for label, n, stats in rows]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
        return buf.getvalue()
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(lines) + "\n"


_CELL = re.compile(r"^\s*(-?[0-9.]+|nan)(?:±(-?[0-9.]+|nan))?\s*$")


def parse_report(text: str, fmt: str = "markdown") -> Dict[str, Dict[str, Tuple[float, float]]]:
    """Inverse of :func:`emit_report`: label -> column -> (mean, std) as fractions."""
    if fmt == "csv":
        table = list(csv.reader(io.StringIO(text)))
    else:
        table = [[c.strip() for c in ln.strip().strip("|").split("|")] for ln in text.splitlines() if ln.strip()]
        table = [table[0]] + table[2:]
    header, rows = table[0], table[1:]
    out = {}
    for r in rows:
        cols = {}
        for name, cell in zip(header[2:], r[2:]):
            m = _CELL.match(cell)
            if not m:
                raise ValueError(f"unparseable cell {cell!r}")
            mean = float(m.group(1)) / 100
            std = float(m.group(2)) / 100 if m.group(2) else 0.0
            cols[name] = (mean, std)
        out[r[0]] = cols
    return out
