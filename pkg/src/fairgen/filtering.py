"""Score generated images against a class prompt and their group centroid, keep the best."""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .embed import EmbeddingBackend, GroupEmbeddingStats, cosine_similarity, group_centroid
from .errors import ConfigError, ScoringError, SelectionError
from .groups import DatasetItem, GroupedDataset, GroupKey, save_manifest
from .prompts import label_prompt

FILTER_MODES = ("standard", "severe")
SELECTIONS = ("score", "random")
SCORE_COLUMNS = ("clip_label", "clip_centroid", "clip_score", "retained")


@dataclass(frozen=True)
class FilterConfig:
    alpha: float = 0.5
    keep_fraction: float = 0.75
    mode: str = "standard"
    selection: str = "score"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in FILTER_MODES:
            raise ConfigError(f"unknown filter mode {self.mode!r}")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"unknown selection {self.selection!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError("keep_fraction must lie in (0, 1]")
        if self.mode == "severe":
            # conflicting groups have no real centroid to compare against
            object.__setattr__(self, "alpha", 1.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScoredCandidate:
    item: DatasetItem
    clip_label: float
    clip_centroid: Optional[float]
    clip_score: float


def _embed(item: DatasetItem, backend: EmbeddingBackend, root=None) -> np.ndarray:
    try:
        return backend.embed_image(item.load_image(root))
    except Exception as exc:
        raise ScoringError(f"could not embed {item.id!r}: {exc}") from exc


def clip_label_score(item: DatasetItem, class_label: str, backend: EmbeddingBackend, root=None) -> float:
    return cosine_similarity(_embed(item, backend, root), backend.embed_text(label_prompt(class_label)))


def clip_centroid_score(item: DatasetItem, stats: GroupEmbeddingStats, backend: EmbeddingBackend, root=None) -> float:
    return cosine_similarity(_embed(item, backend, root), stats.centroid)


def combined_score(label: float, centroid: Optional[float], cfg: FilterConfig) -> float:
    if cfg.alpha == 1.0:
        return float(label)
    if centroid is None:
        raise ConfigError("centroid score missing with alpha < 1; use severe mode")
    return float(cfg.alpha * label + (1.0 - cfg.alpha) * centroid)


def real_centroids(real: GroupedDataset, real_embs: Mapping[str, np.ndarray]) -> Dict[GroupKey, GroupEmbeddingStats]:
    out = {}
    for g, ix in real.group_index().items():
        out[g] = group_centroid([real_embs[real.items[i].id] for i in ix], g)
    return out


def score_candidates(
    synth: GroupedDataset,
    backend: EmbeddingBackend,
    centroids: Mapping[GroupKey, GroupEmbeddingStats],
    cfg: FilterConfig,
    synth_embs: Optional[Mapping[str, np.ndarray]] = None,
) -> Dict[GroupKey, List[ScoredCandidate]]:
    """Score every synthetic item; centroid scores are skipped in severe mode."""
    text = {y: backend.embed_text(label_prompt(y)) for y in synth.classes}
    out: Dict[GroupKey, List[ScoredCandidate]] = {}
    for it in synth.items:
        emb = synth_embs[it.id] if synth_embs is not None else _embed(it, backend, synth.root)
        label = cosine_similarity(emb, text[it.class_label])
        cent = None
        if cfg.alpha < 1.0:
            if it.group not in centroids:
                raise ConfigError(f"no real centroid for group {it.group}; use severe mode (alpha=1)")
            cent = cosine_similarity(emb, centroids[it.group].centroid)
        out.setdefault(it.group, []).append(ScoredCandidate(it, label, cent, combined_score(label, cent, cfg)))
    return {g: out[g] for g in sorted(out)}


def n_keep(n: int, keep_fraction: float) -> int:
    return max(1, math.floor(n * keep_fraction))


def select_top(cands: Sequence[ScoredCandidate], cfg: FilterConfig) -> List[ScoredCandidate]:
    """Highest ``clip_score`` first; equal scores fall back to ascending item id."""
    if not cands:
        raise SelectionError("empty candidate list")
    k = n_keep(len(cands), cfg.keep_fraction)
    order = sorted(cands, key=lambda c: (-c.clip_score, c.item.id))
    return order[:k]


def select_random(cands: Sequence[ScoredCandidate], cfg: FilterConfig, group: Optional[GroupKey] = None) -> List[ScoredCandidate]:
    """Seeded uniform choice without replacement, same count as :func:`select_top`."""
    if not cands:
        raise SelectionError("empty candidate list")
    k = n_keep(len(cands), cfg.keep_fraction)
    ordered = sorted(cands, key=lambda c: c.item.id)
    salt = zlib.crc32(str(group).encode()) if group is not None else 0
    rng = np.random.default_rng([cfg.seed, salt])
    pick = sorted(rng.choice(len(ordered), size=k, replace=False))
    return [ordered[i] for i in pick]


def filter_groups(scored: Mapping[GroupKey, Sequence[ScoredCandidate]], cfg: FilterConfig) -> Dict[GroupKey, List[ScoredCandidate]]:
    out = {}
    for g, cands in scored.items():
        if not cands:
            raise SelectionError(f"group {g} has no candidates")
        out[g] = select_top(cands, cfg) if cfg.selection == "score" else select_random(cands, cfg, g)
    return out


def retained_dataset(synth: GroupedDataset, kept: Mapping[GroupKey, Sequence[ScoredCandidate]]) -> GroupedDataset:
    ids = {c.item.id for cs in kept.values() for c in cs}
    return synth.derive([it for it in synth.items if it.id in ids])


def save_scored_manifest(synth: GroupedDataset, scored, kept, path) -> Path:
    """Synthetic manifest plus score columns and a ``retained`` flag."""
    kept_ids = {c.item.id for cs in kept.values() for c in cs}
    by_id = {c.item.id: c for cs in scored.values() for c in cs}
    items = []
    for it in synth.items:
        c = by_id[it.id]
        prov = dict(it.provenance)
        prov.update({
            "clip_label": repr(c.clip_label),
            "clip_centroid": "" if c.clip_centroid is None else repr(c.clip_centroid),
            "clip_score": repr(c.clip_score),
            "retained": "true" if it.id in kept_ids else "false",
        })
        items.append(DatasetItem(it.id, it.image_ref, it.class_label, it.bias_label, it.split, it.origin, prov))
    return save_manifest(synth.derive(items), path)


def write_scores_csv(scored, kept, path) -> Path:
    """Score table only (no images), one row per candidate."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kept_ids = {c.item.id for cs in kept.values() for c in cs}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "group") + SCORE_COLUMNS)
        for g, cs in scored.items():
            for c in sorted(cs, key=lambda c: c.item.id):
                w.writerow((c.item.id, str(g), repr(c.clip_label),
                            "" if c.clip_centroid is None else repr(c.clip_centroid),
                            repr(c.clip_score), "true" if c.item.id in kept_ids else "false"))
    return path
