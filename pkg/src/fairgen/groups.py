"""Group-structured datasets: items, manifests, biased splits and samplers.

A group is the pair ``(class_label, bias_label)``. Within a class, the group
whose bias label co-occurs with it most often is *aligned*; the others are
*conflicting*.
"""

from __future__ import annotations

import base64
import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .errors import (
    CapacityError,
    IntegrityError,
    ParseError,
    SamplingError,
    SchemaError,
    UndefinedRatioError,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
ORIGINS = ("real", "synthetic")
ALIGNED = "aligned"
CONFLICTING = "conflicting"

MANIFEST_COLUMNS = ("id", "image_ref", "class_label", "bias_label", "split", "origin")


class GroupKey(NamedTuple):
    class_label: str
    bias_label: str

    def __str__(self):
        return f"{self.class_label}|{self.bias_label}"

    @classmethod
    def parse(cls, text: str) -> "GroupKey":
        y, sep, a = text.partition("|")
        if not sep:
            raise ParseError(f"malformed group key {text!r}, expected 'class|bias'")
        return cls(y, a)


@dataclass(frozen=True)
class DatasetItem:
    id: str
    image_ref: object = field(compare=False, repr=False)
    class_label: str
    bias_label: str
    split: str = "train"
    origin: str = "real"
    provenance: Mapping[str, object] = field(default_factory=dict, compare=False, repr=False)

    @property
    def group(self) -> GroupKey:
        return GroupKey(self.class_label, self.bias_label)

    def load_image(self, root: Optional[Path] = None) -> np.ndarray:
        return decode_image_ref(self.image_ref, root)


# -- image references -------------------------------------------------------

def encode_array(arr: np.ndarray) -> str:
    """Inline payload ``array:<dtype>:<shape>:<base64>`` for small images."""
    arr = np.ascontiguousarray(arr)
    shape = "x".join(str(s) for s in arr.shape)
    payload = base64.b64encode(arr.tobytes()).decode("ascii")
    return f"array:{arr.dtype.str}:{shape}:{payload}"


def decode_array(text: str) -> np.ndarray:
    try:
        tag, dtype, shape, payload = text.split(":", 3)
    except ValueError:
        raise ParseError("malformed inline array payload") from None
    if tag != "array":
        raise ParseError(f"not an inline array payload: {text[:20]!r}")
    dims = tuple(int(s) for s in shape.split("x")) if shape else ()
    buf = base64.b64decode(payload.encode("ascii"))
    return np.frombuffer(buf, dtype=np.dtype(dtype)).reshape(dims).copy()


def decode_image_ref(ref, root: Optional[Path] = None) -> np.ndarray:
    if isinstance(ref, np.ndarray):
        return ref
    if isinstance(ref, str) and ref.startswith("array:"):
        return decode_array(ref)
    path = Path(ref)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    if path.suffix == ".npy":
        return np.load(path)
    raise ParseError(f"unsupported image reference {str(ref)[:60]!r} (inline array or .npy only)")


# -- dataset ----------------------------------------------------------------

def infer_alignment(items: Sequence[DatasetItem]) -> Dict[GroupKey, str]:
    """Largest group per class is aligned; the rest conflict.

    Ties are broken by bias label order so the result is deterministic.
    """
    counts: Dict[GroupKey, int] = {}
    for it in items:
        counts[it.group] = counts.get(it.group, 0) + 1
    by_class: Dict[str, List[GroupKey]] = {}
    for g in sorted(counts):
        by_class.setdefault(g.class_label, []).append(g)
    out = {}
    for keys in by_class.values():
        top = max(keys, key=lambda g: (counts[g], [-ord(c) for c in g.bias_label]))
        for g in keys:
            out[g] = ALIGNED if g == top else CONFLICTING
    return out


@dataclass
class GroupedDataset:
    items: List[DatasetItem]
    classes: tuple = ()
    biases: tuple = ()
    alignment_map: Dict[GroupKey, str] = field(default_factory=dict)
    root: Optional[Path] = None

    def __post_init__(self):
        self.items = list(self.items)
        if not self.classes:
            self.classes = tuple(sorted({it.class_label for it in self.items}))
        if not self.biases:
            self.biases = tuple(sorted({it.bias_label for it in self.items}))
        self.classes = tuple(self.classes)
        self.biases = tuple(self.biases)
        seen = set()
        for it in self.items:
            if it.id in seen:
                raise IntegrityError(f"duplicate item id {it.id!r}")
            seen.add(it.id)
            if it.class_label not in self.classes:
                raise IntegrityError(f"item {it.id!r}: class {it.class_label!r} not in {self.classes}")
            if it.bias_label not in self.biases:
                raise IntegrityError(f"item {it.id!r}: bias {it.bias_label!r} not in {self.biases}")
        self.alignment_map = {GroupKey(*k): v for k, v in (self.alignment_map or {}).items()}
        missing = [g for g in self.group_index() if g not in self.alignment_map]
        if missing:
            inferred = infer_alignment(self.items)
            for g in missing:
                self.alignment_map[g] = inferred[g]
        self._images = None

    def __len__(self):
        return len(self.items)

    def group_index(self) -> Dict[GroupKey, List[int]]:
        index: Dict[GroupKey, List[int]] = {}
        for i, it in enumerate(self.items):
            index.setdefault(it.group, []).append(i)
        return {g: index[g] for g in sorted(index)}

    def group_sizes(self) -> Dict[GroupKey, int]:
        return {g: len(ix) for g, ix in self.group_index().items()}

    def all_groups(self) -> List[GroupKey]:
        return [GroupKey(y, a) for y in self.classes for a in self.biases]

    def is_aligned(self, g: GroupKey) -> bool:
        return self.alignment_map.get(g) == ALIGNED

    def derive(self, items: Sequence[DatasetItem]) -> "GroupedDataset":
        """New dataset over ``items`` sharing label sets and alignment."""
        return GroupedDataset(list(items), self.classes, self.biases, dict(self.alignment_map), self.root)

    def subset(self, indices) -> "GroupedDataset":
        return self.derive([self.items[i] for i in indices])

    def split(self, name: str) -> "GroupedDataset":
        return self.derive([it for it in self.items if it.split == name])

    def group(self, g: GroupKey) -> "GroupedDataset":
        return self.derive([it for it in self.items if it.group == g])

    # array views used by training / evaluation
    def images(self) -> np.ndarray:
        if self._images is None:
            if not self.items:
                raise SamplingError("dataset is empty")
            self._images = np.stack([it.load_image(self.root) for it in self.items]).astype(np.float64)
        return self._images

    def class_indices(self) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes)}
        return np.array([lookup[it.class_label] for it in self.items], dtype=np.int64)

    def group_indices(self) -> np.ndarray:
        lookup = {g: i for i, g in enumerate(self.all_groups())}
        return np.array([lookup[it.group] for it in self.items], dtype=np.int64)


# -- manifest I/O -----------------------------------------------------------

def _resolve_schema(schema: Optional[Mapping[str, str]]) -> Dict[str, str]:
    resolved = {c: c for c in MANIFEST_COLUMNS}
    if schema:
        unknown = set(schema) - set(MANIFEST_COLUMNS)
        if unknown:
            raise SchemaError(f"unknown schema keys {sorted(unknown)}")
        resolved.update(schema)
    return resolved


def _read_rows(path: Path) -> List[Dict[str, str]]:
    text = path.read_text()
    if path.suffix in (".jsonl", ".ndjson"):
        rows = []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{n}: {exc}") from None
            rows.append({k: v if isinstance(v, str) else json.dumps(v) for k, v in row.items()})
        return rows
    return list(csv.DictReader(io.StringIO(text)))


def load_manifest(
    path,
    schema: Optional[Mapping[str, str]] = None,
    alignment: Optional[Mapping[GroupKey, str]] = None,
    classes: Sequence[str] = (),
    biases: Sequence[str] = (),
) -> GroupedDataset:
    """Read a CSV or JSON-lines manifest; row order is preserved.

    ``schema`` maps canonical column names to the file's column names. The
    ``origin`` column is optional (defaults to ``real``). Columns beyond the
    canonical ones are kept as item provenance.
    """
    path = Path(path)
    cols = _resolve_schema(schema)
    rows = _read_rows(path)
    required = [k for k in MANIFEST_COLUMNS if k != "origin"]
    if rows:
        present = set(rows[0])
        missing = [cols[k] for k in required if cols[k] not in present]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
    canonical = set(cols.values())
    items = []
    for n, row in enumerate(rows, 2):
        split = row[cols["split"]]
        if split not in SPLITS:
            raise ParseError(f"{path}:{n}: unknown split tag {split!r}")
        origin = row.get(cols["origin"]) or "real"
        if origin not in ORIGINS:
            raise ParseError(f"{path}:{n}: unknown origin {origin!r}")
        extra = {k: v for k, v in row.items() if k not in canonical}
        items.append(
            DatasetItem(
                id=row[cols["id"]],
                image_ref=row[cols["image_ref"]],
                class_label=row[cols["class_label"]],
                bias_label=row[cols["bias_label"]],
                split=split,
                origin=origin,
                provenance=extra,
            )
        )
    return GroupedDataset(items, tuple(classes), tuple(biases), dict(alignment or {}), root=path.parent)


def _row(it: DatasetItem, extra_cols: Sequence[str]) -> Dict[str, str]:
    ref = it.image_ref
    if isinstance(ref, np.ndarray):
        ref = encode_array(ref)
    row = {
        "id": it.id,
        "image_ref": str(ref),
        "class_label": it.class_label,
        "bias_label": it.bias_label,
        "split": it.split,
        "origin": it.origin,
    }
    for c in extra_cols:
        v = it.provenance.get(c, "")
        row[c] = v if isinstance(v, str) else json.dumps(v)
    return row


def save_manifest(ds: GroupedDataset, path, extra_columns: Optional[Sequence[str]] = None) -> Path:
    """Write ``ds`` as CSV (default) or JSON-lines (``.jsonl``)."""
    path = Path(path)
    if extra_columns is None:
        extra: List[str] = []
        for it in ds.items:
            for k in it.provenance:
                if k not in extra and k not in MANIFEST_COLUMNS:
                    extra.append(k)
        extra_columns = extra
    rows = [_row(it, extra_columns) for it in ds.items]
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix in (".jsonl", ".ndjson"):
        path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    else:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(MANIFEST_COLUMNS) + list(extra_columns), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        path.write_text(buf.getvalue())
    return path


# -- biased splits ----------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Either exact per-group counts or a per-class aligned fraction."""

    target_counts: Optional[Mapping[GroupKey, int]] = None
    bias_ratio: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if (self.target_counts is None) == (self.bias_ratio is None):
            raise SchemaError("SplitSpec needs exactly one of target_counts or bias_ratio")
        if self.bias_ratio is not None and not (0.0 < self.bias_ratio <= 1.0):
            raise SchemaError(f"bias_ratio must lie in (0, 1], got {self.bias_ratio}")
        if self.target_counts is not None and any(v < 0 for v in self.target_counts.values()):
            raise SchemaError("target counts must be non-negative")

    def to_dict(self) -> dict:
        if self.target_counts is not None:
            return {"target_counts": {str(GroupKey(*g)): n for g, n in self.target_counts.items()}, "seed": self.seed}
        return {"bias_ratio": self.bias_ratio, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitSpec":
        counts = d.get("target_counts")
        if counts is not None:
            counts = {GroupKey.parse(k): int(v) for k, v in counts.items()}
        return cls(target_counts=counts, bias_ratio=d.get("bias_ratio"), seed=int(d.get("seed", 0)))


def max_conflicting(aligned: int, ratio: float) -> int:
    """Largest k with aligned / (aligned + k) >= ratio, at least 1 unless ratio == 1."""
    r = Fraction(str(ratio))
    if r == 1:
        return 0
    k = math.floor(aligned * (1 - r) / r)
    return max(k, 1)


def _ratio_targets(pool: GroupedDataset, ratio: float) -> Dict[GroupKey, int]:
    sizes = pool.group_sizes()
    targets = {}
    for y in pool.classes:
        keys = [g for g in sizes if g.class_label == y]
        aligned = [g for g in keys if pool.is_aligned(g)]
        conflicting = [g for g in keys if not pool.is_aligned(g)]
        n_aligned = sum(sizes[g] for g in aligned)
        for g in aligned:
            targets[g] = sizes[g]
        if not conflicting:
            continue
        k = max_conflicting(n_aligned, ratio)
        # spread k over conflicting groups, remainder to the earliest keys
        base, rem = divmod(k, len(conflicting))
        for i, g in enumerate(conflicting):
            targets[g] = base + (1 if i < rem else 0)
    return targets


def construct_biased_split(pool: GroupedDataset, spec: SplitSpec) -> GroupedDataset:
    """Subsample ``pool`` so group counts (or per-class aligned fractions) match ``spec``.

    Groups not named in ``spec.target_counts`` are kept whole. In ratio mode the
    aligned groups are kept intact and conflicting groups shrink.
    """
    sizes = pool.group_sizes()
    if spec.target_counts is not None:
        targets = {GroupKey(*g): int(n) for g, n in spec.target_counts.items()}
        for g in sizes:
            targets.setdefault(g, sizes[g])
    else:
        targets = _ratio_targets(pool, spec.bias_ratio)
    for g, n in sorted(targets.items()):
        have = sizes.get(g, 0)
        if n > have:
            raise CapacityError(f"group {g} has {have} items, {n} requested", group=g)
    rng = np.random.default_rng(spec.seed)
    index = pool.group_index()
    keep = []
    for g in sorted(index):
        ix = np.asarray(index[g])
        n = targets.get(g, 0)
        if n >= len(ix):
            keep.extend(ix.tolist())
        elif n > 0:
            keep.extend(np.sort(rng.choice(ix, size=n, replace=False)).tolist())
    keep.sort()
    return pool.subset(keep)


def compute_bias_ratio(ds: GroupedDataset) -> Dict[str, float]:
    sizes = ds.group_sizes()
    out = {}
    for y in ds.classes:
        total = sum(n for g, n in sizes.items() if g.class_label == y)
        if total == 0:
            raise UndefinedRatioError(f"class {y!r} has no items")
        aligned = sum(n for g, n in sizes.items() if g.class_label == y and ds.is_aligned(g))
        out[y] = aligned / total
    return out


# -- samplers ---------------------------------------------------------------

def group_uniform_batches(
    ds: GroupedDataset,
    batch_size: int,
    seed: int,
    mode: str = "group",
    n_batches: Optional[int] = None,
) -> Iterator[np.ndarray]:
    """Yield index arrays drawing (near-)equally from every group or class.

    Each stratum receives ``batch_size // n`` slots; the leftover slots go to
    strata chosen at random per batch. Strata too small for their share are
    sampled with replacement. The stream is infinite unless ``n_batches``.
    """
    if mode == "group":
        strata = {g: np.asarray(ix) for g, ix in ds.group_index().items()}
        declared = ds.all_groups()
        empty = [g for g in declared if g not in strata]
        if empty:
            raise SamplingError(f"empty group(s) {[str(g) for g in empty]} in group-uniform mode")
    elif mode == "class":
        by_class: Dict[str, List[int]] = {}
        for i, it in enumerate(ds.items):
            by_class.setdefault(it.class_label, []).append(i)
        strata = {y: np.asarray(by_class[y]) for y in sorted(by_class)}
        if not strata:
            raise SamplingError("dataset is empty")
    else:
        raise ValueError(f"unknown sampler mode {mode!r}")
    keys = list(strata)
    if batch_size < len(keys):
        raise SamplingError(f"batch_size {batch_size} smaller than {len(keys)} strata")
    rng = np.random.default_rng(seed)
    base, rem = divmod(batch_size, len(keys))
    produced = 0
    while n_batches is None or produced < n_batches:
        counts = np.full(len(keys), base)
        if rem:
            counts[rng.choice(len(keys), size=rem, replace=False)] += 1
        parts = []
        for k, n in zip(keys, counts):
            pool = strata[k]
            parts.append(rng.choice(pool, size=n, replace=n > len(pool)))
        yield np.concatenate(parts)
        produced += 1


def shuffled_batches(n_items: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One epoch of plain shuffled minibatches."""
    order = rng.permutation(n_items)
    for start in range(0, n_items, batch_size):
        yield order[start:start + batch_size]


def balanced_subsample(ds: GroupedDataset, seed: int) -> GroupedDataset:
    """Equal-size subsample of every declared group, sized to the smallest."""
    index = ds.group_index()
    empty = [g for g in ds.all_groups() if g not in index]
    if empty:
        raise SamplingError(f"cannot balance: empty group(s) {[str(g) for g in empty]}")
    n = min(len(ix) for ix in index.values())
    rng = np.random.default_rng(seed)
    keep = []
    for g in sorted(index):
        keep.extend(rng.choice(index[g], size=n, replace=False).tolist())
    keep.sort()
    return ds.subset(keep)


def relabel(item: DatasetItem, **changes) -> DatasetItem:
    return replace(item, **changes)
