"""ColoredShapes: a procedural benchmark with a controllable spurious feature.

The class is the foreground shape (square or cross); the bias attribute is
the background palette (warm or cool). In the training split each class sits
on its aligned palette with probability ``bias_ratio``. The palette covers
most pixels, so it is far easier to pick up than the shape.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List

import numpy as np

from .groups import ALIGNED, CONFLICTING, DatasetItem, GroupedDataset, GroupKey
from .synth import OraclePrior

CLASSES = ("cross", "square")
BIASES = ("cool", "warm")
ALIGNMENT = {
    GroupKey("square", "warm"): ALIGNED,
    GroupKey("square", "cool"): CONFLICTING,
    GroupKey("cross", "cool"): ALIGNED,
    GroupKey("cross", "warm"): CONFLICTING,
}
PALETTES = {"warm": np.array([0.78, 0.46, 0.22]), "cool": np.array([0.22, 0.46, 0.78])}
FOREGROUND = np.array([0.95, 0.95, 0.95])


@dataclass(frozen=True)
class ShapeWorldConfig:
    image_size: int = 16
    bias_ratio: float = 0.95
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 400
    noise_sigma: float = 0.1
    seed: int = 0
    shape_size: int = 6
    jitter: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


def shape_mask(name: str, image_size: int = 16, size: int = 6, dy: int = 0, dx: int = 0) -> np.ndarray:
    """Binary mask of a centred shape, shifted by ``(dy, dx)``."""
    m = np.zeros((image_size, image_size))
    top = (image_size - size) // 2 + dy
    left = (image_size - size) // 2 + dx
    if name == "square":
        m[top:top + size, left:left + size] = 1.0
    elif name == "cross":
        arm = max(1, size // 3)
        off = (size - arm) // 2
        m[top:top + size, left + off:left + off + arm] = 1.0
        m[top + off:top + off + arm, left:left + size] = 1.0
    else:
        raise ValueError(f"unknown shape {name!r}")
    return m


def render(cls: str, bias: str, cfg: ShapeWorldConfig, rng: np.random.Generator) -> np.ndarray:
    dy, dx = rng.integers(-cfg.jitter, cfg.jitter + 1, size=2) if cfg.jitter else (0, 0)
    mask = shape_mask(cls, cfg.image_size, cfg.shape_size, dy, dx)[..., None]
    # colour jitter is tied to the pixel noise level so sigma=0 gives clean groups
    bg = PALETTES[bias] + 0.4 * cfg.noise_sigma * rng.standard_normal(3)
    fg = FOREGROUND + 0.2 * cfg.noise_sigma * rng.standard_normal(3)
    img = bg * (1 - mask) + fg * mask
    img = img + cfg.noise_sigma * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _biased_counts(n: int, ratio: float) -> Dict[GroupKey, int]:
    per_class = n // 2
    counts = {}
    for y in CLASSES:
        n_conf = 0 if ratio >= 1.0 else max(1, int(round(per_class * (1 - ratio))))
        for g, kind in ALIGNMENT.items():
            if g.class_label == y:
                counts[g] = per_class - n_conf if kind == ALIGNED else n_conf
    return counts


def _balanced_counts(n: int) -> Dict[GroupKey, int]:
    return {g: n // 4 for g in sorted(ALIGNMENT)}


def generate_shapeworld(cfg: ShapeWorldConfig) -> GroupedDataset:
    """Train/val follow ``bias_ratio`` per class; test is group-balanced."""
    rng = np.random.default_rng(cfg.seed)
    items: List[DatasetItem] = []
    plan = [
        ("train", _biased_counts(cfg.n_train, cfg.bias_ratio)),
        ("val", _biased_counts(cfg.n_val, cfg.bias_ratio)),
        ("test", _balanced_counts(cfg.n_test)),
    ]
    for split, counts in plan:
        for g in sorted(counts):
            for i in range(counts[g]):
                items.append(
                    DatasetItem(
                        id=f"{split}-{g.class_label}-{g.bias_label}-{i:05d}",
                        image_ref=render(g.class_label, g.bias_label, cfg, rng),
                        class_label=g.class_label,
                        bias_label=g.bias_label,
                        split=split,
                    )
                )
    return GroupedDataset(items, CLASSES, BIASES, dict(ALIGNMENT))


def shapeworld_lexicon(cfg: ShapeWorldConfig, ridge: float = 0.1) -> Dict[str, np.ndarray]:
    """Prototype images for the toy embedder's visual vocabulary.

    Class words get a ridge-regularised discriminant between the two shapes
    over every placement, with the constant and mean-shape directions removed
    so that a plain inner product (no intercept) separates them regardless of
    the background colour. Bias words get a flat image of their palette.
    """
    offsets = range(-cfg.jitter, cfg.jitter + 1)
    renders = {
        c: np.array([shape_mask(c, cfg.image_size, cfg.shape_size, dy, dx).ravel() for dy in offsets for dx in offsets])
        for c in CLASSES
    }
    sq, cr = renders["square"], renders["cross"]
    within = np.cov(np.vstack([sq - sq.mean(0), cr - cr.mean(0)]), rowvar=False)
    w = np.linalg.solve(within + ridge * np.eye(within.shape[0]), sq.mean(0) - cr.mean(0))
    basis, _ = np.linalg.qr(np.stack([np.ones_like(w), (sq.mean(0) + cr.mean(0)) / 2], axis=1))
    w = w - basis @ (basis.T @ w)
    w = w.reshape(cfg.image_size, cfg.image_size)[..., None] * np.ones(3)
    lex = {"square": w, "cross": -w}
    for bias, color in PALETTES.items():
        lex[bias] = np.broadcast_to(color, (cfg.image_size, cfg.image_size, 3)).copy()
    return lex


def shapeworld_prior(
    cfg: ShapeWorldConfig,
    palette_shift: float = 0.12,
    shape_scale: int = 2,
    adherence: float = 0.85,
) -> OraclePrior:
    """Generic-knowledge prior for the oracle generator.

    It knows what each word means but with a style mismatch: backgrounds are
    offset by ``palette_shift``, shapes are drawn larger and centred, and the
    bias word of a prompt is ignored in favour of the stereotypical one with
    probability ``1 - adherence``.
    """
    size = min(cfg.shape_size + shape_scale, cfg.image_size - 2)
    shapes = {c: shape_mask(c, cfg.image_size, size) for c in CLASSES}
    palettes = {b: np.clip(c + palette_shift, 0, 1) for b, c in PALETTES.items()}
    stereotypes = {g.class_label: g.bias_label for g, kind in ALIGNMENT.items() if kind == ALIGNED}
    return OraclePrior(
        shapes=shapes,
        palettes=palettes,
        fg_color=np.ones(3),
        palette_sigma=0.02,
        noise_sigma=0.05,
        jitter=0,
        stereotypes=stereotypes,
        adherence=adherence,
    )
