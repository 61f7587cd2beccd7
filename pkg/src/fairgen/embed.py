"""Embedding backends, centroids, cosine similarity and Fréchet distance.

The real pipeline would embed with a pretrained image-text model; here the
backend is an interface and :class:`ToyBackend` is a deterministic stand-in
whose text and image embeddings share one space.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Protocol, Sequence

import numpy as np

from .errors import FairgenError, NumericalError, UndefinedSimilarityError
from .groups import GroupKey

logger = logging.getLogger(__name__)

FRECHET_EPS = 1e-6
NEG_EIG_TOL = 1e-8


class EmbeddingBackend(Protocol):
    dimension: int

    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text(self, prompt: str) -> np.ndarray: ...


@dataclass(frozen=True)
class GroupEmbeddingStats:
    group: GroupKey
    centroid: np.ndarray
    count: int


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def group_centroid(embs: Sequence[np.ndarray], group: GroupKey) -> GroupEmbeddingStats:
    """Arithmetic mean of raw (not re-normalized) embeddings."""
    if len(embs) == 0:
        raise FairgenError(f"group {group} has no embeddings; fall back to label-only scoring")
    arr = np.asarray(embs, dtype=np.float64)
    return GroupEmbeddingStats(GroupKey(*group), arr.mean(axis=0), arr.shape[0])


# -- Fréchet distance -------------------------------------------------------

def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    if w.min() < -NEG_EIG_TOL * max(1.0, abs(w.max())):
        raise np.linalg.LinAlgError(f"matrix not PSD (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _trace_sqrt_product(sa: np.ndarray, sb: np.ndarray) -> float:
    """Tr((sa @ sb)^(1/2)) through the symmetric form sa^½ sb sa^½."""
    root_a = _psd_sqrt(sa)
    inner = root_a @ sb @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    if w.min() < -NEG_EIG_TOL * max(1.0, abs(w.max())):
        raise np.linalg.LinAlgError(f"product not PSD (min eigenvalue {w.min():.3e})")
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance_from_stats(mu_a, sigma_a, mu_b, sigma_b) -> float:
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    sa, sb = np.atleast_2d(sigma_a).astype(np.float64), np.atleast_2d(sigma_b).astype(np.float64)
    if mu_a.shape != mu_b.shape or sa.shape != sb.shape:
        raise ValueError("statistics have mismatched dimensions")
    try:
        tr = _trace_sqrt_product(sa, sb)
    except np.linalg.LinAlgError as exc:
        logger.warning("Fréchet sqrt failed (%s); adding %.0e*I to covariances", exc, FRECHET_EPS)
        eye = np.eye(sa.shape[0]) * FRECHET_EPS
        sa, sb = sa + eye, sb + eye
        try:
            tr = _trace_sqrt_product(sa, sb)
        except np.linalg.LinAlgError as exc2:
            raise NumericalError(f"Fréchet distance undefined: {exc2}") from None
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr)
    return max(value, 0.0)


def gaussian_stats(x) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise FairgenError("Fréchet distance needs at least 2 samples per set")
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False))


def frechet_distance(a, b) -> float:
    """Fréchet distance between Gaussian fits of two embedding sets."""
    mu_a, sa = gaussian_stats(a)
    mu_b, sb = gaussian_stats(b)
    return frechet_distance_from_stats(mu_a, sa, mu_b, sb)


# -- toy backend ------------------------------------------------------------

_TOKEN = re.compile(r"[a-z0-9][a-z0-9\-]*")


def tokenize(prompt: str) -> list:
    return _TOKEN.findall(prompt.lower())


def _hash_unit(text: str, salt: int, d: int) -> np.ndarray:
    digest = hashlib.sha256(f"{salt}:{text}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


class ToyBackend:
    """Random orthogonal projection of pixels into a ``d``-dim unit sphere.

    Text is embedded as the sum of anchor vectors for the lexicon words it
    contains plus a small per-prompt hash vector. A lexicon word mapped to a
    prototype image anchors at that image's embedding, so a class word lands
    near the images it describes; a word mapped to ``None`` gets a hash anchor.
    """

    def __init__(
        self,
        seed: int = 0,
        d: int = 64,
        lexicon: Optional[Mapping[str, Optional[np.ndarray]]] = None,
        text_mix: float = 0.15,
    ):
        if d < 2:
            raise ValueError("embedding dimension must be >= 2")
        self.seed = seed
        self.dimension = d
        self.text_mix = text_mix
        self._proj: Dict[int, np.ndarray] = {}
        self._lexicon = {k.lower(): v for k, v in (lexicon or {}).items()}
        self._anchors: Dict[str, np.ndarray] = {}

    def projection(self, n_in: int) -> np.ndarray:
        if n_in not in self._proj:
            rng = np.random.default_rng([self.seed, n_in])
            g = rng.standard_normal((max(n_in, self.dimension), min(n_in, self.dimension)))
            q, r = np.linalg.qr(g)
            q = q * np.sign(np.diag(r))
            self._proj[n_in] = q.T if self.dimension <= n_in else q
        return self._proj[n_in]

    def _raw(self, image: np.ndarray) -> np.ndarray:
        flat = np.asarray(image, dtype=np.float64).ravel()
        return self.projection(flat.size) @ flat

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        v = self._raw(image)
        n = np.linalg.norm(v)
        if n == 0.0:
            raise UndefinedSimilarityError("image projects to the zero vector")
        return v / n

    def embed_images(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        flat = images.reshape(images.shape[0], -1)
        v = flat @ self.projection(flat.shape[1]).T
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def _anchor(self, word: str) -> np.ndarray:
        if word not in self._anchors:
            proto = self._lexicon[word]
            if proto is None:
                self._anchors[word] = _hash_unit("word:" + word, self.seed, self.dimension)
            else:
                self._anchors[word] = self.embed_image(proto)
        return self._anchors[word]

    def embed_text(self, prompt: str) -> np.ndarray:
        v = self.text_mix * _hash_unit("prompt:" + prompt, self.seed, self.dimension)
        for word in dict.fromkeys(tokenize(prompt)):
            if word in self._lexicon:
                v = v + self._anchor(word)
        return v / np.linalg.norm(v)


def toy_backend(seed: int, d: int, lexicon=None, text_mix: float = 0.15) -> ToyBackend:
    return ToyBackend(seed=seed, d=d, lexicon=lexicon, text_mix=text_mix)


def embed_dataset(ds, backend: EmbeddingBackend) -> Dict[str, np.ndarray]:
    """Map item id to image embedding."""
    if hasattr(backend, "embed_images") and len(ds):
        mat = backend.embed_images(ds.images())
        return {it.id: mat[i] for i, it in enumerate(ds.items)}
    return {it.id: backend.embed_image(it.load_image(ds.root)) for it in ds.items}


# -- persistence ------------------------------------------------------------

def save_embeddings(path, embs: Mapping[str, np.ndarray]) -> Path:
    """``.npz`` (ids + matrix) or ``.json`` ({id: [floats]})."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = list(embs)
    if path.suffix == ".json":
        path.write_text(json.dumps({k: np.asarray(embs[k]).tolist() for k in ids}))
    else:
        mat = np.stack([np.asarray(embs[k], dtype=np.float64) for k in ids]) if ids else np.zeros((0, 0))
        with open(path, "wb") as fh:
            np.savez(fh, ids=np.array(ids, dtype=str), vectors=mat)
    return path


def load_embeddings(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    if path.suffix == ".json":
        return {k: np.asarray(v, dtype=np.float64) for k, v in json.loads(path.read_text()).items()}
    with np.load(path) as data:
        ids, vectors = data["ids"], data["vectors"]  # each key access re-reads the archive
    return {str(k): vectors[i] for i, k in enumerate(ids)}

