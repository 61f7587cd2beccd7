"""Encoder + linear-head classifier in numpy with manual backprop."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .losses import softmax

ENCODER_PARAMS = ("enc_w1", "enc_b1", "enc_w2", "enc_b2")
HEAD_PARAMS = ("head_w", "head_b")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    n_classes: int
    hidden: int = 64
    feature_dim: int = 32


class ClassifierModel:
    """Two-layer ReLU encoder producing features, followed by a linear head.

    Inputs are flattened images in ``[0, 1]``, shifted to be roughly
    zero-centred. Parameters are tagged ``encoder`` or ``head``; a frozen
    group is skipped by :meth:`sgd_step` so its bytes never change.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        d, h, f, c = spec.input_dim, spec.hidden, spec.feature_dim, spec.n_classes
        self.params: Dict[str, np.ndarray] = {
            "enc_w1": rng.standard_normal((d, h)) * np.sqrt(2.0 / d),
            "enc_b1": np.zeros(h),
            "enc_w2": rng.standard_normal((h, f)) * np.sqrt(1.0 / h),
            "enc_b2": np.zeros(f),
            "head_w": rng.standard_normal((f, c)) * np.sqrt(1.0 / f),
            "head_b": np.zeros(c),
        }
        self.frozen = set()

    # parameter groups
    def freeze(self, group: str = "encoder"):
        self.frozen.add(self._group(group))

    def unfreeze(self, group: str = "encoder"):
        self.frozen.discard(self._group(group))

    @staticmethod
    def _group(name: str) -> str:
        if name not in ("encoder", "head"):
            raise ValueError(f"unknown parameter group {name!r}")
        return name

    def group_of(self, param: str) -> str:
        return "encoder" if param in ENCODER_PARAMS else "head"

    def copy(self) -> "ClassifierModel":
        other = ClassifierModel.__new__(ClassifierModel)
        other.spec = self.spec
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.frozen = set(self.frozen)
        return other

    # forward / backward
    @staticmethod
    def _flatten(x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x.reshape(x.shape[0], -1) - 0.5

    def forward(self, x):
        p = self.params
        x = self._flatten(x)
        pre = x @ p["enc_w1"] + p["enc_b1"]
        hid = np.maximum(pre, 0.0)
        feats = hid @ p["enc_w2"] + p["enc_b2"]
        logits = feats @ p["head_w"] + p["head_b"]
        return logits, feats, (x, pre, hid, feats)

    def features(self, x) -> np.ndarray:
        return self.forward(x)[1]

    def logits(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def predict(self, x, batch_size: int = 1024) -> np.ndarray:
        x = np.asarray(x)
        out = [self.logits(x[i:i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def backward(self, cache, d_logits, d_features=None) -> Dict[str, np.ndarray]:
        p = self.params
        x, pre, hid, feats = cache
        grads = {"head_w": feats.T @ d_logits, "head_b": d_logits.sum(0)}
        if "encoder" in self.frozen:
            return grads
        d_feat = d_logits @ p["head_w"].T
        if d_features is not None:
            d_feat = d_feat + d_features
        grads["enc_w2"] = hid.T @ d_feat
        grads["enc_b2"] = d_feat.sum(0)
        d_hid = (d_feat @ p["enc_w2"].T) * (pre > 0)
        grads["enc_w1"] = x.T @ d_hid
        grads["enc_b1"] = d_hid.sum(0)
        return grads

    def sgd_step(self, grads: Dict[str, np.ndarray], lr: float, weight_decay: float = 0.0):
        for name, g in grads.items():
            if self.group_of(name) in self.frozen:
                continue
            w = self.params[name]
            # coupled L2 decay, as in torch.optim.SGD
            w -= lr * (g + weight_decay * w)

    # serialization
    def encoder_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(self.params[k]).tobytes() for k in ENCODER_PARAMS)

    def encoder_hash(self) -> str:
        return hashlib.sha256(self.encoder_bytes()).hexdigest()

    def head_hash(self) -> str:
        data = b"".join(np.ascontiguousarray(self.params[k]).tobytes() for k in HEAD_PARAMS)
        return hashlib.sha256(data).hexdigest()

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, **self.params)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, spec: ModelSpec) -> "ClassifierModel":
        m = cls.__new__(cls)
        m.spec = spec
        with np.load(io.BytesIO(data)) as z:
            m.params = {k: z[k].copy() for k in ENCODER_PARAMS + HEAD_PARAMS}
        m.frozen = set()
        return m


def save_checkpoint(model: ClassifierModel, path, metadata: Optional[dict] = None) -> Path:
    """Write ``<path>.npz`` (parameters) and ``<path>.json`` (metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = path.with_suffix(".npz")
    blob.write_bytes(model.to_bytes())
    meta = {
        "version": CHECKPOINT_VERSION,
        "spec": asdict(model.spec),
        "encoder_hash": model.encoder_hash(),
        "head_hash": model.head_hash(),
        "frozen": sorted(model.frozen),
    }
    meta.update(metadata or {})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return blob


def load_checkpoint(path) -> ClassifierModel:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    model = ClassifierModel.from_bytes(path.with_suffix(".npz").read_bytes(), ModelSpec(**meta["spec"]))
    model.frozen = set(meta.get("frozen", []))
    return model
