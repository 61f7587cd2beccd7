"""Cross-entropy, supervised contrastive and group-robust losses with gradients.

All functions work on plain numpy arrays. Functions suffixed ``_grad`` return
``(value, gradient)`` so the training loop can backpropagate without an
autodiff library.
"""

from __future__ import annotations

import logging
from typing import Dict, Hashable, Mapping, Tuple

import numpy as np

logger = logging.getLogger(__name__)

PROB_EPS = 1e-12
NORM_EPS = 1e-12
SUPCON_VARIANTS = ("negatives", "standard")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ce_loss(probs, labels) -> float:
    """Mean negative log-probability of the true class.

    Zero probabilities are clamped to ``1e-12`` (with a warning) so the loss
    stays finite.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    p_true = probs[np.arange(len(labels)), labels]
    if np.any(p_true < PROB_EPS):
        logger.warning("true-class probability below %.0e clamped", PROB_EPS)
        p_true = np.maximum(p_true, PROB_EPS)
    return float(-np.log(p_true).mean())


def ce_from_logits_grad(logits, labels) -> Tuple[float, np.ndarray]:
    """CE of softmax(logits) and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(b), labels] - log_z
    probs = np.exp(shifted - log_z[:, None])
    grad = probs
    grad[np.arange(b), labels] -= 1.0
    return float(-log_p.mean()), grad / b


def _normalize(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    return features / np.maximum(norms, NORM_EPS), norms


def supcon_loss_grad(
    features,
    labels,
    tau: float = 1.0,
    variant: str = "negatives",
    reduction: str = "sum",
) -> Tuple[float, np.ndarray]:
    """Supervised contrastive loss over L2-normalised features, with gradient.

    For anchor ``j`` with positives ``P`` (same label, excluding ``j``) and
    negatives ``N`` the term is ``-mean_p log(exp(s_jp) / sum_n exp(s_jn))``
    with ``s = z_j . z_k / tau``. The ``"standard"`` variant sums the
    denominator over every ``k != j`` instead of negatives only. Anchors
    without positives or negatives are skipped. ``reduction`` is ``"sum"``
    over anchors or ``"mean"`` over the kept anchors.
    """
    if variant not in SUPCON_VARIANTS:
        raise ValueError(f"unknown supcon variant {variant!r}")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    labels = np.asarray(labels)
    b = f.shape[0]
    if b < 2:
        raise ValueError("supcon needs a batch of at least 2")
    z, norms = _normalize(f)
    sim = z @ z.T / tau
    same = labels[:, None] == labels[None, :]
    eye = np.eye(b, dtype=bool)
    pos = same & ~eye
    neg = ~same
    denom_mask = neg if variant == "negatives" else ~eye
    n_pos = pos.sum(axis=1)
    valid = (n_pos > 0) & neg.any(axis=1)
    if not valid.any():
        logger.warning("supcon: every anchor lacks positives or negatives; loss is 0")
        return 0.0, np.zeros_like(f)
    masked = np.where(denom_mask, sim, -np.inf)
    row_max = np.where(denom_mask.any(axis=1), masked.max(axis=1), 0.0)
    expd = np.where(denom_mask, np.exp(masked - row_max[:, None]), 0.0)
    denom = expd.sum(axis=1)
    lse = row_max + np.log(np.where(valid, denom, 1.0))
    pos_mean = np.where(pos, sim, 0.0).sum(axis=1) / np.maximum(n_pos, 1)
    terms = np.where(valid, lse - pos_mean, 0.0)
    # d term_j / d s_jk: softmax over the denominator set minus uniform mass on positives
    g = expd / np.where(valid, denom, 1.0)[:, None] - pos / np.maximum(n_pos, 1)[:, None]
    g[~valid] = 0.0
    total = float(terms.sum())
    kept = int(valid.sum())
    if reduction == "mean":
        total /= kept
        g /= kept
    dz = (g + g.T) @ z / tau
    # back through z = f / |f|
    df = (dz - z * (z * dz).sum(axis=1, keepdims=True)) / np.maximum(norms, NORM_EPS)
    return float(total), df


def supcon_loss(features, labels, tau: float = 1.0, variant: str = "negatives", reduction: str = "sum") -> float:
    return supcon_loss_grad(features, labels, tau, variant, reduction)[0]


def combined_loss_grad(logits, features, labels, beta: float = 0.5, tau: float = 1.0,
                       variant: str = "negatives", reduction: str = "sum") -> Dict[str, object]:
    """``beta * CE + (1 - beta) * SupCon`` with gradients for logits and features."""
    ce, d_logits = ce_from_logits_grad(logits, labels)
    if beta < 1.0:
        sc, d_feat = supcon_loss_grad(features, labels, tau, variant, reduction)
    else:
        sc, d_feat = 0.0, np.zeros_like(np.asarray(features, dtype=np.float64))
    return {
        "ce": ce,
        "supcon": sc,
        "total": beta * ce + (1.0 - beta) * sc,
        "d_logits": beta * d_logits,
        "d_features": (1.0 - beta) * d_feat,
    }


def combined_loss(logits, features, labels, cfg=None, **kw) -> float:
    """Scalar combined loss; ``cfg`` may be any object with ``beta``/``tau``."""
    if cfg is not None:
        kw.setdefault("beta", cfg.beta)
        kw.setdefault("tau", cfg.tau)
        kw.setdefault("variant", getattr(cfg, "supcon_variant", "negatives"))
        kw.setdefault("reduction", getattr(cfg, "supcon_reduction", "sum"))
    return float(combined_loss_grad(logits, features, labels, **kw)["total"])


def gdro_loss(
    per_group_losses: Mapping[Hashable, float],
    weights: Mapping[Hashable, float],
    eta: float,
) -> Tuple[float, Dict[Hashable, float]]:
    """Exponentiated-gradient group weights, then the weighted loss.

    ``q_g <- q_g * exp(eta * l_g)`` renormalised to sum to one; returns
    ``(sum_g q_g * l_g, q)``.
    """
    keys = list(per_group_losses)
    losses = np.array([per_group_losses[k] for k in keys], dtype=np.float64)
    q = np.array([weights[k] for k in keys], dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise ValueError("group losses must be finite")
    # work in log space so large eta * loss cannot overflow
    logq = np.log(np.maximum(q, 1e-300)) + eta * losses
    logq -= logq.max()
    q = np.exp(logq) * (q > 0)
    q /= q.sum()
    return float(q @ losses), {k: float(v) for k, v in zip(keys, q)}
