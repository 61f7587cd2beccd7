"""Generation plans, generator backends and the generation loop.

Four strategies are supported: prompt-only ``vanilla``, a generator fitted
per group (``lora_per_group``), a personalised generator per group
(``dreambooth_per_group``) and one personalised generator per embedding
cluster of each group (``clustered_dreambooth``). Actual diffusion models are
out of scope; :class:`OracleBackend` is a parametric image model that plays
their role on the toy benchmark.
"""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from .cluster import ClusterAssignment, cluster_count_rule
from .errors import ConfigError, DivisibilityError, GenerationError
from .groups import DatasetItem, GroupedDataset, GroupKey
from .prompts import CATALOG, DREAMBOOTH_FAMILY, STRATEGIES, PromptSpec, render_prompts, tokenize_prompt

logger = logging.getLogger(__name__)

DREAMBOOTH_SAMPLES = 100


@dataclass(frozen=True)
class SamplerParams:
    guidance_scale: float = 7.5
    steps: int = 50
    seed: int = 0


@dataclass
class GenerationPlan:
    strategy: str
    per_group_budget: int
    dataset_id: str = "shapeworld"
    per_cluster_budget: Optional[int] = None
    finetune_sample_budget: Optional[int] = None
    cluster_counts: Optional[int] = None
    transfer_map: Dict[GroupKey, GroupKey] = field(default_factory=dict)
    sampler_params: SamplerParams = field(default_factory=SamplerParams)
    severe: bool = False
    per_cluster_transfer: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.per_group_budget <= 0:
            raise ConfigError("per-group budget must be positive")
        if self.strategy == "clustered_dreambooth":
            if not self.cluster_counts or self.per_cluster_budget is None:
                raise ConfigError("clustered strategy needs cluster_counts and per_cluster_budget")
            if self.per_cluster_budget * self.cluster_counts != self.per_group_budget:
                raise DivisibilityError("per_cluster_budget * k must equal the per-group budget")
        if bool(self.transfer_map) != self.severe and self.strategy != "vanilla":
            raise ConfigError("transfer_map must be populated exactly in severe mode")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transfer_map"] = {str(k): str(v) for k, v in self.transfer_map.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GenerationPlan":
        d = dict(d)
        d["transfer_map"] = {GroupKey.parse(k): GroupKey.parse(v) for k, v in d.get("transfer_map", {}).items()}
        d["sampler_params"] = SamplerParams(**d.get("sampler_params", {}))
        return cls(**d)


def transfer_sources(ds: GroupedDataset, axis: str = "bias") -> Dict[GroupKey, GroupKey]:
    """Aligned source group for every conflicting group.

    With ``axis="bias"`` the source shares the class and differs in bias; with
    ``axis="class"`` it shares the bias label and differs in class.
    """
    aligned = [g for g in ds.all_groups() if ds.alignment_map.get(g) == "aligned"]
    out = {}
    for g in ds.all_groups():
        if ds.alignment_map.get(g) == "aligned":
            continue
        if axis == "bias":
            cands = [s for s in aligned if s.class_label == g.class_label]
        else:
            cands = [s for s in aligned if s.bias_label == g.bias_label and s.class_label != g.class_label]
        if len(cands) != 1:
            raise ConfigError(f"expected exactly one aligned source for {g}, found {[str(c) for c in cands]}")
        out[g] = cands[0]
    return out


def build_plan(
    ds: GroupedDataset,
    strategy: str,
    severe: bool,
    M: int,
    dataset_id: str = "shapeworld",
    k: Optional[int] = None,
    seed: int = 0,
    guidance_scale: float = 7.5,
    steps: Optional[int] = None,
    per_cluster_transfer: bool = False,
) -> GenerationPlan:
    """Budgets and transfer routing for one generation run.

    Fitting budgets (``l`` for LoRA, ``k`` for clustering) are derived from
    the groups a generator is actually fitted on; in severe mode the
    conflicting groups are never fitted.
    """
    if dataset_id not in CATALOG:
        raise ConfigError(f"unknown dataset id {dataset_id!r}")
    transfer_map: Dict[GroupKey, GroupKey] = {}
    if severe and strategy != "vanilla":
        transfer_map = transfer_sources(ds, CATALOG[dataset_id].transfer_axis)
    sizes = ds.group_sizes()
    fitted = [g for g in sizes if g not in transfer_map]
    if not fitted:
        raise ConfigError("no group available to fit a generator on")
    smallest = min(sizes[g] for g in fitted)
    finetune_budget = None
    per_cluster = None
    if strategy == "lora_per_group":
        finetune_budget = smallest
    elif strategy == "dreambooth_per_group":
        finetune_budget = DREAMBOOTH_SAMPLES
    elif strategy == "clustered_dreambooth":
        k = k or cluster_count_rule(smallest)
        if M % k:
            suggested = -(-M // k) * k
            raise DivisibilityError(f"M={M} not divisible by k={k}; try M={suggested}", suggested=suggested)
        per_cluster = M // k
    if steps is None:
        steps = 25 if (strategy == "clustered_dreambooth" and dataset_id == "utkface") else 50
    return GenerationPlan(
        strategy=strategy,
        per_group_budget=M,
        dataset_id=dataset_id,
        per_cluster_budget=per_cluster,
        finetune_sample_budget=finetune_budget,
        cluster_counts=k if strategy == "clustered_dreambooth" else None,
        transfer_map=transfer_map,
        sampler_params=SamplerParams(guidance_scale, steps, seed),
        severe=severe,
        per_cluster_transfer=per_cluster_transfer,
    )


# -- backends ---------------------------------------------------------------

class GeneratorBackend(Protocol):
    def fit(self, images: np.ndarray, prompt: PromptSpec): ...

    def sample(self, handle, prompt: str, negative: Optional[str], n: int, params: SamplerParams) -> List[np.ndarray]: ...


@dataclass
class OraclePrior:
    """What the oracle "knows" before seeing any data.

    Words map to visual concepts: class words to shape masks, bias words to
    background colours. ``stereotypes`` pairs each class word with the bias
    word it co-occurs with; a prompt is followed with probability
    ``adherence`` and otherwise the stereotypical background is drawn.
    """

    shapes: Mapping[str, np.ndarray]
    palettes: Mapping[str, np.ndarray]
    fg_color: np.ndarray
    palette_sigma: float = 0.03
    noise_sigma: float = 0.05
    jitter: int = 0
    stereotypes: Mapping[str, str] = field(default_factory=dict)
    adherence: float = 1.0

    @property
    def image_size(self) -> int:
        return next(iter(self.shapes.values())).shape[0]


@dataclass
class FittedHandle:
    class_word: str
    bias_word: str
    bg_mean: np.ndarray
    bg_cov: np.ndarray
    fg_mean: np.ndarray
    fg_cov: np.ndarray
    template: np.ndarray  # centred binary shape
    offset_mean: np.ndarray  # (dy, dx) of the shape centroid relative to the frame centre
    offset_cov: np.ndarray
    offset_range: np.ndarray  # [[min dy, min dx], [max dy, max dx]] seen while fitting
    noise_sigma: float
    n_fit: int


_EMPH = re.compile(r"\(\(([^()]+)\)\)")


def _parse_words(prompt: str, vocab) -> List[str]:
    return [w for w in tokenize_prompt(prompt) if w in vocab]


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((cov + cov.T) / 2)
    return v * np.sqrt(np.clip(w, 0.0, None))


def _shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    return np.roll(np.roll(mask, dy, axis=0), dx, axis=1)


class OracleBackend:
    """Parametric generator: background colour, shape mask, foreground colour, noise.

    ``fidelity="fitted"``: :meth:`fit` estimates Gaussians over the
    background colour, the foreground colour and the shape placement, plus a
    centred shape template, and :meth:`sample` draws from them. A
    double-parenthesised word in the prompt that names a different concept
    than the fitted one re-targets that attribute, carrying the fitted style
    offset over (background) or the fitted placement (shape).

    ``fidelity="global_prior"``: ignores data and renders prompts with the
    prior's own concept of each word.
    """

    def __init__(self, fidelity: str, seed: int, prior: OraclePrior):
        if fidelity not in ("fitted", "global_prior"):
            raise ConfigError(f"unknown oracle fidelity {fidelity!r}")
        self.fidelity = fidelity
        self.seed = seed
        self.prior = prior
        self.fit_calls = 0

    # fitting ---------------------------------------------------------------
    def fit(self, images: np.ndarray, prompt: Optional[PromptSpec] = None) -> Optional[FittedHandle]:
        if self.fidelity == "global_prior":
            logger.warning("fit() ignored: oracle in global_prior mode")
            return None
        self.fit_calls += 1
        x = np.asarray(images, dtype=np.float64)
        n, h, w, c = x.shape
        bg = np.median(x.reshape(n, h * w, c), axis=1)  # background dominates the frame
        dist = np.linalg.norm(x - bg[:, None, None, :], axis=-1)
        # foreground: at least half the contrast of the brightest few percent
        thresh = 0.5 * np.percentile(dist.reshape(n, -1), 97, axis=1)
        masks = dist > thresh[:, None, None]
        fg_means = np.array([x[i][masks[i]].mean(0) if masks[i].any() else self.prior.fg_color for i in range(n)])
        # the median is pulled towards the shape colour; re-estimate on background pixels only
        bg = np.array([x[i][~masks[i]].mean(0) if (~masks[i]).any() else bg[i] for i in range(n)])
        resid = (x - bg[:, None, None, :])[~masks]
        noise = float(1.4826 * np.median(np.abs(resid))) if resid.size else 0.0
        # register every mask on its centroid and average into a template
        centre = np.array([(h - 1) / 2, (w - 1) / 2])
        offsets = np.zeros((n, 2))
        aligned = np.zeros((h, w))
        for i in range(n):
            pts = np.argwhere(masks[i])
            off = pts.mean(0) - centre if len(pts) else np.zeros(2)
            offsets[i] = off
            dy, dx = np.rint(off).astype(int)
            aligned += _shift(masks[i].astype(np.float64), -dy, -dx)
        template = (aligned / n) > 0.5
        ridge = 1e-6 * np.eye(c)
        bg_cov = np.cov(bg, rowvar=False) + ridge if n > 1 else ridge
        fg_cov = np.cov(fg_means, rowvar=False) + ridge if n > 1 else ridge
        off_cov = np.atleast_2d(np.cov(offsets, rowvar=False)) if n > 1 else np.zeros((2, 2))
        rng_off = np.stack([np.floor(offsets.min(0)), np.ceil(offsets.max(0))])
        bias_word = self._nearest_palette(bg.mean(0))
        class_word = self._prompt_class(prompt) or self._nearest_shape(template)
        return FittedHandle(class_word, bias_word, bg.mean(0), bg_cov, fg_means.mean(0), fg_cov,
                            template.astype(np.float64), offsets.mean(0), off_cov, rng_off, noise, n)

    def _nearest_palette(self, color) -> str:
        return min(self.prior.palettes, key=lambda k: np.linalg.norm(np.asarray(self.prior.palettes[k]) - color))

    def _nearest_shape(self, mask) -> str:
        def score(k):
            s = self.prior.shapes[k]
            return -np.abs(s - mask).sum()
        return max(self.prior.shapes, key=score)

    def _prompt_class(self, prompt: Optional[PromptSpec]) -> Optional[str]:
        if prompt is None:
            return None
        words = _parse_words(prompt.positive, self.prior.shapes)
        return words[0] if words else None

    # sampling --------------------------------------------------------------
    def sample(self, handle, prompt: str, negative: Optional[str], n: int, params: SamplerParams) -> List[np.ndarray]:
        if self.fidelity == "global_prior" or handle is None:
            return [self._sample_prior(prompt, params.seed + i) for i in range(n)]
        return [self._sample_fitted(handle, prompt, params.seed + i) for i in range(n)]

    def _render(self, mask, bg, fg, sigma, rng):
        h, w = mask.shape
        img = bg[None, None, :] * (1 - mask[..., None]) + fg[None, None, :] * mask[..., None]
        img = img + sigma * rng.standard_normal((h, w, 3))
        return np.clip(img, 0.0, 1.0).astype(np.float32)

    def _sample_prior(self, prompt: str, seed: int) -> np.ndarray:
        p = self.prior
        rng = np.random.default_rng([self.seed, seed])
        classes = _parse_words(prompt, p.shapes)
        biases = _parse_words(prompt, p.palettes)
        if not classes:
            raise GenerationError(f"prompt {prompt!r} names no known class concept")
        cls = classes[0]
        bias = biases[0] if biases else p.stereotypes.get(cls, next(iter(p.palettes)))
        if biases and rng.random() > p.adherence:
            bias = p.stereotypes.get(cls, bias)
        mask = p.shapes[cls]
        if p.jitter:
            dy, dx = rng.integers(-p.jitter, p.jitter + 1, size=2)
            mask = _shift(mask, dy, dx)
        bg = np.asarray(p.palettes[bias]) + p.palette_sigma * rng.standard_normal(3)
        return self._render(mask, bg, np.asarray(p.fg_color, dtype=np.float64), p.noise_sigma, rng)

    def _sample_fitted(self, hd: FittedHandle, prompt: str, seed: int) -> np.ndarray:
        p = self.prior
        rng = np.random.default_rng([self.seed, seed])
        emphasised = [w.lower() for w in _EMPH.findall(prompt)]
        bg_mean = hd.bg_mean
        for w in emphasised:
            if w in p.palettes and w != hd.bias_word:
                # keep the fitted style offset, swap the hue
                bg_mean = np.asarray(p.palettes[w]) + (hd.bg_mean - np.asarray(p.palettes[hd.bias_word]))
        target_shape = next((w for w in emphasised if w in p.shapes and w != hd.class_word), None)
        mask = p.shapes[target_shape] if target_shape is not None else hd.template
        off = hd.offset_mean + _psd_factor(hd.offset_cov) @ rng.standard_normal(2)
        dy, dx = np.clip(np.rint(off), hd.offset_range[0], hd.offset_range[1]).astype(int)
        mask = _shift(mask, dy, dx)
        bg = bg_mean + _psd_factor(hd.bg_cov) @ rng.standard_normal(3)
        fg = hd.fg_mean + _psd_factor(hd.fg_cov) @ rng.standard_normal(3)
        return self._render(mask, bg, fg, hd.noise_sigma, rng)


def oracle_backend(fidelity: str, seed: int, prior: OraclePrior) -> OracleBackend:
    return OracleBackend(fidelity, seed, prior)


@dataclass
class DiffusionBackendConfig:
    """Settings a real text-to-image backend would be run with."""

    model: str = "CompVis/stable-diffusion-v1-4"
    lora_rank: int = 16
    lora_alpha: int = 16
    train_steps: int = 200
    lr_scheduler: Optional[str] = None
    guidance_scale: float = 7.5
    timesteps: int = 50


class RecordedDiffusionBackend:
    """Adapter stub: records fit/sample requests instead of running a model.

    The recorded jobs can be handed to an external diffusion runner.
    """

    def __init__(self, config: Optional[DiffusionBackendConfig] = None):
        self.config = config or DiffusionBackendConfig()
        self.jobs: List[dict] = []

    def fit(self, images, prompt: PromptSpec):
        job = {"kind": "fit", "n_images": int(len(images)), "prompt": prompt.positive, "config": asdict(self.config)}
        self.jobs.append(job)
        return {"job": len(self.jobs) - 1}

    def sample(self, handle, prompt, negative, n, params: SamplerParams):
        self.jobs.append({"kind": "sample", "handle": handle, "prompt": prompt, "negative": negative,
                          "n": n, "params": asdict(params)})
        return []


# -- generation loop ----------------------------------------------------------

@dataclass
class _Job:
    group: GroupKey
    source: GroupKey
    fit_ids: Optional[List[str]]
    n: int
    cluster_index: Optional[int]
    mode: str


def _jobs(plan: GenerationPlan, ds: GroupedDataset, clusters, rng) -> List[_Job]:
    index = ds.group_index()
    jobs = []
    for g in ds.all_groups():
        source = plan.transfer_map.get(g, g)
        mode = "transfer" if g in plan.transfer_map else "standard"
        if plan.strategy == "vanilla":
            jobs.append(_Job(g, g, None, plan.per_group_budget, None, "standard"))
            continue
        if source not in index:
            raise GenerationError(f"no real images to fit a generator for {g} (source {source})")
        ids = [ds.items[i].id for i in index[source]]
        if plan.strategy == "clustered_dreambooth" and (mode == "standard" or plan.per_cluster_transfer):
            if clusters is None or source not in clusters:
                raise ConfigError(f"clustered strategy needs cluster assignments for {source}")
            assign = clusters[source]
            k = plan.cluster_counts
            if assign.k != k:
                raise ConfigError(f"group {source} has {assign.k} clusters, plan expects {k}")
            for j in range(k):
                jobs.append(_Job(g, source, assign.members(j), plan.per_cluster_budget, j, mode))
            continue
        if plan.strategy in ("lora_per_group", "dreambooth_per_group"):
            n_fit = min(plan.finetune_sample_budget, len(ids))
            ids = sorted(rng.choice(ids, size=n_fit, replace=False).tolist())
        jobs.append(_Job(g, source, ids, plan.per_group_budget, None, mode))
    return jobs


def run_generation(
    plan: GenerationPlan,
    backend: GeneratorBackend,
    ds: GroupedDataset,
    clusters: Optional[Mapping[GroupKey, ClusterAssignment]] = None,
) -> GroupedDataset:
    """Generate the synthetic training set described by ``plan``.

    Item ``i`` of a run is sampled with seed ``base_seed + i``. Each item
    records its strategy, source group, cluster, prompts and seed.
    """
    if plan.strategy == "clustered_dreambooth" and clusters is None:
        raise ConfigError("clustered strategy requires cluster assignments")
    if plan.strategy != "clustered_dreambooth" and clusters is not None:
        raise ConfigError("cluster assignments given for a non-clustered strategy")
    rng = np.random.default_rng([plan.sampler_params.seed, 7])
    by_id = {it.id: i for i, it in enumerate(ds.items)}
    items: List[DatasetItem] = []
    completed: List[str] = []
    counter = plan.sampler_params.seed
    for job in _jobs(plan, ds, clusters, rng):
        if plan.severe and job.fit_ids is not None:
            assert not any(ds.items[by_id[i]].group in plan.transfer_map for i in job.fit_ids)
        spec = render_prompts(plan.dataset_id, plan.strategy, job.group, job.mode)
        label = str(job.group) if job.cluster_index is None else f"{job.group}#{job.cluster_index}"
        try:
            handle = None
            if job.fit_ids is not None:
                fit_spec = render_prompts(plan.dataset_id, plan.strategy, job.source, "standard")
                images = np.stack([ds.items[by_id[i]].load_image(ds.root) for i in job.fit_ids])
                handle = backend.fit(images, fit_spec)
            params = SamplerParams(plan.sampler_params.guidance_scale, plan.sampler_params.steps, counter)
            imgs = backend.sample(handle, spec.positive, spec.negative, job.n, params)
            if len(imgs) != job.n:
                raise RuntimeError(f"backend returned {len(imgs)} images, expected {job.n}")
        except Exception as exc:
            raise GenerationError(f"generation failed for {label}: {exc}", completed, items) from exc
        for i, img in enumerate(imgs):
            suffix = f"c{job.cluster_index}-" if job.cluster_index is not None else ""
            items.append(
                DatasetItem(
                    id=f"syn-{job.group.class_label}-{job.group.bias_label}-{suffix}{i:05d}",
                    image_ref=np.asarray(img, dtype=np.float32),
                    class_label=job.group.class_label,
                    bias_label=job.group.bias_label,
                    split="train",
                    origin="synthetic",
                    provenance={
                        "strategy": plan.strategy,
                        "source_group": str(job.source),
                        "cluster_index": "" if job.cluster_index is None else str(job.cluster_index),
                        "prompt": spec.positive,
                        "negative_prompt": spec.negative or "",
                        "seed": str(counter + i),
                    },
                )
            )
        counter += job.n
        completed.append(label)
    return ds.derive(items)


def needs_clusters(strategy: str) -> bool:
    return strategy == "clustered_dreambooth"


def is_dreambooth(strategy: str) -> bool:
    return strategy in DREAMBOOTH_FAMILY
