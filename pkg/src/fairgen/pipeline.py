"""Experiment configs, presets and the cached stage runner behind the CLI.

A run lives in ``<root>/<config-hash>/``. The hash covers the whole resolved
config including the seed, so every seed gets its own directory. Each stage
writes into its own sub-directory plus a ``stage.json`` marker; a stage whose
marker and outputs exist is a cache hit. ``index.json`` at the run root lists
every stage's outputs with their sha256.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .cluster import ClusterAssignment, cluster_count_rule, kmeans_per_group, load_assignments, save_assignments
from .embed import embed_dataset, load_embeddings, save_embeddings, toy_backend
from .errors import ConfigError, DependencyError, FairgenError, NumericalError
from .filtering import (FilterConfig, filter_groups, real_centroids, retained_dataset, save_scored_manifest,
                        score_candidates, write_scores_csv)
from .groups import GroupedDataset, SplitSpec, construct_biased_split, infer_alignment, load_manifest, save_manifest
from .metrics import GroupMetrics, distribution_report, dump_metrics, emit_report, evaluate
from .model import ClassifierModel, load_checkpoint, save_checkpoint
from .synth import GenerationPlan, build_plan, oracle_backend, run_generation
from .toy import ShapeWorldConfig, generate_shapeworld, shapeworld_lexicon, shapeworld_prior
from .training import (STAGE2_VARIANTS, GDROConfig, TrainConfig, Trajectory, erm_baseline, gdro_baseline,
                       gdro_finetune, new_model, single_stage, stage1_pretrain, stage2_finetune)

logger = logging.getLogger(__name__)

STAGES = ("split", "embed", "cluster", "generate", "score", "filter", "pretrain", "finetune", "evaluate", "report")
METHODS = ("two_stage", "erm", "gdro", "single_stage")
BACKENDS = ("fitted", "global_prior")
RUNS_ENV = "FAIRGEN_RUNS"
HASH_LEN = 12


# -- config -----------------------------------------------------------------

@dataclass(frozen=True)
class DatasetBlock:
    source: str = "toy"  # "toy" or "manifest"
    toy: ShapeWorldConfig = field(default_factory=ShapeWorldConfig)
    manifest: Optional[str] = None
    split: Optional[SplitSpec] = None  # re-bias the manifest's train split
    dataset_id: str = "shapeworld"


@dataclass(frozen=True)
class GenerationBlock:
    strategy: str = "lora_per_group"
    M: int = 500
    severe: bool = False
    backend: str = "fitted"
    k: Optional[int] = None
    embed_dim: int = 768


@dataclass(frozen=True)
class TrainBlock:
    method: str = "two_stage"
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.003))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.05))
    variant: str = "LLR_all"
    gdro_finetune: bool = False
    gdro: GDROConfig = field(default_factory=GDROConfig)
    balanced: bool = True  # single-stage only


@dataclass(frozen=True)
class EvalBlock:
    formats: Tuple[str, ...] = ("markdown", "csv")
    distribution: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    label: str = "pipeline"
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    generation: GenerationBlock = field(default_factory=GenerationBlock)
    filter: FilterConfig = field(default_factory=FilterConfig)
    train: TrainBlock = field(default_factory=TrainBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)
    seeds: Tuple[int, ...] = (0,)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if self.train.method not in METHODS:
            raise ConfigError(f"unknown method {self.train.method!r}")
        if self.train.variant not in STAGE2_VARIANTS:
            raise ConfigError(f"unknown stage-2 variant {self.train.variant!r}")
        if self.generation.backend not in BACKENDS:
            raise ConfigError(f"unknown generator backend {self.generation.backend!r}")
        if self.dataset.source not in ("toy", "manifest"):
            raise ConfigError(f"unknown dataset source {self.dataset.source!r}")
        if self.dataset.source == "manifest" and not self.dataset.manifest:
            raise ConfigError("manifest source needs a manifest path")
        if self.generation.severe and self.filter.mode != "severe":
            raise ConfigError("severe generation needs the severe filter mode (alpha=1)")

    @property
    def uses_synthetic(self) -> bool:
        return self.train.method in ("two_stage", "single_stage")

    def for_seed(self, seed: int) -> "ExperimentConfig":
        """Single-seed copy with every seed field set to ``seed``."""
        ds = replace(self.dataset, toy=replace(self.dataset.toy, seed=seed))
        if ds.split is not None:
            ds = replace(ds, split=replace(ds.split, seed=seed))
        tr = replace(self.train, pretrain=replace(self.train.pretrain, seed=seed),
                     finetune=replace(self.train.finetune, seed=seed))
        return replace(self, dataset=ds, train=tr, filter=replace(self.filter, seed=seed), seeds=(seed,))

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.dataset.split is not None:
            d["dataset"]["split"] = self.dataset.split.to_dict()
        d["eval"]["formats"] = list(self.eval.formats)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = dict(d)
        try:
            ds = dict(d.get("dataset", {}))
            if "toy" in ds:
                ds["toy"] = _build(ShapeWorldConfig, ds["toy"])
            if ds.get("split") is not None:
                ds["split"] = SplitSpec.from_dict(ds["split"])
            tr = dict(d.get("train", {}))
            for k in ("pretrain", "finetune"):
                if k in tr:
                    tr[k] = _build(TrainConfig, tr[k], base=getattr(TrainBlock(), k))
            if "gdro" in tr:
                tr["gdro"] = _build(GDROConfig, tr["gdro"])
            ev = dict(d.get("eval", {}))
            if "formats" in ev:
                ev["formats"] = tuple(ev["formats"])
            return _build(cls, {
                **d,
                "dataset": _build(DatasetBlock, ds),
                "generation": _build(GenerationBlock, d.get("generation", {})),
                "filter": _build(FilterConfig, d.get("filter", {})),
                "train": _build(TrainBlock, tr),
                "eval": _build(EvalBlock, ev),
                "seeds": tuple(d.get("seeds", (0,))),
            })
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from None

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:HASH_LEN]


def _build(cls, values, base=None):
    """Dataclass from a dict, rejecting unknown keys; ``base`` supplies defaults."""
    if isinstance(values, cls):
        return values
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} key(s): {unknown}")
    if base is not None:
        return replace(base, **values)
    return cls(**values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    return path


def runs_root(root=None) -> Path:
    return Path(root or os.environ.get(RUNS_ENV) or "runs")


# -- presets ----------------------------------------------------------------

def _with(cfg: ExperimentConfig, label: str, **blocks) -> ExperimentConfig:
    """Replace fields inside named blocks: ``_with(cfg, "x", filter={"alpha": 1})``."""
    out = {}
    for name, changes in blocks.items():
        cur = getattr(cfg, name)
        out[name] = replace(cur, **changes) if isinstance(changes, dict) else changes
    return replace(cfg, label=label, **out)


def _severe(cfg: ExperimentConfig, label: str, strategy: str = "lora_per_group") -> ExperimentConfig:
    return _with(cfg, label, dataset={"toy": replace(cfg.dataset.toy, bias_ratio=0.999)},
                 generation={"strategy": strategy, "severe": True}, filter={"mode": "severe"})


def _baselines(cfg):
    return [_with(cfg, "ERM", train={"method": "erm"}), _with(cfg, "GDRO", train={"method": "gdro"})]


def _table1(cfg):
    return _baselines(cfg) + [
        _with(cfg, "Vanilla (global prior)", generation={"strategy": "vanilla", "backend": "global_prior"}),
        _with(cfg, "LoRA per group", generation={"strategy": "lora_per_group"}),
        _with(cfg, "Dreambooth per group", generation={"strategy": "dreambooth_per_group"}),
        _with(cfg, "Clustered Dreambooth", generation={"strategy": "clustered_dreambooth"}),
    ]


def _table1_severe(cfg):
    sev = _with(cfg, "", dataset={"toy": replace(cfg.dataset.toy, bias_ratio=0.999)})
    return _baselines(sev) + [
        _severe(cfg, "LoRA per group (transfer)"),
        _severe(cfg, "Dreambooth per group (transfer)", "dreambooth_per_group"),
        _severe(cfg, "Clustered Dreambooth (transfer)", "clustered_dreambooth"),
    ]


def _table3(cfg):
    return [
        _with(cfg, "GDRO", train={"method": "gdro"}),
        _with(cfg, "Clustered Dreambooth (pretraining) + GDRO",
              generation={"strategy": "clustered_dreambooth"}, train={"gdro_finetune": True}),
    ]


def _table4(cfg):
    return [
        _with(cfg, "alpha=1", filter={"alpha": 1.0}),
        _with(cfg, "alpha=0", filter={"alpha": 0.0}),
        _with(cfg, "alpha=0.5", filter={"alpha": 0.5}),
        _with(cfg, "Random sampling", filter={"selection": "random"}),
    ]


def _table5(cfg):
    return [
        _with(cfg, "Single stage (all data)", train={"method": "single_stage", "balanced": False}),
        _with(cfg, "Single stage (balanced)", train={"method": "single_stage", "balanced": True}),
        _with(cfg, "Two stage", train={"method": "two_stage"}),
    ]


def _table6(cfg):
    return [_with(cfg, f"keep {int(100 * p)}%", filter={"keep_fraction": p}) for p in (0.5, 0.75, 1.0)]


def _table7(cfg):
    rows = []
    for b1 in (1.0, 0.5):
        for b2 in (1.0, 0.5):
            rows.append(_with(cfg, f"beta1={b1:g} beta2={b2:g}", train={
                "pretrain": replace(cfg.train.pretrain, beta=b1),
                "finetune": replace(cfg.train.finetune, beta=b2)}))
    return rows


def _group_balance(cfg):
    # full finetuning is less stable on a small subsample, so it keeps the pretraining rate
    ft_b = replace(cfg.train.finetune, learning_rate=cfg.train.pretrain.learning_rate)
    return [
        _with(cfg, "LLR_all", train={"variant": "LLR_all"}),
        _with(cfg, "LLR_b", train={"variant": "LLR_b"}),
        _with(cfg, "FT_b", train={"variant": "FT_b", "finetune": ft_b}),
    ]


def _bias_sweep(cfg):
    rows = []
    for r in (0.5, 0.8, 0.9, 0.95, 0.99):
        toy = replace(cfg.dataset.toy, bias_ratio=r)
        rows.append(_with(cfg, f"ERM r={r}", dataset={"toy": toy}, train={"method": "erm"}))
        rows.append(_with(cfg, f"Pipeline r={r}", dataset={"toy": toy}))
    return rows


PRESETS: Dict[str, Callable[[ExperimentConfig], List[ExperimentConfig]]] = {
    "table1": _table1,
    "table1_severe": _table1_severe,
    "table3_gdro": _table3,
    "table4_alpha_ablation": _table4,
    "table5_single_stage": _table5,
    "table6_selection": _table6,
    "table7_loss_ablation": _table7,
    "table_group_balance": _group_balance,
    "bias_sweep": _bias_sweep,
    "erm": lambda c: [_with(c, "ERM", train={"method": "erm"})],
    "gdro": lambda c: [_with(c, "GDRO", train={"method": "gdro"})],
    "vanilla": lambda c: [_with(c, "Vanilla (global prior)",
                                generation={"strategy": "vanilla", "backend": "global_prior"})],
    "fitted": lambda c: [_with(c, "LoRA per group", generation={"strategy": "lora_per_group"})],
    "dreambooth": lambda c: [_with(c, "Dreambooth per group", generation={"strategy": "dreambooth_per_group"})],
    "clustered": lambda c: [_with(c, "Clustered Dreambooth", generation={"strategy": "clustered_dreambooth"})],
    "severe": lambda c: [_severe(c, "LoRA per group (transfer)")],
}


def expand_preset(name: Optional[str], base: Optional[ExperimentConfig] = None) -> List[ExperimentConfig]:
    base = base or ExperimentConfig()
    if name is None:
        return [base]
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name](base)


# -- in-memory stage functions ------------------------------------------------

def load_real(cfg: ExperimentConfig) -> GroupedDataset:
    if cfg.dataset.source == "toy":
        return generate_shapeworld(cfg.dataset.toy)
    ds = load_manifest(cfg.dataset.manifest)
    ds = GroupedDataset(ds.items, ds.classes, ds.biases, infer_alignment(ds.items), root=ds.root)
    if cfg.dataset.split is not None:
        train = construct_biased_split(ds.split("train"), cfg.dataset.split)
        ds = ds.derive(list(train.items) + [it for it in ds.items if it.split != "train"])
    return ds


def make_embedder(cfg: ExperimentConfig):
    seed = cfg.seeds[0]
    lexicon = shapeworld_lexicon(cfg.dataset.toy) if cfg.dataset.source == "toy" else None
    return toy_backend(seed, cfg.generation.embed_dim, lexicon)


def make_generator(cfg: ExperimentConfig):
    if cfg.dataset.source != "toy":
        raise ConfigError("the oracle generator only knows the toy benchmark; supply a diffusion backend")
    return oracle_backend(cfg.generation.backend, cfg.seeds[0], shapeworld_prior(cfg.dataset.toy))


def make_plan(cfg: ExperimentConfig, train: GroupedDataset) -> GenerationPlan:
    g = cfg.generation
    return build_plan(train, g.strategy, g.severe, g.M, cfg.dataset.dataset_id, k=g.k, seed=cfg.seeds[0])


def cluster_real(cfg, train, embs, plan) -> Optional[Dict]:
    if plan.strategy != "clustered_dreambooth":
        return None
    sources = sorted({plan.transfer_map.get(g, g) for g in train.all_groups()})
    return kmeans_per_group(train, embs, plan.cluster_counts, cfg.seeds[0], groups=sources)


def generate(cfg, train, clusters, plan) -> GroupedDataset:
    return run_generation(plan, make_generator(cfg), train, clusters)


def score_and_filter(cfg, train, synth, embedder, real_embs):
    synth_embs = embed_dataset(synth, embedder)
    cents = real_centroids(train, real_embs) if cfg.filter.alpha < 1.0 else {}
    scored = score_candidates(synth, embedder, cents, cfg.filter, synth_embs)
    kept = filter_groups(scored, cfg.filter)
    return scored, kept, retained_dataset(synth, kept), synth_embs


def train_final(cfg: ExperimentConfig, train: GroupedDataset, kept: Optional[GroupedDataset],
                pretrained: Optional[ClassifierModel], traj: Trajectory) -> ClassifierModel:
    t = cfg.train
    if t.method == "erm":
        return erm_baseline(train, t.finetune, traj)
    if t.method == "gdro":
        return gdro_baseline(train, t.finetune, t.gdro, traj)
    if t.method == "single_stage":
        return single_stage(train, kept, t.pretrain, t.balanced, traj)
    if t.gdro_finetune:
        return gdro_finetune(pretrained, train, t.finetune, t.gdro, trajectory=traj)
    return stage2_finetune(pretrained, train, t.variant, t.finetune, traj)


@dataclass
class RunResult:
    config: ExperimentConfig
    metrics: GroupMetrics
    stage1_metrics: Optional[GroupMetrics] = None
    frechet: Dict = field(default_factory=dict)


def run_experiment(cfg: ExperimentConfig, seed: Optional[int] = None) -> RunResult:
    """Whole pipeline in memory, nothing written to disk."""
    cfg = cfg.for_seed(cfg.seeds[0] if seed is None else seed)
    ds = load_real(cfg)
    train, test = ds.split("train"), ds.split("test")
    kept, pre, s1, fd = None, None, None, {}
    if cfg.uses_synthetic:
        embedder = make_embedder(cfg)
        real_embs = embed_dataset(train, embedder)
        plan = make_plan(cfg, train)
        synth = generate(cfg, train, cluster_real(cfg, train, real_embs, plan), plan)
        _, _, kept, synth_embs = score_and_filter(cfg, train, synth, embedder, real_embs)
        if cfg.eval.distribution:
            fd = _safe_frechet(train, synth, embedder, real_embs, synth_embs)
        if cfg.train.method == "two_stage":
            pre = stage1_pretrain(new_model(kept, cfg.train.pretrain), kept, cfg.train.pretrain)
            s1 = evaluate(pre, test)
    model = train_final(cfg, train, kept, pre, Trajectory())
    return RunResult(cfg, evaluate(model, test), s1, fd)


def _safe_frechet(real, synth, embedder, real_embs, synth_embs) -> Dict:
    # groups with a single real image (severe bias) have no covariance to compare
    sizes = real.group_sizes()
    ok = real.derive([it for it in real.items if sizes[it.group] >= 2])
    return distribution_report(ok, synth, embedder, real_embs, synth_embs)


# -- on-disk stage runner ---------------------------------------------------

DEPENDENCIES = {
    "split": (),
    "embed": ("split",),
    "cluster": ("embed",),
    "generate": ("split", "cluster"),
    "score": ("generate", "embed"),
    "filter": ("score",),
    "pretrain": ("filter",),
    "finetune": ("split", "pretrain"),
    "evaluate": ("finetune",),
    "report": ("evaluate",),
}


class RunDir:
    def __init__(self, cfg: ExperimentConfig, root=None):
        if len(cfg.seeds) != 1:
            raise ConfigError("a run directory holds exactly one seed")
        self.cfg = cfg
        self.hash = cfg.hash()
        self.seed = cfg.seeds[0]
        self.path = runs_root(root) / self.hash
        self._cache: Dict[str, object] = {}

    def stage_dir(self, stage: str) -> Path:
        return self.path / stage

    def marker(self, stage: str) -> Path:
        return self.stage_dir(stage) / "stage.json"

    def done(self, stage: str) -> bool:
        m = self.marker(stage)
        if not m.exists():
            return False
        info = json.loads(m.read_text())
        return all((self.stage_dir(stage) / o).exists() for o in info["outputs"])

    def stamp(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed}

    def finish(self, stage: str, outputs: Sequence[str], skipped: bool = False):
        info = {"stage": stage, **self.stamp(), "outputs": sorted(outputs), "skipped": skipped}
        self.marker(stage).write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
        self._update_index(stage, outputs)

    def _update_index(self, stage, outputs):
        idx_path = self.path / "index.json"
        idx = json.loads(idx_path.read_text()) if idx_path.exists() else {**self.stamp(), "stages": {}}
        idx["label"] = self.cfg.label
        idx["stages"][stage] = {
            o: hashlib.sha256((self.stage_dir(stage) / o).read_bytes()).hexdigest() for o in sorted(outputs)
        }
        idx_path.write_text(json.dumps(idx, indent=1, sort_keys=True) + "\n")

    def require(self, stage: str, needed_by: str):
        if not self.done(stage):
            raise DependencyError(f"stage {needed_by!r} needs the output of {stage!r}; run `fairgen {stage}` first")


def _skipped(cfg: ExperimentConfig, stage: str) -> bool:
    if stage in ("embed", "cluster", "generate", "score", "filter"):
        return not cfg.uses_synthetic or (stage == "cluster" and cfg.generation.strategy != "clustered_dreambooth")
    if stage == "pretrain":
        return cfg.train.method != "two_stage"
    return False


def _dataset_meta(ds: GroupedDataset) -> dict:
    return {"classes": list(ds.classes), "biases": list(ds.biases),
            "alignment": {str(g): v for g, v in sorted(ds.alignment_map.items())}}


def _load_ds(run: RunDir, stage: str, name: str) -> GroupedDataset:
    key = f"{stage}/{name}"
    if key not in run._cache:
        from .groups import GroupKey
        meta = json.loads((run.stage_dir("split") / "dataset.json").read_text())
        align = {GroupKey.parse(k): v for k, v in meta["alignment"].items()}
        run._cache[key] = load_manifest(run.stage_dir(stage) / name, alignment=align,
                                        classes=meta["classes"], biases=meta["biases"])
    return run._cache[key]


def _write_json(path: Path, doc) -> str:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path.name


def run_stage(stage: str, cfg: ExperimentConfig, root=None, run: Optional[RunDir] = None) -> Path:
    """Run one stage for a single-seed config; returns its directory. Cached if already done."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    run = run or RunDir(cfg, root)
    out = run.stage_dir(stage)
    if run.done(stage):
        logger.info("%s: cache hit in %s", stage, out)
        return out
    for dep in DEPENDENCIES[stage]:
        if not _skipped(cfg, dep):
            run.require(dep, stage)
    out.mkdir(parents=True, exist_ok=True)
    if _skipped(cfg, stage):
        run.finish(stage, [], skipped=True)
        return out
    outputs = _STAGE_FUNCS[stage](run, out)
    run.finish(stage, outputs)
    return out


def _stage_split(run: RunDir, out: Path) -> List[str]:
    cfg = run.cfg
    ds = load_real(cfg)
    save_config(cfg, out / "config.json")
    _write_json(out / "dataset.json", {**run.stamp(), **_dataset_meta(ds)})
    save_manifest(ds, out / "manifest.csv")
    return ["config.json", "dataset.json", "manifest.csv"]


def _train_split(run):
    return _load_ds(run, "split", "manifest.csv").split("train")


def _stage_embed(run: RunDir, out: Path) -> List[str]:
    save_embeddings(out / "real_train.npz", embed_dataset(_train_split(run), make_embedder(run.cfg)))
    return ["real_train.npz"]


def _stage_cluster(run: RunDir, out: Path) -> List[str]:
    train = _train_split(run)
    plan = make_plan(run.cfg, train)
    embs = load_embeddings(run.stage_dir("embed") / "real_train.npz")
    save_assignments(out / "assignments.json", cluster_real(run.cfg, train, embs, plan))
    return ["assignments.json"]


def _stage_generate(run: RunDir, out: Path) -> List[str]:
    train = _train_split(run)
    plan = make_plan(run.cfg, train)
    clusters = None
    if plan.strategy == "clustered_dreambooth":
        clusters = load_assignments(run.stage_dir("cluster") / "assignments.json")
    synth = generate(run.cfg, train, clusters, plan)
    _write_json(out / "plan.json", {**run.stamp(), "plan": plan.to_dict()})
    save_manifest(synth, out / "synthetic.csv")
    return ["plan.json", "synthetic.csv"]


def _stage_score(run: RunDir, out: Path) -> List[str]:
    cfg = run.cfg
    train = _train_split(run)
    synth = _load_ds(run, "generate", "synthetic.csv")
    embedder = make_embedder(cfg)
    real_embs = load_embeddings(run.stage_dir("embed") / "real_train.npz")
    scored, kept, _, synth_embs = score_and_filter(cfg, train, synth, embedder, real_embs)
    save_embeddings(out / "synthetic.npz", synth_embs)
    save_scored_manifest(synth, scored, kept, out / "scored.csv")
    write_scores_csv(scored, kept, out / "scores.csv")
    names = ["synthetic.npz", "scored.csv", "scores.csv"]
    if cfg.eval.distribution:
        fd = _safe_frechet(train, synth, embedder, real_embs, synth_embs)
        names.append(_write_json(out / "frechet.json", {**run.stamp(), "frechet": {str(g): v for g, v in fd.items()}}))
    return names


def _stage_filter(run: RunDir, out: Path) -> List[str]:
    scored = _load_ds(run, "score", "scored.csv")
    kept = scored.derive([it for it in scored.items if it.provenance.get("retained") == "true"])
    save_manifest(kept, out / "retained.csv")
    _write_json(out / "summary.json", {**run.stamp(), "retained": {str(g): n for g, n in sorted(kept.group_sizes().items())}})
    return ["retained.csv", "summary.json"]


def _stage_pretrain(run: RunDir, out: Path) -> List[str]:
    cfg = run.cfg.train.pretrain
    kept = _load_ds(run, "filter", "retained.csv")
    traj = Trajectory()
    model = _guard(lambda: stage1_pretrain(new_model(kept, cfg), kept, cfg, traj), traj, out)
    save_checkpoint(model, out / "model", run.stamp())
    traj.to_csv(out / "trajectory.csv")
    return ["model.npz", "model.json", "trajectory.csv"]


def _stage_finetune(run: RunDir, out: Path) -> List[str]:
    cfg = run.cfg
    train = _train_split(run)
    pre = load_checkpoint(run.stage_dir("pretrain") / "model") if cfg.train.method == "two_stage" else None
    kept = _load_ds(run, "filter", "retained.csv") if cfg.train.method == "single_stage" else None
    traj = Trajectory()
    model = _guard(lambda: train_final(cfg, train, kept, pre, traj), traj, out)
    meta = dict(run.stamp())
    if getattr(model, "gdro_weights", None):
        meta["gdro_weights"] = model.gdro_weights
    save_checkpoint(model, out / "model", meta)
    traj.to_csv(out / "trajectory.csv")
    return ["model.npz", "model.json", "trajectory.csv"]


def _guard(fn, traj: Trajectory, out: Path):
    try:
        return fn()
    except NumericalError:
        traj.to_csv(out / "trajectory.csv")
        raise


def _stage_evaluate(run: RunDir, out: Path) -> List[str]:
    test = _load_ds(run, "split", "manifest.csv").split("test")
    extra = {**run.stamp(), "label": run.cfg.label}
    dump_metrics(evaluate(load_checkpoint(run.stage_dir("finetune") / "model"), test), out / "metrics.json", extra)
    names = ["metrics.json"]
    if run.cfg.train.method == "two_stage":
        s1 = evaluate(load_checkpoint(run.stage_dir("pretrain") / "model"), test)
        names.append(dump_metrics(s1, out / "stage1_metrics.json", extra).name)
    return names


def _stage_report(run: RunDir, out: Path) -> List[str]:
    m = load_metrics(run.stage_dir("evaluate") / "metrics.json")
    names = []
    for fmt in run.cfg.eval.formats:
        ext = "md" if fmt == "markdown" else fmt
        (out / f"report.{ext}").write_text(report_header(run.hash, [run.seed], fmt) + emit_report([(run.cfg.label, m)], fmt))
        names.append(f"report.{ext}")
    return names


_STAGE_FUNCS = {
    "split": _stage_split, "embed": _stage_embed, "cluster": _stage_cluster, "generate": _stage_generate,
    "score": _stage_score, "filter": _stage_filter, "pretrain": _stage_pretrain, "finetune": _stage_finetune,
    "evaluate": _stage_evaluate, "report": _stage_report,
}


def report_header(config_hash: str, seeds: Sequence[int], fmt: str) -> str:
    text = f"config {config_hash} seeds {','.join(map(str, seeds))}"
    return f"# {text}\n" if fmt == "csv" else f"<!-- {text} -->\n"


def strip_header(text: str) -> str:
    return "".join(ln for ln in text.splitlines(keepends=True) if not ln.startswith(("#", "<!--")))


def load_metrics(path) -> GroupMetrics:
    return GroupMetrics.from_dict(json.loads(Path(path).read_text())["metrics"])


def run_pipeline(cfg: ExperimentConfig, root=None, until: str = "report") -> Path:
    """Every stage up to ``until`` for each seed; returns the last run directory."""
    last = None
    for seed in cfg.seeds:
        run = RunDir(cfg.for_seed(seed), root)
        for stage in STAGES[: STAGES.index(until) + 1]:
            run_stage(stage, run.cfg, run=run)
        last = run.path
    return last


# -- matrix -----------------------------------------------------------------

@dataclass
class MatrixResult:
    report: str
    runs: List[Tuple[str, GroupMetrics]]
    failures: List[dict]
    path: Path


def run_matrix(configs: Sequence[ExperimentConfig], seeds: Sequence[int], root=None,
               fmt: str = "markdown", plots: bool = False) -> MatrixResult:
    """Every config for every seed; failed cells are recorded and skipped."""
    if not seeds:
        raise ConfigError("seed list is empty")
    if not configs:
        raise ConfigError("no experiments to run")
    runs, failures = [], []
    for cfg in configs:
        for seed in seeds:
            try:
                path = run_pipeline(replace(cfg, seeds=(seed,)), root, until="evaluate")
                runs.append((cfg.label, load_metrics(path / "evaluate" / "metrics.json")))
            except FairgenError as exc:
                logger.error("cell %r seed %d failed: %s", cfg.label, seed, exc)
                failures.append({"label": cfg.label, "seed": seed, "error": type(exc).__name__, "message": str(exc)})
    key = hashlib.sha256(json.dumps([c.for_seed(0).canonical_json() for c in configs] + [list(seeds)]).encode())
    mhash = key.hexdigest()[:HASH_LEN]
    out = runs_root(root) / f"matrix-{mhash}"
    out.mkdir(parents=True, exist_ok=True)
    report = report_header(mhash, seeds, fmt) + (emit_report(runs, fmt) if runs else "")
    ext = "md" if fmt == "markdown" else fmt
    (out / f"report.{ext}").write_text(report)
    _write_json(out / "failures.json", {"config_hash": mhash, "seeds": list(seeds), "failures": failures})
    if plots and runs:
        plot_matrix(runs, configs, out)
    return MatrixResult(report, runs, failures, out)


def plot_matrix(runs, configs, out: Path) -> List[Path]:
    """Static PNGs: WGA per method, and WGA against bias ratio when it varies."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = list(dict.fromkeys(lbl for lbl, _ in runs))
    wga = {lbl: [m.wga for l2, m in runs if l2 == lbl] for lbl in labels}
    paths = []
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 3.5))
    ax.bar(range(len(labels)), [100 * np.mean(wga[l]) for l in labels],
           yerr=[100 * np.std(wga[l]) for l in labels], capsize=3)
    ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("worst-group accuracy (%)")
    fig.tight_layout()
    paths.append(out / "wga_by_method.png")
    fig.savefig(paths[-1], dpi=100)
    plt.close(fig)
    ratio = {c.label: c.dataset.toy.bias_ratio for c in configs}
    if len(set(ratio.values())) > 1:
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        series: Dict[str, List[Tuple[float, float]]] = {}
        for lbl in labels:
            series.setdefault(lbl.split(" r=")[0], []).append((ratio[lbl], 100 * np.mean(wga[lbl])))
        for name, pts in series.items():
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
        ax.set_xlabel("bias ratio")
        ax.set_ylabel("worst-group accuracy (%)")
        ax.legend(fontsize=8)
        fig.tight_layout()
        paths.append(out / "wga_by_bias_ratio.png")
        fig.savefig(paths[-1], dpi=100)
        plt.close(fig)
    return paths
