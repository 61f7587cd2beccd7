import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fairgen.embed import embed_dataset, toy_backend
from fairgen.errors import ConfigError, SelectionError
from fairgen.filtering import (FilterConfig, ScoredCandidate, combined_score, filter_groups, n_keep, real_centroids,
                               retained_dataset, save_scored_manifest, score_candidates, select_random, select_top,
                               write_scores_csv)
from fairgen.groups import DatasetItem, GroupKey, load_manifest
from fairgen.synth import build_plan, oracle_backend, run_generation
from fairgen.toy import shapeworld_lexicon, shapeworld_prior


def _cands(scores):
    g = GroupKey("a", "b")
    return [ScoredCandidate(DatasetItem(f"id{i:04d}", "x.npy", "a", "b", "train"), s, s, s) for i, s in enumerate(scores)]


def test_select_top_equals_sort_prefix_oracle():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        n = int(rng.integers(1, 60))
        # coarse scores force plenty of ties
        scores = rng.integers(0, 8, n) / 8 if trial % 2 else rng.random(n)
        frac = float(rng.uniform(0.01, 1.0))
        cands = _cands(scores.tolist())
        k = max(1, math.floor(n * frac))
        # oracle: stable sort of ids by descending score, ids were created in ascending order
        order = sorted(range(n), key=lambda i: -scores[i])
        expected = [f"id{i:04d}" for i in order[:k]]
        got = [c.item.id for c in select_top(cands, FilterConfig(keep_fraction=frac))]
        assert got == expected


@settings(max_examples=100)
@given(arrays(np.float64, (100, 4), elements=st.floats(0, 1)))
def test_combined_score_monotone(batch):
    for label, centroid, delta, alpha in batch:
        label, centroid = 2 * label - 1, 2 * centroid - 1
        cfg = FilterConfig(alpha=alpha)
        base = combined_score(label, centroid, cfg)
        assert combined_score(label + delta, centroid, cfg) >= base - 1e-12
        assert combined_score(label, centroid + delta, cfg) >= base - 1e-12
        assert min(label, centroid) - 1e-12 <= base <= max(label, centroid) + 1e-12


def test_n_keep():
    assert n_keep(100, 0.75) == 75
    assert n_keep(3, 0.1) == 1
    assert n_keep(5000, 0.75) == 3750


def test_severe_mode_forces_label_only():
    cfg = FilterConfig(alpha=0.3, mode="severe")
    assert cfg.alpha == 1.0
    assert combined_score(0.2, None, cfg) == 0.2
    with pytest.raises(ConfigError):
        combined_score(0.2, None, FilterConfig(alpha=0.5))


@pytest.mark.parametrize("kw", [dict(alpha=1.5), dict(keep_fraction=0), dict(mode="harsh"), dict(selection="best")])
def test_filter_config_validation(kw):
    with pytest.raises(ConfigError):
        FilterConfig(**kw)


def test_random_selection_count_and_determinism():
    cands = _cands(np.linspace(0, 1, 40).tolist())
    cfg = FilterConfig(selection="random", keep_fraction=0.5, seed=3)
    a = select_random(cands, cfg, GroupKey("a", "b"))
    assert len(a) == 20 and a == select_random(list(reversed(cands)), cfg, GroupKey("a", "b"))
    assert a != select_random(cands, FilterConfig(selection="random", keep_fraction=0.5, seed=4), GroupKey("a", "b"))


def test_empty_candidates():
    with pytest.raises(SelectionError):
        select_top([], FilterConfig())
    with pytest.raises(SelectionError):
        filter_groups({GroupKey("a", "b"): []}, FilterConfig())


@pytest.fixture(scope="module")
def scored_toy(small_cfg, small_toy):
    train = small_toy.split("train")
    emb = toy_backend(0, 768, shapeworld_lexicon(small_cfg))
    syn = run_generation(build_plan(train, "vanilla", False, 20),
                         oracle_backend("global_prior", 0, shapeworld_prior(small_cfg)), train)
    return train, syn, emb


def test_score_and_filter_toy(scored_toy, tmp_path):
    train, syn, emb = scored_toy
    cfg = FilterConfig()
    scored = score_candidates(syn, emb, real_centroids(train, embed_dataset(train, emb)), cfg)
    kept = filter_groups(scored, cfg)
    assert all(len(v) == 15 for v in kept.values())
    for cs in scored.values():
        for c in cs:
            assert c.clip_score == pytest.approx(0.5 * c.clip_label + 0.5 * c.clip_centroid)
    ret = retained_dataset(syn, kept)
    assert len(ret) == 60
    man = load_manifest(save_scored_manifest(syn, scored, kept, tmp_path / "scored.csv"))
    assert sum(it.provenance["retained"] == "true" for it in man.items) == 60
    lines = write_scores_csv(scored, kept, tmp_path / "scores.csv").read_text().splitlines()
    assert lines[0] == "id,group,clip_label,clip_centroid,clip_score,retained" and len(lines) == 81


def test_label_score_prefers_the_right_class(scored_toy):
    train, syn, emb = scored_toy
    from fairgen.prompts import label_prompt
    from fairgen.embed import cosine_similarity
    right = wrong = 0
    for it in train.items:
        e = emb.embed_image(it.image_ref)
        other = "cross" if it.class_label == "square" else "square"
        if cosine_similarity(e, emb.embed_text(label_prompt(it.class_label))) > cosine_similarity(e, emb.embed_text(label_prompt(other))):
            right += 1
        else:
            wrong += 1
    assert right / (right + wrong) > 0.95


def test_missing_centroid_needs_severe_mode(scored_toy):
    _, syn, emb = scored_toy
    with pytest.raises(ConfigError):
        score_candidates(syn, emb, {}, FilterConfig(alpha=0.5))
    scored = score_candidates(syn, emb, {}, FilterConfig(mode="severe"))
    assert all(c.clip_centroid is None for cs in scored.values() for c in cs)
