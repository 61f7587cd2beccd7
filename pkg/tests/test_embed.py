import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fairgen.embed import (cosine_similarity, frechet_distance, frechet_distance_from_stats, group_centroid,
                           load_embeddings, save_embeddings, toy_backend)
from fairgen.errors import FairgenError, NumericalError, UndefinedSimilarityError
from fairgen.groups import GroupKey

from oracles import axis_design


def testaxis_design_covariance():
    assert np.allclose(np.cov(axis_design([1, 4]), rowvar=False), np.diag([1, 4]))


def test_frechet_identical_sets():
    x = np.random.default_rng(0).normal(size=(50, 6))
    assert frechet_distance(x, x) == pytest.approx(0.0, abs=1e-6)


def test_frechet_shifted_unit_variance():
    a = np.array([-1.0, 1.0]) / np.sqrt(2)  # sample variance 1
    assert frechet_distance(a, a + 1.0) == pytest.approx(1.0, abs=1e-6)
    assert frechet_distance_from_stats([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(1.0, abs=1e-6)


def test_frechet_commuting_diagonal():
    # (1 - 3)^2 + (2 - 1)^2
    assert frechet_distance_from_stats(np.zeros(2), np.diag([1.0, 4.0]), np.zeros(2), np.diag([9.0, 1.0])) == pytest.approx(5.0, abs=1e-6)
    assert frechet_distance(axis_design([1, 4]), axis_design([9, 1])) == pytest.approx(5.0, abs=1e-6)


@given(arrays(np.float64, (8, 3), elements=st.floats(-5, 5)), arrays(np.float64, (6, 3), elements=st.floats(-5, 5)))
def test_frechet_symmetric_and_non_negative(a, b):
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0
    assert ab == pytest.approx(ba, rel=1e-6, abs=1e-6)


def test_frechet_singular_covariance_is_finite():
    # rank-deficient covariances: 3 points in 5 dims
    rng = np.random.default_rng(1)
    v = frechet_distance(rng.normal(size=(3, 5)), rng.normal(size=(3, 5)))
    assert np.isfinite(v) and v >= 0


def test_frechet_non_psd_retries_then_fails(caplog):
    caplog.set_level(logging.WARNING, logger="fairgen")
    bad = -np.eye(2)
    with pytest.raises(NumericalError):
        frechet_distance_from_stats(np.zeros(2), bad, np.zeros(2), np.eye(2))
    assert "adding" in caplog.text


def test_frechet_needs_two_samples():
    with pytest.raises(FairgenError):
        frechet_distance(np.zeros((1, 2)), np.zeros((3, 2)))


def test_cosine_similarity():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [-2, 0]) == -1.0
    assert cosine_similarity([1, 0], [0, 3]) == pytest.approx(0.0)
    with pytest.raises(UndefinedSimilarityError):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ValueError):
        cosine_similarity([1, 0], [1, 0, 0])


def test_group_centroid_is_raw_mean():
    s = group_centroid([np.array([2.0, 0.0]), np.array([0.0, 4.0])], GroupKey("a", "b"))
    assert np.allclose(s.centroid, [1.0, 2.0]) and s.count == 2
    with pytest.raises(FairgenError):
        group_centroid([], GroupKey("a", "b"))


def test_toy_backend_unit_norm_and_deterministic():
    rng = np.random.default_rng(0)
    img = rng.random((4, 4, 3))
    a, b = toy_backend(1, 16), toy_backend(1, 16)
    assert np.allclose(a.embed_image(img), b.embed_image(img))
    assert np.linalg.norm(a.embed_image(img)) == pytest.approx(1.0)
    assert np.allclose(a.embed_images(img[None])[0], a.embed_image(img))
    assert np.linalg.norm(a.embed_text("photo of a cat")) == pytest.approx(1.0)


def test_toy_backend_projection_is_isometric_when_wide():
    be = toy_backend(0, 48)
    x, y = np.random.default_rng(2).random((2, 4, 4, 3))
    assert cosine_similarity(be.embed_image(x), be.embed_image(y)) == pytest.approx(cosine_similarity(x, y))


def test_lexicon_word_anchors_near_its_prototype():
    proto = np.random.default_rng(3).random((4, 4, 3))
    be = toy_backend(0, 48, {"blob": proto}, text_mix=0.1)
    assert cosine_similarity(be.embed_text("Photo of a blob"), be.embed_image(proto)) > 0.95


@pytest.mark.parametrize("suffix", [".npz", ".json"])
def test_embedding_round_trip(tmp_path, suffix):
    embs = {f"id{i}": np.random.default_rng(i).normal(size=5) for i in range(4)}
    back = load_embeddings(save_embeddings(tmp_path / f"e{suffix}", embs))
    assert list(back) == list(embs)
    assert all(np.allclose(back[k], embs[k]) for k in embs)
