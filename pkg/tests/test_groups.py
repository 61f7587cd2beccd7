import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from fairgen.errors import CapacityError, IntegrityError, ParseError, SamplingError, SchemaError, UndefinedRatioError
from fairgen.groups import (ALIGNED, CONFLICTING, DatasetItem, GroupedDataset, GroupKey, SplitSpec,
                            balanced_subsample, compute_bias_ratio, construct_biased_split, decode_array,
                            encode_array, group_uniform_batches, load_manifest, max_conflicting, save_manifest)

from conftest import UTK_ALIGNMENT, UTK_COUNTS, make_pool


def test_group_key_round_trip():
    g = GroupKey("waterbird", "land")
    assert str(g) == "waterbird|land"
    assert GroupKey.parse(str(g)) == g


def test_inline_array_round_trip():
    a = np.arange(24, dtype=np.float32).reshape(2, 4, 3)
    b = decode_array(encode_array(a))
    assert b.dtype == a.dtype and np.array_equal(a, b)
    with pytest.raises(ParseError):
        decode_array("nonsense")


@pytest.mark.parametrize("suffix", [".csv", ".jsonl"])
def test_manifest_round_trip(tmp_path, suffix):
    pool = make_pool({("a", "x"): 3, ("b", "y"): 2}, {("a", "x"): ALIGNED, ("b", "y"): ALIGNED})
    items = [DatasetItem(it.id, it.image_ref, it.class_label, it.bias_label, it.split, "real", {"note": it.id[::-1]})
             for it in pool.items]
    path = save_manifest(pool.derive(items), tmp_path / f"m{suffix}")
    back = load_manifest(path)
    assert [it.id for it in back.items] == [it.id for it in pool.items]
    assert [it.provenance["note"] for it in back.items] == [it.id[::-1] for it in pool.items]
    assert np.array_equal(back.images(), pool.images())


def test_manifest_rejects_unknown_split(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("id,image_ref,class_label,bias_label,split\n1,x.npy,a,b,holdout\n")
    with pytest.raises(ParseError):
        load_manifest(p)


def test_manifest_missing_column(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("id,image_ref,class_label,split\n1,x.npy,a,train\n")
    with pytest.raises(SchemaError):
        load_manifest(p)


def test_schema_mapping(tmp_path):
    p = tmp_path / "m.csv"
    img = encode_array(np.zeros((1, 1, 3), dtype=np.float32))
    p.write_text(f"name,file,y,place,part\n1,{img},a,b,train\n")
    ds = load_manifest(p, schema={"id": "name", "image_ref": "file", "class_label": "y", "bias_label": "place", "split": "part"})
    assert ds.items[0].group == GroupKey("a", "b")


def test_duplicate_ids_rejected():
    it = DatasetItem("x", "x.npy", "a", "b", "train")
    with pytest.raises(IntegrityError):
        GroupedDataset([it, it])


def test_max_conflicting_exact_fractions():
    # aligned / (aligned + k) >= r  <=>  k <= aligned (1 - r) / r
    assert max_conflicting(950, 0.95) == 50
    assert max_conflicting(934, 0.9) == 103
    assert max_conflicting(5730, 0.9) == 636
    assert max_conflicting(10, 0.999) == 1  # floor is 0, clamped to 1
    assert max_conflicting(10, 1.0) == 0


@given(st.integers(1, 5000), st.sampled_from([0.5, 0.6, 0.75, 0.9, 0.95, 0.99]))
def test_max_conflicting_is_largest(aligned, r):
    k = max_conflicting(aligned, r)
    fr = Fraction(str(r))
    if Fraction(aligned, aligned + 1) >= fr:
        assert Fraction(aligned, aligned + k) >= fr
        assert Fraction(aligned, aligned + k + 1) < fr
    else:
        assert k == 1


def test_utkface_split_counts_and_ratio():
    pool = make_pool({g: 2 * n for g, n in UTK_COUNTS.items()}, UTK_ALIGNMENT)
    split = construct_biased_split(pool, SplitSpec(target_counts=UTK_COUNTS, seed=1))
    assert {tuple(g): n for g, n in split.group_sizes().items()} == UTK_COUNTS
    for r in compute_bias_ratio(split).values():
        assert r == pytest.approx(0.90, abs=1e-3)


def test_ratio_mode_keeps_aligned_and_shrinks_conflicting():
    pool = make_pool({("a", "x"): 100, ("a", "y"): 60, ("b", "y"): 80, ("b", "x"): 60},
                     {("a", "x"): ALIGNED, ("a", "y"): CONFLICTING, ("b", "y"): ALIGNED, ("b", "x"): CONFLICTING})
    split = construct_biased_split(pool, SplitSpec(bias_ratio=0.8, seed=0))
    sizes = {tuple(g): n for g, n in split.group_sizes().items()}
    assert sizes == {("a", "x"): 100, ("a", "y"): 25, ("b", "x"): 20, ("b", "y"): 80}


def test_split_capacity_error():
    pool = make_pool({("a", "x"): 3}, {("a", "x"): ALIGNED})
    with pytest.raises(CapacityError):
        construct_biased_split(pool, SplitSpec(target_counts={GroupKey("a", "x"): 4}))


def test_split_spec_validation():
    with pytest.raises(SchemaError):
        SplitSpec()
    with pytest.raises(SchemaError):
        SplitSpec(bias_ratio=1.5)


def test_split_is_deterministic_under_seed():
    pool = make_pool({g: 2 * n for g, n in UTK_COUNTS.items()}, UTK_ALIGNMENT)
    a = construct_biased_split(pool, SplitSpec(target_counts=UTK_COUNTS, seed=5))
    b = construct_biased_split(pool, SplitSpec(target_counts=UTK_COUNTS, seed=5))
    assert [it.id for it in a.items] == [it.id for it in b.items]


def test_bias_ratio_of_empty_class():
    pool = make_pool({("a", "x"): 3}, {("a", "x"): ALIGNED})
    ds = GroupedDataset(pool.items, ("a", "b"), ("x",), pool.alignment_map)
    with pytest.raises(UndefinedRatioError):
        compute_bias_ratio(ds)


def test_group_uniform_sampler_chi_square():
    pool = make_pool({("a", "x"): 500, ("a", "y"): 7, ("b", "x"): 30, ("b", "y"): 200},
                     {("a", "x"): ALIGNED, ("a", "y"): CONFLICTING, ("b", "y"): ALIGNED, ("b", "x"): CONFLICTING})
    gid = pool.group_indices()
    # batch of 10 over 4 groups: 2 leftover slots land on random groups
    counts = np.zeros(4)
    for ix in group_uniform_batches(pool, 10, seed=0, n_batches=10_000):
        counts += np.bincount(gid[ix], minlength=4)
    assert stats.chisquare(counts).pvalue > 0.01


def test_group_uniform_sampler_errors():
    pool = make_pool({("a", "x"): 5}, {("a", "x"): ALIGNED})
    ds = GroupedDataset(pool.items, ("a",), ("x", "y"), pool.alignment_map)
    with pytest.raises(SamplingError):
        next(group_uniform_batches(ds, 4, 0))


def test_balanced_subsample_sizes():
    pool = make_pool({("a", "x"): 9, ("a", "y"): 4, ("b", "x"): 6, ("b", "y"): 5},
                     {("a", "x"): ALIGNED, ("a", "y"): CONFLICTING, ("b", "y"): ALIGNED, ("b", "x"): CONFLICTING})
    sub = balanced_subsample(pool, 0)
    assert set(sub.group_sizes().values()) == {4}
