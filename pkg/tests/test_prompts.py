import json
from pathlib import Path

import pytest

from fairgen.errors import CatalogError
from fairgen.groups import GroupKey
from fairgen.prompts import catalog_keys, label_prompt, render_prompts

GOLDEN = json.loads((Path(__file__).parent / "golden" / "prompts.json").read_text())


def _key(ds, strategy, g, mode):
    return f"{ds}|{strategy}|{g.class_label}|{g.bias_label}|{mode}"


def test_golden_covers_the_whole_catalog():
    assert sorted(_key(*k) for k in catalog_keys()) == sorted(GOLDEN)


@pytest.mark.parametrize("key", sorted(GOLDEN))
def test_render_matches_golden(key):
    ds, strategy, y, a, mode = key.split("|")
    spec = render_prompts(ds, strategy, GroupKey(y, a), mode)
    assert spec.positive == GOLDEN[key]["positive"]
    assert spec.negative == GOLDEN[key]["negative"]


def test_spot_checks():
    assert render_prompts("waterbirds", "vanilla", GroupKey("waterbird", "land")).positive == "photo of a waterbird on land."
    p = render_prompts("celeba", "vanilla", GroupKey("non-blond", "male"))
    assert p.positive == "photo of a male person" and "blond hair" in p.negative_fragments
    p = render_prompts("utkface", "lora_per_group", GroupKey("female", "child"), "transfer")
    assert p.positive == "Photo of a ((female)) person who is an child"
    assert "((male))" in p.negative_fragments


def test_token_kept_or_dropped():
    g = GroupKey("landbird", "water")
    assert render_prompts("waterbirds", "dreambooth_per_group", g).has_token
    assert not render_prompts("waterbirds", "dreambooth_per_group", g, "transfer").has_token
    assert render_prompts("waterbirds", "dreambooth_per_group", g, "transfer", drop_token=False).has_token


def test_label_prompt():
    assert label_prompt("waterbird") == "Photo of a waterbird"


@pytest.mark.parametrize("args", [
    ("imagenet", "vanilla", GroupKey("a", "b")),
    ("waterbirds", "gan", GroupKey("waterbird", "land")),
    ("waterbirds", "vanilla", GroupKey("penguin", "land")),
])
def test_unknown_catalog_key(args):
    with pytest.raises(CatalogError):
        render_prompts(*args)
