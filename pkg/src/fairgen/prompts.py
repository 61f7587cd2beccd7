"""Prompt templates per dataset and generation strategy.

Templates use the placeholders ``{class-label}`` and ``{bias-label}``; the
learnt subject token of the personalised generators is written ``[V]``.
Transfer mode is used to synthesise bias-conflicting groups from a generator
fitted on an aligned group: the contested label is wrapped in double
parentheses, its opposite goes to the negative prompt (also double
parenthesised), and the ``[V]`` token is dropped.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Optional, Tuple

from .errors import CatalogError
from .groups import GroupKey

CLASS = "{class-label}"
BIAS = "{bias-label}"
TOKEN = "[V]"
GRAYSCALE = "grayscale"

STRATEGIES = ("vanilla", "lora_per_group", "dreambooth_per_group", "clustered_dreambooth")
DREAMBOOTH_FAMILY = ("dreambooth_per_group", "clustered_dreambooth")
MODES = ("standard", "transfer")


@dataclass(frozen=True)
class Template:
    positive: str
    negative: Tuple[str, ...] = ()
    # used instead of ``positive`` in transfer mode when the contested label
    # needs a different sentence than the standard prompt
    transfer_positive: Optional[str] = None


@dataclass(frozen=True)
class DatasetPrompts:
    classes: Tuple[str, str]
    biases: Tuple[str, str]
    # which label changes between a conflicting group and its transfer source
    transfer_axis: str
    facial: bool
    templates: Dict[str, Dict[str, Template]]  # family -> class label ("*" = any) -> template


def _t(positive, negative=(), transfer_positive=None):
    return Template(positive, tuple(negative), transfer_positive)


CATALOG: Dict[str, DatasetPrompts] = {
    "waterbirds": DatasetPrompts(
        classes=("landbird", "waterbird"),
        biases=("land", "water"),
        transfer_axis="bias",
        facial=False,
        templates={
            "vanilla": {"*": _t("photo of a {class-label} on {bias-label}.")},
            "lora": {"*": _t("Photo of a {class-label} on {bias-label}")},
            "dreambooth": {"*": _t("photo of a [V] bird", transfer_positive="photo of a [V] bird on {bias-label}")},
        },
    ),
    "celeba": DatasetPrompts(
        classes=("blond", "non-blond"),
        biases=("female", "male"),
        transfer_axis="bias",
        facial=True,
        templates={
            "vanilla": {
                "blond": _t("photo of a {bias-label} person with blond hair"),
                "non-blond": _t("photo of a {bias-label} person", ["blond hair"]),
            },
            "lora": {
                "blond": _t("Photo of a {bias-label} person with blond hair"),
                "non-blond": _t("Photo of a non-blond {bias-label} person"),
            },
            "dreambooth": {
                "blond": _t("photo of a [V] person with blond hair",
                            transfer_positive="photo of a [V] {bias-label} person with blond hair"),
                "non-blond": _t("photo of a [V] person", ["blond hair"],
                                transfer_positive="photo of a [V] {bias-label} person"),
            },
        },
    ),
    "utkface": DatasetPrompts(
        classes=("female", "male"),
        biases=("adult", "child"),
        transfer_axis="class",
        facial=True,
        templates={
            "vanilla": {"*": _t("photo of a {class-label} {bias-label}.")},
            "lora": {
                "*": _t(
                    "Photo of a {class-label} person who is a {bias-label}",
                    transfer_positive="Photo of a {class-label} person who is an {bias-label}",
                )
            },
            "dreambooth": {"*": _t("photo of a [V] {class-label} person")},
        },
    ),
    "shapeworld": DatasetPrompts(
        classes=("cross", "square"),
        biases=("cool", "warm"),
        transfer_axis="bias",
        facial=False,
        templates={
            "vanilla": {"*": _t("photo of a {class-label} on a {bias-label} background.")},
            "lora": {"*": _t("Photo of a {class-label} on a {bias-label} background")},
            "dreambooth": {
                "*": _t(
                    "photo of a [V] {class-label}",
                    transfer_positive="photo of a [V] {class-label} on a {bias-label} background",
                )
            },
        },
    ),
}


def family(strategy: str) -> str:
    if strategy == "vanilla":
        return "vanilla"
    if strategy == "lora_per_group":
        return "lora"
    if strategy in DREAMBOOTH_FAMILY:
        return "dreambooth"
    raise CatalogError(f"unknown strategy {strategy!r}")


@dataclass(frozen=True)
class PromptSpec:
    """A rendered prompt pair plus the template it came from."""

    positive: str
    negative_fragments: Tuple[str, ...] = ()
    emphasis: FrozenSet[str] = field(default_factory=frozenset)
    template: str = ""
    has_token: bool = False

    @property
    def negative(self) -> Optional[str]:
        return ", ".join(self.negative_fragments) if self.negative_fragments else None


def _emph(word: str) -> str:
    return f"(({word}))"


def _opposite(values: Tuple[str, str], v: str) -> str:
    a, b = values
    return b if v == a else a


def lookup(dataset_id: str, strategy: str, group: GroupKey) -> Tuple[DatasetPrompts, Template]:
    if dataset_id not in CATALOG:
        raise CatalogError(f"unknown dataset {dataset_id!r}; known: {sorted(CATALOG)}")
    entry = CATALOG[dataset_id]
    fam = family(strategy)
    y, a = group
    if y not in entry.classes or a not in entry.biases:
        raise CatalogError(f"group {GroupKey(y, a)} not in catalog for {dataset_id!r}")
    by_class = entry.templates[fam]
    tmpl = by_class.get(y, by_class.get("*"))
    if tmpl is None:
        raise CatalogError(f"no {fam} template for class {y!r} in {dataset_id!r}")
    return entry, tmpl


def render_prompts(
    dataset_id: str,
    strategy: str,
    group: GroupKey,
    mode: str = "standard",
    drop_token: bool = True,
) -> PromptSpec:
    """Render the positive/negative prompt for one group.

    Vanilla prompts are identical in both modes since the generator never saw
    the training data.
    """
    if mode not in MODES:
        raise CatalogError(f"unknown mode {mode!r}")
    entry, tmpl = lookup(dataset_id, strategy, group)
    y, a = group
    transfer = mode == "transfer" and strategy != "vanilla"
    text = tmpl.transfer_positive if transfer and tmpl.transfer_positive else tmpl.positive
    negatives = list(tmpl.negative)
    emphasis = frozenset()
    if transfer:
        if entry.transfer_axis == "class":
            contested, value, opposite = CLASS, y, _opposite(entry.classes, y)
        else:
            contested, value, opposite = BIAS, a, _opposite(entry.biases, a)
        emphasis = frozenset({contested})
        negatives.append(_emph(opposite))
        if drop_token:
            text = text.replace(TOKEN + " ", "").replace(TOKEN, "")
    if entry.facial:
        negatives.append(GRAYSCALE)
    rendered = text
    for placeholder, value in ((CLASS, y), (BIAS, a)):
        rendered = rendered.replace(placeholder, _emph(value) if placeholder in emphasis else value)
    return PromptSpec(
        positive=rendered,
        negative_fragments=tuple(negatives),
        emphasis=emphasis,
        template=text,
        has_token=TOKEN in rendered,
    )


def label_prompt(class_label: str) -> str:
    """Text side of the label score."""
    return f"Photo of a {class_label}"


def catalog_keys():
    """Every (dataset, strategy, group, mode) combination the catalog covers."""
    for ds_id, entry in CATALOG.items():
        for strategy in STRATEGIES:
            for y in entry.classes:
                for a in entry.biases:
                    for mode in MODES:
                        yield ds_id, strategy, GroupKey(y, a), mode


_WORD = re.compile(r"[a-z0-9][a-z0-9\-]*")


def tokenize_prompt(prompt: str) -> list:
    """Lower-cased words; emphasis parentheses and punctuation are dropped."""
    return _WORD.findall(prompt.lower())
