"""Text queries: tokenisation, prompt templates and the per-phase samplers.

Each sampler turns one annotated image into its per-image label space: a list
of :class:`Query` objects, positives linked to the instances they describe and
negatives linked to none.
"""
from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

PAD, UNK = "<pad>", "<unk>"
_WORD = re.compile(r"[a-z0-9]+")

CLASS, ATTRIBUTE, COMPOSITE = "class", "attribute", "composite"
NO_ORDER, ATTR_OBJ, OBJ_ATTR = "none", "attr_then_obj", "obj_then_attr"
COMPOSITE_TEMPLATE = "a photo of {}"


class TemplateError(ValueError):
    pass


class SamplerWarning(UserWarning):
    """The candidate pool could not supply the requested number of negatives."""


def normalize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocabulary:
    """Word-level vocabulary; id 0 is padding, id 1 the unknown word."""

    def __init__(self, words: Iterable[str]):
        uniq = sorted(set(words) - {PAD, UNK})
        self.itos = [PAD, UNK] + uniq
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        return cls(w for t in texts for w in normalize(t))

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        return tokenize(text, self)

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[i] for i in ids if i != 0)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    words = normalize(text)
    if not words:
        raise ValueError(f"cannot tokenize empty text {text!r}")
    return [vocab.stoi.get(w, 1) for w in words]


# ---------------------------------------------------------------------------
# resources
# ---------------------------------------------------------------------------

def parse_templates(lines: Iterable[str]) -> list[str]:
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        if line.count("{}") != 1 or re.search(r"\{[^}]", line):
            raise TemplateError(f"template line {lineno} must hold exactly one '{{}}' placeholder: {line!r}")
        out.append(line)
    if not out:
        raise TemplateError("no templates given")
    return out


def load_templates(path=None) -> list[str]:
    if path is None:
        text = resources.files("lowa.resources").joinpath("templates.txt").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_templates(text.splitlines())


def parse_antonyms(lines: Iterable[str]) -> dict[str, set]:
    table: dict[str, set] = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2 or not parts[0].strip():
            raise ValueError(f"antonym line {lineno}: expected 'attribute<TAB>a,b,...'")
        table.setdefault(parts[0].strip(), set()).update(a.strip() for a in parts[1].split(",") if a.strip())
    return table


def load_antonyms(path=None) -> dict[str, set]:
    if path is None:
        text = resources.files("lowa.resources").joinpath("antonyms.tsv").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_antonyms(text.splitlines())


def apply_template(label: str, templates: Sequence[str], rng) -> str:
    """Substitute ``label`` into a uniformly drawn template."""
    if not templates:
        raise TemplateError("empty template list")
    return templates[int(rng.integers(len(templates)))].replace("{}", label)


# ---------------------------------------------------------------------------
# query objects
# ---------------------------------------------------------------------------

@dataclass
class Query:
    text: str
    provenance: str
    labels: tuple  # namespaced labels, e.g. (("attr", "red"), ("class", "square"))
    positive_for: frozenset = frozenset()
    order: str = NO_ORDER
    token_ids: list = field(default_factory=list)

    def __post_init__(self):
        if (self.provenance == COMPOSITE) == (self.order == NO_ORDER):
            raise ValueError(f"query {self.text!r}: order {self.order!r} invalid for {self.provenance}")

    @property
    def is_positive(self) -> bool:
        return bool(self.positive_for)


@dataclass
class LabelCandidateSet:
    classes: list
    attributes: list
    antonym_map: dict = field(default_factory=dict)

    def __post_init__(self):
        self.classes = sorted(set(self.classes))
        self.attributes = sorted(set(self.attributes))

    def merged(self) -> list[tuple]:
        return [("class", c) for c in self.classes] + [("attr", a) for a in self.attributes]


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _finish(queries, vocab):
    if vocab is not None:
        for q in queries:
            q.token_ids = tokenize(q.text, vocab)
    return queries


def _choose(pool: list, n: int, rng, what: str) -> list:
    if n > len(pool):
        warnings.warn(f"only {len(pool)} eligible {what} negatives for n_neg={n}", SamplerWarning, stacklevel=3)
        n = len(pool)
    if n == 0:
        return []
    idx = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in sorted(idx)]


def _label_query(ns: str, value: str, positive_for, templates, rng) -> Query:
    prov = CLASS if ns == "class" else ATTRIBUTE
    return Query(apply_template(value, templates, rng), prov, ((ns, value),), frozenset(positive_for))


def image_labels(image) -> dict[tuple, set]:
    """Namespaced label -> ids of the instances carrying it."""
    out: dict[tuple, set] = {}
    for inst in image.instances:
        out.setdefault(("class", inst.class_label), set()).add(inst.id)
        for a in inst.attributes:
            out.setdefault(("attr", a), set()).add(inst.id)
    return out


def sample_step_o(image, candidates: LabelCandidateSet, n_neg: int, rng, templates=None, vocab=None) -> list[Query]:
    """Class-name positives plus ``n_neg`` absent class names as negatives."""
    rng = _rng(rng)
    templates = templates or load_templates()
    if not image.instances:
        raise ValueError(f"image {image.id} has no instances")
    owners = {}
    for inst in image.instances:
        owners.setdefault(inst.class_label, set()).add(inst.id)
    queries = [_label_query("class", c, ids, templates, rng) for c, ids in sorted(owners.items())]
    pool = [c for c in candidates.classes if c not in owners]
    for c in _choose(pool, n_neg, rng, "class"):
        queries.append(_label_query("class", c, (), templates, rng))
    return _finish(queries, vocab)


def sample_step_a(image, candidates: LabelCandidateSet, n_neg: int, rng, templates=None, vocab=None) -> list[Query]:
    """Every class and attribute of an instance is a positive for it.

    Negatives come from the merged class/attribute pool minus every label
    present anywhere in the image.
    """
    rng = _rng(rng)
    templates = templates or load_templates()
    if not image.instances:
        raise ValueError(f"image {image.id} has no instances")
    owners = image_labels(image)
    queries = []
    for inst in image.instances:
        for label in [("class", inst.class_label)] + [("attr", a) for a in inst.attributes]:
            if label in owners:
                queries.append(_label_query(label[0], label[1], owners.pop(label), templates, rng))
    present = image_labels(image)
    pool = [lab for lab in candidates.merged() if lab not in present]
    for ns, value in _choose(pool, n_neg, rng, "class/attribute"):
        queries.append(_label_query(ns, value, (), templates, rng))
    return _finish(queries, vocab)


def compose(attribute: str, class_label: str, order: str) -> str:
    return f"{attribute} {class_label}" if order == ATTR_OBJ else f"{class_label} {attribute}"


def _holders(image, attribute: str, class_label: str) -> frozenset:
    return frozenset(i.id for i in image.instances if i.class_label == class_label and attribute in i.attributes)


def sample_step_f(image, candidates: LabelCandidateSet, n_neg: int, rng, templates=None, vocab=None) -> list[Query]:
    """One attribute + class composite per instance, negatives by single-side swaps.

    A negative copies a random positive composite and replaces either the class
    or the attribute; the result must describe no instance of the image.
    Attribute swaps draw from the antonym table when it offers an eligible
    entry.
    """
    rng = _rng(rng)
    if not image.instances:
        raise ValueError(f"image {image.id} has no instances")
    templates = templates or load_templates()
    queries, composites = [], []
    plain_classes = set()
    for inst in image.instances:
        if not inst.attributes:
            plain_classes.add(inst.class_label)
            continue
        attr = inst.attributes[int(rng.integers(len(inst.attributes)))]
        order = ATTR_OBJ if rng.random() < 0.5 else OBJ_ATTR
        text = COMPOSITE_TEMPLATE.format(compose(attr, inst.class_label, order))
        queries.append(Query(text, COMPOSITE, (("attr", attr), ("class", inst.class_label)),
                             _holders(image, attr, inst.class_label), order))
        composites.append((attr, inst.class_label))
    for c in sorted(plain_classes):
        ids = {i.id for i in image.instances if i.class_label == c}
        queries.append(_label_query("class", c, ids, templates, rng))

    if composites:
        seen = set(composites)
        negatives = []
        for _ in range(max(1, n_neg) * 20):
            if len(negatives) >= n_neg:
                break
            attr, cls = composites[int(rng.integers(len(composites)))]
            if rng.random() < 0.5:
                pool = [c for c in candidates.classes if c != cls and not _holders(image, attr, c)]
                if not pool:
                    continue
                new = (attr, pool[int(rng.integers(len(pool)))])
            else:
                pool = [a for a in candidates.attributes if a != attr and not _holders(image, a, cls)]
                if not pool:
                    continue
                anti = [a for a in pool if a in candidates.antonym_map.get(attr, ())]
                pick = anti or pool
                new = (pick[int(rng.integers(len(pick)))], cls)
            if new in seen:
                continue
            seen.add(new)
            negatives.append(new)
        if len(negatives) < n_neg:
            warnings.warn(f"only {len(negatives)} composite negatives for n_neg={n_neg}", SamplerWarning, stacklevel=2)
        for attr, cls in negatives:
            order = ATTR_OBJ if rng.random() < 0.5 else OBJ_ATTR
            text = COMPOSITE_TEMPLATE.format(compose(attr, cls, order))
            queries.append(Query(text, COMPOSITE, (("attr", attr), ("class", cls)), frozenset(), order))
    elif n_neg:
        present = {i.class_label for i in image.instances}
        pool = [c for c in candidates.classes if c not in present]
        for c in _choose(pool, n_neg, rng, "class"):
            queries.append(_label_query("class", c, (), templates, rng))
    return _finish(queries, vocab)


SAMPLERS = {"O": sample_step_o, "A": sample_step_a, "F": sample_step_f}


def query_collisions(image, queries: Sequence[Query]) -> list[Query]:
    """Negatives whose labels describe some instance of the image (should be empty)."""
    bad = []
    for q in queries:
        if q.is_positive:
            continue
        for inst in image.instances:
            have = {("class", inst.class_label)} | {("attr", a) for a in inst.attributes}
            if set(q.labels) <= have:
                bad.append(q)
                break
    return bad


def label_text(label: str, templates: Sequence[str] | None = None) -> str:
    """Deterministic inference-time prompt (first template)."""
    templates = templates or load_templates()
    return templates[0].replace("{}", label)
