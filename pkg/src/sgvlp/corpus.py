"""Image-text pair data model, JSONL ingestion, and a seeded synthetic
corpus generator.

The generator draws a small scene graph per sample, renders it to a caption
with the rule grammar's templates, and synthesizes one region per object
whose feature vector is a frozen category embedding plus the mean of the
attached attribute embeddings plus Gaussian noise. Relationship words are a
frozen function of the endpoint categories, so relations are inferable from
context — without that the masked-relation tasks would be pure chance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from sgvlp.scenegraph import (AttributePair, ObjectNode, ParserLexicon,
                              RelationTriplet, SceneGraph)

MIN_REGIONS, MAX_REGIONS = 10, 36

# seed-stream tags for child RNGs
_ONTOLOGY, _EMBEDDINGS, _RELTABLE, _SAMPLE = 1, 2, 3, 4


class CorpusError(ValueError):
    """Invalid corpus files or generator configuration."""


@dataclass(frozen=True)
class RegionBox:
    x1: float
    y1: float
    x2: float
    y2: float
    width: float
    height: float

    def __post_init__(self):
        if not (0 <= self.x1 < self.x2 <= self.width
                and 0 <= self.y1 < self.y2 <= self.height):
            raise CorpusError(f"degenerate box {self}")


def location_feature(box: RegionBox) -> np.ndarray:
    """5-vector (x1/W, y1/H, x2/W, y2/H, area fraction), all in [0, 1]."""
    return np.array([
        box.x1 / box.width,
        box.y1 / box.height,
        box.x2 / box.width,
        box.y2 / box.height,
        (box.y2 - box.y1) * (box.x2 - box.x1) / (box.width * box.height),
    ])


@dataclass(frozen=True)
class Region:
    box: RegionBox
    feature: np.ndarray
    class_id: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.feature)):
            raise CorpusError("region feature has non-finite entries")
        if self.class_id < 0:
            raise CorpusError(f"negative class_id {self.class_id}")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    regions: tuple

    def __post_init__(self):
        if not MIN_REGIONS <= len(self.regions) <= MAX_REGIONS:
            raise CorpusError(
                f"image {self.image_id}: {len(self.regions)} regions, "
                f"must be within [{MIN_REGIONS}, {MAX_REGIONS}]")

    def feature_matrix(self) -> np.ndarray:
        return np.stack([r.feature for r in self.regions])

    def location_matrix(self) -> np.ndarray:
        return np.stack([location_feature(r.box) for r in self.regions])

    def class_ids(self) -> np.ndarray:
        return np.array([r.class_id for r in self.regions], dtype=np.int64)


@dataclass(frozen=True)
class CaptionRecord:
    caption_id: str
    image_id: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise CorpusError(f"caption {self.caption_id}: empty text")


@dataclass(frozen=True)
class GeneratorConfig:
    pairs: int = 2000
    object_categories: int = 24
    attribute_categories: int = 12
    relation_categories: int = 8
    feature_dim: int = 64
    noise: float = 0.05
    image_width: int = 640
    image_height: int = 480

    def __post_init__(self):
        if self.pairs < 0 or self.feature_dim < 1 or self.noise < 0:
            raise CorpusError(f"invalid generator config {self}")
        if min(self.object_categories, self.relation_categories) < 1:
            raise CorpusError("need at least one object and relation category")
        if self.attribute_categories < 0:
            raise CorpusError("attribute_categories must be >= 0")

    @classmethod
    def from_json(cls, text: str) -> "GeneratorConfig":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class Ontology:
    """Frozen word lists and embeddings shared by a generated corpus."""
    object_words: tuple
    attribute_words: tuple
    relation_words: tuple
    object_embeddings: np.ndarray    # (C_o, D)
    attribute_embeddings: np.ndarray  # (C_a, D)
    relation_table: np.ndarray       # (C_o, C_o) -> relation category


def _build_ontology(cfg: GeneratorConfig, lexicon: ParserLexicon, seed) -> Ontology:
    nouns = sorted(set(lexicon.nouns.values()))
    adjs = sorted(set(lexicon.adjectives.values()))
    multi = sorted(" ".join(words) for words in lexicon.multiword_preps)
    singles = sorted(set(lexicon.prepositions.values())
                     | set(lexicon.verbs.values()))
    for name, pool, want in (("object", nouns, cfg.object_categories),
                             ("attribute", adjs, cfg.attribute_categories),
                             ("relation", multi + singles,
                              cfg.relation_categories)):
        if want > len(pool):
            raise CorpusError(
                f"{name} ontology of {want} exceeds the lexicon's {len(pool)}")

    rng = np.random.default_rng(np.random.SeedSequence([seed, _ONTOLOGY]))
    object_words = tuple(str(w) for w in
                         rng.choice(nouns, cfg.object_categories, replace=False))
    attribute_words = tuple(str(w) for w in
                            rng.choice(adjs, cfg.attribute_categories,
                                       replace=False))
    # keep multiword relation words in play: they exercise span masking
    n_multi = min(2, cfg.relation_categories, len(multi))
    rel = [str(w) for w in rng.choice(multi, n_multi, replace=False)]
    rel += [str(w) for w in rng.choice(singles,
                                       cfg.relation_categories - n_multi,
                                       replace=False)]
    relation_words = tuple(rel)

    emb_rng = np.random.default_rng(np.random.SeedSequence([seed, _EMBEDDINGS]))
    obj_emb = emb_rng.normal(0.0, 1.0, (cfg.object_categories, cfg.feature_dim))
    attr_emb = emb_rng.normal(0.0, 1.0, (max(cfg.attribute_categories, 1),
                                         cfg.feature_dim))
    table_rng = np.random.default_rng(np.random.SeedSequence([seed, _RELTABLE]))
    table = table_rng.integers(0, cfg.relation_categories,
                               (cfg.object_categories, cfg.object_categories))
    return Ontology(object_words, attribute_words, relation_words,
                    obj_emb, attr_emb, table)


class _CaptionBuilder:
    """Accumulates caption text while recording node character spans."""

    def __init__(self):
        self.parts = []
        self.length = 0

    def add(self, word: str) -> tuple[int, int]:
        if self.parts:
            self.length += 1  # joining space
        start = self.length
        self.parts.append(word)
        self.length += len(word)
        return (start, self.length)

    def text(self) -> str:
        return " ".join(self.parts)


def _feature(ont: Ontology, cfg: GeneratorConfig, cat: int, attr_cats,
             rng) -> np.ndarray:
    f = ont.object_embeddings[cat].copy()
    if len(attr_cats):
        # sorted so the float summation order is canonical per multiset
        f += ont.attribute_embeddings[sorted(attr_cats)].mean(axis=0)
    if cfg.noise > 0:
        f += cfg.noise * rng.normal(0.0, 1.0, cfg.feature_dim)
    return f


def _grid_box(cell: int, cfg: GeneratorConfig, rng) -> RegionBox:
    row, col = divmod(cell, 6)
    cw, ch = cfg.image_width / 6.0, cfg.image_height / 6.0
    jx1, jy1, jx2, jy2 = rng.uniform(0.02, 0.18, 4)
    return RegionBox(round(col * cw + jx1 * cw, 2),
                     round(row * ch + jy1 * ch, 2),
                     round((col + 1) * cw - jx2 * cw, 2),
                     round((row + 1) * ch - jy2 * ch, 2),
                     cfg.image_width, cfg.image_height)


def _render_sample(i, cfg, ont, rng):
    n_objects = int(rng.integers(2, 5))
    cats = rng.choice(cfg.object_categories, n_objects, replace=False)
    attr_cats = []
    for _ in range(n_objects):
        n_attr = int(rng.integers(0, 3)) if cfg.attribute_categories else 0
        attr_cats.append(rng.choice(cfg.attribute_categories, n_attr,
                                    replace=False) if n_attr else [])
    linked = rng.random(n_objects - 1) < 0.8
    if not linked.any():
        linked[0] = True

    builder = _CaptionBuilder()
    objects, attributes, relations = [], [], []

    def noun_phrase(idx):
        det = "the" if rng.random() < 0.5 else "a"
        attr_words = [ont.attribute_words[c] for c in attr_cats[idx]]
        first = attr_words[0] if attr_words else ont.object_words[cats[idx]]
        if det == "a" and first[0] in "aeiou":
            det = "an"
        builder.add(det)
        spans = [builder.add(w) for w in attr_words]
        noun_span = builder.add(ont.object_words[cats[idx]])
        obj_idx = len(objects)
        objects.append(ObjectNode(ont.object_words[cats[idx]], noun_span))
        for w, s in zip(attr_words, spans):
            attributes.append(AttributePair(w, s, obj_idx))
        return obj_idx

    prev = noun_phrase(0)
    for j in range(1, n_objects):
        if linked[j - 1]:
            rel_cat = int(ont.relation_table[cats[j - 1], cats[j]])
            word = ont.relation_words[rel_cat]
            span = builder.add(word)
            cur = noun_phrase(j)
            relations.append(RelationTriplet(
                prev, word.replace(" ", "-"), span, cur))
        else:
            builder.add("and")
            cur = noun_phrase(j)
        prev = cur
    builder.add(".")

    caption = builder.text()
    graph = SceneGraph(caption, tuple(objects), tuple(attributes),
                       tuple(relations))

    total = 10 + int(rng.integers(0, 3))
    cells = rng.choice(36, total, replace=False)
    unused = [c for c in range(cfg.object_categories) if c not in set(cats)]
    pool = unused if unused else list(range(cfg.object_categories))
    distractor_cats = rng.choice(pool, total - n_objects,
                                 replace=len(pool) < total - n_objects)
    regions = []
    for k in range(n_objects):
        regions.append(Region(_grid_box(int(cells[k]), cfg, rng),
                              _feature(ont, cfg, int(cats[k]), attr_cats[k], rng),
                              int(cats[k])))
    for k, cat in enumerate(distractor_cats):
        regions.append(Region(_grid_box(int(cells[n_objects + k]), cfg, rng),
                              _feature(ont, cfg, int(cat), [], rng),
                              int(cat)))
    order = rng.permutation(total)
    image = ImageRecord(f"i{i:05d}", tuple(regions[k] for k in order))
    caption_rec = CaptionRecord(f"c{i:05d}", image.image_id, caption)
    return image, caption_rec, graph


def generate_corpus(cfg: GeneratorConfig, lexicon: ParserLexicon, seed: int):
    """Deterministic synthetic corpus: (images, captions, scene graphs)."""
    ont = _build_ontology(cfg, lexicon, seed)
    images, captions, graphs = [], [], []
    for i in range(cfg.pairs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, _SAMPLE, i]))
        image, caption, graph = _render_sample(i, cfg, ont, rng)
        images.append(image)
        captions.append(caption)
        graphs.append(graph)
    return images, captions, graphs


# ---------------------------------------------------------------------------
# JSONL serialization


def save_captions(path, captions):
    from sgvlp._fileio import write_atomic
    lines = [json.dumps({"caption_id": c.caption_id, "image_id": c.image_id,
                         "text": c.text}) for c in captions]
    write_atomic(path, "\n".join(lines) + ("\n" if lines else ""))


def save_images(path, images):
    from sgvlp._fileio import write_atomic
    lines = []
    for img in images:
        regions = [{
            "x1": r.box.x1, "y1": r.box.y1, "x2": r.box.x2, "y2": r.box.y2,
            "class_id": r.class_id, "feature": [float(x) for x in r.feature],
        } for r in img.regions]
        lines.append(json.dumps({
            "image_id": img.image_id,
            "width": img.regions[0].box.width,
            "height": img.regions[0].box.height,
            "regions": regions,
        }))
    write_atomic(path, "\n".join(lines) + ("\n" if lines else ""))


def _jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: bad JSON ({exc})") from exc


def load_captions(path):
    out = []
    for lineno, obj in _jsonl(path):
        try:
            out.append(CaptionRecord(obj["caption_id"], obj["image_id"],
                                     obj["text"]))
        except (KeyError, CorpusError) as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from exc
    return out


def load_images(path):
    out = []
    for lineno, obj in _jsonl(path):
        try:
            regions = tuple(
                Region(RegionBox(r["x1"], r["y1"], r["x2"], r["y2"],
                                 obj["width"], obj["height"]),
                       np.asarray(r["feature"], dtype=np.float64),
                       int(r["class_id"]))
                for r in obj["regions"])
            out.append(ImageRecord(obj["image_id"], regions))
        except (KeyError, CorpusError) as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from exc
    return out


def load_pairs(captions_path, images_path):
    """Join captions to images; every caption must resolve."""
    captions = load_captions(captions_path)
    images = {img.image_id: img for img in load_images(images_path)}
    dangling = sorted({c.image_id for c in captions} - set(images))
    if dangling:
        raise CorpusError(f"captions reference missing images: {dangling}")
    return [(c, images[c.image_id]) for c in captions]


def split_pairs(pairs, holdout_fraction=0.2):
    """Deterministic train/holdout split (holdout = trailing block)."""
    if not 0 <= holdout_fraction < 1:
        raise CorpusError(f"bad holdout fraction {holdout_fraction}")
    n_holdout = int(round(len(pairs) * holdout_fraction))
    if n_holdout == 0:
        return list(pairs), []
    return list(pairs[:-n_holdout]), list(pairs[-n_holdout:])
