"""Rule-based extraction of scene graphs (objects, attributes, relationships)
from image captions, driven by a word-class lexicon.

The grammar operates on lowercased word tokens:

1. every noun becomes an object node;
2. a maximal run of adjectives immediately before a noun attaches to that
   noun as attribute pairs;
3. between two consecutive nouns, the first verb/preposition (a verb
   immediately followed by a preposition fuses into one unit) becomes a
   relationship triplet with the left noun as subject, provided no more
   than RELATION_WINDOW other tokens separate the nouns;
4. multiword prepositions are matched greedily, longest first, before
   single-word classification.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

OBJECT = "object"
ATTRIBUTE = "attribute"
RELATIONSHIP = "relationship"
CATEGORIES = (OBJECT, ATTRIBUTE, RELATIONSHIP)

WORD_CLASSES = ("noun", "adj", "verb", "prep", "stop", "det")

# Max number of filler tokens (anything besides the relation unit itself)
# allowed between the two nouns of a relationship triplet.
RELATION_WINDOW = 4

_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class LexiconError(ValueError):
    """Malformed or internally inconsistent lexicon."""


def split_words(text: str) -> list[tuple[str, int, int]]:
    """Lowercased word/punctuation tokens with char offsets into `text`.

    Words are maximal alphanumeric runs; any other non-space ASCII char is
    its own token. Non-ASCII characters are dropped.
    """
    lowered = text.lower()
    if len(lowered) != len(text):
        # rare non-length-preserving lowercase; fall back to per-char
        lowered = "".join(c if len(c.lower()) != 1 else c.lower() for c in text)
    out = []
    for m in _WORD_RE.finditer(lowered):
        tok = m.group()
        if tok.isascii():
            out.append((tok, m.start(), m.end()))
    return out


@dataclass(frozen=True)
class ObjectNode:
    lemma: str
    span: tuple[int, int]


@dataclass(frozen=True)
class AttributePair:
    lemma: str
    span: tuple[int, int]
    owner: int


@dataclass(frozen=True)
class RelationTriplet:
    subject: int
    lemma: str
    span: tuple[int, int]
    object: int


@dataclass(frozen=True)
class SceneGraph:
    source: str
    objects: tuple[ObjectNode, ...]
    attributes: tuple[AttributePair, ...]
    relations: tuple[RelationTriplet, ...]

    def object_lemmas(self) -> set[str]:
        return {o.lemma for o in self.objects}

    def attribute_lemmas(self) -> set[str]:
        return {a.lemma for a in self.attributes}

    def relation_lemmas(self) -> set[str]:
        return {r.lemma for r in self.relations}

    def nodes(self) -> list[tuple[str, int]]:
        """(category, index) keys for every node, in a canonical order."""
        keys = [(OBJECT, i) for i in range(len(self.objects))]
        keys += [(ATTRIBUTE, i) for i in range(len(self.attributes))]
        keys += [(RELATIONSHIP, i) for i in range(len(self.relations))]
        return keys

    def node_span(self, category: str, index: int) -> tuple[int, int]:
        return {OBJECT: self.objects, ATTRIBUTE: self.attributes,
                RELATIONSHIP: self.relations}[category][index].span

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "objects": [{"lemma": o.lemma, "span": list(o.span)} for o in self.objects],
            "attributes": [
                {"lemma": a.lemma, "span": list(a.span), "owner": a.owner}
                for a in self.attributes
            ],
            "relations": [
                {"subject": r.subject, "lemma": r.lemma, "span": list(r.span),
                 "object": r.object}
                for r in self.relations
            ],
        }


class ParserLexicon:
    """Word-class lexicon: four content classes plus stopwords/determiners.

    Each of nouns/adjectives/verbs/prepositions maps surface form -> lemma
    (covering listed inflections). Multiword prepositions are kept
    separately as word tuples mapping to hyphen-joined lemmas.
    """

    def __init__(self, nouns, adjectives, verbs, prepositions,
                 multiword_preps, stopwords, determiners):
        self.nouns = dict(nouns)
        self.adjectives = dict(adjectives)
        self.verbs = dict(verbs)
        self.prepositions = dict(prepositions)
        self.multiword_preps = dict(multiword_preps)
        self.stopwords = frozenset(stopwords)
        self.determiners = frozenset(determiners)
        self._validate()
        # first word -> multiword entries sorted longest first
        self._multi_index: dict[str, list[tuple[str, ...]]] = {}
        for words in sorted(self.multiword_preps, key=len, reverse=True):
            self._multi_index.setdefault(words[0], []).append(words)

    def _validate(self):
        classes = {
            "noun": set(self.nouns), "adj": set(self.adjectives),
            "verb": set(self.verbs), "prep": set(self.prepositions),
            "stop": set(self.stopwords), "det": set(self.determiners),
        }
        names = list(classes)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                overlap = classes[a] & classes[b]
                if overlap:
                    word = sorted(overlap)[0]
                    raise LexiconError(
                        f"word {word!r} listed as both {a} and {b}")
        for words in self.multiword_preps:
            if len(words) < 2 or not all(words):
                raise LexiconError(
                    f"multiword preposition {' '.join(words)!r} needs >= 2 words")

    def word_kind(self, word: str) -> str:
        """Single-token class: noun/adj/verb/prep/other."""
        if word in self.nouns:
            return "noun"
        if word in self.adjectives:
            return "adj"
        if word in self.verbs:
            return "verb"
        if word in self.prepositions:
            return "prep"
        return "other"

    def lemma(self, kind: str, word: str) -> str:
        table = {"noun": self.nouns, "adj": self.adjectives,
                 "verb": self.verbs, "prep": self.prepositions}[kind]
        return table[word]

    def lemmatize_phrase(self, text: str) -> str:
        """Lemma a node span should carry: per-word lemmas, hyphen-joined."""
        parts = []
        for word, _, _ in split_words(text):
            kind = self.word_kind(word)
            parts.append(self.lemma(kind, word) if kind != "other" else word)
        return "-".join(parts)

    def all_surface_forms(self) -> set[str]:
        forms = (set(self.nouns) | set(self.adjectives) | set(self.verbs)
                 | set(self.prepositions) | set(self.stopwords)
                 | set(self.determiners))
        for words in self.multiword_preps:
            forms.update(words)
        return forms


def load_lexicon(path) -> ParserLexicon:
    """Parse a lexicon file: `class<TAB>lemma[<TAB>infl1,infl2,...]`.

    Classes: noun, adj, verb, prep, stop, det. Multiword prepositions put
    spaces in the lemma field. `#` starts a comment. Exact duplicates are
    deduplicated; conflicting or cross-class duplicates are errors.
    """
    tables = {"noun": {}, "adj": {}, "verb": {}, "prep": {}}
    multiword = {}
    stop, det = set(), set()

    def add(table, surface, lemma, lineno):
        if surface in table and table[surface] != lemma:
            raise LexiconError(
                f"line {lineno}: {surface!r} maps to both "
                f"{table[surface]!r} and {lemma!r}")
        table[surface] = lemma

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].rstrip("\n").rstrip()
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) < 2 or not fields[1].strip():
                raise LexiconError(f"line {lineno}: expected class<TAB>lemma")
            cls = fields[0].strip().lower()
            lemma = fields[1].strip().lower()
            if cls not in WORD_CLASSES:
                raise LexiconError(f"line {lineno}: unknown class {cls!r}")
            inflections = []
            if len(fields) > 2 and fields[2].strip():
                inflections = [w.strip().lower()
                               for w in fields[2].split(",") if w.strip()]
            if " " in lemma:
                if cls != "prep":
                    raise LexiconError(
                        f"line {lineno}: multiword lemma only allowed for prep")
                if inflections:
                    raise LexiconError(
                        f"line {lineno}: multiword preposition takes no inflections")
                words = tuple(lemma.split())
                joined = "-".join(words)
                if multiword.get(words, joined) != joined:
                    raise LexiconError(f"line {lineno}: conflicting entry")
                multiword[words] = joined
                continue
            if any(" " in w for w in inflections):
                raise LexiconError(f"line {lineno}: inflections must be single words")
            if cls == "stop":
                stop.add(lemma)
            elif cls == "det":
                det.add(lemma)
            else:
                add(tables[cls], lemma, lemma, lineno)
                for infl in inflections:
                    add(tables[cls], infl, lemma, lineno)

    return ParserLexicon(tables["noun"], tables["adj"], tables["verb"],
                         tables["prep"], multiword, stop, det)


@dataclass(frozen=True)
class _Token:
    kind: str  # noun/adj/verb/prep/other
    lemma: str
    start: int
    end: int


def _classify(words, lexicon: ParserLexicon) -> list[_Token]:
    """Merge multiword prepositions (longest first), then tag word classes."""
    tokens = []
    i = 0
    while i < len(words):
        word, start, end = words[i]
        merged = False
        for cand in lexicon._multi_index.get(word, ()):
            n = len(cand)
            if i + n <= len(words) and tuple(w for w, _, _ in words[i:i + n]) == cand:
                tokens.append(_Token("prep", lexicon.multiword_preps[cand],
                                     start, words[i + n - 1][2]))
                i += n
                merged = True
                break
        if merged:
            continue
        kind = lexicon.word_kind(word)
        lemma = lexicon.lemma(kind, word) if kind != "other" else word
        tokens.append(_Token(kind, lemma, start, end))
        i += 1
    return tokens


def _relation_unit(between: list[_Token]):
    """First verb/prep among `between`; a verb fuses with an adjacent prep."""
    for j, tok in enumerate(between):
        if tok.kind == "prep":
            return [j]
        if tok.kind == "verb":
            if j + 1 < len(between) and between[j + 1].kind == "prep":
                return [j, j + 1]
            return [j]
    return None


def parse(caption: str, lexicon: ParserLexicon) -> SceneGraph:
    """Extract a SceneGraph from `caption`. Unknown words are ignored."""
    tokens = _classify(split_words(caption), lexicon)

    objects = []
    obj_index_at = {}  # token position -> object index
    noun_positions = []
    for pos, tok in enumerate(tokens):
        if tok.kind == "noun":
            obj_index_at[pos] = len(objects)
            objects.append(ObjectNode(tok.lemma, (tok.start, tok.end)))
            noun_positions.append(pos)

    attributes = []
    for pos in noun_positions:
        run_start = pos
        while run_start > 0 and tokens[run_start - 1].kind == "adj":
            run_start -= 1
        for j in range(run_start, pos):
            adj = tokens[j]
            attributes.append(AttributePair(adj.lemma, (adj.start, adj.end),
                                            obj_index_at[pos]))

    relations = []
    for left, right in zip(noun_positions, noun_positions[1:]):
        between = tokens[left + 1:right]
        unit = _relation_unit(between)
        if unit is None:
            continue
        if len(between) - len(unit) > RELATION_WINDOW:
            continue
        lemma = "-".join(between[j].lemma for j in unit)
        span = (between[unit[0]].start, between[unit[-1]].end)
        relations.append(RelationTriplet(obj_index_at[left], lemma, span,
                                         obj_index_at[right]))

    return SceneGraph(caption, tuple(objects), tuple(attributes),
                      tuple(relations))


@dataclass(frozen=True)
class NodeCountSummary:
    graphs: int
    objects: int
    attributes: int
    relations: int

    @property
    def total(self) -> int:
        return self.objects + self.attributes + self.relations

    def ratios(self) -> dict[str, float]:
        if self.total == 0:
            return {OBJECT: 0.0, ATTRIBUTE: 0.0, RELATIONSHIP: 0.0}
        return {OBJECT: self.objects / self.total,
                ATTRIBUTE: self.attributes / self.total,
                RELATIONSHIP: self.relations / self.total}


def graph_stats(graphs) -> NodeCountSummary:
    """Node counts and per-category ratios over a collection of graphs."""
    n_obj = n_attr = n_rel = n = 0
    for g in graphs:
        n += 1
        n_obj += len(g.objects)
        n_attr += len(g.attributes)
        n_rel += len(g.relations)
    return NodeCountSummary(n, n_obj, n_attr, n_rel)
