"""Subword tokenization and alignment of scene-graph nodes to token spans.

Normalization is lowercasing plus ASCII punctuation splitting (handled by
`scenegraph.split_words`). The vocabulary always carries single-character
pieces for the whole corpus alphabet, so greedy longest-match segmentation
is total and `[UNK]` never appears for normalized text.
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass

from sgvlp.scenegraph import SceneGraph, split_words

PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN, MASK_TOKEN = SPECIAL_TOKENS = (
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
CONTINUATION = "##"

_BASE_ALPHABET = sorted(set(string.ascii_lowercase + string.digits
                            + ".,!?;:'\"()-"))


class VocabError(ValueError):
    """Invalid vocabulary contents."""


class AlignmentError(ValueError):
    """A scene-graph node could not be mapped to a token span."""


class Vocab:
    """Dense token<->id mapping with the five special tokens at ids 0..4."""

    def __init__(self, tokens):
        self.id_to_token = tuple(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            dupes = [t for t, c in Counter(self.id_to_token).items() if c > 1]
            raise VocabError(f"duplicate tokens: {dupes[:5]}")
        if self.id_to_token[:5] != SPECIAL_TOKENS:
            raise VocabError(
                f"first five tokens must be {SPECIAL_TOKENS}, "
                f"got {self.id_to_token[:5]}")

    def __len__(self):
        return len(self.id_to_token)

    @property
    def pad_id(self):
        return 0

    @property
    def unk_id(self):
        return 1

    @property
    def cls_id(self):
        return 2

    @property
    def sep_id(self):
        return 3

    @property
    def mask_id(self):
        return 4

    @property
    def special_ids(self):
        return (0, 1, 2, 3, 4)

    def save(self, path):
        from sgvlp._fileio import write_atomic
        write_atomic(path, "\n".join(self.id_to_token) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(tokens)


def build_vocab(texts, extra_words=(), max_size=4096) -> Vocab:
    """Frequency vocabulary over normalized `texts` plus `extra_words`,
    with full single-character fallback pieces. Deterministic."""
    counts = Counter()
    alphabet = set(_BASE_ALPHABET)
    for text in texts:
        for word, _, _ in split_words(text):
            counts[word] += 1
            alphabet.update(word)
    for word in extra_words:
        for piece, _, _ in split_words(word):
            if piece not in counts:
                counts[piece] = 0
            alphabet.update(piece)

    tokens = list(SPECIAL_TOKENS)
    tokens.extend(sorted(alphabet))
    tokens.extend(CONTINUATION + ch for ch in sorted(alphabet))
    # single-char words are already covered by the fallback pieces
    words = sorted(counts, key=lambda w: (-counts[w], w))
    tokens.extend(w for w in words if len(w) > 1)
    return Vocab(tokens[:max_size])


def wordpiece_word(word: str, vocab: Vocab) -> list[str]:
    """Greedy longest-match-first pieces of one normalized word."""
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab.token_to_id:
                found = piece
                break
            end -= 1
        if found is None:
            return [UNK_TOKEN]
        pieces.append(found)
        start = end
    return pieces


def wordpiece(text: str, vocab: Vocab) -> list[int]:
    """Subword token ids for `text` (no special tokens added)."""
    ids = []
    for word, _, _ in split_words(text):
        ids.extend(vocab.token_to_id[p] for p in wordpiece_word(word, vocab))
    return ids


def normalize(text: str) -> str:
    return " ".join(word for word, _, _ in split_words(text))


def decode(ids, vocab: Vocab) -> str:
    """Surface text for token ids; inverse of `wordpiece` up to normalize."""
    words = []
    for i in ids:
        if not 0 <= i < len(vocab):
            raise VocabError(f"unknown token id {i}")
        tok = vocab.id_to_token[i]
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)


@dataclass
class AlignedCaption:
    """Tokenized caption with [CLS]/[SEP] and node -> token-span map.

    `node_spans` maps (category, node index) to a half-open token index
    range; spans never cover position 0 ([CLS]) or the final [SEP].
    """

    token_ids: tuple
    surface_tokens: tuple
    node_spans: dict

    def __len__(self):
        return len(self.token_ids)


def encode(caption: str, graph: SceneGraph, vocab: Vocab) -> AlignedCaption:
    """Tokenize `caption` and align every node of `graph` to a token span."""
    if graph.source != caption:
        raise ValueError("graph was parsed from a different caption")

    pieces = []   # surface piece strings
    offsets = []  # char (start, end) per piece
    for word, w_start, _ in split_words(caption):
        consumed = 0
        for piece in wordpiece_word(word, vocab):
            stripped = piece[len(CONTINUATION):] if piece.startswith(CONTINUATION) else piece
            if piece == UNK_TOKEN:
                stripped = word[consumed:]
            offsets.append((w_start + consumed, w_start + consumed + len(stripped)))
            pieces.append(piece)
            consumed += len(stripped)

    ids = [vocab.cls_id]
    ids += [vocab.token_to_id.get(p, vocab.unk_id) for p in pieces]
    ids.append(vocab.sep_id)
    surfaces = (CLS_TOKEN, *pieces, SEP_TOKEN)

    node_spans = {}
    for category, index in graph.nodes():
        c_lo, c_hi = graph.node_span(category, index)
        covered = [k for k, (s, e) in enumerate(offsets) if c_lo <= s and e <= c_hi]
        if not covered or covered != list(range(covered[0], covered[-1] + 1)):
            raise AlignmentError(
                f"{category} node {index} (chars {c_lo}:{c_hi}) has no "
                f"contiguous token span")
        node_spans[(category, index)] = (covered[0] + 1, covered[-1] + 2)

    return AlignedCaption(tuple(ids), surfaces, node_spans)
