"""Construction of pre-training instances: scene-graph node masking,
residual-token MLM, region masking, and image-text matching labels.

Selection is independent per node at `node_mask_rate` and the replacement
mode (mask/random/keep) is drawn per node, so the audited selection rate
and replacement mix are exact. Context preservation is then enforced as a
restoration pass: the owner span of every labeled attribute and both
endpoint spans of every labeled relationship are reverted to the original
tokens in the input (their labels, if any, stay). Those protected spans are
also excluded from the residual-MLM pool. Replacement-mode draws are
recorded per labeled span so audits can distinguish the drawn mix from
restoration effects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sgvlp.scenegraph import ATTRIBUTE, OBJECT, RELATIONSHIP, SceneGraph
from sgvlp.textproc import AlignedCaption, Vocab

SENTINEL = -1
TASK_NONE, TASK_MLM, TASK_OBJECT, TASK_ATTRIBUTE, TASK_RELATIONSHIP = range(5)
TASK_NAMES = {TASK_MLM: "mlm", TASK_OBJECT: "object",
              TASK_ATTRIBUTE: "attribute", TASK_RELATIONSHIP: "relationship"}
_CATEGORY_TASK = {OBJECT: TASK_OBJECT, ATTRIBUTE: TASK_ATTRIBUTE,
                  RELATIONSHIP: TASK_RELATIONSHIP}
MODE_MASK, MODE_RANDOM, MODE_KEEP = "mask", "random", "keep"

POSITIVE, NEGATIVE = 1, 0


@dataclass(frozen=True)
class MaskingPolicy:
    token_mask_rate: float = 0.15
    node_mask_rate: float = 0.30
    region_mask_rate: float = 0.15
    replace_mask: float = 0.80
    replace_random: float = 0.10
    replace_keep: float = 0.10
    p_neg: float = 0.5

    def __post_init__(self):
        for name in ("token_mask_rate", "node_mask_rate", "region_mask_rate",
                     "p_neg", "replace_mask", "replace_random", "replace_keep"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        mix = self.replace_mask + self.replace_random + self.replace_keep
        if abs(mix - 1.0) > 1e-9:
            raise ValueError(f"replacement mix sums to {mix}, expected 1")


@dataclass(frozen=True)
class LabelSpan:
    """One labeled token span: task, half-open range, originals, drawn mode."""
    task: int
    lo: int
    hi: int
    target_ids: tuple
    mode: str


@dataclass
class PretrainInstance:
    caption_id: str
    image_id: str
    input_ids: np.ndarray        # (T+2,) post-masking
    token_labels: np.ndarray     # (T+2,) original id where labeled, else -1
    token_tasks: np.ndarray      # (T+2,) TASK_* tags
    label_spans: tuple           # LabelSpan records
    attr_contexts: tuple         # (attr label span, owner token span)
    rel_contexts: tuple          # (rel label span, subject span, object span)
    region_features: np.ndarray  # (I, D_v) post-masking
    region_locations: np.ndarray  # (I, 5)
    region_labels: np.ndarray    # (I,) class_id where masked, else -1
    masked_regions: tuple
    itm_label: int               # POSITIVE / NEGATIVE
    rng_seed: int

    @property
    def is_positive(self):
        return self.itm_label == POSITIVE


@dataclass(frozen=True)
class PreparedCaption:
    """Numpy view of an aligned caption, reusable across instances."""
    ids: np.ndarray
    nodes: tuple       # (task, lo, hi) per node in canonical order
    attr_owner: dict   # node key -> owner (lo, hi)
    rel_endpoints: dict  # node key -> ((lo, hi), (lo, hi))


def prepare_caption(ac: AlignedCaption, graph: SceneGraph) -> PreparedCaption:
    nodes = []
    attr_owner = {}
    rel_endpoints = {}
    for key in graph.nodes():
        category, index = key
        lo, hi = ac.node_spans[key]
        nodes.append((_CATEGORY_TASK[category], lo, hi))
        if category == ATTRIBUTE:
            attr_owner[len(nodes) - 1] = ac.node_spans[
                (OBJECT, graph.attributes[index].owner)]
        elif category == RELATIONSHIP:
            rel = graph.relations[index]
            rel_endpoints[len(nodes) - 1] = (
                ac.node_spans[(OBJECT, rel.subject)],
                ac.node_spans[(OBJECT, rel.object)])
    return PreparedCaption(np.asarray(ac.token_ids, dtype=np.int64),
                           tuple(nodes), attr_owner, rel_endpoints)


def _draw_mode(policy: MaskingPolicy, u: float) -> str:
    if u < policy.replace_mask:
        return MODE_MASK
    if u < policy.replace_mask + policy.replace_random:
        return MODE_RANDOM
    return MODE_KEEP


def build_instance(ac: AlignedCaption, graph: SceneGraph, img, policy: MaskingPolicy,
                   vocab: Vocab, seed: int, negatives=(), caption_id: str = "",
                   prepared: PreparedCaption | None = None) -> PretrainInstance:
    """One pre-training instance; fully determined by its arguments.

    `negatives` is the pool of other images used for negative-pair
    swapping. Negative instances carry the same input corruption as
    positives but no prediction labels.
    """
    if policy.p_neg > 0 and not negatives:
        raise ValueError("p_neg > 0 requires a pool of negative images")
    rng = np.random.default_rng(seed)
    prep = prepared if prepared is not None else prepare_caption(ac, graph)

    itm_label = POSITIVE
    if policy.p_neg > 0 and rng.random() < policy.p_neg:
        img = negatives[int(rng.integers(len(negatives)))]
        itm_label = NEGATIVE

    original = prep.ids
    input_ids = original.copy()
    n = len(input_ids)
    claimed = np.zeros(n, dtype=bool)
    claimed[0] = claimed[-1] = True  # [CLS] / [SEP]
    token_labels = np.full(n, SENTINEL, dtype=np.int64)
    token_tasks = np.full(n, TASK_NONE, dtype=np.int8)
    label_spans = []

    def apply_span(task, lo, hi, mode):
        if mode == MODE_MASK:
            input_ids[lo:hi] = vocab.mask_id
        elif mode == MODE_RANDOM:
            input_ids[lo:hi] = rng.integers(len(vocab.special_ids), len(vocab),
                                            size=hi - lo)
        token_labels[lo:hi] = original[lo:hi]
        token_tasks[lo:hi] = task
        claimed[lo:hi] = True
        label_spans.append(LabelSpan(task, lo, hi,
                                     tuple(int(t) for t in original[lo:hi]),
                                     mode))

    # scene-graph nodes, canonical order, independent selection
    selected = rng.random(len(prep.nodes)) < policy.node_mask_rate
    for node_idx, (task, lo, hi) in enumerate(prep.nodes):
        if not selected[node_idx]:
            continue
        mode = _draw_mode(policy, rng.random())
        if claimed[lo:hi].any():
            continue  # overlapping spans: later node yields
        apply_span(task, lo, hi, mode)

    # context restoration: labeled attributes keep their owner visible,
    # labeled relationships keep both endpoints visible
    protected = np.zeros(n, dtype=bool)
    attr_contexts = []
    rel_contexts = []
    for node_idx, (task, lo, hi) in enumerate(prep.nodes):
        span_labeled = token_tasks[lo] == task and token_labels[lo] != SENTINEL
        if not span_labeled:
            continue
        if task == TASK_ATTRIBUTE:
            o_lo, o_hi = prep.attr_owner[node_idx]
            protected[o_lo:o_hi] = True
            attr_contexts.append(((lo, hi), (o_lo, o_hi)))
        elif task == TASK_RELATIONSHIP:
            (s_lo, s_hi), (e_lo, e_hi) = prep.rel_endpoints[node_idx]
            protected[s_lo:s_hi] = True
            protected[e_lo:e_hi] = True
            rel_contexts.append(((lo, hi), (s_lo, s_hi), (e_lo, e_hi)))
    if protected.any():
        input_ids[protected] = original[protected]

    # residual MLM over unclaimed, unprotected, non-special positions
    eligible = np.nonzero(~claimed & ~protected)[0]
    if eligible.size:
        picks = eligible[rng.random(eligible.size) < policy.token_mask_rate]
        for pos in picks:
            mode = _draw_mode(policy, rng.random())
            apply_span(TASK_MLM, int(pos), int(pos) + 1, mode)

    # region masking: zero the feature, keep the location
    features = img.feature_matrix().copy()
    locations = img.location_matrix()
    class_ids = img.class_ids()
    region_labels = np.full(len(features), SENTINEL, dtype=np.int64)
    masked = np.nonzero(rng.random(len(features)) < policy.region_mask_rate)[0]
    features[masked] = 0.0
    region_labels[masked] = class_ids[masked]

    if itm_label == NEGATIVE:
        token_labels[:] = SENTINEL
        token_tasks[:] = TASK_NONE
        label_spans = []
        attr_contexts = []
        rel_contexts = []
        region_labels[:] = SENTINEL

    return PretrainInstance(
        caption_id=caption_id,
        image_id=img.image_id,
        input_ids=input_ids,
        token_labels=token_labels,
        token_tasks=token_tasks,
        label_spans=tuple(label_spans),
        attr_contexts=tuple(attr_contexts),
        rel_contexts=tuple(rel_contexts),
        region_features=features,
        region_locations=locations,
        region_labels=region_labels,
        masked_regions=tuple(int(i) for i in masked),
        itm_label=itm_label,
        rng_seed=seed,
    )


@dataclass
class Batch:
    """Padded tensors for one forward pass."""
    token_ids: np.ndarray       # (B, T) int64
    token_mask: np.ndarray      # (B, T) 1.0 at real positions
    token_labels: np.ndarray    # (B, T)
    token_tasks: np.ndarray     # (B, T)
    region_features: np.ndarray  # (B, I, D_v)
    region_locations: np.ndarray  # (B, I, 5)
    region_mask: np.ndarray     # (B, I)
    region_labels: np.ndarray   # (B, I)
    itm_labels: np.ndarray      # (B,)

    @property
    def size(self):
        return len(self.token_ids)


def make_batch(instances, max_tokens: int, max_regions: int,
               dtype=np.float32) -> Batch:
    """Pad instances to (max_tokens, max_regions); [PAD]=0 ids, zero features."""
    b = len(instances)
    feat_dim = instances[0].region_features.shape[1]
    token_ids = np.zeros((b, max_tokens), dtype=np.int64)
    token_mask = np.zeros((b, max_tokens), dtype=dtype)
    token_labels = np.full((b, max_tokens), SENTINEL, dtype=np.int64)
    token_tasks = np.full((b, max_tokens), TASK_NONE, dtype=np.int8)
    features = np.zeros((b, max_regions, feat_dim), dtype=dtype)
    locations = np.zeros((b, max_regions, 5), dtype=dtype)
    region_mask = np.zeros((b, max_regions), dtype=dtype)
    region_labels = np.full((b, max_regions), SENTINEL, dtype=np.int64)
    itm = np.zeros(b, dtype=dtype)

    for k, inst in enumerate(instances):
        t = len(inst.input_ids)
        r = len(inst.region_features)
        if t > max_tokens:
            raise ValueError(f"instance has {t} tokens > max {max_tokens}")
        if r > max_regions:
            raise ValueError(f"instance has {r} regions > max {max_regions}")
        if inst.region_features.shape[1] != feat_dim:
            raise ValueError("inconsistent region feature dims in batch")
        token_ids[k, :t] = inst.input_ids
        token_mask[k, :t] = 1.0
        token_labels[k, :t] = inst.token_labels
        token_tasks[k, :t] = inst.token_tasks
        features[k, :r] = inst.region_features
        locations[k, :r] = inst.region_locations
        region_mask[k, :r] = 1.0
        region_labels[k, :r] = inst.region_labels
        itm[k] = inst.itm_label

    return Batch(token_ids, token_mask, token_labels, token_tasks,
                 features, locations, region_mask, region_labels, itm)


def instance_to_dict(inst: PretrainInstance) -> dict:
    """JSON-ready record matching the `mask` subcommand's output schema."""
    return {
        "caption_id": inst.caption_id,
        "image_id": inst.image_id,
        "input_ids": [int(i) for i in inst.input_ids],
        "labels": [{"pos": s.lo, "len": s.hi - s.lo,
                    "task": TASK_NAMES[s.task],
                    "target_ids": list(s.target_ids)}
                   for s in inst.label_spans],
        "masked_regions": list(inst.masked_regions),
        "itm_label": "positive" if inst.itm_label == POSITIVE else "negative",
        "rng_seed": inst.rng_seed,
    }
