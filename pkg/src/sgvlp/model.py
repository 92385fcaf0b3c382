"""Two-stream cross-modal transformer with co-attention blocks, task heads,
and the summed multi-task loss (object/attribute/relationship prediction,
MLM, masked-region classification, image-text matching).

Text and visual streams run BERT-style post-norm encoder layers; at each
co-attention point the streams exchange keys/values (text queries attend
over visual states and vice versa, both reading the pre-block states). The
MLM head is weight-tied to the word embedding table and serves the three
node-prediction tasks as well; tasks differ only in which positions carry
labels. The matching score is a single affine map of h_cls * h_img.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass

import numpy as np

import sgvlp.numerics as nm
from sgvlp._fileio import write_atomic
from sgvlp.masking import (SENTINEL, TASK_ATTRIBUTE, TASK_MLM, TASK_OBJECT,
                           TASK_RELATIONSHIP, Batch)
from sgvlp.numerics import Parameter, Tensor

CHECKPOINT_MAGIC = b"SGVL"
CHECKPOINT_VERSION = 1

_NEG = 1e9  # additive attention mask for padded keys


class ConfigError(ValueError):
    """Inconsistent model configuration."""


class CheckpointError(ValueError):
    """Unreadable or mismatched checkpoint file."""


@dataclass(frozen=True)
class StreamConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ffn: int = 256


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    text: StreamConfig = StreamConfig(4, 128, 4, 256)
    visual: StreamConfig = StreamConfig(2, 128, 4, 256)
    cross_blocks: int = 2
    text_cross_points: tuple = ()    # derived when empty
    visual_cross_points: tuple = ()
    region_feature_dim: int = 64
    region_classes: int = 24
    max_text_len: int = 64
    max_regions: int = 36
    dropout: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        for name, s in (("text", self.text), ("visual", self.visual)):
            if s.layers < 1 or s.hidden < 1 or s.ffn < 1:
                raise ConfigError(f"{name} stream sizes must be positive")
            if s.hidden % s.heads:
                raise ConfigError(
                    f"{name} hidden {s.hidden} not divisible by {s.heads} heads")
        if self.cross_blocks < 1:
            raise ConfigError("cross_blocks must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype}")
        if self.vocab_size < 6:
            raise ConfigError("vocab too small")
        object.__setattr__(self, "text_cross_points",
                           self._points(self.text_cross_points, self.text))
        object.__setattr__(self, "visual_cross_points",
                           self._points(self.visual_cross_points, self.visual))

    def _points(self, points, stream: StreamConfig):
        if not points:
            points = tuple(round(stream.layers * (i + 1) / self.cross_blocks)
                           for i in range(self.cross_blocks))
        points = tuple(int(p) for p in points)
        if len(points) != self.cross_blocks:
            raise ConfigError(
                f"{len(points)} cross points for {self.cross_blocks} blocks")
        if list(points) != sorted(set(points)) or points[0] < 1 \
                or points[-1] > stream.layers:
            raise ConfigError(f"invalid cross points {points} "
                              f"for {stream.layers} layers")
        return points

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_json(self) -> str:
        d = asdict(self)
        d["text_cross_points"] = list(self.text_cross_points)
        d["visual_cross_points"] = list(self.visual_cross_points)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["text"] = StreamConfig(**d["text"])
        d["visual"] = StreamConfig(**d["visual"])
        d["text_cross_points"] = tuple(d["text_cross_points"])
        d["visual_cross_points"] = tuple(d["visual_cross_points"])
        return cls(**d)


class ModelParams:
    """Flat, ordered name -> Parameter registry."""

    def __init__(self, tensors):
        self._tensors = dict(tensors)

    def __getitem__(self, name) -> Parameter:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    def values(self):
        return self._tensors.values()

    def zero_grads(self):
        for p in self._tensors.values():
            p.grad = None


def _attention_shapes(q_hidden, kv_hidden):
    return {
        "wq": (q_hidden, q_hidden), "bq": (q_hidden,),
        "wk": (kv_hidden, q_hidden), "bk": (q_hidden,),
        "wv": (kv_hidden, q_hidden), "bv": (q_hidden,),
        "wo": (q_hidden, q_hidden), "bo": (q_hidden,),
    }


def _block_shapes(prefix, q_hidden, kv_hidden, ffn):
    shapes = {f"{prefix}.attn.{k}": v
              for k, v in _attention_shapes(q_hidden, kv_hidden).items()}
    shapes.update({
        f"{prefix}.attn_ln.gain": (q_hidden,), f"{prefix}.attn_ln.bias": (q_hidden,),
        f"{prefix}.ffn.w1": (q_hidden, ffn), f"{prefix}.ffn.b1": (ffn,),
        f"{prefix}.ffn.w2": (ffn, q_hidden), f"{prefix}.ffn.b2": (q_hidden,),
        f"{prefix}.ffn_ln.gain": (q_hidden,), f"{prefix}.ffn_ln.bias": (q_hidden,),
    })
    return shapes


def param_shapes(config: ModelConfig) -> dict:
    """Every learnable tensor's shape, in construction order."""
    t, v = config.text, config.visual
    if t.hidden != v.hidden:
        raise ConfigError(
            "the matching head multiplies h_cls and h_img elementwise; "
            f"stream hidden sizes must match (got {t.hidden} vs {v.hidden})")
    shapes = {
        "text.word_emb": (config.vocab_size, t.hidden),
        "text.pos_emb": (config.max_text_len, t.hidden),
        "text.seg_emb": (2, t.hidden),
        "text.emb_ln.gain": (t.hidden,), "text.emb_ln.bias": (t.hidden,),
        "vis.feat_proj.w": (config.region_feature_dim, v.hidden),
        "vis.feat_proj.b": (v.hidden,),
        "vis.loc_proj.w": (5, v.hidden), "vis.loc_proj.b": (v.hidden,),
        "vis.seg_emb": (1, v.hidden),
        "vis.emb_ln.gain": (v.hidden,), "vis.emb_ln.bias": (v.hidden,),
    }
    for i in range(t.layers):
        shapes.update(_block_shapes(f"text.layer{i}", t.hidden, t.hidden, t.ffn))
    for i in range(v.layers):
        shapes.update(_block_shapes(f"vis.layer{i}", v.hidden, v.hidden, v.ffn))
    for b in range(config.cross_blocks):
        shapes.update(_block_shapes(f"cross{b}.t2v", t.hidden, v.hidden, t.ffn))
        shapes.update(_block_shapes(f"cross{b}.v2t", v.hidden, t.hidden, v.ffn))
    shapes.update({
        "mlm.transform.w": (t.hidden, t.hidden), "mlm.transform.b": (t.hidden,),
        "mlm.ln.gain": (t.hidden,), "mlm.ln.bias": (t.hidden,),
        "mlm.bias": (config.vocab_size,),
        "region_head.w": (v.hidden, config.region_classes),
        "region_head.b": (config.region_classes,),
        "itm.w": (t.hidden, 1), "itm.b": (1,),
    })
    return shapes


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Truncated-normal weights (std 0.02), zero biases, unit LN gains."""
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    dtype = config.np_dtype
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("ln.gain"):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith((".bias", ".b", ".b1", ".b2", "bq", "bk", "bv", "bo")):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = nm.truncated_normal(rng, shape, std=0.02, dtype=dtype)
        tensors[name] = Parameter(data)
    return ModelParams(tensors)


@dataclass
class ModelOutput:
    text_hidden: Tensor    # (B, T, H_t)
    visual_hidden: Tensor  # (B, I+1, H_v)
    h_cls: Tensor          # (B, H_t)
    h_img: Tensor          # (B, H_v)
    mlm_logits: Tensor     # (B, T, V)
    region_logits: Tensor  # (B, I+1, C)
    itm_scores: Tensor     # (B,)


@dataclass
class LossBreakdown:
    l_obj: Tensor
    l_attr: Tensor
    l_rel: Tensor
    l_mlm: Tensor
    l_region: Tensor
    l_itm: Tensor
    total: Tensor

    def to_floats(self) -> dict:
        return {name: float(getattr(self, name).data)
                for name in ("l_obj", "l_attr", "l_rel", "l_mlm",
                             "l_region", "l_itm", "total")}


def _linear(x, params, prefix):
    return nm.add(nm.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def _attention(q_states, kv_states, key_mask, params, prefix, heads,
               dropout_rate, rng):
    """Multi-head attention of q_states over kv_states.

    `key_mask` is (B, S) with 1.0 at attendable positions; padded keys get
    an additive -1e9 so they receive no attention mass.
    """
    bsz, q_len, q_hidden = q_states.shape
    kv_len = kv_states.shape[1]
    head_dim = q_hidden // heads

    def split(x):
        x = nm.reshape(x, (bsz, x.shape[1], heads, head_dim))
        return nm.transpose(x, (0, 2, 1, 3))

    q = split(nm.add(nm.matmul(q_states, params[f"{prefix}.wq"]),
                     params[f"{prefix}.bq"]))
    k = split(nm.add(nm.matmul(kv_states, params[f"{prefix}.wk"]),
                     params[f"{prefix}.bk"]))
    v = split(nm.add(nm.matmul(kv_states, params[f"{prefix}.wv"]),
                     params[f"{prefix}.bv"]))

    scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))),
                      1.0 / np.sqrt(head_dim))
    bias = ((key_mask - 1.0) * _NEG).astype(key_mask.dtype)
    scores = nm.add(scores, Tensor(bias[:, None, None, :]))
    probs = nm.softmax(scores, axis=-1)
    probs = nm.dropout(probs, dropout_rate, rng)
    ctx = nm.matmul(probs, v)
    ctx = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (bsz, q_len, q_hidden))
    return nm.add(nm.matmul(ctx, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _ffn(x, params, prefix):
    h = nm.gelu(nm.add(nm.matmul(x, params[f"{prefix}.w1"]),
                       params[f"{prefix}.b1"]))
    return nm.add(nm.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _block(q_states, kv_states, key_mask, params, prefix, heads,
           dropout_rate, rng):
    """Post-norm transformer block: attention + FFN with residuals."""
    attn = _attention(q_states, kv_states, key_mask, params, f"{prefix}.attn",
                      heads, dropout_rate, rng)
    attn = nm.dropout(attn, dropout_rate, rng)
    h = nm.layer_norm(nm.add(q_states, attn),
                      params[f"{prefix}.attn_ln.gain"],
                      params[f"{prefix}.attn_ln.bias"])
    ff = nm.dropout(_ffn(h, params, f"{prefix}.ffn"), dropout_rate, rng)
    return nm.layer_norm(nm.add(h, ff),
                         params[f"{prefix}.ffn_ln.gain"],
                         params[f"{prefix}.ffn_ln.bias"])


def embed_text(token_ids, segment_ids, params, config: ModelConfig,
               dropout_rate=0.0, rng=None):
    """Word + segment + position embeddings, layer-normed."""
    bsz, t = token_ids.shape
    if t > config.max_text_len:
        raise nm.ShapeError(f"{t} tokens exceed max_text_len "
                            f"{config.max_text_len}")
    words = nm.embedding_lookup(params["text.word_emb"], token_ids)
    segs = nm.embedding_lookup(params["text.seg_emb"], segment_ids)
    pos = nm.slice_(params["text.pos_emb"], (slice(0, t),))
    x = nm.add(nm.add(words, segs), nm.reshape(pos, (1, t, config.text.hidden)))
    x = nm.layer_norm(x, params["text.emb_ln.gain"], params["text.emb_ln.bias"])
    return nm.dropout(x, dropout_rate, rng)


def embed_regions(features, locations, region_mask, params,
                  config: ModelConfig, dropout_rate=0.0, rng=None):
    """Region sequence with the whole-image slot prepended.

    Slot 0 is the projected mean of the real region features plus the
    projected full-image location (0, 0, 1, 1, 1).
    """
    bsz, n_regions, feat_dim = features.shape
    if feat_dim != config.region_feature_dim:
        raise nm.ShapeError(f"feature dim {feat_dim} != configured "
                            f"{config.region_feature_dim}")
    if n_regions > config.max_regions:
        raise nm.ShapeError(f"{n_regions} regions exceed max_regions "
                            f"{config.max_regions}")
    dtype = features.dtype

    counts = np.maximum(region_mask.sum(axis=1, keepdims=True), 1.0)
    feats = Tensor(features)
    mean_feat = nm.mul(
        nm.sum_(nm.mul(feats, Tensor(region_mask[:, :, None])), axis=1),
        Tensor((1.0 / counts).astype(dtype)))
    full_loc = np.tile(np.array([0, 0, 1, 1, 1], dtype=dtype), (bsz, 1))

    img_slot = nm.add(_linear(nm.reshape(mean_feat, (bsz, 1, feat_dim)),
                              params, "vis.feat_proj"),
                      _linear(Tensor(full_loc[:, None, :]),
                              params, "vis.loc_proj"))

    region_slots = nm.add(_linear(feats, params, "vis.feat_proj"),
                          _linear(Tensor(locations), params, "vis.loc_proj"))
    x = nm.concat([img_slot, region_slots], axis=1)
    seg = nm.reshape(nm.slice_(params["vis.seg_emb"], (slice(0, 1),)),
                     (1, 1, config.visual.hidden))
    x = nm.add(x, seg)
    x = nm.layer_norm(x, params["vis.emb_ln.gain"], params["vis.emb_ln.bias"])
    return nm.dropout(x, dropout_rate, rng)


def forward(params: ModelParams, config: ModelConfig, batch: Batch,
            mode: str = "train", rng=None) -> ModelOutput:
    """Run both streams with co-attention exchanges; eval mode is
    deterministic (dropout off)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode {mode!r}")
    dropout_rate = config.dropout if mode == "train" else 0.0
    if dropout_rate > 0 and rng is None:
        raise ValueError("train-mode forward needs an rng for dropout")

    dtype = config.np_dtype
    token_mask = batch.token_mask.astype(dtype)
    region_mask = batch.region_mask.astype(dtype)
    segment_ids = np.zeros_like(batch.token_ids)

    t_states = embed_text(batch.token_ids, segment_ids, params, config,
                          dropout_rate, rng)
    v_states = embed_regions(batch.region_features.astype(dtype),
                             batch.region_locations.astype(dtype),
                             region_mask, params, config, dropout_rate, rng)
    vis_mask = np.concatenate(
        [np.ones((len(region_mask), 1), dtype=dtype), region_mask], axis=1)

    t_done = v_done = 0
    for b in range(config.cross_blocks):
        for i in range(t_done, config.text_cross_points[b]):
            t_states = _block(t_states, t_states, token_mask, params,
                              f"text.layer{i}", config.text.heads,
                              dropout_rate, rng)
        t_done = config.text_cross_points[b]
        for i in range(v_done, config.visual_cross_points[b]):
            v_states = _block(v_states, v_states, vis_mask, params,
                              f"vis.layer{i}", config.visual.heads,
                              dropout_rate, rng)
        v_done = config.visual_cross_points[b]
        t_new = _block(t_states, v_states, vis_mask, params, f"cross{b}.t2v",
                       config.text.heads, dropout_rate, rng)
        v_new = _block(v_states, t_states, token_mask, params, f"cross{b}.v2t",
                       config.visual.heads, dropout_rate, rng)
        t_states, v_states = t_new, v_new
    for i in range(t_done, config.text.layers):
        t_states = _block(t_states, t_states, token_mask, params,
                          f"text.layer{i}", config.text.heads,
                          dropout_rate, rng)
    for i in range(v_done, config.visual.layers):
        v_states = _block(v_states, v_states, vis_mask, params,
                          f"vis.layer{i}", config.visual.heads,
                          dropout_rate, rng)

    h_cls = nm.slice_(t_states, (slice(None), 0))
    h_img = nm.slice_(v_states, (slice(None), 0))

    # MLM head, weight-tied to the word embeddings
    h = nm.gelu(_linear(t_states, params, "mlm.transform"))
    h = nm.layer_norm(h, params["mlm.ln.gain"], params["mlm.ln.bias"])
    mlm_logits = nm.add(
        nm.matmul(h, nm.transpose(params["text.word_emb"], (1, 0))),
        params["mlm.bias"])

    region_logits = _linear(v_states, params, "region_head")

    fused = nm.mul(h_cls, h_img)
    itm = nm.add(nm.matmul(fused, params["itm.w"]), params["itm.b"])
    itm_scores = nm.reshape(itm, (len(batch.token_ids),))

    return ModelOutput(t_states, v_states, h_cls, h_img, mlm_logits,
                       region_logits, itm_scores)


def _task_loss(logits_2d, labels_flat, tasks_flat, task):
    labels = np.where(tasks_flat == task, labels_flat, SENTINEL)
    return nm.cross_entropy(logits_2d, labels, ignore_index=SENTINEL)


def loss(out: ModelOutput, batch: Batch) -> LossBreakdown:
    """Per-task mean cross-entropies plus ITM BCE; total is their sum."""
    bsz, t, vocab = out.mlm_logits.shape
    logits_2d = nm.reshape(out.mlm_logits, (bsz * t, vocab))
    labels = batch.token_labels.reshape(-1)
    tasks = batch.token_tasks.reshape(-1)

    l_obj = _task_loss(logits_2d, labels, tasks, TASK_OBJECT)
    l_attr = _task_loss(logits_2d, labels, tasks, TASK_ATTRIBUTE)
    l_rel = _task_loss(logits_2d, labels, tasks, TASK_RELATIONSHIP)
    l_mlm = _task_loss(logits_2d, labels, tasks, TASK_MLM)

    n_regions = batch.region_labels.shape[1]
    region_logits = nm.reshape(
        nm.slice_(out.region_logits, (slice(None), slice(1, n_regions + 1))),
        (bsz * n_regions, out.region_logits.shape[2]))
    l_region = nm.cross_entropy(region_logits, batch.region_labels.reshape(-1),
                                ignore_index=SENTINEL)

    l_itm = nm.bce_with_logits(out.itm_scores, batch.itm_labels)

    total = nm.add(nm.add(nm.add(l_obj, l_attr), nm.add(l_rel, l_mlm)),
                   nm.add(l_region, l_itm))
    return LossBreakdown(l_obj, l_attr, l_rel, l_mlm, l_region, l_itm, total)


# ---------------------------------------------------------------------------
# Checkpoint serialization: magic, version, config JSON, named raw tensors.


def _dtype_tag(dtype):
    return "<f4" if np.dtype(dtype) == np.float32 else "<f8"


def save_checkpoint(path, config: ModelConfig, params: ModelParams,
                    extras: dict | None = None):
    """extras: additional named float arrays (optimizer state, counters)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(np.uint32(CHECKPOINT_VERSION).tobytes())
    blob = config.to_json().encode("utf-8")
    buf.write(np.uint32(len(blob)).tobytes())
    buf.write(blob)

    def put(name, arr):
        encoded = name.encode("utf-8")
        buf.write(np.uint32(len(encoded)).tobytes())
        buf.write(encoded)
        buf.write(np.uint32(arr.ndim).tobytes())
        for dim in arr.shape:
            buf.write(np.uint32(dim).tobytes())
        buf.write(np.ascontiguousarray(arr, dtype=_dtype_tag(config.np_dtype))
                  .tobytes())

    for name, p in params.items():
        put(name, p.data)
    for name, arr in (extras or {}).items():
        put(name, np.asarray(arr))
    write_atomic(path, buf.getvalue())


def load_checkpoint(path):
    """Returns (config, ModelParams, extras dict); validates every shape."""
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    offset = 4

    def u32():
        nonlocal offset
        val = int(np.frombuffer(view, np.uint32, 1, offset)[0])
        offset += 4
        return val

    version = u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    blob_len = u32()
    config = ModelConfig.from_json(bytes(view[offset:offset + blob_len]).decode())
    offset += blob_len

    dtype = np.dtype(_dtype_tag(config.np_dtype))
    tensors = {}
    while offset < len(raw):
        name_len = u32()
        name = bytes(view[offset:offset + name_len]).decode()
        offset += name_len
        rank = u32()
        shape = tuple(u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(view, dtype, count, offset).reshape(shape).copy()
        offset += count * dtype.itemsize
        tensors[name] = arr

    expected = param_shapes(config)
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing[:3]}")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, "
                f"config implies {shape}")
    params = ModelParams({n: Parameter(tensors.pop(n)) for n in expected})
    return config, params, tensors
