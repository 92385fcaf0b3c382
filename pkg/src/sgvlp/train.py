"""Deterministic step-based training loop with checkpointing, metric
logging, and the node-masking-vs-random ablation switch.

All randomness flows from the train seed through tagged SeedSequence
streams keyed by absolute step / instance counters, so a run of n+m steps
is bitwise identical to a run of n steps resumed for m more.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

import sgvlp.numerics as nm
from sgvlp._fileio import write_atomic
from sgvlp.corpus import split_pairs
from sgvlp.masking import (SENTINEL, MaskingPolicy, build_instance, make_batch,
                           prepare_caption)
from sgvlp.model import (ModelConfig, ModelParams, forward, init_params,
                         load_checkpoint, loss, save_checkpoint)
from sgvlp.numerics import AdamState, adam_step, clip_global_norm, noam_lr
from sgvlp.scenegraph import parse
from sgvlp.textproc import build_vocab, encode

MODE_SGP = "sgp"
MODE_RANDOM_ONLY = "random-only"

# SeedSequence stream tags
_SAMPLE, _MASK, _DROPOUT, _CALIBRATE, _INIT = 1, 2, 3, 4, 5


class TrainingAborted(RuntimeError):
    """Raised when the loss stops being finite."""

    def __init__(self, step, breakdown):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 32
    seed: int = 0
    peak_lr: float = 1e-4
    warmup_steps: int = 0          # 0 -> 10% of steps
    policy: MaskingPolicy = MaskingPolicy()
    mode: str = MODE_SGP
    checkpoint_interval: int = 0   # 0 -> final checkpoint only
    log_interval: int = 50
    clip_norm: float = 1.0
    holdout_fraction: float = 0.2

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in (MODE_SGP, MODE_RANDOM_ONLY):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")

    @property
    def warmup(self) -> int:
        return self.warmup_steps if self.warmup_steps > 0 else max(
            1, self.steps // 10)


class OtherImages:
    """View of an image list with one index removed; avoids per-instance
    list copies when drawing negative pairs."""

    def __init__(self, images, exclude: int):
        self._images = images
        self._exclude = exclude

    def __len__(self):
        return len(self._images) - 1

    def __getitem__(self, k):
        return self._images[k if k < self._exclude else k + 1]

    def __bool__(self):
        return len(self) > 0


@dataclass
class PreparedData:
    """Corpus after parsing, tokenization, and alignment."""
    vocab: object
    train_entries: list   # (caption, image, graph, aligned, prepared)
    holdout_entries: list
    max_tokens: int
    max_regions: int

    def __post_init__(self):
        self.train_images = [e[1] for e in self.train_entries]


def prepare_data(pairs, lexicon, vocab=None, holdout_fraction=0.2) -> PreparedData:
    """Parse and align every pair; build the vocabulary when not given."""
    graphs = [parse(c.text, lexicon) for c, _ in pairs]
    if vocab is None:
        vocab = build_vocab([c.text for c, _ in pairs],
                            extra_words=lexicon.all_surface_forms())
    entries = []
    for (caption, image), graph in zip(pairs, graphs):
        ac = encode(caption.text, graph, vocab)
        entries.append((caption, image, graph, ac, prepare_caption(ac, graph)))
    train, holdout = split_pairs(entries, holdout_fraction)
    max_tokens = max(len(e[3].token_ids) for e in entries)
    max_regions = max(len(e[1].regions) for e in entries)
    return PreparedData(vocab, train, holdout, max_tokens, max_regions)


def _instance_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, _MASK, index]).generate_state(1)[0])


def expected_labels_per_instance(data: PreparedData, policy: MaskingPolicy,
                                 seed: int, min_samples=24000) -> float:
    """Monte-Carlo estimate of mean labeled token positions per instance.

    Runs the real instance builder (labels only depend on text masking) on
    a dedicated seed stream with negative sampling disabled.
    """
    probe = replace(policy, p_neg=0.0, region_mask_rate=0.0)
    entries = data.train_entries
    passes = max(1, int(np.ceil(min_samples / max(len(entries), 1))))
    total = 0
    count = 0
    for p in range(passes):
        for j, (caption, image, graph, ac, prep) in enumerate(entries):
            s = int(np.random.SeedSequence(
                [seed, _CALIBRATE, p * len(entries) + j]).generate_state(1)[0])
            inst = build_instance(ac, graph, image, probe, data.vocab, s,
                                  prepared=prep)
            total += int((inst.token_labels != SENTINEL).sum())
            count += 1
    return total / count


def effective_policy(data: PreparedData, tcfg: TrainConfig) -> MaskingPolicy:
    """The policy actually used: in random-only mode node masking is off
    and the token rate is recalibrated to keep the expected labeled-token
    count equal to the node-masking mode's."""
    if tcfg.mode == MODE_SGP:
        return tcfg.policy
    target = expected_labels_per_instance(data, tcfg.policy, tcfg.seed)
    # with node masking off, every non-special token is eligible, so the
    # expected label count is exactly rate * mean(non-special tokens)
    mean_tokens = float(np.mean([len(e[3].token_ids) - 2
                                 for e in data.train_entries]))
    rate = min(1.0, target / mean_tokens)
    return replace(tcfg.policy, node_mask_rate=0.0, token_mask_rate=rate)


@dataclass
class TrainResult:
    params: ModelParams
    adam: AdamState
    config: ModelConfig
    policy: MaskingPolicy
    step: int
    metrics: list
    step_totals: list
    checkpoint_path: str | None = None


def _build_batch(data: PreparedData, policy, tcfg, mcfg, step: int):
    rng = np.random.default_rng(
        np.random.SeedSequence([tcfg.seed, _SAMPLE, step]))
    picks = rng.integers(0, len(data.train_entries), size=tcfg.batch_size)
    instances = []
    for i, j in enumerate(picks):
        caption, image, graph, ac, prep = data.train_entries[int(j)]
        inst = build_instance(
            ac, graph, image, policy, data.vocab,
            _instance_seed(tcfg.seed, (step - 1) * tcfg.batch_size + i),
            negatives=OtherImages(data.train_images, int(j)),
            caption_id=caption.caption_id, prepared=prep)
        instances.append(inst)
    return make_batch(instances, data.max_tokens, data.max_regions,
                      dtype=mcfg.np_dtype)


def _adam_extras(adam: AdamState, step: int) -> dict:
    extras = {"trainer.step": np.array([float(step)]),
              "adam.t": np.array([float(adam.t)])}
    for name, m in adam.m.items():
        extras[f"adam.m.{name}"] = m
    for name, v in adam.v.items():
        extras[f"adam.v.{name}"] = v
    return extras


def _checkpoint(path, mcfg, params, adam, step):
    save_checkpoint(path, mcfg, params, _adam_extras(adam, step))


def _run_steps(data, mcfg, tcfg, params, adam, start_step, out_dir):
    policy = effective_policy(data, tcfg)
    metrics = []
    step_totals = []
    last = None
    for step in range(start_step + 1, tcfg.steps + 1):
        batch = _build_batch(data, policy, tcfg, mcfg, step)
        drop_rng = np.random.default_rng(
            np.random.SeedSequence([tcfg.seed, _DROPOUT, step]))
        out = forward(params, mcfg, batch, mode="train", rng=drop_rng)
        breakdown = loss(out, batch)
        total = breakdown.total.item()
        if not np.isfinite(total):
            raise TrainingAborted(step, last)
        last = breakdown.to_floats()
        step_totals.append(total)
        nm.backward(breakdown.total)
        clip_global_norm(dict(params.items()), tcfg.clip_norm)
        lr = noam_lr(step, mcfg.text.hidden, tcfg.warmup, tcfg.peak_lr)
        adam_step(dict(params.items()), adam, lr)
        if step % tcfg.log_interval == 0 or step == tcfg.steps:
            metrics.append({"step": step, "lr": lr, **last})
        if out_dir and tcfg.checkpoint_interval \
                and step % tcfg.checkpoint_interval == 0 and step < tcfg.steps:
            _checkpoint(os.path.join(out_dir, f"checkpoint-{step}.sgvl"),
                        mcfg, params, adam, step)

    checkpoint_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint_path = os.path.join(out_dir, "checkpoint.sgvl")
        _checkpoint(checkpoint_path, mcfg, params, adam, tcfg.steps)
        lines = [json.dumps(row) for row in metrics]
        write_atomic(os.path.join(out_dir, "metrics.jsonl"),
                     "\n".join(lines) + ("\n" if lines else ""))
        data.vocab.save(os.path.join(out_dir, "vocab.txt"))
    return TrainResult(params, adam, mcfg, policy, tcfg.steps, metrics,
                       step_totals, checkpoint_path)


def train(data: PreparedData, mcfg: ModelConfig, tcfg: TrainConfig,
          out_dir=None) -> TrainResult:
    """Run `tcfg.steps` optimizer steps from fresh parameters."""
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    params = init_params(mcfg, seed=int(np.random.SeedSequence(
        [tcfg.seed, _INIT]).generate_state(1)[0]))
    adam = AdamState(dict(params.items()))
    return _run_steps(data, mcfg, tcfg, params, adam, 0, out_dir)


def _config_diff(a: ModelConfig, b: ModelConfig) -> list:
    fields = json.loads(a.to_json())
    other = json.loads(b.to_json())
    return [f"{k}: {fields[k]} != {other[k]}"
            for k in fields if fields[k] != other[k]]


def resume(checkpoint_path, data: PreparedData, mcfg: ModelConfig,
           tcfg: TrainConfig, out_dir=None) -> TrainResult:
    """Continue a checkpoint up to `tcfg.steps` total optimizer steps."""
    saved_cfg, params, extras = load_checkpoint(checkpoint_path)
    diffs = _config_diff(saved_cfg, mcfg)
    if diffs:
        raise ValueError(
            f"checkpoint config mismatch: {'; '.join(diffs)}")
    adam = AdamState(dict(params.items()))
    adam.t = int(round(float(extras["adam.t"][0])))
    for name in params.names():
        adam.m[name] = np.ascontiguousarray(extras[f"adam.m.{name}"])
        adam.v[name] = np.ascontiguousarray(extras[f"adam.v.{name}"])
    start_step = int(round(float(extras["trainer.step"][0])))
    if start_step >= tcfg.steps:
        return TrainResult(params, adam, saved_cfg, tcfg.policy, start_step,
                           [], [], checkpoint_path)
    return _run_steps(data, mcfg, tcfg, params, adam, start_step, out_dir)
