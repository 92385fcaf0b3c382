"""Command-line entry point wiring the pipeline together.

Subcommands: parse, gen-corpus, mask, train, eval-cloze, eval-itm, ablate.
Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
abort during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from sgvlp._fileio import write_atomic
from sgvlp.corpus import (CorpusError, GeneratorConfig, generate_corpus,
                          load_pairs, save_captions, save_images)
from sgvlp.masking import MaskingPolicy, build_instance, instance_to_dict
from sgvlp.model import (CheckpointError, ConfigError, ModelConfig,
                         StreamConfig, load_checkpoint)
from sgvlp.scenegraph import LexiconError, load_lexicon, parse
from sgvlp.textproc import AlignmentError, Vocab, VocabError
from sgvlp import evaluate, train as training

BUNDLED_LEXICON = os.path.join(os.path.dirname(__file__), "data", "lexicon.txt")

_DATA_ERRORS = (CorpusError, LexiconError, VocabError, AlignmentError,
                ConfigError, CheckpointError, evaluate.ClozeSetError,
                ValueError, OSError, json.JSONDecodeError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="sgvlp", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def common(p, *names):
        if "lexicon" in names:
            p.add_argument("--lexicon", default=BUNDLED_LEXICON,
                           help="lexicon file (default: bundled)")
        if "data" in names:
            p.add_argument("--captions", required=True)
            p.add_argument("--images", required=True)
        if "seed" in names:
            p.add_argument("--seed", type=int, default=0)
        if "threads" in names:
            p.add_argument("--threads", type=int, default=0,
                           help="cap BLAS threads (1 = bitwise determinism)")
        if "config" in names:
            p.add_argument("--config", default=None,
                           help="JSON file overriding model/train fields")
        if "train" in names:
            p.add_argument("--steps", type=int, default=2000)
            p.add_argument("--batch", type=int, default=32)
            p.add_argument("--holdout", type=float, default=0.2)

    p = sub.add_parser("parse", help="caption -> scene graph JSON")
    common(p, "lexicon")
    p.add_argument("--text", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("gen-corpus", help="write a synthetic corpus")
    common(p, "lexicon", "seed", "config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pairs", type=int, default=None)

    p = sub.add_parser("mask", help="dump pre-training instances as JSONL")
    common(p, "lexicon", "data", "seed")
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--p-neg", type=float, default=0.5)

    p = sub.add_parser("train", help="pre-train on an image-text corpus")
    common(p, "lexicon", "data", "seed", "threads", "config", "train")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=(training.MODE_SGP,
                                      training.MODE_RANDOM_ONLY),
                   default=training.MODE_SGP)

    p = sub.add_parser("eval-cloze", help="cloze accuracy of a checkpoint")
    common(p, "lexicon", "data", "seed", "threads")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", default=None,
                   help="default: vocab.txt next to the checkpoint")
    p.add_argument("--out", default=None)
    p.add_argument("--per-category", type=int, default=500)
    p.add_argument("--holdout", type=float, default=0.2)

    p = sub.add_parser("eval-itm", help="matching accuracy of a checkpoint")
    common(p, "lexicon", "data", "seed", "threads")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--p-neg", type=float, default=0.5)
    p.add_argument("--holdout", type=float, default=0.2)

    p = sub.add_parser("ablate", help="train + cloze-eval both masking modes")
    common(p, "lexicon", "data", "seed", "threads", "config", "train")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-category", type=int, default=500)

    return parser


def _limit_threads(n):
    if not n:
        return
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _overrides(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _model_config(data, pairs, over: dict) -> ModelConfig:
    images = {img.image_id: img for _, img in pairs}.values()
    classes = max(max(r.class_id for r in img.regions) for img in images) + 1
    feat_dim = next(iter(images)).regions[0].feature.shape[0]
    fields = {
        "vocab_size": len(data.vocab),
        "region_feature_dim": feat_dim,
        "region_classes": classes,
        "max_text_len": data.max_tokens,
        "max_regions": data.max_regions,
    }
    fields.update(over)
    for key in ("text", "visual"):
        if key in fields and isinstance(fields[key], dict):
            fields[key] = StreamConfig(**fields[key])
    return ModelConfig(**fields)


def _train_config(args, over: dict) -> training.TrainConfig:
    fields = {"steps": args.steps, "batch_size": args.batch,
              "seed": args.seed, "holdout_fraction": args.holdout}
    if hasattr(args, "mode"):
        fields["mode"] = args.mode
    if "policy" in over:
        over = dict(over)
        fields["policy"] = MaskingPolicy(**over.pop("policy"))
    fields.update(over)
    return training.TrainConfig(**fields)


def _prepare(args, vocab=None, holdout=None):
    lexicon = load_lexicon(args.lexicon)
    pairs = load_pairs(args.captions, args.images)
    fraction = holdout if holdout is not None else getattr(args, "holdout", 0.2)
    data = training.prepare_data(pairs, lexicon, vocab=vocab,
                                 holdout_fraction=fraction)
    return lexicon, pairs, data


def _cmd_parse(args):
    lexicon = load_lexicon(args.lexicon)
    graph = parse(args.text, lexicon)
    text = json.dumps(graph.to_dict(), indent=2)
    if args.out:
        write_atomic(args.out, text + "\n")
    else:
        print(text)
    return 0


def _cmd_gen_corpus(args):
    lexicon = load_lexicon(args.lexicon)
    over = _overrides(args.config)
    if args.pairs is not None:
        over["pairs"] = args.pairs
    cfg = GeneratorConfig(**over)
    images, captions, _ = generate_corpus(cfg, lexicon, args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_captions(os.path.join(args.out, "captions.jsonl"), captions)
    save_images(os.path.join(args.out, "images.jsonl"), images)
    print(f"wrote {len(captions)} pairs to {args.out}")
    return 0


def _cmd_mask(args):
    vocab = Vocab.load(args.vocab) if args.vocab else None
    _, pairs, data = _prepare(args, vocab=vocab, holdout=0.0)
    policy = MaskingPolicy(p_neg=args.p_neg)
    lines = []
    images = data.train_images
    for idx, (caption, image, graph, ac, prep) in enumerate(data.train_entries):
        inst = build_instance(
            ac, graph, image, policy, data.vocab,
            training._instance_seed(args.seed, idx),
            negatives=training.OtherImages(images, idx),
            caption_id=caption.caption_id, prepared=prep)
        lines.append(json.dumps(instance_to_dict(inst)))
    write_atomic(args.out, "\n".join(lines) + ("\n" if lines else ""))
    print(f"wrote {len(lines)} instances to {args.out}")
    return 0


def _cmd_train(args):
    over = _overrides(args.config)
    _, pairs, data = _prepare(args)
    mcfg = _model_config(data, pairs, over.get("model", {}))
    tcfg = _train_config(args, over.get("train", {}))
    result = training.train(data, mcfg, tcfg, out_dir=args.out)
    print(f"finished {result.step} steps; checkpoint at "
          f"{result.checkpoint_path}")
    return 0


def _load_eval(args):
    vocab_path = args.vocab or os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)), "vocab.txt")
    vocab = Vocab.load(vocab_path)
    _, pairs, data = _prepare(args, vocab=vocab)
    config, params, _ = load_checkpoint(args.checkpoint)
    if config.vocab_size != len(vocab):
        raise CheckpointError(
            f"checkpoint vocab size {config.vocab_size} != vocab file's "
            f"{len(vocab)}")
    return data, config, params


def _cmd_eval_cloze(args):
    data, config, params = _load_eval(args)
    items = evaluate.build_cloze_set(data.holdout_entries, args.per_category,
                                     args.seed)
    index = {e[0].caption_id: e for e in data.holdout_entries}
    report = evaluate.run_cloze(items, params, config, data.vocab, index,
                                seed=args.seed,
                                checkpoint_id=os.path.basename(args.checkpoint))
    print(evaluate.render_cloze_table(report))
    if args.out:
        write_atomic(args.out, report.to_json() + "\n")
    return 0


def _cmd_eval_itm(args):
    data, config, params = _load_eval(args)
    accuracy = evaluate.run_itm_eval(data.holdout_entries, params, config,
                                     seed=args.seed, p_neg=args.p_neg)
    print(f"itm accuracy: {accuracy:.4f}")
    if args.out:
        write_atomic(args.out, json.dumps(
            {"accuracy": accuracy, "seed": args.seed,
             "checkpoint": os.path.basename(args.checkpoint)}) + "\n")
    return 0


def _cmd_ablate(args):
    over = _overrides(args.config)
    _, pairs, data = _prepare(args)
    mcfg = _model_config(data, pairs, over.get("model", {}))
    index = {e[0].caption_id: e for e in data.holdout_entries}
    items = evaluate.build_cloze_set(data.holdout_entries, args.per_category,
                                     args.seed)
    reports = {}
    for mode in (training.MODE_SGP, training.MODE_RANDOM_ONLY):
        args.mode = mode
        tcfg = _train_config(args, over.get("train", {}))
        out_dir = os.path.join(args.out, mode)
        result = training.train(data, mcfg, tcfg, out_dir=out_dir)
        report = evaluate.run_cloze(
            items, result.params, mcfg, data.vocab, index, seed=args.seed,
            checkpoint_id=f"{mode}/checkpoint.sgvl")
        reports[mode] = report
        write_atomic(os.path.join(out_dir, "cloze.json"),
                     report.to_json() + "\n")

    sgp = reports[training.MODE_SGP]
    rand = reports[training.MODE_RANDOM_ONLY]
    table = evaluate.render_ablation_table(sgp, rand)
    print(table)
    diff = {
        "seed": args.seed,
        "sgp": sgp.to_dict(),
        "random_only": rand.to_dict(),
        "delta_overall_acc1": sgp.overall.acc1 - rand.overall.acc1,
        "delta_relationship_acc1":
            sgp.per_category["relationship"].acc1
            - rand.per_category["relationship"].acc1,
    }
    write_atomic(os.path.join(args.out, "ablation.json"),
                 json.dumps(diff, indent=2, sort_keys=True) + "\n")
    write_atomic(os.path.join(args.out, "ablation.txt"), table + "\n")
    return 0


_COMMANDS = {
    "parse": _cmd_parse,
    "gen-corpus": _cmd_gen_corpus,
    "mask": _cmd_mask,
    "train": _cmd_train,
    "eval-cloze": _cmd_eval_cloze,
    "eval-itm": _cmd_eval_itm,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sgvlp: error: {exc}", file=sys.stderr)
        return 1
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    _limit_threads(getattr(args, "threads", 0))
    try:
        return _COMMANDS[args.command](args)
    except training.TrainingAborted as exc:
        print(f"sgvlp: numeric abort: {exc}", file=sys.stderr)
        return 3
    except _DATA_ERRORS as exc:
        print(f"sgvlp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
