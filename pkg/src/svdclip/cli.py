"""Command-line entry point: ``svdclip <command> [options]``.

Every command exits 0 on success. Failures print one line to stderr,
``error: <ErrorClass>: <message>``, and exit with the class's code
(3 config, 4 missing file, 5 checksum, 6 format, 7 numeric, 10-13 input/usage).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time

import numpy as np

from . import __version__
from .adapt import (
    adapt_few_shot,
    contrastive_pretrain,
    evaluate,
    load_record,
    run_base_to_novel,
    sample_few_shot,
    save_record,
)
from .clip_core import init_model
from .config import load_config
from .errors import SvdClipError
from .interpret import (
    collect_head_outputs,
    default_layers,
    embed_corpus,
    load_corpus,
    rank_heads,
    textspan,
)
from .persistence import load_checkpoint, load_checkpoint_with_header, save_checkpoint
from .svd_param import RankMaskSpec, count_trainable
from .synth_data import generate, load_dataset, save_dataset, split

log = logging.getLogger("svdclip")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def write_results(path, command, cfg, results):
    doc = {"command": command, "seed": cfg.seed, "config": cfg.doc, "results": results}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _task_classes(cfg, data_split, dataset):
    which = cfg.doc["task"]["classes"]
    if which == "base":
        return data_split.classes.base
    if which == "novel":
        return data_split.classes.novel
    return tuple(int(c) for c in np.unique(dataset.labels))


def _split(cfg, dataset):
    t = cfg.doc["task"]
    return split(dataset, t["base_fraction"], t["split_seed"], t["train_fraction"])


# ------------------------------------------------------------------ commands


def cmd_make_dataset(args, cfg):
    section = "pretrain" if args.pretrain_corpus else "task"
    ds = generate(cfg.corpus_config(section))
    save_dataset(args.out, ds)
    print(f"dataset {args.out}: {len(ds)} samples, {ds.config.num_classes} classes")


def cmd_pretrain(args, cfg):
    model = init_model(cfg.model_config(), cfg.seed)
    corpus = load_dataset(args.dataset) if args.dataset else generate(cfg.corpus_config("pretrain"))
    p = cfg.doc["pretrain"]
    start = time.time()
    history = contrastive_pretrain(
        model, corpus, p["epochs"], p["lr"], cfg.seed, p["batch_size"], p["weight_decay"]
    )
    save_checkpoint(args.out, model, {"command": "pretrain", "seed": cfg.seed})
    for epoch, loss in enumerate(history):
        print(f"epoch {epoch} loss {loss:.6f}")
    print(f"wrote {args.out} ({time.time() - start:.1f}s)")
    if args.report:
        write_results(args.report, "pretrain", cfg, {"loss_history": history})


def cmd_adapt(args, cfg):
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    data_split = _split(cfg, dataset)
    classes = _task_classes(cfg, data_split, dataset)
    task = sample_few_shot(data_split, classes, cfg.doc["task"]["shots"], cfg.seed)
    hyper = cfg.adapt_hyper()
    adapted, record = adapt_few_shot(model, dataset, task, dataset.class_texts[list(classes)], hyper)
    save_checkpoint(args.out, adapted, {"command": "adapt", "seed": cfg.seed})
    if args.record:
        save_record(args.record, record)
    print(f"adapted {len(record.losses)} iterations, final support loss {record.losses[-1]:.6f}")
    print(f"wrote {args.out}")


def cmd_eval(args, cfg):
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    data_split = _split(cfg, dataset)
    classes = _task_classes(cfg, data_split, dataset)
    ids = data_split.ids("test", classes)
    acc = evaluate(model, dataset, ids, classes, dataset.class_texts[list(classes)])
    print(f"accuracy {acc:.6f} on {ids.size} samples, {len(classes)} classes")
    if args.out:
        write_results(args.out, "eval", cfg, {"accuracy": acc, "samples": int(ids.size),
                                              "classes": list(classes), "checkpoint": args.checkpoint})


def cmd_base_to_novel(args, cfg):
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    data_split = _split(cfg, dataset)
    out = run_base_to_novel(model, dataset, data_split, cfg.doc["task"]["shots"], cfg.adapt_hyper(), cfg.seed)
    res = {k: out[k] for k in ("base_acc", "novel_acc", "hm", "zero_shot_base_acc", "zero_shot_novel_acc")}
    for k, v in res.items():
        print(f"{k} {v:.6f}")
    if args.out:
        write_results(args.out, "base-to-novel", cfg, res)


def format_head_table(reports):
    lines = [f"{'head':<10}{'score':>12}{'V':>12}{'O':>12}  descriptions"]
    for r in reports:
        desc = " | ".join(r.top_descriptions)
        label = f"({r.label})"
        lines.append(f"{label:<10}{r.score:>12.6f}{r.v_score:>12.6f}{r.o_score:>12.6f}  {desc}".rstrip())
    return "\n".join(lines)


def _layers(cfg, model, arg):
    if arg:
        return [int(x) for x in arg.split(",")]
    if cfg.doc["interpret"]["layers"] is not None:
        return list(cfg.doc["interpret"]["layers"])
    return list(default_layers(model))


def cmd_rank_heads(args, cfg):
    before = load_checkpoint(args.before)
    after = load_checkpoint(args.after)
    if before.kind == "dense":
        before = before.decomposed()
    record = load_record(args.record) if args.record else None
    reports = rank_heads(record, before, after, _layers(cfg, before, args.layers))
    print(format_head_table(reports))
    if args.out:
        write_results(args.out, "rank-heads", cfg, [
            {"layer": r.layer, "head": r.head, "label": r.label, "score": r.score,
             "v_score": r.v_score, "o_score": r.o_score} for r in reports])


def cmd_textspan(args, cfg):
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    probe = dataset.patches if args.probes is None else dataset.patches[: args.probes]
    texts = load_corpus(args.corpus)
    corpus = embed_corpus(model, texts)
    m = cfg.doc["interpret"]["m"] if args.m is None else args.m
    m = min(m, len(texts))
    rows = []
    print(f"{'head':<10}  descriptions")
    for layer in _layers(cfg, model, args.layers):
        for head in range(model.vision.config.num_heads):
            result, ratios = textspan(collect_head_outputs(model, probe, layer, head), corpus, m)
            picked = [texts[i] for i in result.indices]
            flag = " (early stop)" if result.early_stop else ""
            print(f"(L{layer}.H{head})  " + " | ".join(picked) + flag)
            rows.append({"layer": layer, "head": head, "indices": result.indices, "texts": picked,
                         "explained_ratio": ratios, "early_stop": result.early_stop})
    if args.out:
        write_results(args.out, "textspan", cfg, rows)


def run_ablation(cfg, model, dataset):
    """Yield one row per (mode, ratio, seed); full-rank rows for every mode share a mask."""
    abl = cfg.doc["ablation"]
    data_split = _split(cfg, dataset)
    classes = _task_classes(cfg, data_split, dataset)
    texts = dataset.class_texts[list(classes)]
    mc = model.config
    for seed in abl["seeds"]:
        task = sample_few_shot(data_split, classes, abl["shots"], seed)
        for mode in abl["modes"]:
            ratios = [1.0] if mode == "all" else abl["ratios"]
            for ratio in ratios:
                mask = RankMaskSpec(mode) if mode == "all" else RankMaskSpec(mode, ratio=ratio)
                hyper = cfg.adapt_hyper(seed=seed, mask=mask)
                adapted, _ = adapt_few_shot(model, dataset, task, texts, hyper)
                acc = evaluate(adapted, dataset, task.query, classes, texts)
                yield {"mode": mode, "ratio": ratio, "seed": seed,
                       "trainable": count_trainable(mc, mask), "accuracy": acc}


def cmd_ablate_rank(args, cfg):
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    fields = ["mode", "ratio", "seed", "trainable", "accuracy"]
    rows = []
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in run_ablation(cfg, model, dataset):
            writer.writerow({**row, "accuracy": repr(row["accuracy"])})
            print(f"{row['mode']:<9} ratio {row['ratio']:<6} seed {row['seed']} acc {row['accuracy']:.6f}")
            rows.append(row)
    if args.report:
        write_results(args.report, "ablate-rank", cfg, rows)


def cmd_inspect(args, cfg):
    model, header = load_checkpoint_with_header(args.checkpoint)
    print(f"kind {model.kind}")
    print(f"trainable singular values {count_trainable(model.config)}")
    print(json.dumps(header, indent=2, sort_keys=True))


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="svdclip", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML/JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.set_defaults(func=func)
        return sp

    sp = add("make-dataset", cmd_make_dataset, "write a synthetic dataset file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--pretrain-corpus", action="store_true", help="use the pretrain corpus section")

    sp = add("pretrain", cmd_pretrain, "contrastive pretraining of a fresh model")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dataset", help="paired corpus file (default: generate from config)")
    sp.add_argument("--report")

    sp = add("adapt", cmd_adapt, "few-shot singular-value adaptation")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--record")

    sp = add("eval", cmd_eval, "zero-shot accuracy on the task test split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out")

    sp = add("base-to-novel", cmd_base_to_novel, "adapt on base classes, score base and novel")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out")

    sp = add("rank-heads", cmd_rank_heads, "rank vision heads by singular-value change")
    sp.add_argument("--before", required=True)
    sp.add_argument("--after", required=True)
    sp.add_argument("--record")
    sp.add_argument("--layers", help="comma-separated layer indices (default: last four)")
    sp.add_argument("--out")

    sp = add("textspan", cmd_textspan, "describe vision heads with a text corpus")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True, help="probe images")
    sp.add_argument("--corpus", required=True, help="UTF-8 file, one description per line")
    sp.add_argument("--layers")
    sp.add_argument("--m", type=int)
    sp.add_argument("--probes", type=int, help="use only the first N images")
    sp.add_argument("--out")

    sp = add("ablate-rank", cmd_ablate_rank, "accuracy vs. trainable rank ratio sweep (CSV)")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")

    sp = add("inspect", cmd_inspect, "print a checkpoint header")
    sp.add_argument("--checkpoint", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        args.func(args, cfg)
    except SvdClipError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: OSError: {exc}", file=sys.stderr)
        return 8
    return 0


if __name__ == "__main__":
    sys.exit(main())
