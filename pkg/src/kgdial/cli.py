"""Command-line interface: synth, mutate, train, adapt, eval, generate, experiment.

Every command takes an optional JSON ``--config`` whose fields are overridden
by explicit flags; the merged run configuration is written next to (or into)
each artifact.  All files are written atomically and deterministically.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import (CorpusError, SynthSpec, build_vocab, dump_corpus, load_corpus, split_and_bucket,
                     synth_corpus, tokenize)
from .experiment import AdaptationProtocol, run_adaptation
from .kg import TAIL_SWAP, GraphError, KnowledgeGraph, load_graph, mutate
from .meta import MODES, LossRecord, TrainConfig, fast_adapt, references, rewrite, train
from .metrics import evaluate
from .model import checkpoint_bytes, config_for, generate, init_params, params_from_checkpoint

log = logging.getLogger("kgdial")

CSV_COLUMNS = ("epoch", "bucket", "split", "mode", "loss", "ppl")
MODEL_KEYS = ("hidden", "embed", "hops", "init_scale", "entity_smoothing")
SPLIT_KEYS = ("valid_frac", "test_frac", "min_count")


class ConfigError(ValueError):
    pass


# -- file helpers --------------------------------------------------------------

def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def export_loss_curves(records: Sequence[LossRecord], path: str | Path) -> None:
    """CSV of loss records sorted by (bucket, epoch), train rows before valid."""
    if not records:
        raise ValueError("no loss records to export")
    order = {"train": 0, "valid": 1}
    rows = sorted(records, key=lambda r: (r.bucket, r.epoch, order.get(r.split, 2), r.split))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([r.epoch, r.bucket, r.split, r.mode, repr(float(r.loss)), repr(float(r.ppl))])
    atomic_write(path, buf.getvalue())


def read_loss_curves(path: str | Path) -> list[LossRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [LossRecord(int(row["epoch"]), int(row["bucket"]), row["split"], row["mode"],
                           float(row["loss"]), float(row["ppl"])) for row in csv.DictReader(fh)]


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return obj


def _override(cfg: dict, **flags) -> dict:
    out = dict(cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _load_data(corpus_path: str, graph_path: str) -> tuple[KnowledgeGraph, list]:
    graph = load_graph(graph_path)
    return graph, load_corpus(corpus_path, {graph.graph_id: graph})


def _load_checkpoint(path: str):
    with open(path, "rb") as fh:
        params, run_config = params_from_checkpoint(fh.read())
    if params.vocab is None or params.config is None:
        raise ConfigError(f"{path}: checkpoint lacks vocabulary or model config")
    return params, run_config


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> dict:
    cfg = _override(load_config(args.config), seed=args.seed, hops=args.hops)
    spec = SynthSpec.from_json(cfg)
    graph, samples = synth_corpus(spec)
    out = Path(args.out)
    run = {"command": "synth", "synth": spec.to_json()}
    atomic_write(out / "graph.json", dumps(graph.to_json()))
    atomic_write(out / "corpus.jsonl", dump_corpus(samples))
    atomic_write(out / "run_config.json", dumps(run))
    print(f"wrote {len(samples)} samples and {len(graph.triples)} triples to {out}")
    return run


def cmd_mutate(args) -> dict:
    graph, samples = _load_data(args.corpus, args.graph)
    cfg = _override(load_config(args.config), seed=args.seed)
    kind = cfg.get("kind", TAIL_SWAP)
    rng = np.random.default_rng(cfg.get("seed", 0))
    new_graph, mutation = mutate(graph, rng, kind)
    adv = [rewrite(s, mutation, graph, new_graph.graph_id)
           for s in samples if references(s, mutation.removed, graph)]
    out = Path(args.out)
    run = {"command": "mutate", "corpus": args.corpus, "graph": args.graph, "seed": cfg.get("seed", 0),
           "kind": kind, "mutation": mutation.to_json(), "description": mutation.describe(graph)}
    atomic_write(out / "graph.json", dumps(new_graph.to_json()))
    atomic_write(out / "corpus.jsonl", "".join(
        json.dumps({"context": " ".join(s.context), "response": " ".join(s.response), "graph": s.graph_id},
                   sort_keys=True, ensure_ascii=False) + "\n" for s in adv))
    atomic_write(out / "run_config.json", dumps(run))
    print(f"{mutation.describe(graph)}: {len(adv)} rewritten samples written to {out}")
    return run


def _split_config(cfg: dict) -> tuple[dict, dict, dict]:
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(cfg) - train_keys - set(MODEL_KEYS) - set(SPLIT_KEYS)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    model = {k: cfg[k] for k in MODEL_KEYS if k in cfg}
    split = {k: cfg[k] for k in SPLIT_KEYS if k in cfg}
    return model, split, {k: v for k, v in cfg.items() if k in train_keys}


def cmd_train(args) -> dict:
    cfg = _override(load_config(args.config), seed=args.seed, mode=args.mode, epochs=args.epochs,
                    hops=args.hops, lr=args.lr, steps_per_epoch=args.steps)
    if args.lr is not None:
        cfg.update(alpha1=args.lr, alpha2=args.lr, beta1=args.lr, beta2=args.lr)
    model_kw, split_kw, train_kw = _split_config(cfg)
    try:
        tcfg = TrainConfig.from_json(train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}") from None
    graph, samples = _load_data(args.corpus, args.graph)
    split = split_and_bucket(samples, np.random.default_rng(tcfg.seed),
                             split_kw.get("valid_frac", 0.05), split_kw.get("test_frac", 0.10), tcfg.n_buckets)
    vocab = build_vocab(split.train, graph, split_kw.get("min_count", 0))
    params = init_params(config_for(vocab, graph, **model_kw), vocab, tcfg.seed)
    result = train(split, graph, params, tcfg)
    run = {"command": "train", "corpus": args.corpus, "graph": args.graph, "train": tcfg.to_json(),
           "model": asdict(params.config), "split": {**split_kw, **split.to_json()}}
    out = Path(args.out)
    atomic_write(out / "model.ckpt.json", checkpoint_bytes(result.params, run))
    if result.log:
        export_loss_curves(result.log, out / "loss.csv")
        for b in sorted({r.bucket for r in result.log}):
            export_loss_curves([r for r in result.log if r.bucket == b], out / f"loss_bucket{b}.csv")
    atomic_write(out / "run_config.json", dumps(run))
    final = [r for r in result.log if r.split == "valid" and r.epoch == tcfg.epochs]
    for r in final:
        print(f"bucket {r.bucket}: valid loss {r.loss:.4f} (ppl {r.ppl:.2f})")
    return run


def cmd_adapt(args) -> dict:
    cfg = _override(load_config(args.config), steps=args.steps, lr=args.lr)
    unknown = set(cfg) - {"steps", "lr"}
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    params, _ = _load_checkpoint(args.checkpoint)
    graph, support = _load_data(args.support, args.graph)
    if not support:
        raise CorpusError(f"{args.support}: support file is empty")
    result = fast_adapt(params, support, graph, steps=cfg.get("steps", 5), lr=cfg.get("lr", 0.05))
    run = {"command": "adapt", "checkpoint": args.checkpoint, "support": args.support, "graph": args.graph,
           "steps": cfg.get("steps", 5), "lr": cfg.get("lr", 0.05),
           "loss_before": result.loss_before, "loss_after": result.loss_after}
    atomic_write(args.out, checkpoint_bytes(result.params, run))
    print(f"support loss {result.loss_before:.4f} -> {result.loss_after:.4f}")
    return run


def cmd_eval(args) -> dict:
    params, _ = _load_checkpoint(args.checkpoint)
    graph, samples = _load_data(args.corpus, args.graph)
    if not samples:
        raise CorpusError(f"{args.corpus}: nothing to evaluate")
    report = evaluate(params, samples, graph)
    run = {"command": "eval", "checkpoint": args.checkpoint, "corpus": args.corpus, "graph": args.graph}
    out = Path(args.out)
    atomic_write(out, dumps({"run_config": run, "report": report.to_json()}))
    atomic_write(out.with_suffix(".txt"), report.table())
    sys.stdout.write(report.table())
    return run


def _read_contexts(path: str, graph: KnowledgeGraph) -> list[list[str]]:
    contexts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            text = line
            if line.startswith("{"):
                try:
                    text = json.loads(line)["context"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise CorpusError(f"{path}:{lineno}: malformed context line ({exc})") from None
            contexts.append(tokenize(text, graph.entities))
    return contexts


def cmd_generate(args) -> dict:
    params, _ = _load_checkpoint(args.checkpoint)
    graph = load_graph(args.graph)
    max_len = load_config(args.config).get("max_len", 20)
    lines = []
    for ctx in _read_contexts(args.corpus, graph):
        response = generate(ctx, params, graph, max_len)
        lines.append(json.dumps({"context": " ".join(ctx), "response": " ".join(response)},
                                sort_keys=True, ensure_ascii=False) + "\n")
    run = {"command": "generate", "checkpoint": args.checkpoint, "corpus": args.corpus,
           "graph": args.graph, "max_len": max_len}
    if args.out:
        out = Path(args.out)
        atomic_write(out, "".join(lines))
        atomic_write(out.with_name(out.name + ".run_config.json"), dumps(run))
    else:
        sys.stdout.write("".join(lines))
    return run


def cmd_experiment(args) -> dict:
    cfg = _override(load_config(args.config), adapt_steps=args.steps, adapt_lr=args.lr, epochs=args.epochs)
    known = {f.name for f in fields(AdaptationProtocol)}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    protocol = AdaptationProtocol(**cfg)
    seed = args.seed or 0
    outcomes = run_adaptation(seed, protocol, modes=tuple(args.mode.split(",")) if args.mode else
                              ("plain", "adml-improved"))
    run = {"command": "experiment", "seed": seed, "protocol": asdict(protocol)}
    report = {"run_config": run, "outcomes": [o.to_json() for o in outcomes]}
    for o in report["outcomes"]:
        o.pop("seconds")  # wall-clock time would break byte-identical reruns
    atomic_write(args.out, dumps(report))
    for o in outcomes:
        print(f"{o.mode:14s} recall {o.recall_before:.3f} -> {o.recall_after:.3f}  "
              f"support loss {o.support_loss_before:.3f} -> {o.support_loss_after:.3f}")
    return run


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgdial", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_, *flags, out_required=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config; explicit flags take precedence")
        for flag in flags:
            if flag == "--seed":
                p.add_argument("--seed", type=int)
            elif flag == "--mode":
                p.add_argument("--mode", choices=MODES if name == "train" else None)
            elif flag in ("--epochs", "--hops", "--steps"):
                p.add_argument(flag, type=int)
            elif flag == "--lr":
                p.add_argument("--lr", type=float)
            else:
                p.add_argument(flag, required=True)
        p.add_argument("--out", required=out_required)
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "generate a synthetic graph and corpus", "--seed", "--hops")
    add("mutate", cmd_mutate, "mutate one triple and rewrite the dialogues that reference it",
        "--corpus", "--graph", "--seed")
    add("train", cmd_train, "train a model (plain, adml or adml-improved)",
        "--corpus", "--graph", "--seed", "--mode", "--epochs", "--hops", "--steps", "--lr")
    add("adapt", cmd_adapt, "fast-adapt a checkpoint to a few support samples",
        "--checkpoint", "--support", "--graph", "--steps", "--lr")
    add("eval", cmd_eval, "write a metrics report", "--checkpoint", "--corpus", "--graph")
    add("generate", cmd_generate, "generate responses for a context file",
        "--checkpoint", "--corpus", "--graph", out_required=False)
    add("experiment", cmd_experiment, "held-out mutation fast-adaptation comparison",
        "--seed", "--mode", "--epochs", "--steps", "--lr")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, CorpusError, GraphError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"kgdial {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
