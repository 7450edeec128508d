"""Command-line entry point: ``synergy <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

log = logging.getLogger("synergy")

SPLITS = ("train", "eval", "test")


# ---------------------------------------------------------------------------
# shared helpers


def _add_config_args(p):
    p.add_argument("--config", help="TOML config file with [model], [model.block] and [train] tables")
    p.add_argument("--preset", choices=["paper", "desk", "tiny"], help="base model preset (default: desk)")
    p.add_argument("--set", dest="sets", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                   help="override one config field, e.g. --set train.lr=1e-3 (repeatable)")
    p.add_argument("--seed", type=int, help="shortcut for --set train.seed=N")
    p.add_argument("--steps", type=int, help="shortcut for --set train.total_steps=N")


def _configs(args):
    from .config import load_config

    sets = list(args.sets)
    if getattr(args, "seed", None) is not None:
        sets.append(f"train.seed={args.seed}")
    if getattr(args, "steps", None) is not None:
        sets.append(f"train.total_steps={args.steps}")
    return load_config(args.config, sets, args.preset)


def _add_data_args(p):
    p.add_argument("--data", required=True,
                   help="directory written by 'prepare', a .seg shard, or a raw .txt/.jsonl corpus")
    p.add_argument("--train-fraction", type=float, default=0.7,
                   help="train share when --data is a raw corpus (default 0.7)")
    p.add_argument("--data-seed", type=int, default=0, help="split seed when --data is a raw corpus")


def load_split(data, split, context_length, train_fraction=0.7, seed=0):
    """Byte segments of one split from a prepared directory, a shard, or a raw corpus."""
    from .corpus import read_documents, segment_documents, split_corpus
    from .formats import load_segments

    path = Path(data)
    if path.is_dir():
        segs, _ = load_segments(path / f"{split}.seg")
    elif path.suffix == ".seg":
        segs, _ = load_segments(path)
    else:
        parts = dict(zip(SPLITS, split_corpus(read_documents(path), train_fraction, seed)))
        segs = segment_documents(parts[split], context_length)
    too_long = [s for s in segs if len(s.ids) + 2 > context_length]
    if too_long:
        raise ValueError(f"{len(too_long)} segments in {data} do not fit context_length={context_length}; "
                         "re-run prepare with a matching --context-length")
    return segs


def _baseline_data(args, model_cfg, train_segs, eval_segs):
    """BPE baseline: re-tokenize the same text pieces, keeping both contexts satisfied."""
    from .corpus import bpe_segments, fit_both_contexts
    from .formats import load_bpe

    vocab = load_bpe(args.bpe)
    ctx = args.baseline_context or round(model_cfg.context_length / 4.25)
    train_segs = bpe_segments(fit_both_contexts(train_segs, vocab, ctx), vocab)
    eval_segs = bpe_segments(fit_both_contexts(eval_segs, vocab, ctx), vocab)
    return vocab, ctx, train_segs, eval_segs


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare(args):
    from .corpus import read_documents, segment_documents, split_corpus
    from .formats import save_segments
    from .corpus import BYTE_VOCAB_SIZE

    docs = []
    for p in args.input:
        docs.extend(read_documents(p))
    parts = split_corpus(docs, args.train_fraction, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"context_length": args.context_length, "train_fraction": args.train_fraction, "seed": args.seed}
    for name, rows in zip(SPLITS, parts):
        segs = segment_documents(rows, args.context_length)
        save_segments(out / f"{name}.seg", segs, BYTE_VOCAB_SIZE)
        summary[name] = {"documents": len(rows), "segments": len(segs), "bytes": sum(s.byte_len for s in segs)}
    (out / "prepare.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def cmd_train_bpe(args):
    from .corpus import bpe_train, read_documents
    from .formats import save_bpe

    docs = []
    for p in args.input:
        docs.extend(read_documents(p))
    vocab = bpe_train(docs, args.vocab_size)
    save_bpe(args.out, vocab)
    print(json.dumps({"merges": len(vocab.merges), "vocab_size": vocab.vocab_size, "out": str(args.out)}))
    return 0


def cmd_train(args):
    from .checkpoint import save_checkpoint
    from .model import SynergyLM, build_dense_baseline, count_params
    from .training import MetricsWriter, train

    model_cfg, train_cfg = _configs(args)
    train_segs = load_split(args.data, "train", model_cfg.context_length, args.train_fraction, args.data_seed)
    eval_segs = load_split(args.data, "eval", model_cfg.context_length, args.train_fraction, args.data_seed)
    torch.manual_seed(train_cfg.seed)
    if args.model == "baseline":
        if args.bpe:
            vocab, ctx, train_segs, eval_segs = _baseline_data(args, model_cfg, train_segs, eval_segs)
            model = build_dense_baseline(model_cfg, vocab.vocab_size, ctx, vocab.specials)
        else:
            model = build_dense_baseline(model_cfg)
    else:
        model = SynergyLM(model_cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log.info("%s model with %d parameters, %d train / %d eval segments",
             args.model, count_params(model), len(train_segs), len(eval_segs))
    ckpt, records = train(model, train_segs, eval_segs, train_cfg, on_metrics=MetricsWriter(out),
                          dump_dir=out, log_every=args.log_every)
    save_checkpoint(out / "checkpoint.ckpt", ckpt)
    final = records[-1]
    print(json.dumps({"step": final.step, "eval_bpb": final.eval_bpb,
                      "router_threshold": ckpt.router_threshold, "checkpoint": str(out / "checkpoint.ckpt")}))
    return 0


def cmd_eval(args):
    from .checkpoint import build_model, load_checkpoint
    from .model import SynergyLM
    from .training import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    model = build_model(ckpt)
    ctx = ckpt.model_config.context_length
    segs = load_split(args.data, args.split, ctx, args.train_fraction, args.data_seed)
    if ckpt.kind == "dense" and ckpt.dense["vocab_size"] != ckpt.model_config.vocab_size:
        if not args.bpe:
            raise ValueError("this baseline checkpoint uses a BPE vocabulary; pass --bpe")
        args.baseline_context = ckpt.dense["context_length"]
        _, _, _, segs = _baseline_data(args, ckpt.model_config, [], segs)
    routing = args.routing if isinstance(model, SynergyLM) else "topk"
    res = evaluate(model, segs, args.batch_size, args.max_batches, routing=routing)
    print(json.dumps(res))
    return 0


def cmd_generate(args):
    from .checkpoint import build_model, load_checkpoint
    from .model import SynergyLM, generate

    ckpt = load_checkpoint(args.checkpoint)
    model = build_model(ckpt)
    if not isinstance(model, SynergyLM):
        raise ValueError("generate needs a routed-model checkpoint")
    out = generate(model, args.prompt.encode("utf-8"), args.max_new, args.temperature, args.seed)
    sys.stdout.buffer.write(out + b"\n")
    return 0


def _ablation_data(args, model_cfg):
    return (
        load_split(args.data, "train", model_cfg.context_length, args.train_fraction, args.data_seed),
        load_split(args.data, "eval", model_cfg.context_length, args.train_fraction, args.data_seed),
    )


def cmd_ablate_positioning(args):
    from .ablation import run_positioning_ablation
    from .router import POSITIONING_MODES

    model_cfg, train_cfg = _configs(args)
    train_segs, eval_segs = _ablation_data(args, model_cfg)
    modes = args.modes or list(POSITIONING_MODES)
    rows = run_positioning_ablation(model_cfg, train_cfg, modes, train_segs, eval_segs, args.out_dir)
    print(Path(args.out_dir, "positioning.md").read_text())
    return 0 if all(r.error is None for r in rows) else 1


def cmd_ablate_k(args):
    from .ablation import run_k_sweep

    model_cfg, train_cfg = _configs(args)
    train_segs, eval_segs = _ablation_data(args, model_cfg)
    T = model_cfg.context_length
    k_values = args.k_values or [T // 16, T // 8, T // 4, T // 2]
    rows = run_k_sweep(model_cfg, train_cfg, k_values, train_segs, eval_segs, args.out_dir)
    print(Path(args.out_dir, "k_sweep.md").read_text())
    return 0 if all(r.error is None for r in rows) else 1


def cmd_flops(args):
    from .flops import LLAMA3_VOCAB, estimate_flops

    model_cfg, _ = _configs(args)
    baseline_vocab = args.baseline_vocab
    if baseline_vocab is None:
        baseline_vocab = LLAMA3_VOCAB if (args.preset or "desk") == "paper" else model_cfg.vocab_size
    rep = estimate_flops(model_cfg, args.seq_bytes, args.k, args.baseline_tokens, baseline_vocab)
    d = rep.as_dict()
    if args.json:
        print(json.dumps(d, indent=2))
    else:
        print(f"synergy FLOPs/sequence:  {rep.synergy_flops:.4e}")
        print(f"baseline FLOPs/sequence: {rep.baseline_flops:.4e}")
        print(f"ratio (incl. heads):     {rep.ratio:.3f}")
        print(f"ratio (layers only):     {rep.layer_ratio:.3f}")
        print(f"MLP share of extra layer FLOPs: {rep.mlp_share_of_extra:.1%}")
        print(f"  synergy  mlp {rep.synergy_layers.mlp:.4e}  attn {rep.synergy_layers.attn:.4e}")
        print(f"  baseline mlp {rep.baseline_layers.mlp:.4e}  attn {rep.baseline_layers.attn:.4e}")
    return 0


def cmd_visualize(args):
    from .checkpoint import build_model, load_checkpoint
    from .corpus import clip_segments, make_batch
    from .model import SynergyLM
    from .viz import VizRecord, render_ansi, render_html

    ckpt = load_checkpoint(args.checkpoint)
    model = build_model(ckpt)
    if not isinstance(model, SynergyLM):
        raise ValueError("visualize needs a routed-model checkpoint")
    text = args.text if args.text is not None else Path(args.input).read_text(encoding="utf-8")
    segs = clip_segments(text, model.cfg.context_length)
    if args.max_segments:
        segs = segs[: args.max_segments]
    if not segs:
        raise ValueError("no text to visualize")
    model.eval()
    records, picked, valid = [], 0, 0
    with torch.no_grad():
        for lo in range(0, len(segs), 16):
            chunk = segs[lo : lo + 16]
            ids, _ = make_batch(chunk, len(chunk), model.cfg.context_length)
            ids_t = torch.from_numpy(ids)
            _, state = model(ids_t, routing=args.routing)
            picked += int(state.mask.sum())
            valid += int(state.valid.sum())
            for r, seg in enumerate(chunk):
                n = len(seg.ids)
                sl = slice(1, n + 1)  # byte positions, skipping bos
                records.append(VizRecord(
                    seg.raw_bytes(),
                    state.w[r, sl].tolist(),
                    state.mask[r, sl].to(torch.int64).tolist(),
                    state.sigma[r, sl].tolist(),
                ))
    if args.format == "html":
        doc = render_html(records)
        Path(args.out).write_text(doc, encoding="utf-8")
    else:
        doc = "".join(render_ansi(r) for r in records)
        if args.out:
            Path(args.out).write_text(doc, encoding="utf-8")
        else:
            sys.stdout.write(doc)
    summary = {
        "segments": len(records),
        "bytes": sum(len(r.text_bytes) for r in records),
        "picked_bytes": sum(int(sum(r.m)) for r in records),
        "picked_fraction": picked / valid,
        "target_fraction": model.cfg.k / model.cfg.context_length,
        "routing": args.routing,
        "out": args.out,
    }
    print(json.dumps(summary), file=sys.stderr if args.format == "ansi" and not args.out else sys.stdout)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synergy",
        description="Byte-level routed language model: data prep, training, evaluation, ablations, FLOPs, visualization.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on standard error")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("prepare", help="split a corpus and write byte-segment shards")
    p.add_argument("--input", nargs="+", required=True, help=".txt or .jsonl corpus files")
    p.add_argument("--out-dir", required=True, help="directory for train/eval/test .seg shards")
    p.add_argument("--context-length", type=int, default=256, help="model context in bytes, incl. bos/eos")
    p.add_argument("--train-fraction", type=float, default=0.7, help="share of documents used for training")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-bpe", help="train a byte-level BPE vocabulary for the baseline")
    p.add_argument("--input", nargs="+", required=True, help=".txt or .jsonl corpus files")
    p.add_argument("--vocab-size", type=int, required=True, help="non-special vocabulary size (> 256)")
    p.add_argument("--out", required=True, help="output .bpe file")
    p.set_defaults(func=cmd_train_bpe)

    p = sub.add_parser("train", help="train the routed model or the dense baseline")
    _add_config_args(p)
    _add_data_args(p)
    p.add_argument("--out-dir", default="runs/train", help="checkpoint and metrics directory")
    p.add_argument("--model", choices=["synergy", "baseline"], default="synergy", help="model family")
    p.add_argument("--bpe", help="BPE vocabulary (.bpe) for the baseline; byte tokens otherwise")
    p.add_argument("--baseline-context", type=int, help="baseline context in tokens (default context/4.25)")
    p.add_argument("--log-every", type=int, default=10, help="log the training loss every N steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="bits-per-byte of a checkpoint on a data split")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    _add_data_args(p)
    p.add_argument("--split", choices=SPLITS, default="eval", help="which split to score")
    p.add_argument("--batch-size", type=int, default=16, help="evaluation batch size")
    p.add_argument("--max-batches", type=int, help="stop after N batches")
    p.add_argument("--routing", choices=["topk", "threshold"], default="topk", help="routing rule")
    p.add_argument("--bpe", help="BPE vocabulary for a BPE baseline checkpoint")
    p.set_defaults(func=cmd_eval, baseline_context=None)

    p = sub.add_parser("generate", help="sample bytes from a routed-model checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--prompt", default="", help="UTF-8 prompt text")
    p.add_argument("--max-new", type=int, default=200, help="number of bytes to sample")
    p.add_argument("--temperature", type=float, default=0.0, help="0 means greedy")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ablate-positioning", help="train one model per middle positioning mode")
    _add_config_args(p)
    _add_data_args(p)
    p.add_argument("--modes", nargs="+", help="subset of modes (default: all six)")
    p.add_argument("--out-dir", default="runs/positioning", help="output directory")
    p.set_defaults(func=cmd_ablate_positioning)

    p = sub.add_parser("ablate-k", help="train one model per concept-token count k")
    _add_config_args(p)
    _add_data_args(p)
    p.add_argument("--k-values", nargs="+", type=int, help="k values (default: T/16 T/8 T/4 T/2)")
    p.add_argument("--out-dir", default="runs/k_sweep", help="output directory")
    p.set_defaults(func=cmd_ablate_k)

    p = sub.add_parser("flops", help="analytic FLOPs of the routed model vs the dense baseline")
    _add_config_args(p)
    p.add_argument("--seq-bytes", type=int, help="bytes per sequence (default: context length)")
    p.add_argument("--k", type=int, help="concept tokens (default: config k)")
    p.add_argument("--baseline-tokens", type=int, help="baseline tokens (default: seq_bytes/4.25)")
    p.add_argument("--baseline-vocab", type=int, help="baseline vocabulary (default: 128256 for paper preset)")
    p.add_argument("--json", action="store_true", help="print the full report as JSON")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("visualize", help="render router weights and picks per byte")
    p.add_argument("--checkpoint", required=True, help="routed-model checkpoint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", help="text to route")
    src.add_argument("--input", help="UTF-8 text file to route")
    p.add_argument("--out", help="output file (required for html)")
    p.add_argument("--format", choices=["html", "ansi"], default="html", help="output format")
    p.add_argument("--routing", choices=["threshold", "topk"], default="threshold", help="routing rule")
    p.add_argument("--max-segments", type=int, help="render at most N segments")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("synergy: error: a subcommand is required", file=sys.stderr)
        return 2
    if args.command == "visualize" and args.format == "html" and not args.out:
        parser.error("visualize --format html needs --out")
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"synergy {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
