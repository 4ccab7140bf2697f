"""Command-line entry points.

Subcommands: synth, prep, pretrain, eval-retrieval, inspect-attn, and
report-stats. Run ``velvet <command> -h`` for per-command flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import load_paired_dataset
from .errors import NonFiniteLoss
from .reports import (RawReport, corpus_stats, read_reports_jsonl,
                      segment_report, tokenize)
from .retrieval import embed_pairs, eval_retrieval
from .synth import default_vocabulary, synth_dataset, write_synth_dataset
from .trainer import (Trainer, checkpoint_model, checkpoint_vocabulary,
                      dump_diagnostics, text_caps)
from .tribert import build_tri_batch
from .volumes import prep_directory


def cmd_synth(args) -> int:
    ds = synth_dataset(args.n, args.seed, size=args.volume_size)
    write_synth_dataset(ds, args.out)
    print(f"wrote {len(ds)} paired samples to {args.out}")
    return 0


def cmd_prep(args) -> int:
    rejected = prep_directory(args.in_dir, args.out, exclude_file=args.exclude,
                              size=args.size, min_slices=args.min_slices)
    report_path = Path(args.out) / "rejected.csv"
    with open(report_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "reason"])
        writer.writerows(rejected)
    print(f"rejected {len(rejected)} scans (reasons in {report_path})")
    return 0


def cmd_pretrain(args) -> int:
    cfg = RunConfig.from_json(args.config)
    dataset = load_paired_dataset(args.data, caps=text_caps(cfg))
    ckpt_dir = Path(args.ckpt)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    resume = ckpt_dir / "last.ckpt"
    if args.resume and resume.exists():
        trainer = Trainer.from_checkpoint(resume, dataset,
                                          metrics_path=ckpt_dir / "metrics.csv")
        print(f"resumed from step {trainer.step}")
    else:
        trainer = Trainer(cfg, dataset, metrics_path=ckpt_dir / "metrics.csv")
    try:
        trainer.run(ckpt_dir=ckpt_dir)
    except NonFiniteLoss as exc:
        dump_path = ckpt_dir / f"nonfinite_step{trainer.step}.json"
        dump_diagnostics(dump_path, exc, trainer.step)
        print(f"aborted: {exc} (diagnostics in {dump_path})", file=sys.stderr)
        return 2
    print(f"trained {trainer.step} steps; checkpoints in {ckpt_dir}")
    return 0


def cmd_eval_retrieval(args) -> int:
    payload = load_checkpoint(args.ckpt)
    cfg = RunConfig.from_dict(payload["config"])
    vocab = checkpoint_vocabulary(payload)
    model = checkpoint_model(payload)
    dataset = load_paired_dataset(args.data, caps=text_caps(cfg), vocab=vocab)
    ks = tuple(int(k) for k in args.k.split(","))
    scans, texts = embed_pairs(model, dataset.volumes, dataset.reports)
    report = eval_retrieval(scans, texts, ks=ks)
    for direction, values in report.as_rows():
        cells = "  ".join(f"R@{k}={v:.4f}" for k, v in zip(sorted(report.srr), values))
        print(f"{direction}: {cells}")
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"srr": report.srr, "rsr": report.rsr, "sim_hash": report.sim_hash},
            indent=2))
    return 0


def cmd_inspect_attn(args) -> int:
    payload = load_checkpoint(args.ckpt)
    cfg = RunConfig.from_dict(payload["config"])
    vocab = checkpoint_vocabulary(payload)
    model = checkpoint_model(payload)

    report_path = Path(args.report)
    if report_path.suffix == ".jsonl":
        raw = read_reports_jsonl(report_path)[0]
    else:
        raw = RawReport(id=report_path.stem, text=report_path.read_text())
    tokenized = tokenize(segment_report(raw.text), vocab, caps=text_caps(cfg),
                         report_id=raw.id)
    tri = build_tri_batch([tokenized], model.text_cfg)
    feats = model.text.encode(tri, return_attn=True)
    attn = feats.attn[0].detach().numpy()  # [H, L, L]
    length = int(tri.pad_mask[0].sum())
    attn = attn[:, :length, :length]
    tokens = [vocab.tokens[t] for t in tri.token_ids[0, :length].tolist()]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for h in range(attn.shape[0]):
        with open(out / f"attn_head{h}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([""] + tokens)
            for tok, row in zip(tokens, attn[h]):
                writer.writerow([tok] + [f"{v:.6f}" for v in row])
    _plot_attention(attn, tokens, out / "attn.png")
    print(f"wrote {attn.shape[0]} head maps for {length} tokens to {out}")
    return 0


def _plot_attention(attn: np.ndarray, tokens: list[str], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    heads = attn.shape[0]
    cols = min(heads, 4)
    rows = (heads + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 4 * rows),
                             squeeze=False)
    for h in range(rows * cols):
        ax = axes[h // cols][h % cols]
        if h >= heads:
            ax.axis("off")
            continue
        # reversed grayscale: darker = higher attention weight
        ax.imshow(attn[h], cmap="gray_r", vmin=0.0, vmax=attn[h].max() or 1.0)
        ax.set_title(f"head {h}", fontsize=9)
        if len(tokens) <= 32:
            ax.set_xticks(range(len(tokens)))
            ax.set_xticklabels(tokens, rotation=90, fontsize=5)
            ax.set_yticks(range(len(tokens)))
            ax.set_yticklabels(tokens, fontsize=5)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def cmd_report_stats(args) -> int:
    vocab = default_vocabulary()
    reports = read_reports_jsonl(args.reports)
    tokenized = [tokenize(segment_report(r.text), vocab, report_id=r.id)
                 for r in reports]
    table = corpus_stats(tokenized)
    table.to_csv(args.out)
    print(f"wrote statistics for {len(tokenized)} reports to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="velvet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--volume-size", type=int, default=96)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", help="filter and resample raw scan containers")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude", default=None)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--min-slices", type=int, default=48)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("pretrain", help="run the composite pre-training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval-retrieval", help="recall@K for both directions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", default="1,5,10")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("inspect-attn", help="dump final-layer text attention maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_attn)

    p = sub.add_parser("report-stats", help="corpus statistics CSV")
    p.add_argument("--reports", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
