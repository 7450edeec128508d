"""Positioning-mode ablation and concept-token-count sweep."""

from __future__ import annotations

import csv
import logging
import traceback
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import torch

from .model import ModelConfig, SynergyLM
from .router import POSITIONING_MODES
from .training import MetricsWriter, TrainConfig, train

log = logging.getLogger(__name__)

# BPB at 5.5T tokens reported for the full-size model; reference annotations only.
REFERENCE_POSITIONING_BPB = {
    "original": 1.0164,
    "sigma": 1.0747,
    "sigma_grad": 1.0523,
    "sigma_all": 1.0251,
    "sigma_all_grad": 1.0630,
    "none": 0.9906,
}
REFERENCE_BBPE_TOKENS = 1024 / 4.25  # tokens per 1024-byte window under the 128k BBPE vocabulary
REFERENCE_K_KNEE = 192


@dataclass
class AblationRow:
    label: str
    final_bpb: Optional[float]
    best_bpb: Optional[float]
    picked_fraction: Optional[float]
    steps: int
    error: Optional[str] = None


def _run_one(cfg: ModelConfig, train_cfg: TrainConfig, train_segs, eval_segs, out_dir: Path, stem: str):
    torch.manual_seed(train_cfg.seed)
    model = SynergyLM(cfg)
    writer = MetricsWriter(out_dir, stem)
    _, records = train(model, train_segs, eval_segs, train_cfg, on_metrics=writer)
    last = records[-1]
    return AblationRow(
        label=stem,
        final_bpb=last.eval_bpb,
        best_bpb=min(r.eval_bpb for r in records),
        picked_fraction=last.picked_fraction,
        steps=last.step,
    )


def _guarded(label, fn):
    try:
        row = fn()
        row.label = label
        return row
    except Exception as exc:  # one failing variant must not abort the others
        log.error("run %s failed: %s", label, exc)
        return AblationRow(label, None, None, None, 0, error="".join(traceback.format_exception_only(type(exc), exc)).strip())


def run_positioning_ablation(
    base_cfg: ModelConfig,
    train_cfg: TrainConfig,
    modes: Sequence[str],
    train_segs,
    eval_segs,
    out_dir,
) -> list[AblationRow]:
    """Train one model per positioning mode from the same seed and data order.

    Writes ``<mode>.jsonl``/``.csv`` curves, ``positioning.csv`` and ``positioning.md``.
    """
    if not modes:
        raise ValueError("no positioning modes given")
    for mode in modes:
        if mode not in POSITIONING_MODES:
            raise ValueError(f"unknown positioning mode {mode!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for mode in modes:
        log.info("positioning ablation: mode %s", mode)
        cfg = replace(base_cfg, positioning=mode)
        rows.append(_guarded(mode, lambda: _run_one(cfg, train_cfg, train_segs, eval_segs, out_dir, mode)))
    _write_csv(out_dir / "positioning.csv", ["mode", "final_bpb", "best_bpb", "steps", "paper_bpb_reference", "error"],
               [[r.label, r.final_bpb, r.best_bpb, r.steps, REFERENCE_POSITIONING_BPB.get(r.label), r.error] for r in rows])
    (out_dir / "positioning.md").write_text(positioning_report(rows))
    return rows


def positioning_report(rows: Sequence[AblationRow]) -> str:
    lines = [
        "# Positioning modes",
        "",
        "| mode | final BPB | best BPB | steps | reference BPB (full-size run, not reproduced) |",
        "|---|---|---|---|---|",
    ]
    for r in rows:
        ref = REFERENCE_POSITIONING_BPB.get(r.label)
        final = "failed" if r.final_bpb is None else f"{r.final_bpb:.4f}"
        best = "-" if r.best_bpb is None else f"{r.best_bpb:.4f}"
        lines.append(f"| {r.label} | {final} | {best} | {r.steps} | {ref if ref is not None else '-'} |")
    lines += ["", "Reference values come from a 0.5B-parameter model at 5.5T tokens and are annotations only."]
    errors = [r for r in rows if r.error]
    if errors:
        lines += ["", "## Failures", ""] + [f"- {r.label}: {r.error}" for r in errors]
    return "\n".join(lines) + "\n"


def run_k_sweep(
    base_cfg: ModelConfig,
    train_cfg: TrainConfig,
    k_values: Sequence[int],
    train_segs,
    eval_segs,
    out_dir,
) -> list[AblationRow]:
    """One training per concept-token count ``k``; writes ``k_sweep.csv`` and ``k_sweep.md``."""
    for k in k_values:
        if not 1 <= k <= base_cfg.context_length:
            raise ValueError(f"k={k} outside [1, {base_cfg.context_length}]")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in k_values:
        log.info("k sweep: k=%d", k)
        cfg = replace(base_cfg, k=int(k))
        label = f"k{k}"
        rows.append(_guarded(label, lambda: _run_one(cfg, train_cfg, train_segs, eval_segs, out_dir, label)))
    bbpe_line = base_cfg.context_length / 4.25
    _write_csv(out_dir / "k_sweep.csv", ["k", "final_bpb", "best_bpb", "picked_fraction", "steps", "bbpe_tokens_reference", "error"],
               [[k, r.final_bpb, r.best_bpb, r.picked_fraction, r.steps, round(bbpe_line, 2), r.error]
                for k, r in zip(k_values, rows)])
    lines = [
        "# Concept-token count sweep",
        "",
        f"BBPE reference: {base_cfg.context_length} bytes / 4.25 bytes per token = {bbpe_line:.2f} tokens.",
        f"Full-size reference: {REFERENCE_BBPE_TOKENS:.2f} BBPE tokens per 1024 bytes; BPB held until k fell below {REFERENCE_K_KNEE}.",
        "",
        "| k | k/T | final BPB | picked fraction |",
        "|---|---|---|---|",
    ]
    for k, r in zip(k_values, rows):
        final = "failed" if r.final_bpb is None else f"{r.final_bpb:.4f}"
        frac = "-" if r.picked_fraction is None else f"{r.picked_fraction:.4f}"
        lines.append(f"| {k} | {k / base_cfg.context_length:.4f} | {final} | {frac} |")
    (out_dir / "k_sweep.md").write_text("\n".join(lines) + "\n")
    return rows


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
