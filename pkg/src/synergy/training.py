"""Training loop, BPB evaluation, router-threshold calibration and glitch detection."""

from __future__ import annotations

import contextlib
import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, make_checkpoint
from .corpus import ByteSegment, iter_batches, make_batch
from .model import SynergyLM, loss, routing_arrays

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 3e-3
    lr_schedule: str = "cosine_with_warmup"
    warmup_steps: int = 50
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip_norm: float = 1.0
    total_steps: int = 1000
    eval_interval: int = 50
    eval_batches: int = 8
    seed: int = 0
    glitch_threshold: float = 0.5
    glitch_smoothing: int = 1
    glitch_rollback: bool = False
    precision: str = "f32"
    reference_mode: bool = False
    target_bpb: Optional[float] = None
    time_budget_s: Optional[float] = None
    calibration_batches: int = 8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if self.lr_schedule not in ("constant", "cosine_with_warmup"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.precision not in ("f32", "mixed"):
            raise ValueError(f"unknown precision {self.precision!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class MetricsRecord:
    step: int
    train_loss_nats: float
    eval_bpb: float
    tokens_seen: int
    bytes_seen: int
    picked_fraction: float
    glitch: bool
    wall_clock_s: float
    lr: float = 0.0


class TrainingDiverged(RuntimeError):
    pass


def bpb(total_ce_nats: float, n_bytes: int) -> float:
    """Bits per byte: ``total_ce_nats / (n_bytes * ln 2)``."""
    if n_bytes < 1:
        raise ValueError("n_bytes must be >= 1")
    return total_ce_nats / (n_bytes * LN2)


def scored_bytes(segments: Sequence[ByteSegment]) -> int:
    """BPB denominator for a set of segments: raw bytes plus one per segment terminator.

    The terminator is scored by every model (byte or BPE), so it is charged as one
    byte; this keeps the denominator identical across tokenizers.
    """
    return sum(s.byte_len for s in segments) + len(segments)


# ---------------------------------------------------------------------------
# glitch detection


def smooth(series, window: int) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` points average what exists."""
    x = np.asarray(series, dtype=np.float64)
    if window <= 1 or x.size == 0:
        return x.copy()
    c = np.concatenate(([0.0], np.cumsum(x)))
    idx = np.arange(x.size)
    lo = np.maximum(0, idx - window + 1)
    return (c[idx + 1] - c[lo]) / (idx + 1 - lo)


def detect_glitch(bpb_series, threshold: float, smoothing_window: int = 1) -> list[int]:
    """Indices t where the smoothed BPB exceeds its running minimum over s < t by ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    s = smooth(bpb_series, smoothing_window)
    if s.size < 2:
        return []
    prior_min = np.minimum.accumulate(s)[:-1]
    return (np.flatnonzero(s[1:] - prior_min > threshold) + 1).tolist()


# ---------------------------------------------------------------------------
# evaluation


def _autocast(precision: str):
    if precision == "mixed":
        return torch.autocast("cpu", dtype=torch.bfloat16)
    return contextlib.nullcontext()


@torch.no_grad()
def evaluate(
    model,
    segments: Sequence[ByteSegment],
    batch_size: int,
    max_batches: Optional[int] = None,
    routing: str = "topk",
    precision: str = "f32",
) -> dict:
    """Cross entropy over ``segments`` (in order) and the BPB it implies."""
    was_training = model.training
    model.eval()
    specials = model.specials
    context = model.cfg.context_length if isinstance(model, SynergyLM) else model.context_length
    total, n_targets, picked, valid_tokens, used = 0.0, 0, 0, 0, []
    for b, (ids, mask, chunk) in enumerate(iter_batches(segments, batch_size, context, specials=specials)):
        if max_batches is not None and b >= max_batches:
            break
        ids_t = torch.from_numpy(ids)
        mask_t = torch.from_numpy(mask)
        with _autocast(precision):
            logits, state = model(ids_t, routing=routing)
        mean, per_pos = loss(logits.float() if precision == "mixed" else logits, ids_t, mask_t)
        total += float(per_pos.double().sum())
        n_targets += int(mask_t[:, :-1].sum())
        if state is not None:
            picked += int(state.mask.sum())
            valid_tokens += int(state.valid.sum())
        used.extend(chunk)
    model.train(was_training)
    n_bytes = scored_bytes(used)
    return {
        "total_nats": total,
        "n_targets": n_targets,
        "n_bytes": n_bytes,
        "loss_nats": total / max(n_targets, 1),
        "bpb": bpb(total, n_bytes),
        "picked_fraction": picked / valid_tokens if valid_tokens else 1.0,
    }


@torch.no_grad()
def collect_router_weights(model: SynergyLM, segments, batch_size, max_batches=None) -> np.ndarray:
    """Router weights of all valid positions (the weights do not depend on routing)."""
    model.eval()
    out = []
    for b, (ids, _, _) in enumerate(iter_batches(segments, batch_size, model.cfg.context_length)):
        if max_batches is not None and b >= max_batches:
            break
        ids_t = torch.from_numpy(ids)
        x = model.encode(model.embed(ids_t))
        w = model.router(x)
        out.append(w[ids_t != model.specials.pad].double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def calibrate_threshold(model: SynergyLM, segments, batch_size, max_batches=None) -> float:
    """Set ``model.router_threshold`` to the ``1 - k/T`` quantile of validation weights."""
    w = collect_router_weights(model, segments, batch_size, max_batches)
    rate = model.cfg.k / model.cfg.context_length
    threshold = float(np.quantile(w, 1.0 - rate)) if w.size else 0.0
    model.router_threshold.fill_(threshold)
    return threshold


# ---------------------------------------------------------------------------
# metrics sink


class MetricsWriter:
    """Line-delimited JSON metrics with a CSV mirror."""

    def __init__(self, out_dir, stem: str = "metrics"):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.jsonl = self.out_dir / f"{stem}.jsonl"
        self.csv = self.out_dir / f"{stem}.csv"
        self.jsonl.write_text("")
        self._header = [f.name for f in fields(MetricsRecord)]
        with self.csv.open("w", newline="") as fh:
            csv.writer(fh).writerow(self._header)

    def __call__(self, rec: MetricsRecord):
        row = asdict(rec)
        with self.jsonl.open("a") as fh:
            fh.write(json.dumps(row) + "\n")
        with self.csv.open("a", newline="") as fh:
            csv.writer(fh).writerow([row[h] for h in self._header])


def read_metrics(path) -> list[MetricsRecord]:
    with open(path) as fh:
        return [MetricsRecord(**json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# training


def lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    floor = cfg.lr * cfg.min_lr_ratio
    return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.Optimizer:
    """AdamW; weight decay only on matrices (embeddings and projections)."""
    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.dim() >= 2 else no_decay).append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), foreach=False)


def set_reference_mode(enabled: bool = True):
    """Single-threaded deterministic kernels."""
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)


def _dump_failure(dump_dir, step, ids, mask, state):
    if dump_dir is None:
        return None
    dump_dir = Path(dump_dir)
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"diverged_step{step}.npz"
    arrays = {"ids": ids.numpy(), "loss_mask": mask.numpy()}
    if state is not None:
        arrays.update(routing_arrays(state))
    np.savez(path, **arrays)
    return path


def train(
    model,
    train_segments: Sequence[ByteSegment],
    eval_segments: Sequence[ByteSegment],
    cfg: TrainConfig,
    on_metrics: Optional[Callable[[MetricsRecord], None]] = None,
    dump_dir=None,
    log_every: int = 0,
) -> tuple[Checkpoint, list[MetricsRecord]]:
    """Next-token training with periodic BPB evaluation.

    Stops after ``total_steps``, when eval BPB drops below ``target_bpb``, or when
    ``time_budget_s`` runs out. Routed models get their inference threshold
    calibrated on ``eval_segments`` at the end. A non-finite loss raises
    :class:`TrainingDiverged` after dumping the batch and routing state to
    ``dump_dir``.
    """
    if not train_segments:
        raise ValueError("no training segments")
    if cfg.reference_mode:
        set_reference_mode(True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    context = model.cfg.context_length if isinstance(model, SynergyLM) else model.context_length
    specials = model.specials
    opt = make_optimizer(model, cfg)
    records: list[MetricsRecord] = []
    bpb_series: list[float] = []
    snapshot = None
    tokens_seen = bytes_seen = 0
    start = time.perf_counter()
    batches = iter(())
    running = []
    model.train()
    step = 0
    for step in range(1, cfg.total_steps + 1):
        chunk = next(batches, None)
        if chunk is None:
            batches = iter_batches(train_segments, cfg.batch_size, context, rng, specials,
                                   drop_last=len(train_segments) >= cfg.batch_size)
            chunk = next(batches)
        ids_np, mask_np, segs = chunk
        ids = torch.from_numpy(ids_np)
        mask = torch.from_numpy(mask_np)
        lr = lr_at(step - 1, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        with _autocast(cfg.precision):
            logits, state = model(ids)
        mean, _ = loss(logits.float(), ids, mask)
        if not torch.isfinite(mean):
            path = _dump_failure(dump_dir, step, ids, mask, state)
            raise TrainingDiverged(f"non-finite loss at step {step}; batch dumped to {path}")
        opt.zero_grad(set_to_none=True)
        mean.backward()
        if cfg.grad_clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
        opt.step()
        running.append(float(mean.detach()))
        tokens_seen += int(mask.sum())
        bytes_seen += sum(s.byte_len for s in segs)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f lr %.2e", step, running[-1], lr)

        last = step == cfg.total_steps
        if step % cfg.eval_interval == 0 or last:
            ev = evaluate(model, eval_segments, cfg.batch_size, cfg.eval_batches, precision=cfg.precision)
            bpb_series.append(ev["bpb"])
            glitch = (len(bpb_series) - 1) in detect_glitch(bpb_series, cfg.glitch_threshold, cfg.glitch_smoothing)
            rec = MetricsRecord(
                step=step,
                train_loss_nats=float(np.mean(running)) if running else float("nan"),
                eval_bpb=ev["bpb"],
                tokens_seen=tokens_seen,
                bytes_seen=bytes_seen,
                picked_fraction=ev["picked_fraction"],
                glitch=glitch,
                wall_clock_s=time.perf_counter() - start,
                lr=lr,
            )
            running = []
            records.append(rec)
            if on_metrics:
                on_metrics(rec)
            log.info("step %d eval bpb %.4f%s", step, rec.eval_bpb, " GLITCH" if glitch else "")
            if glitch and cfg.glitch_rollback and snapshot is not None:
                model.load_state_dict(snapshot[0])
                opt.load_state_dict(snapshot[1])
                log.warning("glitch at step %d: rolled back to the previous evaluation", step)
            elif cfg.glitch_rollback:
                snapshot = (
                    {k: v.clone() for k, v in model.state_dict().items()},
                    copy.deepcopy(opt.state_dict()),
                )
            if cfg.target_bpb is not None and rec.eval_bpb < cfg.target_bpb:
                break
            if cfg.time_budget_s is not None and rec.wall_clock_s > cfg.time_budget_s:
                break

    if isinstance(model, SynergyLM):
        calibrate_threshold(model, eval_segments, cfg.batch_size, cfg.calibration_batches)
    ckpt = make_checkpoint(model, opt, step=step, train_config=cfg.to_dict(), np_rng=rng)
    return ckpt, records


def batch_for(segments, model, batch_size=None):
    """Convenience: a single framed batch as tensors."""
    context = model.cfg.context_length if isinstance(model, SynergyLM) else model.context_length
    ids, mask = make_batch(segments, batch_size or len(segments), context, model.specials)
    return torch.from_numpy(ids), torch.from_numpy(mask)
