"""Acceptance suite: one test per top-level criterion.

Each test prints a one-line verdict (visible with ``-s``); the conftest hook repeats
the PASS/FAIL lines in the terminal summary. The desk-scale training run takes a
few CPU minutes and is shared by the learning and visualisation criteria.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from htmlcheck import parse_cells

from synergy.ablation import REFERENCE_POSITIONING_BPB
from synergy.checkpoint import build_model, load_checkpoint
from synergy.cli import main
from synergy.corpus import (
    BYTE_SPECIALS,
    bpe_decode,
    bpe_encode,
    bpe_train,
    clip_byte_segments,
    clip_byte_spans,
    clip_segments,
    make_batch,
    utf8_detokenize,
    utf8_tokenize,
)
from synergy.flops import estimate_flops, layer_flops
from synergy.formats import load_segments
from synergy.model import SynergyLM, desk_config, loss, tiny_config
from synergy.router import POSITIONING_MODES, gather_compressed, route_topk
from synergy.sample_text import python_docs_text
from synergy.training import LN2, TrainConfig, evaluate, read_metrics, train

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
DESK = ["--config", str(CONFIGS / "desk.toml")]
TARGET_BPB = 3.5
BUDGET_S = 4 * 3600


def verdict(label, ok, detail=""):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    assert ok, detail


def random_model(mode="none", dtype=torch.float32, router_std=1.0, seed=0, **kw):
    """Tiny model with live router weights and a non-zero middle output projection."""
    torch.manual_seed(seed)
    model = SynergyLM(tiny_config(positioning=mode, zero_init_middle_out=False, **kw)).to(dtype)
    with torch.no_grad():
        model.router.proj.weight.normal_(std=router_std)
    return model.eval()


def random_ids(rng, batch, T, min_len=1):
    """``bos bytes... eos pad...`` rows with random lengths."""
    ids = torch.full((batch, T), BYTE_SPECIALS.pad, dtype=torch.int64)
    for r in range(batch):
        n = int(rng.integers(min_len, T - 1))
        ids[r, 0] = BYTE_SPECIALS.bos
        ids[r, 1 : n + 1] = torch.from_numpy(rng.integers(0, 256, n))
        ids[r, n + 1] = BYTE_SPECIALS.eos
    return ids


# ---------------------------------------------------------------------------
# 1. router invariants


@pytest.mark.criterion("router invariants on 10,000 random instances")
def test_router_invariants():
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    n_instances, n_tied = 10_000, 0
    for i in range(n_instances):
        T = int(rng.integers(1, 65))
        if i % 2:
            # dyadic grid: many ties, and shifts are exact in float32
            w = (rng.integers(-32, 33, T) / 8.0).astype(np.float32)
            c = float(rng.integers(-800, 801) / 8.0)
            n_tied += len(np.unique(w)) < T
        else:
            w = rng.standard_normal(T) * 3.0
            c = float(rng.uniform(-50, 50))
        k = int(rng.integers(1, T + 6))
        n_valid = T if rng.random() < 0.5 else int(rng.integers(1, T + 1))
        valid = np.arange(T) < n_valid

        state = route_topk(torch.from_numpy(w)[None], k, torch.from_numpy(valid)[None])
        mask = state.mask[0].numpy()
        n = int(mask.sum())
        assert n == min(k, n_valid), (i, n, k, n_valid)
        assert not mask[~valid].any()
        chosen = sorted(np.flatnonzero(valid).tolist(), key=lambda j: (-w[j], j))[:k]
        assert set(np.flatnonzero(mask).tolist()) == set(chosen), i
        rest = valid & ~mask
        if rest.any():
            assert w[mask].min() >= w[rest].max()
        assert state.picked[0, :n].tolist() == sorted(chosen)
        sig = 1.0 / (1.0 + np.exp(-w.astype(np.float64)))
        assert np.abs(state.sigma[0].double().numpy() - sig).max() < 1e-6
        shifted = route_topk(torch.from_numpy(w + np.asarray(c, dtype=w.dtype))[None], k,
                             torch.from_numpy(valid)[None])
        assert torch.equal(shifted.mask, state.mask), i
    elapsed = time.perf_counter() - start
    verdict("router invariants", elapsed < 60.0,
            f"{n_instances} instances ({n_tied} with ties) in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. bypass identity


@pytest.mark.criterion("zero middle output reproduces the encoder-decoder bypass exactly")
def test_bypass_identity(reference_mode):
    rng = np.random.default_rng(12)
    worst = 0.0
    for m, mode in enumerate(POSITIONING_MODES):
        torch.manual_seed(100 + m)
        model = SynergyLM(tiny_config(positioning=mode)).eval()
        assert torch.count_nonzero(model.middle_out.weight) == 0
        with torch.no_grad():
            model.router.proj.weight.normal_()
            for _ in range(100):
                ids = random_ids(rng, int(rng.integers(1, 4)), 24)
                full, state = model(ids)
                assert state.mask.any()
                worst = max(worst, float((full - model.forward_bypass(ids)).abs().max()))
    verdict("bypass identity", worst == 0.0, f"max |diff| = {worst} over 6 modes x 100 inputs")


# ---------------------------------------------------------------------------
# 3. causality


@pytest.mark.criterion("perturbing position j leaves logits before j unchanged")
def test_causality():
    start = time.perf_counter()
    rng = np.random.default_rng(13)
    worst, checks, mask_leaks, topk_token_checks = 0.0, 0, 0, 0
    for mode in POSITIONING_MODES:
        model = random_model(mode, seed=7)
        with torch.no_grad():
            for _ in range(3):
                ids = random_ids(rng, 1, 24, min_len=22)
                T = ids.shape[1]
                emb = model.embed(ids)
                base, state = model(ids, embeds=emb)
                w = state.w[state.valid].double().numpy()
                model.router_threshold.fill_(float(np.quantile(w, 1 - 8 / 24)))
                base_th, state_th = model(ids, routing="threshold")
                for j in range(1, T):
                    # (a) top-k routing, continuous perturbation that keeps the selection
                    for eps in (1e-2, 1e-4, 1e-6):
                        e2 = emb.clone()
                        e2[0, j] += eps * torch.randn(emb.shape[-1])
                        out, st = model(ids, embeds=e2)
                        if torch.equal(st.mask, state.mask):
                            break
                    else:
                        pytest.fail(f"could not keep the selection fixed at j={j}")
                    diff = (out - base).abs().amax(-1)[0]
                    worst = max(worst, float(diff[:j].max()))
                    assert diff[j] > 0
                    checks += 1
                    # (b) threshold routing, discrete token substitution
                    ids2 = ids.clone()
                    ids2[0, j] = (int(ids[0, j]) + 1 + int(rng.integers(0, 200))) % 256 if ids[0, j] < 256 else 65
                    out_th, _ = model(ids2, routing="threshold")
                    worst = max(worst, float((out_th - base_th).abs().amax(-1)[0, :j].max()))
                    checks += 1
                    # (c) top-k with a token substitution: only a changed selection before j may leak
                    out_k, st_k = model(ids2)
                    if torch.equal(st_k.mask[0, :j], state.mask[0, :j]):
                        worst = max(worst, float((out_k - base).abs().amax(-1)[0, :j].max()))
                        topk_token_checks += 1
                    else:
                        mask_leaks += 1
    elapsed = time.perf_counter() - start
    verdict("causality", worst < 1e-6 and elapsed < 60,
            f"max |diff| before j = {worst:.2e} over {checks + topk_token_checks} perturbations, "
            f"{elapsed:.1f}s; {mask_leaks} token edits re-ranked an earlier top-k pick (excluded, see notes)")


# ---------------------------------------------------------------------------
# 4. NoPE position independence


def _middle_outputs(model, ids, picks):
    with torch.no_grad():
        x = model.encode(model.embed(ids))
        mask = torch.zeros_like(ids, dtype=torch.bool)
        mask[0, picks] = True
        state = model.route(x, ids != BYTE_SPECIALS.pad, mask=mask)
        xc = gather_compressed(x, state.picked)
        return xc, model.run_middle(xc, state.middle_positions)


@pytest.mark.criterion("middle outputs ignore original positions without positional encoding")
def test_nope_position_independence():
    rng = np.random.default_rng(14)
    W = tiny_config().block.window  # encoder receptive field of one local layer
    pairs = [([6, 12, 18], [6, 14, 23]), ([6, 13, 23], [8, 14, 20]), ([7, 15], [9, 22])]
    diffs = {}
    for mode in ("none", "original"):
        model = random_model(mode, torch.float64, seed=3, init_std=0.3)
        worst_in, outs = 0.0, []
        for p, q in pairs:
            for _ in range(10):
                a = torch.from_numpy(rng.integers(0, 256, 24))
                b = torch.from_numpy(rng.integers(0, 256, 24))
                a[0] = b[0] = BYTE_SPECIALS.bos
                for pa, qb in zip(p, q):
                    b[qb - W + 1 : qb + 1] = a[pa - W + 1 : pa + 1]
                xa, ma = _middle_outputs(model, a[None], p)
                xb, mb = _middle_outputs(model, b[None], q)
                worst_in = max(worst_in, float((xa - xb).abs().max()))
                outs.append(float((ma - mb).abs().max()))
        assert worst_in < 1e-10, "constructed masks must select identical encoder outputs"
        # same check straight on the middle stack, with values placed by hand
        x = torch.randn(1, 24, 32, dtype=torch.float64)
        y = torch.randn(1, 24, 32, dtype=torch.float64)
        y[0, [2, 9, 21]] = x[0, [4, 5, 6]]
        valid = torch.ones(1, 24, dtype=torch.bool)
        mids = []
        with torch.no_grad():
            for picks, src in (([4, 5, 6], x), ([2, 9, 21], y)):
                m = torch.zeros(1, 24, dtype=torch.bool)
                m[0, picks] = True
                st = model.route(src, valid, mask=m)
                mids.append(model.run_middle(gather_compressed(src, st.picked), st.middle_positions))
        outs.append(float((mids[0] - mids[1]).abs().max()))
        diffs[mode] = outs
    gaps = {"none": max(diffs["none"]), "original": min(diffs["original"])}
    ok = gaps["none"] < 1e-6 and gaps["original"] > 1e-4
    verdict("NoPE position independence", ok,
            f"max |diff| without positions {gaps['none']:.2e}; min |diff| with original indices {gaps['original']:.2e}")


# ---------------------------------------------------------------------------
# 5. gradients


def _fd_check(mode, rng):
    model = random_model(mode, torch.float64, router_std=0.5, seed=5).train()
    segs = clip_byte_segments(rng.integers(0, 256, 60).astype(np.uint8).tobytes(), 24, utf8=False)
    ids, lmask = (torch.from_numpy(a) for a in make_batch(segs[:3], 3, 24))
    lmask = lmask.double()

    def f():
        logits, st = model(ids)
        return loss(logits, ids, lmask)[0], st

    model.zero_grad()
    value, base_state = f()
    value.backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}
    if not mode.endswith("_grad"):
        # positions are a stop-gradient input here: hold them at their base values
        frozen = base_state.middle_positions.detach()
        route = model.route

        def fixed_route(*a, **kw):
            st = route(*a, **kw)
            st.middle_positions = frozen
            return st

        model.route = fixed_route
    h = 1e-3
    checked, bad, skipped = 0, 0, 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            take = flat.numel() if name.startswith("router") else min(flat.numel(), 8)
            for idx in rng.choice(flat.numel(), take, replace=False).tolist():
                old = flat[idx].item()
                flat[idx] = old + h
                up, st_up = f()
                flat[idx] = old - h
                down, st_down = f()
                flat[idx] = old
                if not (torch.equal(st_up.mask, base_state.mask) and torch.equal(st_down.mask, base_state.mask)):
                    skipped += 1
                    continue
                num = (up.item() - down.item()) / (2 * h)
                ana = grads[name].view(-1)[idx].item()
                checked += 1
                bad += abs(num - ana) > 1e-3 * max(abs(num), abs(ana), 1e-7)
    return checked, bad, skipped, grads["router.proj.weight"]


@pytest.mark.criterion("autograd matches central finite differences in all six modes")
def test_gradients_finite_differences():
    rng = np.random.default_rng(15)
    lines, ok, router_grads = [], True, {}
    for mode in POSITIONING_MODES:
        checked, bad, skipped, g = _fd_check(mode, rng)
        router_grads[mode] = g
        share = 1 - bad / checked
        ok &= share >= 0.99 and checked >= 200 and float(g.abs().sum()) > 0
        lines.append(f"{mode} {checked - bad}/{checked} (skip {skipped})")
    # the *_grad modes add a position path into the router gradient
    for m in ("sigma", "sigma_all"):
        extra = float((router_grads[m + "_grad"] - router_grads[m]).abs().max())
        ok &= extra > 1e-9
        lines.append(f"{m} position-path gradient {extra:.1e}")
    verdict("gradient check", ok, "; ".join(lines))


# ---------------------------------------------------------------------------
# 6. desk-scale learning


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    text = python_docs_text(1_000_000)
    (root / "corpus.txt").write_text(text, encoding="utf-8")
    assert main(["prepare", "--input", str(root / "corpus.txt"), "--out-dir", str(root / "data"),
                 "--context-length", "256"]) == 0
    return root


@pytest.fixture(scope="module")
def desk_run(desk_data):
    out = desk_data / "run"
    start = time.perf_counter()
    rc = main(["train", *DESK, "--data", str(desk_data / "data"), "--out-dir", str(out),
               "--set", "train.warmup_steps=30", "--set", "train.eval_interval=25",
               "--set", "train.eval_batches=100000", "--set", f"train.target_bpb={TARGET_BPB}",
               "--set", f"train.time_budget_s={BUDGET_S}", "--log-every", "25"])
    assert rc == 0
    return {"out": out, "data": desk_data / "data", "seconds": time.perf_counter() - start,
            "records": read_metrics(out / "metrics.jsonl")}


@pytest.mark.criterion("desk preset learns English, memorises 1 KB, cannot compress noise")
def test_desk_learning(desk_run):
    parts = []
    rec = desk_run["records"][-1]
    english = rec.eval_bpb < TARGET_BPB and desk_run["seconds"] < BUDGET_S
    parts.append(f"English eval BPB {rec.eval_bpb:.3f} at step {rec.step} in {desk_run['seconds']:.0f}s")

    # BPB equals loss/ln2 for the byte model, on the trained checkpoint
    model = build_model(load_checkpoint(desk_run["out"] / "checkpoint.ckpt"))
    eval_segs, _ = load_segments(desk_run["data"] / "eval.seg")
    res = evaluate(model, eval_segs[:64], 32)
    identity = abs(res["bpb"] - res["loss_nats"] / LN2)
    parts.append(f"|BPB - loss/ln2| = {identity:.1e}")

    # 1 KB memorisation
    text = python_docs_text(20_000)[5_000:6_024]
    pieces = clip_segments(text, 256)
    torch.manual_seed(0)
    _, recs = train(SynergyLM(desk_config()), pieces, pieces,
                    TrainConfig(batch_size=len(pieces), lr=3e-3, warmup_steps=20, total_steps=300,
                                eval_interval=10, eval_batches=1, target_bpb=0.2))
    memo = recs[-1].eval_bpb
    parts.append(f"1 KB memorised to {memo:.3f} BPB in {recs[-1].step} steps")

    # uniform random bytes stay incompressible
    rng = np.random.default_rng(16)
    noise_train = clip_byte_segments(rng.integers(0, 256, 200_000).astype(np.uint8).tobytes(), 256, utf8=False)
    noise_eval = clip_byte_segments(rng.integers(0, 256, 20_000).astype(np.uint8).tobytes(), 256, utf8=False)
    torch.manual_seed(0)
    _, recs = train(SynergyLM(desk_config()), noise_train, noise_eval,
                    TrainConfig(batch_size=16, lr=3e-3, warmup_steps=10, total_steps=40,
                                eval_interval=20, eval_batches=100))
    noise = min(r.eval_bpb for r in recs)
    parts.append(f"random bytes {noise:.3f} BPB")

    ok = english and identity < 1e-9 and memo < 0.2 and noise >= 7.9
    verdict("desk learning", ok, "; ".join(parts))


# ---------------------------------------------------------------------------
# 7. FLOPs


@pytest.mark.criterion("FLOPs ratio and MLP share at full size, hand counts at tiny size")
def test_flops(capsys):
    assert main(["flops", "--preset", "paper", "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    # tiny: T=24, d=32, mlp=64, window 6, k=8, baseline round(24/4.25)=6 tokens
    local = layer_flops(24, 32, 64, 6)
    middle = layer_flops(8, 32, 64)
    dense = layer_flops(6, 32, 64)
    hand = (
        (local.mlp, local.attn_proj, local.attn_mix) == (294_912, 196_608, 16_512)
        and (middle.mlp, middle.attn_proj, middle.attn_mix) == (98_304, 65_536, 4_608)
        and (dense.mlp, dense.attn_proj, dense.attn_mix) == (73_728, 49_152, 2_688)
    )
    tiny = estimate_flops(tiny_config())
    hand &= tiny.synergy_layers.total == 2 * (294_912 + 196_608 + 16_512) + 2 * (98_304 + 65_536 + 4_608)
    hand &= tiny.baseline_layers.total == 4 * (73_728 + 49_152 + 2_688)
    ok = 1.3 <= rep["ratio"] <= 2.0 and rep["mlp_share_of_extra"] > 0.6 and hand
    verdict("FLOPs", ok, f"ratio {rep['ratio']:.3f}, MLP share {rep['mlp_share_of_extra']:.1%}, "
            f"tiny hand counts {'match' if hand else 'differ'}")


# ---------------------------------------------------------------------------
# 8. ablation harness


@pytest.mark.criterion("positioning ablation and k sweep run to completion at desk scale")
def test_ablation_harness(desk_data, capsys):
    data = str(desk_data / "data")
    quick = ["--steps", "20", "--set", "train.batch_size=8", "--set", "train.warmup_steps=5",
             "--set", "train.eval_interval=10", "--set", "train.eval_batches=2"]
    pos = desk_data / "positioning"
    assert main(["ablate-positioning", *DESK, "--data", data, "--out-dir", str(pos), *quick]) == 0
    curves = {m: read_metrics(pos / f"{m}.jsonl") for m in POSITIONING_MODES}
    table = (pos / "positioning.md").read_text()
    pos_ok = all(len(c) == 2 and all(math.isfinite(r.eval_bpb) for r in c) for c in curves.values())
    pos_ok &= all(f"| {m} |" in table and str(REFERENCE_POSITIONING_BPB[m]) in table for m in POSITIONING_MODES)
    pos_ok &= "failed" not in table

    ks = desk_data / "k_sweep"
    assert main(["ablate-k", *DESK, "--data", data, "--out-dir", str(ks), *quick]) == 0
    rows = (ks / "k_sweep.csv").read_text().splitlines()[1:]
    k_vals = [int(r.split(",")[0]) for r in rows]
    fracs = [float(r.split(",")[3]) for r in rows]
    # short segments pick min(k, length) tokens, so the rate sits at or above k/T and grows with k
    k_ok = k_vals == [16, 32, 64, 128] and all(k / 256 <= f <= 1 for f, k in zip(fracs, k_vals))
    k_ok &= fracs == sorted(fracs) and len(set(fracs)) == 4
    k_ok &= all(math.isfinite(float(r.split(",")[1])) for r in rows)
    capsys.readouterr()
    final = {m: round(c[-1].eval_bpb, 3) for m, c in curves.items()}
    verdict("ablation harness", pos_ok and k_ok, f"positioning final BPB {final}; k sweep {k_vals}")


# ---------------------------------------------------------------------------
# 9. visualisation


@pytest.mark.criterion("routing visualisation of the desk checkpoint")
def test_visualization(desk_run, tmp_path, capsys):
    test_segs, _ = load_segments(desk_run["data"] / "test.seg")
    text = "\n\n".join(s.raw_bytes().decode("utf-8") for s in test_segs[:160])
    (tmp_path / "held_out.txt").write_text(text, encoding="utf-8")
    out = tmp_path / "routing.html"
    capsys.readouterr()
    assert main(["visualize", "--checkpoint", str(desk_run["out"] / "checkpoint.ckpt"),
                 "--input", str(tmp_path / "held_out.txt"), "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    cells = parse_cells(out.read_text(encoding="utf-8"))
    n_bytes = sum(len(s.ids) for s in clip_segments(text, 256))
    ok = cells.cells == summary["bytes"] == n_bytes
    ok &= cells.picked == summary["picked_bytes"]
    frac = summary["picked_fraction"]
    ok &= abs(frac - 56 / 256) <= 0.02
    verdict("visualisation", ok, f"{cells.cells} cells for {n_bytes} bytes, {cells.picked} bold = sum(m); "
            f"picked fraction {frac:.4f} vs k/T {56 / 256:.4f}")


# ---------------------------------------------------------------------------
# 10. corpus pipeline


def random_strings(rng, n, max_len=40):
    """Random valid Unicode strings mixing 1- to 4-byte UTF-8 codepoints."""
    lo = np.array([0x00, 0x80, 0x800, 0xE000, 0x10000])
    hi = np.array([0x80, 0x800, 0xD800, 0x10000, 0x110000])
    out = []
    for _ in range(n):
        L = int(rng.integers(0, max_len + 1))
        cls = rng.choice(5, L, p=[0.55, 0.15, 0.12, 0.06, 0.12])
        cps = rng.integers(lo[cls], hi[cls])
        out.append("".join(map(chr, cps.tolist())))
    return out


@pytest.mark.criterion("UTF-8 and BPE round trips, codepoint-safe clipping")
def test_corpus_pipeline():
    rng = np.random.default_rng(17)
    strings = random_strings(rng, 10_000)
    utf8_ok = all(utf8_detokenize(utf8_tokenize(s)) == s for s in strings)

    vocab = bpe_train(python_docs_text(100_000).encode("utf-8"), 512)
    blobs = [rng.integers(0, 256, int(rng.integers(0, 60))).astype(np.uint8).tobytes() for _ in range(10_000)]
    blobs[:2000] = [s.encode("utf-8") for s in strings[:2000]]
    bpe_ok = all(bpe_decode(bpe_encode(b, vocab), vocab) == b for b in blobs)

    clip_ok, n_spans = True, 0
    for s in random_strings(rng, 3_000, max_len=200):
        data = s.encode("utf-8")
        budget = int(rng.integers(6, 40))
        for a, b in clip_byte_spans(data, budget):
            n_spans += 1
            clip_ok &= b - a <= budget - 2
            clip_ok &= (a == len(data) or data[a] & 0xC0 != 0x80) and (b == len(data) or data[b] & 0xC0 != 0x80)
            data[a:b].decode("utf-8")
    verdict("corpus pipeline", utf8_ok and bpe_ok and clip_ok,
            f"10000 UTF-8 and 10000 BPE round trips, {n_spans} clipped spans on codepoint boundaries")
