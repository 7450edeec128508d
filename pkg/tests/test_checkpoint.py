import numpy as np
import pytest
import torch

from synergy.checkpoint import (
    build_model,
    load_checkpoint,
    make_checkpoint,
    optimizer_state_dict,
    save_checkpoint,
)
from synergy.corpus import SpecialTokens, clip_segments
from synergy.model import SynergyLM, build_dense_baseline, tiny_config
from synergy.training import TrainConfig, make_optimizer, train

SEGS = clip_segments("a small corpus for checkpoint tests, repeated. " * 8, 24)


@pytest.fixture(scope="module")
def trained():
    torch.manual_seed(0)
    model = SynergyLM(tiny_config(positioning="sigma_all_grad"))
    cfg = TrainConfig(batch_size=4, total_steps=3, eval_interval=3, eval_batches=1, warmup_steps=1)
    ckpt, _ = train(model, SEGS, SEGS[:4], cfg)
    return model, ckpt


def test_load_then_save_is_byte_identical(tmp_path, trained):
    _, ckpt = trained
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(tmp_path / "a.ckpt"))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes()[:8] == b"SYNCKPT\x01"


def test_round_trip_restores_model(tmp_path, trained):
    model, ckpt = trained
    save_checkpoint(tmp_path / "m.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.model_config == model.cfg and back.step == 3
    assert back.router_threshold == ckpt.router_threshold
    clone = build_model(back)
    ids = torch.randint(0, 256, (2, 24))
    model.eval()
    assert torch.equal(clone(ids)[0], model(ids)[0])
    assert float(clone.router_threshold) == ckpt.router_threshold


def test_optimizer_state_round_trip(tmp_path, trained):
    model, ckpt = trained
    save_checkpoint(tmp_path / "o.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "o.ckpt")
    clone = build_model(back)
    opt = make_optimizer(clone, TrainConfig())
    opt.load_state_dict(optimizer_state_dict(back))
    state = opt.state_dict()["state"]
    ref = optimizer_state_dict(ckpt)["state"]
    assert state.keys() == ref.keys()
    for k in state:
        assert torch.equal(state[k]["exp_avg"], ref[k]["exp_avg"])


def test_rng_state_is_recorded(trained):
    _, ckpt = trained
    assert "torch" in ckpt.rng_state and "numpy" in ckpt.rng_state


def test_dense_bpe_checkpoint(tmp_path):
    model = build_dense_baseline(tiny_config(), 303, 10, SpecialTokens.after(300))
    save_checkpoint(tmp_path / "d.ckpt", make_checkpoint(model, step=7))
    back = load_checkpoint(tmp_path / "d.ckpt")
    clone = build_model(back)
    assert back.kind == "dense" and clone.vocab_size == 303 and clone.context_length == 10
    assert clone.specials == SpecialTokens.after(300)
    ids = torch.randint(0, 300, (1, 10))
    assert torch.equal(clone(ids)[0], model(ids)[0])


def test_rejects_foreign_files(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.ckpt")
    with pytest.raises(TypeError):
        make_checkpoint(torch.nn.Linear(2, 2))
