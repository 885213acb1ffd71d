"""
Tests for the checkpoint container
"""

import pytest
import torch

from lmr.checkpoint import CHECKPOINT_FORMAT, load_checkpoint, restore_model, restore_optimizer, save_checkpoint
from lmr.errors import FormatError, ShapeError, TruncationError
from lmr.model import build_model, flatten_params


def _stepped(model):
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
    loss = sum((p**2).sum() for p in model.parameters())
    loss.backward()
    optimizer.step()
    return optimizer


def test_roundtrip_restores_params_and_moments(tmp_path, tiny_model_cfg):
    model = build_model(tiny_model_cfg)
    optimizer = _stepped(model)
    path = tmp_path / "m.lmr"
    save_checkpoint(path, model, optimizer, epoch=3, loss_history=[{"epoch": 1, "total": 2.0}], extra={"k": 1})

    ckpt = load_checkpoint(path)
    assert ckpt.epoch == 3
    assert ckpt.model_cfg == tiny_model_cfg
    assert ckpt.loss_history == [{"epoch": 1, "total": 2.0}]
    assert ckpt.extra == {"k": 1}
    assert set(ckpt.optimizer_steps) == {1}

    fresh = build_model(tiny_model_cfg.model_copy(update={"init_seed": 9}))
    restore_model(ckpt, fresh)
    assert torch.equal(flatten_params(fresh), flatten_params(model))

    fresh_opt = torch.optim.Adam(fresh.parameters(), lr=1e-3)
    restore_optimizer(ckpt, fresh, fresh_opt)
    for (_, p), (_, q) in zip(model.named_parameters(), fresh.named_parameters()):
        assert torch.equal(optimizer.state[p]["exp_avg"], fresh_opt.state[q]["exp_avg"])
        assert torch.equal(optimizer.state[p]["exp_avg_sq"], fresh_opt.state[q]["exp_avg_sq"])


def test_save_without_optimizer(tmp_path, tiny_model_cfg):
    path = tmp_path / "m.lmr"
    save_checkpoint(path, build_model(tiny_model_cfg))
    ckpt = load_checkpoint(path)
    assert ckpt.optimizer_steps is None and ckpt.exp_avg is None
    assert path.read_bytes().startswith(b"{")
    assert CHECKPOINT_FORMAT.encode() in path.read_bytes().split(b"\n", 1)[0]


def test_save_is_deterministic(tmp_path, tiny_model_cfg):
    a, b = tmp_path / "a.lmr", tmp_path / "b.lmr"
    save_checkpoint(a, build_model(tiny_model_cfg))
    save_checkpoint(b, build_model(tiny_model_cfg))
    assert a.read_bytes() == b.read_bytes()


def test_bad_header(tmp_path):
    path = tmp_path / "x.lmr"
    path.write_bytes(b"no header at all")
    with pytest.raises(FormatError, match="header"):
        load_checkpoint(path)
    path.write_bytes(b'{"format": "OTHER"}\n')
    with pytest.raises(FormatError, match=CHECKPOINT_FORMAT):
        load_checkpoint(path)


def test_truncated_payload(tmp_path, tiny_model_cfg):
    path = tmp_path / "m.lmr"
    save_checkpoint(path, build_model(tiny_model_cfg))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(TruncationError):
        load_checkpoint(path)


def test_restore_into_other_architecture(tmp_path, tiny_model_cfg):
    path = tmp_path / "m.lmr"
    save_checkpoint(path, build_model(tiny_model_cfg))
    wider = build_model(tiny_model_cfg.model_copy(update={"k_moment_queries": 3}))
    with pytest.raises(ShapeError, match="query_pos"):
        restore_model(load_checkpoint(path), wider)
    separate = build_model(tiny_model_cfg.model_copy(update={"share_vqf_weights": False}))
    with pytest.raises(ShapeError, match="missing"):
        restore_model(load_checkpoint(path), separate)
