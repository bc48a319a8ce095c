import numpy as np
import pytest
import torch

from fewgen.checkpoint import (CheckpointData, ema_swap, load_checkpoint,
                               save_checkpoint)
from fewgen.denoiser import DenoiserUNet, ModelConfig
from fewgen.errors import MissingEMAError, ParseError

TINY = ModelConfig(base_channels=8, channel_multipliers=(1, 2), image_side=8,
                   attention_resolutions=(4,), num_res_blocks=1,
                   num_middle_blocks=1, canonical_channels=8)


def make_ckpt(seed=0):
    torch.manual_seed(seed)
    model = DenoiserUNet(TINY, num_tokens=2)
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    ema = {k: v * 0.5 for k, v in state.items()}
    return CheckpointData(model_config=TINY, token_registry={"a": 1, "b": 2},
                          model_state=state, ema_state=ema,
                          extra={"diffusion": {"num_steps": 8}})


def test_round_trip_preserves_everything(tmp_path):
    ckpt = make_ckpt()
    path = tmp_path / "model.fgc"
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    assert loaded.model_config == TINY
    assert loaded.token_registry == {"a": 1, "b": 2}
    assert loaded.extra == {"diffusion": {"num_steps": 8}}
    for k, v in ckpt.model_state.items():
        assert torch.equal(loaded.model_state[k], v)
    for k, v in ckpt.ema_state.items():
        assert torch.equal(loaded.ema_state[k], v)


def test_forward_outputs_bit_identical_after_reload(tmp_path):
    ckpt = make_ckpt(seed=3)
    path = tmp_path / "model.fgc"
    save_checkpoint(path, ckpt)
    model_a = ckpt.build_model()
    model_b = load_checkpoint(path).build_model()
    x = torch.randn(2, 3, 8, 8)
    with torch.no_grad():
        out_a = model_a(x, torch.zeros(2), torch.tensor([1, 2]))
        out_b = model_b(x, torch.zeros(2), torch.tensor([1, 2]))
    assert torch.equal(out_a, out_b)


def test_identical_contents_produce_identical_bytes(tmp_path):
    ckpt = make_ckpt(seed=1)
    p1, p2 = tmp_path / "a.fgc", tmp_path / "b.fgc"
    save_checkpoint(p1, ckpt)
    save_checkpoint(p2, ckpt)
    assert p1.read_bytes() == p2.read_bytes()


def test_ema_swap_and_missing_ema(tmp_path):
    ckpt = make_ckpt()
    ema = ema_swap(ckpt)
    for k in ema:
        assert torch.equal(ema[k], ckpt.model_state[k] * 0.5)
    model = ckpt.build_model(ema=True)
    name, param = next(iter(model.named_parameters()))
    assert torch.equal(param.data, ckpt.ema_state[name])

    bare = CheckpointData(model_config=TINY, token_registry={},
                          model_state=ckpt.model_state, ema_state=None)
    with pytest.raises(MissingEMAError):
        ema_swap(bare)
    path = tmp_path / "bare.fgc"
    save_checkpoint(path, bare)
    with pytest.raises(MissingEMAError):
        load_checkpoint(path).build_model(ema=True)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.fgc"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(ParseError):
        load_checkpoint(path)
