import numpy as np
import pytest
import torch

from fewgen.checkpoint import ema_swap
from fewgen.data import SubsetSpec, generate_sine
from fewgen.denoiser import ModelConfig
from fewgen.diffusion import DiffusionConfig, training_loss
from fewgen.errors import ConfigError, TokenCollisionError
from fewgen.trainer import (TrainConfig, _ema_update, build_model, finetune,
                            pretrain, train_from_scratch)
from fewgen.ts2img import delay_embed

TINY = ModelConfig(base_channels=8, channel_multipliers=(1, 2), image_side=8,
                   attention_resolutions=(4,), num_res_blocks=1,
                   num_middle_blocks=1, canonical_channels=8)
DIFF = DiffusionConfig(num_steps=8)
FAST = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=16, seed=0)


def sine_corpus(n=24, seed=0, channels=3):
    return generate_sine(n, 24, channels=channels, rng=np.random.default_rng(seed))


def test_ema_matches_closed_form_on_scalar():
    decay = 0.9
    theta = [torch.tensor([float(v)]) for v in (1.0, 4.0, -2.0, 0.5, 3.0)]

    class Holder(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(theta[0].clone())

    holder = Holder()
    ema = {"w": holder.w.detach().clone()}
    for value in theta[1:]:
        holder.w.data.copy_(value)
        _ema_update(ema, holder, decay)
    k = len(theta) - 1
    expected = decay**k * theta[0]
    for j, value in enumerate(theta[1:], start=1):
        expected = expected + decay ** (k - j) * (1 - decay) * value
    assert abs(ema["w"].item() - expected.item()) < 1e-10


def test_ema_decay_zero_tracks_parameters():
    corpus = {"sine": sine_corpus(8)}
    model, registry = build_model(TINY, ["sine"], seed=1)
    cfg = TrainConfig(learning_rate=1e-3, ema_decay=0.0, epochs=1, batch_size=8,
                      seed=1)
    ckpt = pretrain(corpus, model, registry, cfg, DIFF)
    for k, v in ckpt.model_state.items():
        assert torch.equal(ckpt.ema_state[k], v)


def test_pretrain_is_bit_deterministic():
    def run():
        corpus = {"a": sine_corpus(12, seed=1), "b": sine_corpus(12, seed=2)}
        model, registry = build_model(TINY, ["a", "b"], seed=3)
        return pretrain(corpus, model, registry, FAST, DIFF)

    c1, c2 = run(), run()
    assert c1.token_registry == c2.token_registry
    for k in c1.model_state:
        assert torch.equal(c1.model_state[k], c2.model_state[k])
        assert torch.equal(c1.ema_state[k], c2.ema_state[k])


def test_loss_decreases_on_sine_corpus():
    corpus = {"sine": sine_corpus(64, seed=5)}
    model, registry = build_model(TINY, ["sine"], seed=7)
    val = [delay_embed(s) for s in sine_corpus(16, seed=99)]

    def val_loss():
        with torch.no_grad():
            return training_loss(val, model, [1] * len(val),
                                 np.random.default_rng(0), DIFF).item()

    before = val_loss()
    pretrain(corpus, model, registry,
             TrainConfig(learning_rate=2e-3, epochs=30, batch_size=32, seed=0,
                         ema_decay=0.99), DIFF)
    after = val_loss()
    assert after < before


def test_metrics_log_written(tmp_path):
    corpus = {"sine": sine_corpus(8)}
    model, registry = build_model(TINY, ["sine"], seed=0)
    log = tmp_path / "log.csv"
    pretrain(corpus, model, registry, FAST, DIFF, log_path=log)
    lines = log.read_text().strip().splitlines()
    assert lines[0] == "step,loss,lr,sigma_mean"
    assert len(lines) == 1 + 2 * 1  # 2 epochs x ceil(8/16)=1 step


def test_empty_corpus_rejected():
    model, registry = build_model(TINY, ["a"], seed=0)
    with pytest.raises(ConfigError):
        pretrain({}, model, registry, FAST, DIFF)
    with pytest.raises(ConfigError):
        pretrain({"unregistered": sine_corpus(4)}, model, registry, FAST, DIFF)


def make_base_ckpt():
    corpus = {"a": sine_corpus(12, seed=1), "b": sine_corpus(12, seed=2)}
    model, registry = build_model(TINY, ["a", "b"], seed=3)
    return pretrain(corpus, model, registry, FAST, DIFF)


def test_finetune_extends_registry_and_keeps_old_tokens():
    base = make_base_ckpt()
    new_data = sine_corpus(30, seed=8)
    ckpt = finetune(base, new_data, SubsetSpec("fixed_count", 10, seed=0),
                    TrainConfig(learning_rate=1e-3, epochs=2, batch_size=2048,
                                seed=11),
                    "c", DIFF)
    assert ckpt.token_registry == {"a": 1, "b": 2, "c": 3}
    # effective batch is min(2048, N)
    assert ckpt.extra["train"]["batch_size"] == 10
    # untouched rows: tokens a and b never appear in fine-tuning batches
    assert torch.equal(ckpt.model_state["token_table"][:2],
                       base.model_state["token_table"][:2])
    assert ckpt.model_state["token_table"].shape[0] == 3


def test_finetune_collision():
    base = make_base_ckpt()
    with pytest.raises(TokenCollisionError):
        finetune(base, sine_corpus(12), SubsetSpec("full"), FAST, "a", DIFF)


def test_finetune_on_seen_dataset_with_new_token_runs():
    base = make_base_ckpt()
    ckpt = finetune(base, sine_corpus(12, seed=1), SubsetSpec("full"),
                    FAST, "a+ft", DIFF)
    assert ckpt.token_registry["a+ft"] == 3
    assert torch.equal(ckpt.model_state["token_table"][0],
                       base.model_state["token_table"][0])


def test_unused_token_gradient_is_zero():
    torch.manual_seed(0)
    from fewgen.denoiser import DenoiserUNet
    model = DenoiserUNet(TINY, num_tokens=3)
    batch = [delay_embed(s) for s in sine_corpus(4, seed=0)]
    # a few warm-up steps so the zero-initialized conditioning projections
    # become nonzero and gradients can reach the token table at all
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    for _ in range(3):
        opt.zero_grad()
        training_loss(batch, model, [2] * 4, np.random.default_rng(1), DIFF
                      ).backward()
        opt.step()
    model.zero_grad()
    loss = training_loss(batch, model, [2, 2, 2, 2], np.random.default_rng(0), DIFF)
    loss.backward()
    grad = model.token_table.grad
    assert torch.all(grad[0] == 0) and torch.all(grad[2] == 0)
    assert grad[1].abs().sum() > 0


def test_trained_tokens_steer_the_output():
    corpus = {"slow": sine_corpus(32, seed=1),
              "fast": generate_sine(32, 24, channels=3,
                                    rng=np.random.default_rng(2),
                                    freq_range=(0.8, 1.2))}
    model, registry = build_model(TINY, ["slow", "fast"], seed=5)
    pretrain(corpus, model, registry,
             TrainConfig(learning_rate=2e-3, epochs=25, batch_size=32, seed=6,
                         ema_decay=0.99), DIFF)
    x = torch.randn(1, 3, 8, 8)
    with torch.no_grad():
        out_slow = model(x, torch.zeros(1), torch.tensor([registry["slow"]]))
        out_fast = model(x, torch.zeros(1), torch.tensor([registry["fast"]]))
    assert torch.norm(out_slow - out_fast) > 1e-4


def test_train_from_scratch_single_domain():
    ckpt = train_from_scratch("solo", sine_corpus(16, seed=4),
                              SubsetSpec("fixed_count", 10, seed=2), TINY, FAST,
                              DIFF)
    assert ckpt.token_registry == {"solo": 1}
    assert ckpt.extra["train"]["batch_size"] == 10
    assert ema_swap(ckpt)  # EMA shadow always present


def test_nan_loss_aborts_with_diagnostic():
    from fewgen.errors import TrainingDivergedError
    corpus = {"sine": sine_corpus(8)}
    model, registry = build_model(TINY, ["sine"], seed=0)
    with torch.no_grad():
        model.conv_in.kernel.weight[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingDivergedError, match="step 0"):
        pretrain(corpus, model, registry, FAST, DIFF)
