import json
import warnings

import numpy as np
import pytest

from conftest import QUICK, SMALL, SMALL_MODEL
from fewshot_sbir.autodiff import Tensor, gradient
from fewshot_sbir.episodes import GeneratorSpec, sample_task, synth_generate
from fewshot_sbir.losses import triplet_loss
from fewshot_sbir.metatrain import (CheckpointError, CheckpointVersionError, TrainConfig,
                                    inner_adapt, load_checkpoint, meta_train, pretrain_baseline,
                                    save_checkpoint, task_gradient, task_objective)
from fewshot_sbir.model import ModelConfig, group, head

@pytest.fixture
def episode(small_world):
    data, _, split = small_world
    return sample_task(data, split, "category", 3, np.random.default_rng(5))


def _head_and_latents(rng, c=4, d=3, k=3):
    hp = {"M.w": Tensor(rng.normal(size=(c, d)), requires_grad=True),
          "M.b": Tensor(rng.normal(size=d) * 0.1, requires_grad=True)}
    a, p, n = (Tensor(rng.normal(size=(k, c))) for _ in range(3))
    return hp, a, p, n


# -- inner loop ------------------------------------------------------------------

def test_zero_rates_are_identity():
    hp, a, p, n = _head_and_latents(np.random.default_rng(0))
    alpha = {k: Tensor(np.zeros_like(v.data)) for k, v in hp.items()}
    out = inner_adapt(hp, alpha, a, p, n, Tensor(0.3))
    for k in hp:
        assert np.array_equal(out[k].data, hp[k].data)


def test_inner_adapt_is_functional():
    hp, a, p, n = _head_and_latents(np.random.default_rng(1))
    before = {k: v.data.copy() for k, v in hp.items()}
    alpha = {k: Tensor(np.full(v.shape, 0.1)) for k, v in hp.items()}
    out = inner_adapt(hp, alpha, a, p, n, Tensor(0.3))
    assert all(np.array_equal(hp[k].data, before[k]) for k in hp)
    assert not np.array_equal(out["M.w"].data, before["M.w"])


def test_single_step_matches_finite_differences():
    rng = np.random.default_rng(2)
    hp, a, p, n = _head_and_latents(rng)
    alpha = {k: Tensor(rng.uniform(0.05, 0.2, size=v.shape)) for k, v in hp.items()}
    out = inner_adapt(hp, alpha, a, p, n, Tensor(0.3))

    def loss(w, b):
        q = {"M.w": Tensor(w), "M.b": Tensor(b)}
        return triplet_loss(head(q, a), head(q, p), head(q, n), 0.3, "smooth", 0.05).item()

    h = 1e-6
    for key, arr in (("M.w", hp["M.w"].data), ("M.b", hp["M.b"].data)):
        fd = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[i] += h
            minus[i] -= h
            args = lambda x: (x, hp["M.b"].data) if key == "M.w" else (hp["M.w"].data, x)
            fd[i] = (loss(*args(plus)) - loss(*args(minus))) / (2 * h)
        np.testing.assert_allclose(out[key].data, arr - alpha[key].data * fd, rtol=1e-7, atol=1e-9)


def test_slack_minus_one_update_is_tiny():
    rng = np.random.default_rng(3)
    hp, _, _, _ = _head_and_latents(rng)
    hp["M.b"] = Tensor(np.zeros(3), requires_grad=True)
    a = Tensor(rng.normal(size=(4, 4)))
    # positive = anchor, negative = -anchor: distances 0 and 2, so margin 1 gives slack -1
    alpha = {k: Tensor(np.ones(v.shape)) for k, v in hp.items()}
    out = inner_adapt(hp, alpha, a, a, -a, Tensor(1.0), tau=0.05)
    step = np.sqrt(sum(np.sum((out[k].data - hp[k].data) ** 2) for k in hp))
    assert step < 1e-6


# -- outer objective ------------------------------------------------------------------

def test_zero_reg_weight_gives_zero_head_gradients(baseline, small_world, episode):
    data, semantic, _ = small_world
    params = baseline.tensors()
    heads = group(params, "D", "C", "G", "T")
    for weight, expect_zero in ((0.0, True), (0.5, False)):
        cfg = TrainConfig(**{**QUICK, "reg_weight": weight})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            g = gradient(task_objective(params, data, episode, cfg, baseline.classes, semantic), heads)
        zero = all(np.all(g[k].data == 0) for k in group(heads, "D", "C", "G"))
        assert zero == expect_zero


def test_second_order_gradient_differs_from_first_order(baseline, small_world, episode):
    data, semantic, _ = small_world
    params = baseline.tensors()
    trainable = group(params, "F", "M", "R", "alpha")
    full = task_gradient(params, trainable, data, episode, TrainConfig(**QUICK),
                         baseline.classes, semantic)
    first = task_gradient(params, trainable, data, episode, TrainConfig(**QUICK, first_order=True),
                          baseline.classes, semantic)
    assert full.loss == first.loss
    assert not np.allclose(full.grads["M.w"], first.grads["M.w"], rtol=1e-6, atol=0)
    assert np.any(full.grads["R.out.w"] != 0)


# -- training loops ------------------------------------------------------------------

def test_zero_noise_pretrain_fits():
    spec = GeneratorSpec(**{**SMALL, "noise": 0.0, "style": 0.0, "stroke_noise": 0.0, "sketch_shift": 0.0})
    data, _, split = synth_generate(spec)
    model = ModelConfig(**{**SMALL_MODEL, "encoder_hidden": 32, "latent_dim": 16, "embed_dim": 8})
    cp = pretrain_baseline(data, split, TrainConfig(pretrain_epochs=100, pretrain_lr=1e-3), model)
    assert cp.history[-1]["loss"] < 0.01
    assert cp.history[-1]["loss"] < cp.history[0]["loss"]


def test_pretrain_is_seeded(baseline, small_world):
    data, _, split = small_world
    again = pretrain_baseline(data, split, TrainConfig(**QUICK), ModelConfig(**SMALL_MODEL))
    assert all(np.array_equal(again.params[k], v) for k, v in baseline.params.items())


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.K, cfg.meta_batch, cfg.reg_weight, cfg.meta_epochs) == (5, 8, 0.5, 40)
    assert (cfg.pretrain_epochs, cfg.pretrain_margin, cfg.pretrain_batch) == (60, 0.3, 16)


def test_resume_is_bit_identical(baseline, small_world, tmp_path):
    data, semantic, split = small_world
    cfg = TrainConfig(**QUICK)
    straight = meta_train(data, split, cfg, baseline, semantic)
    half = meta_train(data, split, cfg, baseline, semantic, checkpoint_path=tmp_path / "m.ckpt", epochs=1)
    assert half.epoch == 1
    resumed = meta_train(data, split, cfg, load_checkpoint(tmp_path / "m.ckpt"), semantic)
    assert resumed.epoch == straight.epoch == 2
    for k, v in straight.params.items():
        assert np.array_equal(resumed.params[k], v), k
    assert resumed.history == straight.history


def test_meta_train_moves_alpha_and_margin_net(baseline, small_world):
    data, semantic, split = small_world
    cp = meta_train(data, split, TrainConfig(**QUICK), baseline, semantic)
    assert cp.kind == "ours"
    for k in ("alpha.M.w", "R.out.w", "F.w1", "D.w1"):
        assert not np.array_equal(cp.params[k], baseline.params[k]), k


# -- checkpoint files ---------------------------------------------------------------------

def test_checkpoint_round_trip(baseline, small_world, tmp_path):
    data, semantic, split = small_world
    cp = meta_train(data, split, TrainConfig(**QUICK), baseline, semantic, epochs=1)
    save_checkpoint(cp, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert all(np.array_equal(back.params[k], v) for k, v in cp.params.items())
    assert all(np.array_equal(back.optimizer.m[k], v) for k, v in cp.optimizer.m.items())
    assert back.optimizer.step == cp.optimizer.step and back.rng_state == cp.rng_state


def test_truncated_checkpoint(baseline, tmp_path):
    save_checkpoint(baseline, tmp_path / "c.ckpt")
    text = (tmp_path / "c.ckpt").read_text()
    (tmp_path / "c.ckpt").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.ckpt")


def test_unknown_checkpoint_version(baseline, tmp_path):
    save_checkpoint(baseline, tmp_path / "c.ckpt")
    doc = json.loads((tmp_path / "c.ckpt").read_text())
    doc["version"] = "fewshot-sbir-checkpoint/99"
    (tmp_path / "c.ckpt").write_text(json.dumps(doc))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "c.ckpt")
