"""Training engine unit tests: loss, Adam, the loop's discipline
(determinism, latent floats, lr decay, divergence capture), evaluation
purity, and the ablation harness plumbing on a smoke preset."""

import math
from dataclasses import replace

import numpy as np
import pytest

from mobinet.data import DatasetSpec
from mobinet.errors import ConfigError, DivergenceError
from mobinet.network import NetworkConfig, build_network
from mobinet.training import (
    Adam,
    TrainConfig,
    adam_step,
    evaluate,
    lr_at_epoch,
    smoothed,
    softmax_cross_entropy,
    suite_accuracy,
    topk_accuracy,
    train,
)

SMOKE_NET = NetworkConfig(variant="mid", K=1, width_mult=0.25, num_classes=10,
                          resolution=32, in_channels=1, dtype="f32",
                          schedule=((16, True), (16, False)))


def smoke_train_cfg(**over):
    base = TrainConfig(
        epochs=1,
        batch_size=16,
        lr=1e-3,
        lr_decay_points=(),
        seed=3,
        dataset=DatasetSpec(source="synthetic", kind="blobs", n_train=64, n_test=32),
    )
    return replace(base, **over) if over else base


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_give_log_c(self):
        for c in (2, 10, 100):
            logits = np.zeros((4, c))
            loss, _ = softmax_cross_entropy(logits, np.zeros(4, dtype=np.int64))
            assert loss == pytest.approx(math.log(c), rel=1e-12)

    def test_confident_correct_goes_to_zero(self):
        logits = np.zeros((1, 10))
        logits[0, 3] = 100.0
        loss, _ = softmax_cross_entropy(logits, np.array([3]))
        assert loss < 1e-8

    def test_gradient_matches_fd(self, rng):
        logits = rng.standard_normal((5, 7))
        labels = rng.integers(0, 7, 5)
        _, g = softmax_cross_entropy(logits, labels)
        flat = logits.ravel()
        for i in rng.choice(flat.size, 10, replace=False):
            old = flat[i]
            h = 1e-6
            flat[i] = old + h
            lp, _ = softmax_cross_entropy(logits, labels)
            flat[i] = old - h
            lm, _ = softmax_cross_entropy(logits, labels)
            flat[i] = old
            assert g.ravel()[i] == pytest.approx((lp - lm) / (2 * h), rel=1e-5, abs=1e-10)

    def test_topk(self):
        logits = np.array([[0.1, 0.5, 0.2, 0.9], [0.9, 0.1, 0.2, 0.3]])
        t1, t5 = topk_accuracy(logits, np.array([3, 1]))
        assert t1 == 50.0
        assert t5 == 100.0  # k capped at class count


class TestAdam:
    def test_zero_grad_zero_state_leaves_params(self):
        v = np.ones(4)
        state = {"m": np.zeros(4), "v": np.zeros(4), "t": 0}
        adam_step(v, np.zeros(4), state, lr=0.1)
        assert np.array_equal(v, np.ones(4))

    def test_matches_scripted_reference_constant_grad(self):
        """t steps of constant gradient g against a literal transcription
        of the update equations."""
        g = np.array([0.3, -0.7])
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        v = np.zeros(2)
        state = {"m": np.zeros(2), "v": np.zeros(2), "t": 0}
        ref_v = np.zeros(2)
        m = np.zeros(2)
        vv = np.zeros(2)
        for t in range(1, 8):
            adam_step(v, g, state, lr, betas=(b1, b2), eps=eps)
            m = b1 * m + (1 - b1) * g
            vv = b2 * vv + (1 - b2) * g * g
            ref_v = ref_v - lr * (m / (1 - b1**t)) / (np.sqrt(vv / (1 - b2**t)) + eps)
            assert np.allclose(v, ref_v, atol=1e-15)

    def test_decay_only_shrinks_norm(self):
        v = np.full(4, 2.0)
        state = {"m": np.zeros(4), "v": np.zeros(4), "t": 0}
        adam_step(v, np.zeros(4), state, lr=0.01, weight_decay=0.1)
        assert np.linalg.norm(v) < np.linalg.norm(np.full(4, 2.0))

    def test_latent_clamped(self, rng):
        net = build_network(SMOKE_NET, seed=0)
        params = net.parameters()
        opt = Adam(params)
        for p in params:
            p.grad[...] = rng.standard_normal(p.grad.shape)
        for _ in range(60):
            opt.step(params, 0.5)
        for p in params:
            if p.kind == "latent":
                assert np.abs(p.value).max() <= 1.5 + 1e-12


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            smoke_train_cfg(lr=-1.0)
        with pytest.raises(ConfigError):
            smoke_train_cfg(decay_factor=1.5)
        with pytest.raises(ConfigError):
            smoke_train_cfg(batch_size=0)

    def test_lr_at_epoch(self):
        cfg = smoke_train_cfg(epochs=20, lr=1e-2, lr_decay_points=(5, 9),
                              decay_factor=0.1)
        assert lr_at_epoch(cfg, 4) == 1e-2
        assert lr_at_epoch(cfg, 5) == pytest.approx(1e-3)
        assert lr_at_epoch(cfg, 9) == pytest.approx(1e-4)


class TestTrainLoop:
    def test_one_epoch_logs_one_row(self):
        net = build_network(SMOKE_NET, seed=3)
        history = train(net, smoke_train_cfg())
        assert len(history) == 1
        row = history[0]
        assert set(row) == {"epoch", "lr", "train_loss", "test_top1", "test_top5"}
        assert row["epoch"] == 1

    def test_fixed_seed_identical_history(self):
        cfg = smoke_train_cfg(epochs=2)
        h1 = train(build_network(SMOKE_NET, seed=3), cfg)
        h2 = train(build_network(SMOKE_NET, seed=3), cfg)
        assert h1 == h2  # bit-identical floats

    def test_lr_decay_visible_in_history(self):
        cfg = smoke_train_cfg(epochs=3, lr=1e-2, lr_decay_points=(2,), decay_factor=0.1)
        history = train(build_network(SMOKE_NET, seed=3), cfg)
        assert history[0]["lr"] == pytest.approx(1e-2)
        assert history[1]["lr"] == pytest.approx(1e-3)
        assert history[2]["lr"] == pytest.approx(1e-3)

    def test_latent_weights_stay_float(self):
        net = build_network(SMOKE_NET, seed=3)
        train(net, smoke_train_cfg())
        latents = [p for p in net.parameters() if p.kind == "latent"]
        assert latents
        for p in latents:
            # float values, not collapsed to +-1
            assert not np.all(np.abs(p.value) == 1.0)
            assert p.value.dtype in (np.float32, np.float64)

    def test_divergence_captured_with_history(self):
        net = build_network(SMOKE_NET, seed=3)
        cfg = smoke_train_cfg(epochs=3, lr=1e30)  # guaranteed blow-up
        with pytest.raises(DivergenceError) as err:
            train(net, cfg)
        assert err.value.history
        assert math.isnan(err.value.history[-1]["train_loss"])

    def test_eval_mode_purity(self, rng):
        net = build_network(SMOKE_NET, seed=3)
        cfg = smoke_train_cfg()
        data = cfg.dataset.load()
        train(net, cfg, dataset=data)
        stats_before = {k: v.copy() for k, v in net.state_arrays().items()}
        evaluate(net, data[2], data[3])
        stats_after = net.state_arrays()
        for k, v in stats_before.items():
            assert np.array_equal(v, stats_after[k]), k


class TestAblationHelpers:
    def test_smoothed_window(self):
        s = smoothed([4.0, 2.0, 3.0, 1.0], window=3)
        assert s[0] == 4.0
        assert s[1] == 3.0
        assert s[3] == pytest.approx(2.0)

    def test_suite_accuracy_best_of_final_five(self):
        hist = [{"test_top1": v} for v in (10.0, 90.0, 30.0, 40.0, 35.0, 38.0, 33.0)]
        assert suite_accuracy(hist) == pytest.approx(40.0)


@pytest.mark.slow
class TestAblationSmoke:
    def test_two_epoch_suite_emits_four_comparisons(self):
        from mobinet.training import ablation_suite

        cfg = smoke_train_cfg(epochs=2, batch_size=25)
        cfg = replace(cfg, dataset=DatasetSpec(source="synthetic", kind="blobs",
                                               n_train=100, n_test=50))
        result = ablation_suite(cfg)
        assert len(result["comparisons"]) == 4
        assert [r["suite"] for r in result["comparisons"]] == [
            "skip", "blocks", "prelu", "kdep",
        ]
        ks = [row["K"] for row in result["kdep"]]
        assert ks == [0, 1, 2, 3]
        assert all("top1" in row and "effective_flops" in row for row in result["kdep"])
        flops = [row["effective_flops"] for row in result["kdep"]]
        assert flops == sorted(flops) and len(set(flops)) == 4
