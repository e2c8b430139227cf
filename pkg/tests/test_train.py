import dataclasses

import numpy as np
import pytest
from synthetic import make_dataset

from aupipe import tensor as T
from aupipe import train as TR
from aupipe.checkpoint import file_digest, load_checkpoint, save_checkpoint
from aupipe.model import ModelConfig, forward, init_params, parameter_checksum
from aupipe.tensor import Tensor

SMALL = ModelConfig(input_size=8, patch_size=2, depths=(2,), dims=(4,), heads=(2,), window_size=2, shift_size=1)
FAST = TR.TrainConfig(learning_rate=1e-3, epochs=2, batch_size=6, seed=0, num_workers=3, flip_probability=0.0)


def small_dataset(n=12, seed=0):
    return make_dataset(n, seed=seed, size=8)


def scalar_adam_oracle(theta, grads, lr=0.1, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-float reference trace of the bias-corrected update."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta = theta - lr * m_hat / (v_hat**0.5 + eps)
        out.append(theta)
    return out


class TestAdam:
    def make(self, value=0.5):
        params = {"w": Tensor(np.array([value]), requires_grad=True)}
        cfg = TR.TrainConfig(learning_rate=0.1, epochs=1, flip_probability=0.0)
        return params, TR.AdamState(params), cfg

    def test_zero_grad_no_change(self):
        params, state, cfg = self.make()
        out = TR.adam_step(params, {"w": np.zeros(1)}, state, cfg)
        np.testing.assert_array_equal(out["w"].data, params["w"].data)

    def test_first_step_magnitude_is_learning_rate(self):
        params, state, cfg = self.make()
        g = 0.2
        out = TR.adam_step(params, {"w": np.array([g])}, state, cfg)
        delta = float(params["w"].data[0] - out["w"].data[0])
        # t=1: m_hat=g, v_hat=g^2 -> step = lr*g/(|g|+eps) ~= lr
        assert abs(delta - cfg.learning_rate * g / (g + cfg.eps)) < 1e-15
        assert abs(delta - cfg.learning_rate) < 1e-6

    def test_two_steps_match_hand_trace(self):
        params, state, cfg = self.make()
        expect = scalar_adam_oracle(0.5, [0.2, 0.2], lr=0.1)
        p1 = TR.adam_step(params, {"w": np.array([0.2])}, state, cfg)
        p2 = TR.adam_step(p1, {"w": np.array([0.2])}, state, cfg)
        assert abs(p1["w"].data[0] - expect[0]) < 1e-12
        assert abs(p2["w"].data[0] - expect[1]) < 1e-12
        assert state.t == 2

    def test_nan_grad_rejected(self):
        params, state, cfg = self.make()
        with pytest.raises(FloatingPointError):
            TR.adam_step(params, {"w": np.array([np.nan])}, state, cfg)


class TestParallelGradients:
    def setup_method(self):
        self.params = init_params(SMALL, seed=0)
        self.data = small_dataset(6)

    def test_single_worker_matches_plain_backward(self):
        grads, loss, _ = TR.parallel_gradients(
            self.params, SMALL, self.data.images, self.data.labels, 1
        )
        local = {p: Tensor(t.data, requires_grad=True) for p, t in self.params.items()}
        ref_loss = T.bce_with_logits(forward(local, SMALL, self.data.images), self.data.labels)
        T.backward(ref_loss)
        assert loss == ref_loss.item()
        for p in local:
            assert np.array_equal(grads[p], local[p].grad)

    def test_three_shards_match_full_batch(self):
        full, _, _ = TR.parallel_gradients(self.params, SMALL, self.data.images, self.data.labels, 1)
        sharded, _, _ = TR.parallel_gradients(self.params, SMALL, self.data.images, self.data.labels, 3)
        worst = max(
            float(np.max(np.abs(full[p] - sharded[p]) / np.maximum(np.abs(full[p]), 1e-12)))
            for p in full
        )
        # elementwise agreement within 1e-10 (absolute for tiny entries)
        for p in full:
            assert np.max(np.abs(full[p] - sharded[p])) < 1e-10, p
        assert worst < 1e-6

    def test_shard_permutation_stable(self):
        g1, _, _ = TR.parallel_gradients(self.params, SMALL, self.data.images, self.data.labels, 3)
        perm = np.r_[4:6, 0:2, 2:4]  # reorder shards
        g2, _, _ = TR.parallel_gradients(
            self.params, SMALL, self.data.images[perm], self.data.labels[perm], 3
        )
        for p in g1:
            assert np.max(np.abs(g1[p] - g2[p])) < 1e-12

    def test_indivisible_batch_rejected(self):
        with pytest.raises(ValueError):
            TR.parallel_gradients(self.params, SMALL, self.data.images[:5], self.data.labels[:5], 3)


class TestTrainEpoch:
    def test_identical_seeds_identical_params(self):
        data = small_dataset(12)
        cfg = dataclasses.replace(FAST, flip_probability=0.5)
        runs = []
        for _ in range(2):
            params = init_params(SMALL, seed=1)
            state = TR.AdamState(params)
            for epoch in range(2):
                params, _ = TR.train_epoch(params, SMALL, data, cfg, state, epoch)
            runs.append(params)
        for p in runs[0]:
            assert np.array_equal(runs[0][p].data, runs[1][p].data)

    def test_flip_invariant_loss_on_symmetric_images(self):
        data = small_dataset(6)
        sym_images = (data.images + data.images[:, :, :, ::-1]) / 2.0
        data = TR.LabeledFrames(images=np.ascontiguousarray(sym_images), labels=data.labels, frame_ids=data.frame_ids)
        losses = []
        for fp in (0.0, 1.0):
            params = init_params(SMALL, seed=2)
            state = TR.AdamState(params)
            cfg = dataclasses.replace(FAST, flip_probability=fp, batch_size=6)
            _, metrics = TR.train_epoch(params, SMALL, data, cfg, state, 0)
            losses.append(metrics["loss"])
        assert abs(losses[0] - losses[1]) < 1e-12

    def test_single_batch_loss_equals_direct_bce(self):
        data = small_dataset(6)
        params = init_params(SMALL, seed=3)
        state = TR.AdamState(params)
        cfg = dataclasses.replace(FAST, batch_size=6, num_workers=1)
        _, metrics = TR.train_epoch(params, SMALL, data, cfg, state, 0)
        order = TR._epoch_rng(cfg.seed, 0).permutation(6)
        with T.no_grad():
            expect = T.bce_with_logits(
                forward(params, SMALL, data.images[order]), data.labels[order]
            ).item()
        assert metrics["loss"] == expect

    def test_loss_decreases_on_fixture(self):
        data = small_dataset(12)
        params = init_params(SMALL, seed=4)
        cfg = dataclasses.replace(FAST, epochs=5)
        params, _, history = TR.train(params, SMALL, data, cfg)
        assert history[-1]["loss"] < history[0]["loss"]

    def test_label_head_mismatch_rejected(self):
        data = small_dataset(6)
        bad = dataclasses.replace(SMALL, dataset_tag="bp4d")
        with pytest.raises(ValueError):
            TR.train(init_params(bad, 0), bad, data, FAST)


class TestCheckpoints:
    def test_save_load_save_byte_identical(self, tmp_path):
        params = init_params(SMALL, seed=5)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(p1, params, SMALL)
        loaded, state, epoch = load_checkpoint(p1, SMALL)
        assert state is None and epoch == 0
        save_checkpoint(p2, loaded, SMALL)
        assert p1.read_bytes() == p2.read_bytes()

    def test_config_digest_mismatch(self, tmp_path):
        params = init_params(SMALL, seed=5)
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, params, SMALL)
        other = dataclasses.replace(SMALL, window_size=4, shift_size=0)
        with pytest.raises(ValueError, match="different model configuration"):
            load_checkpoint(path, other)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all, nope" + b"\x00" * 100)
        with pytest.raises(ValueError):
            load_checkpoint(path, SMALL)

    def test_resume_matches_uninterrupted(self, tmp_path):
        data = small_dataset(12)
        cfg4 = dataclasses.replace(FAST, epochs=4, flip_probability=0.5)

        params_a = init_params(SMALL, seed=6)
        params_a, _, _ = TR.train(params_a, SMALL, data, cfg4)

        params_b = init_params(SMALL, seed=6)
        cfg2 = dataclasses.replace(cfg4, epochs=2)
        ckpt = tmp_path / "mid.ckpt"
        params_b, state_b, _ = TR.train(params_b, SMALL, data, cfg2, checkpoint_path=ckpt)
        loaded, state, epoch = load_checkpoint(ckpt, SMALL, expect_train_digest=cfg2.digest())
        assert epoch == 2 and state is not None and state.t == state_b.t
        resumed, _, _ = TR.train(loaded, SMALL, data, cfg4, state=state, start_epoch=epoch)

        for p in params_a:
            assert np.array_equal(params_a[p].data, resumed[p].data), p

    def test_train_digest_checked(self, tmp_path):
        params = init_params(SMALL, seed=5)
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, params, SMALL, adam_state=TR.AdamState(params), train_digest=FAST.digest())
        with pytest.raises(ValueError, match="training configuration"):
            load_checkpoint(path, SMALL, expect_train_digest=dataclasses.replace(FAST, seed=9).digest())
        loaded, state, _ = load_checkpoint(path, SMALL, expect_train_digest=FAST.digest())
        assert state is not None and state.t == 0

    def test_log_jsonl(self, tmp_path):
        import json

        data = small_dataset(6)
        log = tmp_path / "train.jsonl"
        TR.train(init_params(SMALL, 0), SMALL, data, FAST, log_path=log)
        lines = [json.loads(line) for line in log.read_text().splitlines()]
        assert [entry["epoch"] for entry in lines] == [0, 1]
        for entry in lines:
            assert set(entry) == {"epoch", "loss", "per_au", "macro_f1", "macro_accuracy", "wall_time"}
            assert set(entry["per_au"]) == {"25", "26", "43"}


class TestEvaluate:
    def test_worker_count_does_not_change_report(self):
        data = small_dataset(13)
        params = init_params(SMALL, seed=7)
        r1 = TR.evaluate(params, SMALL, data, num_workers=1)
        r3 = TR.evaluate(params, SMALL, data, num_workers=3, batch_size=4)
        assert r1 == r3


class TestPretrainFinetune:
    def test_protocol(self):
        cfg_model = dataclasses.replace(SMALL, dataset_tag="bp4d")
        rng = np.random.default_rng(8)
        n = 12
        twelve_labels = (rng.random((n, 12)) > 0.5).astype(np.float64)
        base = small_dataset(n)
        pre = TR.LabeledFrames(images=base.images, labels=twelve_labels, frame_ids=base.frame_ids)
        fine = small_dataset(n, seed=9)
        cfg_fast = dataclasses.replace(FAST, epochs=1)

        before = parameter_checksum(init_params(cfg_model, seed=0), exclude_prefixes=("head/",))
        result = TR.pretrain_then_finetune(
            cfg_model, pre, pre, fine, fine, "pain-icu", cfg_fast, cfg_fast, init_seed=0
        )
        after = parameter_checksum(result["params"], exclude_prefixes=("head/",))
        assert before != after  # stage A moved the backbone
        assert result["params"]["head/weight"].shape == (4, 3)  # 12 -> 3 head swap
        assert result["model_config"].dataset_tag == "pain-icu"
        # the two corpora share no AU codes; the swap must handle that case
        from aupipe.model import AU_SETS

        assert not set(AU_SETS["bp4d"]) & set(AU_SETS["pain-icu"])

        repeat = TR.pretrain_then_finetune(
            cfg_model, pre, pre, fine, fine, "pain-icu", cfg_fast, cfg_fast, init_seed=0
        )
        assert result["finetune_report"] == repeat["finetune_report"]
        assert result["pretrain_report"] == repeat["pretrain_report"]

    def test_freeze_backbone(self):
        data = small_dataset(6)
        params = init_params(SMALL, seed=10)
        before = parameter_checksum(params, exclude_prefixes=("head/",))
        cfg = dataclasses.replace(FAST, epochs=1, freeze_backbone=True)
        trained, _, _ = TR.train(params, SMALL, data, cfg)
        assert parameter_checksum(trained, exclude_prefixes=("head/",)) == before
        assert not np.array_equal(trained["head/weight"].data, params["head/weight"].data)


class TestChecksumHelper:
    def test_file_digest_stable(self, tmp_path):
        path = tmp_path / "f.bin"
        path.write_bytes(b"abc123")
        assert file_digest(path) == file_digest(path)
