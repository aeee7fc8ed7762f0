import struct
from dataclasses import replace

import numpy as np
import pytest

from basinlab.data import Dataset, make_gaussian_blobs
from basinlab.errors import FormatError, UsageError
from basinlab.landscape import q_pair_curve
from basinlab.models import ModelSpec, ParamVector, forward, init_params
from basinlab.train import (
    WARMUP_COSINE_FLOOR,
    Checkpoint,
    DivergenceError,
    TrainConfig,
    decode_checkpoint,
    encode_checkpoint,
    evaluate,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    split_train,
    train,
)

TINY = ModelSpec(2, 4, (8,))


@pytest.fixture(scope="module")
def blobs():
    return make_gaussian_blobs(n_train=256, n_test=256, spread=0.1, seed=1)


class TestSchedule:
    cfg = TrainConfig(epochs=10, peak_lr=0.1, warmup_frac=0.1)

    def test_start_is_zero(self):
        assert lr_at(self.cfg, 0, 10) == 0.0

    def test_peak_at_end_of_warmup(self):
        assert lr_at(self.cfg, 10, 10) == 0.1

    def test_cosine_midpoint(self):
        # halfway through the decay phase
        assert lr_at(self.cfg, 55, 10) == pytest.approx(0.05)

    def test_end_is_zero(self):
        assert lr_at(self.cfg, 100, 10) == 0.0
        with pytest.raises(UsageError):
            lr_at(self.cfg, 101, 10)

    def test_floor_clamps(self):
        cfg = replace(self.cfg, schedule=WARMUP_COSINE_FLOOR, floor_lr=0.01)
        assert lr_at(cfg, 99, 10) == 0.01
        assert lr_at(cfg, 100, 10) == 0.01
        assert lr_at(cfg, 5000, 10) == 0.01
        assert lr_at(cfg, 10, 10) == 0.1

    def test_monotone_decay(self):
        lrs = [lr_at(self.cfg, s, 10) for s in range(10, 101)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_config_validation(self):
        with pytest.raises(UsageError):
            TrainConfig(epochs=1, warmup_frac=1.0)
        with pytest.raises(UsageError):
            TrainConfig(epochs=1, momentum=1.0)


class TestTrain:
    def test_zero_lr_keeps_params(self, blobs):
        cfg = TrainConfig(epochs=2, peak_lr=0.0, batch_size=64)
        res = train(TINY, blobs[0], cfg)
        init = res.final  # epoch 2
        first = train(TINY, blobs[0], replace(cfg, epochs=2), snapshot_epochs=[0]).checkpoints[0]
        assert init.params.values.tobytes() == first.params.values.tobytes()

    def test_deterministic(self, blobs):
        cfg = TrainConfig(epochs=3, batch_size=64, master_seed=4, jitter=0.05)
        a = train(TINY, blobs[0], cfg).final
        b = train(TINY, blobs[0], cfg).final
        assert a.params.values.tobytes() == b.params.values.tobytes()

    def test_single_step_matches_hand_update(self):
        spec = ModelSpec(2, 2, (1,), layer_norm=False)
        x = np.array([[1.0, 2.0]])
        ds = Dataset(x, [1], 2)
        init = ParamVector.from_tensors(
            spec,
            {
                "layer0.weight": np.array([[0.5, -0.25]]),
                "layer0.bias": np.array([0.1]),
                "head.weight": np.array([[1.0], [-1.0]]),
                "head.bias": np.array([0.0, 0.0]),
            },
        )
        # one step with warmup disabled: lr = peak * (1 + cos 0) / 2 = peak
        cfg = TrainConfig(epochs=1, batch_size=1, peak_lr=0.5, warmup_frac=0.0, momentum=0.9)
        out = train(spec, ds, cfg, init=init).final.params.tensors()
        h = 0.5 * 1 - 0.25 * 2 + 0.1  # 0.1 > 0
        z = np.array([h, -h])
        p = np.exp(z) / np.exp(z).sum()
        dz = p - np.array([0.0, 1.0])
        g_head_w = dz[:, None] * h
        dh = dz @ np.array([1.0, -1.0])
        g_w = dh * x
        # velocity starts at zero, so the first update is -lr * g
        np.testing.assert_allclose(out["head.weight"], np.array([[1.0], [-1.0]]) - 0.5 * g_head_w, rtol=1e-6)
        np.testing.assert_allclose(out["layer0.weight"], np.array([[0.5, -0.25]]) - 0.5 * g_w, rtol=1e-6)
        np.testing.assert_allclose(out["layer0.bias"], [0.1 - 0.5 * dh], rtol=1e-6)

    def test_momentum_second_step(self):
        spec = ModelSpec(2, 2, (1,), layer_norm=False)
        ds = Dataset(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1], 2)
        cfg = TrainConfig(epochs=1, batch_size=1, peak_lr=0.1, warmup_frac=0.0, momentum=0.9)
        res = train(spec, ds, cfg, snapshot_epochs=[0])
        assert res.final.params.values.tobytes() != res.checkpoints[0].params.values.tobytes()

    def test_loss_decreases(self, blobs):
        for seed in range(3):
            cfg = TrainConfig(epochs=5, batch_size=32, master_seed=seed)
            res = train(TINY, blobs[0], cfg)
            before = evaluate(TINY, init_params(TINY, np.random.default_rng(0)), blobs[0])[0]
            first = res.history[0]["train_loss"]
            assert res.history[-1]["train_loss"] < first
            assert evaluate(TINY, res.final.params, blobs[0])[0] < before

    def test_history_has_metrics(self, blobs):
        res = train(TINY, blobs[0], TrainConfig(epochs=2, batch_size=64), test_set=blobs[1])
        assert [r["epoch"] for r in res.history] == [1, 2]
        assert set(res.history[0]) == {"epoch", "lr", "train_loss", "test_acc"}

    def test_divergence_aborts(self, blobs):
        cfg = TrainConfig(epochs=3, batch_size=16, peak_lr=1e25, warmup_frac=0.0, momentum=0.99)
        with pytest.raises(DivergenceError) as info:
            train(ModelSpec(2, 4, (8,), layer_norm=False), blobs[0], cfg)
        ckpt = info.value.last_checkpoint
        assert ckpt is not None and np.isfinite(ckpt.params.values).all()


class TestSplit:
    def test_t_zero_same_init_different_orders(self, blobs):
        cfg = TrainConfig(epochs=2, batch_size=64)
        res = split_train(TINY, blobs[0], cfg, 0, 3)
        assert res.epochs_run == 6
        members = res.members
        assert members[0].params.values.tobytes() == train(TINY, blobs[0], cfg).final.params.values.tobytes()
        assert members[1].params.values.tobytes() != members[0].params.values.tobytes()

    def test_t_equals_T_copies(self, blobs):
        cfg = TrainConfig(epochs=2, batch_size=64)
        res = split_train(TINY, blobs[0], cfg, 2, 3)
        ref = train(TINY, blobs[0], cfg).final.params.values.tobytes()
        assert all(m.params.values.tobytes() == ref for m in res.members)
        assert res.epochs_run == 2

    def test_branch_zero_without_reset_replays_run(self, blobs):
        cfg = TrainConfig(epochs=3, batch_size=64, reset_momentum_at_split=False)
        res = split_train(TINY, blobs[0], cfg, 1, 2)
        assert res.members[0].params.values.tobytes() == train(TINY, blobs[0], cfg).final.params.values.tobytes()

    def test_budget(self, blobs):
        cfg = TrainConfig(epochs=4, batch_size=64)
        assert split_train(TINY, blobs[0], cfg, 1, 3).epochs_run == 1 + 3 * 3

    def test_bad_t(self, blobs):
        with pytest.raises(UsageError):
            split_train(TINY, blobs[0], TrainConfig(epochs=2), 3, 2)

    def test_late_split_connected(self):
        train_set, test_set = make_gaussian_blobs(n_train=1024, n_test=2048, spread=0.1, seed=0)
        spec = ModelSpec(2, 4, (32, 32))
        cfg = TrainConfig(epochs=10, batch_size=64, master_seed=1)
        a, b = split_train(spec, train_set, cfg, 5, 2).members
        assert abs(q_pair_curve(a, b, test_set).at(0.5)) < 2.0


class TestCheckpoint:
    def make(self):
        spec = ModelSpec(3, 2, (4, 5), kind="res_mlp")
        p = ParamVector(np.random.default_rng(0).normal(size=spec.num_params).astype(np.float32), spec)
        return Checkpoint(spec, p, 7, "abc", {"train_loss": 0.5}, {"epochs": 7})

    def test_roundtrip(self, tmp_path):
        ck = self.make()
        save_checkpoint(ck, tmp_path / "a.ckpt")
        back = load_checkpoint(tmp_path / "a.ckpt")
        assert back.params.values.tobytes() == ck.params.values.tobytes()
        assert back.spec == ck.spec and back.epoch == 7 and back.metrics == {"train_loss": 0.5}
        x = np.random.default_rng(1).normal(size=(10, 3))
        assert forward(ck.spec, ck.params, x).data.tobytes() == forward(back.spec, back.params, x).data.tobytes()

    def test_layout(self):
        raw = encode_checkpoint(self.make())
        assert raw[:4] == b"LBEN"
        version, hlen = struct.unpack_from("<HI", raw, 4)
        assert version == 1
        assert raw[10 : 10 + hlen].decode().startswith("{")

    def test_bad_magic(self, tmp_path):
        raw = bytearray(encode_checkpoint(self.make()))
        raw[0:4] = b"XXXX"
        with pytest.raises(FormatError):
            decode_checkpoint(bytes(raw))

    def test_bad_version(self):
        raw = bytearray(encode_checkpoint(self.make()))
        raw[4:6] = struct.pack("<H", 99)
        with pytest.raises(FormatError):
            decode_checkpoint(bytes(raw))

    def test_truncated(self):
        raw = encode_checkpoint(self.make())
        for cut in (3, 12, len(raw) - 1):
            with pytest.raises(FormatError):
                decode_checkpoint(raw[:cut])

    def test_atomic_no_temp_left(self, tmp_path):
        save_checkpoint(self.make(), tmp_path / "x.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["x.ckpt"]
