import dataclasses
import struct
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from semxfer import trainer as T
from semxfer.encoders import init_params
from semxfer.objective import SamplingError
from semxfer.scene import child_rng
from semxfer.trainer import Checkpoint, ConfigError, FormatError, NumericalAbort, TrainConfig, sample_batch, train


def cfg(**kw):
    base = {"seed": 0, "iterations": 5, "log_every": 2, "augment": {"onfly_per_step": 2}}
    base.update(kw)
    return TrainConfig.from_json(base)


class TestSampleBatch:
    def test_full_permutation(self):
        out = sample_batch(np.random.default_rng(0), list(range(20)), 20)
        assert sorted(out) == list(range(20))

    def test_distinct_keys(self, small_dataset):
        batch = sample_batch(np.random.default_rng(1), small_dataset.train, 32, key=lambda t: t.r)
        assert len({t.r for t in batch}) == 32

    def test_unsatisfiable(self):
        with pytest.raises(SamplingError):
            sample_batch(np.random.default_rng(0), [1, 2, 3], 4)
        with pytest.raises(SamplingError):
            sample_batch(np.random.default_rng(0), ["a", "a", "b"], 3, key=lambda x: x)

    def test_uniform_chi_square(self):
        rng = np.random.default_rng(2)
        items = list(range(50))
        counts = Counter()
        for _ in range(10_000):
            counts.update(sample_batch(rng, items, 5))
        observed = np.array([counts[i] for i in items])
        assert chisquare(observed).pvalue > 0.01


class TestTrain:
    def test_one_step(self, small_dataset):
        ck = train(cfg(iterations=1), small_dataset)
        assert ck.params.step_count == 1

    def test_deterministic(self, small_dataset):
        a = train(cfg(), small_dataset)
        b = train(cfg(), small_dataset)
        assert a.to_bytes() == b.to_bytes()

    def test_seed_matters(self, small_dataset):
        assert train(cfg(), small_dataset).hash != train(cfg(seed=1), small_dataset).hash

    def test_log_schedule(self, small_dataset):
        log = []
        train(cfg(iterations=5, log_every=2), small_dataset, log=log)
        assert [r["step"] for r in log] == [1, 2, 4, 5]
        assert set(log[0]) == {"step", "loss_embed", "loss_transform"}

    @pytest.mark.parametrize("regime", list(T.REGIMES))
    def test_regimes_run(self, small_dataset, regime):
        log = []
        train(cfg(regime=regime, iterations=2, log_every=1), small_dataset, log=log)
        has_embed = log[-1]["loss_embed"] is not None
        assert has_embed == (regime == "transfer")
        assert log[-1]["loss_transform"] is not None

    def test_lambda_zero_freezes_fusion(self, small_dataset):
        c = cfg(loss={"lambda_transform": 0.0})
        ck = train(c, small_dataset)
        init = init_params(c.model, child_rng(c.seed, "init"))
        for prefix in ("fuse.", "enc_spec."):
            assert ck.params.fingerprint(prefix) == init.fingerprint(prefix)
        assert ck.params.fingerprint("enc_grid.") != init.fingerprint("enc_grid.")

    def test_phase_one_leaves_fusion_untouched(self, small_dataset):
        c = cfg(schedule="two_phase", iterations=4, phase1_fraction=1.0)
        ck = train(c, small_dataset)
        init = init_params(c.model, child_rng(c.seed, "init"))
        assert ck.params.fingerprint("fuse.") == init.fingerprint("fuse.")
        assert ck.params.fingerprint("enc_tok.") != init.fingerprint("enc_tok.")

    def test_two_phase_encoders_fixed_in_phase_two(self, small_dataset, monkeypatch):
        snaps = []
        real = T.joint_loss

        def spy(pb, tb, params, mcfg, lcfg):
            snaps.append((params.fingerprint("enc_grid.") + params.fingerprint("enc_tok."), pb is None))
            return real(pb, tb, params, mcfg, lcfg)

        monkeypatch.setattr(T, "joint_loss", spy)
        train(cfg(schedule="two_phase", iterations=6, phase1_fraction=0.5), small_dataset)
        phase2 = [fp for fp, no_pairs in snaps if no_pairs]
        assert len(phase2) == 3 and len(set(phase2)) == 1

    def test_nan_abort(self, small_dataset, monkeypatch):
        real = T.joint_loss
        calls = []

        def poisoned(*args):
            loss, parts = real(*args)
            calls.append(1)
            if len(calls) == 3:
                parts = {**parts, "loss_transform": float("nan")}
            return loss, parts

        monkeypatch.setattr(T, "joint_loss", poisoned)
        with pytest.raises(NumericalAbort) as info:
            train(cfg(), small_dataset)
        assert info.value.step == 3
        assert "loss_transform" in info.value.parts

    def test_transfer_needs_pairs(self, small_dataset):
        no_pairs = dataclasses.replace(small_dataset, pairs=[])
        with pytest.raises(ConfigError):
            train(cfg(), no_pairs)

    def test_transfer_rejects_b_triplets(self, small_dataset):
        mixed = dataclasses.replace(small_dataset, train=[dataclasses.replace(small_dataset.train[0], r_domain="B")])
        with pytest.raises(ConfigError):
            train(cfg(), mixed)

    def test_no_b_triplets_seen_in_transfer(self, small_dataset, monkeypatch):
        real = T.joint_loss
        seen = []

        def spy(pb, tb, *rest):
            seen.append(list(zip(tb.q_domains, tb.r_domains)))
            return real(pb, tb, *rest)

        monkeypatch.setattr(T, "joint_loss", spy)
        train(cfg(iterations=3, augment={"onfly_per_step": 4}), small_dataset)
        assert all(pair != ("B", "B") for batch in seen for pair in batch)


class TestConfig:
    def test_unknown_keys(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_json({"iterations": 3, "warp": 9})
        with pytest.raises(ConfigError):
            TrainConfig.from_json({"model": {"layers": 9}})

    @pytest.mark.parametrize("bad", [{"iterations": 0}, {"learning_rate": 0}, {"regime": "x"}, {"optimizer": "lbfgs"}])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig.from_json(bad)

    def test_json_round_trip(self):
        c = cfg(regime="cross_AB", loss={"temperature": 4.0})
        assert TrainConfig.from_json(c.to_json()) == c


class TestCheckpoint:
    def test_round_trip(self, small_dataset, tmp_path):
        ck = train(cfg(), small_dataset, manifest_hash="abc123")
        digest = T.write_checkpoint(tmp_path / "m.ckpt", ck)
        back = T.read_checkpoint(tmp_path / "m.ckpt")
        assert back.to_bytes() == ck.to_bytes() and back.hash == digest
        assert back.manifest_hash == "abc123"
        assert back.config == ck.config
        assert back.params.step_count == ck.params.step_count
        for n in ck.params.names():
            assert back.params[n].tobytes() == ck.params[n].tobytes()

    def test_header_layout(self, small_dataset):
        data = train(cfg(iterations=1), small_dataset).to_bytes()
        assert data[:4] == b"SMXF"
        assert struct.unpack("<I", data[4:8])[0] == T.FORMAT_VERSION

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            Checkpoint.from_bytes(b"NOPE" + bytes(20))

    def test_version_mismatch(self, small_dataset):
        data = bytearray(train(cfg(iterations=1), small_dataset).to_bytes())
        data[4:8] = struct.pack("<I", 99)
        with pytest.raises(FormatError, match="version 99"):
            Checkpoint.from_bytes(bytes(data))

    def test_truncated(self, small_dataset):
        data = train(cfg(iterations=1), small_dataset).to_bytes()
        with pytest.raises(FormatError, match="truncated"):
            Checkpoint.from_bytes(data[:-3])
