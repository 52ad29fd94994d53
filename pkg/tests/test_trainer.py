import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fairdiff.diffusion import DenoiserModel, base_loss, build_schedule
from fairdiff.errors import CheckpointError, InvalidHyperparameter, TrainingDivergence
from fairdiff.guidance import ConstantWeight, GuidanceNet, TailStats
from fairdiff.numerics import SeededRng, finite_diff_check
from fairdiff.trainer import (FORMAT_VERSION, Checkpoint, JointBatch, TrainConfig, assemble_ag, checkpoint_bytes,
                              checkpoint_scorer, early_stop, joint_objective, load_checkpoint, parse_value,
                              recommend, save_checkpoint, train_diffrec, train_joint, validate_config)

SMALL = TrainConfig(seed=0, epochs=3, patience=5, batch_size=40, dims=(16,), aan_dims=(8,), e_weak=1, k_pop=5)


@pytest.fixture(scope="module")
def diffrec_run(small_dataset):
    ds, _ = small_dataset
    return train_diffrec(ds, SMALL)


@pytest.fixture(scope="module")
def joint_run(small_dataset, diffrec_run):
    ds, prof = small_dataset
    return train_joint(ds, diffrec_run.best, diffrec_run.epoch_checkpoints[1], SMALL, prof)


def random_checkpoint(seed):
    gen = np.random.default_rng(seed)
    blocks = {f"main.{i}.weight": gen.normal(size=(3, 4)).astype(np.float32) for i in range(2)}
    blocks.update({f"main.{i}.bias": gen.normal(size=3).astype(np.float32) for i in range(2)})
    blocks["aan.tail_stats"] = np.array([0.5, 2.0], dtype=np.float32)
    return Checkpoint({"seed": str(seed), "model": "a2g", "dims": "16"}, blocks, int(gen.integers(1, 50)),
                      gen.random(5).astype(np.float32))


class TestEarlyStop:
    def test_flat_history(self):
        assert early_stop([0.3, 0.3], 2) == (False, 1)
        assert early_stop([0.3, 0.3, 0.3], 2) == (True, 1)

    @given(st.integers(1, 40), st.integers(1, 10))
    def test_strictly_improving_never_stops(self, n, patience):
        history = list(np.linspace(0.1, 0.5, n))
        for i in range(1, n + 1):
            assert early_stop(history[:i], patience) == (False, i)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(1, 10))
    def test_best_is_first_argmax(self, history, patience):
        stop, best = early_stop(history, patience)
        assert best == history.index(max(history)) + 1
        assert stop == (len(history) - best >= patience)


class TestCheckpointFormat:
    def test_round_trip(self, tmp_path):
        for seed in range(5):
            ck = random_checkpoint(seed)
            back = load_checkpoint(save_checkpoint(ck, tmp_path / f"{seed}.ckpt"))
            assert back.equals(ck)
            assert checkpoint_bytes(back) == checkpoint_bytes(ck)

    def test_layout(self):
        raw = checkpoint_bytes(random_checkpoint(0))
        assert raw[:4] == b"A2GD"
        assert struct.unpack("<I", raw[4:8])[0] == FORMAT_VERSION
        assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])

    def test_every_truncation_rejected(self, tmp_path):
        raw = checkpoint_bytes(random_checkpoint(1))
        path = tmp_path / "cut.ckpt"
        for n in list(range(0, 40)) + list(range(40, len(raw), 17)) + [len(raw) - 1]:
            path.write_bytes(raw[:n])
            with pytest.raises(CheckpointError):
                load_checkpoint(path)

    def test_version_mismatch_names_both(self, tmp_path):
        raw = bytearray(checkpoint_bytes(random_checkpoint(2)))
        raw[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
        path = tmp_path / "v2.ckpt"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(path)
        assert f"version {FORMAT_VERSION + 1}" in str(err.value) and f"version {FORMAT_VERSION}" in str(err.value)

    def test_bad_magic_and_corruption(self, tmp_path):
        raw = bytearray(checkpoint_bytes(random_checkpoint(3)))
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOPE" + bytes(raw[4:]))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")


class TestConfig:
    def test_defaults_valid(self):
        validate_config(TrainConfig())

    @pytest.mark.parametrize("field,value", [("w_max", 9.0), ("tau", 1.0), ("eta", 0.2), ("q_high", 0.05),
                                             ("lambda_ag", 0.1), ("e_weak", 11), ("epochs", 0)])
    def test_out_of_range(self, field, value):
        with pytest.raises(InvalidHyperparameter, match=field):
            validate_config(TrainConfig().replace(**{field: value}))

    def test_unsafe_ranges_skip_tuned_bounds(self):
        validate_config(TrainConfig(w_max=9.0, tau=1.0), unsafe_ranges=True)

    @pytest.mark.parametrize("field", ["lambda_ag", "lambda_pop", "eta"])
    def test_zero_disables(self, field):
        validate_config(TrainConfig().replace(**{field: 0.0}))

    def test_text_round_trip(self):
        cfg = TrainConfig(seed=7, dims=(32, 16), constant_w=1.0, use_d2=False, lr=3e-4)
        back = TrainConfig(**{k: parse_value(k, v) for k, v in cfg.to_dict().items()})
        assert back == cfg


class TestDiffRecTraining:
    def test_weak_checkpoint_is_epoch_one_parameters(self, small_dataset, diffrec_run):
        ds, _ = small_dataset
        one = train_diffrec(ds, SMALL.replace(epochs=1))
        weak = diffrec_run.epoch_checkpoints[1]
        assert weak.epoch == 1
        assert weak.blocks.keys() == one.best.blocks.keys()
        assert all(weak.blocks[k].tobytes() == one.best.blocks[k].tobytes() for k in weak.blocks)

    def test_same_seed_identical(self, small_dataset, diffrec_run):
        ds, _ = small_dataset
        again = train_diffrec(ds, SMALL)
        assert checkpoint_bytes(again.best) == checkpoint_bytes(diffrec_run.best)
        other = train_diffrec(ds, SMALL.replace(seed=1))
        assert checkpoint_bytes(other.best) != checkpoint_bytes(diffrec_run.best)

    def test_history_and_best(self, diffrec_run):
        recalls = [row["recall"] for row in diffrec_run.history]
        assert len(recalls) == SMALL.epochs
        assert diffrec_run.best.epoch == int(np.argmax(recalls)) + 1
        np.testing.assert_array_equal(diffrec_run.best.val_history, np.float32(recalls))
        assert all(s["ag"] == 0 and s["pop"] == 0 for s in diffrec_run.steps)

    def test_master_weights_float32(self, diffrec_run):
        assert all(v.dtype == np.float32 for v in diffrec_run.best.blocks.values())

    def test_divergence_aborts_after_retry(self, small_dataset, monkeypatch):
        import fairdiff.trainer as trainer

        def explode(*a, **k):
            raise TrainingDivergence("boom")

        monkeypatch.setattr(trainer, "base_loss", explode)
        with pytest.raises(TrainingDivergence, match="last good epoch 0"):
            train_diffrec(small_dataset[0], SMALL)


def toy_joint(seed=0, n=4, constant=None):
    root = SeededRng(seed)
    main = DenoiserModel.init(n, (6,), root.child(1))
    weak = DenoiserModel.init(n, (6,), root.child(2), role="weak")
    if constant is None:
        weigher = GuidanceNet.init(n, (8, 4), root.child(3), w_max=3.0, eta=0.6, stats=TailStats())
    else:
        weigher = ConstantWeight(constant)
    gen = np.random.default_rng(seed)
    x0 = np.array([[1, 0, 0, 1], [0, 1, 0, 0], [1, 1, 0, 0]], dtype=float)[:, :n]
    batch = JointBatch(x0, np.array([1, 2, 3]), gen.normal(size=x0.shape), np.array(
        [[0.5, 0.0, 0.5], [1.0, 0.0, 0.0], [0.5, 0.5, 0.0]]))
    bins = np.array([0, 1, 2, 2])[:n]
    m_tail = np.array([0, 0, 1, 1], dtype=float)[:n]
    return main, weak, weigher, batch, bins, m_tail, build_schedule(3, 0, 1e-3, 0.05)


class TestJointObjective:
    def test_reduces_to_base_loss(self):
        main, weak, weigher, batch, bins, m_tail, sched = toy_joint()
        res = joint_objective(main, weak, weigher, batch, bins, m_tail, sched, 0.0, 0.0, np.array([0.2, 0.3, 0.5]),
                              2, 0.1)
        loss, grads = base_loss(main, batch.x0, batch.t, batch.noise, sched)
        assert res.losses["total"] == loss
        for a, b in zip(res.main_grads, grads):
            np.testing.assert_allclose(a, b, atol=1e-15)
        assert all(not g.any() for g in res.aan_grads)

    def test_loss_decomposition(self):
        main, weak, weigher, batch, bins, m_tail, sched = toy_joint()
        res = joint_objective(main, weak, weigher, batch, bins, m_tail, sched, 0.4, 0.7, np.array([0.2, 0.3, 0.5]),
                              2, 0.1)
        l = res.losses
        assert l["total"] == pytest.approx(l["base"] + 0.4 * l["ag"] + 0.7 * l["pop"], abs=1e-12)
        assert l["pop"] == pytest.approx(l["pop_high"] + l["pop_low"] + l["pop_balance"], abs=1e-12)

    @pytest.mark.parametrize("lambdas", [(0.5, 0.5), (1.0, 0.0), (0.0, 1.0)])
    def test_gradients_match_finite_differences(self, lambdas):
        main, weak, weigher, batch, bins, m_tail, sched = toy_joint(seed=3)
        q = np.array([0.2, 0.3, 0.5])
        theta = joint_objective(main, weak, weigher, batch, bins, m_tail, sched, *lambdas, q, 2, 0.5).theta
        n_main = len(main.net.params())

        def loss(params):
            main.net.set_params(params[:n_main])
            weigher.net.set_params(params[n_main:])
            res = joint_objective(main, weak, weigher, batch, bins, m_tail, sched, *lambdas, q, 2, 0.5, theta=theta)
            return res.losses["total"], res.main_grads + res.aan_grads

        params = [p.copy() for p in main.net.params() + weigher.net.params()]
        report = finite_diff_check(loss, params, h=1e-6, tol=1e-4)
        assert report.ok, str(report)

    def test_constant_weight_gradients(self):
        main, weak, weigher, batch, bins, m_tail, sched = toy_joint(seed=2, constant=2.0)
        q = np.array([0.2, 0.3, 0.5])
        theta = joint_objective(main, weak, weigher, batch, bins, m_tail, sched, 0.5, 0.5, q, 2, 0.5).theta

        def loss(params):
            main.net.set_params(params)
            res = joint_objective(main, weak, weigher, batch, bins, m_tail, sched, 0.5, 0.5, q, 2, 0.5, theta=theta)
            assert res.aan_grads is None
            return res.losses["total"], res.main_grads

        assert finite_diff_check(loss, [p.copy() for p in main.net.params()], h=1e-6, tol=1e-4).ok


class TestJointTraining:
    def test_weak_untouched(self, diffrec_run, joint_run):
        weak = diffrec_run.epoch_checkpoints[1]
        for k, v in weak.blocks.items():
            assert joint_run.best.blocks["weak." + k[5:]].tobytes() == v.tobytes()

    def test_step_log(self, joint_run):
        for s in joint_run.steps:
            assert s["total"] == pytest.approx(s["base"] + 0.5 * s["ag"] + 0.5 * s["pop"], abs=1e-9)
            assert 1 < s["w_mean"] < SMALL.w_max * (1 + SMALL.eta)
            assert {"feat_d1_maxabs", "feat_d2_maxabs", "feat_d3_maxabs"} <= s.keys()

    def test_deterministic(self, small_dataset, diffrec_run, joint_run):
        ds, prof = small_dataset
        again = train_joint(ds, diffrec_run.best, diffrec_run.epoch_checkpoints[1], SMALL, prof)
        assert checkpoint_bytes(again.best) == checkpoint_bytes(joint_run.best)

    def test_no_pop_variant(self, small_dataset, diffrec_run):
        ds, prof = small_dataset
        run = train_joint(ds, diffrec_run.best, diffrec_run.epoch_checkpoints[1],
                          SMALL.replace(lambda_pop=0.0, epochs=1), prof)
        assert all(s["pop_contrib"] == 0.0 for s in run.steps)

    def test_no_ag_variant_is_constant_weight(self, small_dataset, diffrec_run):
        ds, prof = small_dataset
        run = train_joint(ds, diffrec_run.best, diffrec_run.epoch_checkpoints[1],
                          SMALL.replace(constant_w=1.0, epochs=1), prof)
        assert all(s["w_mean"] == 1.0 for s in run.steps)
        assert not run.best.has("aan")
        assert isinstance(run.best.guidance(), ConstantWeight)

    def test_feature_ablation_zeroes_signal(self, small_dataset, diffrec_run):
        ds, prof = small_dataset
        run = train_joint(ds, diffrec_run.best, diffrec_run.epoch_checkpoints[1],
                          SMALL.replace(use_d2=False, epochs=1), prof)
        assert all(s["feat_d2_maxabs"] == 0.0 and s["feat_d1_maxabs"] > 0 for s in run.steps)

    def test_architecture_mismatch(self, small_dataset, diffrec_run):
        ds, prof = small_dataset
        other = train_diffrec(ds, SMALL.replace(dims=(8,), epochs=1))
        with pytest.raises(CheckpointError):
            train_joint(ds, diffrec_run.best, other.best, SMALL, prof)

    def test_saved_checkpoint_scores_like_in_memory(self, small_dataset, joint_run, tmp_path):
        ds, prof = small_dataset
        back = load_checkpoint(save_checkpoint(joint_run.best, tmp_path / "m.ckpt"))
        a = recommend(ds, joint_run.best, prof.tail, 10)
        b = recommend(ds, back, prof.tail, 10)
        assert np.array_equal(a, b)
        assert isinstance(back.guidance(), GuidanceNet)

    def test_recommend_masks_seen_items(self, small_dataset, joint_run):
        ds, prof = small_dataset
        lists = recommend(ds, joint_run.best, prof.tail, 10)
        seen = (ds.train + ds.val).toarray() > 0
        assert lists.shape == (ds.n_users, 10)
        for u in range(ds.n_users):
            assert not seen[u, lists[u]].any() and len(set(lists[u])) == 10

    def test_ag_assembly(self, small_dataset, diffrec_run):
        ds, prof = small_dataset
        ck = assemble_ag(diffrec_run.best, diffrec_run.epoch_checkpoints[1], SMALL)
        assert isinstance(ck.guidance(), ConstantWeight) and ck.guidance().w == SMALL.ag_weight
        scorer = checkpoint_scorer(ck, prof.tail)
        hist = ds.train[:5].toarray().astype(float)
        assert scorer(0, np.arange(5), hist).shape == (5, ds.n_items)
