import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibft import numkit as nk
from vibft.data import Dataset, SyntheticSpec, generate
from vibft.encoders import EncoderSpec, Snapshot
from vibft.numkit import ContractError, NonFiniteError, Rng, Tensor
from vibft.training import (
    PAPER_LEARNING_RATE,
    ConfigError,
    IntegrityError,
    Model,
    OptimizerConfig,
    OptimizerState,
    RegularizerSpec,
    RunConfig,
    RunRecord,
    adam_step,
    apply_dropout,
    dumps_checkpoint,
    evaluate,
    load_checkpoint,
    loads_checkpoint,
    mixout_step,
    save_checkpoint,
    train,
    wd_to_init_penalty,
)

SMALL = SyntheticSpec(relevant_dims=3, shortcut_dims=3, noise_dims=2, margin=3.0, seed=4)


@pytest.fixture(scope="module")
def small_data():
    return generate(SMALL, {"train": 60, "val": 30, "test_id": 40, "test_ood": 40})


def small_config(**kw):
    base = dict(encoder=EncoderSpec(output_width=8), k=3, epochs=4, beta0=1e-2)
    base.update(kw)
    return RunConfig(**base)


def scalar(v):
    return {"w": Tensor(np.array([v]), requires_grad=True)}


class TestAdam:
    def test_zero_gradient_keeps_params_and_decays_moments(self):
        p = scalar(1.5)
        state = OptimizerState(OptimizerConfig(lr=0.1))
        adam_step(p, {"w": np.array([2.0])}, state)
        w, m, v = p["w"].data.copy(), state.m["w"].copy(), state.v["w"].copy()
        adam_step(p, {"w": np.array([0.0])}, state)
        assert state.m["w"][0] == pytest.approx(0.9 * m[0]) and state.v["w"][0] == pytest.approx(0.999 * v[0])
        # the update uses the decayed moments, so the parameter still drifts
        zero = scalar(1.5)
        s0 = OptimizerState(OptimizerConfig(lr=0.1))
        adam_step(zero, {"w": np.array([0.0])}, s0)
        assert zero["w"].data[0] == 1.5 and w[0] != 1.5

    def test_first_step_moves_by_lr(self):
        p = scalar(0.0)
        adam_step(p, {"w": np.array([1.0])}, OptimizerState(OptimizerConfig(lr=1e-3)))
        # with eps inside the root: lr / sqrt(1 + 1e-6)
        assert p["w"].data[0] == pytest.approx(-1e-3 / np.sqrt(1 + 1e-6), rel=1e-12)

    def test_eps_placement_flag(self):
        p = scalar(0.0)
        adam_step(p, {"w": np.array([1e-4])}, OptimizerState(OptimizerConfig(lr=1.0, eps_inside_sqrt=False)))
        assert p["w"].data[0] == pytest.approx(-1e-4 / (1e-4 + 1e-6), rel=1e-12)

    def test_convex_quadratic(self):
        a = np.array([1.0, 4.0, 0.5])
        c = np.array([2.0, -1.0, 3.0])
        p = {"w": Tensor(np.zeros(3), requires_grad=True)}
        state = OptimizerState(OptimizerConfig(lr=0.2))
        f = lambda w: 0.5 * float(np.sum(a * (w - c) ** 2))  # minimum 0 at w = c
        for _ in range(100):
            adam_step(p, {"w": a * (p["w"].data - c)}, state)
        assert f(p["w"].data) < 1e-3

    def test_non_finite_gradient_aborts(self):
        with pytest.raises(NonFiniteError, match="w"):
            adam_step(scalar(0.0), {"w": np.array([np.inf])}, OptimizerState(OptimizerConfig()))

    def test_shape_mismatch(self):
        with pytest.raises(nk.DimensionError):
            adam_step(scalar(0.0), {"w": np.zeros(2)}, OptimizerState(OptimizerConfig()))

    def test_paper_learning_rate_is_kept(self):
        assert PAPER_LEARNING_RATE == 2e-5


class TestDropout:
    def test_zero_rate_is_identity(self):
        x = Tensor(Rng(0).gaussian((4, 4)))
        assert apply_dropout(x, 0.0, Rng(1)) is x

    def test_evaluation_is_identity(self):
        x = Tensor(Rng(0).gaussian((4, 4)))
        assert apply_dropout(x, 0.7, Rng(1), training=False) is x

    def test_expected_value_preserved(self):
        x = Tensor(np.full((100, 100), 2.0))
        rng = Rng(3)
        mean = np.mean([apply_dropout(x, 0.3, rng).data.mean() for _ in range(100)])
        assert mean == pytest.approx(2.0, rel=0.02)

    def test_survivors_rescaled(self):
        out = apply_dropout(Tensor(np.ones(1000)), 0.5, Rng(2)).data
        assert set(np.unique(out)) == {0.0, 2.0}

    def test_rate_one_is_an_error(self):
        with pytest.raises(ContractError):
            apply_dropout(Tensor(np.ones(3)), 1.0, Rng(0))


def snap(**arrays):
    return Snapshot({k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})


class TestWeightDecayToInit:
    def test_hand_example(self):
        p = scalar(3.0)
        pen = wd_to_init_penalty(p, snap(w=[1.0]), 0.5)
        assert pen.item() == 2.0
        assert nk.backward(pen, p)["w"].tolist() == [2.0]

    def test_zero_at_init_and_zero_lambda(self):
        p = {"w": Tensor([1.0, -2.0], requires_grad=True)}
        assert wd_to_init_penalty(p, snap(w=[1.0, -2.0]), 3.0).item() == 0.0
        pen = wd_to_init_penalty(p, snap(w=[0.0, 0.0]), 0.0)
        assert pen.item() == 0.0 and not np.any(nk.backward(pen, p)["w"])

    def test_gradient_matches_finite_differences(self):
        rng = Rng(5)
        p = {"a": Tensor(rng.gaussian((3, 2)), requires_grad=True), "b": Tensor(rng.gaussian(4), requires_grad=True)}
        w0 = snap(a=rng.gaussian((3, 2)), b=rng.gaussian(4))
        report = nk.finite_difference_check(lambda q: wd_to_init_penalty(q, w0, 0.3), p, tolerance=1e-6)
        assert report.passed, report.max_rel_error

    def test_missing_snapshot(self):
        with pytest.raises(ContractError):
            wd_to_init_penalty(scalar(1.0), None, 0.1)

    def test_exclude_prefix(self):
        p = {"head.w": Tensor([2.0], requires_grad=True), "encoder.w": Tensor([2.0], requires_grad=True)}
        pen = wd_to_init_penalty(p, snap(**{"head.w": [0.0], "encoder.w": [0.0]}), 1.0, exclude=("encoder.",))
        assert pen.item() == 4.0


class TestMixout:
    def test_rate_zero_no_change(self):
        p = {"w": Tensor(np.arange(5.0), requires_grad=True)}
        mixout_step(p, snap(w=np.zeros(5)), 0.0, Rng(0))
        assert p["w"].data.tolist() == [0.0, 1.0, 2.0, 3.0, 4.0]

    def test_rate_one_restores_snapshot(self):
        w0 = Rng(1).gaussian(5)
        p = {"w": Tensor(np.arange(5.0), requires_grad=True)}
        mixout_step(p, snap(w=w0), 1.0, Rng(0))
        assert np.array_equal(p["w"].data, w0)

    def test_replaced_fraction(self):
        p = {"w": Tensor(np.ones(100_000), requires_grad=True)}
        mixout_step(p, snap(w=np.zeros(100_000)), 0.3, Rng(7))
        assert abs(np.mean(p["w"].data == 0.0) - 0.3) < 0.01

    def test_no_rescaling(self):
        p = {"w": Tensor(np.ones(1000), requires_grad=True)}
        mixout_step(p, snap(w=np.zeros(1000)), 0.5, Rng(7))
        assert set(np.unique(p["w"].data)) == {0.0, 1.0}

    def test_missing_snapshot(self):
        with pytest.raises(ContractError):
            mixout_step(scalar(1.0), None, 0.5, Rng(0))


class TestConfig:
    def test_ablation_forbids_kl(self):
        with pytest.raises(ConfigError, match="beta0"):
            RunConfig(mode="ablation_deterministic", beta0=1e-3).validate()

    def test_bad_mode_and_k(self):
        with pytest.raises(ConfigError):
            RunConfig(mode="bayes").validate()
        with pytest.raises(ConfigError):
            RunConfig(k=0).validate()

    def test_unknown_key_is_rejected(self):
        with pytest.raises(ConfigError, match="encoder"):
            RunConfig.from_dict({"encoder": {"kind": "identity", "depth": 3}})

    def test_dict_round_trip_and_stable_id(self):
        cfg = small_config(regularizer=RegularizerSpec(kind="mixout", p=0.2, exclude=("encoder.",)))
        back = RunConfig.from_dict(cfg.to_dict())
        assert back == cfg and back.run_id() == cfg.run_id()
        assert small_config(seed=1).run_id() != cfg.run_id()

    def test_regularizer_ranges(self):
        with pytest.raises(ConfigError):
            RegularizerSpec(kind="dropout", p=1.0)
        with pytest.raises(ConfigError):
            RegularizerSpec(kind="wd_to_init", lam=-1.0)


class TestTrain:
    def test_identical_config_identical_record(self, small_data):
        a, b = train(small_config(), small_data), train(small_config(), small_data)
        assert a == b
        strip = lambda r: {k: v for k, v in r.to_json().items() if k != "wall_clock"}
        assert strip(a) == strip(b)

    def test_seed_changes_record(self, small_data):
        assert train(small_config(), small_data).epochs != train(small_config(seed=1), small_data).epochs

    def test_best_epoch_is_argmax_and_test_metric_recomputes(self, small_data):
        rec = train(small_config(epochs=6), small_data)
        vals = [e.val_accuracy for e in rec.epochs]
        assert rec.best_epoch == 1 + int(np.argmax(vals))  # earliest epoch wins ties
        assert rec.best_val_metric == max(vals)
        assert evaluate(rec.model, small_data["test_id"]).accuracy == rec.test_metric
        assert set(rec.test_metrics) == {"test_id", "test_ood"}

    def test_loss_metric_selects_lowest_val_loss(self, small_data):
        rec = train(small_config(epochs=6, metric="loss"), small_data)
        losses = [e.val_loss for e in rec.epochs]
        assert rec.best_epoch == 1 + int(np.argmin(losses))

    def test_beta_ramp_recorded(self, small_data):
        rec = train(small_config(beta0=0.2, epochs=7), small_data)
        assert [e.beta for e in rec.epochs] == [min(1.0, 0.2 * t) for t in range(1, 8)]

    def test_separable_toy_set(self):
        spec = SyntheticSpec(relevant_dims=16, shortcut_dims=0, noise_dims=0, margin=8.0, seed=0)
        data = generate(spec, {"train": 1024, "val": 64})
        rec = train(RunConfig(encoder=EncoderSpec(output_width=16), k=4, epochs=25, beta0=0.0), data)
        assert rec.epochs[-1].train_accuracy > 0.99

    def test_minibatches_above_threshold(self, small_data):
        cfg = small_config(epochs=1, full_batch_below=10, batch_size=16)
        rec = train(cfg, small_data)
        assert rec.model.steps == 4  # ceil(60 / 16)

    def test_subsampled_training_size(self, small_data):
        rec = train(small_config(epochs=1, train_size=21), small_data)
        assert rec.train_size == 21

    def test_non_finite_loss_marks_failure(self, small_data):
        huge = Dataset(small_data["train"].features * 1e305, small_data["train"].labels, 3)
        rec = train(small_config(), {**small_data, "train": huge})
        assert rec.status == "failed" and rec.failed_epoch == 1 and rec.error
        assert rec.test_metric is None

    def test_missing_split(self, small_data):
        with pytest.raises(ConfigError):
            train(small_config(), {"train": small_data["train"]})

    @pytest.mark.parametrize("reg", [RegularizerSpec(kind="dropout", p=0.2), RegularizerSpec(kind="wd_to_init", lam=0.1),
                                     RegularizerSpec(kind="mixout", p=0.1)])
    def test_baseline_regularizers_run(self, small_data, reg):
        cfg = RunConfig(mode="baseline", encoder=EncoderSpec(kind="mlp", output_width=6, hidden_widths=(8,)),
                        regularizer=reg, epochs=3, beta0=0.0)
        rec = train(cfg, small_data)
        assert rec.ok and 0.0 <= rec.test_metric <= 1.0


class TestContinuity:
    def test_vib_with_tiny_sigma_tracks_ablation(self, small_data):
        common = dict(encoder=EncoderSpec(output_width=8), k=3, epochs=10, num_samples=1, fixed_sigma=1e-8,
                      optimizer=OptimizerConfig(lr=1e-2))
        vib = train(RunConfig(mode="vib", beta0=0.0, **common), small_data)
        abl = train(RunConfig(mode="ablation_deterministic", beta0=0.0, **common), small_data)
        for a, b in zip(vib.epochs, abl.epochs):
            assert abs(a.train_loss - b.train_loss) < 1e-3
            assert abs(a.objective - b.objective) < 1e-3


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, small_data):
        rec = train(small_config(), small_data, checkpoint_path=tmp_path / "a.ckpt")
        ck = load_checkpoint(tmp_path / "a.ckpt")
        assert ck.config == small_config()
        state = rec.model.state()
        assert set(ck.tensors) == set(state)
        assert all(np.array_equal(ck.tensors[n], state[n]) for n in state)

    def test_save_load_save_identical_bytes(self, tmp_path, small_data):
        rec = train(small_config(), small_data, checkpoint_path=tmp_path / "a.ckpt")
        model = load_checkpoint(tmp_path / "a.ckpt").build_model()
        save_checkpoint(tmp_path / "b.ckpt", model)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_loaded_model_reproduces_test_metric(self, tmp_path, small_data):
        rec = train(small_config(), small_data, checkpoint_path=tmp_path / "a.ckpt")
        model = load_checkpoint(rec.checkpoint).build_model()
        assert evaluate(model, small_data["test_id"]).accuracy == rec.test_metric
        assert evaluate(model, small_data["test_ood"]).accuracy == rec.test_metrics["test_ood"]

    def test_mlp_encoder_round_trip(self, small_data):
        cfg = small_config(encoder=EncoderSpec(kind="mlp", output_width=5, hidden_widths=(7,)))
        rec = train(cfg, small_data)
        model = loads_checkpoint(dumps_checkpoint(rec.model)).build_model()
        assert np.array_equal(model.logits(small_data["val"].features).data,
                              rec.model.logits(small_data["val"].features).data)

    @settings(max_examples=20, deadline=None)
    @given(st.data())
    def test_truncation_is_an_integrity_error(self, data):
        blob = dumps_checkpoint(Model(small_config(), 8, 3))
        cut = data.draw(st.integers(0, len(blob) - 1))
        with pytest.raises(IntegrityError):
            loads_checkpoint(blob[:cut])

    def test_flipped_byte_is_detected(self):
        blob = bytearray(dumps_checkpoint(Model(small_config(), 8, 3)))
        blob[-5] ^= 0x01
        with pytest.raises(IntegrityError, match="hash"):
            loads_checkpoint(bytes(blob))

    def test_version_mismatch(self):
        blob = bytearray(dumps_checkpoint(Model(small_config(), 8, 3)))
        blob[8] = 99
        with pytest.raises(IntegrityError, match="version"):
            loads_checkpoint(bytes(blob))

    def test_bad_magic(self):
        with pytest.raises(IntegrityError, match="magic"):
            loads_checkpoint(b"not a checkpoint at all")


class TestRecord:
    def test_json_round_trip(self, small_data):
        rec = train(small_config(), small_data)
        back = RunRecord.from_json(rec.to_json())
        assert back == rec and back.run_config == small_config()
