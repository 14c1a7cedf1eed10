import numpy as np
import pytest

from src.handlers.metrics_handler import out_of_interval_mass
from src.handlers.objective_handler import ObjectiveConfig, batch_objective, mdpo_loss
from src.handlers.policy_handler import (
    IntervalPrompt,
    PreferenceRecord,
    Response,
    SampleGroup,
    TabularPolicy,
)
from src.handlers.trainer_handler import (
    AdamState,
    BatchSampler,
    TrainConfig,
    TrainingAbortedError,
    adam_step,
    sgd_step,
    train,
)


def interval_records(count: int, vocab_size: int = 40) -> list:
    records = []
    for i in range(count):
        lo = 3 * i
        prompt = IntervalPrompt(i, lo, lo + 5)
        records.append(PreferenceRecord(
            prompt,
            SampleGroup.from_tokens([lo, lo + 1, lo + 2, lo + 3, lo + 5]),
            SampleGroup.from_tokens([lo + 4] * 5),
        ))
    return records


def tabular_for(records, vocab_size: int = 40) -> TabularPolicy:
    return TabularPolicy([r.prompt.id for r in records], vocab_size=vocab_size)


class TestOptimizerSteps:
    def test_adam_first_step_moves_by_lr(self):
        cfg = TrainConfig(learning_rate=0.1)
        params = np.zeros(3)
        grad = np.array([2.0, -0.5, 0.0])
        new_params, state = adam_step(params, grad, AdamState.fresh(3), cfg)
        np.testing.assert_allclose(new_params, [-0.1, 0.1, 0.0], atol=1e-6)
        assert state.step == 1

    def test_sgd(self):
        cfg = TrainConfig(optimizer="sgd", learning_rate=0.5)
        np.testing.assert_allclose(sgd_step(np.ones(2), np.array([1.0, -2.0]), cfg), [0.5, 2.0])

    def test_shape_mismatch(self):
        cfg = TrainConfig()
        with pytest.raises(ValueError, match="shape"):
            adam_step(np.zeros(3), np.zeros(2), AdamState.fresh(3), cfg)
        with pytest.raises(ValueError, match="shape"):
            sgd_step(np.zeros(3), np.zeros(2), cfg)


class TestBatchSampler:
    def test_epoch_covers_every_index(self):
        sampler = BatchSampler(10, 4, seed=0)
        seen = np.concatenate([sampler.next_batch() for _ in range(3)])
        assert sorted(seen.tolist()) == list(range(10))
        assert sampler.epoch == 1

    def test_same_seed_same_batches(self):
        a, b = BatchSampler(20, 3, seed=5), BatchSampler(20, 3, seed=5)
        for _ in range(15):
            np.testing.assert_array_equal(a.next_batch(), b.next_batch())


class TestTrain:
    def test_single_record_sgd_descends(self):
        records = interval_records(1)
        policy = tabular_for(records)
        ref = policy.snapshot()
        cfg = TrainConfig(optimizer="sgd", learning_rate=0.1, steps=1, batch_size=1, objective="mdpo",
                          objective_config=ObjectiveConfig(beta=1.0))
        before = mdpo_loss(policy, ref, records[0], cfg.objective_config).loss
        train(policy, ref, records, cfg)
        assert mdpo_loss(policy, ref, records[0], cfg.objective_config).loss < before

    def test_zero_learning_rate_keeps_params(self, rng, random_tabular, random_record):
        policy = random_tabular(rng)
        initial = policy.params.copy()
        cfg = TrainConfig(learning_rate=0.0, steps=5, batch_size=2, objective_config=ObjectiveConfig(beta=1.0))
        history = train(policy, policy.snapshot(), [random_record(rng, 2, 2) for _ in range(4)], cfg)
        np.testing.assert_array_equal(policy.params, initial)
        assert len(history.records) == 5

    def test_full_batch_loss_decreases(self):
        records = interval_records(4)
        policy = tabular_for(records)
        ref = policy.snapshot()
        config = ObjectiveConfig(beta=1.0)
        cfg = TrainConfig(optimizer="sgd", learning_rate=0.5, steps=20, batch_size=4, objective_config=config)
        history = train(policy, ref, records, cfg)
        losses = history.losses
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
        assert batch_objective(policy, ref, records, "mdpo", config).loss < losses[0]

    def test_deterministic(self, rng, random_tabular, random_record):
        records = [random_record(rng, 3, 3) for _ in range(6)]
        start = random_tabular(rng)
        cfg = TrainConfig(learning_rate=0.05, steps=12, batch_size=2, seed=4)
        a, b = start.copy(), start.copy()
        history_a = train(a, start.snapshot(), records, cfg)
        history_b = train(b, start.snapshot(), records, cfg)
        assert history_a.losses == history_b.losses
        np.testing.assert_array_equal(a.params, b.params)

    def test_snapshot_ref_is_unchanged(self):
        records = interval_records(2)
        policy = tabular_for(records)
        ref = policy.snapshot()
        saved = ref.params.copy()
        train(policy, ref, records, TrainConfig(learning_rate=0.1, steps=5, batch_size=2))
        np.testing.assert_array_equal(ref.params, saved)
        assert not np.array_equal(policy.params, saved)

    def test_anchor_limits_out_of_interval_mass(self):
        records = interval_records(3)
        prompts = [r.prompt for r in records]
        results = {}
        for nll_coeff in (0.0, 0.1):
            policy = tabular_for(records)
            cfg = TrainConfig(learning_rate=1e-2, steps=500, batch_size=3,
                              objective_config=ObjectiveConfig(beta=1.0, nll_coeff=nll_coeff))
            train(policy, policy.snapshot(), records, cfg)
            results[nll_coeff] = np.mean([out_of_interval_mass(policy, p) for p in prompts])
        assert results[0.0] > results[0.1]

    def test_sft_raises_target_probability(self):
        prompt = IntervalPrompt(0, 0, 9)
        policy = TabularPolicy([0], vocab_size=10)
        dataset = [(prompt, Response.single(3))] * 4
        train(policy, None, dataset, TrainConfig(objective="sft", learning_rate=0.1, steps=50, batch_size=4))
        assert policy.predictive_distribution(prompt).argmax() == 3

    def test_non_finite_aborts(self):
        records = interval_records(1)
        policy = tabular_for(records)
        ref = policy.snapshot()
        policy.params[0] = np.nan
        with pytest.raises(TrainingAbortedError) as excinfo:
            train(policy, ref, records, TrainConfig(steps=3, batch_size=1))
        assert excinfo.value.step == 1

    def test_mismatched_group_sizes_for_single_sample(self):
        records = interval_records(1)
        with pytest.raises(ValueError, match="k=1"):
            train(tabular_for(records), None, records, TrainConfig(objective="dpo"))

    def test_requires_reference(self):
        records = interval_records(1)
        with pytest.raises(ValueError, match="reference"):
            train(tabular_for(records), None, records, TrainConfig())

    def test_history_csv(self, tmp_path):
        records = interval_records(2)
        policy = tabular_for(records)
        history = train(policy, policy.snapshot(), records, TrainConfig(steps=3, batch_size=1))
        path = history.save_csv(tmp_path / "history.csv")
        assert path.read_text().splitlines()[0] == "step,loss,grad_norm"
        assert history.to_frame()["step"].tolist() == [1, 2, 3]


class TestTrainConfig:
    @pytest.mark.parametrize("kwargs", [
        {"optimizer": "rmsprop"},
        {"objective": "kto"},
        {"learning_rate": -1.0},
        {"steps": 0},
        {"batch_size": 0},
        {"betas": (1.0, 0.999)},
        {"epsilon": 0.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_from_dict_uses_method_defaults(self):
        cfg = TrainConfig.from_dict({"objective": "mipo", "steps": 7})
        assert cfg.steps == 7
        assert cfg.objective_config == ObjectiveConfig.for_method("mipo")

    def test_from_dict_nested_objective(self):
        cfg = TrainConfig.from_dict({"objective_config": {"beta": 2.0, "variance_correction": False}})
        assert cfg.objective_config.beta == 2.0
        assert not cfg.objective_config.variance_correction
