import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.handlers.policy_handler import (
    IntervalPrompt,
    LinearSoftmaxPolicy,
    PolicySnapshot,
    PreferenceRecord,
    Response,
    SampleGroup,
    TabularPolicy,
    interval_features,
    load_policy,
    make_policy,
)
from tests.helpers import assert_gradients_close, finite_difference


def uniform_policy(vocab_size: int) -> TabularPolicy:
    return TabularPolicy([0], vocab_size=vocab_size)


def full_prompt(vocab_size: int) -> IntervalPrompt:
    return IntervalPrompt(0, 0, vocab_size - 1)


class TestLogProb:
    def test_uniform_vocab_ten(self):
        policy = uniform_policy(10)
        assert policy.log_prob(full_prompt(10), Response.single(3)) == pytest.approx(math.log(0.1), abs=1e-12)

    def test_two_token_row(self):
        policy = TabularPolicy([0], vocab_size=2, logits=np.array([[2.0, 0.0]]))
        assert policy.log_prob(full_prompt(2), Response.single(0)) == pytest.approx(-0.126928, abs=1e-6)

    def test_constant_rows_agree(self):
        prompt = full_prompt(6)
        ones = TabularPolicy([0], vocab_size=6, logits=np.ones((1, 6)))
        zeros = uniform_policy(6)
        assert ones.log_prob(prompt, Response.single(2)) == pytest.approx(zeros.log_prob(prompt, Response.single(2)), abs=1e-12)

    def test_multi_token_response_sums(self, rng, random_tabular, prompts):
        policy = random_tabular(rng)
        prompt = prompts[0]
        joint = policy.log_prob(prompt, Response((2, 5)))
        assert joint == pytest.approx(policy.log_prob(prompt, Response.single(2)) + policy.log_prob(prompt, Response.single(5)))

    def test_unknown_prompt(self):
        with pytest.raises(ValueError, match="unknown prompt: 9"):
            uniform_policy(4).log_prob(IntervalPrompt(9, 0, 1), Response.single(0))

    def test_token_out_of_vocab(self):
        with pytest.raises(ValueError, match="out of vocabulary"):
            uniform_policy(4).log_prob(full_prompt(4), Response.single(4))

    def test_interval_beyond_vocab(self):
        with pytest.raises(ValueError, match="exceeds vocab"):
            uniform_policy(4).log_prob(IntervalPrompt(0, 2, 6), Response.single(0))


class TestGradLogProb:
    def test_uniform_indicator_minus_softmax(self):
        policy = TabularPolicy([0, 1], vocab_size=4)
        grad = policy.grad_log_prob(IntervalPrompt(1, 0, 3), Response.single(2))
        np.testing.assert_allclose(grad[4:], [-0.25, -0.25, 0.75, -0.25])
        assert not grad[:4].any()

    def test_row_sums_to_zero(self, rng, random_tabular, prompts):
        policy = random_tabular(rng)
        grad = policy.grad_log_prob(prompts[1], Response.single(6))
        assert grad.reshape(2, -1)[1].sum() == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("kind", ["tabular", "linear"])
    def test_matches_finite_differences(self, kind, rng, random_tabular, random_linear, prompts):
        for _ in range(100):
            policy = random_tabular(rng) if kind == "tabular" else random_linear(rng)
            prompt = prompts[int(rng.integers(2))]
            response = Response(tuple(rng.integers(0, 8, size=int(rng.integers(1, 3)))))
            numeric = finite_difference(lambda: policy.log_prob(prompt, response), policy.params)
            assert_gradients_close(policy.grad_log_prob(prompt, response), numeric)

    def test_accumulate_grad_is_weighted_sum(self, rng, random_tabular, prompts):
        policy = random_tabular(rng)
        responses = [Response.single(1), Response.single(4)]
        out = np.zeros(policy.num_params)
        policy.accumulate_grad(prompts[0], responses, [0.5, -2.0], out)
        expected = 0.5 * policy.grad_log_prob(prompts[0], responses[0]) - 2.0 * policy.grad_log_prob(prompts[0], responses[1])
        np.testing.assert_allclose(out, expected, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(shift=st.floats(min_value=-50, max_value=50, allow_nan=False), token=st.integers(0, 7))
def test_shift_invariance(shift, token):
    base = np.random.default_rng(7).normal(size=(1, 8))
    prompt = IntervalPrompt(0, 0, 7)
    a = TabularPolicy([0], vocab_size=8, logits=base)
    b = TabularPolicy([0], vocab_size=8, logits=base + shift)
    response = Response.single(token)
    assert a.log_prob(prompt, response) == pytest.approx(b.log_prob(prompt, response), abs=1e-10)
    np.testing.assert_allclose(a.grad_log_prob(prompt, response), b.grad_log_prob(prompt, response), atol=1e-10)
    np.testing.assert_allclose(a.predictive_distribution(prompt), b.predictive_distribution(prompt), atol=1e-10)


class TestDistributions:
    def test_uniform_vocab_five(self):
        np.testing.assert_allclose(uniform_policy(5).predictive_distribution(full_prompt(5)), np.full(5, 0.2))

    def test_log_counts(self):
        policy = TabularPolicy([0], vocab_size=4, logits=np.log([[1.0, 2.0, 3.0, 4.0]]))
        np.testing.assert_allclose(policy.predictive_distribution(full_prompt(4)), [0.1, 0.2, 0.3, 0.4], atol=1e-12)

    def test_exp_log_prob_matches_entries(self, rng, random_tabular, prompts):
        policy = random_tabular(rng)
        dist = policy.predictive_distribution(prompts[0])
        assert dist.sum() == pytest.approx(1.0, abs=1e-12)
        for token in range(8):
            assert math.exp(policy.log_prob(prompts[0], Response.single(token))) == pytest.approx(dist[token], rel=1e-12)

    def test_restricted_renormalizes_interval(self, rng, random_tabular, prompts):
        policy = random_tabular(rng)
        prompt = prompts[1]
        full = policy.predictive_distribution(prompt)[prompt.lo:prompt.hi + 1]
        np.testing.assert_allclose(policy.restricted_distribution(prompt), full / full.sum(), atol=1e-12)

    def test_restricted_survives_underflow(self):
        logits = np.zeros((1, 8))
        logits[0, 0] = 1000.0
        policy = TabularPolicy([0], vocab_size=8, logits=logits)
        restricted = policy.restricted_distribution(IntervalPrompt(0, 4, 7))
        np.testing.assert_allclose(restricted, np.full(4, 0.25))


class TestSample:
    def test_point_mass(self):
        logits = np.zeros((1, 6))
        logits[0, 4] = 1000.0
        policy = TabularPolicy([0], vocab_size=6, logits=logits)
        group = policy.sample(full_prompt(6), np.random.default_rng(0), 50)
        assert all(r.tokens == (4,) for r in group.responses)

    def test_same_seed_same_group(self):
        policy = uniform_policy(10)
        a = policy.sample(full_prompt(10), np.random.default_rng(3), 20)
        b = policy.sample(full_prompt(10), np.random.default_rng(3), 20)
        assert a == b

    def test_uniform_frequencies(self):
        group = uniform_policy(10).sample(full_prompt(10), np.random.default_rng(11), 100_000)
        counts = np.bincount([r.tokens[0] for r in group.responses], minlength=10)
        np.testing.assert_allclose(counts / 100_000, 0.1, atol=0.01)

    def test_count_must_be_positive(self):
        with pytest.raises(ValueError):
            uniform_policy(4).sample(full_prompt(4), np.random.default_rng(0), 0)


class TestSnapshot:
    def test_log_prob_equal_at_snapshot_time(self, rng, random_tabular, prompts):
        policy = random_tabular(rng)
        snapshot = policy.snapshot()
        response = Response.single(3)
        before = policy.log_prob(prompts[0], response)
        policy.params[:] += 1.0 * np.arange(policy.num_params)
        assert snapshot.log_prob(prompts[0], response) == before

    def test_snapshot_is_read_only(self, rng, random_tabular):
        snapshot = random_tabular(rng).snapshot()
        with pytest.raises(ValueError):
            snapshot.params[0] = 1.0

    def test_thaw_is_mutable_copy(self, rng, random_linear, prompts):
        snapshot = PolicySnapshot(random_linear(rng))
        policy = snapshot.thaw()
        policy.params[:] = 0.0
        assert snapshot.params.any()
        assert policy.log_prob(prompts[0], Response.single(2)) != snapshot.log_prob(prompts[0], Response.single(2))


class TestSerialization:
    @pytest.mark.parametrize("kind", ["tabular", "linear"])
    def test_save_and_load(self, kind, tmp_path, rng, random_tabular, random_linear, prompts):
        policy = random_tabular(rng) if kind == "tabular" else random_linear(rng)
        path = policy.save(tmp_path / f"{kind}.json")
        loaded = load_policy(path)
        assert loaded.kind == kind
        np.testing.assert_array_equal(loaded.params, policy.params)
        assert loaded.prompt_ids() == policy.prompt_ids()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_policy(tmp_path / "absent.json")

    def test_bad_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ValueError, match="Failed to parse"):
            load_policy(path)


class TestDomainTypes:
    def test_invalid_interval(self):
        with pytest.raises(ValueError):
            IntervalPrompt(0, 5, 4)

    def test_empty_group(self):
        with pytest.raises(ValueError, match="empty group"):
            SampleGroup(())

    def test_record_round_trip(self):
        record = PreferenceRecord(IntervalPrompt(3, 10, 15), SampleGroup.from_tokens([10, 12]),
                                  SampleGroup.from_tokens([13, 13]))
        assert PreferenceRecord.from_dict(record.to_dict()) == record
        assert record.to_dict()["chosen"] == [[10], [12]]

    def test_truncate(self):
        record = PreferenceRecord(IntervalPrompt(0, 0, 9), SampleGroup.from_tokens([1, 2, 3]),
                                  SampleGroup.from_tokens([4, 5, 6]))
        single = record.truncate(1)
        assert single.chosen.k == single.rejected.k == 1
        assert single.rejected.responses[0].tokens == (4,)

    def test_duplicate_prompt_ids(self):
        with pytest.raises(ValueError, match="duplicate"):
            TabularPolicy([1, 1], vocab_size=4)


class TestFeatures:
    def test_columns(self):
        feats = interval_features(IntervalPrompt(0, 2, 4), 7)
        assert feats.shape == (7, 5)
        np.testing.assert_array_equal(feats[:, 0], [0, 0, 1, 1, 1, 0, 0])
        np.testing.assert_array_equal(feats[:, 1], [1, 1, 0, 0, 0, 0, 0])
        np.testing.assert_array_equal(feats[:, 2], [0, 0, 0, 0, 0, 1, 1])
        np.testing.assert_allclose(feats[2:5, 3], [0.0, 0.5, 1.0])
        np.testing.assert_allclose(feats[:, 4], feats[:, 3] ** 2)

    def test_single_token_interval_has_no_offset(self):
        feats = interval_features(IntervalPrompt(0, 3, 3), 6)
        assert not feats[:, 3].any()

    def test_linear_generalizes_to_unseen_prompts(self):
        policy = LinearSoftmaxPolicy(vocab_size=16, weights=np.array([2.0, 0.0, 0.0, 0.0, 0.0]))
        dist = policy.predictive_distribution(IntervalPrompt(99, 5, 9))
        assert dist[5:10].sum() > dist[:5].sum() + dist[10:].sum()

    def test_make_policy_starts_uniform(self, prompts):
        for kind in ("tabular", "linear"):
            policy = make_policy(kind, prompts, vocab_size=8)
            np.testing.assert_allclose(policy.predictive_distribution(prompts[0]), np.full(8, 0.125))
        with pytest.raises(ValueError):
            make_policy("mlp", prompts, vocab_size=8)
