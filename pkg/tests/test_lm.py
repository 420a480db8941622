import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from padsd.lm import (
    EOS,
    GenerationParams,
    InvalidDistributionError,
    InvalidTokenError,
    SyntheticTaskSpec,
    adjust_distribution,
    constant_model,
    make_contexts,
    make_synthetic_pair,
    next_distribution,
    rollout,
    sample_token,
    uniform_model,
)

from oracles import nucleus_set

IDENTITY = GenerationParams()


def dirichlet(v, seed):
    return np.random.default_rng(seed).dirichlet(np.ones(v))


class TestNextDistribution:
    def test_uniform(self):
        m = uniform_model(5, order=2)
        np.testing.assert_allclose(next_distribution(m, [1, 2, 3]), np.full(5, 0.2))

    def test_order_zero_ignores_context(self):
        m = constant_model([0.7, 0.2, 0.1])
        for ctx in [(), (1,), (2, 2, 1)]:
            np.testing.assert_array_equal(next_distribution(m, ctx), [0.7, 0.2, 0.1])

    def test_order_one_reads_table_row(self):
        target, _ = make_synthetic_pair(SyntheticTaskSpec(vocab_size=4, order=1, seed=42))
        for t in range(4):
            np.testing.assert_array_equal(next_distribution(target, (3, 1, t)), target.table[t])

    def test_short_context_is_padded_with_eos(self):
        target, _ = make_synthetic_pair(SyntheticTaskSpec(vocab_size=3, order=2, seed=1))
        np.testing.assert_array_equal(next_distribution(target, (2,)), target.table[0 * 3 + 2])

    def test_invalid_token(self):
        m = uniform_model(3, order=1)
        with pytest.raises(InvalidTokenError):
            next_distribution(m, [0, 3])

    def test_deterministic(self):
        a, _ = make_synthetic_pair(SyntheticTaskSpec(vocab_size=4, order=2, seed=9))
        b, _ = make_synthetic_pair(SyntheticTaskSpec(vocab_size=4, order=2, seed=9))
        np.testing.assert_array_equal(a.table, b.table)
        np.testing.assert_array_equal(a.hidden_features((1, 2)), b.hidden_features((1, 2)))


class TestAdjustDistribution:
    def test_identity(self):
        p = np.array([0.5, 0.3, 0.2])
        np.testing.assert_allclose(adjust_distribution(p, IDENTITY), p, atol=1e-12)

    def test_top_k_one_is_argmax(self):
        out = adjust_distribution([0.5, 0.3, 0.2], GenerationParams(top_k=1))
        np.testing.assert_array_equal(out, [1.0, 0.0, 0.0])

    def test_top_p_boundary(self):
        # 0.5 alone falls short of 0.6, so the nucleus is {0, 1}
        out = adjust_distribution([0.5, 0.3, 0.2], GenerationParams(top_p=0.6))
        assert set(np.flatnonzero(out)) == nucleus_set([0.5, 0.3, 0.2], 0.6) == {0, 1}
        np.testing.assert_allclose(out, [0.625, 0.375, 0.0], atol=1e-12)

    def test_top_p_exact_coverage(self):
        out = adjust_distribution([0.5, 0.3, 0.2], GenerationParams(top_p=0.5))
        np.testing.assert_array_equal(out, [1.0, 0.0, 0.0])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 7), st.floats(0.05, 1.0))
    def test_nucleus_matches_enumeration(self, seed, v, top_p):
        p = dirichlet(v, seed)
        out = adjust_distribution(p, GenerationParams(top_p=top_p))
        ref = nucleus_set(p, top_p)
        # ties between equal probabilities can select a different but equal-mass set
        assert len(set(np.flatnonzero(out))) == len(ref)
        np.testing.assert_allclose(sorted(p[list(ref)]), sorted(p[np.flatnonzero(out)]), atol=1e-15)

    def test_temperature_scales_log_probs(self):
        p = np.array([0.6, 0.3, 0.1])
        out = adjust_distribution(p, GenerationParams(temperature=0.5))
        np.testing.assert_allclose(out, p**2 / (p**2).sum(), atol=1e-12)

    def test_order_temperature_then_top_k_then_top_p(self):
        p = np.array([0.4, 0.3, 0.2, 0.1])
        params = GenerationParams(temperature=2.0, top_k=3, top_p=0.5)
        scaled = np.sqrt(p) / np.sqrt(p).sum()
        top3 = scaled[:3] / scaled[:3].sum()
        keep = nucleus_set(top3, 0.5)
        expected = np.zeros(4)
        expected[list(keep)] = top3[list(keep)]
        np.testing.assert_allclose(adjust_distribution(p, params), expected / expected.sum(), atol=1e-12)

    def test_reasoning_parameters_valid(self):
        p = dirichlet(32, 3)
        out = adjust_distribution(p, GenerationParams(temperature=0.6, top_p=0.95, top_k=20))
        assert np.count_nonzero(out) <= 20
        assert abs(out.sum() - 1) < 1e-9

    def test_rejects_invalid_input(self):
        with pytest.raises(InvalidDistributionError):
            adjust_distribution([0.5, 0.6], IDENTITY)

    @settings(max_examples=200, deadline=None)
    @given(
        st.integers(0, 10_000),
        st.integers(2, 9),
        st.floats(0.1, 3.0),
        st.floats(0.01, 1.0),
        st.one_of(st.none(), st.integers(1, 9)),
    )
    def test_always_valid_distribution(self, seed, v, temp, top_p, top_k):
        out = adjust_distribution(dirichlet(v, seed), GenerationParams(temperature=temp, top_p=top_p, top_k=top_k))
        assert np.all(out >= 0)
        assert abs(out.sum() - 1.0) < 1e-9
        assert np.count_nonzero(out) >= 1


class TestSampleToken:
    def test_point_masses(self):
        rng = np.random.default_rng(0)
        assert all(sample_token(np.array([1.0, 0.0, 0.0]), rng) == 0 for _ in range(1000))
        assert all(sample_token(np.array([0.0, 1.0]), rng) == 1 for _ in range(1000))

    def test_fair_coin_frequency(self):
        # 10^6 draws: 0.005 is ~10 binomial standard deviations
        freqs = []
        for seed in range(3):
            rng = np.random.default_rng(seed)
            draws = [sample_token(np.array([0.5, 0.5]), rng) for _ in range(1_000_000 // 3)]
            freqs.append(1 - np.mean(draws))
        assert 0.495 <= np.mean(freqs) <= 0.505

    def test_deterministic_given_rng_state(self):
        p = dirichlet(6, 1)
        a = [sample_token(p, np.random.default_rng(5)) for _ in range(3)]
        b = [sample_token(p, np.random.default_rng(5)) for _ in range(3)]
        assert a == b

    def test_never_returns_zero_probability_token(self):
        p = np.array([0.0, 0.5, 0.0, 0.5, 0.0])
        rng = np.random.default_rng(2)
        assert {sample_token(p, rng) for _ in range(2000)} == {1, 3}


class TestRollout:
    def test_immediate_eos(self):
        m = constant_model([1.0, 0.0, 0.0])
        assert rollout(m, (1, 2), GenerationParams(max_len=5), np.random.default_rng(0)) == [EOS]

    def test_length_cap(self):
        m = constant_model([0.0, 0.5, 0.5])
        out = rollout(m, (), GenerationParams(max_len=3), np.random.default_rng(0))
        assert len(out) == 3 and EOS not in out

    def test_reproducible(self):
        target, _ = make_synthetic_pair(SyntheticTaskSpec(vocab_size=5, order=2, seed=3))
        params = GenerationParams(max_len=30, temperature=0.8)
        a = rollout(target, (1, 2), params, np.random.default_rng(11))
        b = rollout(target, (1, 2), params, np.random.default_rng(11))
        assert a == b


class TestSyntheticPair:
    def test_zero_perturbation_equal(self):
        t, d = make_synthetic_pair(SyntheticTaskSpec(vocab_size=4, order=1, perturbation=0.0, seed=5))
        np.testing.assert_array_equal(t.table, d.table)

    def test_full_perturbation_uniform(self):
        _, d = make_synthetic_pair(SyntheticTaskSpec(vocab_size=4, order=2, perturbation=1.0, seed=5))
        np.testing.assert_allclose(d.table, 0.25, atol=1e-15)

    def test_mixing_row_by_row(self):
        t, d = make_synthetic_pair(SyntheticTaskSpec(vocab_size=4, order=1, perturbation=0.3, seed=5))
        for row in range(4):
            expected = [0.7 * t.table[row, j] + 0.3 * 0.25 for j in range(4)]
            np.testing.assert_allclose(d.table[row], expected, atol=1e-15)

    def test_rows_are_distributions(self):
        t, d = make_synthetic_pair(SyntheticTaskSpec(vocab_size=6, order=2, perturbation=0.4, seed=8, eos_mass=0.05))
        for table in (t.table, d.table):
            assert np.all(table >= 0)
            np.testing.assert_allclose(table.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(t.table[:, EOS], 0.05)

    def test_hidden_features_fixed_dimension(self):
        t, _ = make_synthetic_pair(SyntheticTaskSpec(vocab_size=4, order=2, d_h=32, seed=1))
        feats = {tuple(t.hidden_features(ctx)) for ctx in [(1, 2), (3, 1, 2), (2, 2)]}
        assert all(len(f) == 32 for f in feats)
        # (1, 2) and (3, 1, 2) share the last two tokens
        assert len(feats) == 2

    def test_invalid_vocab(self):
        with pytest.raises(ValueError, match="vocab_size"):
            SyntheticTaskSpec(vocab_size=1)

    def test_spec_text_roundtrip(self):
        spec = SyntheticTaskSpec(vocab_size=5, order=2, perturbation=0.25, seed=7, task={"kind": "substring", "bigram": [2, 3]})
        assert SyntheticTaskSpec.loads(spec.dumps()) == spec
        assert SyntheticTaskSpec.loads(spec.dumps()).dumps() == spec.dumps()

    def test_contexts_avoid_eos_and_streams_differ(self):
        spec = SyntheticTaskSpec(vocab_size=4, n_contexts=50, context_len=4, seed=2)
        a, b = make_contexts(spec, 0), make_contexts(spec, 1)
        assert all(EOS not in c and len(c) == 4 for c in a)
        assert a != b
        assert a == make_contexts(spec, 0)
