import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from entrgi.errors import InvalidInputError, InvalidParameterError
from entrgi.reward import (EmbeddingTable, MLPReward, PrototypeReward, QuadraticReward, ScaledReward,
                           build_embedding_table, check_reward_gradient, score_discrete, soft_embedding)


class TestEmbeddingTable:
    def test_deterministic(self):
        assert np.array_equal(build_embedding_table(10, 4, seed=3).rows, build_embedding_table(10, 4, seed=3).rows)
        assert not np.array_equal(build_embedding_table(10, 4, seed=3).rows, build_embedding_table(10, 4, 4).rows)

    def test_unit_norm(self):
        t = build_embedding_table(30, 5, seed=1, unit_norm=True)
        np.testing.assert_allclose(np.linalg.norm(t.rows, axis=1), 1.0, atol=1e-9)

    def test_smallest(self):
        t = build_embedding_table(2, 1, seed=0)
        assert t.rows.shape == (2, 1) and t.rows[0, 0] != t.rows[1, 0]

    def test_bad_sizes(self):
        with pytest.raises(InvalidParameterError):
            build_embedding_table(1, 4)
        with pytest.raises(InvalidParameterError):
            build_embedding_table(4, 0)

    def test_rejects_duplicate_rows(self):
        with pytest.raises(InvalidInputError):
            EmbeddingTable([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            EmbeddingTable([[1.0, np.nan], [0.0, 1.0]])

    def test_snapshot_round_trip_is_byte_stable(self, tmp_path):
        t = build_embedding_table(12, 3, seed=8, unit_norm=True)
        t.save(tmp_path / "e.txt")
        back = EmbeddingTable.load(tmp_path / "e.txt")
        assert np.array_equal(back.rows, t.rows)
        assert back.dumps() == t.dumps() == build_embedding_table(12, 3, seed=8, unit_norm=True).dumps()
        assert back.seed == 8 and back.unit_norm


class TestSoftEmbedding:
    rows = np.array([[1.0, 0.0], [0.0, 1.0]])

    def test_one_hot_vertex(self):
        t = build_embedding_table(6, 3)
        q = np.zeros(6)
        q[4] = 1.0
        assert np.array_equal(soft_embedding(q, t), t.rows[4])

    def test_midpoint(self):
        np.testing.assert_allclose(soft_embedding([0.5, 0.5], EmbeddingTable(self.rows)), [0.5, 0.5])

    def test_uniform_is_column_mean(self):
        t = build_embedding_table(9, 4, seed=2)
        np.testing.assert_allclose(soft_embedding(np.full(9, 1 / 9), t), t.rows.mean(axis=0), atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            soft_embedding([0.5, 0.5, 0.0], EmbeddingTable(self.rows))

    @given(st.integers(0, 2**32 - 1), st.floats(0, 1))
    def test_linear_in_q(self, seed, a):
        rng = np.random.default_rng(seed)
        t = build_embedding_table(7, 3)
        q1, q2 = rng.dirichlet(np.ones(7)), rng.dirichlet(np.ones(7))
        np.testing.assert_allclose(soft_embedding(a * q1 + (1 - a) * q2, t),
                                   a * soft_embedding(q1, t) + (1 - a) * soft_embedding(q2, t), atol=1e-12)


class TestModels:
    def test_quadratic_optimum(self):
        t = build_embedding_table(10, 4)
        tokens = [3, 1, 4, 1, 5]
        model = QuadraticReward(t.rows[tokens])
        assert score_discrete(tokens, t, model) == 0.0
        assert score_discrete([0, 1, 4, 1, 5], t, model) < 0

    def test_prototype_orthogonal(self):
        t = EmbeddingTable([[0.0, 1.0], [0.0, -2.0]])
        assert score_discrete([0, 1, 1], t, PrototypeReward([3.0, 0.0])) == 0.0

    def test_prototype_gradient_is_p_over_L(self):
        m = PrototypeReward([3.0, 4.0])
        np.testing.assert_allclose(m.input_gradient(np.zeros((5, 2))), np.tile([0.6, 0.8], (5, 1)) / 5)

    def test_zero_prototype(self):
        with pytest.raises(InvalidParameterError):
            PrototypeReward([0.0, 0.0])

    def test_score_equals_value_of_hard_rows(self):
        t = build_embedding_table(20, 6, seed=4)
        tokens = np.array([5, 0, 19, 7])
        for m in (MLPReward.from_seed(6, 8, 1), PrototypeReward(np.ones(6)), QuadraticReward(np.ones((4, 6)))):
            assert score_discrete(tokens, t, m) == m.value(t.rows[tokens])

    def test_score_rejects_mask(self):
        t = build_embedding_table(5, 2)
        with pytest.raises(InvalidInputError):
            score_discrete([0, 5], t, PrototypeReward([1.0, 0.0]))

    def test_shape_checked(self):
        with pytest.raises(InvalidInputError):
            PrototypeReward([1.0, 0.0]).value(np.zeros((3, 3)))

    def test_scaled(self):
        base = MLPReward.from_seed(3, 4, 0)
        e = np.random.default_rng(0).normal(size=(4, 3))
        s = ScaledReward(base, 8.0)
        assert s.value(e) == 8.0 * base.value(e)
        np.testing.assert_array_equal(s.input_gradient(e), 8.0 * base.input_gradient(e))

    def test_mlp_snapshot_round_trip(self, tmp_path):
        m = MLPReward.from_seed(5, 7, seed=11)
        m.save(tmp_path / "m.txt")
        back = MLPReward.loads((tmp_path / "m.txt").read_text())
        assert back.seed == 11
        np.testing.assert_array_equal(back.W1, m.W1)
        assert back.dumps() == m.dumps()


class TestGradientChecks:
    def test_quadratic(self):
        t = build_embedding_table(8, 4)
        rep = check_reward_gradient(QuadraticReward(t.rows[[0, 1, 2]]), 3, 4, trials=10)
        assert rep.passed(1e-6) and rep.trials == 10

    def test_prototype(self):
        assert check_reward_gradient(PrototypeReward(np.arange(1.0, 5.0)), 6, 4, trials=10).passed(1e-10)

    def test_mlp_100_trials(self):
        rep = check_reward_gradient(MLPReward.from_seed(8, 32, 3), 5, 8, trials=100, seed=1)
        assert rep.passed(1e-4)

    @pytest.mark.parametrize("K,d,L", list(itertools.product((8, 50), (4, 16), (4, 16))))
    def test_every_model_on_grid(self, K, d, L):
        t = build_embedding_table(K, d, seed=K + d + L)
        models = [QuadraticReward(t.rows[np.arange(L) % K]), PrototypeReward(t.rows[0]),
                  MLPReward.from_seed(d, 32, L)]
        for m in models:
            assert check_reward_gradient(m, L, d, trials=3, seed=L).passed(1e-4)

    def test_failures_reported_not_raised(self):
        class Broken:
            def value(self, e, prompt_context=None):
                return np.nan

            def input_gradient(self, e, prompt_context=None):
                return np.zeros_like(e)

        rep = check_reward_gradient(Broken(), 2, 2, trials=2)
        assert not rep.passed(1.0) and len(rep.failures) >= 2

    def test_wrong_gradient_detected(self):
        class Wrong(QuadraticReward):
            def input_gradient(self, e, prompt_context=None):
                return super().input_gradient(e) * 1.01

        rep = check_reward_gradient(Wrong(np.zeros((2, 3))), 2, 3)
        assert not rep.passed(1e-4)
