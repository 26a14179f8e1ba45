import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entrgi.core import entropy, softmax_temp
from entrgi.diffusion import (ConstantDenoiser, ContextTableDenoiser, SequenceState, Vocabulary, commit_step,
                              fit_context_table, generate_unguided, read_corpus, select_unmask_set, unguided_step,
                              write_corpus)
from entrgi.errors import ContractViolationError, InvalidInputError, InvalidParameterError
from entrgi.harness import TaskSpec, generate_corpus
from entrgi.rng import Stream, TrajectoryRNG, derive_key


def one_hot(K, v):
    q = np.zeros(K)
    q[v] = 1.0
    return q


class TestState:
    def test_vocabulary(self):
        assert Vocabulary(10, eos_id=3).mask_id == 10
        with pytest.raises(InvalidParameterError):
            Vocabulary(10, eos_id=10)

    def test_masked_positions_follow_tokens(self):
        z = SequenceState([5, 2, 5, 0], 2, 5)
        assert z.masked_positions.tolist() == [0, 2]
        assert z.n_masked == 2 and not z.is_complete()

    def test_tokens_read_only(self):
        z = SequenceState.all_masked(4, 4, 9)
        with pytest.raises(ValueError):
            z.tokens[0] = 1

    def test_rejects_out_of_range(self):
        with pytest.raises(InvalidInputError):
            SequenceState([0, 11], 1, 10)

    def test_equality_and_hash(self):
        a = SequenceState([1, 3, 3], 2, 3)
        b = SequenceState(np.array([1, 3, 3]), 2, 3)
        assert a == b and hash(a) == hash(b)
        assert a != SequenceState([1, 3, 3], 1, 3)


class TestSelect:
    def _q_with_entropies(self, target):
        # two-token rows with the requested entropies, found by bisection on p
        rows = []
        for h in target:
            lo, hi = 1e-12, 0.5
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                lo, hi = (mid, hi) if entropy([mid, 1 - mid]) < h else (lo, mid)
            rows.append([1 - lo, lo])
        return np.array(rows)

    def test_lowest_entropy(self):
        q = self._q_with_entropies([0.1, 0.5, 0.3])
        assert select_unmask_set(q, 1).tolist() == [0]

    def test_eos_goes_last(self):
        q = self._q_with_entropies([0.1, 0.5])
        # argmax of both rows is token 0; make row 1 point at token 1
        q[1] = q[1][::-1]
        assert select_unmask_set(q, 1, eos_deprioritize=True, eos_id=0).tolist() == [1]
        assert select_unmask_set(q, 1, eos_deprioritize=False, eos_id=0).tolist() == [0]

    def test_index_tie_break(self):
        q = np.full((4, 3), 1 / 3)
        assert select_unmask_set(q, 2).tolist() == [0, 1]
        assert select_unmask_set(q, 2, positions=np.array([3, 5, 8, 9])).tolist() == [3, 5]

    def test_k_too_large(self):
        with pytest.raises(InvalidParameterError):
            select_unmask_set(np.full((2, 3), 1 / 3), 3)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 6))
    def test_deterministic(self, seed, k):
        q = softmax_temp(np.random.default_rng(seed).normal(size=(6, 5)))
        a = select_unmask_set(q, k, True, 2)
        assert np.array_equal(a, select_unmask_set(q.copy(), k, True, 2))
        assert len(set(a.tolist())) == k


class TestCommit:
    def test_one_hot_is_deterministic(self):
        z = SequenceState.all_masked(3, 3, 10)
        q = np.stack([one_hot(10, 7)] * 3)
        for s in range(20):
            out = commit_step(z, q, [1], Stream(derive_key(s)))
            assert out.tokens.tolist() == [10, 7, 10] and out.t == 2

    def test_rejects_committed_position(self):
        z = SequenceState([1, 4, 4], 2, 4)
        with pytest.raises(ContractViolationError):
            commit_step(z, np.full((2, 4), 0.25), [0], Stream(derive_key(0)))

    def test_fixed_seed_repeatable(self):
        z = SequenceState.all_masked(5, 5, 6)
        q = softmax_temp(np.random.default_rng(0).normal(size=(5, 6)))
        a = commit_step(z, q, [2], Stream(derive_key(3)))
        b = commit_step(z, q, [2], Stream(derive_key(3)))
        assert a == b

    def test_counting(self):
        den = ConstantDenoiser(np.zeros(5))
        z = SequenceState.all_masked(4, 4, 5)
        rng = TrajectoryRNG(0)
        counts = [z.n_masked]
        while z.t > 0:
            prev = z
            z = unguided_step(z, den, 1, 1.0, rng)
            done = prev.tokens != prev.mask_id
            assert np.array_equal(z.tokens[done], prev.tokens[done])
            counts.append(z.n_masked)
        assert counts == [4, 3, 2, 1, 0]


class TestGenerate:
    def test_full_unmasking(self):
        z = generate_unguided(ConstantDenoiser(np.zeros(6)), L=8, T=8, k=1)
        assert z.t == 0 and z.is_complete()

    def test_k_two(self):
        z = generate_unguided(ConstantDenoiser(np.zeros(6)), L=8, T=4, k=2)
        assert z.is_complete()

    def test_deterministic_denoiser(self):
        logits = np.full(6, -1e3)
        logits[4] = 0.0
        z = generate_unguided(ConstantDenoiser(logits), L=6, T=6)
        assert z.tokens.tolist() == [4] * 6

    def test_same_seed_same_bytes(self):
        den = ConstantDenoiser(np.random.default_rng(1).normal(size=9))
        a = generate_unguided(den, 10, 10, rng=TrajectoryRNG(3, 1))
        b = generate_unguided(den, 10, 10, rng=TrajectoryRNG(3, 1))
        assert a.tokens.tobytes() == b.tokens.tobytes()

    def test_bad_schedule(self):
        with pytest.raises(InvalidParameterError):
            generate_unguided(ConstantDenoiser(np.zeros(3)), L=8, T=3, k=2)

    def test_temperature_scaling_invariance(self):
        # softmax(s psi / (s tau)) is the same distribution, so the same draws commit the same tokens
        psi = np.random.default_rng(2).normal(size=12)
        a = generate_unguided(ConstantDenoiser(psi), 8, 8, tau=0.7, rng=TrajectoryRNG(5))
        b = generate_unguided(ConstantDenoiser(2.0 * psi), 8, 8, tau=1.4, rng=TrajectoryRNG(5))
        assert a == b


class TestContextTable:
    def test_toy_corpus(self):
        den = fit_context_table([[0, 1, 0, 1]] * 100, alpha=1.0)
        assert int(np.argmax(den.logits_for(0, den.sentinel))) == 1
        z = SequenceState([0, 1, 0, 2], 1, 2)
        assert int(np.argmax(den.predict(z)[0])) == 1

    def test_large_alpha_uniform(self):
        den = fit_context_table([[0, 1, 0, 1]] * 100, alpha=1e15)
        q = softmax_temp(den.logits_for(0, den.sentinel))
        np.testing.assert_allclose(q, 0.5, atol=1e-9)

    def test_single_token_corpus(self):
        den = fit_context_table([[3] * 6] * 20, alpha=1e-12, K=5)
        z = SequenceState.all_masked(4, 4, 5)
        q = softmax_temp(den.predict(z))
        assert np.all(q[:, 3] > 1 - 1e-9)

    def test_empty_corpus(self):
        with pytest.raises(InvalidInputError):
            fit_context_table([])

    def test_bad_alpha(self):
        with pytest.raises(InvalidParameterError):
            fit_context_table([[0, 1]], alpha=0.0)

    def test_contexts_use_nearest_unmasked(self):
        den = fit_context_table([[0, 1, 2, 3]], K=4)
        z = SequenceState([4, 1, 4, 4, 3, 4], 4, 4)
        left, right = den.contexts(z)
        assert left.tolist() == [4, 1, 1, 3]
        assert right.tolist() == [1, 3, 3, 4]

    def test_converges_to_empirical_frequencies(self):
        task = TaskSpec(K=8, L=16, band=3, corpus_size=1000)
        corpus = generate_corpus(task, seed=4)
        den = fit_context_table(corpus, alpha=1e-9, K=8)
        # empirical conditionals straight from the corpus
        freq = {}
        for s in corpus:
            for i, tok in enumerate(s):
                a = s[i - 1] if i > 0 else 8
                b = s[i + 1] if i + 1 < len(s) else 8
                freq.setdefault((a, b), np.zeros(8))[tok] += 1
        worst = 0.0
        for (a, b), c in freq.items():
            tv = 0.5 * np.abs(softmax_temp(den.logits_for(a, b)) - c / c.sum()).sum()
            worst = max(worst, tv)
        assert sum(len(s) for s in corpus) >= 10_000
        assert worst <= 1e-3

    def test_snapshot_round_trip(self, tmp_path):
        den = fit_context_table(generate_corpus(TaskSpec(K=6, L=8, corpus_size=50)), alpha=0.5, K=6)
        den.save(tmp_path / "den.txt")
        back = ContextTableDenoiser.load(tmp_path / "den.txt")
        assert back.dumps() == den.dumps()
        np.testing.assert_array_equal(back.logits_for(np.arange(7), 6), den.logits_for(np.arange(7), 6))

    def test_snapshot_rejects_other_formats(self):
        with pytest.raises(InvalidInputError):
            ContextTableDenoiser.loads("something else\n")


def test_corpus_file_round_trip(tmp_path):
    corpus = [[1, 2, 3], [0, 0, 4, 5]]
    write_corpus(tmp_path / "c.txt", corpus)
    assert read_corpus(tmp_path / "c.txt") == corpus
