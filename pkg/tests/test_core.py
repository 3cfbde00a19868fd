import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from principled_rerank.core import (
    ContractError,
    Dataset,
    ListSample,
    adjacent_swap,
    length_groups,
    ranked_items,
    scores_to_positions,
    validate_sample,
)

from reference import rank as reference_rank


def perms(n):
    return st.permutations(list(range(n)))


@st.composite
def scored_lists(draw, max_n=6):
    n = draw(st.integers(1, max_n))
    # a small value pool forces frequent ties
    scores = draw(st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.9, 1.0, -0.3]), min_size=n, max_size=n))
    tie_ref = draw(perms(n))
    return np.array(scores), np.array(tie_ref)


class TestScoresToPositions:
    def test_manual_argsort(self):
        assert scores_to_positions([0.2, 0.9, 0.5], [0, 1, 2]).tolist() == [2, 0, 1]

    def test_descending_scores_give_identity(self):
        assert scores_to_positions([5.0, 4.0, 3.0, 1.0], [0, 1, 2, 3]).tolist() == [0, 1, 2, 3]

    def test_tie_goes_to_lower_reference_position(self):
        assert scores_to_positions([0.5, 0.5], [1, 0]).tolist() == [1, 0]

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            scores_to_positions([0.1, 0.2, 0.3], [0, 1])

    def test_bad_tie_ref(self):
        with pytest.raises(ContractError):
            scores_to_positions([0.1, 0.2], [0, 0])

    def test_exhaustive_small_lists_are_permutations(self):
        rng = np.random.default_rng(0)
        for n in range(1, 7):
            for tie_ref in itertools.permutations(range(n)):
                scores = rng.choice([0.0, 0.5, 1.0], size=n)
                out = scores_to_positions(scores, tie_ref)
                assert sorted(out.tolist()) == list(range(n))
                assert out.tolist() == reference_rank(scores, tie_ref).tolist()

    @given(scored_lists())
    def test_matches_tuple_sort(self, case):
        scores, tie_ref = case
        assert scores_to_positions(scores, tie_ref).tolist() == reference_rank(scores, tie_ref).tolist()

    @given(scored_lists())
    def test_invariant_under_monotone_transform(self, case):
        scores, tie_ref = case
        base = scores_to_positions(scores, tie_ref)
        assert np.array_equal(scores_to_positions(np.exp(3 * scores) + 7, tie_ref), base)
        assert np.array_equal(scores_to_positions(np.tanh(scores), tie_ref), base)

    @given(st.integers(1, 8).flatmap(perms))
    def test_equal_scores_are_stable(self, pos):
        pos = np.array(pos)
        assert np.array_equal(scores_to_positions(np.full(pos.size, 0.3), pos), pos)


class TestAdjacentSwap:
    def test_first_pair(self):
        assert adjacent_swap([0, 1, 2], 0).tolist() == [1, 0, 2]

    def test_hand_trace(self):
        # items 1 and 2 hold ranks 0 and 1
        assert adjacent_swap([2, 0, 1], 0).tolist() == [2, 1, 0]

    @pytest.mark.parametrize("pos,k", [([0], 0), ([0, 1], 1), ([0, 1, 2], -1), ([1, 0, 2], 2)])
    def test_out_of_range(self, pos, k):
        with pytest.raises(ContractError):
            adjacent_swap(pos, k)

    @given(st.integers(2, 9).flatmap(lambda n: st.tuples(perms(n), st.integers(0, n - 2))))
    def test_involution_and_two_entry_difference(self, case):
        pos, k = np.array(case[0]), case[1]
        once = adjacent_swap(pos, k)
        assert sorted(once.tolist()) == list(range(pos.size))
        assert int((once != pos).sum()) == 2
        assert np.array_equal(adjacent_swap(once, k), pos)


def test_ranked_items_inverts_positions():
    pos = np.array([2, 0, 3, 1])
    order = ranked_items(pos)
    assert order.tolist() == [1, 3, 0, 2]
    assert np.array_equal(pos[order], np.arange(4))


class TestValidateSample:
    def good(self, **kw):
        args = dict(items=np.ones((3, 2)), user=np.zeros(1), labels=np.array([1.0, 0, 0]),
                     init_pos=np.array([0, 1, 2]))
        args.update(kw)
        return ListSample(**args)

    def test_pass(self):
        assert validate_sample(self.good()).ok

    def test_duplicate_rank(self):
        r = validate_sample(self.good(init_pos=np.array([0, 0, 1])))
        assert not r.ok and r.reason == "not a permutation"

    def test_non_binary_label(self):
        r = validate_sample(self.good(labels=np.array([2.0, 0, 0])))
        assert not r.ok and r.reason == "non-binary label"

    def test_does_not_mutate(self):
        s = self.good(init_pos=np.array([0, 0, 1]))
        before = s.init_pos.copy()
        validate_sample(s)
        assert np.array_equal(s.init_pos, before)

    def test_ragged_labels(self):
        assert not validate_sample(self.good(labels=np.array([1.0, 0])))


class TestDataset:
    def test_infers_widths_and_rejects_mismatch(self):
        a = ListSample.build(np.ones((3, 2)), [1.0], [1, 0, 0])
        b = ListSample.build(np.ones((2, 3)), [1.0], [1, 0])
        assert Dataset([a]).d_item == 2
        with pytest.raises(ContractError):
            Dataset([a, b])

    def test_invalid_sample_rejected(self):
        bad = ListSample.build(np.ones((2, 2)), None, [1, 0], [1, 1])
        with pytest.raises(ContractError, match="not a permutation"):
            Dataset([bad])

    def test_variable_lengths_allowed_unless_fixed(self):
        a = ListSample.build(np.ones((3, 2)), None, [1, 0, 0])
        b = ListSample.build(np.ones((2, 2)), None, [1, 0])
        assert len(Dataset([a, b])) == 2
        with pytest.raises(ContractError):
            Dataset([a, b], fixed_n=True)

    def test_length_groups_are_homogeneous_and_cover_everything(self):
        samples = [ListSample.build(np.ones((n, 1)), None, np.zeros(n), None, i)
                   for i, n in enumerate([3, 2, 3, 3, 2, 4, 3])]
        data = Dataset(samples)
        for rng in (None, np.random.default_rng(1)):
            batches = length_groups(data, 2, rng)
            assert sorted(i for b in batches for i in b) == list(range(len(samples)))
            for b in batches:
                assert len({samples[i].n for i in b}) == 1 and len(b) <= 2


@settings(max_examples=50)
@given(st.integers(1, 6).flatmap(perms))
def test_sample_equality_is_fieldwise(pos):
    n = len(pos)
    a = ListSample.build(np.arange(2 * n, dtype=float).reshape(n, 2), [0.5], np.zeros(n), pos, "x")
    b = ListSample.build(np.arange(2 * n, dtype=float).reshape(n, 2), [0.5], np.zeros(n), pos, "x")
    assert a == b
    c = ListSample.build(a.items + 1, [0.5], np.zeros(n), pos, "x")
    assert a != c
