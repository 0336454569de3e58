"""Oracle tests for the Hungarian assignment solver.

The independent oracle is brute force over all permutations (exact for the
sizes used here), so optimal costs are compared exactly, never by tolerance.
Optimal assignments themselves may tie, so tests compare costs, not perms.
"""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from notesetter.hungarian import assignment_cost, hungarian
from notesetter.rng import Rng


def brute_force_min_cost(cost: np.ndarray) -> float:
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n))
               for p in itertools.permutations(range(n)))


def test_empty_matrix():
    assert hungarian(np.zeros((0, 0))) == []


def test_single_cell():
    assert hungarian(np.array([[3.5]])) == [0]


def test_hand_worked_3x3():
    # [DERIVED] rows/cols worked by hand: the optimum picks 4+0+... no:
    # choices are permutations of [[4,1,3],[2,0,5],[3,2,2]]; enumerating all
    # six gives minimum 1+2+2 = 5 via (0->1, 1->0, 2->2).
    cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    assignment = hungarian(cost)
    assert sorted(assignment) == [0, 1, 2]
    assert assignment_cost(cost, assignment) == 5.0
    assert assignment == [1, 0, 2]


def test_identity_is_optimal_for_diagonal_reward():
    cost = np.full((4, 4), 10.0)
    np.fill_diagonal(cost, 0.0)
    assignment = hungarian(cost)
    assert assignment_cost(cost, assignment) == 0.0
    assert assignment == [0, 1, 2, 3]


def test_negative_costs():
    cost = np.array([[-1.0, -5.0], [-3.0, -2.0]])
    # [DERIVED] -5 + -3 = -8 beats -1 + -2 = -3.
    assignment = hungarian(cost)
    assert assignment_cost(cost, assignment) == -8.0


def test_ties_still_produce_valid_permutation():
    cost = np.zeros((5, 5))
    assignment = hungarian(cost)
    assert sorted(assignment) == list(range(5))
    assert assignment_cost(cost, assignment) == 0.0


def test_random_matrices_match_brute_force():
    rng = Rng(2121)
    for trial in range(60):
        n = int(rng.integers(6)[0]) + 1
        cost = rng.normal(n, n).reshape(n, n) * 3.0
        assignment = hungarian(cost)
        assert sorted(assignment) == list(range(n)), trial
        got = assignment_cost(cost, assignment)
        want = brute_force_min_cost(cost)
        assert got == pytest.approx(want, abs=1e-12), trial


def test_dummy_padded_rectangular():
    # Voice assignment pads an r x c block with a dummy cost into a square
    # (r+c) matrix; the solver must stay exact on that structure.
    rng = Rng(77)
    for trial in range(30):
        r = int(rng.integers(3)[0]) + 1
        c = int(rng.integers(3)[0]) + 1
        real = rng.normal(r, c).reshape(r, c)
        dummy = 0.7
        n = r + c
        cost = np.full((n, n), dummy)
        cost[:r, :c] = real
        assignment = hungarian(cost)
        got = assignment_cost(cost, assignment)
        want = brute_force_min_cost(cost)
        assert got == pytest.approx(want, abs=1e-12), trial


def test_rejects_non_square():
    with pytest.raises(ValueError):
        hungarian(np.zeros((2, 3)))


def test_rejects_non_finite():
    cost = np.array([[1.0, np.nan], [0.0, 1.0]])
    with pytest.raises(ValueError):
        hungarian(cost)
    cost2 = np.array([[np.inf, 1.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        hungarian(cost2)


def test_assignment_cost():
    cost = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert assignment_cost(cost, [1, 0]) == 5.0
    assert assignment_cost(cost, [0, 1]) == 5.0
