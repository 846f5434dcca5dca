import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from most.core import HARD, Marginal, ShapeError, TransportPlan, make_uniform_marginal, plan_regularizer, validate_plan
from most.transport import (
    CurriculumSchedule,
    DegenerateInputError,
    OtConfig,
    assignment_oracle,
    round_to_polytope,
    schedule_marginal_penalties,
    snap_to_vertex,
    solve_ot,
    solve_ot_regularized,
    sparsify_plan,
    transport_objective,
)

U2 = make_uniform_marginal(2)


def _random_marginal(rng, k):
    w = rng.dirichlet(np.ones(k))
    w[-1] = 1.0 - w[:-1].sum()
    return Marginal(w)


def test_solve_ot_permutation_example():
    plan = solve_ot(np.array([[0.0, 1.0], [1.0, 0.0]]), U2, U2)
    assert np.allclose(plan.entries, [[0.5, 0.0], [0.0, 0.5]], atol=1e-6)


def test_solve_ot_constant_cost_keeps_product_plan():
    plan = solve_ot(np.full((2, 2), 3.0), U2, U2)
    assert np.allclose(plan.entries, 0.25, atol=1e-6)


def test_solve_ot_single_row():
    plan = solve_ot(np.array([[5.0, 1.0, 2.0]]), make_uniform_marginal(1), make_uniform_marginal(3))
    assert np.allclose(plan.entries, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-9)


def test_solve_ot_rejects_bad_input():
    with pytest.raises(ValueError):
        solve_ot(np.array([[np.nan, 0.0], [0.0, 0.0]]), U2, U2)
    with pytest.raises(ShapeError):
        solve_ot(np.zeros((3, 2)), U2, U2)


def test_non_convergence_is_flagged():
    rng = np.random.default_rng(0)
    u = make_uniform_marginal(6)
    plan = solve_ot(rng.random((6, 6)), u, u, OtConfig(outer_iters=1))
    assert not plan.converged
    assert validate_plan(plan, u, u, 1e-9).feasible


def test_solve_ot_beats_product_plan():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n, m = rng.integers(1, 8, size=2)
        c = rng.normal(size=(n, m))
        a, b = _random_marginal(rng, n), _random_marginal(rng, m)
        plan = solve_ot(c, a, b)
        assert (plan.entries * c).sum() <= (np.outer(a.weights, b.weights) * c).sum() + 1e-9
        assert validate_plan(plan, a, b, 1e-9).feasible


def test_oracle_equivalence_random_squares():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 7))
        c = rng.random((n, n))
        u = make_uniform_marginal(n)
        got = (solve_ot(c, u, u).entries * c).sum()
        ref = (assignment_oracle(c).entries * c).sum()
        worst = max(worst, abs(got - ref))
    assert worst <= 1e-6


def test_soft_beta_lets_columns_empty():
    # with the solution marginal free, each row goes to its cheapest column
    c = np.array([[0.0, 1.0, 1.0], [0.0, 1.0, 1.0]])
    a = Marginal(np.full(2, 0.5), 100.0)
    b = Marginal(np.full(3, 1 / 3), 0.0)
    plan = solve_ot(c, a, b)
    assert plan.entries[:, 1:].max() < 1e-6
    assert np.allclose(plan.entries.sum(axis=1), 0.5, atol=1e-2)


def test_regularized_tau_zero_matches_plain():
    rng = np.random.default_rng(5)
    c = rng.random((4, 3))
    a, b = make_uniform_marginal(4), make_uniform_marginal(3)
    assert solve_ot_regularized(c, a, b, 0.0) == solve_ot(c, a, b)


def test_regularized_examples():
    plan = solve_ot_regularized(np.zeros((2, 2)), U2, U2, 0.1)
    assert np.allclose(plan.entries, [[0.5, 0.0], [0.0, 0.5]], atol=1e-9)
    plan = solve_ot_regularized(np.array([[0.0, 10.0], [10.0, 0.0]]), U2, U2, 0.1)
    assert np.allclose(plan.entries, [[0.5, 0.0], [0.0, 0.5]], atol=1e-6)


def test_regularized_objective_and_rowmax_properties():
    rng = np.random.default_rng(8)
    for _ in range(30):
        n, m = int(rng.integers(2, 7)), int(rng.integers(2, 5))
        c = rng.random((n, m))
        a, b = make_uniform_marginal(n), make_uniform_marginal(m)
        tau = float(rng.uniform(0.05, 1.0))
        base = round_to_polytope(solve_ot(c, a, b), a, b)
        history: list[float] = []
        reg = solve_ot_regularized(c, a, b, tau, history=history)
        assert transport_objective(reg, c, tau) <= transport_objective(base, c, tau) + 1e-9
        assert -plan_regularizer(reg) >= -plan_regularizer(base) - 1e-9
        assert all(y <= x + 1e-12 for x, y in zip(history, history[1:]))


def test_round_examples():
    same = np.array([[0.5, 0.0], [0.0, 0.5]])
    assert np.array_equal(round_to_polytope(same, U2, U2).entries, same)
    out = round_to_polytope(np.array([[0.6, 0.0], [0.0, 0.4]]), U2, U2)
    assert np.allclose(out.entries, [[0.5, 0.0], [0.0, 0.5]], atol=1e-15)
    one = make_uniform_marginal(1)
    assert np.array_equal(round_to_polytope(np.array([[1.0]]), one, one).entries, [[1.0]])


def test_round_zero_mass():
    with pytest.raises(DegenerateInputError):
        round_to_polytope(np.zeros((2, 2)), U2, U2)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_round_is_exactly_feasible(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = _random_marginal(rng, n), _random_marginal(rng, m)
    p = rng.random((n, m)) * (rng.random((n, m)) > 0.3)
    if p.sum() == 0:
        p[0, 0] = 1.0
    out = round_to_polytope(p, a, b)
    assert validate_plan(out, a, b, 1e-12).feasible


def test_sparsity_on_random_instances():
    rng = np.random.default_rng(21)
    for _ in range(100):
        n, m = int(rng.integers(1, 11)), int(rng.integers(1, 11))
        c = rng.random((n, m))
        a, b = _random_marginal(rng, n), _random_marginal(rng, m)
        plan = round_to_polytope(solve_ot(c, a, b), a, b)
        assert (plan.entries > 1e-8).sum() <= n + m - 1


def test_sparsify_never_increases_objective_and_reaches_vertex():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n, m = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        a, b = _random_marginal(rng, n), _random_marginal(rng, m)
        start = TransportPlan(np.outer(a.weights, b.weights))
        c = rng.random((n, m))
        tau = float(rng.choice([0.0, 0.3]))
        out = sparsify_plan(start, c, tau)
        assert transport_objective(out, c, tau) <= transport_objective(start, c, tau) + 1e-12
        assert (out.entries > 0).sum() <= n + m - 1
        assert validate_plan(out, a, b, 1e-12).feasible


def test_snap_to_vertex_is_exact():
    rng = np.random.default_rng(4)
    n, m = 6, 3
    a, b = make_uniform_marginal(n), make_uniform_marginal(m)
    c = rng.random((n, m))
    snapped = snap_to_vertex(solve_ot(c, a, b), c, a, b)
    rep = validate_plan(snapped, a, b, 1e-15)
    assert rep.feasible
    # uniform 6 x 3 vertices are partitions: one nonzero per row
    assert (snapped.entries > 0).sum() == n


def test_assignment_oracle_examples():
    assert np.allclose(assignment_oracle(np.array([[0.0, 1.0], [1.0, 0.0]])).entries, np.eye(2) / 2)
    assert np.allclose(assignment_oracle(np.full((3, 3), 2.0)).entries, np.eye(3) / 3)
    with pytest.raises(ValueError):
        assignment_oracle(np.zeros((9, 9)))


def test_assignment_oracle_seed7():
    import itertools

    c = np.random.default_rng(7).random((3, 3))
    best = min(c[np.arange(3), list(p)].sum() for p in itertools.permutations(range(3)))
    assert (assignment_oracle(c).entries * c).sum() * 3 == pytest.approx(best)


def test_schedule_examples():
    sched = CurriculumSchedule(100, 100.0, "linear")
    assert schedule_marginal_penalties(0, sched) == (0.0, 100.0)
    assert schedule_marginal_penalties(100, sched) == (100.0, 0.0)
    assert schedule_marginal_penalties(50, sched) == (50.0, 50.0)
    assert schedule_marginal_penalties(3, CurriculumSchedule()) == (HARD, HARD)


def test_schedule_clamps_with_warning():
    sched = CurriculumSchedule(10, 1.0, "linear")
    with pytest.warns(UserWarning):
        assert schedule_marginal_penalties(12, sched) == (1.0, 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        OtConfig(proximal_weight=0)
    with pytest.raises(ValueError):
        OtConfig(inner_iters=0)
    with pytest.raises(ValueError):
        CurriculumSchedule(total_iters=0)
    with pytest.raises(ValueError):
        CurriculumSchedule(mode="cosine")


def test_transport_objective_soft_penalty():
    p = np.array([[0.5, 0.0], [0.0, 0.5]])
    a = Marginal(np.array([0.5, 0.5]), 2.0)
    assert transport_objective(p, np.zeros((2, 2)), 0.0, a, None) == pytest.approx(0.0)
    q = np.array([[0.25, 0.0], [0.0, 0.5]])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        val = transport_objective(q, np.zeros((2, 2)), 0.0, a, None)
    expected = 2.0 * (0.25 * np.log(0.5) - 0.75 + 1.0)
    assert val == pytest.approx(expected)


def test_rectangular_optimum_matches_linear_program():
    from scipy.optimize import linprog

    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(60):
        n, m = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        C = rng.random((n, m))
        a, b = _random_marginal(rng, n), _random_marginal(rng, m)
        rows = np.kron(np.eye(n), np.ones(m))
        cols = np.kron(np.ones(n), np.eye(m))
        lp = linprog(C.ravel(), A_eq=np.vstack([rows, cols]), b_eq=np.r_[a.weights, b.weights], method="highs")
        plan = solve_ot(C, a, b)
        assert validate_plan(plan, a, b, 1e-7).feasible
        worst = max(worst, float((plan.entries * C).sum()) - lp.fun)
    assert worst <= 1e-9


def test_truncated_solve_still_reaches_optimal_vertex():
    rng = np.random.default_rng(5)
    u = make_uniform_marginal(5)
    for _ in range(20):
        C = rng.random((5, 5))
        plan = solve_ot(C, u, u, OtConfig(outer_iters=3))
        best = assignment_oracle(C)
        assert not plan.converged
        assert (plan.entries * C).sum() == pytest.approx((best.entries * C).sum(), abs=1e-12)
        assert (plan.entries > 1e-8).sum() <= 9
