import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from taskcodec.core import make_levels
from taskcodec.policy import (
    LevelTable,
    choose_by_measured,
    choose_levels,
    select_dynamic,
    sweep,
    sweep_rows,
)

LEVELS = make_levels((64, 32, 1), 1024)
L64, L32, L1 = LEVELS


def _preds(d):
    return [(lv, d.get(lv.cg, 0.0)) for lv in LEVELS]


def test_dynamic_examples():
    assert select_dynamic(_preds({64: 0.9, 32: 0.5}), 0.75).chosen == L32
    res = select_dynamic(_preds({64: 0.9, 32: 0.8}), 0.75)
    assert res.chosen == L1 and res.fallback_used
    res = select_dynamic(_preds({64: 0.1, 32: 0.05}), 0.75)
    assert res.chosen == L64 and not res.fallback_used


def test_dynamic_tie_qualifies():
    assert select_dynamic(_preds({64: 0.75, 32: 0.1}), 0.75).chosen == L64


def test_dynamic_errors():
    with pytest.raises(ValueError, match="missing level"):
        select_dynamic([(L64, 0.1), (L1, 0.0)], 0.75, levels=LEVELS)
    with pytest.raises(ValueError):
        select_dynamic(_preds({}), -0.1)


def test_oracle_examples():
    two = [L64, L1]
    assert choose_by_measured({64: 0.2, 1: 0.0}, two, 0.75).chosen == L64
    measured = {64: 1.0, 32: 0.6, 1: 0.1}
    assert choose_by_measured(measured, LEVELS, 0.75).chosen == L32
    assert choose_by_measured(measured, two, 0.75).chosen == L1


def _table(measured, predicted=None):
    n = len(next(iter(measured.values())))
    predicted = predicted if predicted is not None else measured
    return LevelTable(np.arange(n), list(LEVELS), measured, predicted)


def test_bound_zero_selects_identity():
    rng = np.random.default_rng(0)
    m = {cg: rng.uniform(0.01, 1, size=20) for cg in (64, 32, 1)}
    (b, rep), = sweep([0.0], _table(m), "oracle3")
    assert rep.avg_cg == 1.0 and rep.n_fallback == 20


def test_large_bound_selects_top_level():
    rng = np.random.default_rng(1)
    m = {cg: rng.uniform(0, 1, size=20) for cg in (64, 32, 1)}
    big = max(m[1].max() + max(m[64].max(), m[32].max()), 1.0)
    (_, rep), = sweep([big], _table(m), "oracle3")
    assert rep.avg_cg == 64.0


def test_sweep_validation():
    m = {cg: np.ones(3) for cg in (64, 32, 1)}
    with pytest.raises(ValueError, match="sorted"):
        sweep([0.5, 0.1], _table(m))
    with pytest.raises(ValueError, match="empty"):
        sweep([0.5], LevelTable(np.arange(0), list(LEVELS), {cg: np.zeros(0) for cg in (64, 32, 1)}, {}))
    with pytest.raises(ValueError, match="unknown policy"):
        sweep([0.5], _table(m), "oracle9")


def test_sweep_rows_fields():
    m = {64: np.array([0.5, 0.9]), 32: np.array([0.1, 0.8]), 1: np.array([0.0, 0.0])}
    rows = sweep_rows(sweep([0.75], _table(m), "oracle3"))
    # segment 0 takes cg64 (0.5); segment 1 falls back to identity (0.0)
    assert rows == [{"bound": 0.75, "policy": "oracle3", "avg_cg": 32.5, "effective_loss": pytest.approx(0.25),
                     "violation_rate": 0.0, "n_fallback": 1}]


losses = arrays(np.float64, st.integers(1, 25), elements=st.floats(0, 2))
bounds = st.lists(st.floats(0, 2), min_size=1, max_size=6).map(sorted)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_oracle_dominance_and_monotonicity(data):
    n = data.draw(st.integers(1, 25))
    col = arrays(np.float64, n, elements=st.floats(0, 2))
    m = {cg: data.draw(col) for cg in (64, 32, 1)}
    bs = data.draw(bounds)
    table = _table(m)
    prev3 = prev2 = None
    for b in bs:
        c3, c2 = choose_levels(table, b, "oracle3"), choose_levels(table, b, "oracle2")
        assert np.all(c3 >= c2)
        if prev3 is not None:
            assert np.all(c3 >= prev3) and np.all(c2 >= prev2)
        prev3, prev2 = c3, c2
        # violations only when even the identity level exceeds the bound
        chosen_loss = np.array([m[cg][i] for i, cg in enumerate(c3)])
        assert np.all((chosen_loss <= b) | (m[1] > b))
    r3 = [r.avg_cg for _, r in sweep(bs, table, "oracle3")]
    r2 = [r.avg_cg for _, r in sweep(bs, table, "oracle2")]
    assert all(a >= c for a, c in zip(r3, r2))
    assert all(y >= x for x, y in zip(r3, r3[1:]))


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 2), st.floats(0, 2), st.floats(0, 2))
def test_dynamic_is_pure_and_obeys_rule(p64, p32, bound):
    a = select_dynamic(_preds({64: p64, 32: p32}), bound)
    b = select_dynamic(_preds({64: p64, 32: p32}), bound)
    assert a == b
    expected = 64 if p64 <= bound else 32 if p32 <= bound else 1
    assert a.chosen.cg == expected
    assert a.fallback_used == (expected == 1)


def test_dynamic_uses_predictions_not_measurements():
    measured = {64: np.array([5.0]), 32: np.array([5.0]), 1: np.array([0.0])}
    predicted = {64: np.array([0.1]), 32: np.array([0.1]), 1: np.array([0.0])}
    table = _table(measured, predicted)
    assert choose_levels(table, 0.75, "dynamic")[0] == 64
    assert choose_levels(table, 0.75, "oracle3")[0] == 1


def test_table_sorted_by_id():
    t = LevelTable(np.array([3, 1, 2]), list(LEVELS), {cg: np.array([30.0, 10.0, 20.0]) for cg in (64, 32, 1)}, {})
    np.testing.assert_array_equal(t.ids, [1, 2, 3])
    np.testing.assert_array_equal(t.measured[64], [10.0, 20.0, 30.0])


def test_oracle_effective_loss_can_fall_as_bound_rises():
    # one segment: identity is infeasible at 0.4, cg64 becomes feasible at 0.5 with a lower loss
    m = {64: np.array([0.5]), 32: np.array([0.9]), 1: np.array([0.8])}
    (_, lo), (_, hi) = sweep([0.4, 0.5], _table(m), "oracle3")
    assert (lo.avg_cg, hi.avg_cg) == (1.0, 64.0)
    assert hi.effective_loss < lo.effective_loss


def test_oracle_avoids_violation_when_a_compressed_level_beats_identity():
    # identity exceeds the bound, yet cg64 is feasible: no violation
    m = {64: np.array([0.5, 0.9]), 32: np.array([0.9, 0.95]), 1: np.array([0.8, 0.7])}
    t = _table(m)
    for kind in ("oracle2", "oracle3"):
        [(_, r)] = sweep([0.6], t, kind)
        assert round(r.violation_rate * r.n_segments) == 1
    assert int(np.sum(m[1] > 0.6)) == 2
