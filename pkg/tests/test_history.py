import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stalemp.history import HistoryStore, log_staleness


def store(g_thres=math.inf):
    x = np.arange(12, dtype=float).reshape(4, 3)
    return HistoryStore(x, [3, 2, 2], g_thres)


def test_initial_state():
    s = store()
    assert np.array_equal(s.embeddings[0], np.arange(12.0).reshape(4, 3))
    assert all(not e.any() for e in s.embeddings[1:])
    assert all(not g.any() for g in s.grad_norm)
    assert all(not u.any() for u in s.last_update)


def test_layer_dims_must_match_features():
    with pytest.raises(ValueError):
        HistoryStore(np.ones((2, 3)), [4, 2])


def test_push_pull_round_trip_returns_copies():
    s = store()
    s.tick()
    s.push(1, [0, 2], np.array([[1.0, 2.0], [3.0, 4.0]]))
    rows, rec = s.pull(1, [2, 0])
    assert rows.tolist() == [[3.0, 4.0], [1.0, 2.0]]
    assert rec.persistence.tolist() == [0, 0] and rec.layer == 1
    rows[0, 0] = 99.0
    assert s.embeddings[1][2, 0] == 3.0


def test_push_validation():
    s = store()
    with pytest.raises(ValueError):
        s.push(0, [0], np.zeros((1, 3)))
    with pytest.raises(ValueError):
        s.push(1, [0], np.zeros((1, 3)))
    s.push(1, [0], np.zeros((1, 2)), iteration=5)
    with pytest.raises(ValueError):
        s.push(1, [0], np.zeros((1, 2)), iteration=4)
    with pytest.raises(IndexError):
        s.pull(3, [0])


def test_persistence_counts_iterations():
    s = store()
    s.tick()
    s.push(1, [1], np.ones((1, 2)))
    for _ in range(3):
        s.tick()
    assert s.persistence(1, [0, 1]).tolist() == [4, 3]
    assert s.persistence(0, [0, 1]).tolist() == [0, 0]


def test_grad_norms_overwrite():
    s = store()
    s.record_grad_norms(1, [0, 1], np.array([[3.0, 4.0], [0.0, 1.0]]))
    s.record_grad_norms(1, [0], np.array([[0.0, 2.0]]))
    assert s.grad_norm[1][:2].tolist() == [2.0, 1.0]
    with pytest.raises(ValueError):
        s.record_grad_norms(1, [0, 1], np.zeros((1, 2)))


def test_eviction():
    s = store(g_thres=1)
    s.tick()
    s.push(1, [0, 1], np.ones((2, 2)))
    s.tick()
    s.tick()
    s.push(1, [1], np.ones((1, 2)))
    # persistence: node0 = 2, node1 = 0, nodes 2/3 = 3
    assert s.evict_overdue([0, 1, 2, 3], layer=1).tolist() == [1]
    assert s.evict_overdue([0, 1, 2, 3], layer=0).tolist() == [0, 1, 2, 3]
    assert store().evict_overdue([0, 3]).tolist() == [0, 3]


def test_warm_start_copies_exact():
    s = store()
    exact = [None, np.full((4, 2), 2.0), np.full((4, 2), 3.0)]
    s.warm_start(exact)
    assert (s.embeddings[1] == 2.0).all() and (s.embeddings[2] == 3.0).all()


def test_log_staleness():
    assert log_staleness(0.0) == 0.0
    assert log_staleness(math.e - 1) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        log_staleness([-1e-9])


@given(st.floats(0, 1e6), st.floats(0, 1e6))
def test_log_staleness_monotone(a, b):
    lo, hi = sorted((a, b))
    assert log_staleness(lo) <= log_staleness(hi)
