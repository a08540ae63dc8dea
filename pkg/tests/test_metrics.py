from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pmae.metrics import MetricsError, MetricsLedger, compute_metrics


def brute_force(matrix):
    T = len(matrix)
    stages = []
    for t in range(T):
        total = Fraction(0)
        for i in range(t + 1):
            total += Fraction(matrix[i][t])
        stages.append(total / (t + 1))
    overall = Fraction(0)
    for a in stages:
        overall += a
    return [float(a) for a in stages], float(overall / T)


def random_matrix(rng, T, quantum=None):
    m = [[None] * T for _ in range(T)]
    for t in range(T):
        for i in range(t + 1):
            v = rng.random()
            m[i][t] = round(v * quantum) / quantum if quantum else v
    return m


def test_matches_brute_force_on_random_matrices():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        T = int(rng.integers(1, 21))
        m = random_matrix(rng, T, quantum=[None, 30, 1000][trial % 3])
        assert compute_metrics(m) == brute_force(m)


def test_small_examples():
    assert compute_metrics([[0.8]]) == ([0.8], 0.8)
    stages, mean = compute_metrics([[1.0, 0.5], [None, 0.7]])
    assert stages == [1.0, 0.6]
    assert mean == 0.8


def test_order_independent_rounding():
    # naive float summation depends on order; exact averaging does not
    m = [[0.1, 0.7, 0.2], [None, 0.2, 0.7], [None, None, 0.1]]
    perm = [[0.1, 0.7, 0.7], [None, 0.2, 0.1], [None, None, 0.2]]
    assert compute_metrics(m)[0][2] == compute_metrics(perm)[0][2]


def test_missing_entries():
    with pytest.raises(MetricsError):
        compute_metrics([])
    with pytest.raises(MetricsError):
        compute_metrics([[0.5, None], [None, 0.5]])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=6))
def test_one_task_identity(values):
    v = values[0]
    assert compute_metrics([[v]]) == ([v], v)


def test_ledger():
    led = MetricsLedger(3)
    assert led.completed == 0
    led.record(0, 0, 0.9)
    assert led.completed == 1
    assert led.average_accuracy() == 0.9
    led.record(0, 1, 0.5)
    assert led.completed == 1
    led.record(1, 1, 0.7)
    assert led.stage_accuracy() == [0.9, 0.6]
    with pytest.raises(MetricsError):
        led.record(2, 1, 0.3)
    with pytest.raises(MetricsError):
        led.record(0, 2, 1.5)
    d = led.to_dict()
    assert d["A_T"] == d["A_t"][-1] == 0.6
    assert d["accuracy_matrix"][2] == [None, None, None]
