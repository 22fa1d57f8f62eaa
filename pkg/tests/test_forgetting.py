"""Forgetting statistics, dataset compression, and the two-phase plan."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mest.errors import FeasibilityError, ShapeError
from mest.forgetting import (
    REMOVE_NOTHING, DatasetView, ForgettingLog, TwoPhasePlan,
    compress_dataset, forgetting_curve, recount_from_history, write_report_csv,
)


def feed(history):
    log = ForgettingLog(history.shape[1])
    for row in history:
        log.record_epoch(row)
    return log


def test_basic_forgetting_counts():
    history = np.array([
        [1, 0, 1, 0],
        [0, 0, 1, 1],
        [1, 0, 1, 0],
    ], dtype=bool)
    log = feed(history)
    assert log.f_count.tolist() == [1, 0, 0, 1]
    assert log.ever_correct.tolist() == [True, False, True, True]
    assert log.unforgettable_set() == {2}


def test_first_epoch_correct_is_learning_event():
    log = feed(np.array([[1, 0]], dtype=bool))
    assert log.learn_count.tolist() == [1, 0]
    assert log.f_count.tolist() == [0, 0]


def test_record_epoch_shape_check():
    log = ForgettingLog(4)
    with pytest.raises(ShapeError):
        log.record_epoch(np.ones(3, dtype=bool))


def test_unforgettable_requires_data():
    with pytest.raises(FeasibilityError):
        ForgettingLog(3).unforgettable_set()


def test_removal_sentinel_keeps_everything():
    log = feed(np.ones((3, 5), dtype=bool))
    assert log.removal_set(REMOVE_NOTHING) == set()
    view = compress_dataset(log, REMOVE_NOTHING)
    assert view.size == 5


def test_removal_threshold_zero_drops_unforgotten():
    history = np.array([[1, 1, 0], [1, 0, 0]], dtype=bool)
    log = feed(history)
    # example 0: never forgotten + ever correct -> removed at th=0
    # example 1: forgotten once -> kept; example 2: never correct -> kept
    assert log.removal_set(0) == {0}
    view = compress_dataset(log, 0)
    assert view.kept.tolist() == [1, 2]


def test_compress_all_removed_raises():
    log = feed(np.ones((2, 3), dtype=bool))
    with pytest.raises(FeasibilityError):
        compress_dataset(log, 5)


def test_state_round_trip():
    history = (np.random.default_rng(0).random((6, 20)) < 0.5)
    log = feed(history)
    log2 = ForgettingLog.from_state(log.state())
    assert np.array_equal(log.f_count, log2.f_count)
    assert np.array_equal(log.last_correct, log2.last_correct)
    assert log.epochs_observed == log2.epochs_observed


def test_manifest_round_trip(tmp_path):
    view = DatasetView(np.array([0, 2, 5], dtype=np.int64), th=1,
                       phase1_epochs=4, base_size=10)
    path = tmp_path / "view.txt"
    view.write_manifest(path, seed=9)
    back = DatasetView.read_manifest(path, base_size=10)
    assert back.kept.tolist() == [0, 2, 5]
    assert back.th == 1 and back.phase1_epochs == 4
    assert back.removed_fraction() == pytest.approx(0.7)


def test_two_phase_plan_bounds():
    plan = TwoPhasePlan(4, 0, 10)
    assert plan.should_compress(4) and not plan.should_compress(3)
    assert plan.recording(3) and not plan.recording(4)
    with pytest.raises(ValueError):
        TwoPhasePlan(10, 0, 10)


def test_forgetting_curve_monotone_growth_example():
    history = np.array([
        [0, 1, 0],
        [1, 1, 0],
        [1, 0, 1],
    ], dtype=bool)
    assert forgetting_curve(history) == [1, 2, 2]


def test_report_csv(tmp_path):
    log = feed(np.array([[1, 0], [0, 0]], dtype=bool))
    path = tmp_path / "report.csv"
    write_report_csv(log, path, removed={0})
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "example_id,ever_correct,f_count,learn_count,removed_flag"
    assert lines[1] == "0,1,1,1,1"
    assert lines[2] == "1,0,0,0,0"


@given(st.integers(0, 2 ** 31), st.integers(1, 12), st.integers(1, 30))
@settings(max_examples=60, deadline=None)
def test_incremental_matches_recount(seed, epochs, n):
    history = (np.random.default_rng(seed).random((epochs, n)) < 0.5)
    log = feed(history)
    f, learn, ever, unforgettable = recount_from_history(history)
    assert np.array_equal(log.f_count, f)
    assert np.array_equal(log.learn_count, learn)
    assert np.array_equal(log.ever_correct, ever)
    assert log.unforgettable_set() == unforgettable
