"""Forgetting-event bookkeeping and two-phase data-efficient training.

A forgetting event is a correct -> incorrect transition for one example
across consecutive epochs; a learning event is the reverse.  An example is
unforgettable when it has been correct at least once and never forgotten.
After a configurable first phase, examples that were ever correct and
forgotten at most ``th`` times are removed for the remainder of training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import FeasibilityError, ShapeError

REMOVE_NOTHING = -1  # sentinel threshold: keep the full dataset


class ForgettingLog:
    """Incremental per-example correctness statistics."""

    def __init__(self, num_examples):
        self.num_examples = num_examples
        self.epochs_observed = 0
        self.ever_correct = np.zeros(num_examples, dtype=bool)
        self.last_correct = np.zeros(num_examples, dtype=bool)
        self.f_count = np.zeros(num_examples, dtype=np.int64)
        self.learn_count = np.zeros(num_examples, dtype=np.int64)

    def record_epoch(self, correct):
        correct = np.asarray(correct, dtype=bool)
        if correct.shape != (self.num_examples,):
            raise ShapeError(
                f"expected correctness vector of length {self.num_examples}, "
                f"got shape {correct.shape}")
        if self.epochs_observed > 0:
            self.f_count += self.last_correct & ~correct
            self.learn_count += ~self.last_correct & correct
        else:
            # first observation: becoming correct counts as a learning event
            self.learn_count += correct
        self.ever_correct |= correct
        self.last_correct = correct
        self.epochs_observed += 1

    def unforgettable_set(self):
        if self.epochs_observed == 0:
            raise FeasibilityError("no epochs recorded yet")
        return set(np.flatnonzero(self.ever_correct & (self.f_count == 0)).tolist())

    def removal_set(self, th):
        """Examples dropped at threshold th (ever correct, f <= th)."""
        if th == REMOVE_NOTHING:
            return set()
        return set(np.flatnonzero(self.ever_correct & (self.f_count <= th)).tolist())

    def state(self):
        return {
            "epochs_observed": self.epochs_observed,
            "ever_correct": self.ever_correct.tolist(),
            "last_correct": self.last_correct.tolist(),
            "f_count": self.f_count.tolist(),
            "learn_count": self.learn_count.tolist(),
        }

    @classmethod
    def from_state(cls, state):
        log = cls(len(state["f_count"]))
        log.epochs_observed = state["epochs_observed"]
        log.ever_correct = np.asarray(state["ever_correct"], dtype=bool)
        log.last_correct = np.asarray(state["last_correct"], dtype=bool)
        log.f_count = np.asarray(state["f_count"], dtype=np.int64)
        log.learn_count = np.asarray(state["learn_count"], dtype=np.int64)
        return log


def recount_from_history(history):
    """Brute-force oracle: recompute counts from a full (E, N) 0/1 history."""
    history = np.asarray(history, dtype=bool)
    e, n = history.shape
    f_count = np.zeros(n, dtype=np.int64)
    learn = np.zeros(n, dtype=np.int64)
    if e:
        learn += history[0]
    for prev, cur in zip(history[:-1], history[1:]):
        f_count += prev & ~cur
        learn += ~prev & cur
    ever = history.any(axis=0)
    unforgettable = set(np.flatnonzero(ever & (f_count == 0)).tolist())
    return f_count, learn, ever, unforgettable


@dataclass
class DatasetView:
    """Kept example indices plus the provenance of the compression."""

    kept: np.ndarray
    th: int
    phase1_epochs: int
    base_size: int

    @property
    def size(self):
        return int(self.kept.size)

    def removed_fraction(self):
        return 1.0 - self.size / self.base_size

    def write_manifest(self, path, seed=0):
        lines = [f"# e1={self.phase1_epochs} th={self.th} seed={seed}\n"]
        lines += [f"{i}\n" for i in self.kept.tolist()]
        with open(path, "w") as fh:
            fh.writelines(lines)

    @classmethod
    def read_manifest(cls, path, base_size=None):
        with open(path) as fh:
            header = fh.readline().strip().lstrip("#").split()
            meta = dict(kv.split("=") for kv in header)
            kept = np.array([int(line) for line in fh if line.strip()], dtype=np.int64)
        return cls(kept, int(meta["th"]), int(meta["e1"]),
                   base_size if base_size is not None else kept.size)


def compress_dataset(log, th, phase1_epochs=0):
    """Drop easy examples (ever correct and forgotten at most th times)."""
    removed = log.removal_set(th)
    kept = np.array([i for i in range(log.num_examples) if i not in removed],
                    dtype=np.int64)
    if kept.size == 0:
        raise FeasibilityError("compression removed the entire dataset")
    return DatasetView(kept, th, phase1_epochs, log.num_examples)


@dataclass
class TwoPhasePlan:
    """Epoch hooks for one full-length run with mid-run compression."""

    phase1_epochs: int
    th: int
    tau_end: int

    def __post_init__(self):
        if not 0 < self.phase1_epochs < self.tau_end:
            raise ValueError("phase-1 epoch count must lie inside the run")

    def should_compress(self, tau):
        return tau == self.phase1_epochs

    def recording(self, tau):
        return tau < self.phase1_epochs


def two_phase_plan(e1, th, tau_end):
    return TwoPhasePlan(e1, th, tau_end)


def forgetting_curve(histories):
    """Per-epoch unforgettable counts from stacked correctness snapshots.

    ``histories`` is an (E, N) array; entry e of the result counts examples
    that are unforgettable judging by epochs [0..e].
    """
    histories = np.asarray(histories, dtype=bool)
    e, n = histories.shape
    ever = np.zeros(n, dtype=bool)
    last = np.zeros(n, dtype=bool)
    f_count = np.zeros(n, dtype=np.int64)
    out = []
    for i in range(e):
        cur = histories[i]
        if i:
            f_count += last & ~cur
        ever |= cur
        last = cur
        out.append(int((ever & (f_count == 0)).sum()))
    return out


def write_report_csv(log, path, removed=None):
    """CSV: example_id, ever_correct, f_count, learn_count, removed_flag."""
    removed = removed or set()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example_id", "ever_correct", "f_count",
                         "learn_count", "removed_flag"])
        for i in range(log.num_examples):
            writer.writerow([i, int(log.ever_correct[i]), int(log.f_count[i]),
                             int(log.learn_count[i]), int(i in removed)])
