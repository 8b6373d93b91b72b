"""Exact set-function oracles and their sequential decomposition.

Each task maps a bag of class ids (0..9) to an integer label:

* US    unique sum: each class counts once, weighted by its value
* WTri  weighted triangular: class value times the triangular number of its count
* USS   unique sum plus a bonus of 10 for every pair in P with both classes present
* UC    number of distinct classes
* TriC  sum of triangular numbers of the counts
* Mult  product of all instance classes (classes 0 excluded; empty bag -> 1)

All of them are monotone over classes >= 1, so every instance has a
non-negative added value with respect to the instances seen before it.
`decompose` computes exactly those added values: the i-th entry is the label
of the first i instances minus the label of the first i-1, with the empty
prefix valued at 0 for every task. The entries always telescope back to the
full-bag label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TASK_KINDS = ("US", "WTri", "USS", "UC", "TriC", "Mult")
NUM_CLASSES = 10


def triangular(m: int) -> int:
    """m-th triangular number m(m+1)/2."""
    if m < 0:
        raise ValueError(f"triangular number undefined for m={m}")
    return m * (m + 1) // 2


@dataclass(frozen=True)
class ClassMultiset:
    """Per-class instance counts of a bag."""

    counts: tuple

    def __post_init__(self):
        if len(self.counts) != NUM_CLASSES:
            raise ValueError(f"need {NUM_CLASSES} counts, got {len(self.counts)}")
        if any(c < 0 for c in self.counts):
            raise ValueError(f"negative count in {self.counts}")

    @classmethod
    def from_classes(cls, classes) -> "ClassMultiset":
        counts = [0] * NUM_CLASSES
        for c in classes:
            c = int(c)
            if not 0 <= c < NUM_CLASSES:
                raise ValueError(f"class id {c} outside 0..{NUM_CLASSES - 1}")
            counts[c] += 1
        return cls(tuple(counts))

    @property
    def size(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class TaskSpec:
    """Task kind plus the data it needs: pair set P (USS) and sampling range."""

    kind: str
    pair_set: tuple = ()
    class_range: tuple = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.class_range is None:
            low = 1 if self.kind == "Mult" else 0
            object.__setattr__(self, "class_range", (low, NUM_CLASSES - 1))
        low, high = self.class_range
        if not (0 <= low <= high <= NUM_CLASSES - 1):
            raise ValueError(f"bad class range {self.class_range}")
        if self.kind == "Mult" and low < 1:
            raise ValueError("Mult must not sample class 0 (breaks monotonicity)")
        pairs = tuple(tuple(int(c) for c in p) for p in self.pair_set)
        for a, b in pairs:
            if not (0 <= a < b <= NUM_CLASSES - 1):
                raise ValueError(f"pair {(a, b)} is not an unordered class pair with a < b")
        if len(set(pairs)) != len(pairs):
            raise ValueError("pair set contains duplicates")
        if pairs and self.kind != "USS":
            raise ValueError(f"pair set only applies to USS, not {self.kind}")
        object.__setattr__(self, "pair_set", pairs)


def _to_multiset(bag) -> ClassMultiset:
    if isinstance(bag, ClassMultiset):
        return bag
    return ClassMultiset.from_classes(bag)


def eval_task(task: TaskSpec, bag) -> int:
    """Integer label of `bag` (a ClassMultiset or iterable of class ids)."""
    ms = _to_multiset(bag)
    counts = ms.counts
    if task.kind == "US":
        return sum(c for c in range(NUM_CLASSES) if counts[c] > 0)
    if task.kind == "WTri":
        return sum(c * triangular(counts[c]) for c in range(NUM_CLASSES))
    if task.kind == "USS":
        base = sum(c for c in range(NUM_CLASSES) if counts[c] > 0)
        bonus = sum(10 for a, b in task.pair_set if counts[a] > 0 and counts[b] > 0)
        return base + bonus
    if task.kind == "UC":
        return sum(1 for c in range(NUM_CLASSES) if counts[c] > 0)
    if task.kind == "TriC":
        return sum(triangular(counts[c]) for c in range(NUM_CLASSES))
    if task.kind == "Mult":
        if counts[0] > 0:
            raise ValueError("Mult is undefined for class 0 (non-monotone)")
        value = 1
        for c in range(1, NUM_CLASSES):
            value *= c ** counts[c]
        return value
    raise AssertionError(task.kind)


def decompose(task: TaskSpec, sequence) -> list:
    """Added value of each instance with respect to its predecessors.

    Entry i is label(first i instances) - label(first i-1 instances), the
    empty prefix counting as 0 for every task (so the first entry is the
    label of a singleton bag). The sum of the entries equals the label of
    the whole bag.
    """
    counts = [0] * NUM_CLASSES
    previous = 0
    added = []
    for c in sequence:
        c = int(c)
        if not 0 <= c < NUM_CLASSES:
            raise ValueError(f"class id {c} outside 0..{NUM_CLASSES - 1}")
        counts[c] += 1
        current = eval_task(task, ClassMultiset(tuple(counts)))
        added.append(current - previous)
        previous = current
    return added


MAX_PAIRS = NUM_CLASSES * (NUM_CLASSES - 1) // 2


def sample_pair_set(seed: int, count: int) -> tuple:
    """Draw `count` distinct unordered class pairs, uniformly, without replacement."""
    if not 0 <= count <= MAX_PAIRS:
        raise ValueError(f"pair count {count} outside 0..{MAX_PAIRS}")
    all_pairs = [(a, b) for a in range(NUM_CLASSES) for b in range(a + 1, NUM_CLASSES)]
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(all_pairs), size=count, replace=False)
    return tuple(sorted(all_pairs[i] for i in chosen))
