"""Shared test helpers."""

from __future__ import annotations

import numpy as np


def assert_non_increasing(seq, slack: float = 1e-10, label: str = "trace"):
    """Every step may go down or stay put; tiny float noise is tolerated."""
    arr = np.asarray(seq, dtype=np.float64)
    if arr.size < 2:
        return
    rises = np.diff(arr) > slack * (1.0 + np.abs(arr[:-1]))
    assert not rises.any(), (
        f"{label} increased at steps {np.flatnonzero(rises).tolist()}: {arr}")


def labels_match_up_to_permutation(found, truth) -> bool:
    """True if the two labelings induce the same partition of the users."""
    found = np.asarray(found)
    truth = np.asarray(truth)
    if found.shape != truth.shape:
        return False
    forward = {}
    backward = {}
    for f, t in zip(found.tolist(), truth.tolist()):
        if forward.setdefault(f, t) != t:
            return False
        if backward.setdefault(t, f) != f:
            return False
    return True
