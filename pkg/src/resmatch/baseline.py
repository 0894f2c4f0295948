"""Mutual nearest neighbour + ratio test on raw descriptors."""

from __future__ import annotations

import numpy as np

from .assignment import MatchSet
from .features import FeatureSet


def nn_baseline(fs_a: FeatureSet, fs_b: FeatureSet, ratio: float = 0.8) -> MatchSet:
    """Mutual NN by dot product, kept when best/second-best distance < ``ratio``.

    Distances are ``sqrt(2 - 2 sim)`` for unit descriptors.  With fewer than
    two candidates on a side the ratio test is skipped.
    """
    sim = fs_a.descriptors @ fs_b.descriptors.T
    n_a, n_b = sim.shape
    best_j = sim.argmax(axis=1)
    best_i = sim.argmax(axis=0)
    rows = np.arange(n_a)
    keep = best_i[best_j] == rows
    conf = sim[rows, best_j]
    if ratio < 1.0 and n_a >= 2 and n_b >= 2:
        dist = np.sqrt(np.clip(2.0 - 2.0 * sim, 0.0, None))
        part = np.partition(dist, 1, axis=1)
        keep &= part[:, 0] < ratio * part[:, 1]
    pairs = np.stack([rows[keep], best_j[keep]], axis=1).astype(np.int64)
    return MatchSet(pairs, conf[keep], n_a, n_b, threshold=ratio)
