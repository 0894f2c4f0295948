"""Correlation, dustbin-augmented log-domain Sinkhorn, match extraction and loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .features import GroundTruth
from .kernel import Linear, Tape, Var, as_var


@dataclass
class Assignment:
    """(n_a+1) x (n_b+1) log transport plan; last row/column are dustbins."""

    log_probs: Var
    iterations_run: int

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.value)

    @property
    def shape(self) -> tuple[int, int]:
        m, n = self.log_probs.shape
        return m - 1, n - 1


@dataclass
class MatchSet:
    pairs: np.ndarray  # (n, 2) int
    confidence: np.ndarray
    n_a: int
    n_b: int
    threshold: float = 0.2
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def matched_a(self) -> np.ndarray:
        mask = np.zeros(self.n_a, dtype=bool)
        mask[self.pairs[:, 0]] = True
        return mask

    @property
    def matched_b(self) -> np.ndarray:
        mask = np.zeros(self.n_b, dtype=bool)
        mask[self.pairs[:, 1]] = True
        return mask


def correlation(tape: Tape, xa: Var, xb: Var, proj: Linear) -> Var:
    if xa.shape[-1] != proj.in_dim or xb.shape[-1] != proj.in_dim:
        raise ShapeError(f"features {xa.shape}, {xb.shape} vs projection input {proj.in_dim}")
    return tape.matmul(proj(tape, xa), tape.transpose(proj(tape, xb), (1, 0)))


def _augment(tape: Tape, scores: Var, dustbin: Var) -> Var:
    m, n = scores.shape
    z = float(np.asarray(dustbin.value).reshape(()))
    out = np.full((m + 1, n + 1), z)
    out[:m, :n] = scores.value
    dshape = dustbin.shape

    def vjp(g):
        gz = g.sum() - g[:m, :n].sum()
        return g[:m, :n], np.full(dshape, gz)

    return tape.op(out, (scores, dustbin), vjp)


def marginals(m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column targets: 1 per point, the other side's count for the dustbin."""
    return np.append(np.ones(m), float(n)), np.append(np.ones(n), float(m))


def sinkhorn(tape: Tape, scores, dustbin, iters: int) -> Assignment:
    """Entropic transport on the dustbin-augmented score matrix.

    ``iters`` alternating row/column normalisations in log space; total mass
    is ``n_a + n_b`` so interior entries read as match probabilities.
    """
    scores, dustbin = as_var(scores), as_var(dustbin)
    if iters < 1:
        raise ConfigError("Sinkhorn needs at least one iteration")
    if scores.value.ndim != 2:
        raise ShapeError("scores must be 2-D")
    if not (np.all(np.isfinite(scores.value)) and np.all(np.isfinite(dustbin.value))):
        raise NumericalError("non-finite scores passed to Sinkhorn")
    m, n = scores.shape
    mu, nu = marginals(m, n)
    log_mu = np.log(mu)[:, None]
    log_nu = np.log(nu)[None, :]
    z = _augment(tape, scores, dustbin)
    u = Var(np.zeros((m + 1, 1)))
    v = Var(np.zeros((1, n + 1)))
    for _ in range(iters):
        u = tape.sub(log_mu, tape.logsumexp(tape.add(z, v), axis=1))
        v = tape.sub(log_nu, tape.logsumexp(tape.add(z, u), axis=0))
    log_p = tape.add(tape.add(z, u), v)
    return Assignment(log_p, iters)


def marginal_residual(probs: np.ndarray) -> float:
    m, n = probs.shape[0] - 1, probs.shape[1] - 1
    mu, nu = marginals(m, n)
    return float(max(np.abs(probs.sum(axis=1) - mu).max(), np.abs(probs.sum(axis=0) - nu).max()))


def extract_matches(assignment: Assignment | np.ndarray, threshold: float = 0.2, mutual: bool = True) -> MatchSet:
    """Keep (i, j) where j is row i's best interior column, i is column j's best row, and p >= threshold."""
    probs = assignment.probs if isinstance(assignment, Assignment) else np.asarray(assignment)
    inner = probs[:-1, :-1]
    m, n = inner.shape
    if m == 0 or n == 0:
        return MatchSet(np.zeros((0, 2), dtype=np.int64), np.zeros(0), m, n, threshold)
    best_j = inner.argmax(axis=1)
    rows = np.arange(m)
    conf = inner[rows, best_j]
    keep = conf >= threshold
    if mutual:
        best_i = inner.argmax(axis=0)
        keep &= best_i[best_j] == rows
    else:
        # one match per column: keep only the strongest row claiming it
        order = np.argsort(-conf, kind="stable")
        taken = np.zeros(n, dtype=bool)
        unique = np.zeros(m, dtype=bool)
        for i in order:
            if keep[i] and not taken[best_j[i]]:
                taken[best_j[i]] = True
                unique[i] = True
        keep = unique
    pairs = np.stack([rows[keep], best_j[keep]], axis=1).astype(np.int64)
    return MatchSet(pairs, conf[keep], m, n, threshold)


def matching_loss(tape: Tape, assignment: Assignment, gt: GroundTruth) -> Var:
    """Mean negative log-probability of the ground-truth cells.

    One mean over inlier cells, plus one mean per side over unmatched points'
    dustbin cells; empty groups are skipped.
    """
    log_p = assignment.log_probs
    m, n = assignment.shape
    pairs = gt.inlier_pairs
    if np.any(pairs[:, 0] >= m) or np.any(pairs[:, 1] >= n) or np.any(gt.unmatched_a >= m) or np.any(gt.unmatched_b >= n):
        raise ShapeError("ground truth indices exceed the assignment size")
    groups = []
    if len(pairs):
        groups.append((pairs[:, 0], pairs[:, 1]))
    if len(gt.unmatched_a):
        groups.append((gt.unmatched_a, np.full(len(gt.unmatched_a), n)))
    if len(gt.unmatched_b):
        groups.append((np.full(len(gt.unmatched_b), m), gt.unmatched_b))
    if not groups:
        raise ConfigError("ground truth has neither inliers nor unmatched points")
    total = None
    for rows, cols in groups:
        term = tape.scale(tape.mean(tape.pick(log_p, rows, cols)), -1.0)
        total = term if total is None else tape.add(total, term)
    return total
