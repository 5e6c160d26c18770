"""Soft assignment probabilities and the trajectory alignment objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .flow import AnchorSet, FlowError, Trajectory
from .tensor import Tensor


class AlignmentError(RuntimeError):
    pass


@dataclass
class Pairing:
    """Index map: sample i of the trajectory batch is owned by anchor k[i].

    Many-to-one is allowed (several samples sharing one anchor)."""

    k: np.ndarray

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.int64)
        if self.k.ndim != 1:
            raise AlignmentError(f"pairing must be a 1-d index array, got shape {self.k.shape}")

    def validate(self, n_anchors: int):
        if self.k.size and (self.k.min() < 0 or self.k.max() >= n_anchors):
            raise AlignmentError(f"pairing indices out of range [0, {n_anchors})")


@dataclass
class AlignmentConfig:
    cutoff_u: int = 20
    use_log: bool = False


def _assignment_logits(s: Tensor, A: AnchorSet, t: float) -> Tensor:
    """Unnormalized log assignment weights of batch states against all anchors."""
    one_mt = 1.0 - t
    anchors = A.anchors
    row_s = T.sum_(T.mul(s, s), axis=1)
    row_a = T.sum_(T.mul(anchors, anchors), axis=1)
    cross = T.scalar_mul(T.matmul(s, T.transpose(anchors)), -2.0 * t)
    d2 = T.add_cols(T.add_rows(cross, T.scalar_mul(row_a, t * t)), row_s)
    logits = T.scalar_mul(d2, -1.0 / (2.0 * one_mt * one_mt))
    log_w = A.log_weights()
    if log_w is not None:
        logits = T.add_rows(logits, Tensor(log_w))
    return logits


def assignment_prob(s, t: float, A: AnchorSet, l: int) -> float:
    """P(a_l | s_t): responsibility of anchor l for state s at time t < 1."""
    if t >= 1.0:
        raise AlignmentError(f"assignment probability undefined at t={t} >= 1")
    if not 0 <= l < A.n:
        raise AlignmentError(f"anchor index {l} out of range [0, {A.n})")
    s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float64))
    if s.data.ndim == 1:
        s = T.reshape(s, (1, s.data.shape[0]))
    with T.no_grad():
        logits = _assignment_logits(s, A, float(t))
        lse = T.logsumexp(logits, axis=1)
    return float(np.exp(logits.data[0, l] - lse.data[0]))


def align_loss(
    X_anchors: AnchorSet,
    trajectories: Trajectory,
    pairing: Pairing,
    cfg: AlignmentConfig,
) -> Tensor:
    """Negated alignment objective, averaged over the trajectory batch.

    For each sample, takes the maximum assignment probability of its paired
    anchor over grid steps t_u..t_r (exact subgradient through the single
    maximizing step; ties break toward the latest step). The log variant
    maximizes log-probabilities instead.
    """
    grid = trajectories.grid
    r = grid.size
    if len(trajectories.states) != r:
        raise AlignmentError(f"trajectory has {len(trajectories.states)} states for {r} grid nodes")
    if not 1 <= cfg.cutoff_u <= r:
        raise AlignmentError(f"cutoff_u={cfg.cutoff_u} out of range for {r} grid nodes")
    m = trajectories.states[0].data.shape[0]
    if pairing.k.shape != (m,):
        raise AlignmentError(f"pairing length {pairing.k.size} does not match batch {m}")
    pairing.validate(X_anchors.n)

    per_step = []
    for k in range(cfg.cutoff_u - 1, r):
        s = trajectories.states[k]
        logits = _assignment_logits(s, X_anchors, float(grid[k]))
        logp = T.sub(T.select_index(logits, pairing.k, axis=1), T.logsumexp(logits, axis=1))
        per_step.append(T.reshape(logp, (1, m)))
    stacked = T.concat(per_step, axis=0) if len(per_step) > 1 else per_step[0]

    # argmax over steps with ties toward the latest step
    vals = stacked.data
    best = vals.shape[0] - 1 - np.argmax(vals[::-1], axis=0)
    picked = T.select_index(stacked, best, axis=0)
    if cfg.use_log:
        objective = T.mean(picked)
    else:
        objective = T.mean(T.exp(picked))
    return T.scalar_mul(objective, -1.0)
