"""Closed-form flow matching over a discrete anchor set.

The velocity field is the exact mixture field for linear-interpolation
marginals between N(0, I) and a (possibly weighted) mixture of Dirac points.
Forward integration transports latents toward anchors; backward integration
from a guarded anchor-plus-noise start produces latents. Both directions are
differentiable end to end with respect to the anchors, either through a fully
recorded tape or through a recompute-in-backward mode that retains only the
trajectory states.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from . import tensor as T
from .tensor import Tensor


class FlowError(RuntimeError):
    """Raised on domain errors or non-finite states during integration."""


FULL_TAPE = "full_tape"
RECOMPUTE = "recompute_velocity"


class AnchorSet:
    """Anchor points a_1..a_n, optionally with mixture weights on the simplex."""

    def __init__(self, anchors: Tensor | np.ndarray, weights: np.ndarray | None = None):
        if not isinstance(anchors, Tensor):
            anchors = Tensor(np.asarray(anchors, dtype=np.float64))
        if anchors.data.ndim != 2 or anchors.data.shape[0] < 1 or anchors.data.shape[1] < 1:
            raise FlowError(f"anchors must be a nonempty (n, q) matrix, got shape {anchors.data.shape}")
        if not np.all(np.isfinite(anchors.data)):
            raise FlowError("anchors contain non-finite entries")
        self.anchors = anchors
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64)
            if weights.shape != (anchors.data.shape[0],):
                raise FlowError(f"weights shape {weights.shape} does not match {anchors.data.shape[0]} anchors")
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
                raise FlowError("weights must be nonnegative and sum to 1")
        self.weights = weights

    @property
    def n(self) -> int:
        return self.anchors.data.shape[0]

    @property
    def q(self) -> int:
        return self.anchors.data.shape[1]

    def log_weights(self) -> np.ndarray | None:
        """Additive log-weights, or None when uniform (so the unweighted path
        is taken bit-for-bit)."""
        if self.weights is None or np.all(self.weights == self.weights[0]):
            return None
        with np.errstate(divide="ignore"):
            return np.log(self.weights)


@dataclass
class FlowConfig:
    """Guard, latent scale, time grid, alignment cutoff and solver choice."""

    g: float = 1e-3
    alpha: float = 1.0
    grid: np.ndarray = field(default_factory=lambda: uniform_grid(1e-3, 100))
    cutoff_u: int | None = None  # defaults to min(20, grid size)
    solver: Literal["euler", "midpoint"] = "euler"

    def __post_init__(self):
        if not 0.0 < self.g < 1.0:
            raise FlowError(f"guard g must be in (0, 1), got {self.g}")
        if not 0.0 <= self.alpha <= 1.0:
            raise FlowError(f"latent scale alpha must be in [0, 1], got {self.alpha}")
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 1 or self.grid.size < 2 or np.any(np.diff(self.grid) <= 0):
            raise FlowError("grid must be strictly increasing with at least two nodes")
        if self.grid[0] != 0.0 or self.grid[-1] >= 1.0:
            raise FlowError("grid must start at 0 and end below 1")
        if self.cutoff_u is None:
            self.cutoff_u = min(20, self.grid.size)
        if not 1 <= self.cutoff_u <= self.grid.size:
            raise FlowError(f"cutoff_u={self.cutoff_u} out of range for {self.grid.size} grid nodes")
        if self.solver not in ("euler", "midpoint"):
            raise FlowError(f"unknown solver {self.solver!r}")

    @property
    def steps(self) -> int:
        return self.grid.size

    def with_alpha(self, alpha: float) -> "FlowConfig":
        return replace(self, alpha=alpha)


def uniform_grid(g: float, steps: int) -> np.ndarray:
    """Uniform grid t_1=0 < ... < t_r = 1-g; the last node is pinned to 1-g."""
    if steps < 2:
        raise FlowError(f"grid needs at least 2 steps, got {steps}")
    return np.linspace(0.0, 1.0 - g, steps)


@dataclass
class Trajectory:
    """Recorded states s_{t_1}..s_{t_r}; states[k] is a (m, q) Tensor at grid[k]."""

    states: list
    grid: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([s.data for s in self.states], axis=0)


# ---------------------------------------------------------------------------
# velocity field


def _velocity_np(s: np.ndarray, anchors: np.ndarray, log_w: np.ndarray | None, t: float) -> np.ndarray:
    """Raw numpy velocity for non-recorded paths.

    Mirrors _velocity_ops operation by operation so that recompute-mode
    trajectories are bit-identical to full-tape ones.
    """
    one_mt = 1.0 - t
    row_s = (s * s).sum(axis=1)
    row_a = (anchors * anchors).sum(axis=1)
    cross = (s @ anchors.T) * (-2.0 * t)
    d2 = (cross + row_a * (t * t)) + row_s[:, None]
    logits = d2 * (-1.0 / (2.0 * one_mt * one_mt))
    if log_w is not None:
        logits = logits + log_w[None, :]
    m = np.max(logits, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    lse = np.log(np.exp(logits - m).sum(axis=1, keepdims=True)) + m
    p = np.exp(logits + (lse[:, 0] * -1.0)[:, None])
    return (p @ anchors - s) * (1.0 / one_mt)


def _velocity_ops(s: Tensor, anchors: Tensor, log_w: np.ndarray | None, t: float) -> Tensor:
    """Velocity built from tape primitives; identical arithmetic structure is
    not required against _velocity_np, but values agree to ~1e-15."""
    one_mt = 1.0 - t
    row_s = T.sum_(T.mul(s, s), axis=1)                       # (m,)
    row_a = T.sum_(T.mul(anchors, anchors), axis=1)           # (n,)
    cross = T.scalar_mul(T.matmul(s, T.transpose(anchors)), -2.0 * t)
    d2 = T.add_cols(T.add_rows(cross, T.scalar_mul(row_a, t * t)), row_s)
    logits = T.scalar_mul(d2, -1.0 / (2.0 * one_mt * one_mt))
    if log_w is not None:
        logits = T.add_rows(logits, Tensor(log_w))
    lse = T.logsumexp(logits, axis=1)                         # (m,)
    p = T.exp(T.add_cols(logits, T.scalar_mul(lse, -1.0)))    # (m, n)
    return T.scalar_mul(T.sub(T.matmul(p, anchors), s), 1.0 / one_mt)


def velocity(s, t: float, A: AnchorSet) -> Tensor:
    """Mixture velocity at state s and time t < 1.

    Accepts a single point (q,) or a batch (m, q); returns the same rank.
    """
    if t >= 1.0:
        raise FlowError(f"velocity undefined at t={t} >= 1")
    single = False
    if not isinstance(s, Tensor):
        s = Tensor(np.asarray(s, dtype=np.float64))
    if s.data.ndim == 1:
        single = True
        s = T.reshape(s, (1, s.data.shape[0]))
    v = _velocity_ops(s, A.anchors, A.log_weights(), float(t))
    if not np.all(np.isfinite(v.data)):
        raise FlowError(f"non-finite velocity at t={t}")
    if single:
        v = T.reshape(v, (v.data.shape[1],))
    return v


def _step_ops(s: Tensor, anchors: Tensor, log_w, t: float, t_next: float, solver: str) -> Tensor:
    dt = t_next - t
    v = _velocity_ops(s, anchors, log_w, t)
    if solver == "euler":
        return T.add(s, T.scalar_mul(v, dt))
    mid = T.add(s, T.scalar_mul(v, dt / 2.0))
    v2 = _velocity_ops(mid, anchors, log_w, t + dt / 2.0)
    return T.add(s, T.scalar_mul(v2, dt))


def _step_np(s: np.ndarray, anchors: np.ndarray, log_w, t: float, t_next: float, solver: str) -> np.ndarray:
    dt = t_next - t
    v = _velocity_np(s, anchors, log_w, t)
    if solver == "euler":
        return s + dt * v
    v2 = _velocity_np(s + (dt / 2.0) * v, anchors, log_w, t + dt / 2.0)
    return s + dt * v2


# ---------------------------------------------------------------------------
# integration


def _integrate(
    s0: Tensor,
    A: AnchorSet,
    times: np.ndarray,
    solver: str,
    record: bool,
    policy: str,
):
    """Integrate along `times` (ordered list of grid nodes, either direction).

    Returns the list of per-node state Tensors (including the start) when
    `record`, else just the final state.
    """
    anchors = A.anchors
    log_w = A.log_weights()
    needs_grad = T.grad_enabled() and (s0.requires_grad or anchors.requires_grad)

    if policy == FULL_TAPE and needs_grad:
        states = [s0]
        s = s0
        for k in range(len(times) - 1):
            s = _step_ops(s, anchors, log_w, float(times[k]), float(times[k + 1]), solver)
            if not np.all(np.isfinite(s.data)):
                raise FlowError(f"non-finite state at step {k + 1}")
            states.append(s)
        return states if record else states[-1]

    # forward pass without recording velocity internals
    raw = [s0.data]
    s = s0.data
    for k in range(len(times) - 1):
        s = _step_np(s, anchors.data, log_w, float(times[k]), float(times[k + 1]), solver)
        if not np.all(np.isfinite(s)):
            raise FlowError(f"non-finite state at step {k + 1}")
        raw.append(s)

    outs = [Tensor(x) for x in raw[1:]]

    if needs_grad:
        def bwd():
            carry = np.zeros_like(raw[-1])
            if outs[-1].grad is not None:
                carry = carry + outs[-1].grad
            anchor_grad = np.zeros_like(anchors.data)
            for k in range(len(times) - 2, -1, -1):
                with T.Tape():
                    sk = Tensor(raw[k], requires_grad=True)
                    ak = Tensor(anchors.data, requires_grad=True)
                    out = _step_ops(sk, ak, log_w, float(times[k]), float(times[k + 1]), solver)
                    loss = T.sum_(T.mul(out, Tensor(carry)))
                    T.backward(loss)
                    carry = sk.grad
                    anchor_grad += ak.grad
                if k > 0 and outs[k - 1].grad is not None:
                    carry = carry + outs[k - 1].grad
            if s0.requires_grad:
                s0.accumulate_grad(carry)
            if anchors.requires_grad:
                anchors.accumulate_grad(anchor_grad)

        T.record_multi(outs, (s0, anchors), bwd)

    states = [s0] + outs
    return states if record else states[-1]


def integrate_forward(
    s0: Tensor | np.ndarray,
    A: AnchorSet,
    cfg: FlowConfig,
    record: bool = False,
    policy: str = RECOMPUTE,
):
    """Integrate from t=0 to the last grid node 1-g.

    With `record` returns the full Trajectory; otherwise the endpoint state.
    """
    if not isinstance(s0, Tensor):
        s0 = Tensor(np.asarray(s0, dtype=np.float64))
    squeeze = s0.data.ndim == 1
    if squeeze:
        s0 = T.reshape(s0, (1, s0.data.shape[0]))
    result = _integrate(s0, A, cfg.grid, cfg.solver, record, policy)
    if record:
        return Trajectory(states=result, grid=cfg.grid)
    if squeeze:
        result = T.reshape(result, (result.data.shape[1],))
    return result


def integrate_backward(
    a: Tensor | np.ndarray,
    eps: np.ndarray,
    A: AnchorSet,
    cfg: FlowConfig,
    policy: str = RECOMPUTE,
) -> Tensor:
    """Latent computation for one anchor row (or a batch of rows).

    Starts at s_{1-g} = (1-g) a + g * alpha * eps and integrates the grid in
    reverse down to t=0. Differentiable w.r.t. `a` and the anchor set.
    """
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=np.float64))
    squeeze = a.data.ndim == 1
    if squeeze:
        a = T.reshape(a, (1, a.data.shape[0]))
    eps = np.asarray(eps, dtype=np.float64).reshape(a.data.shape)
    start = T.add(T.scalar_mul(a, 1.0 - cfg.g), Tensor(cfg.g * cfg.alpha * eps))
    z = _integrate(start, A, cfg.grid[::-1], cfg.solver, record=False, policy=policy)
    if squeeze:
        z = T.reshape(z, (z.data.shape[1],))
    return z


def compute_latents(
    anchors_of_batch: Tensor | np.ndarray,
    A: AnchorSet,
    cfg: FlowConfig,
    rng: np.random.Generator,
    policy: str = RECOMPUTE,
) -> Tensor:
    """Row i is the backward-integrated latent of anchors_of_batch[i].

    The caller chooses the reference AnchorSet (usually built from the same
    batch; a larger reference set sharpens zones at inference).
    """
    if not isinstance(anchors_of_batch, Tensor):
        anchors_of_batch = Tensor(np.asarray(anchors_of_batch, dtype=np.float64))
    if anchors_of_batch.data.ndim != 2:
        raise FlowError(f"expected (n, q) anchors, got shape {anchors_of_batch.data.shape}")
    eps = rng.standard_normal(anchors_of_batch.data.shape)
    return integrate_backward(anchors_of_batch, eps, A, cfg, policy=policy)


def assign_zone(z: np.ndarray | Tensor, A: AnchorSet, cfg: FlowConfig) -> int:
    """Hard zone index of a single latent: flow forward to 1-g, snap to the
    nearest anchor. Ties break to the lowest index."""
    z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    return int(assign_zones(z.reshape(1, -1), A, cfg)[0])


def assign_zones(z: np.ndarray, A: AnchorSet, cfg: FlowConfig) -> np.ndarray:
    """Vectorized assign_zone over rows of z; never records on the tape."""
    z = np.asarray(z, dtype=np.float64)
    with T.no_grad():
        end = _integrate(Tensor(z), A, cfg.grid, cfg.solver, record=False, policy=RECOMPUTE)
    a = A.anchors.data
    d2 = (end.data * end.data).sum(axis=1)[:, None] - 2.0 * (end.data @ a.T) + (a * a).sum(axis=1)[None, :]
    return np.argmin(d2, axis=1)
