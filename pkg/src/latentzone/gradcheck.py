"""Finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, backward, no_grad


class GradCheckError(RuntimeError):
    """Raised when a probed evaluation is non-finite."""


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: int
    passed: bool
    tape_grad: np.ndarray
    fd_grad: np.ndarray


def grad_check(
    f: Callable[[Tensor], Tensor],
    theta: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare the tape gradient of a scalar function with central differences.

    Relative error uses a unit floor so near-zero gradients are compared
    absolutely.
    """
    flat0 = theta.data.reshape(-1).copy()

    with Tape():
        p = Tensor(theta.data.copy(), requires_grad=True)
        loss = f(p)
        backward(loss)
        tape_grad = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1).copy()

    fd = np.zeros_like(flat0)
    with no_grad():
        for j in range(flat0.size):
            for sign in (+1.0, -1.0):
                pert = flat0.copy()
                pert[j] += sign * h
                val = f(Tensor(pert.reshape(theta.data.shape))).item()
                if not np.isfinite(val):
                    raise GradCheckError(f"non-finite value at coordinate {j} (offset {sign * h:+g})")
                fd[j] += sign * val
            fd[j] /= 2.0 * h

    denom = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(tape_grad)))
    rel = np.abs(tape_grad - fd) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    max_rel = float(rel[worst]) if rel.size else 0.0
    return GradCheckReport(max_rel, worst, max_rel <= tol, tape_grad, fd)
