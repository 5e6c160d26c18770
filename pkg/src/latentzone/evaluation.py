"""Two-sample metrics, prior checks, linear probing, and zone diagnostics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.linear_model import LogisticRegression

from . import tensor as T
from .flow import AnchorSet, FlowConfig, assign_zones, compute_latents


class EvalError(ValueError):
    pass


def energy_distance(sample_a: np.ndarray, sample_b: np.ndarray) -> float:
    """2 E|A-B| - E|A-A'| - E|B-B'| via exact pairwise sums (V-statistic).

    Zero iff the two empirical distributions coincide in the exact-pair sense."""
    a = np.atleast_2d(np.asarray(sample_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(sample_b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EvalError("energy_distance needs nonempty samples")
    if a.shape[1] != b.shape[1]:
        raise EvalError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return float(2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())


@dataclass
class PriorReport:
    mean_norm: float
    cov_err: float
    energy_to_gaussian: float


def gaussian_prior_test(
    latents: np.ndarray,
    rng: np.random.Generator | None = None,
    energy_subsample: int = 4096,
) -> PriorReport:
    """Moment and energy-distance comparison against fresh N(0, I) draws.

    Moments use every latent; the energy distance uses a random subsample of
    at most `energy_subsample` rows, since its pairwise cost is quadratic."""
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1000:
        raise EvalError(f"need at least 1000 latents in an (m, q) array, got shape {z.shape}")
    rng = np.random.default_rng(0) if rng is None else rng
    mean_norm = float(np.linalg.norm(z.mean(axis=0)))
    cov = np.cov(z, rowvar=False)
    cov = np.atleast_2d(cov)
    cov_err = float(np.abs(cov - np.eye(z.shape[1])).max())
    if z.shape[0] > energy_subsample:
        sub = z[rng.choice(z.shape[0], energy_subsample, replace=False)]
    else:
        sub = z
    ref = rng.standard_normal(sub.shape)
    return PriorReport(mean_norm, cov_err, energy_distance(sub, ref))


def linear_probe(
    representations: np.ndarray,
    labels: np.ndarray,
    split: float = 0.5,
    seed: int = 0,
) -> float:
    """Accuracy of a multinomial logistic probe on a random train/test split."""
    reps = np.asarray(representations, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if np.unique(labels).size < 2:
        raise EvalError("linear probe needs at least 2 classes")
    rng = np.random.default_rng(seed)
    order = rng.permutation(reps.shape[0])
    cut = int(split * reps.shape[0])
    train, test = order[:cut], order[cut:]
    clf = LogisticRegression(max_iter=2000, C=100.0)
    clf.fit(reps[train], labels[train])
    return float(clf.score(reps[test], labels[test]))


def misassignment_rate(
    A: AnchorSet,
    cfg: FlowConfig,
    draws: int,
    rng: np.random.Generator,
) -> float:
    """Fraction of computed latents whose hard zone differs from their source
    anchor, over `draws` noise draws per anchor."""
    if draws < 1000:
        raise EvalError(f"misassignment_rate needs >= 1000 draws, got {draws}")
    anchors = A.anchors.data
    rep = np.repeat(anchors, draws, axis=0)
    truth = np.repeat(np.arange(A.n), draws)
    wrong = 0
    chunk = max(1, 200_000 // max(A.n, 1))
    with T.no_grad():
        for lo in range(0, rep.shape[0], chunk):
            part = rep[lo : lo + chunk]
            z = compute_latents(part, A, cfg, rng)
            zones = assign_zones(z.data, A, cfg)
            wrong += int((zones != truth[lo : lo + part.shape[0]]).sum())
    return wrong / rep.shape[0]


def zone_map_grid(
    A: AnchorSet,
    cfg: FlowConfig,
    grid_n: int = 200,
    lo: float = -3.0,
    hi: float = 3.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Hard zone index over a 2D latent grid; returns (points, zones)."""
    if A.q != 2:
        raise EvalError(f"zone map needs 2D latents, got q={A.q}")
    xs = np.linspace(lo, hi, grid_n)
    xx, yy = np.meshgrid(xs, xs)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    zones = np.empty(pts.shape[0], dtype=np.int64)
    chunk = 20_000
    for start in range(0, pts.shape[0], chunk):
        zones[start : start + chunk] = assign_zones(pts[start : start + chunk], A, cfg)
    return pts, zones
