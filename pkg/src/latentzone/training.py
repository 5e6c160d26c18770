"""Training loops for the three case studies, plus inference procedures.

Every loop is a pure function of (dataset, initial parameters, config, seed):
batches, noise, and augmentations all come from one seeded generator, so
identical runs produce identical metric logs. Latent computation uses the
minibatch approximation throughout.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .alignment import AlignmentConfig, Pairing, align_loss
from .datasets import Augmentor, Dataset
from .flow import RECOMPUTE, AnchorSet, FlowConfig, compute_latents, integrate_backward, integrate_forward
from .models import LabelCodebook, MlpEncoder, RectifiedFlowDecoder, label_decode, one_hot, rf_loss, rf_sample
from .optim import Adam
from .serialization import write_metrics
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration


@dataclass
class CheckpointPolicy:
    mode: str = RECOMPUTE  # full_tape | recompute_velocity


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 128
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-3
    lr_codebook: float = 1e-3
    clip_norm: float = 1.0
    rf_weight: float = 1.0
    align_weight: float = 1.0
    flow: FlowConfig = field(default_factory=FlowConfig)
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    policy: CheckpointPolicy = field(default_factory=CheckpointPolicy)
    seed: int = 0
    log_every: int = 50
    record_wall_time: bool = False

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if self.clip_norm <= 0.0:
            raise ValueError("clip_norm must be positive")
        if self.rf_weight < 0.0 or self.align_weight < 0.0:
            raise ValueError("loss weights must be nonnegative")


class MetricLog:
    """In-memory metric rows, optionally flushed to a CSV file."""

    def __init__(self, path=None):
        self.rows: list[tuple] = []
        self.path = path

    def append(self, it, total, rf, align, grad_norm, wall_ms):
        self.rows.append((it, total, rf, align, grad_norm, wall_ms))

    def flush(self):
        if self.path is not None:
            write_metrics(self.path, self.rows)
            self.rows = []


def _finish_step(opt: Adam, loss: Tensor, cfg: TrainConfig, it: int) -> float:
    if not np.isfinite(loss.data):
        raise TrainingDiverged(it)
    opt.zero_grad()
    T.backward(loss)
    norm = opt.clip_global_norm(cfg.clip_norm)
    opt.step()
    T.reset_tape()
    return norm


def _wall_ms(t0: float, cfg: TrainConfig) -> int:
    return int((time.perf_counter() - t0) * 1000.0) if cfg.record_wall_time else 0


def train_unconditional(
    dataset: Dataset,
    encoder: MlpEncoder,
    decoder: RectifiedFlowDecoder,
    cfg: TrainConfig,
    log: MetricLog | None = None,
) -> MetricLog:
    """RF training with latents from the minibatch flow as extra conditioning.

    With rf_weight == 0 the step is an optimizer no-op."""
    log = log or MetricLog()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam([(encoder.params(), cfg.lr_encoder), (decoder.params(), cfg.lr_decoder)])
    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        idx = rng.integers(0, dataset.size, size=cfg.batch_size)
        batch = dataset.points[idx]
        anchors = encoder.encode(batch)
        z = compute_latents(anchors, AnchorSet(anchors), cfg.flow, rng, policy=cfg.policy.mode)
        loss_rf = rf_loss(decoder, batch, z, rng=rng)
        loss = T.scalar_mul(loss_rf, cfg.rf_weight)
        norm = _finish_step(opt, loss, cfg, it)
        if it % cfg.log_every == 0 or it == cfg.iterations:
            log.append(it, loss.item(), loss_rf.item(), 0.0, norm, _wall_ms(t0, cfg))
    log.flush()
    return log


def train_baseline_rf(
    dataset: Dataset,
    decoder: RectifiedFlowDecoder,
    cfg: TrainConfig,
    log: MetricLog | None = None,
) -> MetricLog:
    """Plain RF baseline: same loop without the latent conditioning path.

    The decoder still takes a latent input slot; it is fed zeros so the
    architecture and parameter count match the conditioned model."""
    log = log or MetricLog()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam([(decoder.params(), cfg.lr_decoder)])
    zeros = np.zeros((cfg.batch_size, decoder.latent_dim))
    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        idx = rng.integers(0, dataset.size, size=cfg.batch_size)
        batch = dataset.points[idx]
        loss_rf = rf_loss(decoder, batch, Tensor(zeros), rng=rng)
        loss = T.scalar_mul(loss_rf, cfg.rf_weight)
        norm = _finish_step(opt, loss, cfg, it)
        if it % cfg.log_every == 0 or it == cfg.iterations:
            log.append(it, loss.item(), loss_rf.item(), 0.0, norm, _wall_ms(t0, cfg))
    log.flush()
    return log


def _alignment_pass(
    own_anchors: Tensor,
    ref_anchors: AnchorSet,
    pairing: Pairing,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> Tensor:
    """Latents of one view, flowed forward under the other view's anchors."""
    z = compute_latents(own_anchors, AnchorSet(own_anchors), cfg.flow, rng, policy=cfg.policy.mode)
    traj = integrate_forward(z, ref_anchors, cfg.flow, record=True, policy=cfg.policy.mode)
    return align_loss(ref_anchors, traj, pairing, cfg.align)


def train_representation(
    dataset: Dataset,
    encoder: MlpEncoder,
    augmentor: Augmentor,
    cfg: TrainConfig,
    log: MetricLog | None = None,
) -> MetricLog:
    """Augmentation-pair alignment: two views per sample, identity pairing,
    symmetrized across the two views."""
    log = log or MetricLog()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam([(encoder.params(), cfg.lr_encoder)])
    identity = Pairing(np.arange(cfg.batch_size))
    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        idx = rng.integers(0, dataset.size, size=cfg.batch_size)
        batch = dataset.points[idx]
        view_a = augmentor(batch)
        view_b = augmentor(batch)
        anchors_a = encoder.encode(view_a)
        anchors_b = encoder.encode(view_b)
        loss_ab = _alignment_pass(anchors_b, AnchorSet(anchors_a), identity, cfg, rng)
        loss_ba = _alignment_pass(anchors_a, AnchorSet(anchors_b), identity, cfg, rng)
        loss_align = T.scalar_mul(T.add(loss_ab, loss_ba), 0.5)
        loss = T.scalar_mul(loss_align, cfg.align_weight)
        norm = _finish_step(opt, loss, cfg, it)
        if it % cfg.log_every == 0 or it == cfg.iterations:
            log.append(it, loss.item(), 0.0, loss_align.item(), norm, _wall_ms(t0, cfg))
    log.flush()
    return log


def batch_label_weights(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Class frequencies of the batch; absent classes get weight zero."""
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    return counts / counts.sum()


def joint_loss(
    batch: np.ndarray,
    labels: np.ndarray,
    encoder: MlpEncoder,
    decoder: RectifiedFlowDecoder,
    codebook: LabelCodebook,
    cfg: TrainConfig,
    noise: dict,
) -> tuple[Tensor, Tensor, Tensor]:
    """Weighted joint objective with all stochastic draws passed in.

    Returns (total, rf, align). Image latents come from the minibatch image
    anchors; alignment flows those latents forward under the label anchors
    with batch-frequency mixture weights."""
    anchors = encoder.encode(batch)
    image_set = AnchorSet(anchors)
    z = integrate_backward(anchors, noise["latent_eps"], image_set, cfg.flow, policy=cfg.policy.mode)

    onehots = one_hot(labels, codebook.num_classes)
    loss_rf = rf_loss(decoder, batch, z, c=onehots, noise=(noise["rf_eps"], noise["rf_t"]))

    weights = batch_label_weights(labels, codebook.num_classes)
    label_set = codebook.anchor_set(weights=weights)
    traj = integrate_forward(z, label_set, cfg.flow, record=True, policy=cfg.policy.mode)
    loss_align = align_loss(label_set, traj, Pairing(labels), cfg.align)

    total = T.add(T.scalar_mul(loss_rf, cfg.rf_weight), T.scalar_mul(loss_align, cfg.align_weight))
    return total, loss_rf, loss_align


def draw_joint_noise(rng: np.random.Generator, batch_shape: tuple[int, int], latent_dim: int) -> dict:
    m, _ = batch_shape
    return {
        "latent_eps": rng.standard_normal((m, latent_dim)),
        "rf_eps": rng.standard_normal(batch_shape),
        "rf_t": rng.uniform(size=m),
    }


def train_joint(
    dataset: Dataset,
    encoder: MlpEncoder,
    decoder: RectifiedFlowDecoder,
    codebook: LabelCodebook,
    cfg: TrainConfig,
    log: MetricLog | None = None,
) -> MetricLog:
    """Joint conditional generation + classification training."""
    log = log or MetricLog()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(
        [
            (encoder.params(), cfg.lr_encoder),
            (decoder.params(), cfg.lr_decoder),
            (codebook.params(), cfg.lr_codebook),
        ]
    )
    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        idx = rng.integers(0, dataset.size, size=cfg.batch_size)
        batch = dataset.points[idx]
        labels = dataset.labels[idx]
        noise = draw_joint_noise(rng, batch.shape, encoder.latent_dim)
        total, loss_rf, loss_align = joint_loss(batch, labels, encoder, decoder, codebook, cfg, noise)
        norm = _finish_step(opt, total, cfg, it)
        if it % cfg.log_every == 0 or it == cfg.iterations:
            log.append(it, total.item(), loss_rf.item(), loss_align.item(), norm, _wall_ms(t0, cfg))
    log.flush()
    return log


def classify(
    batch: np.ndarray,
    encoder: MlpEncoder,
    codebook: LabelCodebook,
    cfg: FlowConfig,
    rng: np.random.Generator | None = None,
    alpha: float = 0.0,
    reference: np.ndarray | None = None,
) -> np.ndarray:
    """Latents of the batch (zone centers at alpha=0), decoded to class IDs.

    The minibatch anchor set is the batch itself, optionally extended with
    `reference` points (a larger inference batch). Predictions depend on the
    batch's class composition: a heavily skewed batch stretches that class's
    latents over most of the prior and pushes some across the label boundary,
    so evaluation batches should be class-balanced (or carry a reference set
    much larger than the batch)."""
    rng = np.random.default_rng(0) if rng is None else rng
    flow_cfg = cfg.with_alpha(alpha)
    with T.no_grad():
        anchors = encoder.encode(batch)
        if reference is not None:
            ref_anchors = encoder.encode(reference)
            anchor_set = AnchorSet(np.concatenate([anchors.data, ref_anchors.data], axis=0))
        else:
            anchor_set = AnchorSet(anchors)
        z = compute_latents(anchors, anchor_set, flow_cfg, rng)
        return label_decode(codebook, z.data, cfg)


def generate(
    decoder: RectifiedFlowDecoder,
    codebook: LabelCodebook | None,
    mode: str,
    count: int,
    cfg: FlowConfig,
    rng: np.random.Generator,
    class_k: int | None = None,
    rf_steps: int = 50,
) -> np.ndarray:
    """Unconditional (z from the prior) or conditional (z from a class zone)
    sampling through the RF decoder."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    if count == 0:
        return np.zeros((0, decoder.data_dim))
    if mode == "unconditional":
        z = rng.standard_normal((count, decoder.latent_dim))
        c = None
        if decoder.num_classes:
            if codebook is None:
                raise ValueError("class-conditioned decoder needs a codebook")
            c = one_hot(label_decode(codebook, z, cfg), decoder.num_classes)
    elif mode == "conditional":
        if codebook is None or class_k is None:
            raise ValueError("conditional generation needs a codebook and a class")
        if not 0 <= class_k < codebook.num_classes:
            raise ValueError(f"class {class_k} out of range [0, {codebook.num_classes})")
        label_set = codebook.anchor_set()
        anchor_rows = np.repeat(codebook.A.data.T[class_k][None, :], count, axis=0)
        with T.no_grad():
            z = compute_latents(anchor_rows, label_set, cfg, rng).data
        c = one_hot(np.full(count, class_k), decoder.num_classes) if decoder.num_classes else None
    else:
        raise ValueError(f"unknown generation mode {mode!r}")
    return rf_sample(decoder, z, c, rf_steps=rf_steps, rng=rng)
