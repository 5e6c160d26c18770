"""Encoders, the rectified-flow decoder, and the label codebook."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .flow import AnchorSet, FlowConfig, assign_zones
from .tensor import ShapeError, Tensor


class ModelError(RuntimeError):
    pass


def _init_layer(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float):
    w = Tensor(rng.standard_normal((fan_in, fan_out)) * (gain / np.sqrt(fan_in)), requires_grad=True)
    b = Tensor(np.zeros(fan_out), requires_grad=True)
    return w, b


class Mlp:
    """Plain tanh MLP; deterministic and bit-reproducible for fixed params."""

    def __init__(self, widths: list[int], rng: np.random.Generator, gain: float = 1.0, prefix: str = "mlp"):
        self.widths = list(widths)
        self.prefix = prefix
        self.layers = [
            _init_layer(rng, widths[i], widths[i + 1], gain) for i in range(len(widths) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.widths[0]:
            raise ShapeError(f"{self.prefix}: input shape {x.data.shape} vs expected (*, {self.widths[0]})")
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = T.add_rows(T.matmul(h, w), b)
            if i < len(self.layers) - 1:
                h = T.tanh(h)
        return h

    def params(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.layers):
            out.append((f"{self.prefix}.layer{i}.W", w))
            out.append((f"{self.prefix}.layer{i}.b", b))
        return out


class MlpEncoder:
    """Deterministic encoder mapping data points to anchor points.

    With zero_init_out the last layer starts at zero, so all anchors begin
    at the origin and the initial latents are pure prior noise; downstream
    probes of the untrained encoder then measure chance accuracy instead of
    whatever structure a random projection happens to preserve."""

    def __init__(
        self,
        in_dim: int,
        latent_dim: int,
        hidden: list[int] | None = None,
        rng: np.random.Generator | None = None,
        gain: float = 1.0,
        zero_init_out: bool = False,
    ):
        hidden = [128, 128, 128] if hidden is None else list(hidden)
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_dim = in_dim
        self.latent_dim = latent_dim
        self.net = Mlp([in_dim] + hidden + [latent_dim], rng, gain=gain, prefix="encoder")
        if zero_init_out:
            w, b = self.net.layers[-1]
            w.data[:] = 0.0
            b.data[:] = 0.0

    def __call__(self, batch) -> Tensor:
        return self.encode(batch)

    def encode(self, batch) -> Tensor:
        if not isinstance(batch, Tensor):
            batch = Tensor(np.asarray(batch, dtype=np.float64))
        return self.net(batch)

    def params(self):
        return self.net.params()


def _time_features(t: np.ndarray) -> np.ndarray:
    # [t, sin 2*pi*t, cos 2*pi*t]
    return np.stack([t, np.sin(2.0 * np.pi * t), np.cos(2.0 * np.pi * t)], axis=1)


class RectifiedFlowDecoder:
    """Velocity network v(xi, t, z[, class one-hot]) over the data space."""

    def __init__(
        self,
        data_dim: int,
        latent_dim: int,
        num_classes: int = 0,
        hidden: list[int] | None = None,
        rng: np.random.Generator | None = None,
        gain: float = 1.0,
    ):
        hidden = [256, 256, 256, 256] if hidden is None else list(hidden)
        rng = np.random.default_rng(0) if rng is None else rng
        self.data_dim = data_dim
        self.latent_dim = latent_dim
        self.num_classes = num_classes
        in_dim = data_dim + 3 + latent_dim + num_classes
        self.net = Mlp([in_dim] + hidden + [data_dim], rng, gain=gain, prefix="decoder")

    def __call__(self, xi, t_rf: np.ndarray, z, c: np.ndarray | None = None) -> Tensor:
        if not isinstance(xi, Tensor):
            xi = Tensor(np.asarray(xi, dtype=np.float64))
        if not isinstance(z, Tensor):
            z = Tensor(np.asarray(z, dtype=np.float64))
        m = xi.data.shape[0]
        t_rf = np.asarray(t_rf, dtype=np.float64).reshape(m)
        parts = [xi, Tensor(_time_features(t_rf)), z]
        if self.num_classes:
            if c is None:
                raise ModelError("decoder expects a class one-hot input")
            c = np.asarray(c, dtype=np.float64)
            if c.shape != (m, self.num_classes):
                raise ShapeError(f"class input shape {c.shape} vs expected ({m}, {self.num_classes})")
            parts.append(Tensor(c))
        elif c is not None:
            raise ModelError("decoder was built without class conditioning")
        return self.net(T.concat(parts, axis=1))

    def params(self):
        return self.net.params()


class LabelCodebook:
    """Learnable (q, c) matrix of class anchor points."""

    def __init__(self, latent_dim: int, num_classes: int, rng: np.random.Generator | None = None):
        if num_classes < 2:
            raise ModelError(f"codebook needs at least 2 classes, got {num_classes}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.latent_dim = latent_dim
        self.num_classes = num_classes
        # entries near the latent prior scale; columns centered so the initial
        # zone boundaries pass near the origin and every class starts with
        # nonvanishing prior mass (an off-center init can make one zone swallow
        # the whole prior, which a small codebook learning rate never repairs)
        raw = rng.standard_normal((latent_dim, num_classes)) / np.sqrt(np.sqrt(latent_dim))
        self.A = Tensor(raw - raw.mean(axis=1, keepdims=True), requires_grad=True)

    def anchor_set(self, weights: np.ndarray | None = None) -> AnchorSet:
        return AnchorSet(T.transpose(self.A), weights=weights)

    def params(self):
        return [("codebook.A", self.A)]


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def label_encode(codebook: LabelCodebook, h: np.ndarray) -> Tensor:
    """Map a one-hot label (or a batch of them) to its anchor column(s)."""
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    hb = h.reshape(1, -1) if single else h
    if hb.shape[1] != codebook.num_classes:
        raise ShapeError(f"one-hot length {hb.shape[1]} vs {codebook.num_classes} classes")
    if not np.all((hb == 0.0) | (hb == 1.0)) or not np.all(hb.sum(axis=1) == 1.0):
        raise ModelError("label input is not one-hot")
    out = T.matmul(Tensor(hb), T.transpose(codebook.A))
    return T.reshape(out, (codebook.latent_dim,)) if single else out


def label_decode(codebook: LabelCodebook, z, cfg: FlowConfig) -> np.ndarray:
    """Class IDs of latents: flow forward under the label anchors (uniform
    weights), then argmax of endpoint . A. Ties break to the lowest index."""
    z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z.reshape(1, -1) if single else z
    A = codebook.anchor_set()
    # flow to 1-g, snap to the Dirac collapse regime, then score against A
    idx = assign_zones(zb, A, cfg)
    snapped = A.anchors.data[idx]
    scores = snapped @ codebook.A.data
    out = np.argmax(scores, axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# rectified flow training and sampling


def rf_loss(
    decoder: RectifiedFlowDecoder,
    x: np.ndarray,
    z: Tensor,
    c: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    noise: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Straight-line velocity regression loss, mean over batch entries.

    Draws eps ~ N(0, I) and t ~ U(0, 1), interpolates xi = (1-t) eps + t x and
    regresses the decoder output onto x - eps. Pass `noise=(eps, t)` to freeze
    the stochastic draws (grad checks, determinism tests).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected (m, d) batch, got shape {x.shape}")
    if z.data.shape[0] != x.shape[0]:
        raise ShapeError(f"latent rows {z.data.shape[0]} vs batch rows {x.shape[0]}")
    if noise is None:
        if rng is None:
            raise ModelError("rf_loss needs either an rng or frozen noise")
        eps = rng.standard_normal(x.shape)
        t = rng.uniform(size=x.shape[0])
    else:
        eps, t = noise
        eps = np.asarray(eps, dtype=np.float64).reshape(x.shape)
        t = np.asarray(t, dtype=np.float64).reshape(x.shape[0])
    xi = (1.0 - t)[:, None] * eps + t[:, None] * x
    target = x - eps
    pred = decoder(Tensor(xi), t, z, c)
    resid = T.sub(pred, Tensor(target))
    return T.mean(T.mul(resid, resid))


def rf_sample(
    decoder: RectifiedFlowDecoder,
    z,
    c: np.ndarray | None = None,
    rf_steps: int = 50,
    rng: np.random.Generator | None = None,
    xi0: np.ndarray | None = None,
) -> np.ndarray:
    """Euler integration of the decoder field from Gaussian noise to data."""
    if rf_steps < 1:
        raise ModelError(f"rf_steps must be >= 1, got {rf_steps}")
    z_arr = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    m = z_arr.shape[0]
    if xi0 is None:
        if rng is None:
            raise ModelError("rf_sample needs either an rng or a start point")
        xi0 = rng.standard_normal((m, decoder.data_dim))
    xi = np.asarray(xi0, dtype=np.float64).copy()
    dt = 1.0 / rf_steps
    with T.no_grad():
        for k in range(rf_steps):
            t = np.full(m, k * dt)
            v = decoder(Tensor(xi), t, Tensor(z_arr), c)
            xi = xi + dt * v.data
            if not np.all(np.isfinite(xi)):
                raise ModelError(f"non-finite sample state at RF step {k + 1}")
    return xi


def rf_reconstruct(
    decoder: RectifiedFlowDecoder,
    x: np.ndarray,
    z,
    c: np.ndarray | None = None,
    rf_steps: int = 50,
) -> tuple[np.ndarray, np.ndarray]:
    """Invert the decoder ODE from data to noise, then flow forward again.

    Returns the reconstructions and per-row l2 errors."""
    x = np.asarray(x, dtype=np.float64)
    z_arr = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    m = x.shape[0]
    dt = 1.0 / rf_steps
    xi = x.copy()
    with T.no_grad():
        for k in range(rf_steps, 0, -1):
            t = np.full(m, k * dt)
            v = decoder(Tensor(xi), t, Tensor(z_arr), c)
            xi = xi - dt * v.data
    x_hat = rf_sample(decoder, z_arr, c, rf_steps=rf_steps, xi0=xi)
    err = np.sqrt(((x - x_hat) ** 2).sum(axis=1))
    return x_hat, err
