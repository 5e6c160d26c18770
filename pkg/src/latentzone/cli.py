"""Command-line surface.

Exit codes: 0 success, 1 runtime/numeric failure, 2 usage error (unknown
flag or subcommand), 3 unreadable or invalid config, 4 missing or corrupt
checkpoint. Every subcommand is reproducible from (config, seed); with
--threads 1 reruns produce byte-identical CSV artifacts (wall-time columns
are then written as 0, see README).
"""
from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import tensor as T
from .alignment import AlignmentConfig
from .datasets import Augmentor, make_dataset
from .evaluation import energy_distance, gaussian_prior_test, linear_probe, misassignment_rate, zone_map_grid
from .flow import AnchorSet, FlowConfig, uniform_grid
from .gradcheck import grad_check
from .models import LabelCodebook, MlpEncoder, RectifiedFlowDecoder
from .serialization import (
    CheckpointError,
    ConfigError,
    dump_config,
    load_checkpoint,
    load_config_file,
    save_checkpoint,
    write_report,
    write_samples,
)
from .training import (
    MetricLog,
    TrainConfig,
    classify,
    generate,
    joint_loss,
    train_joint,
    train_representation,
    train_unconditional,
)

EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4


class RunSettings:
    """Everything a subcommand needs, resolved from the config file + flags."""

    def __init__(self, parser, seed_override, out_dir, threads):
        self.parser = parser
        self.threads = threads
        g = self._get("flow", "guard", 1e-3, float)
        steps = self._get("flow", "steps", 100, int)
        self.flow = FlowConfig(
            g=g,
            alpha=self._get("flow", "alpha", 1.0, float),
            grid=uniform_grid(g, steps),
            cutoff_u=self._get("flow", "cutoff", min(20, steps), int),
            solver=self._get("flow", "solver", "euler", str),
        )
        self.align = AlignmentConfig(
            cutoff_u=self._get("align", "cutoff", self.flow.cutoff_u, int),
            use_log=self._get("align", "use_log", False, _parse_bool),
        )
        self.seed = seed_override if seed_override is not None else self._get("train", "seed", 0, int)
        self.train = TrainConfig(
            iterations=self._get("train", "iterations", 1000, int),
            batch_size=self._get("train", "batch_size", 128, int),
            lr_encoder=self._get("train", "lr_encoder", 1e-3, float),
            lr_decoder=self._get("train", "lr_decoder", 1e-3, float),
            lr_codebook=self._get("train", "lr_codebook", 1e-3, float),
            clip_norm=self._get("train", "clip_norm", 1.0, float),
            rf_weight=self._get("train", "rf_weight", 1.0, float),
            align_weight=self._get("train", "align_weight", 1.0, float),
            flow=self.flow,
            align=self.align,
            seed=self.seed,
            log_every=self._get("train", "log_every", 50, int),
            record_wall_time=threads > 1,
        )
        self.latent_dim = self._get("model", "latent_dim", 2, int)
        self.encoder_hidden = self._get_list("model", "encoder_hidden", [128, 128, 128])
        self.decoder_hidden = self._get_list("model", "decoder_hidden", [256, 256, 256, 256])
        self.init_gain = self._get("model", "init_gain", 1.0, float)
        self.rf_steps = self._get("model", "rf_sample_steps", 50, int)
        self.data_kind = self._get("data", "kind", "gauss_mix", str)
        self.data_size = self._get("data", "size", 4096, int)
        self.data_params = {
            "components": self._get("data", "components", 4, int),
            "spread": self._get("data", "spread", 0.15, float),
            "noise": self._get("data", "noise", 0.08, float),
        }
        self.aug_sigma = self._get("data", "aug_sigma", 0.1, float)
        self.alpha_repr = self._get("flow", "alpha_repr", 0.45, float)
        self.out = Path(out_dir) if out_dir else None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)

    def _get(self, section, key, default, conv):
        if self.parser is None or not self.parser.has_option(section, key):
            return default
        raw = self.parser.get(section, key)
        try:
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc

    def _get_list(self, section, key, default):
        if self.parser is None or not self.parser.has_option(section, key):
            return list(default)
        raw = self.parser.get(section, key)
        try:
            return [int(part) for part in raw.split(",") if part.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc

    def dataset(self, seed_shift=0):
        return make_dataset(self.data_kind, self.data_size, self.seed + 1000 + seed_shift, **self.data_params)

    def build_models(self, num_classes=0, with_codebook=False):
        ds_dim = 2
        enc_rng = np.random.default_rng(self.seed + 1)
        encoder = MlpEncoder(ds_dim, self.latent_dim, hidden=self.encoder_hidden, rng=enc_rng, gain=self.init_gain)
        decoder = RectifiedFlowDecoder(
            ds_dim,
            self.latent_dim,
            num_classes=num_classes,
            hidden=self.decoder_hidden,
            rng=np.random.default_rng(self.seed + 2),
            gain=self.init_gain,
        )
        codebook = LabelCodebook(self.latent_dim, max(num_classes, 2), rng=np.random.default_rng(self.seed + 3)) if with_codebook else None
        return encoder, decoder, codebook

    def dump_resolved(self):
        if self.out is not None and self.parser is not None:
            (self.out / "config_used.cfg").write_text(dump_config(self.parser))


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def _settings(config, seed, out, threads) -> RunSettings:
    parser = load_config_file(config) if config else None
    return RunSettings(parser, seed, out, threads)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map domain errors onto documented exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, str(exc))
        except CheckpointError as exc:
            _fail(EXIT_CHECKPOINT, str(exc))
        except Exception as exc:  # noqa: BLE001 - CLI boundary
            _fail(1, str(exc))

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


_common = [
    click.option("--config", type=click.Path(), default=None, help="Config file (INI sections)."),
    click.option("--seed", type=int, default=None, help="Override [train] seed."),
    click.option("--out", type=click.Path(), default=None, help="Artifact directory."),
    click.option("--threads", type=int, default=1, show_default=True, help="Worker fan-out; 1 guarantees byte-identical reruns."),
]


def common_options(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Latent zoning experiments on synthetic 2D data."""


def _save_models(out: Path, encoder, decoder=None, codebook=None, extra=None):
    tensors = {name: p.data for name, p in encoder.params()}
    if decoder is not None:
        tensors.update({name: p.data for name, p in decoder.params()})
    if codebook is not None:
        tensors.update({name: p.data for name, p in codebook.params()})
    if extra:
        tensors.update(extra)
    save_checkpoint(out / "checkpoint.bin", tensors)


def _load_models(settings: RunSettings, path, num_classes=0, with_codebook=False):
    blob = load_checkpoint(path)
    encoder, decoder, codebook = settings.build_models(num_classes=num_classes, with_codebook=with_codebook)
    for model in (encoder, decoder, codebook):
        if model is None:
            continue
        for name, p in model.params():
            if name not in blob:
                raise CheckpointError(f"checkpoint {path} is missing tensor {name}")
            if blob[name].shape != p.data.shape:
                raise CheckpointError(f"checkpoint tensor {name} has shape {blob[name].shape}, expected {p.data.shape}")
            p.data = blob[name]
    return encoder, decoder, codebook


@main.command("train-gen")
@common_options
@_guard
def cmd_train_gen(config, seed, out, threads):
    """Train the latent-conditioned rectified flow (case study 1)."""
    settings = _settings(config, seed, out, threads)
    ds = settings.dataset()
    encoder, decoder, _ = settings.build_models()
    log = MetricLog(settings.out / "metrics.csv" if settings.out else None)
    train_unconditional(ds, encoder, decoder, settings.train, log)
    if settings.out:
        settings.dump_resolved()
        _save_models(settings.out, encoder, decoder)
        held = settings.dataset(seed_shift=1)
        rng = np.random.default_rng(settings.seed + 500)
        z = rng.standard_normal((held.size, settings.latent_dim))
        from .models import rf_sample

        samples = rf_sample(decoder, z, rf_steps=settings.rf_steps, rng=rng)
        write_samples(settings.out / "samples.csv", samples)
        write_report(settings.out / "report.csv", {"energy_distance": energy_distance(samples, held.points)})
    click.echo("train-gen done")


@main.command("train-repr")
@common_options
@_guard
def cmd_train_repr(config, seed, out, threads):
    """Train the encoder by augmentation-pair alignment (case study 2)."""
    settings = _settings(config, seed, out, threads)
    ds = settings.dataset()
    encoder, _, _ = settings.build_models()
    cfg = settings.train
    cfg.flow = settings.flow.with_alpha(settings.alpha_repr)
    cfg.align.use_log = True
    augmentor = Augmentor("gaussian_jitter", np.random.default_rng(settings.seed + 4), sigma=settings.aug_sigma)
    log = MetricLog(settings.out / "metrics.csv" if settings.out else None)
    train_representation(ds, encoder, augmentor, cfg, log)
    if settings.out:
        settings.dump_resolved()
        _save_models(settings.out, encoder)
        with T.no_grad():
            reps = encoder.encode(ds.points).data
        acc = linear_probe(reps, ds.labels, seed=settings.seed)
        write_report(settings.out / "report.csv", {"linear_probe_accuracy": acc})
    click.echo("train-repr done")


@main.command("train-joint")
@common_options
@_guard
def cmd_train_joint(config, seed, out, threads):
    """Joint conditional generation + classification training (case study 3)."""
    settings = _settings(config, seed, out, threads)
    ds = settings.dataset()
    num_classes = ds.num_classes
    encoder, decoder, codebook = settings.build_models(num_classes=num_classes, with_codebook=True)
    log = MetricLog(settings.out / "metrics.csv" if settings.out else None)
    train_joint(ds, encoder, decoder, codebook, settings.train, log)
    if settings.out:
        settings.dump_resolved()
        _save_models(settings.out, encoder, decoder, codebook)
        test = settings.dataset(seed_shift=1)
        preds = classify(test.points, encoder, codebook, settings.flow, alpha=0.0)
        acc = float((preds == test.labels).mean())
        write_report(settings.out / "report.csv", {"classification_accuracy": acc})
    click.echo("train-joint done")


@main.command("classify")
@common_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True)
@_guard
def cmd_classify(config, seed, out, threads, checkpoint_path):
    """Classify a held-out dataset with a trained joint model."""
    settings = _settings(config, seed, out, threads)
    test = settings.dataset(seed_shift=1)
    encoder, _, codebook = _load_models(settings, checkpoint_path, num_classes=test.num_classes, with_codebook=True)
    train_ref = settings.dataset()
    preds = classify(test.points, encoder, codebook, settings.flow, alpha=0.0, reference=train_ref.points[:1024])
    acc = float((preds == test.labels).mean())
    if settings.out:
        write_samples(settings.out / "predictions.csv", test.points, preds)
        write_report(settings.out / "report.csv", {"classification_accuracy": acc})
    click.echo(f"accuracy {acc:.4f}")


@main.command("sample")
@common_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True)
@click.option("--count", type=int, default=1000, show_default=True)
@click.option("--class", "class_k", type=int, default=None, help="Condition on this class.")
@_guard
def cmd_sample(config, seed, out, threads, checkpoint_path, count, class_k):
    """Draw samples from a trained decoder (optionally class-conditional)."""
    settings = _settings(config, seed, out, threads)
    with_classes = class_k is not None
    blob = load_checkpoint(checkpoint_path)
    has_codebook = "codebook.A" in blob
    num_classes = settings.dataset().num_classes if has_codebook else 0
    _, decoder, codebook = _load_models(settings, checkpoint_path, num_classes=num_classes, with_codebook=has_codebook)
    rng = np.random.default_rng(settings.seed + 600)
    mode = "conditional" if with_classes else "unconditional"
    samples = generate(decoder, codebook, mode, count, settings.flow, rng, class_k=class_k, rf_steps=settings.rf_steps)
    out_dir = settings.out or Path(".")
    write_samples(out_dir / "samples.csv", samples)
    click.echo(f"wrote {count} samples")


@main.command("eval-prior")
@common_options
@click.option("--anchors", "anchor_count", type=int, default=16, show_default=True)
@click.option("--draws", type=int, default=10000, show_default=True, help="Noise draws per anchor.")
@_guard
def cmd_eval_prior(config, seed, out, threads, anchor_count, draws):
    """Gaussian-prior test of pooled latents over circle-arranged anchors."""
    settings = _settings(config, seed, out, threads)
    angles = 2.0 * np.pi * np.arange(anchor_count) / anchor_count
    anchors = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    A = AnchorSet(anchors)
    rng = np.random.default_rng(settings.seed)
    from .flow import compute_latents

    rep = np.repeat(anchors, draws, axis=0)
    chunk = 40_000
    outs = []
    with T.no_grad():
        for lo in range(0, rep.shape[0], chunk):
            outs.append(compute_latents(rep[lo : lo + chunk], A, settings.flow, rng).data)
    latents = np.concatenate(outs, axis=0)
    report = gaussian_prior_test(latents, rng=np.random.default_rng(settings.seed + 1))
    entries = {
        "mean_norm": report.mean_norm,
        "cov_err": report.cov_err,
        "energy_to_gaussian": report.energy_to_gaussian,
    }
    if settings.out:
        write_report(settings.out / "prior_report.csv", entries)
    for key, value in entries.items():
        click.echo(f"{key} {value:.6f}")


@main.command("eval-zones")
@common_options
@click.option("--draws", type=int, default=20000, show_default=True)
@_guard
def cmd_eval_zones(config, seed, out, threads, draws):
    """Empirical vs closed-form misassignment over a guard sweep (1D pair)."""
    settings = _settings(config, seed, out, threads)
    from scipy.stats import norm

    lines = ["g,empirical,theoretical,draws"]
    for g in (0.5, 0.25, 0.1, 0.01):
        cfg = FlowConfig(g=g, alpha=1.0, grid=uniform_grid(g, settings.flow.steps))
        A = AnchorSet(np.array([[-1.0], [1.0]]))
        rate = misassignment_rate(A, cfg, draws, np.random.default_rng(settings.seed))
        theory = float(norm.cdf((g - 1.0) / g))
        lines.append(f"{g},{rate!r},{theory!r},{draws}")
        click.echo(lines[-1])
    if settings.out:
        (settings.out / "zones.csv").write_text("\n".join(lines) + "\n")


@main.command("grad-check")
@common_options
@_guard
def cmd_grad_check(config, seed, out, threads):
    """Finite-difference check of the alignment loss on a tiny problem."""
    settings = _settings(config, seed, out, threads)
    from .alignment import Pairing, align_loss
    from .flow import compute_latents, integrate_forward
    from .tensor import Tensor, squared_norm

    rng = np.random.default_rng(settings.seed)
    grid = uniform_grid(0.05, 10)
    cfg = FlowConfig(g=0.05, alpha=1.0, grid=grid, cutoff_u=2)
    eps = rng.standard_normal((2, 2))
    pairing = Pairing(np.array([0, 1]))
    theta0 = Tensor(rng.standard_normal((2, 2)))

    def f(theta):
        A = AnchorSet(theta)
        from .flow import integrate_backward

        z = integrate_backward(theta, eps, A, cfg)
        traj = integrate_forward(z, A, cfg, record=True)
        return align_loss(A, traj, pairing, AlignmentConfig(cutoff_u=2, use_log=False))

    report = grad_check(f, theta0, h=1e-6, tol=1e-4)
    click.echo(f"max rel err {report.max_rel_err:.3e}")
    sys.exit(0 if report.passed else 1)


@main.command("zone-map")
@common_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), default=None)
@click.option("--grid-n", type=int, default=200, show_default=True)
@click.option("--lo", type=float, default=-3.0, show_default=True)
@click.option("--hi", type=float, default=3.0, show_default=True)
@click.option("--anchors", "anchor_count", type=int, default=8, show_default=True)
@_guard
def cmd_zone_map(config, seed, out, threads, checkpoint_path, grid_n, lo, hi, anchor_count):
    """Hard zone index over a 2D latent grid, for external plotting."""
    settings = _settings(config, seed, out, threads)
    ds = settings.dataset()
    if checkpoint_path:
        encoder, _, _ = _load_models(settings, checkpoint_path)
        with T.no_grad():
            anchors = encoder.encode(ds.points[:anchor_count]).data
    else:
        # class means as anchors
        anchors = np.stack([ds.points[ds.labels == c].mean(axis=0) for c in range(ds.num_classes)])
    pts, zones = zone_map_grid(AnchorSet(anchors), settings.flow, grid_n=grid_n, lo=lo, hi=hi)
    out_dir = settings.out or Path(".")
    lines = ["x0,x1,zone"]
    for (x0, x1), zone in zip(pts, zones):
        lines.append(f"{x0!r},{x1!r},{zone}")
    (out_dir / "zone_map.csv").write_text("\n".join(lines) + "\n")
    click.echo(f"wrote {pts.shape[0]} grid cells")


if __name__ == "__main__":
    main()
