"""Checkpoint binary format, CSV writers, and the config file loader.

Checkpoint layout (little-endian): magic ``LZNC``, u32 version=1, u32 tensor
count; per tensor u32 name length, UTF-8 name, u32 rank, u64 dims, f64 payload.
CSV dialect: comma separated, ``.`` decimal, LF line endings, no quoting.
Config files are INI-style sections of key = value pairs.
"""
from __future__ import annotations

import configparser
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LZNC"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


class ConfigError(RuntimeError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        # note: ascontiguousarray would promote rank-0 arrays to rank 1
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    view = memoryview(blob)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise CheckpointError(f"truncated checkpoint {path} at byte {off}")
        out = view[off : off + n]
        off += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).copy()
        out[name] = arr
    if off != len(view):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return out


# ---------------------------------------------------------------------------
# CSV


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_samples(path, points: np.ndarray, labels: np.ndarray | None = None):
    points = np.asarray(points, dtype=np.float64)
    d = points.shape[1] if points.size else 2
    header = ",".join(f"x{j}" for j in range(d))
    if labels is not None:
        header += ",label"
    lines = [header]
    for i in range(points.shape[0]):
        row = ",".join(_fmt(v) for v in points[i])
        if labels is not None:
            row += f",{int(labels[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


METRIC_HEADER = "iter,loss_total,loss_rf,loss_align,grad_norm,wall_ms"


def write_metrics(path, rows: list[tuple]):
    """Append metric rows, writing the header only for a new/empty file."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a") as fh:
        if new:
            fh.write(METRIC_HEADER + "\n")
        for row in rows:
            it, lt, lr, la, gn, wall = row
            fh.write(f"{int(it)},{_fmt(lt)},{_fmt(lr)},{_fmt(la)},{_fmt(gn)},{int(wall)}\n")


def write_report(path, entries: dict[str, float]):
    lines = ["metric,value"]
    for key, value in entries.items():
        lines.append(f"{key},{_fmt(value)}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# config files


def load_config_file(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        with path.open() as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return parser


def dump_config(parser: configparser.ConfigParser) -> str:
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        for key, value in parser.items(section):
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
