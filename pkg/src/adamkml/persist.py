"""On-disk formats: binary checkpoints, text importance reports, flat configs.

Checkpoint layout (all integers little-endian)::

    b"AKMD"  u32 version
    u32 len  arch descriptor as UTF-8 JSON
    u64 rng_seed  u64 iteration
    u32 count, then per tensor:
        u16 name_len, name, u8 dtype (0 = f64), u8 rank, rank x u64 dims, f64 payload
    u32 count, then per kernel row:
        u16 name_len, name, u8 mode tag
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, FormatError, UnsupportedVersionError
from .importance import MEASURES, ImportanceReport
from .modulation import MODES, AdaptedModel, build_layer
from .nets import ArchDescriptor, GanPair

MAGIC = b"AKMD"
FORMAT_VERSION = 1
DTYPE_F64 = 0
MODE_TAGS = {m: i for i, m in enumerate(MODES)}


@dataclass
class Checkpoint:
    arch: ArchDescriptor
    tensors: dict[str, np.ndarray]
    rng_seed: int = 0
    iteration: int = 0
    kernel_modes: dict[str, str] = field(default_factory=dict)


# ---------------------------------------------------------------- model <-> checkpoint

def checkpoint_from_gan(gan: GanPair, rng_seed: int = 0, iteration: int = 0) -> Checkpoint:
    modes = {f"{s.name}.weight[{i}]": "finetune" for s in gan.arch.layers() for i in range(s.c_out)}
    return Checkpoint(gan.arch, {k: v.copy() for k, v in gan.params.items()}, rng_seed, iteration, modes)


def checkpoint_from_model(model: AdaptedModel, rng_seed: int = 0, iteration: int = 0) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, layer in model.layers.items():
        tensors[f"{name}.weight"] = layer.stored_weight()
        tensors[f"{name}.bias"] = layer.stored_bias()
        mk = layer.modulated
        if mk is not None:
            for key, t in mk.trainable().items():
                tensors[f"{name}.{key}"] = t.data.copy()
    return Checkpoint(model.arch, tensors, rng_seed, iteration, model.kernel_modes())


def model_from_checkpoint(ckpt: Checkpoint) -> AdaptedModel:
    layers = {}
    for spec in ckpt.arch.layers():
        modes = [ckpt.kernel_modes.get(f"{spec.name}.weight[{i}]", "finetune") for i in range(spec.c_out)]
        extra = {k: ckpt.tensors[f"{spec.name}.{k}"] for k in ("m1", "m2", "gamma", "beta")
                 if f"{spec.name}.{k}" in ckpt.tensors}
        layers[spec.name] = build_layer(spec, ckpt.tensors[f"{spec.name}.weight"],
                                        ckpt.tensors[f"{spec.name}.bias"], modes, extra=extra)
    return AdaptedModel(ckpt.arch, layers)


def source_gan(ckpt: Checkpoint) -> GanPair:
    """Raw stored weights; for a pretrained checkpoint these are the source model."""
    return GanPair(ckpt.arch, {f"{s.name}.{p}": ckpt.tensors[f"{s.name}.{p}"].copy()
                               for s in ckpt.arch.layers() for p in ("weight", "bias")})


def effective_gan(ckpt: Checkpoint) -> GanPair:
    return model_from_checkpoint(ckpt).to_gan()


# ---------------------------------------------------------------- binary checkpoint

def _name(buf: io.BytesIO, name: str) -> None:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"name too long: {name[:40]}...")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    arch = ckpt.arch.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(arch)))
    buf.write(arch)
    buf.write(struct.pack("<QQ", ckpt.rng_seed, ckpt.iteration))
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        _name(buf, name)
        buf.write(struct.pack("<BB", DTYPE_F64, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    buf.write(struct.pack("<I", len(ckpt.kernel_modes)))
    for name, mode in ckpt.kernel_modes.items():
        _name(buf, name)
        buf.write(struct.pack("<B", MODE_TAGS[mode]))
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.path}: name is not UTF-8") from None


def parse_checkpoint(raw: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    (version,) = r.unpack("<I")
    if version > FORMAT_VERSION or version == 0:
        raise UnsupportedVersionError(f"{path}: format version {version} (supported: {FORMAT_VERSION})")
    (arch_len,) = r.unpack("<I")
    try:
        arch = ArchDescriptor.from_json(r.take(arch_len).decode("utf-8"))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad arch descriptor ({exc})") from None
    seed, iteration = r.unpack("<QQ")
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.name()
        dtype, rank = r.unpack("<BB")
        if dtype != DTYPE_F64:
            raise FormatError(f"{path}: unsupported dtype tag {dtype} for {name}")
        dims = r.unpack(f"<{rank}Q")
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor {name}")
        tensors[name] = arr
    (count,) = r.unpack("<I")
    modes: dict[str, str] = {}
    for _ in range(count):
        name = r.name()
        (tag,) = r.unpack("<B")
        if tag >= len(MODES):
            raise FormatError(f"{path}: unknown mode tag {tag}")
        modes[name] = MODES[tag]
    if r.pos != len(raw):
        raise FormatError(f"{path}: trailing bytes")
    return Checkpoint(arch, tensors, seed, iteration, modes)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    try:
        atomic_write(path, checkpoint_bytes(ckpt))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write checkpoint: {exc.strerror}", str(path)) from exc


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), path)


# ---------------------------------------------------------------- importance report

def report_text(report: ImportanceReport) -> str:
    lines = [f"t_h={report.t_h} measure={report.measure_kind} threshold={float(report.threshold_value)!r}"]
    for kid, v in report.kernel_fi.items():
        lines.append(f"{kid} {float(v)!r} {int(kid in report.important)}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> ImportanceReport:
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty report")
    try:
        head = dict(tok.split("=", 1) for tok in lines[0].split())
        t_h = int(head["t_h"])
        measure = head["measure"]
        thr = float(head["threshold"])
    except (ValueError, KeyError):
        raise FormatError(f"bad report header: {lines[0]!r}") from None
    if measure not in MEASURES or not 0 <= t_h <= 100 or set(head) != {"t_h", "measure", "threshold"}:
        raise FormatError(f"bad report header: {lines[0]!r}")
    fi: dict[str, float] = {}
    important = set()
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise FormatError(f"bad report line: {ln!r}")
        kid, val = parts[0], float(parts[1])
        if kid in fi:
            raise FormatError(f"duplicate kernel {kid}")
        if val < 0 or not np.isfinite(val):
            raise FormatError(f"invalid importance for {kid}")
        fi[kid] = val
        if parts[2] == "1":
            important.add(kid)
        if (val > thr) != (parts[2] == "1"):
            raise FormatError(f"mask bit for {kid} disagrees with the threshold")
    if not fi:
        raise FormatError("report has no kernels")
    return ImportanceReport(fi, t_h, thr, important, measure)


def write_report(report: ImportanceReport, path) -> None:
    atomic_write(path, report_text(report).encode("utf-8"))


def read_report(path) -> ImportanceReport:
    return parse_report(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- config

CONFIG_KEYS: dict[str, type] = {
    "arch": str,
    "latent_dim": int,
    "iter_pretrain": int,
    "iter_probe": int,
    "iter_adapt": int,
    "eval_interval": int,
    "lr": float,
    "batch_size": int,
    "t_h": int,
    "strategy": str,
    "k_shots": int,
    "seed": int,
    "ewc_lambda": float,
    "source_domain": str,
    "target_domain": str,
    "out_dir": str,
}


def parse_config(text: str) -> dict:
    cfg: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in cfg:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            cfg[key] = CONFIG_KEYS[key](value)
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} expects {CONFIG_KEYS[key].__name__}, got {value!r}") from None
    return cfg


def format_config(cfg: Mapping) -> str:
    """Canonical text: known keys in fixed order, one ``key = value`` per line."""
    for key in cfg:
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}")
    return "".join(f"{k} = {cfg[k]!r}\n" if CONFIG_KEYS[k] is float else f"{k} = {cfg[k]}\n"
                   for k in CONFIG_KEYS if k in cfg)


def load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
