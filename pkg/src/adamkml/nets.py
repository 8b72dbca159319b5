"""Tiny generator/discriminator architectures.

``mlp2d`` is an MLP GAN for 2-D point clouds; ``conv16`` is a conv GAN for
1x16x16 images in [-1, 1]. Weights live in plain dicts of numpy arrays keyed
by stable names such as ``G.l0.weight``; forward passes take a dict of
Tensors so callers can substitute modulated kernels.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import InvalidArgumentError, InvalidShapeError

ARCH_KINDS = ("mlp2d", "conv16")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "linear" | "conv"
    c_in: int
    c_out: int
    k: int = 1
    stride: int = 1
    padding: int = 0
    activation: str = "leaky_relu"  # leaky_relu | tanh | none
    upsample: bool = False  # nearest 2x before the conv
    reshape_to: tuple[int, ...] | None = None  # applied after the activation
    modulatable: bool = True  # whether its rows count as kernels

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "linear":
            return (self.c_out, self.c_in)
        return (self.c_out, self.c_in, self.k, self.k)


@dataclass(frozen=True)
class ArchDescriptor:
    kind: str
    latent_dim: int
    generator: tuple[LayerSpec, ...]
    discriminator: tuple[LayerSpec, ...]
    sample_shape: tuple[int, ...]

    def layers(self) -> list[LayerSpec]:
        return list(self.generator) + list(self.discriminator)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ArchDescriptor":
        raw = json.loads(text)

        def layer(d):
            d = dict(d)
            if d.get("reshape_to") is not None:
                d["reshape_to"] = tuple(d["reshape_to"])
            return LayerSpec(**d)

        return cls(
            kind=raw["kind"],
            latent_dim=int(raw["latent_dim"]),
            generator=tuple(layer(d) for d in raw["generator"]),
            discriminator=tuple(layer(d) for d in raw["discriminator"]),
            sample_shape=tuple(raw["sample_shape"]),
        )


@dataclass
class GanPair:
    arch: ArchDescriptor
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def latent_dim(self) -> int:
        return self.arch.latent_dim

    @property
    def arch_kind(self) -> str:
        return self.arch.kind

    def copy(self) -> "GanPair":
        return GanPair(self.arch, {k: v.copy() for k, v in self.params.items()})

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}


def _mlp_arch(latent_dim: int, hidden: int) -> ArchDescriptor:
    g = (
        LayerSpec("G.l0", "linear", latent_dim, hidden),
        LayerSpec("G.l1", "linear", hidden, hidden),
        LayerSpec("G.l2", "linear", hidden, hidden),
        LayerSpec("G.l3", "linear", hidden, 2, activation="none"),
    )
    d = (
        LayerSpec("D.l0", "linear", 2, hidden),
        LayerSpec("D.l1", "linear", hidden, hidden),
        LayerSpec("D.l2", "linear", hidden, hidden),
        LayerSpec("D.l3", "linear", hidden, 1, activation="none"),
    )
    return ArchDescriptor("mlp2d", latent_dim, g, d, (2,))


def _conv_arch(latent_dim: int, width: int) -> ArchDescriptor:
    c1, c2 = width, width // 2
    g = (
        LayerSpec("G.l0", "linear", latent_dim, c1 * 16, reshape_to=(c1, 4, 4), modulatable=False),
        LayerSpec("G.l1", "conv", c1, c2, k=3, padding=1, upsample=True),
        LayerSpec("G.l2", "conv", c2, 1, k=3, padding=1, upsample=True, activation="tanh"),
    )
    d = (
        LayerSpec("D.l0", "conv", 1, c2, k=3, stride=2, padding=1),
        LayerSpec("D.l1", "conv", c2, c1, k=3, stride=2, padding=1, reshape_to=(c1 * 16,)),
        LayerSpec("D.l2", "linear", c1 * 16, 1, activation="none", modulatable=False),
    )
    return ArchDescriptor("conv16", latent_dim, g, d, (1, 16, 16))


def build_arch(arch_kind: str, latent_dim: int, width: int | None = None) -> ArchDescriptor:
    if latent_dim < 1:
        raise InvalidArgumentError("latent_dim must be >= 1")
    if arch_kind == "mlp2d":
        return _mlp_arch(latent_dim, width or 64)
    if arch_kind == "conv16":
        return _conv_arch(latent_dim, width or 32)
    raise InvalidArgumentError(f"unknown arch_kind {arch_kind!r}")


def init_params(arch: ArchDescriptor, seed: int) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases, one independent stream per layer."""
    params: dict[str, np.ndarray] = {}
    for i, spec in enumerate(arch.layers()):
        rng = np.random.default_rng([seed, i])
        fan_in = spec.c_in * spec.k * spec.k
        params[f"{spec.name}.weight"] = rng.standard_normal(spec.weight_shape) * np.sqrt(2.0 / fan_in)
        params[f"{spec.name}.bias"] = np.zeros(spec.c_out)
    return params


def build_gan(arch_kind: str, latent_dim: int, seed: int, width: int | None = None) -> GanPair:
    arch = build_arch(arch_kind, latent_dim, width)
    return GanPair(arch, init_params(arch, seed))


def kernel_layers(arch: ArchDescriptor, network: str | None = None) -> list[LayerSpec]:
    """Layers whose filters are kernels (conv16 keeps its linear layers out)."""
    return [s for s in arch.layers() if s.modulatable and (network is None or s.name.startswith(network))]


def kernel_ids(arch: ArchDescriptor, network: str | None = None) -> list[str]:
    """One id per output filter/row of every kernel layer, e.g. ``G.l1.weight[3]``."""
    return [f"{s.name}.weight[{i}]" for s in kernel_layers(arch, network) for i in range(s.c_out)]


def parse_kernel_id(kid: str) -> tuple[str, int]:
    """``"G.l1.weight[3]"`` -> ``("G.l1", 3)``."""
    m = re.fullmatch(r"(.+)\.weight\[(\d+)\]", kid)
    if m is None:
        raise InvalidArgumentError(f"malformed kernel id {kid!r}")
    return m.group(1), int(m.group(2))


def _run(layers, weights: Mapping[str, Tensor], h: Tensor) -> Tensor:
    for spec in layers:
        w = weights[f"{spec.name}.weight"]
        b = weights[f"{spec.name}.bias"]
        if spec.kind == "linear":
            h = dc.linear(h, w, b)
        else:
            if spec.upsample:
                h = dc.upsample2x(h)
            h = dc.conv2d(h, w, b, stride=spec.stride, padding=spec.padding)
        if spec.activation == "leaky_relu":
            h = dc.leaky_relu(h)
        elif spec.activation == "tanh":
            h = dc.tanh(h)
        if spec.reshape_to is not None:
            h = dc.reshape(h, (h.shape[0],) + tuple(spec.reshape_to))
    return h


def forward_generator(arch: ArchDescriptor, weights: Mapping[str, Tensor], z) -> Tensor:
    z = dc.as_tensor(z)
    if z.data.ndim != 2 or z.shape[1] != arch.latent_dim:
        raise InvalidShapeError(f"z must be [N, {arch.latent_dim}], got {z.shape}")
    if z.shape[0] == 0:
        return Tensor(np.zeros((0,) + arch.sample_shape))
    return _run(arch.generator, weights, z)


def forward_discriminator(arch: ArchDescriptor, weights: Mapping[str, Tensor], x) -> Tensor:
    x = dc.as_tensor(x)
    if x.shape[1:] != arch.sample_shape:
        raise InvalidShapeError(f"samples must be [N, {arch.sample_shape}], got {x.shape}")
    if x.shape[0] == 0:
        return Tensor(np.zeros(0))
    out = _run(arch.discriminator, weights, x)
    return dc.reshape(out, (x.shape[0],))


def generate(gan: GanPair, z) -> Tensor:
    return forward_generator(gan.arch, gan.tensors(), z)


def discriminate(gan: GanPair, x) -> Tensor:
    return forward_discriminator(gan.arch, gan.tensors(), x)


def sample_latent(n: int, latent_dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n, latent_dim))


def total_param_count(arch: ArchDescriptor) -> int:
    return sum(int(np.prod(s.weight_shape)) + s.c_out for s in arch.layers())
