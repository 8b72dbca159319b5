"""Kernel update strategies and trainable-parameter accounting.

A *kernel* is one output filter (conv) or one output row (linear) of a
weight. ``ModulatedKernel`` applies a single mode to a set of rows of one
weight; ``AdaptedLayer`` stitches rows in different modes back into a full
weight so that every filter has exactly one mode.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import InvalidArgumentError
from .nets import ArchDescriptor, GanPair, LayerSpec

MODES = ("kml", "adafm", "freeze", "finetune")
INIT_STD = 0.01


@dataclass
class ModulatedKernel:
    """A base weight plus the parameters of one update mode.

    ``rows`` lists the filters the mode applies to (``d_out`` of them); the
    remaining filters pass through as ``base_W``. In ``kml`` mode the
    modulated rows are ``W[rows] * (1 + reshape(outer(m1, m2)))``; in
    ``adafm`` mode ``gamma[i, j] * W[i, j] + beta[i, j]``.
    """

    base_W: Tensor
    mode: str
    rows: np.ndarray
    m1: Tensor | None = None
    m2: Tensor | None = None
    gamma: Tensor | None = None
    beta: Tensor | None = None

    @property
    def d_out(self) -> int:
        return len(self.rows)

    @property
    def c_out(self) -> int:
        return self.base_W.shape[0]

    @property
    def c_in(self) -> int:
        return self.base_W.shape[1]

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.base_W.shape[1:]))

    def trainable(self) -> dict[str, Tensor]:
        if self.mode == "kml":
            return {"m1": self.m1, "m2": self.m2}
        if self.mode == "adafm":
            return {"gamma": self.gamma, "beta": self.beta}
        if self.mode == "finetune":
            return {"weight": self.base_W}
        return {}


def init_modulation(base_W, mode: str, d_out: int | None = None, rng: np.random.Generator | None = None,
                    rows: Sequence[int] | None = None, init_std: float = INIT_STD) -> ModulatedKernel:
    """Wrap ``base_W`` in ``mode``. kml draws m1, m2 from N(0, init_std^2); adafm starts at identity."""
    if mode not in MODES:
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    base = np.asarray(base_W.data if isinstance(base_W, Tensor) else base_W, dtype=np.float64)
    c_out = base.shape[0]
    if rows is None:
        d_out = c_out if d_out is None else d_out
        if not 0 <= d_out <= c_out:
            raise InvalidArgumentError(f"d_out={d_out} must be in [0, c_out={c_out}]")
        rows = np.arange(d_out)
    else:
        rows = np.asarray(rows, dtype=np.intp)
        if d_out is not None and d_out != len(rows):
            raise InvalidArgumentError("d_out disagrees with len(rows)")
        if len(rows) > c_out or len(np.unique(rows)) != len(rows) or (len(rows) and (rows.min() < 0 or rows.max() >= c_out)):
            raise InvalidArgumentError("rows must be distinct filter indices")
    if mode == "finetune":
        return ModulatedKernel(Tensor(base.copy(), requires_grad=True), mode, np.arange(c_out))
    if mode == "freeze":
        return ModulatedKernel(Tensor(base), mode, rows)
    mk = ModulatedKernel(Tensor(base), mode, rows)
    fan_in = int(np.prod(base.shape[1:]))
    if mode == "kml":
        rng = rng if rng is not None else np.random.default_rng(0)
        mk.m1 = Tensor(rng.normal(0.0, init_std, len(rows)), requires_grad=True)
        mk.m2 = Tensor(rng.normal(0.0, init_std, fan_in), requires_grad=True)
    else:
        mk.gamma = Tensor(np.ones((len(rows), base.shape[1])), requires_grad=True)
        mk.beta = Tensor(np.zeros((len(rows), base.shape[1])), requires_grad=True)
    return mk


def modulated_rows(mk: ModulatedKernel) -> Tensor:
    """Effective weights of the rows in ``mk.rows`` only, shape [d_out, ...]."""
    base = mk.base_W.data[mk.rows]
    if mk.mode == "kml":
        m = dc.reshape(dc.outer_product(mk.m1, mk.m2), base.shape)
        return dc.hadamard(Tensor(base), dc.add(Tensor(np.ones(base.shape)), m))
    if mk.mode == "adafm":
        extra = (1,) * (base.ndim - 2)
        g = dc.expand(dc.reshape(mk.gamma, mk.gamma.shape + extra), base.shape)
        b = dc.expand(dc.reshape(mk.beta, mk.beta.shape + extra), base.shape)
        return dc.add(dc.hadamard(g, Tensor(base)), b)
    if mk.mode == "finetune":
        return dc.take_rows(mk.base_W, mk.rows) if len(mk.rows) != mk.c_out else mk.base_W
    return Tensor(base)


def effective_kernel(mk: ModulatedKernel) -> Tensor:
    """Full [c_out, ...] effective weight; rows outside ``mk.rows`` are the base."""
    if mk.mode in ("freeze", "finetune"):
        return mk.base_W
    mod = modulated_rows(mk)
    if len(mk.rows) == mk.c_out and (mk.rows == np.arange(mk.c_out)).all():
        return mod
    rest = np.setdiff1d(np.arange(mk.c_out), mk.rows)
    return dc.assemble_rows([(mod, mk.rows), (Tensor(mk.base_W.data[rest]), rest)], mk.c_out)


def trainable_param_count(kernel_shape: Sequence[int], mode: str, d_out: int | None = None) -> int:
    c_out = int(kernel_shape[0])
    c_in = int(kernel_shape[1])
    fan_in = int(np.prod(kernel_shape[1:]))
    d_out = c_out if d_out is None else d_out
    if mode == "kml":
        return d_out + fan_in
    if mode == "adafm":
        return 2 * d_out * c_in
    if mode == "finetune":
        return c_out * fan_in
    if mode == "freeze":
        return 0
    raise InvalidArgumentError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------- per-layer assembly

@dataclass
class AdaptedLayer:
    """One weight + bias whose filters are each in exactly one mode.

    The bias is not part of any kernel: it is either frozen or trained as a
    whole (``ft_bias``), independent of the row modes.
    """

    spec: LayerSpec
    base: np.ndarray
    bias_base: np.ndarray
    row_modes: list[str]
    modulated: ModulatedKernel | None = None  # kml or adafm rows
    ft_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    ft_weight: Tensor | None = None
    ft_bias: Tensor | None = None

    @property
    def name(self) -> str:
        return self.spec.name

    def rows_in(self, *modes: str) -> np.ndarray:
        return np.array([i for i, m in enumerate(self.row_modes) if m in modes], dtype=np.intp)

    def effective_weight(self) -> Tensor:
        c_out = self.base.shape[0]
        if self.ft_weight is not None and len(self.ft_rows) == c_out:
            return self.ft_weight
        parts = []
        if self.modulated is not None:
            parts.append((modulated_rows(self.modulated), self.modulated.rows))
        if self.ft_weight is not None:
            parts.append((self.ft_weight, self.ft_rows))
        frozen = self.rows_in("freeze")
        if len(frozen):
            parts.append((Tensor(self.base[frozen]), frozen))
        if len(parts) == 1 and (parts[0][1] == np.arange(c_out)).all():
            return parts[0][0]
        return dc.assemble_rows(parts, c_out)

    def effective_bias(self) -> Tensor:
        return Tensor(self.bias_base) if self.ft_bias is None else self.ft_bias

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        if self.modulated is not None:
            for k, v in self.modulated.trainable().items():
                out[f"{self.name}.{k}"] = v
        if self.ft_weight is not None:
            out[f"{self.name}.weight"] = self.ft_weight
        if self.ft_bias is not None:
            out[f"{self.name}.bias"] = self.ft_bias
        return out

    def stored_weight(self) -> np.ndarray:
        """Base weight with finetuned rows written back in."""
        w = self.base.copy()
        if self.ft_weight is not None:
            w[self.ft_rows] = self.ft_weight.data
        return w

    def stored_bias(self) -> np.ndarray:
        return self.bias_base.copy() if self.ft_bias is None else self.ft_bias.data.copy()


def build_layer(spec: LayerSpec, weight: np.ndarray, bias: np.ndarray, row_modes: Sequence[str],
                rng: np.random.Generator | None = None, init_std: float = INIT_STD,
                extra: dict[str, np.ndarray] | None = None, train_bias: bool = True) -> AdaptedLayer:
    """Wrap one layer. ``extra`` restores saved m1/m2/gamma/beta instead of a fresh init."""
    row_modes = list(row_modes)
    if len(row_modes) != spec.c_out:
        raise InvalidArgumentError(f"{spec.name}: need {spec.c_out} row modes, got {len(row_modes)}")
    for m in row_modes:
        if m not in MODES:
            raise InvalidArgumentError(f"unknown mode {m!r}")
    layer = AdaptedLayer(spec, np.array(weight, dtype=np.float64), np.array(bias, dtype=np.float64), row_modes)
    kinds = {m for m in row_modes if m in ("kml", "adafm")}
    if len(kinds) > 1:
        raise InvalidArgumentError(f"{spec.name}: kml and adafm rows cannot share a layer")
    if kinds:
        mode = kinds.pop()
        rows = layer.rows_in(mode)
        mk = init_modulation(layer.base, mode, rows=rows, rng=rng, init_std=init_std)
        if extra:
            for key in ("m1", "m2", "gamma", "beta"):
                if key in extra:
                    getattr(mk, key).data = np.array(extra[key], dtype=np.float64)
        layer.modulated = mk
    ft = layer.rows_in("finetune")
    if len(ft):
        layer.ft_rows = ft
        layer.ft_weight = Tensor(layer.base[ft].copy(), requires_grad=True)
    if train_bias:
        layer.ft_bias = Tensor(layer.bias_base.copy(), requires_grad=True)
    return layer


class AdaptedModel:
    """A GAN whose weights are assembled from per-layer update modes."""

    def __init__(self, arch: ArchDescriptor, layers: dict[str, AdaptedLayer]):
        self.arch = arch
        self.layers = layers

    @classmethod
    def from_gan(cls, gan: GanPair, modes: dict[str, Sequence[str]] | str,
                 rng: np.random.Generator | None = None, init_std: float = INIT_STD,
                 train_bias: bool = True) -> "AdaptedModel":
        """``modes`` maps layer name to per-row modes, or is one mode for every row."""
        layers = {}
        for spec in gan.arch.layers():
            rm = [modes] * spec.c_out if isinstance(modes, str) else modes[spec.name]
            layers[spec.name] = build_layer(spec, gan.params[f"{spec.name}.weight"],
                                            gan.params[f"{spec.name}.bias"], rm, rng=rng, init_std=init_std,
                                            train_bias=train_bias)
        return cls(gan.arch, layers)

    def weights(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in self.layers.items():
            out[f"{name}.weight"] = layer.effective_weight()
            out[f"{name}.bias"] = layer.effective_bias()
        return out

    def trainable(self, network: str | None = None) -> dict[str, Tensor]:
        out = {}
        for name, layer in self.layers.items():
            if network is None or name.startswith(network):
                out.update(layer.trainable())
        return out

    def kernel_modes(self) -> dict[str, str]:
        return {f"{n}.weight[{i}]": m for n, l in self.layers.items() for i, m in enumerate(l.row_modes)}

    def effective_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.weights().items()}

    def to_gan(self) -> GanPair:
        """Plain GAN carrying the effective weights."""
        return GanPair(self.arch, self.effective_arrays())

    def trainable_count(self, network: str | None = None) -> int:
        return sum(t.data.size for t in self.trainable(network).values())


def modes_from_mask(arch: ArchDescriptor, important: Iterable[str], inside: str, outside: str,
                    other: str = "finetune") -> dict[str, list[str]]:
    """Per-row modes: ``inside`` for kernel ids in ``important``, ``outside`` otherwise.

    Rows of non-kernel layers get ``other``.
    """
    important = set(important)
    out = {}
    for s in arch.layers():
        if not s.modulatable:
            out[s.name] = [other] * s.c_out
        else:
            out[s.name] = [inside if f"{s.name}.weight[{i}]" in important else outside for i in range(s.c_out)]
    return out


def uniform_modes(arch: ArchDescriptor, mode: str, other: str = "finetune") -> dict[str, list[str]]:
    return {s.name: [mode if s.modulatable else other] * s.c_out for s in arch.layers()}
