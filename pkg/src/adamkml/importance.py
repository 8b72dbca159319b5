"""Kernel importance from probing gradients.

Fisher information of a parameter is estimated by the mean squared gradient
of the discriminator loss over the probing steps. A kernel's score combines
the FI of its own row-scale ``m1[i]`` with the average FI of the shared
``m2`` vector; the full chain-rule expansion is kept as an oracle.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import InvalidArgumentError, SingularityError, UnknownParameterError

MEASURES = ("fisher", "class_saliency")


class FisherAccumulator:
    """Running sums of g^2 and |g| per parameter over optimizer steps."""

    def __init__(self, shapes: Mapping[str, tuple] | None = None):
        self.sq_sums: dict[str, np.ndarray] = {}
        self.abs_sums: dict[str, np.ndarray] = {}
        self.steps = 0
        for name, shape in (shapes or {}).items():
            self.register(name, shape)

    def register(self, name: str, shape) -> None:
        self.sq_sums[name] = np.zeros(shape)
        self.abs_sums[name] = np.zeros(shape)

    def accumulate(self, grads: Mapping[str, np.ndarray]) -> "FisherAccumulator":
        for name in grads:
            if name not in self.sq_sums:
                raise UnknownParameterError(name)
        for name, g in grads.items():
            g = np.asarray(g, dtype=np.float64).reshape(self.sq_sums[name].shape)
            self.sq_sums[name] += g * g
            self.abs_sums[name] += np.abs(g)
        self.steps += 1
        return self

    def _check(self, name: str) -> None:
        if name not in self.sq_sums:
            raise UnknownParameterError(name)
        if self.steps == 0:
            raise InvalidArgumentError("no gradient steps accumulated")

    def fisher(self, name: str) -> np.ndarray:
        self._check(name)
        return self.sq_sums[name] / self.steps

    def saliency(self, name: str) -> np.ndarray:
        self._check(name)
        return self.abs_sums[name] / self.steps

    def names(self) -> list[str]:
        return list(self.sq_sums)


def accumulate(acc: FisherAccumulator, grads: Mapping[str, np.ndarray]) -> FisherAccumulator:
    return acc.accumulate(grads)


def kernel_fi_estimate(fi_m1_i: float, fi_m2) -> float:
    """F(m1[i]) + mean_j F(m2[j])."""
    fi_m2 = np.asarray(fi_m2, dtype=np.float64)
    if fi_m2.size == 0:
        raise InvalidArgumentError("m2 is empty")
    return float(fi_m1_i + fi_m2.mean())


def layer_kernel_scores(score_m1, score_m2) -> np.ndarray:
    """Vectorised ``kernel_fi_estimate`` over the rows of one layer."""
    score_m2 = np.asarray(score_m2, dtype=np.float64)
    if score_m2.size == 0:
        raise InvalidArgumentError("m2 is empty")
    return np.asarray(score_m1, dtype=np.float64) + score_m2.mean()


def kernel_fi_oracle(m1_i, m2, dL_dm1_i, dL_dm2) -> float:
    """Full FI of one modulation matrix via the chain rule, averaged over steps.

    Arguments may carry a leading step axis (``m1_i``/``dL_dm1_i`` of shape
    [T], ``m2``/``dL_dm2`` of shape [T, P]); a single step is also accepted.
    Each step contributes
    sum_j g1^2/(4 m2_j^2) + g2_j^2/(4 m1^2) + g1 g2_j / (2 m1 m2_j).
    """
    m1 = np.atleast_1d(np.asarray(m1_i, dtype=np.float64))
    g1 = np.atleast_1d(np.asarray(dL_dm1_i, dtype=np.float64))
    m2 = np.asarray(m2, dtype=np.float64)
    g2 = np.asarray(dL_dm2, dtype=np.float64)
    if m2.ndim == 1:
        m2, g2 = m2[None], g2[None]
    if m2.shape[1] == 0:
        raise InvalidArgumentError("m2 is empty")
    if (m1 == 0).any() or (m2 == 0).any():
        raise SingularityError("modulation parameter is exactly zero")
    f1 = g1 * g1
    f2 = g2 * g2
    per_step = (f1[:, None] / (4 * m2 * m2)
                + f2 / (4 * (m1 * m1)[:, None])
                + (g1[:, None] * g2) / (2 * m1[:, None] * m2)).sum(axis=1)
    return float(per_step.mean())


@dataclass
class ImportanceReport:
    kernel_fi: dict[str, float]
    t_h: int
    threshold_value: float
    important: set[str] = field(default_factory=set)
    measure_kind: str = "fisher"

    def mask(self) -> dict[str, int]:
        return {k: int(k in self.important) for k in self.kernel_fi}

    @property
    def fraction_important(self) -> float:
        return len(self.important) / len(self.kernel_fi)


def nearest_rank_threshold(values, t_h: int) -> float:
    """Value at 1-based position max(1, ceil(t_h/100 * N)) of the sorted values."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise InvalidArgumentError("no values")
    rank = max(1, -(-_as_percent(t_h) * v.size // 100))
    return float(v[rank - 1])


def _as_percent(t_h) -> int:
    if not 0 <= t_h <= 100 or float(t_h) != int(t_h):
        raise InvalidArgumentError(f"t_h must be an integer percentage in [0, 100], got {t_h}")
    return int(t_h)


def threshold_mask(kernel_fi: Mapping[str, float], t_h, measure_kind: str = "fisher") -> ImportanceReport:
    """Kernels strictly above the nearest-rank ``t_h`` quantile are important."""
    if not kernel_fi:
        raise InvalidArgumentError("kernel_fi is empty")
    if measure_kind not in MEASURES:
        raise InvalidArgumentError(f"unknown measure {measure_kind!r}")
    t_h = _as_percent(t_h)
    fi = {k: float(v) for k, v in kernel_fi.items()}
    thr = nearest_rank_threshold(list(fi.values()), t_h)
    important = {k for k, v in fi.items() if v > thr}
    return ImportanceReport(fi, t_h, thr, important, measure_kind)


def expected_important(n: int, t_h: int) -> int:
    """|A| for n distinct values (t_h > 0)."""
    return n - -(-t_h * n // 100)
