"""Evaluation metrics on feature embeddings and weights."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import nets
from .data import DomainSpec
from .diffcore import Tensor
from .errors import InvalidArgumentError, InvalidShapeError, NumericError
from .nets import GanPair, LayerSpec

FEATURE_SEED = 20221025
FEATURE_DIM = 32
EIG_TOL = 1e-8


@dataclass(frozen=True)
class FrechetResult:
    total: float
    mean_component: float
    trace_component: float


class FeatureExtractor:
    """Fixed embedding used in place of pretrained perception networks.

    ``identity2d`` passes 2-D points through. ``seeded_random_conv`` is the
    conv16 discriminator trunk (two stride-2 convs) followed by a linear map
    to 32 dims, with He-normal weights drawn once from ``FEATURE_SEED`` and
    never trained.
    """

    def __init__(self, kind: str = "identity2d", seed: int = FEATURE_SEED):
        if kind not in ("identity2d", "seeded_random_conv"):
            raise InvalidArgumentError(f"unknown feature extractor {kind!r}")
        self.kind = kind
        self.seed = seed
        self.layers: tuple[LayerSpec, ...] = ()
        self.weights: dict[str, Tensor] = {}
        if kind == "seeded_random_conv":
            self.layers = (
                LayerSpec("F.l0", "conv", 1, 16, k=3, stride=2, padding=1),
                LayerSpec("F.l1", "conv", 16, 32, k=3, stride=2, padding=1, reshape_to=(512,)),
                LayerSpec("F.l2", "linear", 512, FEATURE_DIM, activation="none"),
            )
            arch = nets.ArchDescriptor("features", 1, (), self.layers, (1, 16, 16))
            self.weights = {k: Tensor(v) for k, v in nets.init_params(arch, seed).items()}

    @property
    def dim(self) -> int:
        return 2 if self.kind == "identity2d" else FEATURE_DIM

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if self.kind == "identity2d":
            if x.ndim != 2 or x.shape[1] != 2:
                raise InvalidShapeError(f"identity2d expects [N, 2], got {x.shape}")
            return x
        if x.shape[1:] != (1, 16, 16):
            raise InvalidShapeError(f"seeded_random_conv expects [N, 1, 16, 16], got {x.shape}")
        if len(x) == 0:
            return np.zeros((0, FEATURE_DIM))
        return nets._run(self.layers, self.weights, Tensor(x)).data


def extractor_for(arch_kind: str) -> FeatureExtractor:
    return FeatureExtractor("identity2d" if arch_kind == "mlp2d" else "seeded_random_conv")


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = _clamp(vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _clamp(vals: np.ndarray) -> np.ndarray:
    tol = EIG_TOL * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if (vals < -tol).any():
        raise NumericError(f"matrix is not PSD: eigenvalue {vals.min():.3e}")
    return np.clip(vals, 0.0, None)


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> FrechetResult:
    """Squared 2-Wasserstein distance between two Gaussians, split into mean and trace parts."""
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, float)), np.atleast_1d(np.asarray(mu_b, float))
    cov_a, cov_b = np.atleast_2d(np.asarray(cov_a, float)), np.atleast_2d(np.asarray(cov_b, float))
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape or cov_a.shape != (len(mu_a), len(mu_a)):
        raise InvalidShapeError("moment shapes disagree")
    cov_a = (cov_a + cov_a.T) / 2
    cov_b = (cov_b + cov_b.T) / 2
    mean_part = float(np.sum((mu_a - mu_b) ** 2))
    root_b = _sym_sqrt(cov_b)
    inner = root_b @ cov_a @ root_b
    cross = float(np.sum(np.sqrt(_clamp(np.linalg.eigvalsh((inner + inner.T) / 2)))))
    trace_part = float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return FrechetResult(mean_part + trace_part, mean_part, trace_part)


def frechet(feats_a, feats_b) -> FrechetResult:
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidShapeError(f"feature dims differ: {a.shape} vs {b.shape}")
    d = a.shape[1]
    if len(a) < 2 or len(b) < 2:
        raise InvalidArgumentError("need at least two samples per set")
    if len(a) < d + 1 or len(b) < d + 1:
        warnings.warn(f"fewer than d+1={d + 1} samples; covariance is singular", RuntimeWarning, stacklevel=2)
    return frechet_from_moments(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


def kid(feats_a, feats_b) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel (x.y/d + 1)^3."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidShapeError(f"feature dims differ: {a.shape} vs {b.shape}")
    n, m = len(a), len(b)
    if n < 2 or m < 2:
        raise InvalidArgumentError("kid needs at least two samples per set")
    d = a.shape[1]
    kaa = (a @ a.T / d + 1.0) ** 3
    kbb = (b @ b.T / d + 1.0) ** 3
    kab = (a @ b.T / d + 1.0) ** 3
    term_a = (kaa.sum() - np.trace(kaa)) / (n * (n - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (m * (m - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def intra_diversity(generated, anchors, extractor: FeatureExtractor | None = None) -> float:
    """Mean within-cluster pairwise distance after nearest-anchor assignment.

    Clusters are the generated samples closest to each anchor; singleton
    clusters contribute 0 and empty clusters are skipped.
    """
    anchors = getattr(anchors, "samples", anchors)
    gen = extractor(generated) if extractor else np.asarray(generated, dtype=np.float64)
    anc = extractor(anchors) if extractor else np.asarray(anchors, dtype=np.float64)
    gen = gen.reshape(len(gen), -1)
    anc = anc.reshape(len(anc), -1)
    if len(gen) == 0:
        raise InvalidArgumentError("no generated samples")
    label = cdist(gen, anc).argmin(axis=1)
    scores = []
    for c in np.unique(label):
        members = gen[label == c]
        scores.append(float(pdist(members).mean()) if len(members) > 1 else 0.0)
    return float(np.mean(scores))


def mode_coverage(samples, gmm: DomainSpec, radius_mult: float = 3.0) -> tuple[int, int, float]:
    """(modes covered, total modes, fraction of samples near any mode)."""
    if gmm.kind != "gmm2d":
        raise InvalidArgumentError("mode_coverage needs a gmm2d domain")
    x = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    means = np.asarray(gmm.means)
    radius = radius_mult * np.asarray(gmm.stdevs)
    near = cdist(x, means) <= radius[None, :]
    n = len(x)
    need = max(1.0, n / (10 * len(means)))
    covered = int((near.sum(axis=0) >= need).sum())
    hq = float(near.any(axis=1).mean()) if n else 0.0
    return covered, len(means), hq


def kernel_update_ratio(w_before: np.ndarray, w_after: np.ndarray) -> np.ndarray:
    """Per-row 100 * ||after - before||_F / ||before||_F."""
    wb = np.asarray(w_before, dtype=np.float64)
    wa = np.asarray(w_after, dtype=np.float64)
    if wb.shape != wa.shape:
        raise InvalidShapeError("weights differ in shape")
    wb = wb.reshape(wb.shape[0], -1) if wb.ndim > 1 else wb.reshape(1, -1)
    wa = wa.reshape(wb.shape)
    norm = np.linalg.norm(wb, axis=1)
    if (norm == 0).any():
        raise NumericError("kernel with zero norm")
    return 100.0 * np.linalg.norm(wa - wb, axis=1) / norm


def update_ratio(before: GanPair, after: GanPair) -> dict[str, float]:
    """q% per network: per-kernel relative change of effective weights, averaged over kernels.

    ``after`` must carry effective weights (see ``AdaptedModel.to_gan``).
    """
    if before.arch != after.arch:
        raise InvalidArgumentError("architectures differ")
    out = {}
    for net in ("G", "D"):
        ratios = [kernel_update_ratio(before.params[f"{s.name}.weight"], after.params[f"{s.name}.weight"])
                  for s in nets.kernel_layers(before.arch, net)]
        out[net] = float(np.concatenate(ratios).mean())
    return out
