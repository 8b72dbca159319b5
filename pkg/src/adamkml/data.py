"""Synthetic source/target domains and few-shot samplers.

Two modalities: ``gmm2d`` (isotropic Gaussian mixtures in the plane) and
``texture16`` (procedural 1x16x16 images in [-1, 1]). Proximity between
domains is built in by construction: a rotated ring is close to the ring, a
line of blobs off to the side is far from it.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

TEXTURE_FAMILIES = ("gratings", "gratings_blob", "checker")
POOL_SIZE = 1000


@dataclass(frozen=True)
class DomainSpec:
    name: str
    kind: str  # "gmm2d" | "texture16"
    means: tuple[tuple[float, float], ...] = ()
    stdevs: tuple[float, ...] = ()
    family: str = ""
    params: dict = field(default_factory=dict, hash=False, compare=False)

    def validate(self) -> None:
        if self.kind == "gmm2d":
            if not self.means or len(self.means) != len(self.stdevs):
                raise InvalidArgumentError(f"{self.name}: gmm2d needs >= 1 component with a stdev each")
            if any(s <= 0 for s in self.stdevs):
                raise InvalidArgumentError(f"{self.name}: stdevs must be positive")
        elif self.kind == "texture16":
            if self.family not in TEXTURE_FAMILIES:
                raise InvalidArgumentError(f"{self.name}: unknown texture family {self.family!r}")
        else:
            raise InvalidArgumentError(f"unknown domain kind {self.kind!r}")

    @property
    def n_modes(self) -> int:
        return len(self.means)


@dataclass
class FewShotSet:
    samples: np.ndarray
    k: int
    domain: str
    seed: int


def ring(n: int, radius: float, stdev: float, rotation_deg: float = 0.0) -> tuple:
    ang = 2 * np.pi * np.arange(n) / n + np.deg2rad(rotation_deg)
    means = tuple((float(radius * np.cos(a)), float(radius * np.sin(a))) for a in ang)
    return means, (stdev,) * n


def builtin_domain(name: str) -> DomainSpec:
    if name == "ring8_src":
        means, sd = ring(8, 2.0, 0.02)
        return DomainSpec(name, "gmm2d", means, sd)
    if name == "ring8_rot_proximal":
        means, sd = ring(8, 2.0, 0.02, rotation_deg=10.0)
        return DomainSpec(name, "gmm2d", means, sd)
    if name == "line3_distant":
        return DomainSpec(name, "gmm2d", ((4.0, 0.0), (5.0, 0.0), (6.0, 0.0)), (0.05,) * 3)
    if name == "gratings_src":
        return DomainSpec(name, "texture16", family="gratings",
                          params={"freq": (0.08, 0.2), "theta": (0.0, np.pi), "phase": (0.0, 2 * np.pi)})
    if name == "gratings_blob_proximal":
        return DomainSpec(name, "texture16", family="gratings_blob",
                          params={"freq": (0.08, 0.2), "theta": (0.0, np.pi), "phase": (0.0, 2 * np.pi),
                                  "center": (5.0, 10.0), "radius": (4.0, 7.0)})
    if name == "checker_distant":
        return DomainSpec(name, "texture16", family="checker", params={"cell": (2, 3, 4)})
    raise InvalidArgumentError(f"unknown domain {name!r}")


BUILTIN_DOMAINS = ("ring8_src", "ring8_rot_proximal", "line3_distant",
                   "gratings_src", "gratings_blob_proximal", "checker_distant")


def _textures(domain: DomainSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    p = domain.params
    yy, xx = np.mgrid[0:16, 0:16].astype(np.float64)
    out = np.empty((n, 1, 16, 16))
    for i in range(n):
        if domain.family in ("gratings", "gratings_blob"):
            f = rng.uniform(*p["freq"])
            th = rng.uniform(*p["theta"])
            ph = rng.uniform(*p["phase"])
            img = np.sin(2 * np.pi * f * (xx * np.cos(th) + yy * np.sin(th)) + ph)
            if domain.family == "gratings_blob":
                cy, cx = rng.uniform(*p["center"], size=2)
                r = rng.uniform(*p["radius"])
                img = img * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        else:
            cell = int(rng.choice(p["cell"]))
            oy, ox = rng.integers(0, cell, size=2)
            img = np.where(((yy + oy) // cell + (xx + ox) // cell) % 2 == 0, 1.0, -1.0)
        out[i, 0] = img
    return np.clip(out, -1.0, 1.0)


def sample(domain: DomainSpec, n: int, seed: int) -> np.ndarray:
    """``n`` i.i.d. draws; a pure function of (domain, n, seed)."""
    domain.validate()
    if n < 0:
        raise InvalidArgumentError("n must be >= 0")
    rng = np.random.default_rng(seed)
    if domain.kind == "gmm2d":
        means = np.asarray(domain.means)
        sds = np.asarray(domain.stdevs)
        comp = rng.integers(0, len(means), size=n)
        return means[comp] + sds[comp, None] * rng.standard_normal((n, 2))
    return _textures(domain, n, rng)


def few_shot(domain: DomainSpec, k: int, seed: int, pool_size: int = POOL_SIZE) -> FewShotSet:
    """First ``k`` items of a seeded permutation of a fixed pool.

    Sets for the same seed are nested in ``k``, so shot sweeps compare like
    with like.
    """
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    pool = sample(domain, max(pool_size, k), seed=seed + 7919)
    order = np.random.default_rng(seed).permutation(len(pool))
    return FewShotSet(pool[order[:k]].copy(), k, domain.name, seed)


def write_points_csv(points: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in np.asarray(points).reshape(-1, 2):
            w.writerow([repr(float(x)), repr(float(y))])


def read_points_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to 8-bit gray levels."""
    return np.round((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def write_pgm(img: np.ndarray, path) -> None:
    px = to_bytes(np.asarray(img).reshape(16, 16))
    Path(path).write_bytes(b"P5\n16 16\n255\n" + px.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise InvalidArgumentError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    # header is "P5 w h maxval" followed by exactly one whitespace byte
    header_len = raw.index(parts[3]) + len(parts[3]) + 1
    px = np.frombuffer(raw[header_len:header_len + w * h], dtype=np.uint8)
    return px.reshape(h, w)
