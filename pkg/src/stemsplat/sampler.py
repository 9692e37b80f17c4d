"""Candidate surface points drawn from Gaussian volumes with opacity thinning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene_io import GaussianField


@dataclass(frozen=True, eq=False)
class CandidateCloud:
    points: np.ndarray   # (P, 3)
    source: np.ndarray   # (P,) Gaussian index
    seed: int | None = None

    def __len__(self):
        return len(self.points)


def gaussian_stream(seed: int, index: int) -> np.random.Generator:
    """Counter-based RNG stream keyed by (seed, Gaussian index).

    Streams do not depend on iteration order, so sampling can be split across
    workers without changing the result.
    """
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


def _draw_one(field: GaussianField, i: int, m: int, seed: int):
    rng = gaussian_stream(seed, i)
    xi = rng.standard_normal((m, 3))
    keep = rng.random(m) < field.alphas[i]
    return xi, keep


def sample_candidates(field: GaussianField, draws_per_gaussian: int = 100, seed: int = 0,
                      return_offsets=False):
    """Draw ``draws_per_gaussian`` offsets per Gaussian and thin by opacity.

    Every draw ``p = mu + R (s * xi)`` with ``xi ~ N(0, I)`` is kept with
    probability alpha of its Gaussian. Output order is (Gaussian, draw).
    """
    m = int(draws_per_gaussian)
    if m < 1:
        raise ValueError("draws_per_gaussian must be >= 1")
    mu = field.centers
    RS = field.rotations * field.scales[:, None, :]
    pts, src, offs, flags = [], [], [], []
    for i in range(len(field)):
        xi, keep = _draw_one(field, i, m, seed)
        if return_offsets:
            offs.append(xi)
            flags.append(keep)
        if not keep.any():
            continue
        kept = xi[keep]
        pts.append(mu[i] + kept @ RS[i].T)
        src.append(np.full(len(kept), i, dtype=np.int64))
    if pts:
        cloud = CandidateCloud(np.concatenate(pts), np.concatenate(src), seed)
    else:
        cloud = CandidateCloud(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), seed)
    if return_offsets:
        return cloud, np.concatenate(offs), np.concatenate(flags)
    return cloud


def export_means(field: GaussianField) -> CandidateCloud:
    """One point per Gaussian at its mean (sparse baseline export)."""
    return CandidateCloud(field.centers.copy(), np.arange(len(field), dtype=np.int64))
