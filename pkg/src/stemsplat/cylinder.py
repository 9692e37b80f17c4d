"""RANSAC + Geman-McClure cylinder fit, the classical stem baseline.

Hypotheses come from five random points: their centroid is a point on the
axis, the axis is the dominant principal direction of their covariance, and
the radius is the mean point-to-axis distance. The best
hypothesis is refined by iteratively reweighted Gauss-Newton over a 7-vector
(center shift 3, axis rotation increment 3, radius 1). Rotation about the
axis itself and shifts along it are gauge directions; the minimum-norm
least-squares step leaves them at zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .stem_fit import DbhRecord, FitParams
from .trunk_prep import TrunkInstance

MAX_TILT = math.pi / 8
MAX_RADIUS = 0.5


@dataclass(frozen=True)
class CylinderEstimate:
    center: np.ndarray
    axis: np.ndarray
    radius: float
    inlier_ratio: float
    refined: bool = False

    @property
    def tilt(self):
        return math.acos(min(1.0, abs(float(self.axis[2]))))


def axis_distances(pts, center, axis):
    v = pts - center
    along = v @ axis
    perp = v - along[:, None] * axis
    return np.linalg.norm(perp, axis=1), perp, along


@numba.njit(cache=True, nogil=True, fastmath=True)
def _inlier_count(pts, c, a, r, thresh):
    cnt = 0
    for k in range(pts.shape[0]):
        vx, vy, vz = pts[k, 0] - c[0], pts[k, 1] - c[1], pts[k, 2] - c[2]
        t = vx * a[0] + vy * a[1] + vz * a[2]
        px, py, pz = vx - t * a[0], vy - t * a[1], vz - t * a[2]
        cnt += abs(math.sqrt(px * px + py * py + pz * pz) - r) < thresh
    return cnt


def _valid(axis, radius):
    return math.acos(min(1.0, abs(float(axis[2])))) <= MAX_TILT and 0 < radius <= MAX_RADIUS


def _hypothesis(sample):
    c = sample.mean(axis=0)
    _, _, vt = np.linalg.svd(sample - c)
    axis = vt[0]
    if axis[2] < 0:
        axis = -axis
    dist, _, _ = axis_distances(sample, c, axis)
    return c, axis, float(dist.mean())


def _rodrigues(w):
    th = np.linalg.norm(w)
    if th < 1e-15:
        return np.eye(3)
    k = w / th
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(th) * K + (1 - math.cos(th)) * K @ K


def refine_cylinder(pts, center, axis, radius, sigma=0.02, max_iter=100, tol=1e-5):
    """IRLS with Geman-McClure weights on point-to-surface residuals."""
    c, a, r = center.astype(np.float64).copy(), axis.astype(np.float64).copy(), float(radius)
    for _ in range(max_iter):
        dist, perp, along = axis_distances(pts, c, a)
        e = dist - r
        wgt = 1.0 / (1.0 + (e / sigma) ** 2) ** 2
        n = perp / np.maximum(dist, 1e-12)[:, None]
        J = np.empty((len(pts), 7))
        J[:, :3] = -n
        J[:, 3:6] = -along[:, None] * np.cross(a, n)
        J[:, 6] = -1.0
        sw = np.sqrt(wgt)
        dx, *_ = np.linalg.lstsq(J * sw[:, None], -e * sw, rcond=None)
        c = c + dx[:3]
        a = _rodrigues(dx[3:6]) @ a
        a /= np.linalg.norm(a)
        r += dx[6]
        if np.linalg.norm(dx) < tol:
            break
    if a[2] < 0:
        a = -a
    return c, a, r


def fit_cylinder(points, trials=1000, inlier_thresh=0.02, sigma=0.02, max_iter=100, rng=None, seed=0):
    """Fit a near-vertical cylinder; returns CylinderEstimate or None when no hypothesis is valid."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 5:
        return None
    rng = rng if rng is not None else np.random.default_rng(seed)
    best = None
    for _ in range(trials):
        idx = rng.choice(n, size=5, replace=False)
        c, a, r = _hypothesis(pts[idx])
        if not _valid(a, r):
            continue
        ratio = _inlier_count(pts, c, a, r, inlier_thresh) / n
        if best is None or ratio > best.inlier_ratio:
            best = CylinderEstimate(c, a, r, ratio)
    if best is None:
        return None
    c, a, r = refine_cylinder(pts, best.center, best.axis, best.radius, sigma, max_iter)
    ratio = _inlier_count(pts, c, a, r, inlier_thresh) / n
    if ratio > best.inlier_ratio:
        # the refined model wins; if it leaves the tilt/radius limits the data
        # hold no admissible cylinder and the fit fails
        if not _valid(a, r):
            return None
        best = CylinderEstimate(c, a, r, ratio, refined=True)
    return best


def measure_cylinder(instance: TrunkInstance, params: FitParams, seed=0) -> DbhRecord:
    rng = np.random.default_rng([int(seed), int(instance.tree_id), 2_000_000])
    est = fit_cylinder(instance.points, params.cyl_trials, params.cyl_inlier, params.cyl_sigma,
                       params.cyl_max_iter, rng=rng)
    if est is None:
        return DbhRecord(instance.tree_id, "cylinder", None, params.h_bh,
                         failure="no cylinder hypothesis within tilt/radius limits")
    return DbhRecord(instance.tree_id, "cylinder", 2 * est.radius * 100.0, params.h_bh)
