"""Slice-wise solid-circle RANSAC, taper regression and DBH evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from .trunk_prep import TrunkInstance

METHODS = ("circle-w", "circle-nw", "cylinder")

# Disks are closed with a relative margin on r^2, so the three points that
# define a hypothesis (and any point on its circle) count as inside no matter
# how the squared distance rounds.
DISK_TOL = 1e-9


@dataclass
class FitParams:
    slice_spacing: float = 0.1      # m
    slice_thickness: float = 1.0    # m
    min_slice_points: int = 5
    hypotheses: int = 2000
    min_inlier_frac: float = 0.1
    r_min: float = 0.02             # m
    r_max: float = 1.0              # m
    radius_exponent: float = 0.6
    taper_eps: float = 0.02         # m
    taper_trials: int = 1000
    taper_min_samples: int = 3
    taper_min_inliers: int = 10
    taper_start: float = 3.0        # m, first window height
    h_bh: float = 1.37              # m
    cyl_trials: int = 1000
    cyl_inlier: float = 0.02        # m
    cyl_sigma: float = 0.02         # m, Geman-McClure scale
    cyl_max_iter: int = 100


class FitFailure(Exception):
    """A per-slice or per-tree fit produced no valid model."""


# ---------------------------------------------------------------------------
# slicing
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Slice:
    index: int
    height: float
    xy: np.ndarray       # (n, 2)
    weights: np.ndarray  # (n,)
    members: np.ndarray  # indices into the instance points

    def __len__(self):
        return len(self.xy)


@dataclass(frozen=True, eq=False)
class SliceSet:
    slices: tuple
    spacing: float
    thickness: float

    def __len__(self):
        return len(self.slices)

    def __iter__(self):
        return iter(self.slices)


def build_slices(instance: TrunkInstance, spacing=0.1, thickness=1.0, min_points=5) -> SliceSet:
    if not (spacing > 0 and thickness > 0):
        raise ValueError("slice spacing and thickness must be positive")
    h = instance.heights
    half = thickness / 2
    out = []
    if len(h):
        top = int(math.floor((h.max() + half) / spacing + 1e-9))
        order = np.argsort(h, kind="stable")
        hs_sorted = h[order]
        for s in range(0, max(top, -1) + 1):
            hc = s * spacing
            lo = np.searchsorted(hs_sorted, hc - half - 1e-12, side="left")
            hi = np.searchsorted(hs_sorted, hc + half + 1e-12, side="right")
            if hi - lo < min_points:
                continue
            mem = np.sort(order[lo:hi])
            out.append(Slice(s, hc, instance.points[mem, :2], instance.reliability[mem], mem))
    return SliceSet(tuple(out), spacing, thickness)


# ---------------------------------------------------------------------------
# circles
# ---------------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _circle3(x1, y1, x2, y2, x3, y3):
    """Circumcircle via x^2 + y^2 + a x + b y + d = 0; returns (cx, cy, r2, ok)."""
    det = x1 * (y2 - y3) - y1 * (x2 - x3) + (x2 * y3 - x3 * y2)
    scale = max(abs(x1), abs(y1), abs(x2), abs(y2), abs(x3), abs(y3), 1e-300)
    if abs(det) <= 1e-12 * scale * scale:
        return 0.0, 0.0, 0.0, False
    r1, r2, r3 = -(x1 * x1 + y1 * y1), -(x2 * x2 + y2 * y2), -(x3 * x3 + y3 * y3)
    a = (r1 * (y2 - y3) - y1 * (r2 - r3) + (r2 * y3 - r3 * y2)) / det
    b = (x1 * (r2 - r3) - r1 * (x2 - x3) + (x2 * r3 - x3 * r2)) / det
    d = (x1 * (y2 * r3 - y3 * r2) - y1 * (x2 * r3 - x3 * r2) + r1 * (x2 * y3 - x3 * y2)) / det
    cx, cy = -a / 2.0, -b / 2.0
    rr = cx * cx + cy * cy - d
    if not rr > 0.0:
        return 0.0, 0.0, 0.0, False
    return cx, cy, rr, True


def fit_circle_3pt(q1, q2, q3):
    """Exact circle through three points; raises FitFailure when collinear."""
    pts = np.array([q1, q2, q3], dtype=np.float64)
    m = pts.mean(axis=0)
    p = pts - m
    cx, cy, rr, ok = _circle3(p[0, 0], p[0, 1], p[1, 0], p[1, 1], p[2, 0], p[2, 1])
    if not ok:
        raise FitFailure("collinear triple")
    return np.array([cx + m[0], cy + m[1]]), math.sqrt(rr)


@numba.njit(cache=True, nogil=True)
def _pick(cdf, target):
    # smallest i with cdf[i] > target
    i = np.searchsorted(cdf, target, side="right")
    return min(i, cdf.shape[0] - 1)


@numba.njit(cache=True, nogil=True)
def _draw3(cdf, w, total, u0, u1, u2):
    """Three distinct indices, Pr(k) proportional to w, renormalized after each draw."""
    k1 = _pick(cdf, u0 * total)
    t = u1 * (total - w[k1])
    if t >= cdf[k1] - w[k1]:
        t += w[k1]
    k2 = _pick(cdf, t)
    a, b = (k1, k2) if k1 < k2 else (k2, k1)
    t = u2 * (total - w[a] - w[b])
    if t >= cdf[a] - w[a]:
        t += w[a]
        if t >= cdf[b] - w[b]:
            t += w[b]
    k3 = _pick(cdf, t)
    return k1, k2, k3


@numba.njit(cache=True, nogil=True, fastmath=True)
def _disk_block(xs, ys, ws, lo, hi, cx, cy, rr):
    cnt = 0
    sw = 0.0
    for j in range(lo, hi):
        dx = xs[j] - cx
        dy = ys[j] - cy
        inside = dx * dx + dy * dy <= rr
        cnt += inside
        sw += ws[j] * inside
    return cnt, sw


@numba.njit(cache=True, nogil=True)
def _ransac_circle(q, w, cdf, total, U, rho, rmin, rmax, p, xs, ys, ws, rest):
    # xs, ys, ws: the slice in a fixed scan order; rest[j] = weight of ws[j:].
    # Scoring of a hypothesis stops once even the full remainder could not
    # beat the best score (with a relative slack, so ties are never cut).
    n = q.shape[0]
    best = (-1.0, 0.0, 0.0, 0.0, 0.0)  # score, cx, cy, r, inlier fraction
    nbounded = 0
    need = rho * n
    block = 256
    for h in range(U.shape[0]):
        k1, k2, k3 = _draw3(cdf, w, total, U[h, 0], U[h, 1], U[h, 2])
        if k1 == k2 or k2 == k3 or k1 == k3:
            continue
        if w[k1] <= 0.0 or w[k2] <= 0.0 or w[k3] <= 0.0:
            continue
        cx, cy, rr, ok = _circle3(q[k1, 0], q[k1, 1], q[k2, 0], q[k2, 1], q[k3, 0], q[k3, 1])
        if not ok:
            continue
        r = math.sqrt(rr)
        if r < rmin or r > rmax:
            continue
        nbounded += 1
        rr = rr * (1.0 + DISK_TOL)
        rp = r ** p
        cut = best[0] * rp * (1.0 - 1e-9)
        cnt = 0
        sw = 0.0
        pruned = False
        for lo in range(0, n, block):
            if best[0] >= 0.0 and (sw + rest[lo]) * (1.0 + 1e-9) < cut:
                pruned = True
                break
            c, s = _disk_block(xs, ys, ws, lo, min(lo + block, n), cx, cy, rr)
            cnt += c
            sw += s
        if pruned or cnt < need:
            continue
        s = sw / rp
        if s > best[0] or (s == best[0] and r < best[3]):
            best = (s, cx, cy, r, cnt / n)
    return best, nbounded


def scan_order(n):
    """Deterministic well-spread permutation (golden-ratio stride)."""
    if n < 2:
        return np.arange(n, dtype=np.int64)
    step = max(1, int(round(0.6180339887 * n)))
    while math.gcd(step, n) != 1:
        step += 1
    return (np.arange(n, dtype=np.int64) * step) % n


@dataclass(frozen=True)
class CircleEstimate:
    center: np.ndarray
    radius: float
    score: float
    inlier_frac: float
    hypotheses: int
    in_bounds: int      # hypotheses inside [r_min, r_max]

    @property
    def diameter(self):
        return 2 * self.radius


def slice_rng(seed, tree_id, slice_index):
    return np.random.default_rng([int(seed), int(tree_id), int(slice_index)])


def ransac_solid_circle(xy, weights=None, hypotheses=2000, min_inlier_frac=0.1, r_min=0.02,
                        r_max=1.0, p=0.6, weighted=True, rng=None, seed=0) -> CircleEstimate:
    """Best disk by S = sum(w inside) / r**p over ``hypotheses`` 3-point circles.

    Points are inliers when inside the disk. Unweighted mode uses unit weights
    for both sampling and scoring. Raises FitFailure if no hypothesis passes
    the radius bounds and the minimum inlier fraction.
    """
    xy = np.asarray(xy, dtype=np.float64)
    n = len(xy)
    if n < 3:
        raise FitFailure("fewer than 3 points")
    w = np.ones(n) if (not weighted or weights is None) else np.asarray(weights, dtype=np.float64)
    if (w < 0).any() or not np.isfinite(w).all():
        raise ValueError("weights must be finite and non-negative")
    if np.count_nonzero(w) < 3:
        raise FitFailure("fewer than 3 points with positive weight")
    rng = rng if rng is not None else np.random.default_rng(seed)
    U = rng.random((int(hypotheses), 3))
    mean = xy.mean(axis=0)
    q = xy - mean
    cdf = np.cumsum(w)
    order = scan_order(n)
    xs, ys, ws = (np.ascontiguousarray(a) for a in (q[order, 0], q[order, 1], w[order]))
    rest = np.append(np.cumsum(ws[::-1])[::-1], 0.0)
    best, nvalid = _ransac_circle(q, w, cdf, float(cdf[-1]), U, float(min_inlier_frac),
                                  float(r_min), float(r_max), float(p), xs, ys, ws, rest)
    if best[0] < 0:
        raise FitFailure("no valid circle hypothesis")
    return CircleEstimate(np.array([best[1] + mean[0], best[2] + mean[1]]), best[3], best[0],
                          best[4], int(hypotheses), int(nvalid))


def score_disk(xy, weights, center, radius, p=0.6):
    """Direct evaluation of the solid-disk score for one (center, radius)."""
    d2 = ((np.asarray(xy) - center) ** 2).sum(axis=1)
    return float(np.sum(np.asarray(weights) * (d2 <= radius ** 2 * (1.0 + DISK_TOL))) / radius ** p)


# ---------------------------------------------------------------------------
# taper
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaperModel:
    beta0: float
    beta1: float
    inliers: tuple          # slice ids
    eps: float
    window: float           # top of the accepted height window, m

    def predict(self, h):
        return self.beta0 + self.beta1 * h


def _lsq_line(h, d):
    A = np.stack([np.ones_like(h), h], axis=1)
    sol, *_ = np.linalg.lstsq(A, d, rcond=None)
    return float(sol[0]), float(sol[1])


def ransac_line(h, d, eps=0.02, trials=1000, min_samples=3, rng=None):
    """Line RANSAC with a negative-slope validity check; returns (b0, b1, inlier mask) or None."""
    n = len(h)
    if n < min_samples:
        return None
    rng = rng if rng is not None else np.random.default_rng(0)
    best = None
    for _ in range(trials):
        idx = rng.choice(n, size=min_samples, replace=False)
        if np.ptp(h[idx]) == 0:
            continue
        b0, b1 = _lsq_line(h[idx], d[idx])
        if not b1 < 0:
            continue
        res = np.abs(d - (b0 + b1 * h))
        inl = res <= eps
        cnt = int(inl.sum())
        sse = float((res[inl] ** 2).sum())
        if best is None or cnt > best[0] or (cnt == best[0] and sse < best[1]):
            best = (cnt, sse, inl)
    if best is None:
        return None
    inl = best[2]
    b0, b1 = _lsq_line(h[inl], d[inl])
    if not b1 < 0:
        return None
    # inlier set is re-evaluated under the refit so the reported set matches the model
    inl = np.abs(d - (b0 + b1 * h)) <= eps
    if inl.sum() >= min_samples:
        b0, b1 = _lsq_line(h[inl], d[inl])
        if not b1 < 0:
            return None
    return b0, b1, inl


def fit_taper(diameters, eps=0.02, trials=1000, min_samples=3, min_inliers=10, spacing=0.1,
              start=3.0, slice_ids=None, seed=0, tree_id=0) -> TaperModel:
    """Robust d(h) = b0 + b1 h over expanding windows [0, h_max].

    Windows grow by ``spacing`` from ``start``. A window is valid when its
    RANSAC line has b1 < 0 and at least ``min_inliers`` inliers. The model is
    accepted once two consecutive valid windows agree on which of the smaller
    window's slices are inliers; otherwise the largest valid window is used.
    """
    if len(diameters) == 0:
        raise FitFailure("no slice diameters")
    h = np.array([x[0] for x in diameters], dtype=np.float64)
    d = np.array([x[1] for x in diameters], dtype=np.float64)
    ids = np.arange(len(h)) if slice_ids is None else np.asarray(slice_ids, dtype=np.int64)
    order = np.argsort(h, kind="stable")
    h, d, ids = h[order], d[order], ids[order]
    height_of = dict(zip(ids.tolist(), h.tolist()))
    if len(h) < min_inliers:
        raise FitFailure(f"only {len(h)} slices, need {min_inliers} inliers")
    tops = []
    top = start
    while True:
        tops.append(top)
        if top >= h.max() - 1e-9:
            break
        top = round(top + spacing, 10)
    prev = None
    last_valid = None
    for k, top in enumerate(tops):
        sel = h <= top + 1e-9
        if sel.sum() < min_inliers:
            prev = None
            continue
        rng = np.random.default_rng([int(seed), int(tree_id), 1_000_000 + k])
        fit = ransac_line(h[sel], d[sel], eps, trials, min_samples, rng)
        if fit is None or fit[2].sum() < min_inliers:
            prev = None
            continue
        b0, b1, inl = fit
        inl_ids = ids[sel][inl]
        model = TaperModel(b0, b1, tuple(int(i) for i in inl_ids), eps, float(top))
        if prev is not None:
            prev_top, prev_ids = prev
            common = {int(i) for i in inl_ids if height_of[int(i)] <= prev_top + 1e-9}
            if common == set(prev_ids):
                return model
        prev = (top, model.inliers)
        last_valid = model
    if last_valid is None:
        raise FitFailure("no window produced a valid decreasing taper")
    return last_valid


# ---------------------------------------------------------------------------
# per tree
# ---------------------------------------------------------------------------

@dataclass
class DbhRecord:
    tree_id: int
    method: str
    dbh_cm: Optional[float]
    h_bh: float
    plot_id: str = ""
    n_slices: int = 0
    taper_inliers: int = 0
    beta0: Optional[float] = None
    beta1: Optional[float] = None
    window: Optional[float] = None
    failure: Optional[str] = None
    slice_diameters: list = field(default_factory=list)  # (h, d) pairs, m

    @property
    def ok(self):
        return self.failure is None


def evaluate_dbh(taper: TaperModel, h_bh=1.37, tree_id=0, method="circle-w") -> DbhRecord:
    d = taper.predict(h_bh)
    rec = DbhRecord(tree_id, method, None, h_bh, beta0=taper.beta0, beta1=taper.beta1,
                    window=taper.window, taper_inliers=len(taper.inliers))
    if not d > 0:
        rec.failure = "non-positive diameter at breast height"
    else:
        rec.dbh_cm = d * 100.0
    return rec


def measure_circle(instance: TrunkInstance, params: FitParams, weighted=True, seed=0) -> DbhRecord:
    method = "circle-w" if weighted else "circle-nw"
    slices = build_slices(instance, params.slice_spacing, params.slice_thickness, params.min_slice_points)
    diams, ids = [], []
    for s in slices:
        try:
            est = ransac_solid_circle(
                s.xy, s.weights, params.hypotheses, params.min_inlier_frac, params.r_min, params.r_max,
                params.radius_exponent, weighted, rng=slice_rng(seed, instance.tree_id, s.index))
        except FitFailure:
            continue
        diams.append((s.height, est.diameter))
        ids.append(s.index)
    try:
        taper = fit_taper(diams, params.taper_eps, params.taper_trials, params.taper_min_samples,
                          params.taper_min_inliers, params.slice_spacing, params.taper_start,
                          slice_ids=ids, seed=seed, tree_id=instance.tree_id)
    except FitFailure as exc:
        return DbhRecord(instance.tree_id, method, None, params.h_bh, n_slices=len(diams),
                         failure=str(exc), slice_diameters=diams)
    rec = evaluate_dbh(taper, params.h_bh, instance.tree_id, method)
    rec.n_slices = len(diams)
    rec.slice_diameters = diams
    return rec


def measure_tree(instance: TrunkInstance, params: FitParams, method="circle-w", seed=0) -> DbhRecord:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "cylinder":
        from .cylinder import measure_cylinder
        return measure_cylinder(instance, params, seed)
    return measure_circle(instance, params, weighted=(method == "circle-w"), seed=seed)
