"""Depth-clamped point-wise cumulative opacity and multi-view reliability.

For a query point p and a splat k of one view, the ray-space offset is

    delta = [u_k - u(p) ; t_k - min(r(p), d_k(u(p)))]

with d_k the splat's depth plane. Because the depth plane is the conditional
mean of ray distance given the pixel, the quadratic form splits into the 2D
screen term plus ``max(d_k - r, 0)^2 / depth_var``: the depth penalty vanishes
once p sits behind the splat's local surface. The optimized evaluator uses
that split; ``pointwise_opacity_naive`` inverts the full 3x3 ray covariance
instead and is the reference it is tested against.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .rasterizer import (DEFAULT_SETTINGS, AlphaMask, RenderSettings, SplatBins, ViewSplats,
                         project_gaussians, render_alpha_mask, _split)
from .sampler import CandidateCloud
from .scene_io import CameraRig, GaussianField, View


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ScoredPointCloud:
    points: np.ndarray       # (P, 3)
    reliability: np.ndarray  # (P,) conservative multi-view opacity in [0, 1]
    support: np.ndarray      # (P,) number of gated views
    source: np.ndarray       # (P,) Gaussian index

    def __len__(self):
        return len(self.points)

    def subset(self, idx):
        return ScoredPointCloud(self.points[idx], self.reliability[idx], self.support[idx], self.source[idx])


@numba.njit(cache=True, nogil=True)
def _query_points(lo, hi, pts, R, tv, fx, fy, cx, cy, width, height, near, A, tau_mask,
                  cell, ncx, offsets, items, packed, cap, support2, gated, out):
    # packed rows: u_x, u_y, conic a, b, c, t, g_x, g_y, 1/depth_var, alpha
    for i in range(lo, hi):
        X = R[0, 0] * pts[i, 0] + R[0, 1] * pts[i, 1] + R[0, 2] * pts[i, 2] + tv[0]
        Y = R[1, 0] * pts[i, 0] + R[1, 1] * pts[i, 1] + R[1, 2] * pts[i, 2] + tv[1]
        Z = R[2, 0] * pts[i, 0] + R[2, 1] * pts[i, 1] + R[2, 2] * pts[i, 2] + tv[2]
        gated[i] = False
        out[i] = 0.0
        if Z <= near:
            continue
        ux = fx * X / Z + cx
        uy = fy * Y / Z + cy
        if not (ux >= 0.0 and ux < width and uy >= 0.0 and uy < height):
            continue
        if not A[int(uy), int(ux)] > tau_mask:
            continue
        gated[i] = True
        r = math.sqrt(X * X + Y * Y + Z * Z)
        b = int(uy // cell) * ncx + int(ux // cell)
        acc = 0.0
        trans = 1.0
        for ii in range(offsets[b], offsets[b + 1]):
            s = packed[items[ii]]
            dx = s[0] - ux
            dy = s[1] - uy
            q = s[2] * dx * dx + 2.0 * s[3] * dx * dy + s[4] * dy * dy
            if q > support2:
                continue
            res = s[5] + s[6] * dx + s[7] * dy - r
            if res > 0.0:
                q += res * res * s[8]
            a = min(s[9] * math.exp(-0.5 * q), cap)
            acc += a * trans
            trans *= 1.0 - a
        out[i] = acc


class ViewQuery:
    """Per-view structures for point queries (splats, mask, spatial bins)."""

    def __init__(self, view: View, splats: ViewSplats, mask: AlphaMask,
                 settings: RenderSettings = DEFAULT_SETTINGS):
        self.view, self.splats, self.mask, self.settings = view, splats, mask, settings
        self.bins = SplatBins(splats, settings.query_cell, splats.query_radius)
        sp = splats
        self.packed = np.ascontiguousarray(np.column_stack([
            sp.u, sp.conic, sp.t, sp.g, 1.0 / sp.depth_var, sp.alpha]).astype(np.float64))

    def evaluate(self, pts, tau_mask, lo=0, hi=None, gated=None, out=None):
        """Return (gated, alpha_tilde) for ``pts[lo:hi]`` written into the given buffers."""
        pts = np.ascontiguousarray(pts, dtype=np.float64)
        n = len(pts)
        hi = n if hi is None else hi
        if gated is None:
            gated = np.zeros(n, dtype=np.bool_)
            out = np.zeros(n)
        v, s, st = self.view, self.splats, self.settings
        _query_points(lo, hi, pts, np.ascontiguousarray(v.R, dtype=np.float64),
                      np.asarray(v.t, dtype=np.float64), v.fx, v.fy, v.cx, v.cy,
                      float(v.width), float(v.height), st.near, self.mask.alpha, float(tau_mask),
                      float(self.bins.cell), self.bins.ncx, self.bins.offsets, self.bins.items,
                      self.packed, st.alpha_cap, st.support_sigma ** 2, gated, out)
        return gated, out


def pointwise_opacity(p, view: View, splats: ViewSplats, settings: RenderSettings = DEFAULT_SETTINGS,
                      query: ViewQuery | None = None) -> float:
    """Cumulative opacity in front of ``p`` along its viewing ray.

    ``p`` must project inside the image; the foreground gate is not applied.
    """
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    if not np.isfinite(p).all():
        raise ValueError("query point must be finite")
    if query is None:
        full = AlphaMask(view.view_id, np.ones((view.height, view.width)))
        query = ViewQuery(view, splats, full, settings)
    gated, out = query.evaluate(p, tau_mask=-1.0)
    if not gated[0]:
        raise ValueError("query point does not project inside the image")
    return float(out[0])


def pointwise_opacity_naive(p, view: View, splats: ViewSplats, settings: RenderSettings = DEFAULT_SETTINGS) -> float:
    """Reference evaluator: every splat, full 3x3 inverse, no spatial binning."""
    p = np.asarray(p, dtype=np.float64)
    u, _, r = view.project(p[None])
    u, r = u[0], r[0]
    inv = np.linalg.inv(splats.ray_cov)
    trans, acc = 1.0, 0.0
    for k in range(len(splats)):
        du = splats.u[k] - u
        q2 = du @ np.linalg.inv(splats.ray_cov[k, :2, :2]) @ du
        if q2 > settings.support_sigma ** 2:
            continue
        d = splats.t[k] + splats.g[k] @ du
        delta = np.array([du[0], du[1], splats.t[k] - min(r, d)])
        a = min(splats.alpha[k] * math.exp(-0.5 * delta @ inv[k] @ delta), settings.alpha_cap)
        acc += a * trans
        trans *= 1.0 - a
    return acc


def prepare_views(field: GaussianField, rig: CameraRig, settings: RenderSettings = DEFAULT_SETTINGS,
                  executor=None):
    """Project and render every view; returns a list of ViewQuery."""
    def one(view):
        splats = project_gaussians(field, view, settings)
        mask = render_alpha_mask(splats, view, settings)
        return ViewQuery(view, splats, mask, settings)
    if executor is None:
        return [one(v) for v in rig]
    return list(executor.map(one, rig.views))


def score_points(cloud: CandidateCloud, rig: CameraRig, masks, tau_mask=0.1, tau=0.5,
                 settings: RenderSettings = DEFAULT_SETTINGS, field: GaussianField | None = None,
                 queries=None, threads=1, chunk=200_000) -> ScoredPointCloud:
    """Reliability and view support for every candidate point.

    ``masks`` must list one AlphaMask per rig view (same order). Per-view
    splats are projected from ``field`` unless prebuilt ``queries`` are given.
    With ``tau > 0`` only points with reliability > tau and support > 0 are
    kept (surface extraction); ``tau == 0`` keeps everything.
    """
    if queries is None:
        if masks is None or len(masks) != len(rig):
            raise ConfigurationError(f"got {0 if masks is None else len(masks)} masks for {len(rig)} views")
        if field is None:
            raise ConfigurationError("either field or prebuilt view queries are required")
        queries = [ViewQuery(v, project_gaussians(field, v, settings), m, settings) for v, m in zip(rig, masks)]
    elif len(queries) != len(rig):
        raise ConfigurationError(f"got {len(queries)} view queries for {len(rig)} views")

    pts = np.ascontiguousarray(cloud.points, dtype=np.float64)
    n, nv = len(pts), len(queries)
    gated = np.zeros((nv, n), dtype=np.bool_)
    vals = np.zeros((nv, n))
    tasks = [(v, lo, hi) for v in range(nv) for lo, hi in _split(n, max(1, -(-n // chunk)))]

    def run(task):
        v, lo, hi = task
        queries[v].evaluate(pts, tau_mask, lo, hi, gated[v], vals[v])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(run, tasks))
    else:
        for task in tasks:
            run(task)

    support = gated.sum(axis=0).astype(np.int64)
    rel = np.where(gated, vals, np.inf).min(axis=0) if nv else np.full(n, np.inf)
    rel = np.where(support > 0, np.clip(rel, 0.0, 1.0), 0.0)
    if tau > 0:
        keep = (rel > tau) & (support > 0)
    else:
        keep = np.ones(n, dtype=bool)
    return ScoredPointCloud(pts[keep], rel[keep], support[keep], cloud.source[keep])


def score_field(field: GaussianField, rig: CameraRig, cloud: CandidateCloud, tau_mask=0.1, tau=0.5,
                settings: RenderSettings = DEFAULT_SETTINGS, threads=1):
    """Render every view and score ``cloud``; convenience wrapper used by the CLI."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            queries = prepare_views(field, rig, settings, ex)
    else:
        queries = prepare_views(field, rig, settings)
    scored = score_points(cloud, rig, None, tau_mask, tau, settings, queries=queries, threads=threads)
    return scored, queries
