"""Per-view projection of Gaussians and accumulated-alpha rendering.

Projection follows the usual EWA affine approximation: the 3D covariance is
pushed through the Jacobian of (pixel_x, pixel_y, ray_distance) at the
Gaussian mean. The top-left 2x2 block is the screen covariance; the remaining
row gives the depth plane slope and the conditional depth variance used by the
point-wise opacity query.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .scene_io import GaussianField, View


@dataclass(frozen=True)
class RenderSettings:
    alpha_cap: float = 0.99
    eig_floor: float = 0.3            # px^2
    eps_alpha: float = 1.0 / 255.0
    t_stop: float = 1e-4
    tile: int = 16                    # px, mask rasterization tiles
    query_cell: int = 4               # px, bins for point-wise queries
    near: float = 0.2                 # m
    depth_var_floor: float = 1e-6     # m^2, floor on conditional depth variance
    support_sigma: float = 3.0        # Mahalanobis radius of a splat's point-query footprint


DEFAULT_SETTINGS = RenderSettings()


@dataclass(frozen=True, eq=False)
class ViewSplats:
    """Visible Gaussians of one view, sorted by ray distance (ascending)."""
    index: np.ndarray   # source Gaussian ids
    u: np.ndarray       # (K, 2) projected means, px
    t: np.ndarray       # (K,) ray distance, m
    g: np.ndarray       # (K, 2) depth slope, m/px
    cov2d: np.ndarray   # (K, 3) floored screen covariance (a, b, c) = [[a, b], [b, c]]
    conic: np.ndarray   # (K, 3) inverse of cov2d, same packing
    depth_var: np.ndarray  # (K,) conditional ray-distance variance given the pixel, m^2
    ray_cov: np.ndarray    # (K, 3, 3) covariance in (px, px, m) ray space
    alpha: np.ndarray      # (K,) peak opacity
    raster_radius: np.ndarray  # (K,) px, beyond which contributions are < eps_alpha
    query_radius: np.ndarray   # (K,) px, support_sigma * sqrt(lambda_max)
    width: int
    height: int

    def __len__(self):
        return len(self.index)


@dataclass(frozen=True, eq=False)
class AlphaMask:
    view_id: str
    alpha: np.ndarray           # (H, W) accumulated alpha in [0, 1]
    weight_sum: np.ndarray = None  # (H, W) sum of compositing weights, for diagnostics
    transmittance: np.ndarray = None

    def value(self, u):
        h, w = self.alpha.shape
        x, y = u
        if not (0 <= x < w and 0 <= y < h):
            return 0.0
        return float(self.alpha[int(y), int(x)])


def _floor_eigs(a, b, c, floor):
    """Clamp eigenvalues of [[a, b], [b, c]] from below, vectorized."""
    mid = 0.5 * (a + c)
    rad = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    l1, l2 = mid + rad, mid - rad
    # unit eigenvector of l1
    vx = np.where(np.abs(b) > 1e-300, b, np.where(a >= c, 1.0, 0.0))
    vy = np.where(np.abs(b) > 1e-300, l1 - a, np.where(a >= c, 0.0, 1.0))
    nrm = np.hypot(vx, vy)
    vx, vy = vx / nrm, vy / nrm
    l1, l2 = np.maximum(l1, floor), np.maximum(l2, floor)
    a2 = l1 * vx * vx + l2 * vy * vy
    b2 = (l1 - l2) * vx * vy
    c2 = l1 * vy * vy + l2 * vx * vx
    return a2, b2, c2, l1


def project_gaussians(field: GaussianField, view: View, settings: RenderSettings = DEFAULT_SETTINGS) -> ViewSplats:
    mu = field.centers
    pc = view.to_camera(mu)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    front = z > settings.near
    ids = np.nonzero(front)[0]
    x, y, z, pc = x[ids], y[ids], z[ids], pc[ids]
    rng = np.linalg.norm(pc, axis=1)

    # Jacobian of (px, py, ray distance) wrt camera coords
    J = np.zeros((len(ids), 3, 3))
    J[:, 0, 0] = view.fx / z
    J[:, 0, 2] = -view.fx * x / z ** 2
    J[:, 1, 1] = view.fy / z
    J[:, 1, 2] = -view.fy * y / z ** 2
    J[:, 2, :] = pc / rng[:, None]
    M = J @ view.R
    cov_w = field.covariances()[ids]
    ray = M @ cov_w @ M.transpose(0, 2, 1)

    a, b, c, lmax = _floor_eigs(ray[:, 0, 0], ray[:, 0, 1], ray[:, 1, 1], settings.eig_floor)
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    sut = ray[:, :2, 2]
    # g = -Suu^-1 Sut so that d(u) = t + g.(u_k - u) is the conditional mean depth
    inv_sut_x = conic[:, 0] * sut[:, 0] + conic[:, 1] * sut[:, 1]
    inv_sut_y = conic[:, 1] * sut[:, 0] + conic[:, 2] * sut[:, 1]
    g = -np.stack([inv_sut_x, inv_sut_y], axis=1)
    explained = sut[:, 0] * inv_sut_x + sut[:, 1] * inv_sut_y
    depth_var = np.maximum(ray[:, 2, 2] - explained, settings.depth_var_floor)

    ray_f = ray.copy()
    ray_f[:, 0, 0], ray_f[:, 0, 1], ray_f[:, 1, 0], ray_f[:, 1, 1] = a, b, b, c
    ray_f[:, 2, 2] = explained + depth_var

    u = np.stack([view.fx * x / z + view.cx, view.fy * y / z + view.cy], axis=1)
    alpha = field.alphas[ids]
    capped = np.minimum(alpha, settings.alpha_cap)
    with np.errstate(divide="ignore"):
        k2 = np.maximum(2.0 * np.log(capped / settings.eps_alpha), 0.0)
    sig = np.sqrt(lmax)
    raster_r = np.sqrt(k2) * sig
    query_r = settings.support_sigma * sig
    reach = np.maximum(raster_r, query_r)
    inside = ((u[:, 0] + reach >= 0) & (u[:, 0] - reach <= view.width)
              & (u[:, 1] + reach >= 0) & (u[:, 1] - reach <= view.height))

    order = np.nonzero(inside)[0]
    order = order[np.argsort(rng[order], kind="stable")]
    return ViewSplats(
        index=ids[order], u=u[order], t=rng[order], g=g[order],
        cov2d=np.stack([a, b, c], axis=1)[order], conic=conic[order],
        depth_var=depth_var[order], ray_cov=ray_f[order], alpha=alpha[order],
        raster_radius=raster_r[order], query_radius=query_r[order],
        width=view.width, height=view.height,
    )


# ---------------------------------------------------------------------------
# binning
# ---------------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _bin_footprints(u, radius, cell, ncx, ncy):
    n = u.shape[0]
    counts = np.zeros(ncx * ncy + 1, dtype=np.int64)
    lo = np.empty((n, 2), dtype=np.int64)
    hi = np.empty((n, 2), dtype=np.int64)
    for k in range(n):
        r = radius[k]
        x0 = int(math.floor((u[k, 0] - r) / cell))
        x1 = int(math.floor((u[k, 0] + r) / cell))
        y0 = int(math.floor((u[k, 1] - r) / cell))
        y1 = int(math.floor((u[k, 1] + r) / cell))
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, ncx - 1), min(y1, ncy - 1)
        lo[k, 0], lo[k, 1], hi[k, 0], hi[k, 1] = x0, y0, x1, y1
        if r <= 0.0:
            hi[k, 0] = x0 - 1
            continue
        for cy in range(y0, y1 + 1):
            for cx in range(x0, x1 + 1):
                counts[cy * ncx + cx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    items = np.empty(offsets[-1], dtype=np.int64)
    # splats arrive depth-sorted, so every bin list stays depth-sorted
    for k in range(n):
        for cy in range(lo[k, 1], hi[k, 1] + 1):
            for cx in range(lo[k, 0], hi[k, 0] + 1):
                b = cy * ncx + cx
                items[fill[b]] = k
                fill[b] += 1
    return offsets, items


class SplatBins:
    """Depth-sorted splat lists per square pixel cell (CSR layout)."""

    def __init__(self, splats: ViewSplats, cell: int, radius: np.ndarray):
        self.cell = cell
        self.ncx = max(1, -(-splats.width // cell))
        self.ncy = max(1, -(-splats.height // cell))
        self.offsets, self.items = _bin_footprints(
            np.ascontiguousarray(splats.u, dtype=np.float64), radius.astype(np.float64),
            float(cell), self.ncx, self.ncy)


# ---------------------------------------------------------------------------
# compositing
# ---------------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _splat_alpha(k, px, py, u, conic, alpha, cap):
    dx = px - u[k, 0]
    dy = py - u[k, 1]
    q = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
    a = alpha[k] * math.exp(-0.5 * q)
    return min(a, cap)


@numba.njit(cache=True, nogil=True)
def _render_tiles(tile_lo, tile_hi, ntx, tile, width, height, offsets, items,
                  u, conic, alpha, cap, eps, t_stop, A, W, T):
    for b in range(tile_lo, tile_hi):
        ty, tx = b // ntx, b % ntx
        s, e = offsets[b], offsets[b + 1]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                trans = 1.0
                wsum = 0.0
                for ii in range(s, e):
                    k = items[ii]
                    a = _splat_alpha(k, px + 0.5, py + 0.5, u, conic, alpha, cap)
                    if a < eps:
                        continue
                    wsum += a * trans
                    trans *= 1.0 - a
                    if trans < t_stop:
                        break
                A[py, px] = 1.0 - trans
                W[py, px] = wsum
                T[py, px] = trans


@numba.njit(cache=True, nogil=True)
def _render_naive(width, height, u, conic, alpha, cap, eps, t_stop, A, W, T):
    n = u.shape[0]
    for py in range(height):
        for px in range(width):
            trans = 1.0
            wsum = 0.0
            for k in range(n):
                a = _splat_alpha(k, px + 0.5, py + 0.5, u, conic, alpha, cap)
                if a < eps:
                    continue
                wsum += a * trans
                trans *= 1.0 - a
                if trans < t_stop:
                    break
            A[py, px] = 1.0 - trans
            W[py, px] = wsum
            T[py, px] = trans


def render_alpha_mask(splats: ViewSplats, view: View, settings: RenderSettings = DEFAULT_SETTINGS,
                      naive=False, executor=None) -> AlphaMask:
    """Front-to-back accumulated alpha for every pixel of ``view``.

    With ``naive=True`` every pixel visits every splat (no tiling); this is
    the reference path the tiled renderer is checked against.
    """
    h, w = view.height, view.width
    A = np.zeros((h, w))
    W = np.zeros((h, w))
    T = np.ones((h, w))
    u = np.ascontiguousarray(splats.u)
    conic = np.ascontiguousarray(splats.conic)
    alpha = np.ascontiguousarray(splats.alpha)
    args = (u, conic, alpha, settings.alpha_cap, settings.eps_alpha, settings.t_stop, A, W, T)
    if naive:
        _render_naive(w, h, *args)
    else:
        bins = SplatBins(splats, settings.tile, splats.raster_radius)
        nt = bins.ncx * bins.ncy
        chunks = _split(nt, 1 if executor is None else 4 * getattr(executor, "_max_workers", 1))
        run = lambda lo_hi: _render_tiles(lo_hi[0], lo_hi[1], bins.ncx, settings.tile, w, h,
                                          bins.offsets, bins.items, *args)
        if executor is None:
            for c in chunks:
                run(c)
        else:
            list(executor.map(run, chunks))
    return AlphaMask(view_id=view.view_id, alpha=A, weight_sum=W, transmittance=T)


def _split(n, parts):
    parts = max(1, min(parts, n)) if n else 1
    edges = np.linspace(0, n, parts + 1).astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(parts)]


def foreground_gate(mask: AlphaMask, u, tau_mask) -> bool:
    """Indicator A(u) > tau_mask; queries outside the image are background."""
    return mask.value(u) > tau_mask


def write_pgm(mask: AlphaMask, path):
    """Debug dump of the mask as a 16-bit binary PGM."""
    h, w = mask.alpha.shape
    data = np.round(np.clip(mask.alpha, 0, 1) * 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())
