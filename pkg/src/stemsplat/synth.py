"""Synthetic plots with exact ground truth.

Stems are tapered cylinders dressed in surface Gaussians (flattened radially),
optionally with a sparse interior fill; clutter is low-opacity floaters, most
of them close to stems. Two label sets are kept per Gaussian: the oracle
(stem-placed Gaussians only) and a "segmented" set that also claims clutter
within a buffer around each stem, the way an imperfect instance segmenter
bleeds into nearby foliage. Cameras sit on an oblique overhead ring looking at the
plot center. Everything is generated from one seed.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene_io import (CameraRig, FieldInventory, GaussianField, InventoryRow, TerrainModel,
                       TrunkLabelSet, View, rotmat_to_quat, save_cameras, save_gaussian_field,
                       save_inventory, save_terrain)

H_BH = 1.37
MAX_GAUSSIANS = 1_000_000
GROUND_Z = 100.0


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class StemTruth:
    tree_id: int
    x: float
    y: float
    base_z: float
    beta0: float      # radius at ground, m
    beta1: float      # radius change per m of height
    height: float

    @property
    def dbh_cm(self):
        return 200.0 * (self.beta0 + self.beta1 * H_BH)

    def radius(self, h):
        return self.beta0 + self.beta1 * h

    @property
    def axis(self):
        return (0.0, 0.0, 1.0)


@dataclass
class StemGaussians:
    means: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    alphas: np.ndarray
    truth: StemTruth


def make_stem(dbh_cm, taper_slope=0.0, height=5.0, gaussian_spacing=0.08, surface_sigma=0.002,
              alpha=(0.7, 0.99), base=(0.0, 0.0, 0.0), fill_density=0.0, tree_id=0, rng=None,
              footprint=0.25, fill_scale=None):
    """Gaussians on a tapered cylinder whose diameter at 1.37 m is ``dbh_cm``.

    ``taper_slope`` is the change in radius per meter of height (<= 0). The
    minor (radial) axis of every surface Gaussian has scale ``surface_sigma``;
    tangential and vertical scales are ``footprint`` times the local spacing,
    so with the default 0.25 neighbouring Gaussians meet at two sigma.
    ``fill_density`` adds isotropic interior Gaussians, uniformly over the
    stem volume, at that many per ``gaussian_spacing**3``. Their scale is
    ``fill_scale`` (default half the surface footprint) and their centers
    stay two scales inside the surface.
    """
    if not dbh_cm > 0:
        raise ValueError("dbh must be positive")
    if taper_slope > 0:
        raise ValueError("taper slope must be <= 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    beta0 = dbh_cm / 200.0 - taper_slope * H_BH
    if beta0 + taper_slope * height <= 0:
        raise ValueError("stem radius reaches zero below the stem top")
    n_rings = int(math.ceil(height / gaussian_spacing))
    hs = (np.arange(n_rings) + 0.5) * gaussian_spacing
    radii = beta0 + taper_slope * hs
    counts = np.maximum(6, np.ceil(2 * np.pi * radii / gaussian_spacing)).astype(int)
    fs = 0.5 * footprint * gaussian_spacing if fill_scale is None else float(fill_scale)
    inner = np.maximum(radii - 2 * fs, 0.0)
    n_fill = int(round(fill_density * float(np.sum(np.pi * inner ** 2)) / gaussian_spacing ** 2))
    total = int(counts.sum()) + n_fill
    if total > MAX_GAUSSIANS:
        raise GenerationError(f"stem would need {total} Gaussians (limit {MAX_GAUSSIANS})")

    means, scales, quats = [], [], []
    for j, (h, r, n) in enumerate(zip(hs, radii, counts)):
        th = 2 * np.pi * (np.arange(n) + 0.5 * (j % 2)) / n
        c, s = np.cos(th), np.sin(th)
        means.append(np.stack([r * c, r * s, np.full(n, h)], axis=1))
        scales.append(np.tile([surface_sigma, footprint * 2 * np.pi * r / n, footprint * gaussian_spacing], (n, 1)))
        for ci, si in zip(c, s):
            R = np.array([[ci, -si, 0.0], [si, ci, 0.0], [0.0, 0.0, 1.0]])
            quats.append(rotmat_to_quat(R))
    means = np.concatenate(means)
    scales = np.concatenate(scales)
    quats = np.array(quats)

    if n_fill:
        # rejection sampling keeps the density uniform along a tapered stem
        r_top = max(beta0 - 2 * fs, 0.0)
        fh, frad = [], []
        while len(fh) < n_fill:
            h = rng.uniform(0, height, 2 * n_fill)
            rin = np.maximum(beta0 + taper_slope * h - 2 * fs, 0.0)
            ok = rng.uniform(0, 1, 2 * n_fill) * r_top ** 2 < rin ** 2
            fh.extend(h[ok].tolist())
            frad.extend(rin[ok].tolist())
        h, rin = np.array(fh[:n_fill]), np.array(frad[:n_fill])
        rad = np.sqrt(rng.uniform(0, 1, n_fill)) * rin
        th = rng.uniform(0, 2 * np.pi, n_fill)
        means = np.concatenate([means, np.stack([rad * np.cos(th), rad * np.sin(th), h], axis=1)])
        scales = np.concatenate([scales, np.full((n_fill, 3), fs)])
        quats = np.concatenate([quats, np.tile([1.0, 0, 0, 0], (n_fill, 1))])

    means = means + np.asarray(base, dtype=np.float64)
    if np.isscalar(alpha):
        alphas = np.full(len(means), float(alpha))
    else:
        alphas = rng.uniform(alpha[0], alpha[1], len(means))
    truth = StemTruth(tree_id, float(base[0]), float(base[1]), float(base[2]), beta0, taper_slope, height)
    return StemGaussians(means, scales, quats, alphas, truth)


def random_quats(rng, n):
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def look_at(center, target, view_id, width=1600, height=1200, focal=2200.0):
    center, target = np.asarray(center, float), np.asarray(target, float)
    fwd = target - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return View(view_id, focal, focal, width / 2, height / 2, width, height, R, -R @ center)


def camera_ring(n, target, radius=35.0, altitudes=(35.0, 45.0), **kw):
    views = []
    for k in range(n):
        a = 2 * np.pi * k / n
        alt = altitudes[k % len(altitudes)]
        c = np.array([target[0] + radius * np.cos(a), target[1] + radius * np.sin(a), target[2] + alt])
        views.append(look_at(c, target, f"view_{k:03d}", **kw))
    return CameraRig(tuple(views))


@dataclass
class SyntheticScene:
    field: GaussianField
    rig: CameraRig
    terrain: TerrainModel
    truths: list
    gaussian_labels: np.ndarray   # oracle: tree id of stem-placed Gaussians, -1 elsewhere
    segment_labels: np.ndarray    # oracle plus clutter inside the label buffer
    stem_mask: np.ndarray         # per Gaussian, True if placed on a stem
    seed: int
    plot_id: str = "1"
    target: tuple = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)

    def inventory(self):
        return FieldInventory(tuple(InventoryRow(self.plot_id, t.tree_id, t.dbh_cm, t.x, t.y) for t in self.truths))


def ground_height(kind, x, y, slope=0.1):
    if kind == "flat":
        return GROUND_Z + 0.0 * x
    if kind == "sloped":
        return GROUND_Z + slope * x
    raise ValueError(f"unknown terrain kind {kind!r}")


def make_terrain(kind, extent, cell=0.5, slope=0.1):
    n = int(math.ceil(2 * extent / cell))
    x0 = y0 = -extent
    xc = x0 + (np.arange(n) + 0.5) * cell
    z = np.tile(ground_height(kind, xc, 0.0, slope), (n, 1))
    return TerrainModel(z=z, x0=x0, y0=y0, cell=cell)


def make_plot(n_stems=10, clutter_fraction=0.2, camera_count=12, terrain_kind="flat", seed=0,
              plot_radius=16.05, stem_height=5.0, gaussian_spacing=0.08, surface_sigma=0.002,
              footprint=0.25, fill_density=3.5, taper_range=(-0.006, -0.002), label_buffer=0.25,
              min_separation=2.5, dbh_range=(14.0, 45.0), image_size=(1600, 1200), focal=2200.0,
              plot_id="1"):
    """Generate a full synthetic plot (see module docstring).

    DBH ~ N(28, 6) cm clipped to ``dbh_range``; radius taper slope uniform in
    ``taper_range`` (m per m). Stems stand on the terrain surface. Clutter
    blobs (alpha 0.05-0.4) are 70% within 0.6 m of a stem surface and 30%
    anywhere in the plot up to 8 m above ground. Cameras alternate between 35
    and 45 m above the plot center height on a 35 m ring.
    """
    if not 0 <= clutter_fraction < 1:
        raise ValueError("clutter_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    places = []
    for k in range(n_stems):
        for _ in range(1000):
            rad = (plot_radius - 1.0) * math.sqrt(rng.uniform())
            ang = rng.uniform(0, 2 * np.pi)
            p = (rad * math.cos(ang), rad * math.sin(ang))
            if all(math.dist(p, q) >= min_separation for q in places):
                places.append(p)
                break
        else:
            raise GenerationError(f"could not place stem {k + 1} of {n_stems}")

    parts, truths, labels = [], [], []
    for k, (x, y) in enumerate(places, start=1):
        dbh = float(np.clip(rng.normal(28.0, 6.0), *dbh_range))
        slope = float(rng.uniform(*taper_range))
        base = (x, y, float(ground_height(terrain_kind, x, y)))
        st = make_stem(dbh, slope, stem_height, gaussian_spacing, surface_sigma, (0.7, 0.99), base,
                       fill_density, tree_id=k, rng=rng, footprint=footprint)
        parts.append(st)
        truths.append(st.truth)
        labels.append(np.full(len(st.means), k, dtype=np.int64))

    n_stem = sum(len(p.means) for p in parts)
    n_clutter = int(round(n_stem * clutter_fraction / (1 - clutter_fraction))) if n_stem else 0
    means = [p.means for p in parts]
    scales = [p.scales for p in parts]
    quats = [p.quats for p in parts]
    alphas = [p.alphas for p in parts]
    if n_clutter:
        near = int(round(0.7 * n_clutter)) if truths else 0
        cm = np.empty((n_clutter, 3))
        clab = np.full(n_clutter, -1, dtype=np.int64)
        which = rng.integers(0, max(len(truths), 1), near)
        h = rng.uniform(0, stem_height, near)
        gap = rng.uniform(0.03, 0.6, near)
        ang = rng.uniform(0, 2 * np.pi, near)
        for i in range(near):
            t = truths[which[i]]
            rr = t.radius(h[i]) + gap[i]
            cm[i] = (t.x + rr * math.cos(ang[i]), t.y + rr * math.sin(ang[i]), t.base_z + h[i])
            if gap[i] <= label_buffer:
                clab[i] = t.tree_id
        far = n_clutter - near
        rad = plot_radius * np.sqrt(rng.uniform(0, 1, far))
        ang = rng.uniform(0, 2 * np.pi, far)
        cm[near:, 0], cm[near:, 1] = rad * np.cos(ang), rad * np.sin(ang)
        cm[near:, 2] = ground_height(terrain_kind, cm[near:, 0], cm[near:, 1]) + rng.uniform(0.2, 8.0, far)
        for j in range(near, n_clutter):
            for t in truths:
                hh = cm[j, 2] - t.base_z
                if 0 <= hh <= t.height and math.hypot(cm[j, 0] - t.x, cm[j, 1] - t.y) <= t.radius(hh) + label_buffer:
                    clab[j] = t.tree_id
                    break
        means.append(cm)
        scales.append(np.exp(rng.uniform(np.log(0.02), np.log(0.1), (n_clutter, 3))))
        quats.append(random_quats(rng, n_clutter))
        alphas.append(rng.uniform(0.05, 0.4, n_clutter))
        labels.append(clab)
    if not means:
        means, scales, quats, alphas = [np.zeros((0, 3))], [np.zeros((0, 3))], [np.zeros((0, 4))], [np.zeros(0)]

    target_z = float(ground_height(terrain_kind, 0.0, 0.0)) + 2.0
    target = (0.0, 0.0, target_z)
    rig = camera_ring(camera_count, target, width=image_size[0], height=image_size[1], focal=focal)
    terrain = make_terrain(terrain_kind, plot_radius + 3.0)
    all_means = np.concatenate(means)
    field_ = None
    if len(all_means):
        field_ = GaussianField.from_activated(all_means, np.concatenate(scales), np.concatenate(quats),
                                              np.concatenate(alphas))
    stem_mask = np.concatenate([np.ones(n_stem, bool), np.zeros(n_clutter, bool)])
    seg = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    oracle = np.where(stem_mask, seg, -1)
    return SyntheticScene(field_, rig, terrain, truths, oracle, seg,
                          stem_mask, seed, plot_id, target,
                          meta=dict(terrain_kind=terrain_kind, clutter_fraction=clutter_fraction))


def point_labels(source, gaussian_labels) -> TrunkLabelSet:
    """Carry per-Gaussian labels over to points via each point's source Gaussian."""
    lab = np.asarray(gaussian_labels)[np.asarray(source)]
    idx = np.nonzero(lab >= 0)[0]
    return TrunkLabelSet(idx.astype(np.int64), lab[idx].astype(np.int64))


def write_scene(scene: SyntheticScene, out_dir):
    """Write every scene artifact in the formats scene_io reads."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if scene.field is not None:
        save_gaussian_field(scene.field, out / "splats.ply")
    save_cameras(scene.rig, out / "cameras")
    save_terrain(scene.terrain, out / "terrain.asc")
    save_gaussian_labels(scene.gaussian_labels, out / "gaussian_labels.csv")
    save_gaussian_labels(scene.segment_labels, out / "segment_labels.csv")
    save_inventory(scene.inventory(), out / "inventory.csv")
    with open(out / "truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["plot_id", "tree_id", "x", "y", "base_z", "beta0_m", "beta1", "height_m", "dbh_cm"])
        for t in scene.truths:
            w.writerow([scene.plot_id, t.tree_id, repr(t.x), repr(t.y), repr(t.base_z), repr(t.beta0),
                        repr(t.beta1), repr(t.height), repr(t.dbh_cm)])
    return out


def save_gaussian_labels(labels, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gaussian_index,tree_id\n")
        for i, t in enumerate(np.asarray(labels).tolist()):
            if t >= 0:
                fh.write(f"{i},{t}\n")


def load_gaussian_labels(path, n):
    lab = np.full(n, -1, dtype=np.int64)
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    for r in rows[1:]:
        if r:
            lab[int(r[0])] = int(r[1])
    return lab
