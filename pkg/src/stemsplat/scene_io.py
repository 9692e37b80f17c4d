"""Readers and writers for every file the pipeline consumes.

Formats (see docs/formats.md for the full property lists):

* splat PLY in the usual 3DGS export layout (x, y, z, scale_*, rot_*, opacity,
  f_dc_*, f_rest_*), binary little-endian or ASCII;
* COLMAP text pose pair (cameras.txt + images.txt);
* ESRI ASCII grid for the terrain model;
* headered UTF-8 CSV for field inventories and trunk labels.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from plyfile import PlyData, PlyElement


class FormatError(ValueError):
    """File is structurally not what the loader expects."""


class DataError(ValueError):
    """File parses but carries invalid values."""


class CameraReferenceError(DataError):
    """A record points at something that does not exist (e.g. a camera id)."""


REQUIRED_SPLAT_PROPS = ("x", "y", "z", "scale_0", "scale_1", "scale_2",
                        "rot_0", "rot_1", "rot_2", "rot_3", "opacity")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def quat_to_rotmat(q):
    """(w, x, y, z) unit quaternions -> rotation matrices, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Single rotation matrix -> (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


# ---------------------------------------------------------------------------
# Gaussian field
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianField:
    """Optimized 3D Gaussians as stored on disk plus their activated values.

    The stored (raw) arrays are kept untouched so that save/load round-trips
    bit-exactly; ``scales``, ``quats``, ``rotations`` and ``alphas`` are the
    activated values computed once at construction.
    """
    means: np.ndarray            # (N, 3)
    log_scales: np.ndarray       # (N, 3)
    raw_quats: np.ndarray        # (N, 4) as stored, (w, x, y, z)
    logit_opacities: np.ndarray  # (N,)
    features: Optional[np.ndarray] = None  # structured array of f_dc_*/f_rest_*/extra, carried opaquely
    dtype: str = "f4"

    scales: np.ndarray = field(init=False, repr=False)
    quats: np.ndarray = field(init=False, repr=False)
    rotations: np.ndarray = field(init=False, repr=False)
    alphas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.means)
        if n == 0:
            raise DataError("Gaussian field is empty")
        for name in ("means", "log_scales", "raw_quats", "logit_opacities"):
            arr = getattr(self, name)
            arr.setflags(write=False)
            bad = ~np.isfinite(arr.reshape(n, -1)).all(axis=1)
            if bad.any():
                raise DataError(f"non-finite {name} at element {int(np.argmax(bad))}")
        q = self.raw_quats.astype(np.float64)
        norm = np.linalg.norm(q, axis=1)
        if (norm == 0).any():
            raise DataError(f"zero quaternion at element {int(np.argmax(norm == 0))}")
        quats = q / norm[:, None]
        derived = {
            "scales": np.exp(self.log_scales.astype(np.float64)),
            "quats": quats,
            "rotations": quat_to_rotmat(quats),
            "alphas": sigmoid(self.logit_opacities.astype(np.float64)),
        }
        for k, v in derived.items():
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    def __len__(self):
        return len(self.means)

    @property
    def centers(self):
        return self.means.astype(np.float64)

    def covariances(self):
        """World-frame covariances R diag(s)^2 R^T, shape (N, 3, 3)."""
        RS = self.rotations * self.scales[:, None, :]
        return RS @ RS.transpose(0, 2, 1)

    @classmethod
    def from_activated(cls, means, scales, quats, alphas, features=None):
        """Build a field from physical values (meters, unit quaternions, alpha in (0,1))."""
        alphas = np.clip(np.asarray(alphas, dtype=np.float64), 1e-7, 1 - 1e-7)
        return cls(
            means=np.asarray(means, dtype=np.float32),
            log_scales=np.log(np.asarray(scales, dtype=np.float64)).astype(np.float32),
            raw_quats=np.asarray(quats, dtype=np.float32),
            logit_opacities=np.log(alphas / (1 - alphas)).astype(np.float32),
            features=features,
        )


def _splat_dtype(field_: GaussianField):
    base = [(p, field_.dtype) for p in ("x", "y", "z")]
    feats = [] if field_.features is None else list(field_.features.dtype.descr)
    base += feats
    base += [("opacity", field_.dtype)]
    base += [(f"scale_{i}", field_.dtype) for i in range(3)]
    base += [(f"rot_{i}", field_.dtype) for i in range(4)]
    return base


def save_gaussian_field(field_: GaussianField, path, text=False):
    """Write a splat PLY (binary little-endian unless ``text``)."""
    n = len(field_)
    arr = np.empty(n, dtype=_splat_dtype(field_))
    for i, p in enumerate("xyz"):
        arr[p] = field_.means[:, i]
    if field_.features is not None:
        for name in field_.features.dtype.names:
            arr[name] = field_.features[name]
    arr["opacity"] = field_.logit_opacities
    for i in range(3):
        arr[f"scale_{i}"] = field_.log_scales[:, i]
    for i in range(4):
        arr[f"rot_{i}"] = field_.raw_quats[:, i]
    el = PlyElement.describe(arr, "vertex")
    PlyData([el], text=text, byte_order="<").write(str(path))


def load_gaussian_field(path) -> GaussianField:
    path = Path(path)
    try:
        ply = PlyData.read(str(path))
    except Exception as exc:  # plyfile raises a grab-bag of types
        raise FormatError(f"{path}: not a readable PLY ({exc})") from exc
    if "vertex" not in ply:
        raise FormatError(f"{path}: no 'vertex' element")
    v = ply["vertex"].data
    names = v.dtype.names
    for prop in REQUIRED_SPLAT_PROPS:
        if prop not in names:
            raise FormatError(f"{path}: missing required property '{prop}'")
    dt = v.dtype["x"].str.lstrip("<>=|")
    means = np.stack([v["x"], v["y"], v["z"]], axis=1)
    log_scales = np.stack([v[f"scale_{i}"] for i in range(3)], axis=1)
    quats = np.stack([v[f"rot_{i}"] for i in range(4)], axis=1)
    opac = np.array(v["opacity"])
    extra = [n for n in names if n not in REQUIRED_SPLAT_PROPS]
    features = None
    if extra:
        features = np.empty(len(v), dtype=[(n, v.dtype[n].str.replace(">", "<")) for n in extra])
        for n in extra:
            features[n] = v[n]
    return GaussianField(means=means, log_scales=log_scales, raw_quats=quats,
                         logit_opacities=opac, features=features, dtype=dt)


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class View:
    view_id: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray  # world -> camera rotation
    t: np.ndarray  # world -> camera translation

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DataError(f"view {self.view_id}: focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise DataError(f"view {self.view_id}: image size must be >= 1")
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > 1e-6:
            raise DataError(f"view {self.view_id}: rotation not orthonormal (err {err:.2e})")

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def direction(self):
        """Optical axis in world coordinates."""
        return self.R[2]

    def to_camera(self, pts):
        return pts @ self.R.T + self.t

    def project(self, pts):
        """World points -> (pixel coords (N,2), camera-frame z, ray distance)."""
        pc = self.to_camera(np.atleast_2d(pts))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=1)
        return u, z, np.linalg.norm(pc, axis=1)


@dataclass(frozen=True)
class CameraRig:
    views: tuple

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    def __getitem__(self, i):
        return self.views[i]


_PINHOLE_MODELS = {"PINHOLE", "SIMPLE_PINHOLE"}


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            s = line.strip()
            if s and not s.startswith("#"):
                yield s


def _raw_lines(path):
    with open(path, encoding="utf-8") as fh:
        return [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]


def load_cameras(path) -> CameraRig:
    """Read a COLMAP text model directory (``cameras.txt`` + ``images.txt``)."""
    path = Path(path)
    cam_file, img_file = path / "cameras.txt", path / "images.txt"
    for f in (cam_file, img_file):
        if not f.exists():
            raise FileNotFoundError(f"{f}: not found")
    cams = {}
    for line in _data_lines(cam_file):
        tok = line.split()
        cam_id, model = tok[0], tok[1].upper()
        if model not in _PINHOLE_MODELS:
            raise FormatError(f"{cam_file}: camera {cam_id} uses unsupported model {model}")
        w, h = int(tok[2]), int(tok[3])
        params = [float(x) for x in tok[4:]]
        if model == "SIMPLE_PINHOLE":
            fx = fy = params[0]
            cx, cy = params[1], params[2]
        else:
            fx, fy, cx, cy = params[:4]
        cams[cam_id] = (fx, fy, cx, cy, w, h)

    views = []
    lines = _raw_lines(img_file)
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        tok = line.split()
        if len(tok) < 10:
            raise FormatError(f"{img_file}: malformed image line '{line}'")
        qvec = np.array([float(x) for x in tok[1:5]])
        tvec = np.array([float(x) for x in tok[5:8]])
        cam_id, name = tok[8], tok[9]
        if cam_id not in cams:
            raise CameraReferenceError(f"{img_file}: image {tok[0]} references unknown camera {cam_id}")
        # the following line holds 2D observations; skip it
        i += 1
        fx, fy, cx, cy, w, h = cams[cam_id]
        R = quat_to_rotmat(qvec / np.linalg.norm(qvec))
        views.append(View(view_id=name, fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h, R=R, t=tvec))
    return CameraRig(tuple(views))


def save_cameras(rig: CameraRig, path):
    """Write ``cameras.txt`` / ``images.txt`` (one PINHOLE camera per view)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "cameras.txt", "w", encoding="utf-8") as fh:
        fh.write("# CAMERA_ID, MODEL, WIDTH, HEIGHT, fx, fy, cx, cy\n")
        for k, v in enumerate(rig.views, start=1):
            fh.write(f"{k} PINHOLE {v.width} {v.height} {v.fx!r} {v.fy!r} {v.cx!r} {v.cy!r}\n")
    with open(path / "images.txt", "w", encoding="utf-8") as fh:
        fh.write("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        for k, v in enumerate(rig.views, start=1):
            q = rotmat_to_quat(v.R)
            vals = " ".join(repr(float(x)) for x in (*q, *v.t))
            fh.write(f"{k} {vals} {k} {v.view_id}\n\n")


# ---------------------------------------------------------------------------
# Terrain
# ---------------------------------------------------------------------------

class GroundLookupError(LookupError):
    def __init__(self, msg, tree_id=None):
        super().__init__(msg)
        self.tree_id = tree_id


@dataclass(frozen=True)
class TerrainModel:
    """Regular elevation grid.

    ``z[j, i]`` is the cell whose lower-left corner is
    ``(x0 + i*cell, y0 + j*cell)``; row index ``j`` grows northward (the
    file's top row is flipped on load).
    """
    z: np.ndarray
    x0: float
    y0: float
    cell: float
    nodata: float = -9999.0

    def __post_init__(self):
        if not self.cell > 0:
            raise DataError("terrain cell size must be positive")
        if self.z.size == 0:
            raise DataError("terrain grid is empty")

    @property
    def shape(self):
        return self.z.shape

    @property
    def valid(self):
        return self.z != self.nodata

    def _nearest_index(self, coord, origin, n):
        f = (coord - origin) / self.cell
        # a coordinate on a cell edge belongs to the lower-indexed cell
        k = math.ceil(f) - 1 if f == math.floor(f) and f > 0 else math.floor(f)
        if k < -1 or k > n:
            return None
        return min(max(k, 0), n - 1)

    def nearest(self, x, y):
        """Elevation of the cell containing (x, y); ``None`` if out of range or nodata.

        Points up to one cell outside the grid are clamped onto the border.
        """
        ny, nx = self.z.shape
        i = self._nearest_index(x, self.x0, nx)
        j = self._nearest_index(y, self.y0, ny)
        if i is None or j is None:
            return None
        v = self.z[j, i]
        return None if v == self.nodata else float(v)

    def bilinear(self, x, y):
        ny, nx = self.z.shape
        fx = (x - self.x0) / self.cell - 0.5
        fy = (y - self.y0) / self.cell - 0.5
        if fx < -1.5 or fy < -1.5 or fx > nx + 0.5 or fy > ny + 0.5:
            return None
        fx = min(max(fx, 0.0), nx - 1.0)
        fy = min(max(fy, 0.0), ny - 1.0)
        i0, j0 = int(math.floor(fx)), int(math.floor(fy))
        i1, j1 = min(i0 + 1, nx - 1), min(j0 + 1, ny - 1)
        ax, ay = fx - i0, fy - j0
        c = [self.z[j0, i0], self.z[j0, i1], self.z[j1, i0], self.z[j1, i1]]
        if any(v == self.nodata for v in c):
            return None
        return float((c[0] * (1 - ax) + c[1] * ax) * (1 - ay) + (c[2] * (1 - ax) + c[3] * ax) * ay)


def load_terrain(path) -> TerrainModel:
    """Read an ESRI ASCII grid (``xllcorner``/``xllcenter`` both accepted)."""
    header = {}
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    k = 0
    while k < len(lines):
        tok = lines[k].split()
        if len(tok) == 2 and tok[0][0].isalpha():
            header[tok[0].lower()] = float(tok[1])
            k += 1
        else:
            break
    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise FormatError(f"{path}: missing header key '{key}'")
    nx, ny, cell = int(header["ncols"]), int(header["nrows"]), header["cellsize"]
    if "xllcorner" in header:
        x0, y0 = header["xllcorner"], header["yllcorner"]
    elif "xllcenter" in header:
        x0, y0 = header["xllcenter"] - cell / 2, header["yllcenter"] - cell / 2
    else:
        raise FormatError(f"{path}: missing xllcorner/xllcenter")
    nodata = header.get("nodata_value", -9999.0)
    vals = np.array(" ".join(lines[k:]).split(), dtype=np.float64)
    if vals.size != nx * ny:
        raise FormatError(f"{path}: expected {nx * ny} values, found {vals.size}")
    z = vals.reshape(ny, nx)[::-1].copy()
    return TerrainModel(z=z, x0=x0, y0=y0, cell=cell, nodata=nodata)


def save_terrain(t: TerrainModel, path):
    ny, nx = t.z.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"ncols {nx}\nnrows {ny}\nxllcorner {t.x0!r}\nyllcorner {t.y0!r}\n")
        fh.write(f"cellsize {t.cell!r}\nNODATA_value {t.nodata!r}\n")
        for row in t.z[::-1]:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# Inventory and labels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InventoryRow:
    plot_id: str
    tree_id: int
    dbh_cm: float
    x: Optional[float] = None
    y: Optional[float] = None


@dataclass(frozen=True)
class FieldInventory:
    rows: tuple

    def __len__(self):
        return len(self.rows)

    def lookup(self):
        return {(r.plot_id, r.tree_id): r for r in self.rows}


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise FormatError(f"{path}: empty file") from None
    return header, [row for row in reader if row and any(c.strip() for c in row)]


def load_inventory(path) -> FieldInventory:
    header, rows = _read_csv(path)
    for col in ("plot_id", "tree_id", "dbh_cm"):
        if col not in header:
            raise FormatError(f"{path}: missing column '{col}'")
    ix = {h: i for i, h in enumerate(header)}
    out, seen = [], set()
    for lineno, row in enumerate(rows, start=2):
        try:
            plot, tree, dbh = row[ix["plot_id"]].strip(), int(row[ix["tree_id"]]), float(row[ix["dbh_cm"]])
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if not dbh > 0:
            raise DataError(f"{path}:{lineno}: DBH must be positive")
        if (plot, tree) in seen:
            raise DataError(f"{path}:{lineno}: duplicate (plot, tree) = ({plot}, {tree})")
        seen.add((plot, tree))
        x = y = None
        if "x" in ix and row[ix["x"]].strip():
            x, y = float(row[ix["x"]]), float(row[ix["y"]])
        out.append(InventoryRow(plot, tree, dbh, x, y))
    return FieldInventory(tuple(out))


def save_inventory(inv: FieldInventory, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["plot_id", "tree_id", "dbh_cm", "x", "y"])
        for r in inv.rows:
            w.writerow([r.plot_id, r.tree_id, repr(r.dbh_cm),
                        "" if r.x is None else repr(r.x), "" if r.y is None else repr(r.y)])


@dataclass(frozen=True)
class TrunkLabelSet:
    """Point index -> tree id. Points absent from the mapping are non-trunk."""
    indices: np.ndarray
    tree_ids: np.ndarray

    def __len__(self):
        return len(self.indices)

    def check(self, n_points):
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= n_points):
            bad = self.indices[(self.indices < 0) | (self.indices >= n_points)][0]
            raise DataError(f"label references point {bad} but cloud has {n_points} points")


def load_trunk_labels(path) -> TrunkLabelSet:
    header, rows = _read_csv(path)
    for col in ("point_index", "tree_id"):
        if col not in header:
            raise FormatError(f"{path}: missing column '{col}'")
    a, b = header.index("point_index"), header.index("tree_id")
    idx = np.array([int(r[a]) for r in rows], dtype=np.int64)
    tid = np.array([int(r[b]) for r in rows], dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise DataError(f"{path}: duplicate point_index")
    return TrunkLabelSet(idx, tid)


def save_trunk_labels(labels: TrunkLabelSet, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("point_index,tree_id\n")
        for i, t in zip(labels.indices.tolist(), labels.tree_ids.tolist()):
            fh.write(f"{i},{t}\n")
