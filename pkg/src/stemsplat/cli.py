"""Batch front-end: synth, sample, measure, eval and pipeline subcommands.

Every stage prints one ``key=value`` summary line on stdout. Outputs are
written to a temporary name and renamed into place, and every table carries
the configuration hash. Exit status: 0 ok, 1 runtime/data error, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, RunConfig
from .metrics import MatchError, emit_scatter, evaluate, format_table, write_report
from .opacity_integral import ScoredPointCloud, score_field
from .rasterizer import write_pgm
from .sampler import sample_candidates
from .scene_io import (DataError, FormatError, GroundLookupError, TrunkLabelSet, load_cameras,
                       load_gaussian_field, load_inventory, load_terrain, load_trunk_labels,
                       save_trunk_labels)
from .stem_fit import DbhRecord, measure_tree
from .trunk_prep import attach_ground, split_instances

PROG = "stemsplat"
RECORD_COLUMNS = ("plot_id", "tree_id", "method", "dbh_cm", "h_bh", "n_slices", "taper_inliers",
                  "beta0", "beta1", "window", "failure")


class StageError(RuntimeError):
    """Fatal error inside a stage (reported with exit status 1)."""


# ---------------------------------------------------------------------------
# small I/O helpers
# ---------------------------------------------------------------------------

@contextmanager
def atomic_path(path):
    """Yield a temporary sibling path; rename it onto ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.stem}.tmp{os.getpid()}{path.suffix}")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def summary(stage, **kv):
    parts = [f"stage={stage}"] + [f"{k}={_fmt_kv(v)}" for k, v in kv.items()]
    print(" ".join(parts), flush=True)


def _fmt_kv(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v).replace(" ", "_")


def save_scored_cloud(cloud: ScoredPointCloud, path):
    from plyfile import PlyData, PlyElement
    arr = np.empty(len(cloud), dtype=[("x", "f8"), ("y", "f8"), ("z", "f8"), ("reliability", "f8"),
                                      ("support", "u2"), ("source", "u4")])
    arr["x"], arr["y"], arr["z"] = cloud.points.T
    arr["reliability"] = cloud.reliability
    arr["support"] = cloud.support
    arr["source"] = cloud.source
    with atomic_path(path) as tmp:
        PlyData([PlyElement.describe(arr, "vertex")], byte_order="<").write(str(tmp))


def load_scored_cloud(path) -> ScoredPointCloud:
    from plyfile import PlyData
    try:
        v = PlyData.read(str(path))["vertex"].data
    except KeyError:
        raise FormatError(f"{path}: no vertex element") from None
    for name in ("x", "y", "z", "reliability", "support", "source"):
        if name not in v.dtype.names:
            raise FormatError(f"{path}: missing vertex property {name!r}")
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    return ScoredPointCloud(pts, np.asarray(v["reliability"], np.float64),
                            np.asarray(v["support"], np.int64), np.asarray(v["source"], np.int64))


def record_row(r: DbhRecord):
    return [r.plot_id, r.tree_id, r.method, _num(r.dbh_cm), repr(r.h_bh), r.n_slices, r.taper_inliers,
            _num(r.beta0), _num(r.beta1), _num(r.window), r.failure or ""]


def _num(x):
    return "" if x is None else repr(float(x))


def write_records(records, csv_path, json_path, header):
    with atomic_path(csv_path) as tmp:
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {PROG} records stage={header['stage']} config_hash={header['config_hash']}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RECORD_COLUMNS)
            for r in records:
                w.writerow(record_row(r))
    doc = {"provenance": header, "records": [asdict(r) for r in records]}
    with atomic_path(json_path) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")


def load_records(path):
    """Records from a JSON file written by ``measure`` (or the CSV twin)."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        out = []
        for d in doc["records"]:
            d = dict(d)
            d["slice_diameters"] = [tuple(x) for x in d.get("slice_diameters", [])]
            out.append(DbhRecord(**d))
        return out
    with open(path, encoding="utf-8") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    if not rows or tuple(rows[0]) != RECORD_COLUMNS:
        raise FormatError(f"{path}: expected header {','.join(RECORD_COLUMNS)}")
    out = []
    for r in rows[1:]:
        if not r:
            continue
        f = dict(zip(RECORD_COLUMNS, r))
        opt = lambda k: float(f[k]) if f[k] != "" else None  # noqa: E731
        out.append(DbhRecord(int(f["tree_id"]), f["method"], opt("dbh_cm"), float(f["h_bh"]),
                             f["plot_id"], int(f["n_slices"]), int(f["taper_inliers"]), opt("beta0"),
                             opt("beta1"), opt("window"), f["failure"] or None))
    return out


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_sample(cfg: RunConfig, splats, cameras, out, gaussian_labels=None, labels_out=None,
                 masks_dir=None):
    t0 = time.perf_counter()
    field = load_gaussian_field(splats)
    rig = load_cameras(cameras)
    cloud = sample_candidates(field, cfg.draws, cfg.seed)
    scored, queries = score_field(field, rig, cloud, cfg.tau_mask, cfg.tau, threads=cfg.threads)
    save_scored_cloud(scored, out)
    extra = {}
    if gaussian_labels is not None:
        from .synth import load_gaussian_labels, point_labels
        glab = load_gaussian_labels(gaussian_labels, len(field))
        labels = point_labels(scored.source, glab)
        with atomic_path(labels_out) as tmp:
            save_trunk_labels(labels, tmp)
        extra["labeled"] = len(labels)
    if masks_dir is not None:
        Path(masks_dir).mkdir(parents=True, exist_ok=True)
        for q in queries:
            with atomic_path(Path(masks_dir) / f"{q.view.view_id}.pgm") as tmp:
                write_pgm(q.mask, tmp)
    summary("sample", gaussians=len(field), views=len(rig), candidates=len(cloud), kept=len(scored),
            **extra, config_hash=cfg.hash, seconds=round(time.perf_counter() - t0, 2))
    return scored


def _expected_trees(inventory, plot_id):
    if inventory is None:
        return []
    return sorted(r.tree_id for r in inventory.rows if r.plot_id == plot_id)


def measure_instances(instances, cfg: RunConfig, plot_id, expected=()):
    """One record per (method, tree). Trees are processed in parallel; output order is fixed."""
    params = cfg.fit_params()
    tasks = [(m, inst) for m in cfg.methods for inst in instances]

    def run(task):
        m, inst = task
        if isinstance(inst, DbhRecord):
            return replace(inst, method=m)
        rec = measure_tree(inst, params, m, cfg.seed)
        rec.plot_id = plot_id
        return rec

    if cfg.threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            recs = list(ex.map(run, tasks))
    else:
        recs = [run(t) for t in tasks]
    have = {(r.method, r.tree_id) for r in recs}
    for m in cfg.methods:
        for t in expected:
            if (m, t) not in have:
                recs.append(DbhRecord(t, m, None, cfg.h_bh, plot_id, failure="no trunk points"))
    recs.sort(key=lambda r: (cfg.methods.index(r.method), r.tree_id))
    return recs


def stage_measure(cfg: RunConfig, cloud_path, labels_path, terrain_path, out_prefix, plot_id="1",
                  inventory_path=None, figures_dir=None, cloud=None):
    t0 = time.perf_counter()
    cloud = cloud if cloud is not None else load_scored_cloud(cloud_path)
    labels = load_trunk_labels(labels_path)
    terrain = load_terrain(terrain_path)
    inventory = load_inventory(inventory_path) if inventory_path else None
    try:
        instances = split_instances(cloud, labels)
    except DataError as exc:
        raise StageError(f"{labels_path}: {exc}") from None
    ready = []
    for inst in instances:
        try:
            ready.append(attach_ground(inst, terrain, cfg.ground))
        except GroundLookupError as exc:
            ready.append(DbhRecord(inst.tree_id, "", None, cfg.h_bh, plot_id, failure=str(exc)))
    records = measure_instances(ready, cfg, plot_id, _expected_trees(inventory, plot_id))
    out_prefix = Path(out_prefix)
    write_records(records, out_prefix.with_suffix(".csv"), out_prefix.with_suffix(".json"),
                  cfg.header("measure"))
    if figures_dir is not None:
        from .plotting import taper_figure
        Path(figures_dir).mkdir(parents=True, exist_ok=True)
        for r in records:
            with atomic_path(Path(figures_dir) / f"taper_{r.plot_id}_{r.tree_id}_{r.method}.svg") as tmp:
                taper_figure(r, tmp)
    ok = sum(r.ok for r in records)
    summary("measure", trees=len({r.tree_id for r in records}), records=len(records), ok=ok,
            failed=len(records) - ok, config_hash=cfg.hash, seconds=round(time.perf_counter() - t0, 2))
    return records


def stage_eval(cfg: RunConfig, records, inventory_path, out_dir, figure=True):
    t0 = time.perf_counter()
    inventory = load_inventory(inventory_path)
    try:
        report = evaluate(records, inventory, cfg.grouping)
    except MatchError as exc:
        raise StageError(str(exc.args[0])) from None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = cfg.header("eval")
    with atomic_path(out / "report.json") as tj, atomic_path(out / "report.txt") as tt:
        write_report(report, tj, tt, header)
    with atomic_path(out / "scatter.csv") as tmp:
        rows = emit_scatter(records, inventory, tmp, figure=False)
    if figure:
        from .plotting import scatter_figure
        with atomic_path(out / "scatter.svg") as tmp:
            scatter_figure(rows, tmp)
    pooled = [g for g in report.groups if g.group == "All"]
    kv = {}
    for g in pooled:
        kv[f"rmse_{g.method}"] = "absent" if g.rmse is None else round(g.rmse, 4)
        kv[f"sr_{g.method}"] = g.sr
    summary("eval", records=len(records), pairs=len(rows), **kv, config_hash=cfg.hash,
            seconds=round(time.perf_counter() - t0, 2))
    return report


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

FLAG_HELP = {
    "draws": "draws per Gaussian M", "tau": "reliability threshold; 0 keeps every sample",
    "tau_mask": "alpha-mask foreground gate", "slice_thickness": "slice thickness H (m)",
    "slice_spacing": "slice spacing (m)", "min_slice_points": "drop slices with fewer points",
    "hypotheses": "circle hypotheses K per slice", "min_inlier_frac": "minimum inlier fraction",
    "r_min": "minimum circle radius (m)", "r_max": "maximum circle radius (m)",
    "radius_exponent": "radius penalty exponent p", "taper_eps": "taper residual threshold (m)",
    "taper_trials": "taper RANSAC trials", "taper_min_samples": "points per taper hypothesis",
    "taper_min_inliers": "minimum inlier slices", "taper_start": "first taper window height (m)",
    "h_bh": "breast height (m)", "cyl_trials": "cylinder RANSAC trials",
    "cyl_inlier": "cylinder inlier band (m)", "cyl_sigma": "Geman-McClure scale (m)",
    "cyl_max_iter": "cylinder refinement iterations", "ground": "terrain lookup: nearest|bilinear",
    "grouping": "metrics grouping: per-plot|pooled|both",
    "methods": "comma list of circle-w, circle-nw, cylinder", "seed": "master seed",
    "threads": "worker threads (does not change results)",
}


def _add_config_flags(p):
    g = p.add_argument_group("configuration (flags override --config)")
    g.add_argument("--config", type=Path, help="TOML file of key = value settings")
    defaults = RunConfig()
    for name in cfgmod.FIELD_NAMES:
        default = getattr(defaults, name)
        kind = str if isinstance(default, (str, tuple)) else type(default)
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None,
                       metavar=name.upper(), help=f"{FLAG_HELP.get(name, name)} [{_show(default)}]")


def _show(v):
    return ",".join(v) if isinstance(v, tuple) else v


def build_config(args) -> RunConfig:
    cfg = cfgmod.load_config(args.config) if getattr(args, "config", None) else RunConfig()
    over = {k: getattr(args, k) for k in cfgmod.FIELD_NAMES if getattr(args, k, None) is not None}
    return cfgmod.from_mapping(over, base=cfg, source="command line") if over else cfg


def build_parser():
    ap = argparse.ArgumentParser(prog=PROG, description="DBH from Gaussian-splat scenes.")
    sub = ap.add_subparsers(dest="command", metavar="{synth,sample,measure,eval,pipeline}")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic plot with ground truth")
    p.add_argument("--out", type=Path, required=True, help="scene directory to create")
    p.add_argument("--stems", type=int, default=10)
    p.add_argument("--clutter", type=float, default=0.2, help="fraction of Gaussians that are clutter")
    p.add_argument("--cameras", type=int, default=12)
    p.add_argument("--terrain", choices=("flat", "sloped"), default="flat")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plot-id", default="1")

    p = sub.add_parser("sample", help="splats -> reliability-scored point cloud")
    p.add_argument("--splats", type=Path, required=True)
    p.add_argument("--cameras", type=Path, required=True, help="directory with cameras.txt and images.txt")
    p.add_argument("--out", type=Path, required=True, help="scored cloud PLY")
    p.add_argument("--gaussian-labels", type=Path, help="per-Gaussian tree ids to carry over to points")
    p.add_argument("--labels-out", type=Path, help="point label CSV (default: next to --out)")
    p.add_argument("--masks-dir", type=Path, help="also write per-view alpha masks (PGM)")
    _add_config_flags(p)

    p = sub.add_parser("measure", help="scored cloud + labels + terrain -> DBH records")
    p.add_argument("--cloud", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True, help="CSV point_index,tree_id")
    p.add_argument("--terrain", type=Path, required=True, help="ESRI ASCII grid")
    p.add_argument("--out", type=Path, required=True, help="output prefix; writes .csv and .json")
    p.add_argument("--plot-id", default="1")
    p.add_argument("--inventory", type=Path, help="add failure records for listed trees without points")
    p.add_argument("--figures", type=Path, help="directory for per-tree taper figures (SVG)")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="records + inventory -> metrics report and scatter")
    p.add_argument("--records", type=Path, nargs="+", required=True, help="records JSON or CSV files")
    p.add_argument("--inventory", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--no-figure", action="store_true", help="skip the SVG scatter")
    _add_config_flags(p)

    p = sub.add_parser("pipeline", help="sample, measure and eval a scene directory")
    p.add_argument("--scene", type=Path, required=True, help="directory laid out like synth output")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--labels", choices=("segment", "oracle"), default="segment",
                   help="which per-Gaussian label set of the scene to use")
    p.add_argument("--plot-id", help="plot id (default: the single plot in the inventory)")
    p.add_argument("--figures", action="store_true", help="write per-tree taper figures")
    p.add_argument("--masks", action="store_true", help="write per-view alpha masks")
    _add_config_flags(p)
    return ap


def cmd_synth(args):
    from .synth import make_plot, write_scene
    t0 = time.perf_counter()
    scene = make_plot(args.stems, args.clutter, args.cameras, args.terrain, args.seed, plot_id=args.plot_id)
    tmp = args.out.with_name(f".{args.out.name}.tmp{os.getpid()}")
    write_scene(scene, tmp)
    if args.out.exists():
        import shutil
        shutil.rmtree(args.out)
    os.replace(tmp, args.out)
    summary("synth", stems=len(scene.truths), gaussians=0 if scene.field is None else len(scene.field),
            views=len(scene.rig), seed=args.seed, seconds=round(time.perf_counter() - t0, 2))


def _scene_plot_id(args, inventory_path):
    if args.plot_id:
        return args.plot_id
    plots = sorted({r.plot_id for r in load_inventory(inventory_path).rows})
    if len(plots) != 1:
        raise StageError(f"{inventory_path}: {len(plots)} plots listed; pass --plot-id")
    return plots[0]


def cmd_pipeline(args, cfg):
    scene, out = args.scene, args.out
    inv = scene / "inventory.csv"
    glab = scene / ("segment_labels.csv" if args.labels == "segment" else "gaussian_labels.csv")
    if args.labels == "segment" and not glab.exists():
        glab = scene / "gaussian_labels.csv"
    plot_id = _scene_plot_id(args, inv)
    out.mkdir(parents=True, exist_ok=True)
    scored = stage_sample(cfg, scene / "splats.ply", scene / "cameras", out / "cloud.ply", glab,
                          out / "labels.csv", out / "masks" if args.masks else None)
    records = stage_measure(cfg, out / "cloud.ply", out / "labels.csv", scene / "terrain.asc",
                            out / "records", plot_id, inv, out / "figures" if args.figures else None,
                            cloud=scored)
    stage_eval(cfg, records, inv, out)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "synth":
            cmd_synth(args)
            return 0
        try:
            cfg = build_config(args)
        except ConfigError as exc:
            parser.error(str(exc))
        if args.command == "sample":
            labels_out = args.labels_out or args.out.with_name(args.out.stem + "_labels.csv")
            stage_sample(cfg, args.splats, args.cameras, args.out, args.gaussian_labels,
                         labels_out, args.masks_dir)
        elif args.command == "measure":
            stage_measure(cfg, args.cloud, args.labels, args.terrain, args.out, args.plot_id,
                          args.inventory, args.figures)
        elif args.command == "eval":
            records = [r for path in args.records for r in load_records(path)]
            stage_eval(cfg, records, args.inventory, args.out, figure=not args.no_figure)
        elif args.command == "pipeline":
            cmd_pipeline(args, cfg)
        return 0
    except (OSError, FormatError, DataError, StageError, LookupError, ValueError) as exc:
        where = getattr(exc, "filename", None)
        msg = f"{where}: {exc.strerror}" if isinstance(exc, OSError) and where and exc.strerror else str(exc)
        print(f"{PROG}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
