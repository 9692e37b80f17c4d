"""Static figures written next to the delimited outputs.

Uses the Agg backend only; nothing here opens a window.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "stemsplat",   # stable element ids -> reproducible SVG bytes
    "svg.fonttype": "none",
})

METHOD_STYLE = {
    "circle-w": dict(marker="o", color="#1b7837", label="circle (weighted)"),
    "circle-nw": dict(marker="s", color="#762a83", label="circle (unweighted)"),
    "cylinder": dict(marker="^", color="#b35806", label="cylinder"),
}

POINT_GID = "dbh-points"


def scatter_figure(rows, path, title="Estimated vs. field DBH"):
    """rows: (plot, tree, method, field_cm, estimate_cm). One marker per row."""
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    vals = [v for r in rows for v in (r[3], r[4])]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 60.0)
    pad = 0.05 * (hi - lo or 1.0)
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], ls="--", lw=0.8, color="0.4", label="1:1")
    for method in sorted({r[2] for r in rows}):
        sub = [r for r in rows if r[2] == method]
        style = METHOD_STYLE.get(method, dict(marker="o", color="k", label=method))
        ax.scatter([r[3] for r in sub], [r[4] for r in sub], s=14, alpha=0.8, gid=f"{POINT_GID}-{method}",
                   edgecolors="none", **style)
    ax.set_xlim(lo - pad, hi + pad)
    ax.set_ylim(lo - pad, hi + pad)
    ax.set_aspect("equal")
    ax.set_xlabel("field DBH (cm)")
    ax.set_ylabel("estimated DBH (cm)")
    ax.set_title(title)
    if rows:
        ax.legend(frameon=False, loc="upper left")
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def taper_figure(record, path):
    """Slice diameters against height with the accepted taper line."""
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    if record.slice_diameters:
        h, d = zip(*record.slice_diameters)
        ax.plot([x * 100 for x in d], h, ".", ms=3, color="0.3", label="slice fits")
    if record.beta0 is not None:
        top = record.window or 3.0
        ax.plot([record.beta0 * 100, (record.beta0 + record.beta1 * top) * 100], [0, top],
                color="#1b7837", lw=1.2, label="taper")
    if record.dbh_cm is not None:
        ax.axhline(record.h_bh, color="#b2182b", lw=0.8, ls=":")
        ax.plot([record.dbh_cm], [record.h_bh], "x", color="#b2182b", label=f"DBH {record.dbh_cm:.1f} cm")
    ax.set_xlabel("diameter (cm)")
    ax.set_ylabel("height above ground (m)")
    ax.set_title(f"tree {record.tree_id} ({record.method})")
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
