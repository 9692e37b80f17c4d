"""Plot-level DBH accuracy: RMSE, RRMSE, MAE, ME and success rate."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .scene_io import FieldInventory
from .stem_fit import DbhRecord

COLUMNS = ("RMSE", "RRMSE", "MAE", "ME", "SR")


class MatchError(KeyError):
    pass


@dataclass(frozen=True)
class GroupMetrics:
    group: str
    method: str
    rmse: Optional[float]     # cm
    rrmse: Optional[float]    # %
    mae: Optional[float]      # cm
    me: Optional[float]       # cm, estimate - field
    n_success: int
    n_total: int

    @property
    def sr(self):
        return f"{self.n_success}/{self.n_total}"


@dataclass(frozen=True)
class MetricsReport:
    groups: tuple

    def to_dict(self):
        return {"columns": list(COLUMNS), "groups": [dict(asdict(g), SR=g.sr) for g in self.groups]}


def error_stats(est, ref):
    """(rmse, rrmse %, mae, me) for paired estimate/field arrays in cm."""
    est, ref = np.asarray(est, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    err = est - ref
    rmse = float(np.sqrt(np.mean(err ** 2)))
    return rmse, 100.0 * rmse / float(np.mean(ref)), float(np.mean(np.abs(err))), float(np.mean(err))


def match_records(records, inventory: FieldInventory):
    """Pair each record with its inventory row; unmatched records are an error."""
    table = inventory.lookup()
    pairs = []
    for r in records:
        key = (r.plot_id, r.tree_id)
        if key not in table:
            raise MatchError(f"record for plot {r.plot_id!r} tree {r.tree_id} has no inventory row")
        pairs.append((r, table[key]))
    return pairs


def _group(name, method, pairs):
    ok = [(r.dbh_cm, f.dbh_cm) for r, f in pairs if r.ok]
    if not ok:
        return GroupMetrics(name, method, None, None, None, None, 0, len(pairs))
    est, ref = zip(*ok)
    rmse, rrmse, mae, me = error_stats(est, ref)
    return GroupMetrics(name, method, rmse, rrmse, mae, me, len(ok), len(pairs))


def evaluate(records, inventory: FieldInventory, grouping="both") -> MetricsReport:
    """Metrics per (plot, method) and/or pooled per method.

    Failed trees are excluded from the error terms but counted in the SR
    denominator; RRMSE normalizes by the mean field DBH of the successful
    trees of the same group.
    """
    pairs = match_records(records, inventory)
    methods = sorted({r.method for r, _ in pairs})
    groups = []
    for m in methods:
        mp = [(r, f) for r, f in pairs if r.method == m]
        if grouping in ("per-plot", "both"):
            for plot in sorted({r.plot_id for r, _ in mp}, key=_natural):
                groups.append(_group(plot, m, [(r, f) for r, f in mp if r.plot_id == plot]))
        if grouping in ("pooled", "both"):
            groups.append(_group("All", m, mp))
    return MetricsReport(tuple(groups))


def _natural(s):
    return (0, int(s), "") if str(s).isdigit() else (1, 0, str(s))


def _fmt(x):
    return "-" if x is None else f"{x:.2f}"


def format_table(report: MetricsReport) -> str:
    """Aligned text table with columns Plot, Method, RMSE, RRMSE, MAE, ME, SR."""
    head = ["Plot", "Method", "RMSE(cm)", "RRMSE(%)", "MAE(cm)", "ME(cm)", "SR"]
    rows = [[g.group, g.method, _fmt(g.rmse), _fmt(g.rrmse), _fmt(g.mae), _fmt(g.me), g.sr]
            for g in report.groups]
    widths = [max(len(str(r[i])) for r in [head] + rows) for i in range(len(head))]
    lines = ["  ".join(str(c).rjust(w) if i > 1 else str(c).ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [head] + rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, json_path, text_path, header=None):
    doc = report.to_dict()
    if header:
        doc["provenance"] = header
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(text_path, "w", encoding="utf-8") as fh:
        if header:
            fh.write("".join(f"# {k}: {v}\n" for k, v in header.items() if not isinstance(v, dict)))
        fh.write(format_table(report))


def scatter_pairs(records, inventory: FieldInventory):
    """(plot, tree, method, field, estimate) rows for successful matched trees."""
    return [(r.plot_id, r.tree_id, r.method, f.dbh_cm, r.dbh_cm)
            for r, f in match_records(records, inventory) if r.ok]


def emit_scatter(records, inventory: FieldInventory, path, figure=True):
    """Write field-vs-estimate pairs to CSV and, alongside it, an SVG scatter with a 1:1 line."""
    rows = scatter_pairs(records, inventory)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["field_dbh_cm", "estimated_dbh_cm", "plot_id", "tree_id", "method"])
        for plot, tree, method, f, e in rows:
            w.writerow([_num(f), _num(e), plot, tree, method])
    if figure:
        from .plotting import scatter_figure
        scatter_figure(rows, str(path).rsplit(".", 1)[0] + ".svg")
    return rows


def _num(x):
    return repr(round(float(x), 6)) if not float(x).is_integer() else str(int(x))
