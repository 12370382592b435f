"""CSV tables and SVG plots for evaluation reports and sweeps."""
from __future__ import annotations

import csv
import io

from .evaluation import EvalReport, label_str


def _fmt(x: float) -> str:
    return f"{100.0 * x:.2f}"


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def map_table_csv(report: EvalReport, name: str = "model") -> str:
    """One row of mAP (in %) per threshold plus the average, like a results table."""
    header = ["method"] + [f"{t:g}" for t in report.thresholds] + ["Avg"]
    row = [name] + [_fmt(report.map_per_threshold[t]) for t in report.thresholds] + [_fmt(report.average_map)]
    return _csv([header, row])


def per_class_csv(report: EvalReport) -> str:
    rows = [["class"] + [f"{t:g}" for t in report.thresholds]]
    for label, aps in report.per_class_ap.items():
        rows.append([label_str(label)] + [_fmt(a) for a in aps])
    return _csv(rows)


def curves_csv(curves: dict) -> str:
    rows = [["budget_seconds", "start_fraction", "end_fraction"]]
    for x, s, e in zip(curves["budgets"], curves["start"], curves["end"]):
        rows.append([f"{x:g}", f"{s:.6f}", f"{e:.6f}"])
    return _csv(rows)


def length_groups_csv(groups: dict) -> str:
    return _csv([["group", "average_mAP"]] + [[k, _fmt(v)] for k, v in groups.items()])


def sweep_csv(param: str, rows: list[tuple], thresholds) -> str:
    """``rows`` are ``(value, EvalReport)`` pairs."""
    out = [[param] + [f"{t:g}" for t in thresholds] + ["Avg"]]
    for value, rep in rows:
        out.append([str(value)] + [_fmt(rep.map_per_threshold[t]) for t in thresholds] + [_fmt(rep.average_map)])
    return _csv(out)


def curves_svg(curves: dict, provenance: str) -> str:
    """Standalone SVG of the start/end boundary-error curves.

    ``provenance`` is embedded as an XML comment right after the prolog. The
    output is byte-stable: fixed hash salt, no timestamp.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "tadconf", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot(curves["budgets"], curves["start"], marker="o", label="start")
        ax.plot(curves["budgets"], curves["end"], marker="s", label="end")
        ax.set_xlabel("error budget x (s)")
        ax.set_ylabel("fraction of ground truths")
        ax.set_ylim(0.0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(loc="lower right")
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": "tadconf"})
        plt.close(fig)
    svg = buf.getvalue()
    comment = "<!-- " + provenance.replace("--", "- -") + " -->\n"
    head, sep, rest = svg.partition("?>\n")
    return head + sep + comment + rest if sep else comment + svg
