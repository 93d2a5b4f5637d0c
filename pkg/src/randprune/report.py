"""Search reports and their table / plot-data files.

``report.csv`` columns, in order::

    Criterion,Epochs,Top-1 Error (%),Top-5 Error (%),FLOPs [G] / Ratio (%),Params [M] / Ratio (%)

Errors are percentages with two decimals; complexity cells read
``"<value> / <ratio>"`` with the absolute count to six decimals (GFLOPs,
millions of parameters) and the ratio to two.  The first row is the baseline.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .graph import ChannelConfig, ModelGraph, complexity, from_description
from .sampler import SampleRecord
from .utils import dumps

TABLE_COLUMNS = ("Criterion", "Epochs", "Top-1 Error (%)", "Top-5 Error (%)",
                 "FLOPs [G] / Ratio (%)", "Params [M] / Ratio (%)")


@dataclass
class SearchReport:
    criterion: str
    records: list
    baseline: dict
    best: SampleRecord | None = None
    final: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    graph: ModelGraph | None = None
    tag: str = ""
    model: object = field(default=None, repr=False, compare=False)

    @property
    def label(self):
        if not self.tag or self.tag == self.criterion:
            return self.criterion
        return f"{self.tag} {self.criterion}"

    def check(self):
        if self.best is not None:
            if not any(r.seed_index == self.best.seed_index for r in self.records):
                raise ValueError("chosen best is not among the records")
            if self.graph is not None:
                c = complexity(self.graph, self.best.config)
                if c.flops != self.best.complexity.flops or c.params != self.best.complexity.params:
                    raise ValueError("best record's complexity disagrees with graph accounting")
        return self

    def to_dict(self):
        return {
            "criterion": self.criterion, "tag": self.tag, "baseline": self.baseline,
            "best": self.best.to_dict() if self.best else None, "final": self.final,
            "timings": self.timings, "config": self.config,
            "records": [r.to_dict() for r in self.records],
            "graph": self.graph.describe() if self.graph is not None else None,
        }


def _pct(x):
    return f"{100 * (1 - x):.2f}"


def _cell(value, scale, ratio):
    return f"{value / scale:.6f} / {100 * ratio:.2f}"


def table_rows(reports):
    reports = list(reports)
    base = reports[0].baseline
    rows = [{
        TABLE_COLUMNS[0]: "Baseline",
        TABLE_COLUMNS[1]: str(base.get("epochs", "")),
        TABLE_COLUMNS[2]: _pct(base["top1"]),
        TABLE_COLUMNS[3]: _pct(base["top5"]),
        TABLE_COLUMNS[4]: _cell(base["flops"], 1e9, 1.0),
        TABLE_COLUMNS[5]: _cell(base["params"], 1e6, 1.0),
    }]
    for r in reports:
        if r.best is None:
            continue
        c = r.best.complexity
        rows.append({
            TABLE_COLUMNS[0]: r.label,
            TABLE_COLUMNS[1]: str(r.final.get("epochs", "")),
            TABLE_COLUMNS[2]: _pct(r.final.get("top1", r.best.final_accuracy or 0.0)),
            TABLE_COLUMNS[3]: _pct(r.final.get("top5", r.best.final_top5 or 0.0)),
            TABLE_COLUMNS[4]: _cell(c.flops, 1e9, c.flops_ratio),
            TABLE_COLUMNS[5]: _cell(c.params, 1e6, c.params_ratio),
        })
    return rows


def format_csv(rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def format_text(rows, columns):
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) for c in columns]
    line = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    out = [line.rstrip(), "-" * len(line.rstrip())]
    for r in rows:
        out.append("  ".join(str(r[c]).ljust(w) for c, w in zip(columns, widths)).rstrip())
    return "\n".join(out) + "\n"


def _err(acc):
    return "" if acc is None else f"{100 * (1 - acc):.4f}"


def emit_report(reports, out_dir, formats=("csv", "txt", "plots", "json")):
    """Write the result table and plot-data files for one or more reports.

    Returns the list of written paths.
    """
    if isinstance(reports, SearchReport):
        reports = [reports]
    reports = [r.check() for r in reports]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        p = out / name
        p.write_text(text)
        written.append(p)

    rows = table_rows(reports)
    if "csv" in formats:
        put("report.csv", format_csv(rows, TABLE_COLUMNS))
    if "txt" in formats:
        put("report.txt", format_text(rows, TABLE_COLUMNS))
    if "json" in formats:
        put("report.json", dumps([r.to_dict() for r in reports], indent=1))
    if "plots" not in formats:
        return written

    cols = ("criterion", "population", "best_proxy_top1_error", "final_top1_error")
    put("samples_vs_error.csv", format_csv([{
        "criterion": r.label, "population": len(r.records),
        "best_proxy_top1_error": _err(max((x.proxy_accuracy for x in r.records
                                           if x.proxy_accuracy is not None), default=None)),
        "final_top1_error": _err(r.final.get("top1")),
    } for r in reports], cols))

    cols = ("criterion", "epochs", "top1_error", "top5_error")
    put("epochs_vs_error.csv", format_csv([{
        "criterion": r.label, "epochs": r.final.get("epochs", ""),
        "top1_error": _err(r.final.get("top1")), "top5_error": _err(r.final.get("top5")),
    } for r in reports if r.final], cols))

    cols = ("criterion", "layer", "width", "kept", "ratio")
    lrows = []
    for r in reports:
        if r.best is None or r.graph is None:
            continue
        for lid in r.graph.prunable:
            w = r.graph[lid].out_channels
            k = r.best.config.keep_count[lid]
            lrows.append({"criterion": r.label, "layer": lid, "width": w, "kept": k, "ratio": f"{k / w:.6f}"})
    put("layer_ratios.csv", format_csv(lrows, cols))

    cols = ("criterion", "seed_index", "flops_ratio", "params_ratio", "proxy_top1_error", "final_top1_error")
    put("accuracy_vs_complexity.csv", format_csv([{
        "criterion": r.label, "seed_index": x.seed_index,
        "flops_ratio": f"{x.complexity.flops_ratio:.6f}", "params_ratio": f"{x.complexity.params_ratio:.6f}",
        "proxy_top1_error": _err(x.proxy_accuracy), "final_top1_error": _err(x.final_accuracy),
    } for r in reports for x in r.records], cols))
    return written


_RECORD_KEYS = {"seed_index", "keep_count", "flops", "params", "flops_ratio", "params_ratio", "proxy_accuracy",
                "proxy_top5", "final_accuracy", "final_top5"}


def record_from_dict(d, graph: ModelGraph) -> SampleRecord:
    cfg = ChannelConfig(dict(d["keep_count"]))
    extra = {k: v for k, v in d.items() if k not in _RECORD_KEYS}
    return SampleRecord(cfg, complexity(graph, cfg), d["seed_index"], d.get("proxy_accuracy"),
                        d.get("proxy_top5"), d.get("final_accuracy"), d.get("final_top5"), extra)


def report_from_dict(d) -> SearchReport:
    """Inverse of :meth:`SearchReport.to_dict` (the model itself is not stored)."""
    graph = from_description(d["graph"]) if d.get("graph") else None
    if graph is None:
        raise ValueError("report lacks a graph description")
    records = [record_from_dict(r, graph) for r in d["records"]]
    best = None
    if d.get("best"):
        best = next(r for r in records if r.seed_index == d["best"]["seed_index"])
    return SearchReport(d["criterion"], records, d["baseline"], best, d.get("final", {}), d.get("timings", {}),
                        d.get("config", {}), graph, d.get("tag", ""))


def load_reports(path):
    with open(path) as f:
        return [report_from_dict(d) for d in json.load(f)]
