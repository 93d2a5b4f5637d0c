import csv
from pathlib import Path

import pytest

from randprune.graph import ChannelConfig, LayerSpec, ModelGraph, complexity, config_from_units
from randprune.report import SearchReport, emit_report, load_reports
from randprune.sampler import SampleRecord

GOLDEN = Path(__file__).parent / "golden"


def tiny_graph():
    # conv 8*3*9*16 = 3456, pool 128, fc 16 -> 3600 FLOPs; 216 + 16 params
    return ModelGraph([LayerSpec("c", "conv2d", out_channels=8, kernel=(3, 3), padding=1),
                       LayerSpec("gap", "avgpool-global", predecessors=("c",)),
                       LayerSpec("fc", "linear", out_channels=2, predecessors=("gap",))], (3, 4, 4), 2)


def make_report(graph, records, best_index, criterion="L1", tag=""):
    best = next(r for r in records if r.seed_index == best_index)
    c = complexity(graph)
    return SearchReport(criterion, records, {"top1": 0.875, "top5": 0.9775, "flops": c.flops, "params": c.params,
                                             "epochs": 10},
                        best, {"top1": 0.8, "top5": 0.95, "epochs": 5}, graph=graph, tag=tag)


def record(graph, counts, i, proxy=0.5):
    cfg = ChannelConfig(counts)
    return SampleRecord(cfg, complexity(graph, cfg), i, proxy_accuracy=proxy)


def test_golden_csv(tmp_path):
    g = tiny_graph()
    rep = make_report(g, [record(g, {"c": 4}, 0, 0.7), record(g, {"c": 6}, 3, 0.6)], 0)
    emit_report(rep, tmp_path)
    assert (tmp_path / "report.csv").read_bytes() == (GOLDEN / "report.csv").read_bytes()


def test_text_table(tmp_path):
    g = tiny_graph()
    emit_report(make_report(g, [record(g, {"c": 4}, 0)], 0), tmp_path)
    lines = (tmp_path / "report.txt").read_text().splitlines()
    assert lines[0].startswith("Criterion") and "Params [M] / Ratio (%)" in lines[0]
    assert set(lines[1]) == {"-"}
    assert lines[2].startswith("Baseline") and lines[3].startswith("L1")


def test_baseline_ratios_and_layer_file(tmp_path, resnet_graph):
    g = resnet_graph
    recs = [record(g, config_from_units(g, {u: 8 for u in g.units}).keep_count, 0, 0.4),
            record(g, ChannelConfig.full(g).keep_count, 1, 0.3)]
    emit_report(make_report(g, recs, 0, "GM", tag="N=2"), tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "report.csv")))
    assert rows[0]["FLOPs [G] / Ratio (%)"].endswith("/ 100.00")
    assert rows[0]["Params [M] / Ratio (%)"].endswith("/ 100.00")
    assert rows[1]["Criterion"] == "N=2 GM"
    layers = list(csv.DictReader(open(tmp_path / "layer_ratios.csv")))
    assert [r["layer"] for r in layers] == list(g.prunable)
    assert all(0 < float(r["ratio"]) <= 1 for r in layers)


def test_plot_files(tmp_path):
    g = tiny_graph()
    emit_report(make_report(g, [record(g, {"c": 4}, 0, 0.7), record(g, {"c": 6}, 3, 0.6)], 0), tmp_path)
    s = list(csv.DictReader(open(tmp_path / "samples_vs_error.csv")))
    assert s == [{"criterion": "L1", "population": "2", "best_proxy_top1_error": "30.0000",
                  "final_top1_error": "20.0000"}]
    scatter = list(csv.DictReader(open(tmp_path / "accuracy_vs_complexity.csv")))
    assert [r["flops_ratio"] for r in scatter] == ["0.500000", "0.750000"]
    assert (tmp_path / "epochs_vs_error.csv").read_text().splitlines()[1] == "L1,5,20.0000,5.0000"


def test_json_roundtrip(tmp_path):
    g = tiny_graph()
    rep = make_report(g, [record(g, {"c": 4}, 0, 0.7), record(g, {"c": 6}, 3, 0.6)], 3, tag="Scratch",
                      criterion="Scratch")
    rep.records[1].extra["brief_top1"] = 0.65
    emit_report(rep, tmp_path)
    back = load_reports(tmp_path / "report.json")[0]
    assert back.best.seed_index == 3 and back.label == "Scratch"
    assert back.records[1].extra == {"brief_top1": 0.65}
    emit_report(back, tmp_path / "again")
    assert (tmp_path / "again" / "report.csv").read_text() == (tmp_path / "report.csv").read_text()


def test_check_rejects_inconsistent_best(resnet_graph):
    g = resnet_graph
    recs = [record(g, ChannelConfig.full(g).keep_count, 0)]
    rep = make_report(g, recs, 0)
    rep.best = record(g, ChannelConfig.full(g).keep_count, 7)
    with pytest.raises(ValueError, match="among"):
        rep.check()
    rep.best = recs[0]
    rep.best.complexity = complexity(g, config_from_units(g, {u: 4 for u in g.units}))
    with pytest.raises(ValueError, match="accounting"):
        rep.check()
