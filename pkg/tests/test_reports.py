import numpy as np
import pytest

from rniprune.fileio import read_csv, write_csv
from rniprune.reports import (HIST_BINS, MixedProtocolError, ReportError, accuracy_curves,
                              build_report, importance_histogram, read_results, summary_table,
                              upsert_result, write_histogram)


class TestHistogram:
    def test_mass_conserved(self, rng):
        v = rng.random(777)
        v[:3] = [0.0, 1.0, 0.5]
        counts, edges = importance_histogram(v)
        assert counts.sum() == 777 and len(counts) == HIST_BINS
        assert edges[0] == 0 and edges[-1] == 1

    def test_out_of_range(self):
        with pytest.raises(ReportError):
            importance_histogram(np.array([0.5, 1.5]))

    def test_vanilla_range(self, tmp_path):
        write_histogram(tmp_path / "h.csv", np.array([0.0, 2.0, 3.0]), "vanilla", {"protocol": "p"})
        meta, rows = read_csv(tmp_path / "h.csv")
        assert float(rows[-1]["bin_hi"]) == 3.0 and sum(int(r["count"]) for r in rows) == 3
        assert meta["channels"] == "3"


class TestResults:
    def test_upsert_overwrites(self, tmp_path):
        upsert_result(tmp_path, "p", "rni", 0.5, 1, 0.8, 0.3, 100)
        upsert_result(tmp_path, "p", "rni", 0.9, 1, 0.7, 0.1, 50)
        upsert_result(tmp_path, "p", "rni", 0.5, 1, 0.85, 0.3, 100)
        meta, rows = read_results(tmp_path / "results.csv")
        assert meta["protocol"] == "p" and len(rows) == 2
        assert rows[0] == {"method": "rni", "ratio": "0.5", "seed": "1", "acc": "0.85",
                           "flops_rel": "0.3", "params": "100"}

    def test_order_independent_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        upsert_result(a, "p", "x", 0.5, 1, 0.1, 0.5, 1)
        upsert_result(a, "p", "x", 0.5, 2, 0.2, 0.5, 1)
        upsert_result(b, "p", "x", 0.5, 2, 0.2, 0.5, 1)
        upsert_result(b, "p", "x", 0.5, 1, 0.1, 0.5, 1)
        assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()

    def test_refuses_other_protocol(self, tmp_path):
        upsert_result(tmp_path, "p", "x", 0.5, 1, 0.1, 0.5, 1)
        with pytest.raises(MixedProtocolError):
            upsert_result(tmp_path, "q", "x", 0.5, 1, 0.1, 0.5, 1)


class TestSummary:
    def test_curves_and_table(self):
        rows = [{"method": "rni", "ratio": r, "seed": s, "acc": a, "flops_rel": f, "params": "10"}
                for r, s, a, f in [("0.0", "1", "0.9", "1.0"), ("0.0", "2", "0.92", "1.0"),
                                   ("0.5", "1", "0.89", "0.4"), ("0.9", "1", "0.8", "0.1")]]
        curves = accuracy_curves(rows)
        assert [(c[0], c[1], c[2]) for c in curves] == [("rni", 0.0, 2), ("rni", 0.5, 1), ("rni", 0.9, 1)]
        table = summary_table(curves).splitlines()
        assert table[0] == "| Method | Baseline Acc | 50% Acc | 50% FLOPs | 90% Acc | 90% FLOPs |"
        assert table[2].startswith("| rni | 91.00 ± 1.41 | 89.00 | 40.0% | 80.00 | 10.0% |")

    def test_single_point(self, tmp_path):
        upsert_result(tmp_path, "p", "rni", 0.5, 1, 0.8, 0.3, 100)
        out = build_report(tmp_path)
        _, rows = read_csv(out["curves"])
        assert len(rows) == 1

    def test_empty_dir(self, tmp_path):
        with pytest.raises(ReportError, match="nothing to report"):
            build_report(tmp_path)

    def test_mixed_protocol_files(self, tmp_path):
        upsert_result(tmp_path, "p", "rni", 0.5, 1, 0.8, 0.3, 100)
        write_csv(tmp_path / "rni" / "seed1" / "global_r0.5" / "layer_map.csv",
                  {"protocol": "other", "method": "rni", "ratio": "0.5"},
                  ("layer", "width", "removed", "fraction"), [("conv1", 8, 4, 0.5)])
        with pytest.raises(MixedProtocolError):
            build_report(tmp_path)
