"""Result tables and plot-ready CSV reports.

Every file carries ``# protocol=<digest>`` in its comment header; report
generation refuses a directory whose files disagree.
"""
from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from filelock import FileLock

from .fileio import atomic_write_text, read_csv, write_csv

RESULT_COLUMNS = ("method", "ratio", "seed", "acc", "flops_rel", "params")
HIST_BINS = 50
RESULTS_FILE = "results.csv"
HIST_FILE = "importance_hist.csv"
LAYER_MAP_FILE = "layer_map.csv"
PROTOCOL_KEY = "protocol"


class ReportError(ValueError):
    pass


class MixedProtocolError(ReportError):
    pass


# --------------------------------------------------------------------------
# histograms
# --------------------------------------------------------------------------

def importance_histogram(values: np.ndarray, bins: int = HIST_BINS,
                         upper: Optional[float] = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Counts over ``bins`` uniform bins on [0, upper] (upper=None: [0, max]).

    The last bin is closed so a value equal to ``upper`` is counted.
    """
    values = np.asarray(values, np.float64)
    if upper is None:
        upper = float(values.max()) if values.size and values.max() > 0 else 1.0
    if values.size and (values.min() < 0 or values.max() > upper):
        raise ReportError(f"importances outside [0, {upper}]")
    counts, edges = np.histogram(values, bins=bins, range=(0.0, upper))
    return counts, edges


def write_histogram(path, values: np.ndarray, norm_kind: str, meta: Dict[str, str]) -> None:
    """σBN importances live in (0, 1); |γ| is binned on [0, max]."""
    counts, edges = importance_histogram(values, upper=1.0 if norm_kind == "sigma" else None)
    rows = [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))]
    write_csv(path, {**meta, "norm_kind": norm_kind, "channels": str(len(values))},
              ("bin_lo", "bin_hi", "count"), rows)


# --------------------------------------------------------------------------
# results table
# --------------------------------------------------------------------------

def _key(row: Dict[str, str]) -> Tuple[str, float, int]:
    return row["method"], float(row["ratio"]), int(row["seed"])


def read_results(path) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    meta, rows = read_csv(path)
    if rows and tuple(rows[0]) != RESULT_COLUMNS:
        raise ReportError(f"{path}: unexpected columns {tuple(rows[0])}")
    return meta, rows


def upsert_result(results_dir, protocol: str, method: str, ratio: float, seed: int,
                  acc: float, flops_rel: float, params: int) -> Path:
    """Insert or replace the (method, ratio, seed) row of ``results.csv``.

    Rows are kept sorted so the file bytes depend only on its content.  A
    lock serialises concurrent writers; the write itself is atomic.
    """
    path = Path(results_dir) / RESULTS_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    new = {"method": method, "ratio": repr(float(ratio)), "seed": str(int(seed)),
           "acc": repr(float(acc)), "flops_rel": repr(float(flops_rel)), "params": str(int(params))}
    with FileLock(str(path) + ".lock"):
        rows: Dict[Tuple, Dict[str, str]] = {}
        if path.exists():
            meta, old = read_results(path)
            if meta.get(PROTOCOL_KEY) != protocol:
                raise MixedProtocolError(
                    f"{path} holds protocol {meta.get(PROTOCOL_KEY)}, refusing to add {protocol}")
            rows = {_key(r): r for r in old}
        rows[_key(new)] = new
        ordered = [rows[k] for k in sorted(rows)]
        write_csv(path, {PROTOCOL_KEY: protocol}, RESULT_COLUMNS,
                  [[r[c] for c in RESULT_COLUMNS] for r in ordered])
    return path


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------

def _mean_std(xs: Sequence[float]) -> Tuple[float, float]:
    a = np.asarray(xs, np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def accuracy_curves(rows: Iterable[Dict[str, str]]) -> List[tuple]:
    """(method, ratio, seeds, acc_mean, acc_std, flops_rel_mean, params_mean)."""
    groups: Dict[Tuple[str, float], List[Dict[str, str]]] = defaultdict(list)
    for r in rows:
        groups[(r["method"], float(r["ratio"]))].append(r)
    out = []
    for (method, ratio), rs in sorted(groups.items()):
        acc_m, acc_s = _mean_std([float(r["acc"]) for r in rs])
        fl = float(np.mean([float(r["flops_rel"]) for r in rs]))
        pa = float(np.mean([int(r["params"]) for r in rs]))
        out.append((method, ratio, len(rs), acc_m, acc_s, fl, pa))
    return out


def _fmt_acc(mean: float, std: float, seeds: int) -> str:
    return f"{100 * mean:.2f}" + (f" ± {100 * std:.2f}" if seeds > 1 else "")


def summary_table(curves: Sequence[tuple]) -> str:
    """Markdown table: one row per method, a Baseline column and an
    Acc/FLOPs column pair per pruning ratio."""
    ratios = sorted({c[1] for c in curves if c[1] > 0})
    methods = sorted({c[0] for c in curves})
    cell = {(c[0], c[1]): c for c in curves}
    head = ["Method", "Baseline Acc"]
    for r in ratios:
        pct = f"{100 * r:g}%"
        head += [f"{pct} Acc", f"{pct} FLOPs"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for m in methods:
        base = cell.get((m, 0.0))
        row = [m, _fmt_acc(base[3], base[4], base[2]) if base else "n/a"]
        for r in ratios:
            c = cell.get((m, r))
            row += [_fmt_acc(c[3], c[4], c[2]), f"{100 * c[5]:.1f}%"] if c else ["n/a", "n/a"]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def _check_protocol(path: Path, meta: Dict[str, str], protocol: str) -> None:
    if meta.get(PROTOCOL_KEY) != protocol:
        raise MixedProtocolError(
            f"{path} was produced under protocol {meta.get(PROTOCOL_KEY)}, expected {protocol}")


def build_report(results_dir, out_dir=None) -> Dict[str, Path]:
    """Write curves.csv, histograms.csv, heatmap.csv and summary.md."""
    root = Path(results_dir)
    res_path = root / RESULTS_FILE
    if not res_path.exists():
        raise ReportError(f"{root}: no {RESULTS_FILE}, nothing to report")
    meta, rows = read_results(res_path)
    if not rows:
        raise ReportError(f"{res_path} has no rows")
    protocol = meta.get(PROTOCOL_KEY, "")
    out = Path(out_dir) if out_dir is not None else root / "report"
    written: Dict[str, Path] = {}
    rmeta = {PROTOCOL_KEY: protocol}

    curves = accuracy_curves(rows)
    written["curves"] = out / "curves.csv"
    write_csv(written["curves"], rmeta,
              ("method", "ratio", "seeds", "acc_mean", "acc_std", "flops_rel_mean", "params_mean"),
              curves)

    hist_rows = []
    for p in sorted(root.glob(f"*/seed*/{HIST_FILE}")):
        hmeta, hrows = read_csv(p)
        _check_protocol(p, hmeta, protocol)
        for r in hrows:
            hist_rows.append((hmeta.get("method", p.parts[-3]), int(hmeta.get("seed", -1)),
                              hmeta.get("norm_kind", ""), r["bin_lo"], r["bin_hi"], r["count"]))
    written["histograms"] = out / "histograms.csv"
    write_csv(written["histograms"], rmeta,
              ("method", "seed", "norm_kind", "bin_lo", "bin_hi", "count"), hist_rows)

    maps: Dict[Tuple[str, float], Dict[str, List[float]]] = defaultdict(lambda: defaultdict(list))
    layer_order: List[str] = []
    for p in sorted(root.glob(f"*/seed*/*/{LAYER_MAP_FILE}")):
        lmeta, lrows = read_csv(p)
        _check_protocol(p, lmeta, protocol)
        key = (lmeta["method"], float(lmeta["ratio"]))
        for r in lrows:
            if r["layer"] not in layer_order:
                layer_order.append(r["layer"])
            maps[key][r["layer"]].append(float(r["fraction"]))
    heat = []
    for key in sorted(maps):
        heat.append([key[0], key[1]] + [
            float(np.mean(maps[key][l])) if maps[key].get(l) else math.nan for l in layer_order])
    written["heatmap"] = out / "heatmap.csv"
    write_csv(written["heatmap"], rmeta, ["method", "ratio"] + layer_order, heat)

    written["summary"] = out / "summary.md"
    atomic_write_text(written["summary"], summary_table(curves))
    return written
