"""Search-efficiency reports: best-so-far figures plus summary tables.

Reads one or more trace CSVs, renders the matched-budget comparison chart
(guided runs in red, random baselines in black) to SVG and PNG, and writes a
delimited summary alongside the figures.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .search import TRACE_HEADER


class TraceError(ValueError):
    pass


@dataclass
class Trace:
    name: str
    ids: list[int]
    snaps: list[str]
    values: list[float]
    sources: list[str]

    @property
    def is_baseline(self) -> bool:
        return any(s == "random_baseline" for s in self.sources)

    def best_so_far(self) -> list[float]:
        out = []
        cur = float("-inf")
        for v in self.values:
            cur = max(cur, v)
            out.append(cur)
        return out

    def best(self) -> float:
        return max(self.values)

    def evaluations_to_best(self) -> int:
        return int(max(range(len(self.values)), key=lambda i: (self.values[i], -i))) + 1

    def top_k(self, k: int) -> list[float]:
        return sorted(self.values, reverse=True)[:k]


def load_trace(path: str) -> Trace:
    name = os.path.splitext(os.path.basename(path))[0]
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceError(f"{path}: empty file") from None
        if ",".join(header) != TRACE_HEADER:
            raise TraceError(f"{path}: row 1: bad header {','.join(header)!r}")
        ids, snaps, values, sources = [], [], [], []
        for rownum, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise TraceError(f"{path}: row {rownum}: expected 6 columns, got {len(row)}")
            try:
                ids.append(int(row[0]))
                values.append(float(row[2]))
                float(row[3])
                float(row[5])
            except ValueError as exc:
                raise TraceError(f"{path}: row {rownum}: {exc}") from None
            snaps.append(row[1])
            sources.append(row[4])
    if not ids:
        raise TraceError(f"{path}: no data rows")
    return Trace(name, ids, snaps, values, sources)


def render_figure(traces: list[Trace], out_path_base: str) -> list[str]:
    """Best-so-far step chart; returns the written file paths."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for tr in traces:
        color = "black" if tr.is_baseline else "tab:red"
        xs = [i + 1 for i in range(len(tr.values))]
        ax.step(xs, tr.best_so_far(), where="post", color=color, label=tr.name, linewidth=1.4)
    ax.set_xlabel("evaluated architectures")
    ax.set_ylabel("best value so far")
    ax.set_title("search efficiency at matched budget")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    paths = [out_path_base + ".svg", out_path_base + ".png"]
    for p in paths:
        fig.savefig(p)
    plt.close(fig)
    return paths


def summarize(traces: list[Trace], top_k: int = 10) -> list[dict]:
    rows = []
    baselines = [t for t in traces if t.is_baseline]
    for tr in traces:
        row = {
            "trace": tr.name,
            "kind": "random" if tr.is_baseline else "guided",
            "evaluations": len(tr.values),
            "best_value": tr.best(),
            "evaluations_to_best": tr.evaluations_to_best(),
            "top_k_median": sorted(tr.top_k(top_k))[len(tr.top_k(top_k)) // 2],
            "best_snap": tr.snaps[tr.evaluations_to_best() - 1],
        }
        if not tr.is_baseline and baselines:
            # rank of the best baseline value inside this guided store
            best_baseline = max(b.best() for b in baselines)
            row["baseline_best_rank_in_store"] = 1 + sum(1 for v in tr.values if v > best_baseline)
        rows.append(row)
    return rows


def write_summary_csv(rows: list[dict], path: str):
    fields = ["trace", "kind", "evaluations", "best_value", "evaluations_to_best",
              "top_k_median", "best_snap", "baseline_best_rank_in_store"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def format_summary(rows: list[dict]) -> str:
    lines = []
    for row in rows:
        parts = [f"{row['trace']} ({row['kind']})",
                 f"best={row['best_value']:.4f} @ eval {row['evaluations_to_best']}",
                 f"top10 median={row['top_k_median']:.4f}",
                 f"best snap: {row['best_snap']}"]
        if "baseline_best_rank_in_store" in row:
            parts.append(f"baseline best would rank #{row['baseline_best_rank_in_store']} in this store")
        lines.append("  ".join(parts))
    return "\n".join(lines)


def run_report(trace_paths: list[str], out_dir: str) -> dict:
    traces = [load_trace(p) for p in trace_paths]
    os.makedirs(out_dir, exist_ok=True)
    figures = render_figure(traces, os.path.join(out_dir, "search_efficiency"))
    rows = summarize(traces)
    csv_path = os.path.join(out_dir, "summary.csv")
    write_summary_csv(rows, csv_path)
    return {"figures": figures, "summary_csv": csv_path, "rows": rows}
