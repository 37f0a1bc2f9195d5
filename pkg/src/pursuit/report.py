"""CSV summaries and a dependency-free SVG reward curve."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

METRIC_ROWS = (("Total Timestep", "total_timestep"), ("Total Reward", "total_reward"), ("Average Reward", "average_reward"))


def write_summary_csv(path, label: str, summary: dict) -> None:
    """One row per run, one column per headline metric (means over episodes)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "episodes"] + [name for name, _ in METRIC_ROWS])
        w.writerow([label, summary["episodes"]] + [f"{summary[key]['mean']:.4f}" for _, key in METRIC_ROWS])


def write_compare_csv(path, summaries: dict[str, dict]) -> None:
    """Metric rows by variant columns."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric"] + list(summaries))
        for name, key in METRIC_ROWS:
            w.writerow([name] + [f"{s[key]['mean']:.4f}" for s in summaries.values()])


def reward_curve_svg(values: Sequence[float], title: str = "episode total reward", width: int = 640,
                     height: int = 320, smooth: int = 10) -> str:
    pad = 40
    n = len(values)
    if n == 0:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"></svg>\n'
    lo, hi = min(values), max(values)
    if hi == lo:
        hi = lo + 1.0

    def pt(i, v):
        x = pad + (width - 2 * pad) * (i / max(1, n - 1))
        y = height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo))
        return f"{x:.1f},{y:.1f}"

    raw = " ".join(pt(i, v) for i, v in enumerate(values))
    avg = []
    for i in range(n):
        window = values[max(0, i - smooth + 1): i + 1]
        avg.append(sum(window) / len(window))
    smooth_pts = " ".join(pt(i, v) for i, v in enumerate(avg))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<rect width="100%" height="100%" fill="white"/>\n'
        f'<text x="{pad}" y="20" font-family="sans-serif" font-size="13">{escape(title)}</text>\n'
        f'<text x="4" y="{pad}" font-family="sans-serif" font-size="10">{hi:.1f}</text>\n'
        f'<text x="4" y="{height - pad}" font-family="sans-serif" font-size="10">{lo:.1f}</text>\n'
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<polyline fill="none" stroke="#bbb" stroke-width="1" points="{raw}"/>\n'
        f'<polyline fill="none" stroke="#c33" stroke-width="2" points="{smooth_pts}"/>\n'
        "</svg>\n"
    )
