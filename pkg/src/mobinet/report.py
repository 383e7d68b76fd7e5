"""Report emission: aligned text tables, CSV files, and a small
self-contained SVG line-chart writer for curve plots."""

from __future__ import annotations

import csv
from pathlib import Path


def text_table(rows, columns, title=None) -> str:
    """Align dict rows under the given column names."""
    cells = [[str(c) for c in columns]]
    for row in rows:
        cells.append([_fmt(row.get(c, "")) for c in columns])
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(c.ljust(w) for c, w in zip(cells[0], widths)))
    lines.append("  ".join("-" * w for w in widths))
    for r in cells[1:]:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def write_csv(path, rows, columns):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def history_csv(path, history):
    write_csv(path, history, ["epoch", "lr", "train_loss", "test_top1", "test_top5"])


def curves_csv(path, named_histories, field="train_loss"):
    """Merge several runs into one CSV: epoch, <run1>, <run2>, ..."""
    names = list(named_histories)
    epochs = max((len(h) for h in named_histories.values()), default=0)
    rows = []
    for e in range(epochs):
        row = {"epoch": e + 1}
        for name in names:
            h = named_histories[name]
            row[name] = h[e][field] if e < len(h) else ""
        rows.append(row)
    write_csv(path, rows, ["epoch"] + names)
    return rows


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_line_chart(path, series, title="", xlabel="epoch", ylabel="", size=(640, 400)):
    """Write a minimal SVG line chart.

    series: {name: [(x, y), ...]}; non-finite points are skipped.
    """
    w, h = size
    ml, mr, mt, mb = 60, 20, 34, 44
    pw, ph = w - ml - mr, h - mt - mb
    pts_all = [
        (x, y)
        for pts in series.values()
        for x, y in pts
        if _finite(x) and _finite(y)
    ]
    if not pts_all:
        pts_all = [(0.0, 0.0), (1.0, 1.0)]
    xs, ys = zip(*pts_all)
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x0 == x1:
        x1 = x0 + 1
    if y0 == y1:
        y1 = y0 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(x):
        return ml + pw * (x - x0) / (x1 - x0)

    def sy(y):
        return mt + ph * (1 - (y - y0) / (y1 - y0))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w/2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
    ]
    # axes + ticks
    out.append(
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt+ph}" stroke="black"/>'
        f'<line x1="{ml}" y1="{mt+ph}" x2="{ml+pw}" y2="{mt+ph}" stroke="black"/>'
    )
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        yy = sy(yv)
        out.append(
            f'<line x1="{ml-4}" y1="{yy:.1f}" x2="{ml+pw}" y2="{yy:.1f}" '
            f'stroke="#ddd"/>'
            f'<text x="{ml-8}" y="{yy+4:.1f}" text-anchor="end">{yv:.3g}</text>'
        )
        xv = x0 + (x1 - x0) * i / 4
        xx = sx(xv)
        out.append(
            f'<text x="{xx:.1f}" y="{mt+ph+16}" text-anchor="middle">{xv:.3g}</text>'
        )
    out.append(
        f'<text x="{ml+pw/2:.0f}" y="{h-8}" text-anchor="middle">{xlabel}</text>'
    )
    if ylabel:
        out.append(
            f'<text x="14" y="{mt+ph/2:.0f}" text-anchor="middle" '
            f'transform="rotate(-90 14 {mt+ph/2:.0f})">{ylabel}</text>'
        )
    for i, (name, pts) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        path_pts = " ".join(
            f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts if _finite(x) and _finite(y)
        )
        if path_pts:
            out.append(
                f'<polyline points="{path_pts}" fill="none" stroke="{color}" '
                f'stroke-width="1.8"/>'
            )
        ly = mt + 14 + 16 * i
        out.append(
            f'<line x1="{ml+pw-130}" y1="{ly-4}" x2="{ml+pw-106}" y2="{ly-4}" '
            f'stroke="{color}" stroke-width="2"/>'
            f'<text x="{ml+pw-100}" y="{ly}">{name}</text>'
        )
    out.append("</svg>")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(out), encoding="utf-8")


def _finite(v):
    try:
        return v == v and v not in (float("inf"), float("-inf"))
    except Exception:
        return False


def perf_report_text(report) -> str:
    d = report.as_dict()
    lines = [
        "performance report",
        f"  float ops:        {d['float_ops']:,}",
        f"  binary ops:       {d['binary_ops']:,}",
        f"  effective FLOPs:  {d['effective_flops']:,.0f} ({d['effective_flops']/1e6:.2f}M)",
        f"  params (binary):  {d['params_binary']:,}",
        f"  params (float):   {d['params_float']:,}",
        f"  serialized bytes: {d['serialized_bytes']:,}",
        f"  speedup vs ref:   {d['speedup_vs_reference']:.2f}x",
    ]
    return "\n".join(lines)
