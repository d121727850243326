"""Atomic emission of CSV, JSON and SVG artifacts."""
from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import tempfile
from typing import Iterable, Sequence


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file in the target directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write_text(path, csv_text(header, rows))


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "tolist"):
        return _clean(obj.tolist())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path: str, obj) -> None:
    atomic_write_text(path, json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def sweep_svg(series: dict, title: str = "", width: int = 640, height: int = 420) -> str:
    """Mean vs regime parameter (log x axis) with ±stderr bars.
    series: label -> list of (regime, mean, stderr)."""
    ml, mr, mt, mb = 60, 120, 30, 50
    pw, ph = width - ml - mr, height - mt - mb
    xs = [x for pts in series.values() for x, _, _ in pts if x > 0]
    lo = math.log10(min(xs)) if xs else -1.0
    hi = math.log10(max(xs)) if xs else 1.0
    if hi - lo < 1e-9:
        lo, hi = lo - 1, hi + 1

    def X(x):
        return ml + pw * (math.log10(x) - lo) / (hi - lo)

    def Y(y):
        return mt + ph * (1.0 - min(max(y, 0.0), 1.0))

    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{ml}" y="18" font-size="13">{title}</text>',
           f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for t in (0.0, 0.5, 1.0):
        out.append(f'<text x="{ml - 30}" y="{Y(t) + 4:.1f}" font-size="11">{t:.1f}</text>')
    for k in range(math.floor(lo), math.ceil(hi) + 1):
        if lo - 1e-9 <= k <= hi + 1e-9:
            out.append(f'<text x="{X(10.0 ** k) - 12:.1f}" y="{mt + ph + 16}" font-size="11">1e{k}</text>')
    out.append(f'<text x="{ml + pw / 2 - 50:.1f}" y="{height - 10}" font-size="12">regime parameter</text>')
    for i, (label, pts) in enumerate(series.items()):
        c = colors[i % len(colors)]
        pts = sorted(p for p in pts if p[0] > 0)
        path = " ".join(f"{X(x):.1f},{Y(m):.1f}" for x, m, _ in pts)
        out.append(f'<polyline points="{path}" fill="none" stroke="{c}"/>')
        for x, m, s in pts:
            s = 0.0 if not math.isfinite(s) else s
            out.append(f'<line x1="{X(x):.1f}" y1="{Y(m - s):.1f}" x2="{X(x):.1f}" y2="{Y(m + s):.1f}" stroke="{c}"/>')
            out.append(f'<circle cx="{X(x):.1f}" cy="{Y(m):.1f}" r="3" fill="{c}"/>')
        out.append(f'<text x="{ml + pw + 10}" y="{mt + 16 * (i + 1)}" font-size="12" fill="{c}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path: str, series: dict, title: str = "") -> None:
    atomic_write_text(path, sweep_svg(series, title))
