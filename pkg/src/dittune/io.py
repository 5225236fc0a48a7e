"""File helpers: binary PPM images, CSV rows, JSON and a bare-bones SVG line chart."""
from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
import torch


def to_uint8(img) -> np.ndarray:
    """``[3, H, W]`` image in ``[-1, 1]`` to ``[H, W, 3]`` uint8."""
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    img = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint((img + 1) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path, img) -> Path:
    arr = to_uint8(img)
    h, w, _ = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + arr.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=m.end()).reshape(h, w, 3)


def image_grid(images: torch.Tensor, ncol: int | None = None, pad: int = 1) -> torch.Tensor:
    """Tile ``[N, 3, H, W]`` into one ``[3, H', W']`` image with a dark border."""
    n, c, h, w = images.shape
    ncol = ncol or math.ceil(math.sqrt(n))
    nrow = math.ceil(n / ncol)
    grid = torch.full((c, nrow * (h + pad) + pad, ncol * (w + pad) + pad), -1.0)
    for i in range(n):
        r, k = divmod(i, ncol)
        grid[:, pad + r * (h + pad):pad + r * (h + pad) + h, pad + k * (w + pad):pad + k * (w + pad) + w] = images[i]
    return grid


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_csv(path, rows: list[dict], fieldnames: list[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with path.open("w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        wr.writeheader()
        for row in rows:
            wr.writerow({k: _fmt(v) for k, v in row.items()})
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_svg_lines(path, series: dict[str, list[tuple[float, float]]], *, title: str = "",
                    xlabel: str = "", ylabel: str = "", width: int = 480, height: int = 320) -> Path:
    """One polyline per series, linear axes, min/max tick labels only."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    pts = [p for s in series.values() for p in s]
    left, right, top, bottom = 60, 20, 30, 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           '<rect width="100%" height="100%" fill="white"/>']
    if pts:
        xs, ys = [p[0] for p in pts], [p[1] for p in pts]
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        x1 = x1 if x1 > x0 else x0 + 1
        y1 = y1 if y1 > y0 else y0 + 1

        def sx(x):
            return left + (x - x0) / (x1 - x0) * (width - left - right)

        def sy(y):
            return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom)

        out.append(f'<line x1="{left}" y1="{height - bottom}" x2="{width - right}" y2="{height - bottom}" stroke="black"/>')
        out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" stroke="black"/>')
        for txt, x, y, anchor in ((f"{x0:g}", left, height - bottom + 15, "start"),
                                  (f"{x1:g}", width - right, height - bottom + 15, "end"),
                                  (f"{y0:.3g}", left - 5, height - bottom, "end"),
                                  (f"{y1:.3g}", left - 5, top + 10, "end")):
            out.append(f'<text x="{x}" y="{y}" font-size="11" text-anchor="{anchor}">{escape(txt)}</text>')
        for k, (name, s) in enumerate(series.items()):
            c = colors[k % len(colors)]
            poly = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
            out.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{poly}"/>')
            out.append(f'<text x="{width - right - 5}" y="{top + 14 * (k + 1)}" font-size="11" '
                       f'text-anchor="end" fill="{c}">{escape(name)}</text>')
    out.append(f'<text x="{width / 2}" y="18" font-size="13" text-anchor="middle">{escape(title)}</text>')
    out.append(f'<text x="{width / 2}" y="{height - 8}" font-size="11" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{height / 2}" font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 14 {height / 2})">{escape(ylabel)}</text>')
    out.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n")
    return path
