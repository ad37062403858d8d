"""Vector-graphic emission for gestural scores and gestures.

Everything is written as plain SVG text (no plotting dependency) so
outputs are byte-identical across runs: a score heatmap, per-gesture
trajectory panels drawn thin-to-thick over the kernel span, and
original-vs-resynthesis trace overlays.  The score heatmap is also dumped
as an exact CSV twin.
"""
from __future__ import annotations

import numpy as np

from .data import EMA_CHANNELS


def _fmt(x: float) -> str:
    return f"{x:.3f}".rstrip("0").rstrip(".")


class SvgCanvas:
    def __init__(self, width: float, height: float):
        self.width = width
        self.height = height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}" '
            f'height="{_fmt(height)}" viewBox="0 0 {_fmt(width)} {_fmt(height)}">'
        ]

    def rect(self, x, y, w, h, fill, opacity=None):
        op = f' fill-opacity="{_fmt(opacity)}"' if opacity is not None else ""
        self.parts.append(f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" '
                          f'height="{_fmt(h)}" fill="{fill}"{op}/>')

    def line(self, x1, y1, x2, y2, stroke, width=1.0, opacity=None):
        op = f' stroke-opacity="{_fmt(opacity)}"' if opacity is not None else ""
        self.parts.append(f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" '
                          f'y2="{_fmt(y2)}" stroke="{stroke}" '
                          f'stroke-width="{_fmt(width)}"{op}/>')

    def polyline(self, points, stroke, width=1.0):
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
        self.parts.append(f'<polyline points="{pts}" fill="none" '
                          f'stroke="{stroke}" stroke-width="{_fmt(width)}"/>')

    def text(self, x, y, content, size=10, anchor="start", fill="#333"):
        self.parts.append(f'<text x="{_fmt(x)}" y="{_fmt(y)}" '
                          f'font-size="{_fmt(size)}" text-anchor="{anchor}" '
                          f'fill="{fill}" font-family="sans-serif">{content}</text>')

    def save(self, path: str):
        with open(path, "w") as fh:
            fh.write("\n".join(self.parts + ["</svg>"]) + "\n")


def _heat_color(v: float) -> str:
    """0..1 -> white through blue to near-black."""
    v = min(max(v, 0.0), 1.0)
    r = int(round(255 * (1.0 - v)))
    g = int(round(255 * (1.0 - 0.85 * v)))
    b = int(round(255 * (1.0 - 0.30 * v)))
    return f"#{r:02x}{g:02x}{b:02x}"


def score_heatmap_csv(score: np.ndarray, path: str) -> None:
    """Exact dump: one row per gesture, full-precision columns per frame."""
    with open(path, "w") as fh:
        for row in np.asarray(score, dtype=np.float64):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def score_heatmap_svg(score: np.ndarray, rate: float, path: str,
                      alignments: list | None = None) -> None:
    """Gesture-by-time activation heatmap; x axis in seconds.

    ``alignments`` entries (label, start_s, end_s) draw red duration marks.
    """
    score = np.asarray(score, dtype=np.float64)
    n_gestures, n_frames = score.shape
    cell_w = max(1.0, min(4.0, 900.0 / n_frames))
    cell_h = 14.0
    left, top, bottom = 46.0, 8.0, 34.0
    width = left + n_frames * cell_w + 10
    height = top + n_gestures * cell_h + bottom
    svg = SvgCanvas(width, height)
    peak = score.max() if score.max() > 0 else 1.0
    for d in range(n_gestures):
        y = top + d * cell_h
        svg.text(left - 6, y + cell_h - 4, f"g{d}", size=9, anchor="end")
        for t in range(n_frames):
            v = score[d, t] / peak
            if v > 0:
                svg.rect(left + t * cell_w, y, cell_w, cell_h, _heat_color(v))
    axis_y = top + n_gestures * cell_h
    svg.line(left, axis_y, left + n_frames * cell_w, axis_y, "#333")
    seconds = n_frames / rate
    step = max(0.25, round(seconds / 8 * 4) / 4)
    tick = 0.0
    while tick <= seconds + 1e-9:
        x = left + tick * rate * cell_w
        svg.line(x, axis_y, x, axis_y + 4, "#333")
        svg.text(x, axis_y + 15, _fmt(tick), size=9, anchor="middle")
        tick += step
    svg.text(left + n_frames * cell_w / 2, axis_y + 28, "time (s)",
             size=10, anchor="middle")
    for label, start_s, end_s in alignments or []:
        x0 = left + start_s * rate * cell_w
        x1 = left + end_s * rate * cell_w
        svg.line(x0, top, x0, axis_y, "#d22", width=1.2, opacity=0.8)
        svg.line(x1, top, x1, axis_y, "#d22", width=1.2, opacity=0.8)
        svg.text((x0 + x1) / 2, top - 1, label, size=9, anchor="middle",
                 fill="#d22")
    svg.save(path)


def gesture_svg(kernel: np.ndarray, rate: float, path: str, title: str,
                channel_names: list[str] | None = None) -> None:
    """One gesture's articulator trajectories, thin-to-thick over its span."""
    kernel = np.asarray(kernel, dtype=np.float64)  # (T, C)
    span, channels = kernel.shape
    names = channel_names or (EMA_CHANNELS if channels == len(EMA_CHANNELS)
                              else [f"ch{i}" for i in range(channels)])
    row_h, left, top = 34.0, 52.0, 24.0
    plot_w = 360.0
    width = left + plot_w + 12
    height = top + channels * row_h + 30
    svg = SvgCanvas(width, height)
    svg.text(left, 14, title, size=11)
    limit = np.abs(kernel).max()
    limit = limit if limit > 0 else 1.0
    xs = np.linspace(0, plot_w, span)
    for c in range(channels):
        mid = top + c * row_h + row_h / 2
        svg.text(left - 6, mid + 3, names[c], size=9, anchor="end")
        svg.line(left, mid, left + plot_w, mid, "#ddd", width=0.6)
        ys = mid - kernel[:, c] / limit * (row_h * 0.45)
        for i in range(span - 1):
            thickness = 0.5 + 2.5 * i / max(span - 2, 1)
            svg.line(left + xs[i], ys[i], left + xs[i + 1], ys[i + 1],
                     "#1a6", width=thickness)
    axis_y = top + channels * row_h + 8
    svg.line(left, axis_y, left + plot_w, axis_y, "#333")
    svg.text(left, axis_y + 14, "0", size=9, anchor="middle")
    svg.text(left + plot_w, axis_y + 14, _fmt(span / rate), size=9, anchor="middle")
    svg.text(left + plot_w / 2, axis_y + 14, "time (s)", size=9, anchor="middle")
    svg.save(path)


def overlay_svg(original: np.ndarray, resynthesis: np.ndarray, rate: float,
                path: str, channel_names: list[str] | None = None) -> None:
    """Original (gray) and resynthesized (green) traces per channel."""
    original = np.asarray(original, dtype=np.float64)
    resynthesis = np.asarray(resynthesis, dtype=np.float64)
    channels, n_frames = original.shape
    names = channel_names or (EMA_CHANNELS if channels == len(EMA_CHANNELS)
                              else [f"ch{i}" for i in range(channels)])
    row_h, left, top = 30.0, 52.0, 10.0
    plot_w = max(480.0, min(1000.0, n_frames * 1.2))
    width = left + plot_w + 12
    height = top + channels * row_h + 34
    svg = SvgCanvas(width, height)
    xs = np.linspace(0, plot_w, n_frames)
    for c in range(channels):
        mid = top + c * row_h + row_h / 2
        both = np.concatenate([original[c], resynthesis[c]])
        limit = np.abs(both - both.mean()).max()
        limit = limit if limit > 0 else 1.0
        center = both.mean()
        svg.text(left - 6, mid + 3, names[c], size=9, anchor="end")
        for series, color, w in ((original[c], "#888", 1.3),
                                 (resynthesis[c], "#1a6", 0.9)):
            ys = mid - (series - center) / limit * (row_h * 0.42)
            svg.polyline(list(zip(left + xs, ys)), color, width=w)
    axis_y = top + channels * row_h + 6
    svg.line(left, axis_y, left + plot_w, axis_y, "#333")
    svg.text(left, axis_y + 14, "0", size=9, anchor="middle")
    svg.text(left + plot_w, axis_y + 14, _fmt(n_frames / rate), size=9,
             anchor="middle")
    svg.text(left + plot_w / 2, axis_y + 24,
             "time (s); gray original, green resynthesis", size=9, anchor="middle")
    svg.save(path)


def top_gestures(score: np.ndarray, k: int) -> list[int]:
    """Gesture indices ranked by total activation mass, strongest first."""
    mass = np.asarray(score).sum(axis=1)
    order = np.argsort(-mass, kind="stable")
    return [int(i) for i in order[:k] if mass[i] > 0] or [int(order[0])]


def load_alignments(path: str) -> list:
    """Lines of `label start_seconds end_seconds`."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'label start end'")
            out.append((parts[0], float(parts[1]), float(parts[2])))
    return out
