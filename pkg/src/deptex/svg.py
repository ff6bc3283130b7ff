"""Plain-text SVG plots. Output depends only on the inputs, so reruns are byte-identical."""
from html import escape

import numpy as np

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def _color(k):
    if k < len(PALETTE):
        return PALETTE[k]
    hue = (k * 0.618033988749895) % 1.0
    r, g, b = (int(255 * (0.5 + 0.4 * np.cos(2 * np.pi * (hue + s)))) for s in (0.0, 1 / 3, 2 / 3))
    return f"#{r:02x}{g:02x}{b:02x}"


def _f(v):
    return f"{v:.2f}"


def scatter(coords, labels, class_names, test_mask=None, size=640, margin=40, title=""):
    """Class-coloured scatter. Test points are drawn as framed squares on top of train dots."""
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels)
    test_mask = np.zeros(len(coords), bool) if test_mask is None else np.asarray(test_mask, bool)
    lo = coords.min(axis=0) if len(coords) else np.zeros(2)
    hi = coords.max(axis=0) if len(coords) else np.ones(2)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    inner = size - 2 * margin
    px = margin + (coords - lo) / span * inner
    px[:, 1] = size - px[:, 1]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20 * len(class_names)}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{margin}" y="{margin // 2}" font-size="14">{escape(title)}</text>')
    for i in np.flatnonzero(~test_mask):
        out.append(f'<circle cx="{_f(px[i, 0])}" cy="{_f(px[i, 1])}" r="2.5" fill="{_color(int(labels[i]))}"/>')
    for i in np.flatnonzero(test_mask):
        x, y = px[i, 0] - 4, px[i, 1] - 4
        out.append(
            f'<rect x="{_f(x)}" y="{_f(y)}" width="8" height="8" fill="{_color(int(labels[i]))}" stroke="black" stroke-width="1.5"/>'
        )
    for k, name in enumerate(class_names):
        y = size + 20 * k + 5
        out.append(f'<rect x="{margin}" y="{y}" width="12" height="12" fill="{_color(k)}"/>')
        out.append(f'<text x="{margin + 18}" y="{y + 11}" font-size="12">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap(matrix, class_names, cell=40, title=""):
    """Row-normalized confusion heatmap with class labels on both axes."""
    m = np.asarray(matrix, dtype=np.float64)
    rows = m.sum(axis=1, keepdims=True)
    frac = np.divide(m, rows, out=np.zeros_like(m), where=rows > 0)
    n = len(class_names)
    left = 12 + 7 * max((len(str(c)) for c in class_names), default=0)
    top = 30 + left
    w, h = left + cell * n + 10, top + cell * n + 10
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="10" y="18" font-size="14">{escape(title)}</text>')
    for i, name in enumerate(class_names):
        label = escape(str(name))
        yc = top + cell * i + cell / 2 + 4
        out.append(f'<text x="{left - 6}" y="{_f(yc)}" font-size="11" text-anchor="end">{label}</text>')
        xc = left + cell * i + cell / 2 + 4
        out.append(f'<text x="{_f(xc)}" y="{top - 6}" font-size="11" transform="rotate(-90 {_f(xc)} {top - 6})">{label}</text>')
    for i in range(n):
        for j in range(n):
            shade = int(round(255 * (1.0 - frac[i, j])))
            out.append(
                f'<rect x="{left + cell * j}" y="{top + cell * i}" width="{cell}" height="{cell}" '
                f'fill="rgb({shade},{shade},255)" stroke="#cccccc"/>'
            )
            color = "white" if frac[i, j] > 0.5 else "black"
            out.append(
                f'<text x="{_f(left + cell * j + cell / 2)}" y="{_f(top + cell * i + cell / 2 + 4)}" '
                f'font-size="10" text-anchor="middle" fill="{color}">{int(m[i, j])}</text>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"
