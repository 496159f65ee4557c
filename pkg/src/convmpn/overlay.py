"""SVG overlays: the input image underneath, GT and predicted graphs on top."""
from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image

from .geometry import PlanarGraph
from .synth import to_uint8

GT_COLOR = "#2e7d32"
PRED_COLOR = "#e53935"


def _png_b64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image).transpose(1, 2, 0), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _graph(graph: PlanarGraph, color: str, scale: float, width: float, dash: str = "") -> list[str]:
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    out = [f'<g stroke="{color}" stroke-width="{width:g}" fill="{color}"{extra}>']
    for i, j in graph.edges:
        a, b = graph.corners[i], graph.corners[j]
        out.append(f'<line x1="{a.x * scale:.2f}" y1="{a.y * scale:.2f}" '
                   f'x2="{b.x * scale:.2f}" y2="{b.y * scale:.2f}"/>')
    for c in graph.corners:
        out.append(f'<circle cx="{c.x * scale:.2f}" cy="{c.y * scale:.2f}" r="{2 * width:g}"/>')
    out.append("</g>")
    return out


def render_svg(image: np.ndarray, pred: PlanarGraph, gt: PlanarGraph | None = None, scale: float = 8.0) -> str:
    size = image.shape[-1] * scale
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:g}" height="{size:g}" '
        f'viewBox="0 0 {size:g} {size:g}">',
        f'<image x="0" y="0" width="{size:g}" height="{size:g}" style="image-rendering:pixelated" '
        f'href="data:image/png;base64,{_png_b64(image)}"/>',
    ]
    if gt is not None:
        lines += _graph(gt, GT_COLOR, scale, 3.0, dash="6 4")
    lines += _graph(pred, PRED_COLOR, scale, 2.0)
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
