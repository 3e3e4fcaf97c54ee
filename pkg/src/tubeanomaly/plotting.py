"""Dependency-free SVG rendering of ROC curves."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

from .evaluation import RocCurve

__all__ = ["roc_svg"]

_COLORS = ("#1f77b4", "#17becf", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_DASHES = ("6,4", "", "", "", "", "", "")


def roc_svg(curves: Sequence[tuple[str, RocCurve]], size: int = 360) -> str:
    """One polyline per curve, a chance diagonal and a legend with AUCs.

    Output depends only on the inputs, so identical curves give identical
    bytes.
    """
    if not curves:
        raise ValueError("need at least one ROC curve")
    pad = 40
    inner = size - 2 * pad

    def xy(fpr: float, tpr: float) -> str:
        return f"{pad + fpr * inner:.3f},{pad + (1.0 - tpr) * inner:.3f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="#000"/>',
        f'<line x1="{pad}" y1="{pad + inner}" x2="{pad + inner}" y2="{pad}" '
        'stroke="#999" stroke-dasharray="2,3"/>',
        f'<text x="{size / 2:.1f}" y="{size - 8}" text-anchor="middle" font-size="12">False positive rate</text>',
        f'<text x="12" y="{size / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2:.1f})">True positive rate</text>',
    ]
    for i, (label, roc) in enumerate(curves):
        color = _COLORS[i % len(_COLORS)]
        dash = _DASHES[i % len(_DASHES)]
        pts = " ".join(xy(f, t) for f, t in roc.points)
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="2"{dash_attr} points="{pts}"/>'
        )
        ly = pad + inner - 12 - 16 * (len(curves) - 1 - i)
        parts.append(
            f'<line x1="{pad + inner - 150}" y1="{ly - 4}" x2="{pad + inner - 130}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"{dash_attr}/>'
        )
        parts.append(
            f'<text x="{pad + inner - 125}" y="{ly}" font-size="11">'
            f"{escape(label)} (AUC {100.0 * roc.auc:.2f}%)</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
