"""Dependency-free SVG figures: reliability diagrams and entropy densities."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .calibration import EntropyHistogram, ReliabilityBins

W, H, PAD = 360, 360, 40


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<text x="{W / 2}" y="{H - 6}" text-anchor="middle" font-size="11">{xlabel}</text>',
        f'<text x="12" y="{H / 2}" text-anchor="middle" font-size="11" transform="rotate(-90 12 {H / 2})">{ylabel}</text>',
        f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="black"/>',
    ]


def _x(u: float) -> float:
    return PAD + u * (W - 2 * PAD)


def _y(v: float) -> float:
    return H - PAD - v * (H - 2 * PAD)


def reliability_svg(bins: ReliabilityBins, path, title: str = "Reliability") -> None:
    out = _frame(title, "confidence", "accuracy")
    out.append(f'<line x1="{_x(0)}" y1="{_y(0)}" x2="{_x(1)}" y2="{_y(1)}" stroke="gray" stroke-dasharray="4 3"/>')
    for lo, hi, acc, occ in zip(bins.lower, bins.upper, bins.accuracy, bins.occupied):
        if not occ:
            continue
        out.append(
            f'<rect x="{_x(lo):.2f}" y="{_y(acc):.2f}" width="{_x(hi) - _x(lo):.2f}" '
            f'height="{_y(0) - _y(acc):.2f}" fill="steelblue" stroke="black" stroke-width="0.5"/>'
        )
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def entropy_density_svg(curves: dict[str, EntropyHistogram], path, title: str = "Predictive entropy") -> None:
    """Overlaid step curves, one per named histogram (all on the same edges)."""
    out = _frame(title, "entropy (nats)", "density")
    top = max(float(np.max(h.density)) for h in curves.values()) or 1.0
    colors = ["steelblue", "darkorange", "seagreen", "crimson"]
    xmax = max(float(h.edges[-1]) for h in curves.values()) or 1.0
    for i, (name, h) in enumerate(curves.items()):
        pts = []
        for lo, hi, d in zip(h.edges[:-1], h.edges[1:], h.density):
            pts += [(lo, d), (hi, d)]
        coords = " ".join(f"{_x(a / xmax):.2f},{_y(b / top):.2f}" for a, b in pts)
        color = colors[i % len(colors)]
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{W - PAD - 4}" y="{PAD + 14 + 14 * i}" text-anchor="end" font-size="11" fill="{color}">{name}</text>')
    out.append(f'<text x="{_x(1)}" y="{_y(0) + 12}" text-anchor="end" font-size="9">{xmax:.3g}</text>')
    out.append(f'<text x="{PAD - 2}" y="{_y(1) + 4}" text-anchor="end" font-size="9">{top:.3g}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")

