"""Hand-emitted SVG plot of the three fill-in accuracy curves.

No plotting library: the chart is assembled from string templates so the
output is byte-deterministic and diffable in tests.  X is log-scaled epoch,
Y is accuracy in [0, 1]; absent cells simply leave a gap in their series.
"""

import math

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 52, 20, 24, 44

SERIES_STYLE = {
    1: ("type i", "#d62728", "6 3"),
    2: ("type ii", "#1f77b4", "none"),
    3: ("type iii", "#2ca02c", "2 3"),
}


def _x_of(epoch, lo, hi):
    span = WIDTH - MARGIN_L - MARGIN_R
    if hi == lo:
        return MARGIN_L + span / 2
    frac = (math.log2(epoch) - math.log2(lo)) / (math.log2(hi) - math.log2(lo))
    return MARGIN_L + frac * span


def _y_of(acc):
    span = HEIGHT - MARGIN_T - MARGIN_B
    return MARGIN_T + (1.0 - acc) * span


def _fmt(v):
    return f"{v:.2f}"


def render_curves_svg(curve, note=""):
    """SVG text for a mean curve: list of (epoch, {qtype: acc|None}).

    ``note`` (e.g. seed and fingerprint) lands in the <desc> element.
    """
    if not curve:
        raise ValueError("cannot plot an empty curve")
    epochs = [e for e, _ in curve]
    lo, hi = min(epochs), max(epochs)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f"<desc>{note}</desc>" if note else "<desc>accuracy curves</desc>",
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]

    # horizontal grid plus y tick labels
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = _fmt(_y_of(tick))
        parts.append(
            f'<line x1="{MARGIN_L}" y1="{y}" x2="{WIDTH - MARGIN_R}" y2="{y}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{MARGIN_L - 8}" y="{y}" font-size="11" '
            f'text-anchor="end" dominant-baseline="middle" '
            f'font-family="sans-serif">{tick:g}</text>'
        )

    # x ticks at powers of four within range, always including the ends
    ticks = sorted({lo, hi} | {4 ** k for k in range(0, 7)
                               if lo <= 4 ** k <= hi})
    for tick in ticks:
        x = _fmt(_x_of(tick, lo, hi))
        parts.append(
            f'<line x1="{x}" y1="{MARGIN_T}" x2="{x}" '
            f'y2="{HEIGHT - MARGIN_B}" stroke="#eeeeee" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{x}" y="{HEIGHT - MARGIN_B + 16}" font-size="11" '
            f'text-anchor="middle" font-family="sans-serif">{tick}</text>'
        )

    # axes
    parts.append(
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" '
        f'width="{WIDTH - MARGIN_L - MARGIN_R}" '
        f'height="{HEIGHT - MARGIN_T - MARGIN_B}" fill="none" '
        f'stroke="#333333" stroke-width="1"/>'
    )
    parts.append(
        f'<text x="{(MARGIN_L + WIDTH - MARGIN_R) / 2:.2f}" '
        f'y="{HEIGHT - 8}" font-size="12" text-anchor="middle" '
        f'font-family="sans-serif">epoch (log scale)</text>'
    )
    parts.append(
        f'<text x="14" y="{(MARGIN_T + HEIGHT - MARGIN_B) / 2:.2f}" '
        f'font-size="12" text-anchor="middle" font-family="sans-serif" '
        f'transform="rotate(-90 14 {(MARGIN_T + HEIGHT - MARGIN_B) / 2:.2f})"'
        f'>accuracy</text>'
    )

    # the three series
    for q, (label, color, dash) in SERIES_STYLE.items():
        points = [(e, accs[q]) for e, accs in curve if accs.get(q) is not None]
        if points:
            coords = " ".join(
                f"{_fmt(_x_of(e, lo, hi))},{_fmt(_y_of(a))}" for e, a in points
            )
            dash_attr = "" if dash == "none" else f' stroke-dasharray="{dash}"'
            parts.append(
                f'<polyline points="{coords}" fill="none" stroke="{color}" '
                f'stroke-width="2"{dash_attr}/>'
            )
            for e, a in points:
                parts.append(
                    f'<circle cx="{_fmt(_x_of(e, lo, hi))}" '
                    f'cy="{_fmt(_y_of(a))}" r="2.5" fill="{color}"/>'
                )

    # legend, top-right inside the frame
    lx = WIDTH - MARGIN_R - 120
    for row, (q, (label, color, dash)) in enumerate(SERIES_STYLE.items()):
        ly = MARGIN_T + 14 + 18 * row
        dash_attr = "" if dash == "none" else f' stroke-dasharray="{dash}"'
        parts.append(
            f'<line x1="{lx}" y1="{ly}" x2="{lx + 28}" y2="{ly}" '
            f'stroke="{color}" stroke-width="2"{dash_attr}/>'
        )
        parts.append(
            f'<text x="{lx + 34}" y="{ly}" font-size="12" '
            f'dominant-baseline="middle" font-family="sans-serif">'
            f'{label}</text>'
        )

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_curves_svg(path, curve, note=""):
    with open(path, "w") as fh:
        fh.write(render_curves_svg(curve, note))


def curve_from_mean_points(points):
    """Adapt experiment MeanPoint rows to the (epoch, accs) pairs used
    here."""
    return [(p.epoch, dict(p.accuracies)) for p in points]
