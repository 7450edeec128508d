"""Render router decisions per byte as self-contained HTML or ANSI terminal text.

Shade intensity follows the router weight (min-max normalised per record, 0.5
for a constant record); picked bytes get a bold border (HTML) or bold underline
(ANSI).
"""

from __future__ import annotations

import html
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# darkest shade at full weight
_GREEN = (0, 110, 40)
_ANSI_RESET = "\x1b[0m"


@dataclass
class VizRecord:
    text_bytes: bytes
    w: Sequence[float]
    m: Sequence[int]
    sigma: Sequence[float]

    def __post_init__(self):
        n = len(self.text_bytes)
        if not (len(self.w) == len(self.m) == len(self.sigma) == n):
            raise ValueError("text_bytes, w, m and sigma must have equal lengths")


def normalized_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    lo, hi = w.min(), w.max()
    if hi - lo <= 0:
        return np.full(w.shape, 0.5)
    return (w - lo) / (hi - lo)


def byte_labels(data: bytes) -> list[str]:
    """One label per byte: printable ASCII as is, a multi-byte codepoint on its lead byte,
    hex escapes for continuation bytes and everything else."""
    labels = []
    i = 0
    while i < len(data):
        b = data[i]
        if 0x21 <= b < 0x7F:
            labels.append(chr(b))
            i += 1
            continue
        if b == 0x20:
            labels.append("␣")  # open box for a space
            i += 1
            continue
        width = 2 if b >> 5 == 0b110 else 3 if b >> 4 == 0b1110 else 4 if b >> 3 == 0b11110 else 0
        if width and i + width <= len(data):
            try:
                ch = data[i : i + width].decode("utf-8")
            except UnicodeDecodeError:
                ch = None
            if ch is not None and ch.isprintable():
                labels.append(ch)
                labels.extend(f"\\x{c:02x}" for c in data[i + 1 : i + width])
                i += width
                continue
        labels.append(f"\\x{b:02x}")
        i += 1
    return labels


def _shade(t: float) -> tuple[int, int, int]:
    return tuple(round(255 + (c - 255) * t) for c in _GREEN)


def render_routing(record: VizRecord, format: str = "html") -> str:
    if len(record.text_bytes) == 0:
        raise ValueError("nothing to render: empty record")
    if format == "html":
        return render_html([record])
    if format == "ansi":
        return render_ansi(record)
    raise ValueError(f"unknown format {format!r}")


def _html_cells(record: VizRecord) -> str:
    t = normalized_weights(record.w)
    cells = []
    for label, ti, mi, w, s in zip(byte_labels(record.text_bytes), t, record.m, record.w, record.sigma):
        r, g, b = _shade(float(ti))
        fg = "#fff" if ti > 0.6 else "#000"
        border = "2px solid #000" if mi else "1px solid #ccc"
        cells.append(
            f'<span class="cell{" picked" if mi else ""}" title="w={w:.4f} sigma={s:.4f}" '
            f'style="background:rgb({r},{g},{b});color:{fg};border:{border}">{html.escape(label)}</span>'
        )
    return "".join(cells)


def render_html(records: Sequence[VizRecord], title: str = "Router decisions") -> str:
    """One self-contained page, one row per record."""
    if not records or any(len(r.text_bytes) == 0 for r in records):
        raise ValueError("nothing to render: empty record")
    rows = "\n".join(f'<div class="row">{_html_cells(r)}</div>' for r in records)
    return (
        "<!DOCTYPE html>\n"
        '<html lang="en">\n<head>\n<meta charset="utf-8">\n'
        f"<title>{html.escape(title)}</title>\n"
        "<style>\n"
        "body{font-family:monospace;margin:1em}\n"
        ".row{display:flex;flex-wrap:wrap;gap:1px;margin-bottom:1em}\n"
        ".cell{display:inline-block;min-width:1.1em;padding:2px 1px;text-align:center;box-sizing:border-box}\n"
        ".picked{font-weight:bold}\n"
        "</style>\n</head>\n<body>\n"
        f"<h1>{html.escape(title)}</h1>\n"
        f"{rows}\n"
        "</body>\n</html>\n"
    )


def render_ansi(record: VizRecord) -> str:
    t = normalized_weights(record.w)
    out = []
    for label, ti, mi in zip(byte_labels(record.text_bytes), t, record.m):
        r, g, b = _shade(float(ti))
        fg = "97" if ti > 0.6 else "30"
        style = f"\x1b[48;2;{r};{g};{b}m\x1b[{fg}m" + ("\x1b[1;4m" if mi else "")
        out.append(f"{style}{label}{_ANSI_RESET}")
    return "".join(out) + "\n"
