"""On-disk artifacts: atomic writes, heatmap CSV/SVG, JSON reports."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError

CLIP_PERCENT = 2.0
NEUTRAL_RGB = (247, 247, 247)
GAIN_RGB = (26, 152, 80)
LOSS_RGB = (215, 48, 39)


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def ensure_writable_dir(path: Path) -> Path:
    """Create ``path`` if needed and prove it accepts files; raises OSError otherwise."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    fd, probe = tempfile.mkstemp(dir=path, prefix=".probe.")
    os.close(fd)
    os.unlink(probe)
    return path


# ---------------------------------------------------------------------------
# JSON with explicit infinities
# ---------------------------------------------------------------------------

def _encode_value(x):
    if isinstance(x, dict):
        return {str(k): _encode_value(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_encode_value(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        if math.isnan(x):
            return "nan"
        return x
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.ndarray):
        return _encode_value(x.tolist())
    return x


def _decode_value(x):
    if isinstance(x, dict):
        return {k: _decode_value(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_decode_value(v) for v in x]
    if x in ("inf", "-inf", "nan"):
        return float(x)
    return x


def dumps_report(obj) -> str:
    """JSON text; infinities are written as the strings ``"inf"``/``"-inf"``."""
    return json.dumps(_encode_value(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def loads_report(text: str):
    return _decode_value(json.loads(text))


# ---------------------------------------------------------------------------
# heatmap CSV
# ---------------------------------------------------------------------------

def format_heatmap_csv(languages: Sequence[str], values: np.ndarray, rows: Sequence[str] | None = None) -> str:
    """First row: blank corner then evaluation languages; first column: continuation language."""
    rows = list(languages) if rows is None else list(rows)
    values = np.asarray(values, dtype=np.float64)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(languages))
    for lang, row in zip(rows, values):
        w.writerow([lang] + [f"{v:.4f}" for v in row])
    return buf.getvalue()


def parse_heatmap_csv(text: str) -> tuple[list[str], list[str], np.ndarray]:
    """Returns (row languages, column languages, values)."""
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows or rows[0][0] != "":
        raise InputError("heatmap CSV must start with a blank corner cell")
    cols = rows[0][1:]
    labels = [r[0] for r in rows[1:]]
    vals = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=np.float64).reshape(len(labels), len(cols))
    return labels, cols, vals


# ---------------------------------------------------------------------------
# heatmap SVG
# ---------------------------------------------------------------------------

def heatmap_color(value: float, clip: float = CLIP_PERCENT) -> str:
    """Diverging scale: red for losses, green for gains, saturated at +-clip."""
    t = max(-1.0, min(1.0, value / clip))
    target = GAIN_RGB if t > 0 else LOSS_RGB
    a = abs(t)
    rgb = tuple(round(n + (c - n) * a) for n, c in zip(NEUTRAL_RGB, target))
    return "#%02x%02x%02x" % rgb


def render_heatmap_svg(languages: Sequence[str], values: np.ndarray, title: str = "",
                       rows: Sequence[str] | None = None, cell: int = 44, clip: float = CLIP_PERCENT) -> str:
    rows = list(languages) if rows is None else list(rows)
    values = np.asarray(values, dtype=np.float64)
    left, top = 60, 50 if title else 30
    width = left + cell * len(languages) + 20
    height = top + cell * len(rows) + 20
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">']
    if title:
        out.append(f'<text x="{left}" y="18" font-size="13">{_escape(title)}</text>')
    for j, lang in enumerate(languages):
        out.append(f'<text x="{left + j * cell + cell / 2}" y="{top - 8}" text-anchor="middle">{_escape(lang)}</text>')
    for i, lang in enumerate(rows):
        y = top + i * cell
        out.append(f'<text x="{left - 8}" y="{y + cell / 2 + 4}" text-anchor="end">{_escape(lang)}</text>')
        for j in range(len(languages)):
            v = float(values[i, j])
            x = left + j * cell
            out.append(f'<rect class="cell" data-row="{_escape(lang)}" data-col="{_escape(languages[j])}" '
                       f'data-value="{v:.4f}" x="{x}" y="{y}" width="{cell}" height="{cell}" '
                       f'fill="{heatmap_color(v, clip)}" stroke="#ffffff"/>')
            out.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle">{v:.2f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")
