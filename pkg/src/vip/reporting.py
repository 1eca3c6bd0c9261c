"""Report serialization (JSON, CSV) and SVG rendering."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .errors import InvalidArgumentError, ReportIOError

SCHEMA_VERSION = 1
SIG_DIGITS = 9

# Viridis anchor colors; interpolated linearly in RGB. Lightness rises monotonically.
COLORMAP = ((0x44, 0x01, 0x54), (0x3B, 0x52, 0x8B), (0x21, 0x91, 0x8C), (0x5E, 0xC9, 0x62), (0xFD, 0xE7, 0x25))


def round_sig(x: float) -> float:
    return float(f"{x:.{SIG_DIGITS}g}")


def _clean(value):
    if isinstance(value, (float, np.floating)):
        return round_sig(float(value))
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    return value


def summarize(values: Sequence[float]) -> dict[str, float | int]:
    """Summary statistics, kept at full float precision so they recompute exactly."""
    vals = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return {"count": 0}
    q1, med, q3 = np.percentile(vals, [25, 50, 75])
    return {
        "count": int(vals.size),
        "mean": float(vals.mean()),
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
        "min": float(vals.min()),
        "max": float(vals.max()),
    }


def aggregate(records: Sequence[dict]) -> dict[str, Any]:
    """Statistics per numeric field; list-valued fields are summarized per index."""
    out: dict[str, Any] = {}
    if not records:
        return out
    for name in records[0]:
        if name == "image":
            continue
        column = [r.get(name) for r in records]
        sample = next((v for v in column if v is not None), None)
        if isinstance(sample, bool) or not isinstance(sample, (int, float, list)):
            continue
        if isinstance(sample, list):
            width = max(len(v) for v in column if v is not None)
            per_index = [summarize([v[i] if v is not None and i < len(v) else None for v in column]) for i in range(width)]
            out[name] = {k: [s.get(k) for s in per_index] for k in per_index[0]}
        else:
            out[name] = summarize(column)
    return out


@dataclass
class AnalysisReport:
    command: str
    model_config_hash: str
    preprocessing: dict
    run_config: dict = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)
    results: dict = field(default_factory=dict)
    denominator: str | None = None
    toolkit_version: str = __version__
    schema_version: int = SCHEMA_VERSION
    aggregates: dict = field(default_factory=dict)

    def finalize(self) -> "AnalysisReport":
        """Round values to the serialized precision and recompute aggregates from them."""
        for r in self.records:
            if "image" not in r:
                raise InvalidArgumentError("every record needs an 'image' content hash")
        self.records = [_clean(r) for r in self.records]
        self.results = _clean(self.results)
        # Aggregates are derived from the rounded records and not rounded again.
        self.aggregates = aggregate(self.records)
        return self

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "toolkit_version": self.toolkit_version,
            "command": self.command,
            "model_config_hash": self.model_config_hash,
            "preprocessing": self.preprocessing,
            "run_config": self.run_config,
            "denominator": self.denominator,
            "records": self.records,
            "aggregates": self.aggregates,
            "results": self.results,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisReport":
        return cls(
            command=d["command"],
            model_config_hash=d["model_config_hash"],
            preprocessing=d["preprocessing"],
            run_config=d.get("run_config", {}),
            records=d.get("records", []),
            results=d.get("results", {}),
            denominator=d.get("denominator"),
            toolkit_version=d.get("toolkit_version", __version__),
            schema_version=d.get("schema_version", SCHEMA_VERSION),
            aggregates=d.get("aggregates", {}),
        )


def _csv_text(report: AnalysisReport) -> str:
    rows = []
    columns: list[str] = []
    for r in report.records:
        flat = {}
        for k, v in r.items():
            if isinstance(v, list):
                for i, item in enumerate(v):
                    flat[f"{k}_{i}"] = item
            else:
                flat[k] = v
        for k in flat:
            if k not in columns:
                columns.append(k)
        rows.append(flat)
    if "image" in columns:
        columns.remove("image")
    columns.insert(0, "image")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for flat in rows:
        writer.writerow([_csv_cell(flat.get(c)) for c in columns])
    return buf.getvalue()


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.{SIG_DIGITS}g}"
    return str(v)


def _write_text(out: Path, text: str) -> Path:
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=out.parent, prefix=".tmp-")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, out)
    except OSError as exc:
        raise ReportIOError(f"cannot write {out}: {exc}") from None
    return out


def emit_report(report: AnalysisReport, format: str = "json", out=None) -> Path:
    if format not in ("json", "csv"):
        raise InvalidArgumentError(f"format must be json or csv, got {format!r}")
    report.finalize()
    out = Path(out if out is not None else f"{report.command}.{format}")
    if format == "json":
        text = json.dumps(report.to_dict(), indent=2, allow_nan=False) + "\n"
    else:
        text = _csv_text(report)
    return _write_text(out, text)


def load_report(path) -> AnalysisReport:
    with open(path, encoding="utf-8") as f:
        return AnalysisReport.from_dict(json.load(f))


def colormap(t: float) -> str:
    t = min(max(float(t), 0.0), 1.0)
    pos = t * (len(COLORMAP) - 1)
    i = min(int(pos), len(COLORMAP) - 2)
    f = pos - i
    rgb = [round(a + (b - a) * f) for a, b in zip(COLORMAP[i], COLORMAP[i + 1])]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def attention_map_svg(attention, cell: int = 16) -> str:
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim != 2 or 0 in a.shape:
        raise InvalidArgumentError(f"attention map must be a non-empty 2-D grid, got shape {list(a.shape)}")
    if not np.all(np.isfinite(a)) or (a < 0).any():
        raise InvalidArgumentError("attention map must be finite and nonnegative")
    lo, hi = a.min(), a.max()
    span = hi - lo
    p1, p2 = a.shape
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{p2 * cell}" height="{p1 * cell}" '
        f'viewBox="0 0 {p2 * cell} {p1 * cell}" shape-rendering="crispEdges">'
    ]
    for r in range(p1):
        for c in range(p2):
            t = (a[r, c] - lo) / span if span > 0 else 0.0
            lines.append(
                f'<rect class="cell" x="{c * cell}" y="{r * cell}" width="{cell}" height="{cell}" '
                f'fill="{colormap(t)}"><title>{a[r, c]:.6g}</title></rect>'
            )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def render_attention_map(attention, out, cell: int = 16) -> Path:
    """Write a grid of colored cells; colors span the map's own [min, max]."""
    return _write_text(Path(out), attention_map_svg(attention, cell))


def render_curves(curves: dict[str, Sequence[float | None]], out, width: int = 480, height: int = 240) -> Path:
    """Line chart of one or more per-layer curves on a shared [-1, 1] axis."""
    pad = 30
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">']
    lines.append(f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" stroke="#888"/>')
    for k, (name, ys) in enumerate(curves.items()):
        n = len(ys)
        pts = []
        for i, y in enumerate(ys):
            if y is None:
                continue
            x = pad + (width - 2 * pad) * (i / (n - 1) if n > 1 else 1.0)
            yy = pad + (height - 2 * pad) * (1.0 - (float(y) + 1.0) / 2.0)
            pts.append(f"{x:.2f},{yy:.2f}")
        color = colormap(k / max(len(curves) - 1, 1))
        lines.append(f'<polyline class="curve" fill="none" stroke="{color}" points="{" ".join(pts)}"><title>{name}</title></polyline>')
    lines.append("</svg>")
    return _write_text(Path(out), "\n".join(lines) + "\n")
