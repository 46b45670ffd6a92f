"""Machine-readable run reports and manifests.

A report is one JSON document::

    {"format": "sessrec-report", "version": 1, "command": "...",
     "sections": {"<section>": {"<key>": <value>, ...}, ...}}

Values carry their JSON type (number, string, bool, null, list, object).
Keys are sorted and floats are written with ``repr`` precision, so equal
inputs give byte-identical files.  New sections or keys may be added in later
versions; existing ones keep their meaning.  See ``docs/formats.md``.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import __version__

REPORT_FORMAT = "sessrec-report"
REPORT_VERSION = 1


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


def render_report(command: str, sections: Mapping[str, Mapping]) -> str:
    doc = {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "command": command,
        "sections": _plain(dict(sections)),
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_report(path, command: str, sections: Mapping[str, Mapping]) -> Path:
    path = Path(path)
    path.write_text(render_report(command, sections), encoding="utf-8")
    return path


def read_report(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != REPORT_FORMAT:
        raise ValueError(f"{path} is not a {REPORT_FORMAT} document")
    return doc


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(
    out_dir,
    command: str,
    config: Mapping,
    inputs: Sequence = (),
    seed: Optional[int] = None,
    outputs: Sequence = (),
) -> Path:
    """Write ``manifest.json``; the only file that carries a wall-clock timestamp."""
    out_dir = Path(out_dir)
    doc = {
        "command": command,
        "config": _plain(dict(config)),
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": {Path(p).name: file_sha256(p) for p in outputs if Path(p).exists()},
        "output_dir": str(out_dir),
        "seed": seed,
        "tool_version": __version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def format_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    body = [[cell(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body)
    return "\n".join(lines)
