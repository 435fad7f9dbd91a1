"""CSV emission with a one-line JSON provenance comment.

All floats are written with shortest round-trip formatting so reruns with the
same seed produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path


def fmt_cell(x):
    if isinstance(x, float):
        if x != x:  # NaN
            return ""
        return repr(x)
    if hasattr(x, "item"):  # numpy scalar
        return fmt_cell(x.item())
    return str(x)


def write_csv(path, header, rows, provenance: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if provenance is not None:
            fh.write("# " + json.dumps(provenance, sort_keys=True) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_cell(x) for x in row])


def read_csv(path):
    """Read a CSV written by write_csv; returns (provenance, header, rows)."""
    provenance = None
    with open(path, newline="") as fh:
        first = fh.readline()
        if first.startswith("# "):
            provenance = json.loads(first[2:])
        else:
            fh.seek(0)
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader]
    return provenance, header, rows
