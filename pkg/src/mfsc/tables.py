"""CSV output with floats written to 17 significant digits (exact round trip)."""

from __future__ import annotations

import csv
from typing import Iterable


def fmt(value) -> str:
    if isinstance(value, (bool, int)) and not isinstance(value, float):
        return str(value)
    try:
        return format(float(value), ".17g")
    except (TypeError, ValueError):
        return str(value)


def write_csv(path, header: list[str], rows: Iterable) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for row in rows:
            out.writerow([fmt(v) for v in row])
