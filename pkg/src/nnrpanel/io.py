"""Panel CSV ingestion and result-record serialization.

Panels use a long layout ``i,t,y,x1,...,xp`` with 0-based indices. A cell is
missing when its row is absent or when ``y`` is the sentinel ``NA``. Result
records are JSON objects tagged with a ``kind`` so they can be read back into
the dataclass that wrote them.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import json
from pathlib import Path

import numpy as np

from .errors import PanelFormatError, ValidationError
from .panel import PanelData

MISSING = "NA"

_RECORDS: dict[str, type] = {}


def register_record(kind):
    def deco(cls):
        _RECORDS[kind] = cls
        cls.record_kind = kind
        return cls

    return deco


def read_panel_csv(path) -> PanelData:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelFormatError("empty file", line=1) from None
        header = [h.strip() for h in header]
        if header[:3] != ["i", "t", "y"]:
            raise PanelFormatError("header must start with i,t,y", line=1)
        p = len(header) - 3
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != p + 3:
                raise PanelFormatError(
                    f"row {lineno - 2} has {len(row)} fields, expected {p + 3}", line=lineno
                )
            try:
                i = int(row[0])
            except ValueError:
                raise PanelFormatError(f"bad unit index {row[0]!r}", line=lineno, column=1) from None
            try:
                t = int(row[1])
            except ValueError:
                raise PanelFormatError(f"bad time index {row[1]!r}", line=lineno, column=2) from None
            if i < 0 or t < 0:
                raise PanelFormatError("negative index", line=lineno)
            vals = []
            for col, cell in enumerate(row[2:], start=3):
                cell = cell.strip()
                if cell == MISSING:
                    vals.append(np.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise PanelFormatError(f"cannot parse {cell!r}", line=lineno, column=col) from None
            rows.append((lineno, i, t, vals))
    if not rows:
        raise PanelFormatError("no data rows", line=2)
    N = max(r[1] for r in rows) + 1
    T = max(r[2] for r in rows) + 1
    Y = np.full((N, T), np.nan)
    X = np.zeros((p, N, T))
    mask = np.zeros((N, T), dtype=bool)
    seen = np.zeros((N, T), dtype=bool)
    for lineno, i, t, vals in rows:
        if seen[i, t]:
            raise PanelFormatError(f"duplicate cell ({i},{t})", line=lineno)
        seen[i, t] = True
        y = vals[0]
        if np.isnan(y):
            continue
        xs = vals[1:]
        if any(np.isnan(x) for x in xs):
            raise PanelFormatError(f"missing covariate in observed cell ({i},{t})", line=lineno)
        Y[i, t] = y
        X[:, i, t] = xs
        mask[i, t] = True
    return PanelData(Y, X, mask)


def write_panel_csv(path, panel: PanelData):
    """Write every cell; unobserved cells get the ``NA`` sentinel."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "t", "y"] + [f"x{j + 1}" for j in range(panel.p)])
        for i in range(panel.N):
            for t in range(panel.T):
                if panel.mask[i, t]:
                    w.writerow([i, t, repr(float(panel.Y[i, t]))] + [repr(float(v)) for v in panel.X[:, i, t]])
                else:
                    w.writerow([i, t, MISSING] + [MISSING] * panel.p)


def _encode(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        out = {}
        kind = getattr(type(obj), "record_kind", None)
        if kind is not None:
            out["kind"] = kind
        for f in dataclasses.fields(obj):
            if f.metadata.get("serialize", True):
                out[f.name] = _encode(getattr(obj, f.name))
        return out
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    return obj


def record_to_dict(record) -> dict:
    return _encode(record)


def record_from_dict(data: dict):
    kind = data.get("kind")
    if kind not in _RECORDS:
        raise ValidationError(f"unknown record kind {kind!r}")
    return _RECORDS[kind].from_dict(data)


def write_results(path, record):
    text = json.dumps(record_to_dict(record), indent=1, sort_keys=True)
    Path(path).write_text(text + "\n")


def read_results(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PanelFormatError(f"invalid result file: {exc.msg}", line=exc.lineno, column=exc.colno) from None
    return record_from_dict(data)
