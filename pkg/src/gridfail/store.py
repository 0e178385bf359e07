"""File formats: line-delimited episode logs, CSV/JSON-lines tables, versioned JSON documents.

Every writer is deterministic: fixed key order, floats as the shortest
decimal that round-trips (``repr``), ``\\n`` line endings.
"""
from __future__ import annotations

import contextlib
import csv
import io
import json
import math
import os
from enum import Enum
from pathlib import Path

import numpy as np

from .episode import (
    OBS_FIELDS,
    Episode,
    ErrorType,
    GridSchema,
    Outcome,
    TerminationInfo,
    Trajectory,
    parse_error_type,
    validate_episode,
)

EPISODE_FORMAT = "gridfail-epis/1"


class StoreError(ValueError):
    pass


class ParseError(StoreError):
    """Malformed input; names the 1-based line number and, when known, the field."""

    def __init__(self, line: int | None, message: str, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class TableFormat(str, Enum):
    CSV = "CSV"
    LINES = "LINES"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return None


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=True)


@contextlib.contextmanager
def _open_write(destination):
    if isinstance(destination, (str, os.PathLike)):
        path = Path(destination)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh
    else:
        yield destination


@contextlib.contextmanager
def _open_read(source):
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            yield fh
    else:
        yield source


# --------------------------------------------------------------------------
# episodes


def episode_lines(e: Episode):
    """The records of an episode log, one JSON text per line (no newline)."""
    yield _dumps(
        {
            "record": "header",
            "format": EPISODE_FORMAT,
            "schema": e.schema_id,
            "chronic_id": e.chronic_id,
            "agent": e.agent,
            "seed": int(e.seed),
        }
    )
    tr = e.trajectory
    cols = {name: getattr(tr, name).tolist() for name in OBS_FIELDS}
    for t in range(len(tr)):
        rec = {"record": "obs"}
        for name in OBS_FIELDS:
            rec[name] = cols[name][t]
        yield _dumps(rec)
    term = e.termination
    err = term.error_type.value if isinstance(term.error_type, ErrorType) else str(term.error_type)
    yield _dumps(
        {
            "record": "termination",
            "outcome": term.outcome.value,
            "failed_step": term.failed_step,
            "error_type": err,
            "horizon": term.horizon,
        }
    )


def write_episode(e: Episode, destination, schema: GridSchema) -> int:
    """Write ``e`` as an ``.epis`` log; returns the byte count.

    The episode is validated first and nothing is written when it fails.
    """
    report = validate_episode(e, schema)
    if not report.ok:
        raise StoreError("invalid episode: " + "; ".join(report.messages()[:5]))
    nbytes = 0
    with _open_write(destination) as fh:
        for line in episode_lines(e):
            fh.write(line)
            fh.write("\n")
            nbytes += len(line.encode("utf-8")) + 1
    return nbytes


def episode_bytes(e: Episode) -> bytes:
    return "".join(line + "\n" for line in episode_lines(e)).encode("utf-8")


def _expect_int(value, lineno, name):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(lineno, f"expected integer, got {type(value).__name__}", name)
    return value


def _check_vector(value, lineno, name, dtype):
    if not isinstance(value, list):
        raise ParseError(lineno, f"expected list, got {type(value).__name__}", name)
    for v in value:
        if dtype is np.bool_:
            if not isinstance(v, bool):
                raise ParseError(lineno, f"expected boolean entries, got {v!r}", name)
        elif dtype is np.int64:
            if isinstance(v, bool) or not isinstance(v, int):
                raise ParseError(lineno, f"expected integer entries, got {v!r}", name)
        elif isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ParseError(lineno, f"expected numeric entries, got {v!r}", name)
    return value


def read_episode(source) -> Episode:
    """Parse an ``.epis`` log, one record at a time."""
    header = None
    term = None
    cols: dict[str, list] = {name: [] for name in OBS_FIELDS}
    widths: dict[str, int] = {}
    lineno = 0
    with _open_read(source) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, f"not a JSON record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ParseError(lineno, "record must be a key/value object")
            kind = rec.get("record")
            if term is not None:
                raise ParseError(lineno, "record after termination", "record")
            if header is None:
                if kind != "header":
                    raise ParseError(lineno, "first record must be the header", "record")
                fmt = rec.get("format")
                if fmt != EPISODE_FORMAT:
                    raise ParseError(lineno, f"unknown format version {fmt!r}", "format")
                for key in ("schema", "chronic_id", "agent"):
                    if not isinstance(rec.get(key), str):
                        raise ParseError(lineno, "expected string", key)
                _expect_int(rec.get("seed"), lineno, "seed")
                header = rec
            elif kind == "obs":
                for name, (dtype, elem) in OBS_FIELDS.items():
                    if name not in rec:
                        raise ParseError(lineno, "missing field", name)
                    value = rec[name]
                    if elem is None:
                        _expect_int(value, lineno, name)
                    else:
                        _check_vector(value, lineno, name, dtype)
                        if widths.setdefault(name, len(value)) != len(value):
                            raise ParseError(lineno, f"length {len(value)} differs from earlier records ({widths[name]})", name)
                    cols[name].append(value)
            elif kind == "termination":
                term = _parse_termination(rec, lineno)
            else:
                raise ParseError(lineno, f"unknown record type {kind!r}", "record")
    if header is None:
        raise ParseError(None, "empty episode log")
    if term is None:
        raise ParseError(lineno, "missing termination record")
    if not cols["step"]:
        raise ParseError(lineno, "episode has no observations")
    arrays = {}
    for name, (dtype, elem) in OBS_FIELDS.items():
        arrays[name] = np.array(cols[name], dtype=dtype)
    return Episode(header["chronic_id"], header["agent"], header["seed"], header["schema"], Trajectory(**arrays), term)


def _parse_termination(rec: dict, lineno: int) -> TerminationInfo:
    try:
        outcome = Outcome(rec.get("outcome"))
    except ValueError:
        raise ParseError(lineno, f"unknown outcome {rec.get('outcome')!r}", "outcome") from None
    failed_step = rec.get("failed_step")
    if failed_step is not None:
        _expect_int(failed_step, lineno, "failed_step")
    horizon = _expect_int(rec.get("horizon"), lineno, "horizon")
    err = rec.get("error_type")
    if not isinstance(err, str):
        raise ParseError(lineno, "expected string", "error_type")
    return TerminationInfo(outcome, failed_step, parse_error_type(err), horizon)


# --------------------------------------------------------------------------
# tables


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, Enum):
        return str(v.value)
    return str(v)


def _json_value(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v)
    if isinstance(v, Enum):
        return v.value
    return v


def _columns(rows) -> list[str]:
    if not rows:
        return []
    cols = list(rows[0].keys())
    ref = set(cols)
    for i, r in enumerate(rows):
        if set(r.keys()) != ref:
            raise StoreError(f"ragged table: row {i} has columns {sorted(r.keys())}, expected {sorted(ref)}")
    return cols


def write_table(rows, destination, format: TableFormat | str = TableFormat.CSV, columns=None) -> int:
    """Write a list of dict rows; returns the byte count.

    >>> buf = io.StringIO()
    >>> write_table([{"a": 1, "b": 2}], buf)
    8
    >>> buf.getvalue()
    'a,b\\n1,2\\n'
    """
    rows = list(rows)
    fmt = TableFormat(format)
    cols = list(columns) if columns is not None else _columns(rows)
    if columns is not None:
        for i, r in enumerate(rows):
            if set(r.keys()) != set(cols):
                raise StoreError(f"ragged table: row {i} does not match the declared columns")
    buf = io.StringIO()
    if fmt == TableFormat.CSV:
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(r[c]) for c in cols])
    else:
        for r in rows:
            buf.write(_dumps({c: _json_value(r[c]) for c in cols}))
            buf.write("\n")
    text = buf.getvalue()
    with _open_write(destination) as fh:
        fh.write(text)
    return len(text.encode("utf-8"))


def write_matrix(columns, matrix, destination, prefix_rows=None) -> int:
    """Fast CSV writer for a numeric matrix with optional leading bookkeeping columns.

    ``prefix_rows`` is a list of (column name, sequence) pairs written before
    the matrix columns.
    """
    prefix_rows = prefix_rows or []
    header = [name for name, _ in prefix_rows] + list(columns)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    mat = np.asarray(matrix, dtype=float)
    prefix_cols = [[_cell(v) for v in seq] for _, seq in prefix_rows]
    for i in range(mat.shape[0]):
        w.writerow([c[i] for c in prefix_cols] + [repr(v) for v in mat[i].tolist()])
    text = buf.getvalue()
    with _open_write(destination) as fh:
        fh.write(text)
    return len(text.encode("utf-8"))


def parse_cell(text: str):
    """Inverse of the CSV cell formatting: int, then float, else the string."""
    if text == "":
        return ""
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_table(source, format: TableFormat | str = TableFormat.CSV) -> list[dict]:
    fmt = TableFormat(format)
    return list(iter_table(source, fmt))


def iter_table(source, format: TableFormat | str = TableFormat.CSV):
    """Stream rows of a table written by :func:`write_table`."""
    fmt = TableFormat(format)
    with _open_read(source) as fh:
        if fmt == TableFormat.CSV:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise ParseError(lineno, f"expected {len(header)} cells, got {len(row)}")
                yield {c: parse_cell(v) for c, v in zip(header, row)}
        else:
            for lineno, raw in enumerate(fh, start=1):
                if raw.strip():
                    try:
                        yield json.loads(raw)
                    except json.JSONDecodeError as exc:
                        raise ParseError(lineno, exc.msg) from None


# --------------------------------------------------------------------------
# JSON documents (schemas, models, feature schemas)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return _json_value(obj)


def write_json(obj, destination) -> int:
    text = json.dumps(_clean(obj), indent=1, ensure_ascii=False, allow_nan=True) + "\n"
    with _open_write(destination) as fh:
        fh.write(text)
    return len(text.encode("utf-8"))


def read_json(source):
    with _open_read(source) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.lineno, exc.msg) from None


def write_schema(s: GridSchema, destination) -> int:
    return write_json({"format": "gridfail-schema/1", **s.to_dict()}, destination)


def read_schema(source) -> GridSchema:
    d = read_json(source)
    if d.get("format") != "gridfail-schema/1":
        raise StoreError(f"unknown schema format {d.get('format')!r}")
    d = {k: v for k, v in d.items() if k != "format"}
    return GridSchema.from_dict(d)


def finite_or_blank(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else v
