"""CSV ingestion and output tables with a ``# key: value`` metadata header."""
from __future__ import annotations

import csv

import numpy as np

from .data import IncompleteDataset
from .errors import DataError

ID_COLUMNS = ("id", "record_id")


def read_csv(path, missing_token="NA", categorical_column=None, id_column=None,
             log_transform=False):
    """Read a numeric table with a header row into an :class:`IncompleteDataset`.

    Cells equal to ``missing_token`` (case-sensitive) are missing; every other
    cell must parse as a decimal number. A column named ``id`` or
    ``record_id`` (or ``id_column``) supplies record ids, which must be
    unique. ``categorical_column`` names one fully observed string column.
    ``log_transform`` replaces the numeric items by their natural logs.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not (len(r) == 1 and not r[0].strip())]
    rows = [r for r in rows if not r[0].startswith("#")]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names")
    if id_column is None:
        id_column = next((h for h in header if h in ID_COLUMNS), None)
    elif id_column not in header:
        raise DataError(f"{path}: id column {id_column!r} not found")
    if categorical_column is not None and categorical_column not in header:
        raise DataError(f"{path}: categorical column {categorical_column!r} not found")
    special = {id_column, categorical_column} - {None}
    items = [j for j, h in enumerate(header) if h not in special]
    if not items:
        raise DataError(f"{path}: no numeric columns")
    n = len(body)
    values = np.empty((n, len(items)))
    ids, cats = [], []
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(header):
            raise DataError(f"{path}: row {line} has {len(row)} fields, expected {len(header)}")
        for c, j in enumerate(items):
            cell = row[j].strip()
            if cell == missing_token:
                values[i, c] = np.nan
                continue
            try:
                x = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {line}, column {header[j]!r}: "
                                f"cannot parse {cell!r}") from None
            if not np.isfinite(x):
                raise DataError(f"{path}: row {line}, column {header[j]!r}: non-finite value")
            values[i, c] = x
        if id_column is not None:
            ids.append(row[header.index(id_column)].strip())
        if categorical_column is not None:
            lv = row[header.index(categorical_column)].strip()
            if lv == missing_token or lv == "":
                raise DataError(f"{path}: row {line}: categorical column "
                                f"{categorical_column!r} must be observed")
            cats.append(lv)
    if id_column is not None and len(set(ids)) != len(ids):
        dup = next(x for x in ids if ids.count(x) > 1)
        raise DataError(f"{path}: duplicate record id {dup!r}")
    if log_transform:
        with np.errstate(divide="ignore", invalid="ignore"):
            bad = ~np.isnan(values) & (values <= 0)
            if bad.any():
                i, j = np.argwhere(bad)[0]
                raise DataError(f"{path}: row {i + 2}, column {header[items[j]]!r}: "
                                "log transform needs positive values")
            values = np.log(values)
    return IncompleteDataset(values, tuple(header[j] for j in items),
                             tuple(ids) if id_column is not None else None,
                             np.array(cats) if categorical_column is not None else None,
                             categorical_column)


def fmt17(x):
    """Shortest-safe text for a float: 17 significant digits round-trip exactly."""
    return f"{x:.17g}"


def write_table(path, header, rows, meta=None):
    """CSV with a leading ``# key: value`` block; floats at 17 significant digits."""
    with open(path, "w", newline="") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt17(x) if isinstance(x, (float, np.floating)) else x for x in r])


def read_table(path):
    """Inverse of :func:`write_table`: ``(meta, header, rows of strings)``."""
    meta = {}
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for ln in lines:
        if ln.startswith("# ") and not body:
            k, _, v = ln[2:].partition(": ")
            meta[k] = v
        elif ln:
            body.append(ln)
    rows = list(csv.reader(body))
    if not rows:
        raise DataError(f"{path}: empty table")
    return meta, rows[0], rows[1:]


def write_imputation(path, imputation, meta=None):
    """Long-form imputed dataset: one row per (record, component, draw).

    Fully observed records appear once with component 0 and weight 1;
    components are 1-based.
    """
    data = imputation.data
    ids = data.record_ids()
    rec, comp, idx, weights, values = imputation.long_form()
    rows = []
    for r, g, j, w, v in zip(rec, comp, idx, weights, values):
        rows.append([ids[r], int(g) + 1, int(j) + 1, float(w), *map(float, v)])
    header = ["record_id", "component", "draw_index", "fractional_weight", *data.columns]
    write_table(path, header, rows, meta)


def read_imputation(path):
    """Arrays ``(record_id, component, draw_index, weight, values)`` of a long-form file."""
    meta, header, rows = read_table(path)
    if header[:4] != ["record_id", "component", "draw_index", "fractional_weight"]:
        raise DataError(f"{path}: not a long-form imputation file")
    ids = [r[0] for r in rows]
    comp = np.array([int(r[1]) for r in rows])
    idx = np.array([int(r[2]) for r in rows])
    w = np.array([float(r[3]) for r in rows])
    v = np.array([[float(x) for x in r[4:]] for r in rows]).reshape(len(rows), len(header) - 4)
    return ids, comp, idx, w, v, meta


def write_dataset(path, data, missing_token="NA"):
    header = ["id", *data.columns]
    if data.category is not None:
        header.append(data.category_name or "category")
    ids = data.record_ids()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            row = [ids[i]] + [missing_token if np.isnan(x) else fmt17(x) for x in data.values[i]]
            if data.category is not None:
                row.append(data.category[i])
            w.writerow(row)
