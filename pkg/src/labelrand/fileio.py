"""CSV exchange formats and atomic file output.

Feature files: ``id,f0,...,f{d-1}``. Prior files: ``id,p0,...,p{K-1}``.
Label files: ``id,label``. Every file has a header row; ids are kept as
strings. Parse errors name the file and the 1-based line.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from labelrand.errors import InputDomainError
from labelrand.mechanisms import PRIOR_ATOL


class FileFormatError(InputDomainError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def _rows(path):
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as err:
        raise FileFormatError(path, 0, f"cannot open: {err.strerror}") from err
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise FileFormatError(path, 1, "file is empty; expected a header row") from None
        if not header or header[0].strip() != "id":
            raise FileFormatError(path, 1, "first header column must be 'id'")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            rows.append((line_no, row))
    return [h.strip() for h in header], rows


def _unique_ids(path, rows):
    seen = {}
    ids = []
    for line_no, row in rows:
        example_id = row[0].strip()
        if example_id in seen:
            raise FileFormatError(path, line_no, f"duplicate id {example_id!r} (first on line {seen[example_id]})")
        seen[example_id] = line_no
        ids.append(example_id)
    return ids


def _float(path, line_no, text):
    try:
        value = float(text)
    except ValueError:
        raise FileFormatError(path, line_no, f"not a number: {text!r}") from None
    if not math.isfinite(value):
        raise FileFormatError(path, line_no, f"non-finite value {text!r}")
    return value


def read_labels(path, num_classes=None):
    """Returns ``(ids, labels)``; labels must be integers in ``[0, num_classes)``."""
    header, rows = _rows(path)
    if len(header) < 2:
        raise FileFormatError(path, 1, "label file needs columns id,label")
    ids = _unique_ids(path, rows)
    labels = np.empty(len(rows), dtype=np.int64)
    for j, (line_no, row) in enumerate(rows):
        if len(row) < 2:
            raise FileFormatError(path, line_no, "missing label column")
        text = row[1].strip()
        try:
            y = int(text)
        except ValueError:
            raise FileFormatError(path, line_no, f"label {text!r} is not an integer") from None
        if y < 0 or (num_classes is not None and y >= num_classes):
            bound = f"[0, {num_classes})" if num_classes is not None else ">= 0"
            raise FileFormatError(path, line_no, f"label {y} outside {bound}")
        labels[j] = y
    return ids, labels


def read_matrix(path, kind: str = "feature"):
    """Returns ``(ids, matrix)`` for a feature or prior file."""
    header, rows = _rows(path)
    width = len(header) - 1
    if width < 1:
        raise FileFormatError(path, 1, f"{kind} file needs at least one value column")
    ids = _unique_ids(path, rows)
    out = np.empty((len(rows), width))
    for j, (line_no, row) in enumerate(rows):
        if len(row) - 1 != width:
            raise FileFormatError(path, line_no, f"expected {width} {kind} columns, found {len(row) - 1}")
        out[j] = [_float(path, line_no, c) for c in row[1:]]
    return ids, out


def read_priors(path, num_classes=None):
    header, rows = _rows(path)
    ids, priors = read_matrix(path, "prior")
    if num_classes is not None and priors.shape[1] != num_classes:
        raise FileFormatError(path, 1, f"expected {num_classes} prior columns, found {priors.shape[1]}")
    if priors.shape[1] < 2:
        raise FileFormatError(path, 1, "priors need at least 2 columns")
    for (line_no, _), p in zip(rows, priors):
        if np.any(p < 0) or abs(p.sum() - 1.0) > PRIOR_ATOL:
            raise FileFormatError(path, line_no, "prior must be nonnegative and sum to 1")
    return ids, priors


def align(ids_a, ids_b, path_b):
    """Row positions in ``b`` for each id of ``a``; every id must be present."""
    pos = {i: j for j, i in enumerate(ids_b)}
    missing = [i for i in ids_a if i not in pos]
    if missing:
        raise FileFormatError(path_b, 0, f"{len(missing)} ids missing, e.g. {missing[0]!r}")
    return np.array([pos[i] for i in ids_a], dtype=int)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def format_float(x: float) -> str:
    return repr(float(x))


def write_csv(path, header, rows) -> None:
    atomic_write_text(path, csv_text(header, rows))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_jsonl(path, records) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_config(path) -> dict:
    """Parses ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as err:
        raise FileFormatError(path, 0, f"cannot open: {err.strerror}") from err
    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FileFormatError(path, line_no, f"expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise FileFormatError(path, line_no, "empty key")
        out[key.replace("-", "_")] = (value, line_no)
    return out
