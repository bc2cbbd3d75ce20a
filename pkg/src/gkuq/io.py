"""Matrix Market, CSV and JSON helpers with deterministic output."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp


def write_mm(path, M, comment: str = "") -> None:
    """Write a dense array (vectors become one column) or sparse matrix.

    Dense inputs use the ``array`` variant, sparse inputs ``coordinate``.
    Values are written with 17 significant digits so reads round-trip exactly.
    """
    path = Path(path)
    if sp.issparse(M):
        M = sp.coo_matrix(M)
        # canonical entry order keeps the bytes reproducible
        order = np.lexsort((M.row, M.col))
        M = sp.coo_matrix((M.data[order], (M.row[order], M.col[order])), shape=M.shape)
    else:
        M = np.asarray(M, dtype=float)
        if M.ndim == 1:
            M = M[:, None]
    buf = io.BytesIO()
    scipy.io.mmwrite(buf, M, comment=comment, precision=17)
    path.write_bytes(buf.getvalue())


def read_mm(path, *, squeeze: bool = True):
    """Read a Matrix Market file; single-column dense arrays become 1-D."""
    M = scipy.io.mmread(str(path))
    if sp.issparse(M):
        return M.tocsr()
    M = np.asarray(M, dtype=float)
    if squeeze and M.ndim == 2 and M.shape[1] == 1:
        return M[:, 0]
    return M


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def write_csv(path, rows: list[dict], columns: list[str]) -> None:
    """Write ``rows`` with a fixed column order and ``repr`` float formatting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, float("nan"))) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (float(v) if _is_number(v) else v) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if not math.isfinite(v) else v
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def config_hash(obj) -> str:
    """SHA-256 of the canonical JSON encoding of ``obj``."""
    blob = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
