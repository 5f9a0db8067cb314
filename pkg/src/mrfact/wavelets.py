"""Wavelet bases read off a finished factorization.

A factorization retires c indices per level; the rows of the composite
rotation product belonging to those indices are the mother wavelets,
and the rows of the still-active final block are the fathers.  Stacked,
they form an orthogonal matrix, so analysis and synthesis of graph
signals are plain products with it and with its transpose.

The default basis uses composite-rotation rows throughout.  A second,
non-orthogonal reading takes mother rows from the level-wise
transformed matrices and father rows from the final core instead; it is
kept for inspection ("literal" mode) but supports no transforms, since
those rows admit no exact inverse.
"""

import json
import os
import tempfile

import numpy as np

from mrfact import _kern
from mrfact.errors import DimensionError, InvariantError, SchemaError
from mrfact.graphgen import read_matrix_market_array, write_matrix_market_array

_MODES = ("orthonormal", "literal")
_BASIS_TAG = "mrfact-wavelet-basis"
_BASIS_VERSION = 1
_ORTHO_TOL = 1e-8


class WaveletLabel:
    """Names one basis row: mother (level, retired index) or father (core index)."""

    __slots__ = ("kind", "level", "index")

    def __init__(self, kind, level, index):
        if kind not in ("mother", "father"):
            raise ValueError(f"kind must be 'mother' or 'father', got {kind!r}")
        level = int(level)
        index = int(index)
        if level < 1:
            raise ValueError(f"level must be >= 1, got {level}")
        if index < 0:
            raise ValueError(f"index must be >= 0, got {index}")
        self.kind = kind
        self.level = level
        self.index = index

    def __eq__(self, other):
        if not isinstance(other, WaveletLabel):
            return NotImplemented
        return (self.kind, self.level, self.index) == (
            other.kind,
            other.level,
            other.index,
        )

    def __hash__(self):
        return hash((self.kind, self.level, self.index))

    def __repr__(self):
        return f"WaveletLabel({self.kind!r}, level={self.level}, index={self.index})"


class WaveletBasis:
    """n wavelet rows plus the labels saying where each one came from.

    Rows are ordered mothers first (by level, then by retired index
    within a level), fathers after (by core index); together the label
    indices cover every coordinate exactly once.
    """

    __slots__ = ("n", "rows", "labels", "mode")

    def __init__(self, rows, labels, mode="orthonormal"):
        if mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {mode!r}")
        rows = np.array(rows, dtype=np.float64, order="C")
        if rows.ndim != 2 or rows.shape[0] != rows.shape[1]:
            raise DimensionError(f"basis must be square, got shape {rows.shape}")
        n = rows.shape[0]
        labels = tuple(labels)
        if len(labels) != n:
            raise DimensionError(f"{n} rows need {n} labels, got {len(labels)}")
        if not np.isfinite(rows).all():
            raise InvariantError("basis rows must be finite")
        seen = set()
        for lab in labels:
            if not isinstance(lab, WaveletLabel):
                raise InvariantError("labels must be WaveletLabel instances")
            if lab.index >= n or lab.index in seen:
                raise InvariantError(
                    "label indices must cover each coordinate exactly once"
                )
            seen.add(lab.index)
        split = sum(lab.kind == "mother" for lab in labels)
        mothers, fathers = labels[:split], labels[split:]
        if any(lab.kind != "mother" for lab in mothers) or any(
            lab.kind != "father" for lab in fathers
        ):
            raise InvariantError("mother rows must precede all father rows")
        if list(mothers) != sorted(mothers, key=lambda lab: (lab.level, lab.index)):
            raise InvariantError("mother rows must be ordered by level then index")
        if list(fathers) != sorted(fathers, key=lambda lab: lab.index):
            raise InvariantError("father rows must be ordered by index")
        if mode == "orthonormal":
            gram = rows @ rows.T
            drift = np.max(np.abs(gram - np.eye(n)))
            if drift > _ORTHO_TOL:
                raise InvariantError(
                    f"rows are not orthonormal: max Gram deviation {drift:.3e}"
                )
        rows.flags.writeable = False
        self.n = n
        self.rows = rows
        self.labels = labels
        self.mode = mode

    def __repr__(self):
        m = sum(lab.kind == "mother" for lab in self.labels)
        return f"WaveletBasis(n={self.n}, mothers={m}, mode={self.mode!r})"


def _sorted_labels(f):
    labels = []
    for ell, wav in enumerate(f.wavelet_sets, start=1):
        labels.extend(WaveletLabel("mother", ell, i) for i in wav.indices)
    labels.extend(
        WaveletLabel("father", f.levels, m) for m in f.active_sets[-1].indices
    )
    return labels


def extract_basis(a, f, mode="orthonormal"):
    """Read the wavelet rows out of a factorization of a.

    Orthonormal mode stacks rows of the composite rotation product: the
    retired index's row, frozen at the level that dropped it, is that
    level's mother wavelet, and the final active rows are the fathers.
    Literal mode takes the same row positions from the transformed
    matrix at each level and from the final core instead.
    """
    if mode not in _MODES:
        raise ValueError(f"mode must be one of {_MODES}, got {mode!r}")
    if a.n != f.n:
        raise DimensionError(f"matrix is {a.n}x{a.n}, factorization expects {f.n}")
    n = f.n
    labels = _sorted_labels(f)
    if mode == "orthonormal":
        u = np.eye(n)
        for rot in f.rotations:
            supp = rot.support.as_array()
            u[supp, :] = rot.core @ u[supp, :]
        source = {lab.index: u[lab.index] for lab in labels}
    else:
        cur = a.copy_array()
        source = {}
        for ell, rot in enumerate(f.rotations, start=1):
            _kern.conjugate_inplace(
                cur, rot.support.as_array(), np.ascontiguousarray(rot.core)
            )
            for i in f.wavelet_sets[ell - 1].indices:
                source[i] = cur[i].copy()
        for m in f.active_sets[-1].indices:
            source[m] = cur[m].copy()
    rows = np.vstack([source[lab.index] for lab in labels])
    return WaveletBasis(rows, labels, mode)


def _check_vector(basis, v, what):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (basis.n,):
        raise DimensionError(f"{what} must have shape ({basis.n},), got {v.shape}")
    if not np.isfinite(v).all():
        raise InvariantError(f"{what} must be finite")
    return v


def transform(basis, signal):
    """Wavelet coefficients of a graph signal: one inner product per row."""
    if basis.mode != "orthonormal":
        raise InvariantError(
            f"{basis.mode!r} basis rows are not orthogonal, no transform exists"
        )
    return basis.rows @ _check_vector(basis, signal, "signal")


def inverse_transform(basis, coefficients):
    """Signal back from its coefficients; exact inverse of transform."""
    if basis.mode != "orthonormal":
        raise InvariantError(
            f"{basis.mode!r} basis rows are not orthogonal, no transform exists"
        )
    return basis.rows.T @ _check_vector(basis, coefficients, "coefficients")


def sparsity(basis, tol=1e-8):
    """Fraction of basis entries larger than tol in magnitude."""
    return float(np.count_nonzero(np.abs(basis.rows) > tol)) / basis.rows.size


def save_basis(basis, matrix_path, labels_path):
    """Basis rows as a MatrixMarket dense array plus a JSON label sidecar."""
    write_matrix_market_array(basis.rows, matrix_path)
    doc = {
        "format": _BASIS_TAG,
        "version": _BASIS_VERSION,
        "n": basis.n,
        "mode": basis.mode,
        "labels": [
            {"kind": lab.kind, "level": lab.level, "index": lab.index}
            for lab in basis.labels
        ],
    }
    labels_path = os.fspath(labels_path)
    directory = os.path.dirname(os.path.abspath(labels_path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            json.dump(doc, handle, indent=1)
        os.replace(tmp, labels_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_basis(matrix_path, labels_path):
    rows = read_matrix_market_array(matrix_path)
    try:
        with open(labels_path) as handle:
            doc = json.load(handle)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"not a label file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != _BASIS_TAG:
        raise SchemaError("missing or wrong format tag")
    if doc.get("version") != _BASIS_VERSION:
        raise SchemaError(f"unsupported version {doc.get('version')!r}")
    try:
        mode = doc["mode"]
        labels = [
            WaveletLabel(item["kind"], item["level"], item["index"])
            for item in doc["labels"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed label document: {exc}") from exc
    return WaveletBasis(rows, labels, mode)
