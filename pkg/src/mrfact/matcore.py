"""Dense symmetric-matrix kernel.

Holds the core value types (symmetric matrices, index sets, k-point
rotations, core-diagonal matrices) and the operations everything else is
built from: Frobenius norms, residual masses, rotation embedding and
conjugation, core-diagonal projection, and a self-contained cyclic Jacobi
eigensolver for desk-scale matrices.

Indices are 0-based everywhere in memory; file formats convert at the
boundary. All values are immutable after construction, so they can be
shared freely across threads.
"""

import numpy as np

from mrfact import _kern
from mrfact.errors import (
    DimensionError,
    InvalidIndexError,
    InvariantError,
    NumericalError,
)

_SYM_TOL = 1e-12
_ORTHO_TOL = 1e-8
_EIG_MAX_N = 1024
_EIG_SWEEPS = 100


def givens(theta):
    """2x2 rotation [[cos, -sin], [sin, cos]] at angle theta."""
    c = np.cos(theta)
    s = np.sin(theta)
    return np.array([[c, -s], [s, c]])


class SymMatrix:
    """Dense symmetric n x n real matrix.

    Construction checks symmetry to 1e-12 (scaled by the largest entry),
    then symmetrizes exactly; the stored array is read-only.
    """

    __slots__ = ("_a",)

    def __init__(self, entries):
        a = np.array(entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionError(f"expected a square matrix, got shape {a.shape}")
        if a.shape[0] < 1:
            raise DimensionError("matrix must have dimension >= 1")
        if not np.isfinite(a).all():
            raise InvariantError("matrix entries must be finite")
        scale = max(1.0, float(np.max(np.abs(a))))
        if float(np.max(np.abs(a - a.T))) > _SYM_TOL * scale:
            raise InvariantError("matrix is not symmetric within 1e-12")
        a = (a + a.T) / 2.0
        a.flags.writeable = False
        self._a = a

    @classmethod
    def _wrap(cls, a):
        """Adopt an already-symmetric float64 array without re-checking."""
        obj = cls.__new__(cls)
        a.flags.writeable = False
        obj._a = a
        return obj

    @property
    def n(self):
        return self._a.shape[0]

    @property
    def a(self):
        """Read-only view of the entries."""
        return self._a

    def copy_array(self):
        """Writable copy of the entries."""
        return self._a.copy()

    def __repr__(self):
        return f"SymMatrix(n={self.n})"


class IndexSet:
    """Sorted set of 0-based coordinates inside a fixed universe [0, n)."""

    __slots__ = ("_idx", "_universe", "_members")

    def __init__(self, indices, universe):
        universe = int(universe)
        if universe < 1:
            raise DimensionError("universe must be >= 1")
        idx = [int(i) for i in indices]
        members = set(idx)
        if len(members) != len(idx):
            raise InvalidIndexError("duplicate indices")
        for i in idx:
            if i < 0 or i >= universe:
                raise InvalidIndexError(f"index {i} outside universe [0, {universe})")
        self._idx = tuple(sorted(idx))
        self._universe = universe
        self._members = frozenset(members)

    @classmethod
    def full(cls, n):
        return cls(range(n), n)

    @property
    def indices(self):
        return self._idx

    @property
    def universe(self):
        return self._universe

    def as_array(self):
        return np.array(self._idx, dtype=np.int64)

    def complement(self):
        return IndexSet(
            [i for i in range(self._universe) if i not in self._members], self._universe
        )

    def minus(self, other):
        self._check_universe(other)
        return IndexSet([i for i in self._idx if i not in other._members], self._universe)

    def union(self, other):
        self._check_universe(other)
        return IndexSet(self._members | other._members, self._universe)

    def issubset(self, other):
        self._check_universe(other)
        return self._members <= other._members

    def _check_universe(self, other):
        if self._universe != other._universe:
            raise DimensionError("index sets live in different universes")

    def __len__(self):
        return len(self._idx)

    def __iter__(self):
        return iter(self._idx)

    def __contains__(self, i):
        return i in self._members

    def __eq__(self, other):
        return (
            isinstance(other, IndexSet)
            and self._universe == other._universe
            and self._idx == other._idx
        )

    def __hash__(self):
        return hash((self._idx, self._universe))

    def __repr__(self):
        return f"IndexSet({list(self._idx)}, universe={self._universe})"


class Rotation:
    """k-point rotation: a k x k orthogonal core scattered onto a support."""

    __slots__ = ("support", "core")

    def __init__(self, support, core):
        core = np.array(core, dtype=np.float64)
        k = len(support)
        if k < 2:
            raise InvariantError("rotation order k must be >= 2")
        if core.shape != (k, k):
            raise DimensionError(
                f"core shape {core.shape} does not match support size {k}"
            )
        drift = float(np.max(np.abs(core.T @ core - np.eye(k))))
        if drift > _ORTHO_TOL:
            raise InvariantError(f"core is not orthogonal (drift {drift:.2e})")
        core.flags.writeable = False
        self.support = support
        self.core = core

    @property
    def k(self):
        return len(self.support)

    def __repr__(self):
        return f"Rotation(support={list(self.support.indices)}, k={self.k})"


class CoreDiagonal:
    """Matrix that is zero except on the diagonal and one core block."""

    __slots__ = ("n", "core_support", "core", "diag")

    def __init__(self, n, core_support, core, diag):
        n = int(n)
        if core_support.universe != n:
            raise DimensionError("core support universe does not match n")
        core = np.array(core, dtype=np.float64)
        m = len(core_support)
        if core.shape != (m, m):
            raise DimensionError("core block shape does not match support size")
        scale = max(1.0, float(np.max(np.abs(core))) if m else 1.0)
        if m and float(np.max(np.abs(core - core.T))) > 1e-10 * scale:
            raise InvariantError("core block is not symmetric")
        diag = np.array(diag, dtype=np.float64)
        if diag.shape != (n,):
            raise DimensionError("diag must have length n")
        core = (core + core.T) / 2.0 if m else core
        # off-core coordinates own the diag entries; core positions are zeroed
        mask = np.zeros(n, dtype=bool)
        mask[list(core_support)] = True
        diag = np.where(mask, 0.0, diag)
        core.flags.writeable = False
        diag.flags.writeable = False
        self.n = n
        self.core_support = core_support
        self.core = core
        self.diag = diag

    def to_full(self):
        full = np.diag(self.diag.copy())
        idx = self.core_support.as_array()
        if idx.size:
            full[np.ix_(idx, idx)] = self.core
        return full

    def __repr__(self):
        return f"CoreDiagonal(n={self.n}, core={len(self.core_support)})"


def frobenius_norm(m):
    """sqrt of the total squared mass of a SymMatrix."""
    return float(np.sqrt(np.sum(m.a * m.a)))


def residual_norm_sq(m, core_support):
    """Squared mass outside the diagonal and outside the core block.

    Counts every entry (i, j) with i != j that is not inside
    core_support x core_support.
    """
    off = m.copy_array()
    np.fill_diagonal(off, 0.0)
    idx = core_support.as_array()
    if idx.size:
        off[np.ix_(idx, idx)] = 0.0
    return float(np.sum(off * off))


def embed_rotation(r, n):
    """Scatter a rotation core into the full n x n orthogonal matrix."""
    if r.support.universe != n:
        raise InvalidIndexError(
            f"rotation support universe {r.support.universe} does not match n={n}"
        )
    u = np.eye(n)
    idx = r.support.as_array()
    u[np.ix_(idx, idx)] = r.core
    return u


def conjugate(m, r):
    """U m U^T via the sparse scatter path (only support rows/columns move)."""
    if m.n != r.support.universe:
        raise DimensionError(
            f"matrix dimension {m.n} does not match rotation universe "
            f"{r.support.universe}"
        )
    a = m.copy_array()
    _kern.conjugate_inplace(a, r.support.as_array(), np.ascontiguousarray(r.core))
    return SymMatrix._wrap(a)


def core_diagonal_projection(m, core_support):
    """Keep the diagonal and the core block, zero everything else.

    The squared Frobenius distance to m equals residual_norm_sq by
    construction (the dropped entries are exactly the residual ones).
    """
    idx = core_support.as_array()
    core = m.a[np.ix_(idx, idx)] if idx.size else np.zeros((0, 0))
    return CoreDiagonal(m.n, core_support, core, np.diag(m.a).copy())


def sym_eigh(m):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Returns (eigenvalues ascending, eigenvector columns). Column signs are
    normalized so each column's largest-magnitude entry is positive, which
    keeps both kernel backends aligned. Desk scale only: n <= 1024.
    """
    if m.n > _EIG_MAX_N:
        raise DimensionError(f"sym_eigh supports n <= {_EIG_MAX_N}, got {m.n}")
    w, v, sweeps = _kern.jacobi_eigh(m.a, tol=1e-12, max_sweeps=_EIG_SWEEPS)
    if sweeps > _EIG_SWEEPS:
        raise NumericalError(
            f"Jacobi eigensolver did not converge in {_EIG_SWEEPS} sweeps"
        )
    flip = v[np.abs(v).argmax(axis=0), np.arange(v.shape[1])] < 0.0
    v = np.where(flip[None, :], -v, v)
    return w, v
