"""Multilevel factorization of a symmetric matrix by sparse rotations.

A factorization holds a chain of k-point rotations U_1..U_L, the nested
active sets they operate on, the wavelet indices dropped at each level,
and a core-diagonal tail H.  Applying the chain compresses the matrix
level by level; the objective is the squared mass the chain fails to
push into H, and equals the squared Frobenius reconstruction error when
H is the projection of the fully transformed matrix.

The rotation cores are the only continuous degrees of freedom.  This
module gives their analytic gradient and a polish step that descends
all cores on the orthogonal manifold with the index structure frozen.
Index selection itself lives elsewhere (greedy search in `baselines`,
learned policies in `rlpolicy`).
"""

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from mrfact import _kern
from mrfact.errors import (
    DimensionError,
    InvalidIndexError,
    InvariantError,
    NumericalError,
    SchemaError,
)
from mrfact.matcore import (
    CoreDiagonal,
    IndexSet,
    Rotation,
    SymMatrix,
    core_diagonal_projection,
    residual_norm_sq,
    sym_eigh,
)
from mrfact.stiefel import JointObjectiveHandle, SearchParams, StiefelPoint, minimize_multi

_FORMAT_TAG = "mrfact-factorization"
_FORMAT_VERSION = 1


class Factorization:
    """Immutable bundle: rotations, nested index sets, core-diagonal tail."""

    __slots__ = ("n", "k", "c", "rotations", "wavelet_sets", "active_sets", "core")

    def __init__(self, n, k, c, rotations, wavelet_sets, core):
        n, k, c = int(n), int(k), int(c)
        if not (2 <= k <= n):
            raise DimensionError(f"need 2 <= k <= n, got k={k}, n={n}")
        if not (1 <= c <= k):
            raise InvariantError(f"drop count c={c} must be in 1..k={k}")
        if len(rotations) != len(wavelet_sets):
            raise InvariantError(
                f"{len(rotations)} rotations but {len(wavelet_sets)} wavelet sets"
            )
        if not rotations:
            raise InvariantError("factorization needs at least one level")
        active = [IndexSet.full(n)]
        for lv, (rot, wav) in enumerate(zip(rotations, wavelet_sets), start=1):
            # k caps the order; levels near the tail may rotate a smaller
            # block once fewer than k indices remain active
            if rot.k > k:
                raise InvariantError(f"level {lv} core is {rot.k}x{rot.k}, exceeds k={k}")
            if rot.k < c:
                raise InvariantError(f"level {lv} core is {rot.k}x{rot.k}, below c={c}")
            if rot.support.universe != n or wav.universe != n:
                raise DimensionError(f"level {lv} index sets not over 0..{n - 1}")
            if not rot.support.issubset(active[-1]):
                raise InvariantError(f"level {lv} support leaves the active set")
            if not wav.issubset(rot.support):
                raise InvariantError(f"level {lv} wavelets outside the rotation support")
            if len(wav.indices) != c:
                raise InvariantError(
                    f"level {lv} drops {len(wav.indices)} indices, expected c={c}"
                )
            active.append(active[-1].minus(wav))
        if len(active[-1].indices) != n - c * len(rotations):
            raise InvariantError("active set chain lost the wrong number of indices")
        if core.n != n or core.core_support.indices != active[-1].indices:
            raise InvariantError("core-diagonal support does not match the final active set")
        self.n = n
        self.k = k
        self.c = c
        self.rotations = tuple(rotations)
        self.wavelet_sets = tuple(wavelet_sets)
        self.active_sets = tuple(active)
        self.core = core

    @property
    def levels(self):
        return len(self.rotations)


@dataclass(frozen=True)
class MmfConfig:
    levels: int
    k: int
    c: int = 1
    search: SearchParams = field(default_factory=SearchParams)
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.k < 2:
            raise ValueError(f"rotation order must be >= 2, got {self.k}")
        if not (1 <= self.c <= self.k):
            raise ValueError(f"drop count {self.c} must be in 1..k={self.k}")


def apply_chain(a, rotations, upto):
    """A_upto = U_upto ... U_1 A U_1^T ... U_upto^T, one conjugation per level."""
    if not (0 <= upto <= len(rotations)):
        raise DimensionError(f"level {upto} outside 0..{len(rotations)}")
    arr = a.copy_array()
    for rot in rotations[:upto]:
        _kern.conjugate_inplace(arr, rot.support.as_array(), np.ascontiguousarray(rot.core))
    return SymMatrix(arr)


def objective(a, f):
    """Off-diagonal mass the chain leaves outside the final core block."""
    if a.n != f.n:
        raise DimensionError(f"matrix is {a.n}x{a.n}, factorization expects {f.n}")
    transformed = apply_chain(a, f.rotations, f.levels)
    return residual_norm_sq(transformed, f.active_sets[-1])


def _chain_residual(a_arr, supports, cores, s_l):
    """Residual objective over raw core arrays (no orthogonality assumed)."""
    arr = a_arr.copy()
    for supp, core in zip(supports, cores):
        _kern.conjugate_inplace(arr, supp, np.ascontiguousarray(core))
    np.fill_diagonal(arr, 0.0)
    arr[np.ix_(s_l, s_l)] = 0.0
    return float(np.sum(arr * arr))


def _core_gradient(a_arr, supports, cores, level, s_l):
    """d objective / d core entries at one level, others fixed.

    Writing C for the matrix entering the level, U for the level's
    embedded rotation, and P for the chain above it, the objective is
    the masked square norm of P U C U^T P^T.  Differentiating through
    the Hadamard mask M gives

        grad = 4 [P^T (M o PUCU^TP^T) P  U C]  restricted to the support block.

    The conjugations are applied in place; only support-sized slices of
    the n x n products are ever formed.
    """
    arr = a_arr.copy()
    li = level - 1
    for m in range(li):
        _kern.conjugate_inplace(arr, supports[m], np.ascontiguousarray(cores[m]))
    c_mat = arr.copy()  # C, the input to this level
    for m in range(li, len(cores)):
        _kern.conjugate_inplace(arr, supports[m], np.ascontiguousarray(cores[m]))
    # arr is now the fully transformed matrix; mask it to the residual
    np.fill_diagonal(arr, 0.0)
    arr[np.ix_(s_l, s_l)] = 0.0
    # pull the masked matrix back below the upper chain: Z = P^T (M o .) P
    for m in range(len(cores) - 1, li, -1):
        _kern.conjugate_inplace(arr, supports[m], np.ascontiguousarray(cores[m].T))
    supp = supports[li]
    uc = c_mat[:, supp].copy()
    uc[supp, :] = cores[li] @ c_mat[np.ix_(supp, supp)]
    return 4.0 * arr[supp, :] @ uc


def objective_gradient(a, f, level):
    """Gradient of the objective with respect to the core at one level (1-based)."""
    if not (1 <= level <= f.levels):
        raise DimensionError(f"level {level} outside 1..{f.levels}")
    if a.n != f.n:
        raise DimensionError(f"matrix is {a.n}x{a.n}, factorization expects {f.n}")
    supports = [r.support.as_array() for r in f.rotations]
    cores = [r.core for r in f.rotations]
    s_l = f.active_sets[-1].as_array()
    return _core_gradient(a.copy_array(), supports, cores, level, s_l)


def closed_form_core(a_prev, support, active):
    """Eigenvector matrix of the support rows' Gram against the active set.

    Columns are in ascending eigenvalue order with the sign convention
    of sym_eigh.  Rotating by its transpose concentrates the support
    rows' active-set mass onto the later coordinates.
    """
    if not support.issubset(active):
        raise InvalidIndexError("support must lie inside the active set")
    rows = a_prev.a[np.ix_(support.as_array(), active.as_array())]
    _, v = sym_eigh(SymMatrix(rows @ rows.T))
    return v


def reconstruct(f):
    """Undo the chain on H: U_1^T ... U_L^T H U_L ... U_1."""
    arr = f.core.to_full()
    for rot in reversed(f.rotations):
        _kern.conjugate_inplace(
            arr, rot.support.as_array(), np.ascontiguousarray(rot.core.T)
        )
    return SymMatrix(arr)


def optimize_rotations(a, f, cfg):
    """Descend all rotation cores jointly, index structure frozen.

    Cores are optimized block-coordinate on the orthogonal manifold;
    H is recomputed as the core-diagonal projection of the final
    transformed matrix.  The result never scores worse than the input.
    """
    if cfg.levels != f.levels or cfg.k != f.k or cfg.c != f.c:
        raise InvariantError(
            f"config (L={cfg.levels}, k={cfg.k}, c={cfg.c}) does not match "
            f"factorization (L={f.levels}, k={f.k}, c={f.c})"
        )
    if a.n != f.n:
        raise DimensionError(f"matrix is {a.n}x{a.n}, factorization expects {f.n}")
    if cfg.levels * cfg.c >= a.n:
        raise InvariantError(
            f"L*c = {cfg.levels * cfg.c} must stay below n = {a.n}"
        )
    a_arr = a.copy_array()
    supports = [r.support.as_array() for r in f.rotations]
    s_l = f.active_sets[-1].as_array()
    joint = JointObjectiveHandle(
        evaluate=lambda xs: _chain_residual(a_arr, supports, xs, s_l),
        gradient=lambda xs, idx: _core_gradient(a_arr, supports, xs, idx + 1, s_l),
    )
    before = objective(a, f)
    res = minimize_multi(joint, [StiefelPoint(r.core) for r in f.rotations], cfg.search)
    rotations = [
        Rotation(rot.support, pt.x) for rot, pt in zip(f.rotations, res.points)
    ]
    transformed = apply_chain(a, rotations, f.levels)
    core = core_diagonal_projection(transformed, f.active_sets[-1])
    out = Factorization(
        n=f.n,
        k=f.k,
        c=f.c,
        rotations=rotations,
        wavelet_sets=f.wavelet_sets,
        core=core,
    )
    after = objective(a, out)
    if after > before + 1e-12:
        raise NumericalError(
            f"polish increased the objective: {before:.6e} -> {after:.6e}"
        )
    return out


# ----------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------


def save(f, path):
    """Single JSON document; floats keep full precision via repr round-trip."""
    doc = {
        "format": _FORMAT_TAG,
        "version": _FORMAT_VERSION,
        "n": f.n,
        "k": f.k,
        "c": f.c,
        "levels": [
            {
                "support": list(rot.support.indices),
                "wavelets": list(wav.indices),
                "core": [[float(x) for x in row] for row in rot.core],
            }
            for rot, wav in zip(f.rotations, f.wavelet_sets)
        ],
        "core_diagonal": {
            "support": list(f.core.core_support.indices),
            "core": [[float(x) for x in row] for row in f.core.core],
            "diag": [float(x) for x in f.core.diag],
        },
    }
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            json.dump(doc, handle)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path):
    """Rebuild a factorization from JSON, re-running every invariant check."""
    try:
        with open(path) as handle:
            doc = json.load(handle)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"not a factorization file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != _FORMAT_TAG:
        raise SchemaError("missing or wrong format tag")
    if doc.get("version") != _FORMAT_VERSION:
        raise SchemaError(f"unsupported version {doc.get('version')!r}")
    try:
        n, k, c = int(doc["n"]), int(doc["k"]), int(doc["c"])
        level_docs = doc["levels"]
        core_doc = doc["core_diagonal"]
        rotations = []
        wavelet_sets = []
        for ld in level_docs:
            rotations.append(
                Rotation(IndexSet(ld["support"], n), np.array(ld["core"], dtype=np.float64))
            )
            wavelet_sets.append(IndexSet(ld["wavelets"], n))
        core = CoreDiagonal(
            n,
            IndexSet(core_doc["support"], n),
            np.array(core_doc["core"], dtype=np.float64),
            np.array(core_doc["diag"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed factorization document: {exc}") from exc
    return Factorization(
        n=n, k=k, c=c, rotations=rotations, wavelet_sets=wavelet_sets, core=core
    )
