"""Reference methods the learned factorization is measured against.

greedy_mmf is the classic bottom-up construction: at every level it
tries every index pair in the active set, scores each with a local
error that mixes the annihilated off-diagonal against the mass the
dropped row would leave behind, and keeps the best rotation.  nystrom
is the column-sampling low-rank approximation A ~ C W^+ C^T.
"""

import numpy as np

from mrfact import _kern
from mrfact.errors import DimensionError
from mrfact.matcore import (
    IndexSet,
    SymMatrix,
    Rotation,
    core_diagonal_projection,
    givens,
    sym_eigh,
)
from mrfact.mmf import Factorization

_ANGLE_GRID = np.linspace(0.0, 2.0 * np.pi, 64, endpoint=False)
_GS_ITERS = 40
_PINV_CUTOFF = 1e-10


def givens_best_angle(a11, a12, a22, b_terms):
    """Best rotation angle for one pair, scored by the local error.

    The error is 2 [O A O^T]_{21}^2 + 2 [O B O^T]_{22} with A the 2x2
    pair block and B the pair rows' Gram matrix; b_terms is (b11, b12,
    b22).  A 64-point grid seeds a golden-section refinement, so the
    returned angle is the deterministic global minimizer up to grid
    resolution, never worse than any grid point.
    """
    b11, b12, b22 = b_terms
    theta, energy = _kern.angle_scan(
        float(a11), float(a12), float(a22),
        float(b11), float(b12), float(b22),
        _ANGLE_GRID, _GS_ITERS,
    )
    return float(theta), float(energy)


def greedy_mmf(a, levels, c=1):
    """Exhaustive pair-search factorization with k=2 rotations.

    Each level scans all pairs inside the active set, rotates the best
    one by its best angle, and retires the pair's second index (both
    indices when c=2).  Ties go to the lexicographically first pair.
    """
    n = a.n
    if c not in (1, 2):
        raise DimensionError(f"pair rotations can drop 1 or 2 indices, got c={c}")
    if levels < 1:
        raise DimensionError(f"levels must be >= 1, got {levels}")
    if levels * c >= n:
        raise DimensionError(f"L*c = {levels * c} must stay below n = {n}")
    arr = a.copy_array()
    active = IndexSet.full(n)
    rotations = []
    wavelet_sets = []
    for _ in range(levels):
        act = active.as_array()
        sub = np.ascontiguousarray(arr[np.ix_(act, act)])
        gram = sub @ sub.T
        pi, pj, theta, _ = _kern.pair_scan_k2(sub, gram, _ANGLE_GRID, _GS_ITERS)
        gi, gj = int(act[pi]), int(act[pj])
        rot = Rotation(IndexSet([gi, gj], n), givens(theta))
        _kern.conjugate_inplace(
            arr, rot.support.as_array(), np.ascontiguousarray(rot.core)
        )
        wav = IndexSet([gj] if c == 1 else [gi, gj], n)
        rotations.append(rot)
        wavelet_sets.append(wav)
        active = active.minus(wav)
    core = core_diagonal_projection(SymMatrix(arr), active)
    return Factorization(
        n=n, k=2, c=c, rotations=rotations, wavelet_sets=wavelet_sets, core=core
    )


class NystromSketch:
    """The sampled columns and the corresponding submatrix of A."""

    __slots__ = ("columns", "column_block", "sample_block")

    def __init__(self, columns, column_block, sample_block):
        self.columns = columns
        self.column_block = column_block
        self.sample_block = sample_block


def nystrom(a, d, rng):
    """Column-sampling approximation: A ~ C W^+ C^T.

    Samples d columns uniformly without replacement, pseudo-inverts the
    sampled d x d block through its eigendecomposition (eigenvalues at
    or below 1e-10 of the largest magnitude are treated as zero), and
    returns the sketch, the approximation, and its Frobenius error.
    """
    n = a.n
    if not (1 <= d <= n):
        raise DimensionError(f"sample size {d} outside 1..{n}")
    cols = np.sort(rng.choice(n, size=d, replace=False)).astype(np.int64)
    c_block = a.a[:, cols].copy()
    w_block = a.a[np.ix_(cols, cols)].copy()
    w, v = sym_eigh(SymMatrix(w_block))
    scale = float(np.max(np.abs(w))) if w.size else 0.0
    inv = np.zeros_like(w)
    keep = np.abs(w) > _PINV_CUTOFF * scale
    inv[keep] = 1.0 / w[keep]
    pinv = (v * inv) @ v.T
    approx = c_block @ pinv @ c_block.T
    err = float(np.linalg.norm(a.a - approx))
    sketch = NystromSketch(IndexSet(cols, n), c_block, w_block)
    return sketch, SymMatrix(approx), err
