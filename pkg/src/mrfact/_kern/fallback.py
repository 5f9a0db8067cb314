"""Pure-numpy twins of the compiled kernels.

Everything here must keep the exact same signature and semantics as the
Cython module `_fast`; the equivalence tests run both on the same inputs.
"""

import numpy as np

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def conjugate_inplace(a, idx, core):
    """Apply U a U^T in place where U is identity except the `idx` block.

    Touches only the `idx` rows and columns (O(k^2 n) work), then averages
    the touched cross-block against its transpose to stop symmetry drift.
    """
    a[idx, :] = core @ a[idx, :]
    a[:, idx] = a[:, idx] @ core.T
    t = (a[idx, :] + a[:, idx].T) / 2.0
    a[idx, :] = t
    a[:, idx] = t.T


def jacobi_eigh(a, tol=1e-12, max_sweeps=100):
    """Cyclic Jacobi eigensolver for a dense symmetric matrix.

    Sweeps the strict upper triangle, annihilating one entry at a time,
    until the off-diagonal Frobenius mass drops to tol * max(1, ||a||_F).
    Returns (eigenvalues ascending, eigenvector columns, sweeps); a sweep
    count of max_sweeps + 1 signals non-convergence and the caller decides
    how to fail.
    """
    A = np.array(a, dtype=np.float64, copy=True)
    n = A.shape[0]
    V = np.eye(n)
    if n == 1:
        return A.diagonal().copy(), V, 0
    thresh = tol * max(1.0, np.sqrt((A * A).sum()))
    skip = thresh / n
    sweeps = 0
    off_mask = ~np.eye(n, dtype=bool)
    while True:
        off2 = float(np.sum(A[off_mask] ** 2))
        if np.sqrt(max(off2, 0.0)) <= thresh:
            break
        if sweeps >= max_sweeps:
            sweeps = max_sweeps + 1
            break
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= skip:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cp = A[:, p].copy()
                cq = A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
                rp = A[p, :].copy()
                rq = A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[p, q] = 0.0
                A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    w = np.diagonal(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order], sweeps


def _pair_energy(th, a12, qd, sb, db, b12):
    """Local elimination cost of the Givens rotation [[c,-s],[s,c]] at angle(s) th.

    Double-angle form with qd = (a11-a22)/2, sb = (b11+b22)/2, db = (b22-b11)/2:
    the rotated (2,1) entry of the pair block is a12*cos(2t) + qd*sin(2t) and
    the rotated (2,2) entry of the row Gram is sb + db*cos(2t) + b12*sin(2t).
    Cost = 2*(first)^2 + 2*(second); the second row is the one dropped.
    """
    two = 2.0 * th
    co = np.cos(two)
    si = np.sin(two)
    r21 = a12 * co + qd * si
    w22 = sb + db * co + b12 * si
    return 2.0 * r21 * r21 + 2.0 * w22


def angle_scan(a11, a12, a22, b11, b12, b22, thetas, gs_iters=40):
    """Best rotation angle per instance: seed grid + golden-section polish.

    All six coefficient arguments broadcast against each other (scalars are
    fine). Returns (theta, energy) with the grid spacing assumed uniform;
    grid ties resolve to the smallest angle.
    """
    a12v, qd, sb, db, b12v = np.broadcast_arrays(
        np.asarray(a12, dtype=float),
        (np.asarray(a11, dtype=float) - np.asarray(a22, dtype=float)) / 2.0,
        (np.asarray(b11, dtype=float) + np.asarray(b22, dtype=float)) / 2.0,
        (np.asarray(b22, dtype=float) - np.asarray(b11, dtype=float)) / 2.0,
        np.asarray(b12, dtype=float),
    )
    scalar = a12v.ndim == 0
    a12v, qd, sb, db, b12v = (np.atleast_1d(x) for x in (a12v, qd, sb, db, b12v))
    thetas = np.asarray(thetas, dtype=float)
    step = thetas[1] - thetas[0]

    grid = _pair_energy(
        thetas[None, :], a12v[:, None], qd[:, None], sb[:, None], db[:, None], b12v[:, None]
    )
    seed = np.argmin(grid, axis=1)
    th0 = thetas[seed]
    e0 = grid[np.arange(grid.shape[0]), seed]

    lo = th0 - step
    hi = th0 + step
    for _ in range(gs_iters):
        x1 = hi - GOLDEN * (hi - lo)
        x2 = lo + GOLDEN * (hi - lo)
        f1 = _pair_energy(x1, a12v, qd, sb, db, b12v)
        f2 = _pair_energy(x2, a12v, qd, sb, db, b12v)
        left = f1 < f2
        hi = np.where(left, x2, hi)
        lo = np.where(left, lo, x1)
    th = (lo + hi) / 2.0
    e = _pair_energy(th, a12v, qd, sb, db, b12v)
    keep_seed = ~(e < e0)
    th = np.where(keep_seed, th0, th)
    e = np.where(keep_seed, e0, e)
    th = np.mod(th, 2.0 * np.pi)
    if scalar:
        return float(th[0]), float(e[0])
    return th, e


def pair_scan_k2(block, gram, thetas, gs_iters=40):
    """Exhaustive Givens pair scan over an active block.

    block: symmetric (m, m) active submatrix; gram: block @ block.T.
    Every unordered pair (i, j), i < j, gets its own best angle via
    angle_scan, then the pair with the smallest energy wins; ties resolve
    to the lexicographically smallest (i, j). Returns (i, j, theta, energy)
    with i, j positions into the block.
    """
    m = block.shape[0]
    iu, ju = np.triu_indices(m, 1)
    d = np.diagonal(block)
    gd = np.diagonal(gram)
    th, e = angle_scan(
        d[iu], block[iu, ju], d[ju], gd[iu], gram[iu, ju], gd[ju], thetas, gs_iters
    )
    best = int(np.argmin(e))
    return int(iu[best]), int(ju[best]), float(th[best]), float(e[best])
