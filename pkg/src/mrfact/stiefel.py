"""Gradient descent under orthogonality constraints.

The feasible set is the set of n x p matrices with orthonormal columns.
Instead of projecting after each step, updates move along a curve
Y(tau) = (I + tau/2 W)^{-1} (I - tau/2 W) X built from a skew matrix W,
which stays on the manifold for every tau.  Step sizes come from an
Armijo-Wolfe backtracking search with halving.

`minimize` drives a single variable; `minimize_multi` handles several
orthogonal blocks at once, by default sweeping them block-coordinate
style (each block gets its own curvilinear step while the others are
held fixed).
"""

from dataclasses import dataclass, field

import numpy as np

from mrfact.errors import (
    DimensionError,
    GradientInconsistencyError,
    LineSearchError,
    NumericalError,
)

FEASIBILITY_TOL = 1e-8


def _reorthonormalize(x):
    q, r = np.linalg.qr(x)
    d = np.diag(r).copy()
    d[d == 0.0] = 1.0
    return q * np.sign(d)


class StiefelPoint:
    """An n x p matrix with orthonormal columns.

    Inputs that drift beyond the feasibility tolerance are snapped back
    via a QR factorization, so a point is always safe to use.
    """

    __slots__ = ("x",)

    def __init__(self, x):
        x = np.array(x, dtype=np.float64)
        if x.ndim != 2:
            raise DimensionError(f"expected a matrix, got shape {x.shape}")
        n, p = x.shape
        if p < 1 or n < p:
            raise DimensionError(f"need n >= p >= 1, got {n}x{p}")
        gram = x.T @ x
        if np.max(np.abs(gram - np.eye(p))) > FEASIBILITY_TOL:
            x = _reorthonormalize(x)
        x.flags.writeable = False
        self.x = x

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def p(self):
        return self.x.shape[1]

    def drift(self):
        """Max-abs deviation of X^T X from the identity."""
        return float(np.max(np.abs(self.x.T @ self.x - np.eye(self.p))))


class ObjectiveHandle:
    """Pairs a scalar objective with its plain (Euclidean) gradient.

    Both callables receive the raw n x p ndarray.  The gradient must be
    d F / d X_ij entrywise; manifold structure is applied by the solver.
    """

    __slots__ = ("evaluate", "gradient")

    def __init__(self, evaluate, gradient):
        self.evaluate = evaluate
        self.gradient = gradient


class JointObjectiveHandle:
    """Objective over a list of matrices, with per-variable gradients.

    evaluate(xs) -> float; gradient(xs, idx) -> gradient with respect to
    xs[idx], holding the others fixed.
    """

    __slots__ = ("evaluate", "gradient")

    def __init__(self, evaluate, gradient):
        self.evaluate = evaluate
        self.gradient = gradient


@dataclass(frozen=True)
class SearchParams:
    rho1: float = 1e-4
    rho2: float = 0.9
    eps: float = 1e-6
    tau0: float = 1.0
    max_iters: int = 500
    max_halvings: int = 50

    def __post_init__(self):
        if not (0.0 < self.rho1 < self.rho2 < 1.0):
            raise ValueError(
                f"need 0 < rho1 < rho2 < 1, got rho1={self.rho1}, rho2={self.rho2}"
            )
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.tau0 <= 0.0:
            raise ValueError(f"tau0 must be positive, got {self.tau0}")
        if self.max_iters < 1 or self.max_halvings < 1:
            raise ValueError("max_iters and max_halvings must be at least 1")


def _mat(x):
    return x.x if isinstance(x, StiefelPoint) else np.asarray(x, dtype=np.float64)


def skew_direction(x, g):
    """W = G X^T - X G^T, the skew matrix generating the descent curve."""
    x = _mat(x)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != x.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match {x.shape}")
    w = g @ x.T - x @ g.T
    return w


def cayley_curve(x, w, tau):
    """Point on the descent curve at step tau, via a linear solve."""
    xm = _mat(x)
    n = xm.shape[0]
    half = (0.5 * tau) * w
    try:
        y = np.linalg.solve(np.eye(n) + half, xm - half @ xm)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"curve solve failed at tau={tau}") from exc
    return StiefelPoint(y)


def curve_derivative(x, w, tau, y_tau):
    """d/dtau of the descent curve: -(I + tau/2 W)^{-1} W (X + Y(tau)) / 2."""
    xm = _mat(x)
    ym = _mat(y_tau)
    n = xm.shape[0]
    try:
        return np.linalg.solve(np.eye(n) + (0.5 * tau) * w, -0.5 * (w @ (xm + ym)))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"curve derivative solve failed at tau={tau}") from exc


def descent_slope_at_zero(g, x):
    """Initial slope of F along the curve: trace(G^T (-W X)).

    Algebraically this always equals -||W||_F^2 / 2; the cross-check
    here only trips on non-finite or numerically corrupted inputs.
    """
    xm = _mat(x)
    g = np.asarray(g, dtype=np.float64)
    w = skew_direction(xm, g)
    slope = -float(np.sum(g * (w @ xm)))
    ident = -0.5 * float(np.sum(w * w))
    tol = 1e-8 * max(1.0, abs(ident), abs(slope))
    if not (np.isfinite(slope) and np.isfinite(ident)) or abs(slope - ident) > tol:
        raise GradientInconsistencyError(
            f"slope {slope:.6e} disagrees with -||W||^2/2 = {ident:.6e}"
        )
    return slope


def finite_difference_gradient(evaluate, x, h=1e-5):
    """Central-difference gradient of a scalar function, entry by entry."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xo = x.copy()
        xo[idx] -= h
        g[idx] = (evaluate(xp) - evaluate(xo)) / (2.0 * h)
    return g


def validate_gradient(obj, x, h=1e-5, rtol=1e-4):
    """Check an ObjectiveHandle's gradient against finite differences."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(obj.gradient(x), dtype=np.float64)
    fd = finite_difference_gradient(obj.evaluate, x, h=h)
    err = float(np.linalg.norm(fd - g))
    if err > rtol * max(1.0, float(np.linalg.norm(g))):
        raise GradientInconsistencyError(
            f"gradient differs from finite differences by {err:.3e}"
        )


def armijo_wolfe_search(obj, x, w, params):
    """Backtrack tau over {tau0, tau0/2, ...} until both conditions hold.

    The sufficient-decrease test compares F(Y(tau)) against the linear
    model through the initial slope; the curvature test requires the
    slope along the curve at tau, trace(G(Y)^T Y'(tau)), to have risen
    to rho2 times the initial one.  If the curvature test never passes
    within the halving budget, the first sufficient-decrease point is
    returned instead; if even that never holds, the search has failed.
    """
    if not isinstance(x, StiefelPoint):
        x = StiefelPoint(x)
    xm = x.x
    f0 = float(obj.evaluate(xm))
    g0 = np.asarray(obj.gradient(xm), dtype=np.float64)
    slope0 = -float(np.sum(g0 * (w @ xm)))
    if slope0 >= 0.0:
        raise LineSearchError(f"slope at tau=0 is {slope0:.3e}, not a descent curve")
    armijo_fallback = None
    tau = params.tau0
    for _ in range(params.max_halvings + 1):
        y = cayley_curve(x, w, tau)
        fy = float(obj.evaluate(y.x))
        if fy <= f0 + params.rho1 * tau * slope0:
            if armijo_fallback is None:
                armijo_fallback = (tau, y)
            gy = np.asarray(obj.gradient(y.x), dtype=np.float64)
            fp = float(np.sum(gy * curve_derivative(x, w, tau, y)))
            if fp >= params.rho2 * slope0:
                return tau, y
        tau *= 0.5
    if armijo_fallback is not None:
        return armijo_fallback
    raise LineSearchError(
        f"no sufficient decrease within {params.max_halvings} halvings"
    )


@dataclass
class MinimizeResult:
    point: StiefelPoint
    f_trace: np.ndarray
    converged: bool
    iterations: int


@dataclass
class MultiMinimizeResult:
    points: list
    f_trace: np.ndarray
    converged: bool
    iterations: int
    drift_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))


def minimize(obj, x0, params=None):
    """Descend a single orthogonality-constrained variable.

    Stops when the manifold gradient ||W X||_F falls to params.eps, or
    after max_iters accepted steps (converged=False in that case).
    """
    if params is None:
        params = SearchParams()
    x = x0 if isinstance(x0, StiefelPoint) else StiefelPoint(x0)
    f_trace = [float(obj.evaluate(x.x))]
    converged = False
    for _ in range(params.max_iters):
        g = np.asarray(obj.gradient(x.x), dtype=np.float64)
        w = skew_direction(x, g)
        if float(np.linalg.norm(w @ x.x)) <= params.eps:
            converged = True
            break
        descent_slope_at_zero(g, x)  # validates the slope identity
        _, y = armijo_wolfe_search(obj, x, w, params)
        x = y
        f_trace.append(float(obj.evaluate(x.x)))
    else:
        # loop exhausted without hitting the break: re-check stationarity
        g = np.asarray(obj.gradient(x.x), dtype=np.float64)
        w = skew_direction(x, g)
        converged = float(np.linalg.norm(w @ x.x)) <= params.eps
    return MinimizeResult(
        point=x,
        f_trace=np.array(f_trace),
        converged=converged,
        iterations=len(f_trace) - 1,
    )


def _substituted(xs, idx, xm):
    out = list(xs)
    out[idx] = xm
    return out


def minimize_multi(obj, x0s, params=None, simultaneous=False):
    """Jointly descend several orthogonal blocks.

    Default scheme sweeps the blocks in order, giving each its own
    Armijo-Wolfe curvilinear step with the others frozen at their
    current values.  simultaneous=True instead moves all blocks along
    their curves with one shared step size per iteration.
    """
    if params is None:
        params = SearchParams()
    points = [p if isinstance(p, StiefelPoint) else StiefelPoint(p) for p in x0s]
    if not points:
        raise DimensionError("need at least one variable")
    if simultaneous:
        return _minimize_simultaneous(obj, points, params)

    f_trace = [float(obj.evaluate([p.x for p in points]))]
    drift_trace = []
    converged = False
    for _ in range(params.max_iters):
        xs = [p.x for p in points]
        max_rgrad = 0.0
        for qi in range(len(points)):
            g = np.asarray(obj.gradient(xs, qi), dtype=np.float64)
            w = skew_direction(points[qi], g)
            rgrad = float(np.linalg.norm(w @ points[qi].x))
            max_rgrad = max(max_rgrad, rgrad)
            if rgrad <= params.eps:
                continue
            single = ObjectiveHandle(
                evaluate=lambda xm, qi=qi: obj.evaluate(_substituted(xs, qi, xm)),
                gradient=lambda xm, qi=qi: obj.gradient(_substituted(xs, qi, xm), qi),
            )
            _, y = armijo_wolfe_search(single, points[qi], w, params)
            points[qi] = y
            xs[qi] = y.x
        if max_rgrad <= params.eps:
            converged = True
            break
        f_trace.append(float(obj.evaluate([p.x for p in points])))
        drift_trace.append(max(p.drift() for p in points))
    return MultiMinimizeResult(
        points=points,
        f_trace=np.array(f_trace),
        converged=converged,
        iterations=len(f_trace) - 1,
        drift_trace=np.array(drift_trace),
    )


def _minimize_simultaneous(obj, points, params):
    f_trace = [float(obj.evaluate([p.x for p in points]))]
    drift_trace = []
    converged = False
    for _ in range(params.max_iters):
        xs = [p.x for p in points]
        gs = [np.asarray(obj.gradient(xs, qi), dtype=np.float64) for qi in range(len(points))]
        ws = [skew_direction(points[qi], gs[qi]) for qi in range(len(points))]
        rgrad = max(float(np.linalg.norm(ws[qi] @ xs[qi])) for qi in range(len(points)))
        if rgrad <= params.eps:
            converged = True
            break
        slope0 = -sum(float(np.sum(gs[qi] * (ws[qi] @ xs[qi]))) for qi in range(len(points)))
        if slope0 >= 0.0:
            raise LineSearchError(f"joint slope at tau=0 is {slope0:.3e}")
        f0 = f_trace[-1]
        tau = params.tau0
        accepted = None
        armijo_fallback = None
        for _ in range(params.max_halvings + 1):
            ys = [cayley_curve(points[qi], ws[qi], tau) for qi in range(len(points))]
            fy = float(obj.evaluate([y.x for y in ys]))
            if fy <= f0 + params.rho1 * tau * slope0:
                if armijo_fallback is None:
                    armijo_fallback = (ys, fy)
                new_xs = [y.x for y in ys]
                fp = sum(
                    float(
                        np.sum(
                            np.asarray(obj.gradient(new_xs, qi), dtype=np.float64)
                            * curve_derivative(points[qi], ws[qi], tau, ys[qi])
                        )
                    )
                    for qi in range(len(points))
                )
                if fp >= params.rho2 * slope0:
                    accepted = (ys, fy)
                    break
            tau *= 0.5
        if accepted is None:
            accepted = armijo_fallback
        if accepted is None:
            raise LineSearchError(
                f"no sufficient joint decrease within {params.max_halvings} halvings"
            )
        points, fy = list(accepted[0]), accepted[1]
        f_trace.append(fy)
        drift_trace.append(max(p.drift() for p in points))
    return MultiMinimizeResult(
        points=points,
        f_trace=np.array(f_trace),
        converged=converged,
        iterations=len(f_trace) - 1,
        drift_trace=np.array(drift_trace),
    )
