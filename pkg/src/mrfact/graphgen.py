"""Test-bed matrices: small graph datasets, their Laplacians, and file I/O.

Everything downstream factorizes a symmetric matrix; this module is where
those matrices come from.  Three families are provided: the Zachary karate
club network (vendored as a package asset), Kronecker powers of a 2x2 seed,
and Cayley trees.  Matrices travel between runs in MatrixMarket coordinate
format, graphs as plain 1-based edge lists.
"""

import importlib.resources

import numpy as np

from mrfact.errors import DimensionError, InvariantError, SchemaError
from mrfact.matcore import SymMatrix, sym_eigh  # noqa: F401  (re-export convenience)

_MM_COORD_HEADER = "%%MatrixMarket matrix coordinate real symmetric"
_MM_ARRAY_HEADER = "%%MatrixMarket matrix array real general"

_KRONECKER_MAX_N = 4096


class Graph:
    """Undirected weighted graph on nodes 0..n-1.

    Edges are stored once, endpoints sorted, no self loops, positive
    weights.  Construction normalizes and validates; afterwards the
    instance is effectively immutable.
    """

    __slots__ = ("n", "edges")

    def __init__(self, n, edges):
        if n < 1:
            raise DimensionError(f"graph needs at least one node, got n={n}")
        canon = []
        seen = set()
        for u, v, w in edges:
            u, v, w = int(u), int(v), float(w)
            if u == v:
                raise InvariantError(f"self loop at node {u}")
            if not (0 <= u < n and 0 <= v < n):
                raise InvariantError(f"edge ({u}, {v}) outside 0..{n - 1}")
            if w <= 0.0:
                raise InvariantError(f"edge ({u}, {v}) has nonpositive weight {w}")
            if u > v:
                u, v = v, u
            if (u, v) in seen:
                raise InvariantError(f"duplicate edge ({u}, {v})")
            seen.add((u, v))
            canon.append((u, v, w))
        self.n = int(n)
        self.edges = tuple(canon)

    def adjacency(self):
        """Dense symmetric adjacency matrix with edge weights."""
        a = np.zeros((self.n, self.n))
        for u, v, w in self.edges:
            a[u, v] = w
            a[v, u] = w
        return SymMatrix(a)

    def degrees(self):
        d = np.zeros(self.n)
        for u, v, w in self.edges:
            d[u] += w
            d[v] += w
        return d


def _data_text(name):
    return importlib.resources.files("mrfact.data").joinpath(name).read_text()


def karate_graph():
    """Zachary's karate club: 34 members, 78 friendships, unit weights."""
    edges = []
    for line in _data_text("karate_edges.txt").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        u, v = line.split()
        edges.append((int(u) - 1, int(v) - 1, 1.0))
    return Graph(34, edges)


def karate_communities():
    """Faction labels for the karate club split, 0/1 per member."""
    labels = np.zeros(34, dtype=np.int64)
    for line in _data_text("karate_communities.txt").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        node, lab = line.split()
        labels[int(node) - 1] = int(lab)
    return labels


def kronecker_matrix(seed, order):
    """Repeated Kronecker product of a symmetric 2x2 seed with itself.

    order=1 returns the seed; each further order doubles the dimension.
    Capped at 4096 so a typo cannot allocate gigabytes.
    """
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != (2, 2):
        raise DimensionError(f"seed must be 2x2, got {seed.shape}")
    if order < 1 or 2**order > _KRONECKER_MAX_N:
        raise DimensionError(f"order {order} outside supported range")
    out = seed
    for _ in range(order - 1):
        out = np.kron(out, seed)
    return SymMatrix(out)


def cayley_tree(z, depth):
    """Rooted tree where the root has z children and every internal node
    z-1, grown to the given depth.  Unit edge weights.

    z=2 degenerates to a path of length 2*depth.
    """
    if z < 2:
        raise DimensionError(f"coordination number must be >= 2, got z={z}")
    if depth < 1:
        raise DimensionError(f"depth must be >= 1, got {depth}")
    edges = []
    frontier = [0]
    next_id = 1
    for level in range(depth):
        fanout = z if level == 0 else z - 1
        new_frontier = []
        for parent in frontier:
            for _ in range(fanout):
                edges.append((parent, next_id, 1.0))
                new_frontier.append(next_id)
                next_id += 1
        frontier = new_frontier
    return Graph(next_id, edges)


def normalized_laplacian(graph):
    """I - D^{-1/2} A D^{-1/2} for the weighted adjacency of the graph.

    Every node must have positive degree; an isolated node has no
    normalization and is rejected.
    """
    deg = graph.degrees()
    if np.any(deg <= 0.0):
        bad = int(np.argmin(deg))
        raise InvariantError(f"node {bad} is isolated, laplacian undefined")
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(graph.n)
    for u, v, w in graph.edges:
        lap[u, v] = -w * inv_sqrt[u] * inv_sqrt[v]
        lap[v, u] = lap[u, v]
    return SymMatrix(lap)


# ----------------------------------------------------------------------
# file formats
# ----------------------------------------------------------------------


def _fmt(x):
    # 17 significant digits: enough for float64 to round-trip exactly
    return f"{x:.17g}"


def write_matrix_market(m, path):
    """Symmetric coordinate MatrixMarket: lower triangle, 1-based indices."""
    a = m.a
    lines = [_MM_COORD_HEADER]
    entries = []
    for i in range(m.n):
        for j in range(i + 1):
            if a[i, j] != 0.0:
                entries.append(f"{i + 1} {j + 1} {_fmt(a[i, j])}")
    lines.append(f"{m.n} {m.n} {len(entries)}")
    lines.extend(entries)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_matrix_market(path):
    """Parse the symmetric coordinate format written by write_matrix_market.

    Duplicate entries, indices outside the declared shape, a non-square
    shape, or an unexpected header all raise SchemaError.
    """
    with open(path) as f:
        header = f.readline().strip()
        if header != _MM_COORD_HEADER:
            raise SchemaError(f"unsupported MatrixMarket header: {header!r}")
        size_line = None
        body = []
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("%"):
                continue
            if size_line is None:
                size_line = line
            else:
                body.append(line)
    if size_line is None:
        raise SchemaError("missing size line")
    try:
        rows, cols, nnz = (int(t) for t in size_line.split())
    except ValueError as exc:
        raise SchemaError(f"bad size line: {size_line!r}") from exc
    if rows != cols:
        raise SchemaError(f"matrix must be square, got {rows}x{cols}")
    if len(body) != nnz:
        raise SchemaError(f"declared {nnz} entries, found {len(body)}")
    a = np.zeros((rows, rows))
    seen = set()
    for line in body:
        parts = line.split()
        if len(parts) != 3:
            raise SchemaError(f"bad entry line: {line!r}")
        try:
            i, j, val = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise SchemaError(f"bad entry line: {line!r}") from exc
        if not (1 <= i <= rows and 1 <= j <= rows):
            raise SchemaError(f"entry ({i}, {j}) outside {rows}x{rows}")
        if j > i:
            raise SchemaError(f"entry ({i}, {j}) above the diagonal")
        if (i, j) in seen:
            raise SchemaError(f"duplicate entry ({i}, {j})")
        seen.add((i, j))
        a[i - 1, j - 1] = val
        a[j - 1, i - 1] = val
    return SymMatrix(a)


def write_matrix_market_array(arr, path):
    """Dense array MatrixMarket (general, column-major), for basis exports."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-d array, got shape {arr.shape}")
    rows, cols = arr.shape
    lines = [_MM_ARRAY_HEADER, f"{rows} {cols}"]
    for j in range(cols):
        for i in range(rows):
            lines.append(_fmt(arr[i, j]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_matrix_market_array(path):
    with open(path) as f:
        header = f.readline().strip()
        if header != _MM_ARRAY_HEADER:
            raise SchemaError(f"unsupported MatrixMarket header: {header!r}")
        tokens = []
        size_line = None
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("%"):
                continue
            if size_line is None:
                size_line = line
            else:
                tokens.append(line)
    if size_line is None:
        raise SchemaError("missing size line")
    try:
        rows, cols = (int(t) for t in size_line.split())
    except ValueError as exc:
        raise SchemaError(f"bad size line: {size_line!r}") from exc
    if len(tokens) != rows * cols:
        raise SchemaError(f"declared {rows * cols} values, found {len(tokens)}")
    try:
        vals = np.array([float(t) for t in tokens])
    except ValueError as exc:
        raise SchemaError("non-numeric value in array body") from exc
    return vals.reshape((cols, rows)).T


def write_edge_list(graph, path):
    """One edge per line: "u v weight", 1-based endpoints."""
    with open(path, "w") as f:
        f.write(f"# {graph.n} nodes\n")
        for u, v, w in graph.edges:
            f.write(f"{u + 1} {v + 1} {_fmt(w)}\n")


def read_edge_list(path, n=None):
    """Parse "u v [weight]" lines (1-based).  Weight defaults to 1.

    Node count is the largest endpoint seen unless given explicitly or
    recorded in a "# <n> nodes" comment.
    """
    edges = []
    max_node = 0
    declared = None
    with open(path) as f:
        for raw in f:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[1] == "nodes":
                    try:
                        declared = int(parts[0])
                    except ValueError:
                        pass
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise SchemaError(f"bad edge line: {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
                w = float(parts[2]) if len(parts) == 3 else 1.0
            except ValueError as exc:
                raise SchemaError(f"bad edge line: {line!r}") from exc
            if u < 1 or v < 1:
                raise SchemaError(f"endpoints are 1-based, got: {line!r}")
            edges.append((u - 1, v - 1, w))
            max_node = max(max_node, u, v)
    if n is None:
        n = declared if declared is not None else max_node
    return Graph(n, edges)
