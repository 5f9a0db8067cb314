"""Command-line front end for the factorization toolkit.

Subcommands: ``gen`` writes a benchmark matrix, ``factorize`` runs one
factorization, ``compare`` sweeps methods over core sizes, ``wavelets``
exports a basis, ``wnn`` trains the toy spectral network.

Reproducibility contract: one global ``--seed`` (default 0) feeds every
random choice through named numpy SeedSequence streams, so a repeated
command line yields byte-identical CSV files.  Every command writes a
manifest JSON alongside its outputs recording the command, the full
parameter set, input file hashes, output paths, and wall time.

Exit codes: 0 success, 2 usage or bad inputs, 3 numerical failure,
4 missing files or schema problems.
"""

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from mrfact import baselines, graphgen, mmf, rlpolicy, wavelets, wnn
from mrfact.errors import MrfactError, NumericalError, SchemaError
from mrfact.matcore import IndexSet, SymMatrix, conjugate, residual_norm_sq

_MANIFEST_FORMAT = "mrfact-manifest"
_REPORT_FORMAT = "mrfact-wavelet-report"
_FORMAT_VERSION = 1

# the standard growing seed: order 9 gives a 512x512 matrix
_KRONECKER_SEED = np.array([[0.0, 1.0], [1.0, 1.0]])

# sub-stream codes so compare cells never share a generator
_METHOD_CODES = {"greedy": 0, "learnable": 1, "nystrom": 2}


class UsageError(Exception):
    """Bad flag combination or infeasible parameters."""


# ---------------------------------------------------------------- plumbing


def _fmt(x):
    return f"{float(x):.17g}"


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _atomic_text(path, text):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_manifest(path, command, parameters, seed, inputs, outputs, wall):
    blob = {
        "format": _MANIFEST_FORMAT,
        "version": _FORMAT_VERSION,
        "command": command,
        "parameters": parameters,
        "seed": seed,
        "input_hashes": {p: _sha256(p) for p in inputs},
        "outputs": list(outputs),
        "wall_time_s": wall,
    }
    _atomic_text(path, json.dumps(blob, indent=2, sort_keys=True) + "\n")


def _load_symmetric(path):
    arr = graphgen.read_matrix_market_array(path)
    return SymMatrix(arr)


def _cell_rng_seed(seed, method, d_l, rep):
    ss = np.random.SeedSequence([int(seed), _METHOD_CODES[method], int(d_l), int(rep)])
    return ss


def _frobenius_error(a, f):
    return math.sqrt(mmf.objective(a, f))


def _level_errors(a, f):
    """Frobenius residual after each level of the final chain."""
    rows = []
    current = a
    for level, rot in enumerate(f.rotations, start=1):
        current = conjugate(current, rot)
        err = math.sqrt(residual_norm_sq(current, f.active_sets[level]))
        rows.append((level, err))
    return rows


# ---------------------------------------------------------------- commands


def _cmd_gen(args):
    if args.dataset == "karate":
        if args.order is not None or args.z is not None or args.depth is not None:
            raise UsageError("karate takes no size flags")
        arr = graphgen.normalized_laplacian(graphgen.karate_graph()).a
        params = {"dataset": "karate"}
    elif args.dataset == "kronecker":
        if args.order is None:
            raise UsageError("kronecker needs --order")
        if args.z is not None or args.depth is not None:
            raise UsageError("--z/--depth only apply to cayley")
        arr = graphgen.kronecker_matrix(_KRONECKER_SEED, args.order).a
        params = {"dataset": "kronecker", "order": args.order}
    else:
        if args.z is None or args.depth is None:
            raise UsageError("cayley needs --z and --depth")
        if args.order is not None:
            raise UsageError("--order only applies to kronecker")
        tree = graphgen.cayley_tree(args.z, args.depth)
        arr = graphgen.normalized_laplacian(tree).a
        params = {"dataset": "cayley", "z": args.z, "depth": args.depth}

    graphgen.write_matrix_market_array(arr, args.out)
    print(f"wrote {args.out} ({arr.shape[0]}x{arr.shape[1]})")
    return {
        "manifest": args.out + ".manifest.json",
        "parameters": params,
        "inputs": [],
        "outputs": [args.out],
    }


def _resolve_depth(n, levels, d_l, c):
    if levels is not None and d_l is not None:
        raise UsageError("give --levels or --d-l, not both")
    if levels is None:
        d_l = 8 if d_l is None else d_l
        if d_l < 1 or (n - d_l) % c != 0 or n - d_l < c:
            raise UsageError(f"no integer level count leaves d_L={d_l} of n={n} with c={c}")
        levels = (n - d_l) // c
    if levels < 1 or levels * c >= n:
        raise UsageError(f"L*c = {levels * c} must stay below n = {n}")
    return levels


def _cmd_factorize(args):
    a = _load_symmetric(args.matrix)
    levels = _resolve_depth(a.n, args.levels, args.d_l, args.c)
    outputs = []

    if args.method == "greedy":
        if args.k not in (None, 2):
            raise UsageError("greedy rotates pairs; --k must be 2 or omitted")
        if args.episodes is not None or args.eta is not None:
            raise UsageError("--episodes/--eta only apply to learnable")
        k = 2
        f = baselines.greedy_mmf(a, levels, args.c)
    else:
        k = 8 if args.k is None else args.k
        episodes = 12 if args.episodes is None else args.episodes
        eta = 1e-5 if args.eta is None else args.eta
        cfg = rlpolicy.TrainConfig(
            mmf=mmf.MmfConfig(levels=levels, k=k, c=args.c, seed=args.seed),
            episodes=episodes,
            eta=eta,
        )
        result = rlpolicy.train(a, cfg)
        f = result.factorization
        trace_path = args.out + ".trace.csv"
        rlpolicy.write_trace_csv(result.trace, trace_path)
        outputs.append(trace_path)

    fact_path = args.out + ".json"
    mmf.save(f, fact_path)
    errors_path = args.out + ".errors.csv"
    lines = ["level,error"]
    lines.extend(f"{level},{_fmt(err)}" for level, err in _level_errors(a, f))
    _atomic_text(errors_path, "\n".join(lines) + "\n")
    outputs[:0] = [fact_path, errors_path]

    final = _frobenius_error(a, f)
    print(
        f"{args.method}: L={levels} k={k} c={args.c} "
        f"d_L={len(f.active_sets[-1])} error={final:.6g}"
    )
    params = {
        "matrix": args.matrix,
        "method": args.method,
        "levels": levels,
        "k": k,
        "c": args.c,
        "final_error": final,
    }
    if args.method == "learnable":
        params["episodes"] = episodes
        params["eta"] = eta
    return {
        "manifest": args.out + ".manifest.json",
        "parameters": params,
        "inputs": [args.matrix],
        "outputs": outputs,
    }


def _compare_cell(payload):
    """One (method, d_L, repeat) cell; top level so worker pools can pickle it."""
    arr, method, d_l, rep, seed, c, k, episodes, eta = payload
    a = SymMatrix(arr)
    levels = (a.n - d_l) // c
    if method == "greedy":
        err = _frobenius_error(a, baselines.greedy_mmf(a, levels, c))
    elif method == "nystrom":
        rng = np.random.default_rng(_cell_rng_seed(seed, method, d_l, rep))
        _, _, err = baselines.nystrom(a, d_l, rng)
    else:
        sub = int(_cell_rng_seed(seed, method, d_l, rep).generate_state(1)[0])
        cfg = rlpolicy.TrainConfig(
            mmf=mmf.MmfConfig(levels=levels, k=k, c=c, seed=sub),
            episodes=episodes,
            eta=eta,
        )
        err = rlpolicy.train(a, cfg).final_error
    return d_l, method, rep, err


def _cmd_compare(args):
    a = _load_symmetric(args.matrix)
    d_ls = sorted(set(args.d_l))
    for d_l in d_ls:
        if d_l < 1 or d_l >= a.n or (a.n - d_l) % args.c != 0:
            raise UsageError(f"d_L={d_l} is not reachable from n={a.n} with c={args.c}")

    payloads = []
    for d_l in d_ls:
        payloads.append((a.a, "greedy", d_l, 0, args.seed, args.c, 2, 0, 0.0))
        for rep in range(args.learnable_reps):
            payloads.append(
                (a.a, "learnable", d_l, rep, args.seed, args.c, args.k,
                 args.episodes, args.eta)
            )
        for rep in range(args.nystrom_reps):
            payloads.append((a.a, "nystrom", d_l, rep, args.seed, args.c, 2, 0, 0.0))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            cells = list(pool.map(_compare_cell, payloads))
    else:
        cells = [_compare_cell(p) for p in payloads]

    grouped = {}
    for d_l, method, _, err in cells:
        grouped.setdefault((d_l, method), []).append(err)
    lines = ["d_L,method,mean_error,std_error,seeds"]
    for (d_l, method) in sorted(grouped):
        errs = np.asarray(grouped[(d_l, method)])
        lines.append(
            f"{d_l},{method},{_fmt(errs.mean())},{_fmt(errs.std())},{errs.size}"
        )
    _atomic_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {args.out} ({len(grouped)} rows)")
    return {
        "manifest": args.out + ".manifest.json",
        "parameters": {
            "matrix": args.matrix,
            "d_l": d_ls,
            "c": args.c,
            "k": args.k,
            "learnable_reps": args.learnable_reps,
            "nystrom_reps": args.nystrom_reps,
            "episodes": args.episodes,
            "eta": args.eta,
            "jobs": args.jobs,
        },
        "inputs": [args.matrix],
        "outputs": [args.out],
    }


def _cmd_wavelets(args):
    a = _load_symmetric(args.matrix)
    f = mmf.load(args.factorization)
    basis = wavelets.extract_basis(a, f, args.mode)

    matrix_path = args.out + ".mtx"
    labels_path = args.out + ".labels.json"
    wavelets.save_basis(basis, matrix_path, labels_path)

    mothers = sum(1 for lab in basis.labels if lab.kind == "mother")
    report = {
        "format": _REPORT_FORMAT,
        "version": _FORMAT_VERSION,
        "n": basis.n,
        "mode": basis.mode,
        "mothers": mothers,
        "fathers": basis.n - mothers,
        "sparsity": wavelets.sparsity(basis),
    }
    if basis.mode == "orthonormal":
        gram_dev = float(np.abs(basis.rows @ basis.rows.T - np.eye(basis.n)).max())
        report["orthogonality_max_dev"] = gram_dev
        report["orthogonal"] = bool(gram_dev <= 1e-8)
    report_path = args.out + ".report.json"
    _atomic_text(report_path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"wrote {matrix_path} ({basis.n} rows, {mothers} mothers)")
    return {
        "manifest": args.out + ".manifest.json",
        "parameters": {
            "matrix": args.matrix,
            "factorization": args.factorization,
            "mode": args.mode,
        },
        "inputs": [args.matrix, args.factorization],
        "outputs": [matrix_path, labels_path, report_path],
    }


def _read_labels(path):
    try:
        with open(path, "r") as handle:
            blob = json.load(handle)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(blob, dict) or "classes" not in blob or "labeled" not in blob:
        raise SchemaError(f"{path}: needs 'classes' and 'labeled' lists")
    try:
        classes = np.asarray(blob["classes"], dtype=np.int64)
        labeled = [int(i) for i in blob["labeled"]]
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: classes/labeled must be integer lists") from exc
    if classes.ndim != 1 or classes.min(initial=0) < 0:
        raise SchemaError(f"{path}: classes must be nonnegative integers per node")
    return classes, labeled


def _cmd_wnn(args):
    a = _load_symmetric(args.matrix)
    f = mmf.load(args.factorization)
    classes, labeled = _read_labels(args.labels)
    n = a.n
    if classes.size != n:
        raise SchemaError(
            f"{args.labels}: {classes.size} class entries for a {n}-node matrix"
        )
    basis = wavelets.extract_basis(a, f)

    num_classes = int(classes.max()) + 1
    y = np.zeros((n, num_classes))
    y[np.arange(n), classes] = 1.0
    train_set = IndexSet(sorted(labeled), n)
    split = wnn.DataSplit(train_set, train_set.complement())

    if args.features == "ones":
        f0 = np.ones((n, 1))
    else:
        f0 = np.eye(n)
    dims = (f0.shape[1], *args.hidden, num_classes)
    model = wnn.init_model(basis, dims, np.random.default_rng(args.seed))
    trained, trace = wnn.train(
        model, f0, y, split, epochs=args.epochs, lr=args.lr
    )

    metrics_path = args.out + ".metrics.csv"
    wnn.write_metrics_csv(trace, metrics_path)
    model_path = args.out + ".model.json"
    wnn.save_model(trained, model_path)
    print(
        f"trained {len(dims) - 1} layer(s), {args.epochs} epochs: "
        f"loss={trace[-1][1]:.6g} accuracy={trace[-1][2]:.3f}"
    )
    return {
        "manifest": args.out + ".manifest.json",
        "parameters": {
            "matrix": args.matrix,
            "factorization": args.factorization,
            "labels": args.labels,
            "features": args.features,
            "dims": list(dims),
            "epochs": args.epochs,
            "lr": args.lr,
        },
        "inputs": [args.matrix, args.factorization, args.labels],
        "outputs": [metrics_path, model_path],
    }


# ---------------------------------------------------------------- parser


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mrfact",
        description="Multiresolution factorization toolkit.",
    )
    parser.add_argument(
        "--seed", type=int, default=0, help="root seed for every random choice"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a benchmark matrix")
    gen.add_argument("dataset", choices=("karate", "kronecker", "cayley"))
    gen.add_argument("--order", type=int, help="kronecker: number of factors")
    gen.add_argument("--z", type=int, help="cayley: branching factor")
    gen.add_argument("--depth", type=int, help="cayley: tree depth")
    gen.add_argument("--out", required=True, help="output matrix path")
    gen.set_defaults(handler=_cmd_gen)

    fac = sub.add_parser("factorize", help="run one factorization")
    fac.add_argument("matrix", help="MatrixMarket input")
    fac.add_argument("--method", choices=("greedy", "learnable"), required=True)
    fac.add_argument("--levels", type=int, help="number of rotation levels")
    fac.add_argument("--d-l", type=int, help="core size to leave (default 8)")
    fac.add_argument("--k", type=int, help="rotation order (greedy: 2, learnable: 8)")
    fac.add_argument("--c", type=int, default=1, help="indices dropped per level")
    fac.add_argument("--episodes", type=int, help="learnable: episode budget (12)")
    fac.add_argument(
        "--eta", type=float,
        help="learnable: policy step size (1e-5; small keeps desk-scale runs stable)",
    )
    fac.add_argument("--out", required=True, help="output path base")
    fac.set_defaults(handler=_cmd_factorize)

    cmp_ = sub.add_parser("compare", help="sweep methods over core sizes")
    cmp_.add_argument("matrix", help="MatrixMarket input")
    cmp_.add_argument("--d-l", type=int, nargs="+", required=True, help="core sizes")
    cmp_.add_argument("--c", type=int, default=1, help="indices dropped per level")
    cmp_.add_argument("--k", type=int, default=8, help="learnable rotation order")
    cmp_.add_argument("--learnable-reps", type=int, default=5)
    cmp_.add_argument("--nystrom-reps", type=int, default=20)
    cmp_.add_argument("--episodes", type=int, default=12, help="learnable episode budget")
    cmp_.add_argument("--eta", type=float, default=1e-5, help="learnable step size")
    cmp_.add_argument("--jobs", type=int, default=1, help="worker processes")
    cmp_.add_argument("--out", required=True, help="output CSV path")
    cmp_.set_defaults(handler=_cmd_compare)

    wav = sub.add_parser("wavelets", help="export a wavelet basis")
    wav.add_argument("matrix", help="MatrixMarket input")
    wav.add_argument("factorization", help="factorization JSON")
    wav.add_argument(
        "--mode", choices=("orthonormal", "literal"), default="orthonormal"
    )
    wav.add_argument("--out", required=True, help="output path base")
    wav.set_defaults(handler=_cmd_wavelets)

    net = sub.add_parser("wnn", help="train the toy spectral network")
    net.add_argument("matrix", help="MatrixMarket input")
    net.add_argument("factorization", help="factorization JSON")
    net.add_argument("labels", help="JSON with 'classes' and 'labeled'")
    net.add_argument("--features", choices=("ones", "identity"), default="ones")
    net.add_argument("--hidden", type=int, nargs="*", default=[])
    net.add_argument("--epochs", type=int, default=256)
    net.add_argument("--lr", type=float, default=1e-3)
    net.add_argument("--out", required=True, help="output path base")
    net.set_defaults(handler=_cmd_wnn)

    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        result = args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (MrfactError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    wall = time.perf_counter() - start
    _write_manifest(
        result["manifest"],
        args.command,
        result["parameters"],
        args.seed,
        result["inputs"],
        result["outputs"],
        wall,
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
