"""Spectral convolution network over a fixed wavelet basis.

Each layer filters every input channel in the wavelet domain (analysis,
per-coefficient scaling, synthesis), sums the filtered channels per
output feature, and rectifies; the top layer feeds a row softmax
instead.  Only the diagonal filters are learned, the basis stays
frozen.  Gradients are worked out by hand and the training loop is a
plain full-batch Adam, which keeps the whole thing dependency-free and
bitwise reproducible.
"""

import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from mrfact.errors import (
    DimensionError,
    InvariantError,
    SchemaError,
    TrainingDivergenceError,
)

_MODEL_TAG = "mrfact-wnn"
_MODEL_VERSION = 1
_PROB_FLOOR = 1e-12


class WnnLayer:
    """One spectral convolution: filters[i, j] scales channel i's
    wavelet coefficients on their way into output feature j."""

    __slots__ = ("filters",)

    def __init__(self, filters):
        filters = np.array(filters, dtype=np.float64, order="C")
        if filters.ndim != 3:
            raise DimensionError(
                f"filters must be (in, out, n), got shape {filters.shape}"
            )
        if not np.isfinite(filters).all():
            raise InvariantError("filters must be finite")
        filters.flags.writeable = False
        self.filters = filters

    @property
    def in_features(self):
        return self.filters.shape[0]

    @property
    def out_features(self):
        return self.filters.shape[1]

    def __repr__(self):
        i, j, n = self.filters.shape
        return f"WnnLayer({i}->{j}, n={n})"


class WnnModel:
    __slots__ = ("basis", "layers")

    def __init__(self, basis, layers):
        if basis.mode != "orthonormal":
            raise InvariantError("model needs an orthonormal basis")
        layers = tuple(layers)
        if not layers:
            raise InvariantError("model needs at least one layer")
        width = layers[0].in_features
        for t, layer in enumerate(layers):
            if layer.filters.shape[2] != basis.n:
                raise DimensionError(
                    f"layer {t} filters cover {layer.filters.shape[2]} "
                    f"coefficients, basis has {basis.n}"
                )
            if layer.in_features != width:
                raise DimensionError(
                    f"layer {t} expects {layer.in_features} channels, "
                    f"gets {width}"
                )
            width = layer.out_features
        if layers[-1].out_features < 2:
            raise InvariantError("top layer must output at least two classes")
        self.basis = basis
        self.layers = layers

    @property
    def classes(self):
        return self.layers[-1].out_features

    def __repr__(self):
        dims = [self.layers[0].in_features] + [l.out_features for l in self.layers]
        return f"WnnModel(dims={dims}, n={self.basis.n})"


def init_model(basis, dims, rng):
    """Near-identity spectral filters: all-ones plus a +-0.01 jitter."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise ValueError("need at least input and class dimensions")
    layers = []
    for f_in, f_out in zip(dims, dims[1:]):
        noise = rng.uniform(-0.01, 0.01, size=(f_in, f_out, basis.n))
        layers.append(WnnLayer(np.ones((f_in, f_out, basis.n)) + noise))
    return WnnModel(basis, layers)


# ----------------------------------------------------------------- forward


def _check_features(n, f_in, width, what):
    f_in = np.asarray(f_in, dtype=np.float64)
    if f_in.ndim != 2 or f_in.shape[0] != n:
        raise DimensionError(f"{what} must be {n} x features, got {f_in.shape}")
    if width is not None and f_in.shape[1] != width:
        raise DimensionError(
            f"{what} has {f_in.shape[1]} channels, expected {width}"
        )
    if not np.isfinite(f_in).all():
        raise InvariantError(f"{what} must be finite")
    return f_in


def _layer_apply(rows, filters, f_in):
    """coeffs -> filtered sum per output feature -> back to node domain."""
    # overflow surfaces as a non-finite loss and a typed training error,
    # so the intermediate products may run hot without warning spam
    with np.errstate(over="ignore", invalid="ignore"):
        coeffs = rows @ f_in
        mixed = np.einsum("ijn,ni->nj", filters, coeffs)
        return coeffs, rows.T @ mixed


def layer_forward(layer, basis, f_in, activate=True):
    """One spectral convolution; activate=False leaves the raw output."""
    if layer.filters.shape[2] != basis.n:
        raise DimensionError(
            f"filters cover {layer.filters.shape[2]} coefficients, "
            f"basis has {basis.n}"
        )
    f_in = _check_features(basis.n, f_in, layer.in_features, "layer input")
    _, pre = _layer_apply(basis.rows, layer.filters, f_in)
    return np.maximum(pre, 0.0) if activate else pre


def _softmax_rows(pre):
    with np.errstate(invalid="ignore", over="ignore"):
        shifted = pre - pre.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)


def _forward_cached(rows, filter_arrays, f0):
    """All per-layer intermediates plus the softmax output."""
    coeffs, pres = [], []
    x = f0
    for t, filters in enumerate(filter_arrays):
        c, pre = _layer_apply(rows, filters, x)
        coeffs.append(c)
        pres.append(pre)
        x = np.maximum(pre, 0.0) if t + 1 < len(filter_arrays) else pre
    return coeffs, pres, _softmax_rows(x)


def model_forward(model, f0):
    """Class probabilities per node; rows sum to one."""
    f0 = _check_features(model.basis.n, f0, model.layers[0].in_features, "input")
    _, _, probs = _forward_cached(
        model.basis.rows, [l.filters for l in model.layers], f0
    )
    return probs


# -------------------------------------------------------------------- loss


def _check_labels(out, labels, labeled_set):
    out = np.asarray(out, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if out.ndim != 2:
        raise DimensionError(f"predictions must be a matrix, got {out.shape}")
    if labels.shape != out.shape:
        raise DimensionError(
            f"labels shape {labels.shape} does not match predictions {out.shape}"
        )
    if labeled_set.universe != out.shape[0]:
        raise DimensionError(
            f"labeled set ranges over {labeled_set.universe} nodes, "
            f"predictions cover {out.shape[0]}"
        )
    if len(labeled_set) == 0:
        raise InvariantError("at least one labeled node is required")
    sel = labeled_set.as_array()
    block = labels[sel]
    if not (
        np.all((block == 0.0) | (block == 1.0))
        and np.array_equal(block.sum(axis=1), np.ones(len(sel)))
    ):
        raise InvariantError("labeled rows must be one-hot")
    return out, labels, sel


def loss(model_out, labels, labeled_set):
    """Cross entropy over the labeled nodes, log floored at 1e-12."""
    out, labels, sel = _check_labels(model_out, labels, labeled_set)
    if not np.isfinite(out).all():
        raise InvariantError("predictions must be finite")
    picked = np.sum(out[sel] * labels[sel], axis=1)
    return float(-np.sum(np.log(np.maximum(picked, _PROB_FLOOR))))


# ----------------------------------------------------------------- backward


def _backward_arrays(rows, filter_arrays, f0, labels, sel, coeffs, pres, probs):
    n = rows.shape[0]
    d_pre = probs - labels
    mask = np.zeros(n, dtype=bool)
    mask[sel] = True
    # nodes whose true-class probability fell under the clip contribute
    # a constant loss term, hence no gradient
    alive = np.sum(probs * labels, axis=1) >= _PROB_FLOOR
    d_pre = np.where((mask & alive)[:, None], d_pre, 0.0)

    grads = [None] * len(filter_arrays)
    for t in range(len(filter_arrays) - 1, -1, -1):
        d_mixed = rows @ d_pre
        grads[t] = np.einsum("ni,nj->ijn", coeffs[t], d_mixed)
        if t > 0:
            d_coeffs = np.einsum("ijn,nj->ni", filter_arrays[t], d_mixed)
            d_x = rows.T @ d_coeffs
            d_pre = np.where(pres[t - 1] > 0.0, d_x, 0.0)
    return grads


def backward(model, f0, labels, labeled_set):
    """Loss gradient for every filter entry, by hand through the stack."""
    f0 = _check_features(model.basis.n, f0, model.layers[0].in_features, "input")
    rows = model.basis.rows
    filter_arrays = [l.filters for l in model.layers]
    coeffs, pres, probs = _forward_cached(rows, filter_arrays, f0)
    _, labels, sel = _check_labels(probs, labels, labeled_set)
    return _backward_arrays(
        rows, filter_arrays, f0, labels, sel, coeffs, pres, probs
    )


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class DataSplit:
    train: "IndexSet"
    test: "IndexSet"

    def __post_init__(self):
        if self.train.universe != self.test.universe:
            raise DimensionError("train and test sets range over different sizes")
        overlap = set(self.train.indices) & set(self.test.indices)
        if overlap:
            raise InvariantError(f"train and test sets overlap: {sorted(overlap)}")


def _accuracy(probs, labels, test_sel):
    want = np.argmax(labels[test_sel], axis=1)
    got = np.argmax(probs[test_sel], axis=1)
    return float(np.mean(want == got))


def train(model, f0, labels, split, epochs=256, lr=1e-3):
    """Full-batch Adam on the filters; basis and structure stay fixed.

    Every epoch logs (epoch, loss, test accuracy) for the model state
    entering that epoch, then applies one update.  A non-finite loss or
    filter aborts with a divergence error.
    """
    epochs = int(epochs)
    lr = float(lr)
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if lr < 0.0 or not math.isfinite(lr):
        raise ValueError(f"learning rate must be finite and >= 0, got {lr}")
    f0 = _check_features(model.basis.n, f0, model.layers[0].in_features, "input")
    rows = model.basis.rows
    working = [l.filters.copy() for l in model.layers]
    m_state = [np.zeros_like(w) for w in working]
    v_state = [np.zeros_like(w) for w in working]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    test_sel = split.test.as_array()

    trace = []
    for epoch in range(1, epochs + 1):
        coeffs, pres, probs = _forward_cached(rows, working, f0)
        _, labels_arr, sel = _check_labels(probs, labels, split.train)
        picked = np.sum(probs[sel] * labels_arr[sel], axis=1)
        with np.errstate(invalid="ignore"):
            value = float(-np.sum(np.log(np.maximum(picked, _PROB_FLOOR))))
        if not math.isfinite(value):
            raise TrainingDivergenceError(
                f"loss became non-finite at epoch {epoch}"
            )
        trace.append((epoch, value, _accuracy(probs, labels_arr, test_sel)))

        grads = _backward_arrays(
            rows, working, f0, labels_arr, sel, coeffs, pres, probs
        )
        for w, m, v, g in zip(working, m_state, v_state, grads):
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            m_hat = m / (1.0 - beta1**epoch)
            v_hat = v / (1.0 - beta2**epoch)
            with np.errstate(over="ignore"):
                w -= lr * m_hat / (np.sqrt(v_hat) + eps)
            if not np.isfinite(w).all():
                raise TrainingDivergenceError(
                    f"filters became non-finite at epoch {epoch}"
                )
    out = WnnModel(model.basis, [WnnLayer(w) for w in working])
    return out, tuple(trace)


# -------------------------------------------------------------- persistence


def write_metrics_csv(rows, path):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as handle:
            handle.write("epoch,loss,accuracy\n")
            for epoch, value, accuracy in rows:
                handle.write(f"{int(epoch)},{value:.17g},{accuracy:.17g}\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model, path):
    doc = {
        "format": _MODEL_TAG,
        "version": _MODEL_VERSION,
        "n": model.basis.n,
        "filters": [
            [[list(map(float, diag)) for diag in row] for row in layer.filters]
            for layer in model.layers
        ],
    }
    path = os.fspath(path)
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


def load_model(path, basis):
    """Weights back from JSON, assembled against the supplied basis."""
    try:
        with open(path) as handle:
            doc = json.load(handle)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"not a model file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != _MODEL_TAG:
        raise SchemaError("missing or wrong format tag")
    if doc.get("version") != _MODEL_VERSION:
        raise SchemaError(f"unsupported version {doc.get('version')!r}")
    try:
        stored_n = int(doc["n"])
        arrays = [np.array(layer, dtype=np.float64) for layer in doc["filters"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed model document: {exc}") from exc
    if stored_n != basis.n:
        raise DimensionError(
            f"model was trained on {stored_n} nodes, basis has {basis.n}"
        )
    return WnnModel(basis, [WnnLayer(arr) for arr in arrays])
