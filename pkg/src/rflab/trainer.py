"""Training, evaluation, and post-training quantization.

Everything is seeded and single-threaded: weight init draws from
default_rng([seed, 0]), the epoch-e shuffle from default_rng([seed, 1, e]),
and stratified splits from default_rng([split_seed, 5, class]). Training runs
in float32; gradient checks belong in float64 (see tests).
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import nn
from .fxp import dequantize_array, quantize_array

EVAL_CHUNK = 512


class FitDiverged(RuntimeError):
    pass


@dataclass
class Dataset:
    """Labeled frames: x (N, c, n, m) float32, y (N,) int, plus a class table."""
    x: np.ndarray
    y: np.ndarray
    labels: tuple
    split_seed: int = 0

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        self.labels = tuple(self.labels)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x and y disagree on sample count")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= len(self.labels)):
            raise ValueError("label index outside the class table")

    def __len__(self):
        return self.x.shape[0]

    def class_counts(self):
        return np.bincount(self.y, minlength=len(self.labels))

    def split(self, test_frac=2.0 / 7.0):
        """Deterministic stratified split -> (train_idx, test_idx), disjoint
        and exhaustive."""
        train, test = [], []
        for c in range(len(self.labels)):
            ids = np.flatnonzero(self.y == c)
            rng = np.random.default_rng([self.split_seed, 5, c])
            perm = rng.permutation(ids)
            n_test = int(round(len(ids) * test_frac))
            test.append(perm[:n_test])
            train.append(perm[n_test:])
        return (np.sort(np.concatenate(train)).astype(np.int64),
                np.sort(np.concatenate(test)).astype(np.int64))

    def subset(self, class_names):
        """New dataset with only the named classes, relabeled in given order."""
        names = tuple(class_names)
        missing = [nm for nm in names if nm not in self.labels]
        if missing:
            raise ValueError("unknown classes: %s" % (missing,))
        old_idx = {nm: self.labels.index(nm) for nm in names}
        keep = np.isin(self.y, [old_idx[nm] for nm in names])
        remap = np.full(len(self.labels), -1, dtype=np.int64)
        for new, nm in enumerate(names):
            remap[old_idx[nm]] = new
        return Dataset(self.x[keep], remap[self.y[keep]], names, self.split_seed)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or self.lr <= 0:
            raise ValueError("need epochs >= 1, batch >= 1, lr > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be sgd or adam")


@dataclass
class Metrics:
    accuracy: float
    confusion: np.ndarray
    per_class: np.ndarray
    labels: tuple

    def as_dict(self):
        return {"accuracy": self.accuracy,
                "labels": list(self.labels),
                "confusion": self.confusion.tolist(),
                "per_class": [float(v) for v in self.per_class]}


def init_weights(model, seed=0):
    """Uniform +-sqrt(6/fan_in) weights, zero biases, float32."""
    rng = np.random.default_rng([seed, 0])
    params = {}
    for idx, shapes in nn.weight_shapes(model).items():
        w_shape = shapes["W"]
        fan_in = int(np.prod(w_shape[1:]))
        lim = np.sqrt(6.0 / fan_in)
        params[idx] = {
            "W": rng.uniform(-lim, lim, size=w_shape).astype(np.float32),
            "b": np.zeros(shapes["b"], dtype=np.float32),
        }
    return nn.WeightSet(params)


def softmax_xent(scores, y):
    """Mean cross-entropy and d(loss)/d(scores) for integer labels."""
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = scores.shape[0]
    loss = float(-np.log(np.maximum(p[np.arange(n), y], 1e-30)).mean())
    dz = p.copy()
    dz[np.arange(n), y] -= 1.0
    return loss, (dz / n).astype(scores.dtype)


def loss_and_grads(model, weights, xb, yb):
    """Mean softmax cross-entropy plus exact gradients for every W and b."""
    if xb.shape[0] == 0:
        raise ValueError("empty batch")
    scores, cache = nn.forward_batch(model, weights, xb, want_cache=True)
    loss, dz = softmax_xent(scores, yb)
    grads = {}
    for idx in range(len(model.layers) - 1, -1, -1):
        l = model.layers[idx]
        x = cache[idx]
        if l.kind == "dense":
            p = weights.params[idx]
            grads[idx] = {"W": dz.T @ x, "b": dz.sum(axis=0)}
            dz = dz @ p["W"]
        elif l.kind == "conv":
            p = weights.params[idx]
            dz, dw, db = K.conv2d_bwd(x, p["W"], dz, l.stride, l.padding)
            grads[idx] = {"W": dw, "b": db}
        elif l.kind == "relu":
            dz = dz * (x > 0)
        elif l.kind == "pool":
            dz = nn._pool_backtrack(x, l.p, dz, l.mode)
        elif l.kind == "flatten":
            dz = dz.reshape(x.shape)
        elif l.kind == "softmax":
            raise ValueError("train against a linear head; the loss applies softmax")
    return loss, grads


class _Adam:
    def __init__(self, params, lr):
        self.lr = lr
        self.t = 0
        self.m = {i: {k: np.zeros_like(v) for k, v in d.items()}
                  for i, d in params.items()}
        self.v = {i: {k: np.zeros_like(v) for k, v in d.items()}
                  for i, d in params.items()}

    def step(self, params, grads):
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, d in grads.items():
            for k, g in d.items():
                g = g.astype(np.float32)
                m = self.m[i][k]
                v = self.v[i][k]
                m += (1 - b1) * (g - m)
                v += (1 - b2) * (g * g - v)
                params[i][k] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class _Sgd:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for i, d in grads.items():
            for k, g in d.items():
                params[i][k] -= self.lr * g.astype(np.float32)


def fit(model, config, dataset, test_frac=2.0 / 7.0, log_fn=None):
    """Mini-batch training; returns (weights, per-epoch log).

    The log is a list of dicts (epoch, loss, train_acc, test_acc); log_fn, if
    given, receives each finished record. Loss going non-finite aborts with
    FitDiverged.
    """
    if len(dataset.labels) < 2:
        raise ValueError("need at least 2 classes")
    train_idx, test_idx = dataset.split(test_frac)
    weights = init_weights(model, config.seed)
    opt = (_Adam if config.optimizer == "adam" else _Sgd)(weights.params, config.lr)
    log = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, 1, epoch])
        order = train_idx[rng.permutation(len(train_idx))]
        losses = []
        hits = 0
        for start in range(0, len(order), config.batch):
            sel = order[start:start + config.batch]
            xb = dataset.x[sel]
            yb = dataset.y[sel]
            loss, grads = loss_and_grads(model, weights, xb, yb)
            if not np.isfinite(loss):
                raise FitDiverged("loss became %r at epoch %d batch %d"
                                  % (loss, epoch, start // config.batch))
            scores, _ = nn.infer_batch(model, weights, xb)
            hits += int((scores.argmax(axis=1) == yb).sum())
            opt.step(weights.params, grads)
            losses.append(loss)
        test_acc = evaluate(model, weights, dataset.x[test_idx],
                            dataset.y[test_idx]).accuracy if len(test_idx) else float("nan")
        rec = {"epoch": epoch,
               "loss": float(np.mean(losses)),
               "train_acc": hits / max(1, len(order)),
               "test_acc": test_acc}
        log.append(rec)
        if log_fn is not None:
            log_fn(rec)
    return weights, log


def _predict(model, weights, x, fmt=None):
    preds = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], EVAL_CHUNK):
        xb = x[start:start + EVAL_CHUNK]
        if fmt is None:
            _, lab = nn.infer_batch(model, weights, xb)
        else:
            _, lab = nn.infer_fixed_batch(model, weights, quantize_array(xb, fmt))
        preds[start:start + EVAL_CHUNK] = lab
    return preds


def evaluate(model, weights, x, y, fmt=None):
    """Accuracy, confusion matrix (rows = truth), per-class accuracy.

    Float weights run the float engine. Fixed weights (or float weights plus
    an explicit fmt, which quantizes a copy first) run the bit-exact engine
    on quantized inputs.
    """
    if x.shape[0] == 0:
        raise ValueError("empty evaluation split")
    if weights.fmt is not None:
        preds = _predict(model, weights, x, weights.fmt)
    elif fmt is not None:
        wq, _ = quantize_weights(weights, fmt)
        preds = _predict(model, wq, x, fmt)
    else:
        preds = _predict(model, weights, x)
    n_cls = len(model.labels)
    conf = np.zeros((n_cls, n_cls), dtype=np.int64)
    np.add.at(conf, (y, preds), 1)
    acc = float(np.trace(conf)) / x.shape[0]
    row = conf.sum(axis=1)
    per_class = np.divide(np.diag(conf), row, out=np.zeros(n_cls), where=row > 0)
    return Metrics(acc, conf, per_class, model.labels)


def quantize_weights(weights, fmt):
    """Quantize every parameter tensor; returns (fixed WeightSet, report).

    The report lists per layer the max absolute quantization error and how
    many values saturated; saturating layers also raise a warning.
    """
    if weights.fmt is not None:
        raise ValueError("weights are already fixed-point")
    params = {}
    report = []
    clipped_layers = []
    for idx in sorted(weights.params):
        entry = {"layer": idx, "max_err": 0.0, "saturated": 0}
        params[idx] = {}
        for name, arr in weights.params[idx].items():
            q = quantize_array(arr, fmt)
            err = float(np.max(np.abs(dequantize_array(q, fmt) - arr.astype(np.float64)),
                               initial=0.0))
            sat = int(((arr < fmt.value_min) | (arr > fmt.value_max)).sum())
            params[idx][name] = q
            entry["max_err"] = max(entry["max_err"], err)
            entry["saturated"] += sat
        if entry["saturated"]:
            clipped_layers.append(idx)
        report.append(entry)
    if clipped_layers:
        warnings.warn("format %s saturates weights in layers %s"
                      % (fmt, clipped_layers), stacklevel=2)
    return nn.WeightSet(params, fmt), report


def rescale_for_fixed(model, weights, frames, fmt, headroom=0.95):
    """Rescale float weights so the network's activations fit a fixed format.

    ReLU and pooling commute with multiplication by a positive constant, so
    giving every parameter layer a positive output scale only re-expresses
    the same network in different units: the float argmax is unchanged.
    Without this, a trained network's intermediate activations usually
    overflow a narrow format's range and saturate, even when the weights
    themselves fit.

    Pre-activation ranges are measured on the calibration frames; each layer
    then gets the largest output scale that keeps its scaled weights, biases,
    and observed activations inside headroom * fmt.value_max. Returns
    (rescaled float WeightSet, per-layer report).
    """
    if weights.fmt is not None:
        raise ValueError("weights are already fixed-point")
    if not 0.0 < headroom <= 1.0:
        raise ValueError("headroom must be in (0, 1], got %r" % (headroom,))
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise ValueError("calibration frames must be a nonempty (B, c, n, m) array")
    scores, cache = nn.forward_batch(model, weights, frames, want_cache=True)
    limit = headroom * fmt.value_max
    last = len(model.layers) - 1
    params = {}
    report = []
    prev = 1.0  # inputs are max-abs normalized, so the input scale is 1
    for idx in model.param_layers():
        out = scores if idx == last else cache[idx + 1]
        act_max = float(np.max(np.abs(out), initial=0.0))
        w = weights.params[idx]["W"]
        b = weights.params[idx]["b"]
        w_max = float(np.max(np.abs(w), initial=0.0))
        b_max = float(np.max(np.abs(b), initial=0.0))
        caps = [prev * limit / w_max if w_max else np.inf,
                limit / b_max if b_max else np.inf,
                limit / act_max if act_max else np.inf]
        scale = min(caps)
        if not np.isfinite(scale):
            scale = prev  # all-zero layer: keep the incoming units
        params[idx] = {"W": (w * (scale / prev)).astype(np.float32),
                       "b": (b * scale).astype(np.float32)}
        report.append({"layer": idx, "out_scale": scale,
                       "act_max": act_max, "fitted_max": act_max * scale})
        prev = scale
    return nn.WeightSet(params), report
