"""Network description and forward inference, float and fixed-point.

Activations are channel-planar, row-major arrays shaped (c, n, m); batches
add a leading axis. Conv filter banks are (F, c_in, h, w), dense weights
(units, fan_in). Flatten is the C-order ravel of (c, n, m) and every
serialized blob depends on that order, so it is fixed here and nowhere else.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .fxp import FxpFormat

LAYER_KINDS = ("conv", "dense", "relu", "pool", "flatten", "softmax")
POOL_MODES = ("max", "avg")


class ArchitectureError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    h: int = 0
    w: int = 0
    stride: int = 1
    padding: str = "same"
    units: int = 0
    p: int = 0
    mode: str = "max"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArchitectureError("unknown layer kind %r" % (self.kind,))
        if self.kind == "conv":
            if self.filters < 1 or self.h < 1 or self.w < 1:
                raise ArchitectureError("conv needs filters, h, w >= 1")
            if self.stride < 1:
                raise ArchitectureError("conv stride must be >= 1")
            if self.padding not in K.PAD_MODES:
                raise ArchitectureError("conv padding must be one of %s" % (K.PAD_MODES,))
        elif self.kind == "dense":
            if self.units < 1:
                raise ArchitectureError("dense needs units >= 1")
        elif self.kind == "pool":
            if self.p < 1:
                raise ArchitectureError("pool needs p >= 1")
            if self.mode not in POOL_MODES:
                raise ArchitectureError("pool mode must be one of %s" % (POOL_MODES,))

    def describe(self):
        if self.kind == "conv":
            s = "conv %dx%dx%d" % (self.filters, self.h, self.w)
            if self.stride != 1:
                s += " s%d" % self.stride
            return s + " " + self.padding
        if self.kind == "dense":
            return "dense %d" % self.units
        if self.kind == "pool":
            return "pool %d %s" % (self.p, self.mode)
        return self.kind


def conv(filters, h, w=None, stride=1, padding="same"):
    return LayerSpec("conv", filters=filters, h=h, w=h if w is None else w,
                     stride=stride, padding=padding)


def dense(units):
    return LayerSpec("dense", units=units)


def relu():
    return LayerSpec("relu")


def pool(p, mode="max"):
    return LayerSpec("pool", p=p, mode=mode)


def flatten():
    return LayerSpec("flatten")


def softmax():
    return LayerSpec("softmax")


def validate_architecture(layers):
    """Check the layer sequence against the supported pattern.

    Accepted shape: [[conv relu]^N pool^{0..P}]^M [dense relu]^K dense,
    with M >= 1, uniform N across blocks, and an optional explicit flatten
    just before the first dense. Returns (N, M, K, P); raises
    ArchitectureError naming the first offending position.
    """
    kinds = [l.kind if isinstance(l, LayerSpec) else str(l) for l in layers]
    i = 0

    def fail(pos, msg):
        found = kinds[pos] if pos < len(kinds) else "end of sequence"
        raise ArchitectureError("position %d: %s, found %s" % (pos, msg, found))

    blocks = []
    while i < len(kinds) and kinds[i] == "conv":
        n_units = 0
        while i < len(kinds) and kinds[i] == "conv":
            if i + 1 >= len(kinds) or kinds[i + 1] != "relu":
                fail(i + 1, "expected relu after conv")
            n_units += 1
            i += 2
        pools = 0
        while i < len(kinds) and kinds[i] == "pool":
            pools += 1
            i += 1
        blocks.append((n_units, pools))
    if not blocks:
        fail(0, "expected conv as the first layer")
    n0 = blocks[0][0]
    for bi, (nb, _) in enumerate(blocks):
        if nb != n0:
            # locate the conv that starts the offending block
            pos = 0
            for j in range(bi):
                pos += 2 * blocks[j][0] + blocks[j][1]
            raise ArchitectureError(
                "position %d: block %d has %d conv-relu pairs, expected %d "
                "(uniform across blocks)" % (pos, bi, nb, n0))
    if i < len(kinds) and kinds[i] == "flatten":
        i += 1
    k_units = 0
    while i + 1 < len(kinds) and kinds[i] == "dense" and kinds[i + 1] == "relu":
        k_units += 1
        i += 2
    if i >= len(kinds) or kinds[i] != "dense":
        fail(i, "expected a final dense layer")
    i += 1
    if i != len(kinds):
        fail(i, "expected end of sequence after the final dense layer")
    return n0, len(blocks), k_units, max(p for _, p in blocks)


def normalize_layers(layers):
    """Insert an explicit flatten before the first dense if absent."""
    out = []
    seen_flatten = False
    for l in layers:
        if l.kind == "flatten":
            seen_flatten = True
        if l.kind == "dense" and not seen_flatten:
            out.append(flatten())
            seen_flatten = True
        out.append(l)
    return tuple(out)


def propagate_shapes(input_shape, layers):
    """Per-layer output shapes. Conv/pool shapes are (c, n, m); dense (k,)."""
    shape = tuple(int(v) for v in input_shape)
    shapes = []
    for idx, l in enumerate(layers):
        if l.kind == "conv":
            if len(shape) != 3:
                raise ShapeError("layer %d (conv): expected (c, n, m) input, got %s"
                                 % (idx, (shape,)))
            c, n, m = shape
            n2, m2 = K.conv_out_dims(n, m, l.h, l.w, l.stride, l.padding)
            shape = (l.filters, n2, m2)
        elif l.kind == "pool":
            if len(shape) != 3:
                raise ShapeError("layer %d (pool): expected (c, n, m) input, got %s"
                                 % (idx, (shape,)))
            c, n, m = shape
            n2, m2 = K.pool_out_dims(n, m, l.p)
            shape = (c, n2, m2)
        elif l.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif l.kind == "dense":
            if len(shape) != 1:
                raise ShapeError("layer %d (dense): expected flat input, got %s"
                                 % (idx, (shape,)))
            shape = (l.units,)
        elif l.kind in ("relu", "softmax"):
            pass
        shapes.append(shape)
    return shapes


@dataclass(frozen=True)
class ModelSpec:
    """A validated network: input shape (c, n, m), layers, class labels.

    counts is (N, M, K, P) when the layer sequence matches the conv-net
    pattern, None for free-form models built with check_grammar=False.
    """
    input_shape: tuple
    layers: tuple
    labels: tuple
    counts: tuple = None

    @property
    def n_classes(self):
        return len(self.labels)

    def shapes(self):
        return propagate_shapes(self.input_shape, self.layers)

    def param_layers(self):
        return [i for i, l in enumerate(self.layers) if l.kind in ("conv", "dense")]


def build_model(input_shape, layers, labels, check_grammar=True):
    layers = tuple(layers)
    counts = None
    if check_grammar:
        counts = validate_architecture(layers)
        if len(input_shape) != 3 or input_shape[0] != 2:
            raise ArchitectureError(
                "expected a 2-channel (I/Q) input shape (2, n, m), got %s"
                % (tuple(input_shape),))
    layers = normalize_layers(layers)
    model = ModelSpec(tuple(int(v) for v in input_shape), layers, tuple(labels), counts)
    shapes = model.shapes()
    out = shapes[-1]
    if len(out) != 1 or out[0] != len(model.labels):
        raise ShapeError("final layer emits %s scores but there are %d labels"
                         % (out, len(model.labels)))
    return model


@dataclass
class WeightSet:
    """Per-layer parameters keyed by layer index: {"W": arr, "b": arr}.

    fmt is None for float weights; an FxpFormat marks int32 raw arrays in
    that format.
    """
    params: dict
    fmt: FxpFormat = None

    def copy(self):
        return WeightSet({i: {k: v.copy() for k, v in d.items()}
                          for i, d in self.params.items()}, self.fmt)


def weight_shapes(model):
    """Expected {layer_index: {"W": shape, "b": shape}} for a model."""
    shapes = model.shapes()
    out = {}
    cur = model.input_shape
    for idx, l in enumerate(model.layers):
        if l.kind == "conv":
            out[idx] = {"W": (l.filters, cur[0], l.h, l.w), "b": (l.filters,)}
        elif l.kind == "dense":
            out[idx] = {"W": (l.units, cur[0]), "b": (l.units,)}
        cur = shapes[idx]
    return out


def check_weights(model, weights):
    want = weight_shapes(model)
    for idx, shapes in want.items():
        if idx not in weights.params:
            raise ShapeError("layer %d (%s): missing parameters"
                             % (idx, model.layers[idx].kind))
        for name, shp in shapes.items():
            got = tuple(weights.params[idx][name].shape)
            if got != shp:
                raise ShapeError("layer %d (%s): %s expected shape %s, got %s"
                                 % (idx, model.layers[idx].kind, name, shp, got))
    return want


def _pool_pad(x, p, fill=0):
    n, m = x.shape[-2], x.shape[-1]
    pn = (-n) % p
    pm = (-m) % p
    if pn == 0 and pm == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(0, pn), (0, pm)]
    return np.pad(x, pad, constant_values=fill)


def pool_forward_batch(x, p, mode):
    """Non-overlapping p x p reduce; trailing edge zero-padded to a multiple."""
    if p == 1:
        return x.copy()
    xp = _pool_pad(x, p)
    B, c, n, m = xp.shape
    win = xp.reshape(B, c, n // p, p, m // p, p)
    if mode == "max":
        return win.max(axis=(3, 5))
    return win.mean(axis=(3, 5), dtype=x.dtype)


def _pool_backtrack(x, p, dy, mode):
    """Gradient of pool_forward_batch with respect to x."""
    B, c, n, m = x.shape
    if p == 1:
        return dy.copy()
    xp = _pool_pad(x, p)
    n2, m2 = xp.shape[2] // p, xp.shape[3] // p
    win = xp.reshape(B, c, n2, p, m2, p).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, c, n2, m2, p * p)
    dxp = np.zeros_like(win)
    if mode == "max":
        idx = win.argmax(axis=-1)  # first max wins on ties
        np.put_along_axis(dxp, idx[..., None], dy[..., None], axis=-1)
    else:
        dxp[:] = (dy / (p * p))[..., None]
    dxp = dxp.reshape(B, c, n2, m2, p, p).transpose(0, 1, 2, 4, 3, 5)
    dxp = dxp.reshape(B, c, n2 * p, m2 * p)
    return np.ascontiguousarray(dxp[:, :, :n, :m])


def forward_batch(model, weights, xb, want_cache=False):
    """Run the float network over a batch (B, c, n, m) -> (B, classes).

    With want_cache=True also returns the list of layer inputs, for
    backpropagation.
    """
    x = np.ascontiguousarray(xb)
    cache = []
    for idx, l in enumerate(model.layers):
        if want_cache:
            cache.append(x)
        if l.kind == "conv":
            p = weights.params[idx]
            if x.shape[1] != p["W"].shape[1]:
                raise ShapeError("layer %d (conv): expected %d input channels, got %d"
                                 % (idx, p["W"].shape[1], x.shape[1]))
            x = K.conv2d_fwd(x, p["W"], p["b"], l.stride, l.padding)
        elif l.kind == "relu":
            x = np.maximum(x, 0)
        elif l.kind == "pool":
            x = pool_forward_batch(x, l.p, l.mode)
        elif l.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif l.kind == "dense":
            p = weights.params[idx]
            if x.shape[1] != p["W"].shape[1]:
                raise ShapeError("layer %d (dense): expected fan_in %d, got %d"
                                 % (idx, p["W"].shape[1], x.shape[1]))
            x = x @ p["W"].T + p["b"]
        elif l.kind == "softmax":
            z = x - x.max(axis=1, keepdims=True)
            e = np.exp(z)
            x = e / e.sum(axis=1, keepdims=True)
    if want_cache:
        return x, cache
    return x


def infer_batch(model, weights, xb):
    scores = forward_batch(model, weights, xb)
    return scores, scores.argmax(axis=1)


def infer(model, weights, x):
    """Scores and argmax label index for one (c, n, m) frame.

    Ties go to the lowest class index.
    """
    scores, labels = infer_batch(model, weights, np.asarray(x)[None])
    return scores[0], int(labels[0])


def _rne_div_array(v, d):
    # round-half-even integer division on int64 arrays, d > 0
    q = v // d
    r = v - q * d
    up = (2 * r > d) | ((2 * r == d) & (q % 2 != 0))
    return q + up


def pool_forward_fxp(xq, p, mode, fmt):
    if p == 1:
        return xq.copy()
    xp = _pool_pad(xq, p)
    B, c, n, m = xp.shape
    win = xp.reshape(B, c, n // p, p, m // p, p)
    if mode == "max":
        return win.max(axis=(3, 5))
    s = win.astype(np.int64).sum(axis=(3, 5))
    from .fxp import saturate_array
    return saturate_array(_rne_div_array(s, p * p), fmt)


def forward_fixed_batch(model, weights, xq):
    """Bit-exact fixed-point forward pass over int32 raw frames."""
    if weights.fmt is None:
        raise ValueError("weights are float; quantize them first")
    fmt = weights.fmt
    x = np.ascontiguousarray(xq, dtype=np.int32)
    for idx, l in enumerate(model.layers):
        if l.kind == "conv":
            p = weights.params[idx]
            x = K.conv2d_fwd_fxp(x, p["W"], p["b"], l.stride, l.padding, fmt)
        elif l.kind == "relu":
            x = np.maximum(x, 0)
        elif l.kind == "pool":
            x = pool_forward_fxp(x, l.p, l.mode, fmt)
        elif l.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif l.kind == "dense":
            p = weights.params[idx]
            x = K.dense_fwd_fxp(x, p["W"], p["b"], fmt)
        elif l.kind == "softmax":
            raise ValueError("softmax has no fixed-point form; use the linear head")
    return x


def infer_fixed_batch(model, weights, xq):
    scores = forward_fixed_batch(model, weights, xq)
    return scores, scores.argmax(axis=1)


def infer_fixed(model, weights, xq):
    """Raw int scores and argmax for one fixed-point frame."""
    scores, labels = infer_fixed_batch(model, weights, np.asarray(xq)[None])
    return scores[0], int(labels[0])


def conv_forward(x, layer, W, b=None):
    """Single-frame (c, n, m) convolution, float."""
    return K.conv2d_fwd(np.asarray(x)[None], W, b, layer.stride, layer.padding)[0]


def dense_forward(r, W, b=None, activation="linear"):
    r = np.asarray(r, dtype=np.asarray(W).dtype)
    y = np.asarray(W) @ r + (0 if b is None else np.asarray(b))
    if activation == "relu":
        y = np.maximum(y, 0)
    elif activation != "linear":
        raise ValueError("activation must be linear or relu")
    return y


def relu_forward(x):
    return np.maximum(np.asarray(x), 0)


def pool_forward(x, layer):
    """Single-frame (c, n, m) pooling."""
    return pool_forward_batch(np.asarray(x)[None], layer.p, layer.mode)[0]
