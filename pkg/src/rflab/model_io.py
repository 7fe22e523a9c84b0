"""Bit-exact model, weight, and dataset files.

Three independent formats, all little-endian with fixed-width fields:

Manifest (.json): human-diffable JSON holding the architecture, class table,
optional fixed-point format, and free-form provenance. Its identity is the
SHA-256 of the canonical encoding (sorted keys, no whitespace); weight blobs
record that hash so a blob can never be loaded against the wrong manifest.

Weight blob (.rflw):
    magic "RFLW" | version u16 | manifest sha256 (32 bytes) | record count u16
    record: layer u16 | param u8 (0=W 1=b) | elem u8 (0=float32 1=fixed)
            | total_bits u8 | frac_bits u8 | ndim u8 | dims u32 x ndim
            | payload (row-major; float32 words, or signed fixed-point words
              of 1/2/4 bytes)
    Fixed-point example: a 1x1 conv filter holding 1.0 in Q2.14 stores the
    single word 0x4000 (bytes 00 40).

Dataset (.rfds):
    magic "RFDS" | version u16 | frame side u16 | class count u16
    | per class: name length u8 + utf-8 name
    | records: label u8 + side*side*2 float32 (I plane then Q plane)
    Record count is implied by file length, which must divide evenly.
"""

import hashlib
import json
import struct

import numpy as np

from . import nn
from .fxp import FxpFormat
from .trainer import Dataset

MODEL_FORMAT = "rflab-model"
MODEL_VERSION = 1
BLOB_MAGIC = b"RFLW"
BLOB_VERSION = 1
DATA_MAGIC = b"RFDS"
DATA_VERSION = 1
BRAM_BLOCK_BYTES = 2304


class FormatError(ValueError):
    """A file failed structural validation; message says where and why."""


_LAYER_FIELDS = {
    "conv": ("filters", "h", "w", "stride", "padding"),
    "dense": ("units",),
    "pool": ("p", "mode"),
    "relu": (),
    "flatten": (),
    "softmax": (),
}


def _layer_to_dict(l):
    d = {"kind": l.kind}
    for f in _LAYER_FIELDS[l.kind]:
        d[f] = getattr(l, f)
    return d


def _layer_from_dict(d):
    kind = d.get("kind")
    if kind not in _LAYER_FIELDS:
        raise FormatError("manifest layer has unknown kind %r" % (kind,))
    return nn.LayerSpec(kind, **{f: d[f] for f in _LAYER_FIELDS[kind] if f in d})


def build_manifest(model, fmt=None, provenance=None):
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "input_shape": list(model.input_shape),
        "labels": list(model.labels),
        "layers": [_layer_to_dict(l) for l in model.layers],
        "fxp": None if fmt is None else {"total_bits": fmt.total_bits,
                                         "frac_bits": fmt.frac_bits},
        "provenance": provenance or {},
    }


def manifest_hash(manifest):
    canon = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).digest()


def save_manifest(path, manifest):
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_manifest(path, check_grammar=True):
    """Parse and validate a manifest; returns (ModelSpec, manifest dict)."""
    with open(path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError("%s: not valid JSON (%s)" % (path, e)) from e
    if manifest.get("format") != MODEL_FORMAT:
        raise FormatError("%s: format is %r, expected %r"
                          % (path, manifest.get("format"), MODEL_FORMAT))
    if manifest.get("version") != MODEL_VERSION:
        raise FormatError("%s: unsupported manifest version %r"
                          % (path, manifest.get("version")))
    layers = [_layer_from_dict(d) for d in manifest["layers"]]
    drop = [l for l in layers if l.kind != "flatten"]
    model = nn.build_model(tuple(manifest["input_shape"]), drop,
                           manifest["labels"], check_grammar=check_grammar)
    return model, manifest


def manifest_format(manifest):
    fx = manifest.get("fxp")
    return None if fx is None else FxpFormat(fx["total_bits"], fx["frac_bits"])


def save_weights(path, weights, mhash):
    """Write a weight blob bound to the manifest hash."""
    records = []
    for idx in sorted(weights.params):
        for code, name in ((0, "W"), (1, "b")):
            arr = weights.params[idx][name]
            if weights.fmt is None:
                elem, tb, fb = 0, 32, 0
                payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            else:
                elem, tb, fb = 1, weights.fmt.total_bits, weights.fmt.frac_bits
                dt = "<i%d" % weights.fmt.word_bytes
                payload = np.ascontiguousarray(arr, dtype=dt).tobytes()
            head = struct.pack("<HBBBBB", idx, code, elem, tb, fb, arr.ndim)
            head += struct.pack("<%dI" % arr.ndim, *arr.shape)
            records.append(head + payload)
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<H", BLOB_VERSION))
        fh.write(mhash)
        fh.write(struct.pack("<H", len(records)))
        for r in records:
            fh.write(r)


def load_weights(path, expect_hash=None):
    """Read a weight blob; returns (WeightSet, stored manifest hash)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != BLOB_MAGIC:
        raise FormatError("%s: not a weight blob (magic %r)" % (path, data[:4]))
    if len(data) < 40:
        raise FormatError("%s: header truncated at %d bytes" % (path, len(data)))
    (version,) = struct.unpack_from("<H", data, 4)
    if version != BLOB_VERSION:
        raise FormatError("%s: unsupported blob version %d" % (path, version))
    stored = data[6:38]
    if expect_hash is not None and stored != expect_hash:
        raise FormatError("%s: blob was written for a different manifest "
                          "(hash mismatch)" % path)
    (count,) = struct.unpack_from("<H", data, 38)
    off = 40
    params = {}
    fmt = None
    saw_float = False
    for rec in range(count):
        if off + 7 > len(data):
            raise FormatError("%s: record %d header truncated" % (path, rec))
        idx, code, elem, tb, fb, ndim = struct.unpack_from("<HBBBBB", data, off)
        off += 7
        if off + 4 * ndim > len(data):
            raise FormatError("%s: record %d dims truncated" % (path, rec))
        dims = struct.unpack_from("<%dI" % ndim, data, off)
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        if elem == 0:
            nbytes = 4 * n
            saw_float = True
        elif elem == 1:
            rfmt = FxpFormat(tb, fb)
            if fmt is None:
                fmt = rfmt
            elif fmt != rfmt:
                raise FormatError("%s: record %d format %s disagrees with %s"
                                  % (path, rec, rfmt, fmt))
            nbytes = rfmt.word_bytes * n
        else:
            raise FormatError("%s: record %d has unknown element code %d"
                              % (path, rec, elem))
        if off + nbytes > len(data):
            raise FormatError("%s: record %d payload needs %d bytes, only %d "
                              "left" % (path, rec, nbytes, len(data) - off))
        raw = data[off:off + nbytes]
        off += nbytes
        if elem == 0:
            arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        else:
            arr = np.frombuffer(raw, dtype="<i%d" % rfmt.word_bytes)
            arr = arr.reshape(dims).astype(np.int32)
        name = "W" if code == 0 else "b"
        params.setdefault(idx, {})[name] = arr
    if off != len(data):
        raise FormatError("%s: %d trailing bytes after last record"
                          % (path, len(data) - off))
    if saw_float and fmt is not None:
        raise FormatError("%s: mixes float and fixed-point records" % path)
    return nn.WeightSet(params, fmt), stored


def _paths(prefix):
    prefix = str(prefix)
    if prefix.endswith(".json"):
        prefix = prefix[:-5]
    elif prefix.endswith(".rflw"):
        prefix = prefix[:-5]
    return prefix + ".json", prefix + ".rflw"


def save_model(prefix, model, weights, provenance=None):
    """Write manifest + weight blob under a shared prefix; returns the paths."""
    mpath, bpath = _paths(prefix)
    manifest = build_manifest(model, weights.fmt, provenance)
    save_manifest(mpath, manifest)
    save_weights(bpath, weights, manifest_hash(manifest))
    return mpath, bpath


def load_model(prefix, check_grammar=True):
    """Load manifest + blob; returns (ModelSpec, WeightSet, manifest dict).

    The blob must carry the manifest's hash, and the weights must match the
    model's shapes.
    """
    mpath, bpath = _paths(prefix)
    model, manifest = load_manifest(mpath, check_grammar=check_grammar)
    weights, _ = load_weights(bpath, expect_hash=manifest_hash(manifest))
    nn.check_weights(model, weights)
    mfmt = manifest_format(manifest)
    if weights.fmt is not None and mfmt is not None and weights.fmt != mfmt:
        raise FormatError("%s: blob format %s disagrees with manifest %s"
                          % (bpath, weights.fmt, mfmt))
    return model, weights, manifest


def save_dataset(path, dataset):
    """Write frames as an RFDS file."""
    l = dataset.x.shape[2]
    if dataset.x.shape[1] != 2 or dataset.x.shape[3] != l:
        raise ValueError("dataset frames must be (2, l, l)")
    if len(dataset.labels) > 255:
        raise ValueError("class table limited to 255 entries")
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<HHH", DATA_VERSION, l, len(dataset.labels)))
        for name in dataset.labels:
            raw = name.encode()
            fh.write(struct.pack("<B", len(raw)))
            fh.write(raw)
        frames = np.ascontiguousarray(dataset.x, dtype="<f4")
        for i in range(len(dataset)):
            fh.write(struct.pack("<B", int(dataset.y[i])))
            fh.write(frames[i].tobytes())


def load_dataset(path, split_seed=0):
    """Read an RFDS file back into a Dataset."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DATA_MAGIC:
        raise FormatError("%s: not a dataset file (magic %r)" % (path, data[:4]))
    if len(data) < 10:
        raise FormatError("%s: header truncated at %d bytes" % (path, len(data)))
    version, l, n_cls = struct.unpack_from("<HHH", data, 4)
    if version != DATA_VERSION:
        raise FormatError("%s: unsupported dataset version %d" % (path, version))
    off = 10
    labels = []
    for c in range(n_cls):
        if off >= len(data):
            raise FormatError("%s: class table truncated at entry %d" % (path, c))
        (ln,) = struct.unpack_from("<B", data, off)
        off += 1
        if off + ln > len(data):
            raise FormatError("%s: class name %d truncated" % (path, c))
        labels.append(data[off:off + ln].decode())
        off += ln
    rec_bytes = 1 + l * l * 2 * 4
    body = len(data) - off
    if body % rec_bytes:
        raise FormatError("%s: %d bytes after header is not a whole number of "
                          "%d-byte records" % (path, body, rec_bytes))
    count = body // rec_bytes
    x = np.empty((count, 2, l, l), dtype=np.float32)
    y = np.empty(count, dtype=np.int64)
    for i in range(count):
        y[i] = data[off]
        if y[i] >= n_cls:
            raise FormatError("%s: record %d label %d outside the %d-class "
                              "table" % (path, i, y[i], n_cls))
        x[i] = np.frombuffer(data, dtype="<f4", count=l * l * 2,
                             offset=off + 1).reshape(2, l, l)
        off += rec_bytes
    return Dataset(x, y, tuple(labels), split_seed=split_seed)


def export_bram_image(weights, layer_index, block_bytes=BRAM_BLOCK_BYTES):
    """Fixed-point weight store for one layer as raw little-endian words.

    Word order is exactly the order the inference engine reads: the filter
    bank (or dense matrix) row-major, then the biases; zero-padded to whole
    BRAM blocks so len(image) / block_bytes equals the block count the
    resource estimator charges for this layer's weight store.
    """
    if weights.fmt is None:
        raise ValueError("export needs fixed-point weights; quantize first")
    if layer_index not in weights.params:
        raise ValueError("layer %d has no parameters" % layer_index)
    dt = "<i%d" % weights.fmt.word_bytes
    p = weights.params[layer_index]
    raw = (np.ascontiguousarray(p["W"], dtype=dt).tobytes()
           + np.ascontiguousarray(p["b"], dtype=dt).tobytes())
    pad = (-len(raw)) % block_bytes
    return raw + b"\x00" * pad
