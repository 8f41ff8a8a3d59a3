"""Binary model checkpoints with an optional learner-state section.

Layout (all little-endian):

    "FLYM" u16 version
    config block: n_in u32, n_classes u32, n_kc u32, degree u32,
                  coding_level f64, init_seed u64, projection_seed u64,
                  ablate u8, head_bias u8, n_pre u32,
                  n_pre x (width u32, activation u8)
    n_params u32, then per array: ndim u32, dims u32..., f64 data
    zero or more sections: tag 4s, length u64, payload

The frozen projection is not stored; it is rebuilt from its seed. The only
section tag written is "LRNR" (learner state).
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError
from .learners import ClipConfig, Learner, make_learner
from .model import IDENTITY, RELU, CodingConfig, DenseLinearHead, DensePreLayer, FlyModel, build_projection
from .tasks import atomic_write_bytes

MAGIC = b"FLYM"
VERSION = 1
LEARNER_TAG = b"LRNR"
_ACT_CODES = {RELU: 0, IDENTITY: 1}
_CONFIG = struct.Struct("<IIIIdQQBBI")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what: str):
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def array(self, what: str) -> np.ndarray:
        (ndim,) = self.unpack("<I", what)
        dims = self.unpack(f"<{ndim}I", what) if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(self.take(8 * count, what), dtype="<f8")
        return data.astype(np.float64).reshape(dims)

    def text(self, what: str) -> str:
        (n,) = self.unpack("<H", what)
        try:
            return bytes(self.take(n, what)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 in {what}", self.pos - n) from exc

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)


def _pack_array(a) -> bytes:
    a = np.asarray(a, dtype="<f8")
    return struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape) + a.tobytes()


def _pack_text(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _encode_learner(learner: Learner) -> bytes:
    state = learner.state_dict()
    out = [_pack_text(learner.name), struct.pack("<d", learner.sgd.learning_rate)]
    max_norm = learner.clip.max_norm
    out.append(struct.pack("<Bd", max_norm is not None, 0.0 if max_norm is None else max_norm))
    scalars = state["scalars"]
    out.append(struct.pack("<I", len(scalars)))
    for key in sorted(scalars):
        out += [_pack_text(key), struct.pack("<d", float(scalars[key]))]
    arrays = state["arrays"]
    out.append(struct.pack("<I", len(arrays)))
    for key in sorted(arrays):
        out += [_pack_text(key), _pack_array(arrays[key])]
    return b"".join(out)


def encode_checkpoint(model: FlyModel, learner: Learner | None = None) -> bytes:
    proj = model.projection
    n_kc = proj.n_out if proj is not None else 0
    degree = proj.degree if proj is not None else 0
    level = model.coding.level if model.coding is not None else 0.0
    parts = [
        MAGIC,
        struct.pack("<H", VERSION),
        _CONFIG.pack(
            model.input_dim, model.n_classes, n_kc, degree, level, model.init_seed & 0xFFFFFFFFFFFFFFFF,
            proj.seed if proj is not None else 0, int(model.ablate_kc), int(model.head.bias is not None),
            len(model.pre_layers),
        ),
    ]
    for layer in model.pre_layers:
        parts.append(struct.pack("<IB", layer.n_out, _ACT_CODES[layer.activation]))
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    parts += [_pack_array(p) for p in params]
    if learner is not None:
        payload = _encode_learner(learner)
        parts += [LEARNER_TAG, struct.pack("<Q", len(payload)), payload]
    return b"".join(parts)


def decode_checkpoint(buf: bytes):
    """Returns ``(model, learner_record)``; the record is ``None`` without a LRNR section."""
    r = _Reader(buf)
    if bytes(r.take(4, "magic")) != MAGIC:
        raise FormatError("not a model checkpoint (bad magic)", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    n_in, n_classes, n_kc, degree, level, init_seed, proj_seed, ablate, head_bias, n_pre = r.unpack(
        _CONFIG, "config block"
    )
    codes = {v: k for k, v in _ACT_CODES.items()}
    widths = []
    for _ in range(n_pre):
        width, code = r.unpack("<IB", "pre-layer spec")
        if code not in codes:
            raise FormatError(f"unknown activation code {code}", r.pos - 1)
        widths.append((width, codes[code]))
    (n_params,) = r.unpack("<I", "parameter count")
    expected = 2 * n_pre + 1 + head_bias
    if n_params != expected:
        raise FormatError(f"expected {expected} parameter arrays, found {n_params}", r.pos - 4)
    params = [r.array("parameter array") for _ in range(n_params)]

    pre_layers, dim = [], n_in
    for i, (width, act) in enumerate(widths):
        w, b = params[2 * i], params[2 * i + 1]
        if w.shape != (width, dim) or b.shape != (width,):
            raise FormatError(f"pre-layer {i} arrays do not match the config block")
        pre_layers.append(DensePreLayer(w, b, act))
        dim = width
    projection = coding = None
    if not ablate:
        projection = build_projection(dim, n_kc, degree, proj_seed)
        coding = CodingConfig(level, n_kc)
        dim = n_kc
    head_w = params[2 * n_pre]
    if head_w.shape != (n_classes, dim):
        raise FormatError("head weights do not match the config block")
    head = DenseLinearHead(head_w, params[-1] if head_bias else None)
    model = FlyModel(pre_layers, projection, coding, head, bool(ablate), int(init_seed))

    record = None
    while not r.done:
        start = r.pos
        tag = bytes(r.take(4, "section tag"))
        (length,) = r.unpack("<Q", "section length")
        payload = bytes(r.take(length, "section payload"))
        if tag != LEARNER_TAG:
            raise FormatError(f"unknown section tag {tag!r}", start)
        record = _decode_learner(payload)
    return model, record


def _decode_learner(payload: bytes) -> dict:
    r = _Reader(payload)
    name = r.text("learner name")
    (lr,) = r.unpack("<d", "learning rate")
    has_clip, max_norm = r.unpack("<Bd", "clip config")
    (n,) = r.unpack("<I", "scalar count")
    scalars = {}
    for _ in range(n):
        key = r.text("scalar name")
        (scalars[key],) = r.unpack("<d", "scalar value")
    (n,) = r.unpack("<I", "array count")
    arrays = {}
    for _ in range(n):
        key = r.text("array name")
        arrays[key] = r.array("learner array")
    if not r.done:
        raise FormatError("trailing bytes in learner section", r.pos)
    return {
        "name": name, "lr": lr, "clip": max_norm if has_clip else None,
        "state": {"scalars": scalars, "arrays": arrays},
    }


def restore_learner(model: FlyModel, record: dict) -> Learner:
    learner = make_learner(record["name"], model, record["lr"], ClipConfig(record["clip"]))
    learner.load_state_dict(record["state"])
    return learner


def save_checkpoint(path, model: FlyModel, learner: Learner | None = None):
    atomic_write_bytes(path, encode_checkpoint(model, learner))


def load_checkpoint(path):
    """Returns ``(model, learner)``; ``learner`` is ``None`` when none was saved."""
    with open(path, "rb") as fh:
        model, record = decode_checkpoint(fh.read())
    return model, (restore_learner(model, record) if record is not None else None)
