"""Fly Model network: frozen sparse binary expansion, top-k coding, linear head.

Shapes follow the usual row-major batch convention: a batch of inputs is a
``(batch, features)`` array. Every public function also accepts a single
1-D sample and then returns 1-D results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, InvalidLabelError, InvalidTraceError, ShapeError

RELU = "relu"
IDENTITY = "identity"
_ACTIVATIONS = (RELU, IDENTITY)

# rows of the projection are drawn in blocks to bound memory for wide inputs
_ROW_BLOCK = 4096


@dataclass(frozen=True, eq=False)
class SparseBinaryProjection:
    """Frozen 0/1 connection matrix stored as per-row index lists.

    ``rows[i]`` holds the sorted input columns that expansion unit ``i``
    sums. Weights are implicit and always exactly 1.
    """

    n_in: int
    n_out: int
    degree: int
    rows: np.ndarray
    seed: int

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        data = np.ones(self.n_out * self.degree)
        indptr = np.arange(0, self.n_out * self.degree + 1, self.degree)
        return sp.csr_matrix(
            (data, self.rows.ravel(), indptr), shape=(self.n_out, self.n_in)
        )

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def fan_out(self) -> np.ndarray:
        """Number of expansion units each input column feeds."""
        return np.bincount(self.rows.ravel(), minlength=self.n_in)


def build_projection(n_in: int, n_out: int, degree: int, seed: int) -> SparseBinaryProjection:
    """Draw ``n_out`` independent uniform ``degree``-subsets of ``range(n_in)``.

    Rows are drawn independently, so two rows may share a subset.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"projection dimensions must be positive, got n_in={n_in}, n_out={n_out}")
    if not 1 <= degree <= n_in:
        raise ConfigError(f"invalid degree {degree}: need 1 <= degree <= n_in={n_in}")
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    rng = np.random.default_rng(seed)
    rows = np.empty((n_out, degree), dtype=np.int64)
    for start in range(0, n_out, _ROW_BLOCK):
        stop = min(start + _ROW_BLOCK, n_out)
        keys = rng.random((stop - start, n_in))
        if degree < n_in:
            picked = np.argpartition(keys, degree - 1, axis=1)[:, :degree]
        else:
            picked = np.broadcast_to(np.arange(n_in), (stop - start, n_in))
        rows[start:stop] = np.sort(picked, axis=1)
    rows.setflags(write=False)
    return SparseBinaryProjection(n_in, n_out, degree, rows, seed)


def expand(proj: SparseBinaryProjection, x) -> np.ndarray:
    """Sum the connected inputs for every expansion unit."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != proj.n_in or x.ndim not in (1, 2):
        raise ShapeError(f"expand: expected last dimension {proj.n_in}, got shape {x.shape}")
    if x.ndim == 1:
        return proj.matrix @ x
    return np.asarray(proj.matrix @ x.T).T


@dataclass(frozen=True)
class CodingConfig:
    """Winner-take-all coding level over ``n_out`` units.

    Ties at the cut-off are resolved in favour of the lowest index.
    """

    level: float
    n_out: int
    tie_policy: str = field(default="lowest-index", init=False)

    def __post_init__(self):
        if not 0.0 < self.level <= 1.0:
            raise ConfigError(f"coding level must lie in (0, 1], got {self.level}")
        if self.n_out < 1:
            raise ConfigError(f"coding needs at least one unit, got n_out={self.n_out}")

    @property
    def active_count(self) -> int:
        # round first so that e.g. 0.001 * 30000 does not ceil to 31
        return max(1, math.ceil(round(self.level * self.n_out, 9)))


def top_k_code(kc_raw, coding: CodingConfig):
    """Keep the ``coding.active_count`` largest entries, zero the rest.

    Returns ``(kc_coded, active_set)`` where ``active_set`` holds the
    retained indices in ascending order (one row per sample for batches).
    """
    h = np.asarray(kc_raw, dtype=np.float64)
    single = h.ndim == 1
    h2 = np.atleast_2d(h)
    n = h2.shape[1]
    if n != coding.n_out:
        raise ShapeError(f"top_k_code: expected {coding.n_out} units, got {n}")
    a = coding.active_count
    rows = h2.shape[0]
    if a >= n:
        return (h2[0].copy(), np.arange(n)) if single else (h2.copy(), np.tile(np.arange(n), (rows, 1)))
    active = np.argpartition(h2, n - a, axis=1)[:, n - a :]
    kth = np.take_along_axis(h2, active, axis=1).min(axis=1, keepdims=True)
    tied = np.flatnonzero(np.count_nonzero(h2 >= kth, axis=1) > a)
    for r in tied:
        # more candidates than slots at the cut-off: keep the lowest indices
        greater = h2[r] > kth[r]
        equal = np.flatnonzero(h2[r] == kth[r])
        need = a - int(greater.sum())
        active[r] = np.concatenate([np.flatnonzero(greater), equal[:need]])
    active.sort(axis=1)
    coded = np.zeros_like(h2)
    np.put_along_axis(coded, active, np.take_along_axis(h2, active, axis=1), axis=1)
    if single:
        return coded[0], active[0]
    return coded, active


@dataclass(eq=False)
class DensePreLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = RELU

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("pre-layer bias must have one entry per output unit")

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]


@dataclass(eq=False)
class DenseLinearHead:
    weights: np.ndarray
    bias: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]


@dataclass(eq=False)
class ForwardTrace:
    """Every intermediate value of one forward pass.

    For ablated models the three expansion fields are ``None``.
    """

    input: np.ndarray
    pre_activations: list
    hidden: list
    kc_raw: np.ndarray | None
    kc_coded: np.ndarray | None
    active_set: np.ndarray | None
    logits: np.ndarray


@dataclass(eq=False)
class FlyModel:
    pre_layers: list
    projection: SparseBinaryProjection | None
    coding: CodingConfig | None
    head: DenseLinearHead
    ablate_kc: bool = False
    init_seed: int = 0

    def __post_init__(self):
        dim = self.pre_layers[0].n_in if self.pre_layers else None
        for i, layer in enumerate(self.pre_layers):
            if dim is not None and layer.n_in != dim:
                raise ShapeError(f"pre-layer {i} expects {layer.n_in} inputs but receives {dim}")
            dim = layer.n_out
        if not self.ablate_kc:
            if self.projection is None or self.coding is None:
                raise ConfigError("a non-ablated model needs a projection and a coding config")
            if dim is not None and self.projection.n_in != dim:
                raise ShapeError(
                    f"projection expects {self.projection.n_in} inputs, pre-layers emit {dim}"
                )
            if self.coding.n_out != self.projection.n_out:
                raise ShapeError("coding config and projection disagree on the unit count")
            dim = self.projection.n_out
        if dim is not None and self.head.n_in != dim:
            raise ShapeError(f"head expects {self.head.n_in} features, stage before it emits {dim}")

    @property
    def input_dim(self) -> int:
        if self.pre_layers:
            return self.pre_layers[0].n_in
        if not self.ablate_kc:
            return self.projection.n_in
        return self.head.n_in

    @property
    def n_classes(self) -> int:
        return self.head.n_classes

    def parameters(self) -> list:
        """Trainable arrays in declared order: pre-layers (W, b) then head."""
        params = []
        for layer in self.pre_layers:
            params += [layer.weights, layer.bias]
        params.append(self.head.weights)
        if self.head.bias is not None:
            params.append(self.head.bias)
        return params

    def parameter_names(self) -> list:
        names = []
        for i in range(len(self.pre_layers)):
            names += [f"pre{i}.weight", f"pre{i}.bias"]
        names.append("head.weight")
        if self.head.bias is not None:
            names.append("head.bias")
        return names

    def copy(self) -> FlyModel:
        """Deep copy of the trainable state; the frozen projection is shared."""
        return FlyModel(
            pre_layers=[
                DensePreLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.pre_layers
            ],
            projection=self.projection,
            coding=self.coding,
            head=DenseLinearHead(
                self.head.weights.copy(),
                None if self.head.bias is None else self.head.bias.copy(),
            ),
            ablate_kc=self.ablate_kc,
            init_seed=self.init_seed,
        )

    def forward(self, x) -> ForwardTrace:
        return forward(self, x)

    def backward(self, trace, loss_grad_logits):
        return backward(self, trace, loss_grad_logits)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def make_model(
    n_in: int,
    n_classes: int,
    n_kc: int = 2000,
    degree: int = 6,
    coding_level: float = 0.01,
    hidden=(),
    ablate_kc: bool = False,
    seed: int = 0,
    head_bias: bool = False,
    pre_activation: str = RELU,
) -> FlyModel:
    """Build a seeded model.

    ``hidden`` lists the widths of dense pre-layers placed before the
    expansion stage. Initial weights are uniform on +-1/sqrt(fan_in).
    """
    ss = np.random.SeedSequence(int(seed))
    proj_ss, pre_ss, head_ss = ss.spawn(3)
    rng = np.random.default_rng(pre_ss)
    pre_layers = []
    dim = n_in
    for width in hidden:
        w = _uniform(rng, (width, dim), dim)
        b = _uniform(rng, (width,), dim)
        pre_layers.append(DensePreLayer(w, b, pre_activation))
        dim = width
    projection = coding = None
    if not ablate_kc:
        proj_seed = int(proj_ss.generate_state(1, dtype=np.uint64)[0])
        projection = build_projection(dim, n_kc, degree, proj_seed)
        coding = CodingConfig(coding_level, n_kc)
    feat = dim if ablate_kc else n_kc
    hrng = np.random.default_rng(head_ss)
    head_w = _uniform(hrng, (n_classes, feat), feat)
    head_b = _uniform(hrng, (n_classes,), feat) if head_bias else None
    return FlyModel(pre_layers, projection, coding, DenseLinearHead(head_w, head_b), ablate_kc, int(seed))


def forward(model: FlyModel, x) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = np.atleast_2d(x)
    if a.ndim != 2 or a.shape[1] != model.input_dim:
        raise ShapeError(f"input: expected {model.input_dim} features, got shape {x.shape}")
    pre_acts, hidden = [], []
    for i, layer in enumerate(model.pre_layers):
        z = a @ layer.weights.T + layer.bias
        a = np.maximum(z, 0.0) if layer.activation == RELU else z
        pre_acts.append(z)
        hidden.append(a)
    kc_raw = kc_coded = active = None
    if not model.ablate_kc:
        kc_raw = expand(model.projection, a)
        kc_coded, active = top_k_code(kc_raw, model.coding)
        if model.head.n_in != kc_coded.shape[1]:
            raise ShapeError(f"head: expected {model.head.n_in} features, got {kc_coded.shape[1]}")
        # only the active units contribute to the logits
        vals = np.take_along_axis(kc_raw, active, axis=1)
        logits = np.einsum("ba,bac->bc", vals, model.head.weights.T[active])
    else:
        if a.shape[1] != model.head.n_in:
            raise ShapeError(f"head: expected {model.head.n_in} features, got {a.shape[1]}")
        logits = a @ model.head.weights.T
    if model.head.bias is not None:
        logits = logits + model.head.bias
    if single:
        squeeze = lambda v: None if v is None else v[0]
        return ForwardTrace(
            x, [p[0] for p in pre_acts], [h[0] for h in hidden],
            squeeze(kc_raw), squeeze(kc_coded), squeeze(active), logits[0],
        )
    return ForwardTrace(x, pre_acts, hidden, kc_raw, kc_coded, active, logits)


def _check_trace(model: FlyModel, trace: ForwardTrace):
    if len(trace.pre_activations) != len(model.pre_layers):
        raise InvalidTraceError("trace has a different number of pre-layers than the model")
    if np.shape(trace.logits)[-1] != model.n_classes:
        raise InvalidTraceError("trace logits do not match the head's class count")
    if model.ablate_kc != (trace.kc_raw is None):
        raise InvalidTraceError("trace and model disagree on the ablation flag")
    if trace.kc_raw is not None and np.shape(trace.kc_raw)[-1] != model.projection.n_out:
        raise InvalidTraceError("trace expansion width does not match the projection")
    for layer, z in zip(model.pre_layers, trace.pre_activations):
        if np.shape(z)[-1] != layer.n_out:
            raise InvalidTraceError("trace pre-activation width does not match its layer")


def _sparse_kc_to_input(proj, active, d_active):
    """Scatter per-unit gradients on the active set back to input columns."""
    batch = active.shape[0]
    idx = proj.rows[active]  # (batch, active, degree)
    flat = (np.arange(batch)[:, None, None] * proj.n_in + idx).ravel()
    weights = np.broadcast_to(d_active[:, :, None], idx.shape).ravel()
    return np.bincount(flat, weights=weights, minlength=batch * proj.n_in).reshape(batch, proj.n_in)


def backward(model: FlyModel, trace: ForwardTrace, loss_grad_logits, squared: bool = False) -> list:
    """Gradients of the loss for every trainable array, in ``parameters()`` order.

    ``loss_grad_logits`` holds dL/dlogits per sample; contributions are
    summed over the batch. With ``squared=True`` the per-sample gradients
    are squared before summing, which is what a diagonal Fisher needs.
    The projection never receives a gradient.
    """
    _check_trace(model, trace)
    g = np.atleast_2d(np.asarray(loss_grad_logits, dtype=np.float64))
    if g.shape[1] != model.n_classes:
        raise InvalidTraceError("logit gradient does not match the head's class count")
    sq = (lambda v: v * v) if squared else (lambda v: v)
    hidden = [np.atleast_2d(h) for h in trace.hidden]
    pre_acts = [np.atleast_2d(z) for z in trace.pre_activations]
    x = np.atleast_2d(trace.input)
    if not model.ablate_kc:
        feat = np.atleast_2d(trace.kc_coded)
    else:
        feat = hidden[-1] if hidden else x
    if feat.shape[0] != g.shape[0]:
        raise InvalidTraceError("trace batch size does not match the logit gradient")

    if not model.ablate_kc:
        # only active columns of the head receive gradient
        active = np.atleast_2d(trace.active_set)
        vals = sq(np.take_along_axis(feat, active, axis=1))
        gq = sq(g)
        cols = active.ravel()
        n_kc = feat.shape[1]
        head_w = np.empty((g.shape[1], n_kc))
        for c in range(g.shape[1]):
            head_w[c] = np.bincount(cols, weights=(gq[:, c : c + 1] * vals).ravel(), minlength=n_kc)
        head_grads = [head_w]
    else:
        head_grads = [sq(g).T @ sq(feat)]
    if model.head.bias is not None:
        head_grads.append(sq(g).sum(axis=0))
    if not model.pre_layers:
        return head_grads

    if not model.ablate_kc:
        d_active = np.einsum("bc,bac->ba", g, model.head.weights.T[active])
        delta = _sparse_kc_to_input(model.projection, active, d_active)
    else:
        delta = g @ model.head.weights

    pre_grads = []
    for i in range(len(model.pre_layers) - 1, -1, -1):
        layer = model.pre_layers[i]
        if layer.activation == RELU:
            delta = delta * (pre_acts[i] > 0.0)
        inp = hidden[i - 1] if i > 0 else x
        pre_grads = [sq(delta).T @ sq(inp), sq(delta).sum(axis=0)] + pre_grads
        if i > 0:
            delta = delta @ layer.weights
    return pre_grads + head_grads


def cross_entropy_loss(logits, label, class_mask=None):
    """Softmax cross-entropy and its gradient with respect to the logits.

    For a batch, ``label`` is an integer array and the loss is the batch
    mean; the returned gradient is already divided by the batch size.
    Classes outside ``class_mask`` (boolean, per class) get zero
    probability and zero gradient.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(label))
    n_classes = z.shape[1]
    if y.shape[0] != z.shape[0]:
        raise ShapeError("one label per row of logits is required")
    if np.any(y < 0) or np.any(y >= n_classes):
        raise InvalidLabelError(f"label out of range [0, {n_classes})")
    if class_mask is not None:
        class_mask = np.asarray(class_mask, dtype=bool)
        if not np.all(class_mask[y]):
            raise InvalidLabelError("label belongs to a masked class")
        z = np.where(class_mask, z, -np.inf)
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    rows = np.arange(z.shape[0])
    losses = -log_probs[rows, y]
    grad = exp / total
    grad[rows, y] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / z.shape[0]


def predict(model: FlyModel, x, class_mask=None, batch_size: int = 512) -> np.ndarray:
    """Arg-max class per row, restricted to ``class_mask`` when given."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], batch_size):
        logits = forward(model, x[start : start + batch_size]).logits
        if class_mask is not None:
            logits = np.where(class_mask, logits, -np.inf)
        out[start : start + batch_size] = np.argmax(logits, axis=1)
    return out
