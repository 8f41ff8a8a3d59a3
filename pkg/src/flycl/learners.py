"""Synaptic update strategies wrapped around a plain SGD step.

Each strategy is a small state object plus pure functions over parameter
lists (lists of numpy arrays in ``FlyModel.parameters()`` order). The
``Learner`` classes bind that state to one model and expose the hooks the
training loops call: ``penalty``, ``after_step`` and ``end_task``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NotApplicableError, ShapeError
from .model import FlyModel, backward, cross_entropy_loss, forward

STRATEGIES = ("sgd", "ewc", "si", "l2init", "snp", "cbp")


def _check_shapes(a, b, what):
    if len(a) != len(b) or any(np.shape(x) != np.shape(y) for x, y in zip(a, b)):
        raise ShapeError(f"{what}: parameter and gradient shapes differ")


def _copy(arrays):
    return [np.array(a, dtype=np.float64, copy=True) for a in arrays]


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")


def sgd_step(params, grads, cfg: SgdConfig):
    """In-place ``p -= lr * g`` for every array; returns ``params``."""
    _check_shapes(params, grads, "sgd_step")
    for p, g in zip(params, grads):
        p -= cfg.learning_rate * g
    return params


@dataclass(frozen=True)
class ClipConfig:
    max_norm: float | None = None

    def __post_init__(self):
        if self.max_norm is not None and not self.max_norm > 0:
            raise ConfigError("clip max_norm must be positive when enabled")


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_scale(grads, cfg: ClipConfig) -> float:
    if cfg is None or cfg.max_norm is None:
        return 1.0
    norm = global_norm(grads)
    return cfg.max_norm / norm if norm > cfg.max_norm else 1.0


def clip_gradients(grads, cfg: ClipConfig):
    """Rescale all gradients together when their global L2 norm exceeds the limit."""
    scale = clip_scale(grads, cfg)
    if scale == 1.0:
        return list(grads)
    return [g * scale for g in grads]


# --------------------------------------------------------------------- EWC


@dataclass(eq=False)
class EwcState:
    lam: float
    fisher: list
    anchor: list
    tasks_consolidated: int = 0


def ewc_init(params, lam: float) -> EwcState:
    return EwcState(lam, [np.zeros_like(p) for p in params], _copy(params))


def ewc_penalty_and_grad(params, state: EwcState):
    """(lam/2) * sum F (theta - anchor)^2 and its gradient."""
    if state.tasks_consolidated == 0:
        return 0.0, [np.zeros_like(p) for p in params]
    value = 0.0
    grads = []
    for p, f, a in zip(params, state.fisher, state.anchor):
        d = p - a
        value += 0.5 * state.lam * float(np.sum(f * d * d))
        grads.append(state.lam * f * d)
    return value, grads


def diagonal_fisher(model: FlyModel, features, class_mask=None, batch_size: int = 512, rng=None):
    """Mean over samples of E_{y~p(y|x)} [(d log p(y|x) / d theta)^2].

    With ``rng`` one label per sample is drawn from the model's predictive
    distribution. Without it the expectation is taken exactly, with one
    weighted backward pass per class.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = x.shape[0]
    if n == 0:
        raise DataError("cannot estimate a Fisher diagonal from an empty dataset")
    total = [np.zeros_like(p) for p in model.parameters()]
    classes = np.arange(model.n_classes) if class_mask is None else np.flatnonzero(class_mask)
    for start in range(0, n, batch_size):
        trace = forward(model, x[start : start + batch_size])
        logits = trace.logits
        if class_mask is not None:
            logits = np.where(class_mask, logits, -np.inf)
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        if rng is not None:
            u = rng.random((probs.shape[0], 1))
            y = np.minimum((np.cumsum(probs, axis=1) < u).sum(axis=1), probs.shape[1] - 1)
            g = probs.copy()
            g[np.arange(len(y)), y] -= 1.0
            passes = [g]
        else:
            passes = []
            for c in classes:
                g = probs.copy()
                g[:, c] -= 1.0
                g *= np.sqrt(probs[:, c])[:, None]
                passes.append(g)
        for g in passes:
            for acc, sq in zip(total, backward(model, trace, g, squared=True)):
                acc += sq
    return [t / n for t in total]


def ewc_consolidate(model: FlyModel, task_features, state: EwcState, class_mask=None, rng=None) -> EwcState:
    """Add this task's Fisher diagonal into the running sum and re-anchor."""
    fisher = diagonal_fisher(model, task_features, class_mask, rng=rng)
    for acc, f in zip(state.fisher, fisher):
        acc += f
    state.anchor = _copy(model.parameters())
    state.tasks_consolidated += 1
    return state


# ---------------------------------------------------------------------- SI


@dataclass(eq=False)
class SiState:
    c: float
    xi: float
    omega_running: list
    Omega: list
    anchor: list
    task_start_params: list

    def __post_init__(self):
        if not self.xi > 0:
            raise ConfigError("SI damping xi must be positive")


def si_init(params, c: float, xi: float = 1e-3) -> SiState:
    return SiState(
        c, xi, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
        _copy(params), _copy(params),
    )


def si_accumulate_step(state: SiState, grads_before_step, param_delta) -> SiState:
    """Path-integral contribution ``-g * delta`` of one optimizer step."""
    for w, g, d in zip(state.omega_running, grads_before_step, param_delta):
        w -= g * d
    return state


def si_consolidate(state: SiState, params_at_task_end) -> SiState:
    """Fold the finished task's path integral into the importance Omega."""
    for k, p in enumerate(params_at_task_end):
        delta = p - state.task_start_params[k]
        state.Omega[k] += np.maximum(state.omega_running[k], 0.0) / (delta * delta + state.xi)
        state.omega_running[k] = np.zeros_like(p)
    state.anchor = _copy(params_at_task_end)
    state.task_start_params = _copy(params_at_task_end)
    return state


def si_penalty_and_grad(params, state: SiState):
    """c * sum Omega (theta - anchor)^2 (no 1/2 factor) and its gradient."""
    value = 0.0
    grads = []
    for p, om, a in zip(params, state.Omega, state.anchor):
        d = p - a
        value += state.c * float(np.sum(om * d * d))
        grads.append(2.0 * state.c * om * d)
    return value, grads


# ----------------------------------------------------------------- L2 Init


@dataclass(eq=False)
class L2InitState:
    alpha: float
    theta0: list


def l2init_penalty_and_grad(params, state: L2InitState):
    """alpha * ||theta - theta0||^2 and its gradient."""
    value = 0.0
    grads = []
    for p, p0 in zip(params, state.theta0):
        d = p - p0
        value += state.alpha * float(np.sum(d * d))
        grads.append(2.0 * state.alpha * d)
    return value, grads


# ------------------------------------------------------- Shrink and Perturb


@dataclass(eq=False)
class ShrinkPerturbConfig:
    shrink: float
    perturb: float
    w0: list

    def __post_init__(self):
        if not 0.0 <= self.shrink <= 1.0 or self.perturb < 0.0:
            raise ConfigError("shrink must lie in [0, 1] and perturb must be nonnegative")


def shrink_perturb_apply(params, cfg: ShrinkPerturbConfig):
    """In place: ``w <- (1 - shrink) * w + perturb * w0``."""
    for p, p0 in zip(params, cfg.w0):
        p[...] = (1.0 - cfg.shrink) * p + cfg.perturb * p0
    return params


# --------------------------------------------------- Continual backprop


@dataclass(eq=False)
class CbpState:
    decay: float
    utilities: list
    ages: list
    replacement_rate: float
    maturity_threshold: int
    pending: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ConfigError("CBP utility decay must lie in [0, 1)")
        if self.replacement_rate < 0:
            raise ConfigError("CBP replacement rate must be nonnegative")
        if not self.pending:
            self.pending = [0.0 for _ in self.utilities]


def cbp_init(model: FlyModel, decay=0.99, replacement_rate=1e-4, maturity_threshold=100) -> CbpState:
    if not model.pre_layers:
        raise NotApplicableError("continual backprop needs at least one dense pre-layer")
    return CbpState(
        decay,
        [np.zeros(l.n_out) for l in model.pre_layers],
        [np.zeros(l.n_out, dtype=np.int64) for l in model.pre_layers],
        replacement_rate,
        maturity_threshold,
    )


def _outgoing_abs_sum(model: FlyModel, layer_idx: int) -> np.ndarray:
    if layer_idx + 1 < len(model.pre_layers):
        return np.abs(model.pre_layers[layer_idx + 1].weights).sum(axis=0)
    if not model.ablate_kc:
        # unit weights into the expansion stage
        return model.projection.fan_out().astype(np.float64)
    return np.abs(model.head.weights).sum(axis=0)


def cbp_step(model: FlyModel, trace, state: CbpState, rng):
    """Update neuron utilities and reinitialize the least useful mature ones.

    Reinitialized neurons get fresh incoming weights (bias zero) and zero
    outgoing weights, except where the outgoing weights are the frozen
    projection, which is left untouched.
    """
    if not model.pre_layers:
        raise NotApplicableError("continual backprop needs at least one dense pre-layer")
    for l, layer in enumerate(model.pre_layers):
        act = np.abs(np.atleast_2d(trace.hidden[l])).mean(axis=0)
        contrib = act * _outgoing_abs_sum(model, l)
        state.utilities[l] = state.decay * state.utilities[l] + (1.0 - state.decay) * contrib
        state.ages[l] += 1
        if state.replacement_rate == 0:
            continue
        eligible = np.flatnonzero(state.ages[l] >= state.maturity_threshold)
        if eligible.size == 0:
            continue
        state.pending[l] += state.replacement_rate * eligible.size
        n_replace = int(state.pending[l])
        if n_replace == 0:
            continue
        state.pending[l] -= n_replace
        order = np.argsort(state.utilities[l][eligible], kind="stable")
        chosen = eligible[order[:n_replace]]
        bound = 1.0 / math.sqrt(layer.n_in)
        layer.weights[chosen] = rng.uniform(-bound, bound, size=(chosen.size, layer.n_in))
        layer.bias[chosen] = 0.0
        if l + 1 < len(model.pre_layers):
            model.pre_layers[l + 1].weights[:, chosen] = 0.0
        elif model.ablate_kc:
            model.head.weights[:, chosen] = 0.0
        state.utilities[l][chosen] = 0.0
        state.ages[l][chosen] = 0
    return model, state


# ----------------------------------------------------------- Learner objects


class Learner:
    """Plain SGD; subclasses add regularizers or structural updates."""

    name = "sgd"

    def __init__(self, model: FlyModel, lr: float, clip: ClipConfig | None = None):
        self.model = model
        self.sgd = SgdConfig(lr)
        self.clip = clip or ClipConfig()

    def penalty(self, params):
        """Regularizer value and gradient, or ``(0.0, None)`` when there is none."""
        return 0.0, None

    def needs_delta(self) -> bool:
        return False

    def after_step(self, trace, task_grads, delta, rng):
        pass

    def end_task(self, features, class_mask=None, rng=None):
        pass

    def state_dict(self) -> dict:
        return {"scalars": {}, "arrays": {}}

    def load_state_dict(self, state: dict):
        pass

    def step(self, x, y, class_mask=None, rng=None):
        """One SGD step on a batch. Returns ``(task_loss, trace)``."""
        model = self.model
        params = model.parameters()
        trace = forward(model, x)
        loss, dlogits = cross_entropy_loss(trace.logits, y, class_mask)
        task_grads = backward(model, trace, dlogits)
        _, pen = self.penalty(params)
        total = task_grads if pen is None else [g + q for g, q in zip(task_grads, pen)]
        scale = clip_scale(total, self.clip)
        if scale != 1.0:
            total = [g * scale for g in total]
            task_grads = [g * scale for g in task_grads]
        before = _copy(params) if self.needs_delta() else None
        sgd_step(params, total, self.sgd)
        delta = None if before is None else [p - b for p, b in zip(params, before)]
        self.after_step(trace, task_grads, delta, rng)
        return loss, trace


def _arrays(prefix, arrays):
    return {f"{prefix}.{i}": a for i, a in enumerate(arrays)}


def _unpack(prefix, arrays: dict):
    keys = sorted((k for k in arrays if k.startswith(prefix + ".")), key=lambda k: int(k.rsplit(".", 1)[1]))
    return [np.array(arrays[k], dtype=np.float64) for k in keys]


class EwcLearner(Learner):
    name = "ewc"

    def __init__(self, model, lr, lam, clip=None):
        super().__init__(model, lr, clip)
        self.state = ewc_init(model.parameters(), lam)

    def penalty(self, params):
        if self.state.tasks_consolidated == 0:
            return 0.0, None
        return ewc_penalty_and_grad(params, self.state)

    def end_task(self, features, class_mask=None, rng=None):
        ewc_consolidate(self.model, features, self.state, class_mask, rng)

    def state_dict(self):
        return {
            "scalars": {"lambda": self.state.lam, "tasks_consolidated": self.state.tasks_consolidated},
            "arrays": {**_arrays("fisher", self.state.fisher), **_arrays("anchor", self.state.anchor)},
        }

    def load_state_dict(self, state):
        s = state["scalars"]
        self.state = EwcState(
            s["lambda"], _unpack("fisher", state["arrays"]), _unpack("anchor", state["arrays"]),
            int(s["tasks_consolidated"]),
        )


class SiLearner(Learner):
    name = "si"

    def __init__(self, model, lr, c, xi=1e-3, clip=None):
        super().__init__(model, lr, clip)
        self.state = si_init(model.parameters(), c, xi)

    def penalty(self, params):
        return si_penalty_and_grad(params, self.state)

    def needs_delta(self):
        return True

    def after_step(self, trace, task_grads, delta, rng):
        si_accumulate_step(self.state, task_grads, delta)

    def end_task(self, features, class_mask=None, rng=None):
        si_consolidate(self.state, self.model.parameters())

    def state_dict(self):
        st = self.state
        return {
            "scalars": {"c": st.c, "xi": st.xi},
            "arrays": {
                **_arrays("omega", st.omega_running), **_arrays("Omega", st.Omega),
                **_arrays("anchor", st.anchor), **_arrays("start", st.task_start_params),
            },
        }

    def load_state_dict(self, state):
        a, s = state["arrays"], state["scalars"]
        self.state = SiState(
            s["c"], s["xi"], _unpack("omega", a), _unpack("Omega", a), _unpack("anchor", a), _unpack("start", a)
        )


class L2InitLearner(Learner):
    name = "l2init"

    def __init__(self, model, lr, alpha, clip=None):
        super().__init__(model, lr, clip)
        self.state = L2InitState(alpha, _copy(model.parameters()))

    def penalty(self, params):
        return l2init_penalty_and_grad(params, self.state)

    def state_dict(self):
        return {"scalars": {"alpha": self.state.alpha}, "arrays": _arrays("theta0", self.state.theta0)}

    def load_state_dict(self, state):
        self.state = L2InitState(state["scalars"]["alpha"], _unpack("theta0", state["arrays"]))


class ShrinkPerturbLearner(Learner):
    name = "snp"

    def __init__(self, model, lr, shrink, perturb, clip=None):
        super().__init__(model, lr, clip)
        self.config = ShrinkPerturbConfig(shrink, perturb, _copy(model.parameters()))

    def end_task(self, features, class_mask=None, rng=None):
        shrink_perturb_apply(self.model.parameters(), self.config)

    def state_dict(self):
        c = self.config
        return {"scalars": {"shrink": c.shrink, "perturb": c.perturb}, "arrays": _arrays("w0", c.w0)}

    def load_state_dict(self, state):
        s = state["scalars"]
        self.config = ShrinkPerturbConfig(s["shrink"], s["perturb"], _unpack("w0", state["arrays"]))


class CbpLearner(Learner):
    name = "cbp"

    def __init__(self, model, lr, replacement_rate=1e-4, decay=0.99, maturity_threshold=100, clip=None):
        super().__init__(model, lr, clip)
        self.state = cbp_init(model, decay, replacement_rate, maturity_threshold)

    def after_step(self, trace, task_grads, delta, rng):
        cbp_step(self.model, trace, self.state, rng)

    def state_dict(self):
        st = self.state
        return {
            "scalars": {
                "decay": st.decay, "replacement_rate": st.replacement_rate,
                "maturity_threshold": st.maturity_threshold,
            },
            "arrays": {
                **_arrays("utility", st.utilities),
                **_arrays("age", [a.astype(np.float64) for a in st.ages]),
                "pending": np.asarray(st.pending, dtype=np.float64),
            },
        }

    def load_state_dict(self, state):
        s, a = state["scalars"], state["arrays"]
        self.state = CbpState(
            s["decay"], _unpack("utility", a), [x.astype(np.int64) for x in _unpack("age", a)],
            s["replacement_rate"], int(s["maturity_threshold"]), list(a["pending"]),
        )


def make_learner(strategy: str, model: FlyModel, lr: float, clip: ClipConfig | None = None, **hp) -> Learner:
    """Build a learner by strategy name with its hyperparameters.

    Recognised hyperparameters: ``lam`` (ewc), ``c`` and ``xi`` (si),
    ``alpha`` (l2init), ``shrink`` and ``perturb`` (snp), ``cbp_rate``,
    ``cbp_decay`` and ``cbp_maturity`` (cbp). Others are ignored.
    """
    if strategy == "sgd":
        return Learner(model, lr, clip)
    if strategy == "ewc":
        return EwcLearner(model, lr, hp.get("lam", 0.0), clip)
    if strategy == "si":
        return SiLearner(model, lr, hp.get("c", 0.0), hp.get("xi", 1e-3), clip)
    if strategy == "l2init":
        return L2InitLearner(model, lr, hp.get("alpha", 0.0), clip)
    if strategy == "snp":
        return ShrinkPerturbLearner(model, lr, hp.get("shrink", 0.0), hp.get("perturb", 0.0), clip)
    if strategy == "cbp":
        return CbpLearner(
            model, lr, hp.get("cbp_rate", 1e-4), hp.get("cbp_decay", 0.99),
            int(hp.get("cbp_maturity", 100)), clip,
        )
    raise ConfigError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")
