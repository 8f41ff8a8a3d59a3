"""Experiment orchestration for class-incremental and streaming runs."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .analysis import GRADIENT_NORM_FLOOR, gradient_angle, head_gradient
from .errors import ConfigError, DataError, FlyError
from .learners import ClipConfig, make_learner
from .model import FlyModel, forward, make_model, predict
from .tasks import (
    CIL,
    STREAMING,
    Dataset,
    ImbalanceSpec,
    OdorConfig,
    TaskStream,
    apply_imbalance,
    gen_odor_dataset,
    load_feature_file,
    load_idx,
    make_permutation_spec,
    make_permuted_stream,
    split_cil,
)

log = logging.getLogger(__name__)

EVAL_BATCH = 512
PROBE_SIZE = 1000

# config-file key -> dataclass field, for the keys whose names differ
_KEY_ALIASES = {"lambda": "lam", "bs": "batch_size", "tasks": "n_tasks", "k": "coding_level",
                "pn": "n_in", "kc": "n_kc", "r": "degree", "clip": "clip_norm"}
_FIELD_TO_KEY = {v: k for k, v in _KEY_ALIASES.items()}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a run, apart from the seed.

    Field names mirror the config-file keys; ``lam`` is ``lambda``,
    ``batch_size`` is ``bs``, ``coding_level`` is ``k`` and so on.
    """

    dataset: str = "odor"
    protocol: str = "cil"
    strategy: str = "sgd"
    ablate: bool = False
    n_in: int = 50
    n_kc: int = 2000
    degree: int = 6
    coding_level: float = 0.01
    hidden: tuple = ()
    lr: float = 0.005
    lam: float = 0.0
    c: float = 0.0
    xi: float = 1e-3
    alpha: float = 0.0
    shrink: float = 0.0
    perturb: float = 0.0
    cbp_rate: float = 1e-4
    cbp_decay: float = 0.99
    cbp_maturity: int = 100
    epochs: int = 1
    batch_size: int = 64
    clip_norm: float | None = None
    seeds: tuple = (0,)
    n_tasks: int = 0
    classes_per_task: int = 2
    n_classes: int = 10
    gamma: float | None = None
    imbalance_order: str = "normal"
    imbalance_nmax: int = 0
    noise_sigma: float = 0.5
    train_per_class: int = 5000
    test_per_class: int = 1000
    samples_per_task: int = 10000
    shuffle_classes: bool = False
    mask_unseen: bool = False
    images: str = ""
    labels: str = ""
    features: str = ""
    test_features: str = ""
    out_dir: str = "out"

    def __post_init__(self):
        if self.protocol not in ("cil", "stream"):
            raise ConfigError(f"protocol must be 'cil' or 'stream', got {self.protocol!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.protocol == "stream" and self.epochs != 1:
            raise ConfigError("streaming runs train each sample once (epochs = 1)")

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def hyperparameters(self) -> dict:
        return {
            "lam": self.lam, "c": self.c, "xi": self.xi, "alpha": self.alpha,
            "shrink": self.shrink, "perturb": self.perturb, "cbp_rate": self.cbp_rate,
            "cbp_decay": self.cbp_decay, "cbp_maturity": self.cbp_maturity,
        }

    def echo(self) -> dict:
        """Config as plain key/value pairs using the config-file key names."""
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[_FIELD_TO_KEY.get(f.name, f.name)] = list(v) if isinstance(v, tuple) else v
        return out


def _coerce(name: str, raw: str, current):
    raw = raw.strip()
    if name in ("seeds", "hidden"):
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    if name == "clip_norm" or name == "gamma":
        return None if raw.lower() in ("", "none", "off") else float(raw)
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(current, int):
        value = float(raw)
        if not value.is_integer():
            raise ValueError(raw)
        return int(value)
    if isinstance(current, float):
        return float(raw)
    return raw


def config_keys() -> list:
    """Every key accepted in config files and ``--set`` overrides."""
    return [_FIELD_TO_KEY.get(f.name, f.name) for f in dataclasses.fields(ExperimentConfig)]


def apply_settings(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    """Apply ``(key, value)`` string pairs; unknown keys raise ConfigError."""
    allowed = set(config_keys())
    changes = {}
    for key, value in pairs:
        key = key.strip()
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r}")
        name = _KEY_ALIASES.get(key, key)
        try:
            changes[name] = _coerce(name, value, getattr(cfg, name))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    return cfg.replace(**changes)


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs.append((key, value))
    return apply_settings(base or ExperimentConfig(), pairs)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a (seed, keys...) coordinate."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


# ------------------------------------------------------------------ ledger


@dataclass(eq=False)
class MetricsLedger:
    seed: int
    protocol: str
    accuracy: np.ndarray
    scratch: dict = field(default_factory=dict)
    online: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    wallclock: list = field(default_factory=list)
    tag: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    status: str = "ok"
    snapshots: list = field(default_factory=list, repr=False)

    @property
    def n_tasks(self) -> int:
        return self.accuracy.shape[0] if self.protocol == CIL else len(self.online)

    def final_metrics(self) -> dict:
        out = {}
        if self.protocol == CIL:
            T = self.accuracy.shape[0]
            out["final_A"] = metrics.average_accuracy(self, T)
            out["final_acc_acc"] = metrics.accumulated_accuracy(self, T)
            if T >= 2:
                out["final_BWT"] = metrics.backward_transfer(self, T)
                if len(self.scratch) >= T - 1:
                    out["final_FWT"] = metrics.forward_transfer(self, T)
            if self.metadata.get("task_optima_angle") is not None:
                out["task_optima_angle"] = self.metadata["task_optima_angle"]
        else:
            online = [metrics.online_accuracy(self, i) for i in range(1, len(self.online) + 1)]
            out["mean_online_acc"] = float(np.mean(online))
            w = min(5, len(online))
            out["first5_online_acc"] = float(np.mean(online[:w]))
            out["last5_online_acc"] = float(np.mean(online[-w:]))
        if self.diagnostics:
            for key, value in self.diagnostics[-1].items():
                if value is not None:
                    out[f"final_{key}"] = value
        return out

    def rows(self):
        """CSV rows ``(seed, task_t, task_i, metric, value)`` with 1-based tasks."""
        s = self.seed
        out = []
        if self.protocol == CIL:
            T = self.accuracy.shape[0]
            for t in range(T):
                for i in range(t + 1):
                    out.append((s, t + 1, i + 1, "acc", self.accuracy[t, i]))
            for i, v in sorted(self.scratch.items()):
                out.append((s, i + 1, i + 1, "scratch_acc", v))
            for t in range(1, T + 1):
                st = metrics.stage_metrics(self, t)
                out.append((s, t, "", "avg_acc", st.average_accuracy))
                out.append((s, t, "", "acc_acc", st.accumulated_accuracy))
                if st.bwt is not None:
                    out.append((s, t, "", "bwt", st.bwt))
                if st.fwt is not None:
                    out.append((s, t, "", "fwt", st.fwt))
        for t, batches in enumerate(self.online):
            for j, v in enumerate(batches):
                out.append((s, t + 1, j + 1, "batch_acc", v))
            if batches:
                out.append((s, t + 1, "", "online_acc", metrics.online_accuracy(self, t + 1)))
        for t, diag in enumerate(self.diagnostics):
            for key, value in diag.items():
                if value is not None:
                    out.append((s, t + 1, "", key, value))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "task_t", "task_i", "metric", "value"])
        for row in self.rows():
            w.writerow([row[0], row[1], row[2], row[3], repr(float(row[4]))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "seed": self.seed, "protocol": self.protocol, "status": self.status,
            "tag": self.tag, "config": self.config, "metadata": self.metadata,
            "final": self.final_metrics() if self.status == "ok" else {},
            "accuracy": [[None if math.isnan(v) else v for v in row] for row in self.accuracy.tolist()],
            "scratch": {str(k + 1): v for k, v in sorted(self.scratch.items())},
            "online": self.online,
            "diagnostics": self.diagnostics,
        }


def ledger_from_summary(d: dict) -> MetricsLedger:
    acc = np.array([[np.nan if v is None else v for v in row] for row in d["accuracy"]], dtype=np.float64)
    if acc.size == 0:
        acc = np.zeros((0, 0))
    return MetricsLedger(
        seed=d["seed"], protocol=d["protocol"], accuracy=acc,
        scratch={int(k) - 1: v for k, v in d.get("scratch", {}).items()},
        online=d.get("online", []), diagnostics=d.get("diagnostics", []),
        tag=d.get("tag", {}), config=d.get("config", {}), metadata=d.get("metadata", {}),
        status=d.get("status", "ok"),
    )


# ------------------------------------------------------------ construction


def _base_dataset(cfg: ExperimentConfig, seed: int):
    """(train, test) before any task split."""
    if cfg.dataset == "odor":
        odor = OdorConfig(cfg.n_in, cfg.n_classes, cfg.noise_sigma, cfg.train_per_class,
                          cfg.test_per_class, seed=seed)
        train, test, _ = gen_odor_dataset(odor)
        return train, test
    if cfg.dataset in ("mnist-input", "mnist-label"):
        if not cfg.images or not cfg.labels:
            raise ConfigError("MNIST datasets need 'images' and 'labels' paths")
        return load_idx(cfg.images, cfg.labels), None
    if cfg.dataset == "flyf":
        if not cfg.features:
            raise ConfigError("the flyf dataset needs a 'features' path")
        train = load_feature_file(cfg.features)
        test = load_feature_file(cfg.test_features) if cfg.test_features else None
        return train, test
    raise ConfigError(f"unknown dataset {cfg.dataset!r}")


def build_stream(cfg: ExperimentConfig, seed: int) -> TaskStream:
    train, test = _base_dataset(cfg, seed)
    if cfg.protocol == "stream":
        mode = "input" if cfg.dataset != "mnist-label" else "label"
        size = train.n_dims if mode == "input" else train.n_classes
        n_tasks = cfg.n_tasks or 100
        spec = make_permutation_spec(mode, n_tasks, size, seed)
        return make_permuted_stream(train, spec, n_tasks, cfg.samples_per_task, cfg.batch_size)
    if test is None:
        raise ConfigError("class-incremental runs need a test split")
    class_seed = seed if cfg.shuffle_classes else None
    stream = split_cil(train, test, cfg.classes_per_task, class_seed, cfg.batch_size, cfg.epochs)
    if cfg.gamma is not None:
        order = stream.metadata["class_order"]
        n_max = cfg.imbalance_nmax or int(train.class_counts().min())
        spec = ImbalanceSpec(cfg.gamma, cfg.imbalance_order, n_max, seed)
        train = apply_imbalance(train, spec, order)
        stream = split_cil(train, test, cfg.classes_per_task, class_seed, cfg.batch_size, cfg.epochs)
        stream.metadata["class_sizes"] = train.class_counts().tolist()
    if cfg.n_tasks and cfg.n_tasks != len(stream):
        raise ConfigError(f"config asks for {cfg.n_tasks} tasks but the split yields {len(stream)}")
    return stream


def build_model(cfg: ExperimentConfig, seed: int, input_dim: int, n_classes: int) -> FlyModel:
    return make_model(
        input_dim, n_classes, n_kc=cfg.n_kc, degree=cfg.degree, coding_level=cfg.coding_level,
        hidden=cfg.hidden, ablate_kc=cfg.ablate, seed=seed,
    )


def _make_learner(cfg: ExperimentConfig, model: FlyModel):
    clip = ClipConfig(cfg.clip_norm)
    return make_learner(cfg.strategy, model, cfg.lr, clip, **cfg.hyperparameters())


def evaluate(model: FlyModel, data: Dataset, class_mask=None) -> float:
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty test split")
    pred = predict(model, data.features, class_mask, EVAL_BATCH)
    return float(np.mean(pred == data.labels))


def diagnostics(model: FlyModel, probe: np.ndarray) -> dict:
    """Plasticity diagnostics on a fixed probe batch."""
    trace = forward(model, probe)
    pre_units = [np.abs(h).mean(axis=0) for h in trace.hidden]
    out = {}
    pre = np.concatenate(pre_units) if pre_units else np.zeros(0)
    kc = np.abs(trace.kc_coded).mean(axis=0) if trace.kc_coded is not None else np.zeros(0)
    population = np.concatenate([pre, kc])
    out["dormant"] = metrics.dormant_units(population) if population.size else None
    out["dormant_pre"] = metrics.dormant_units(pre) if pre.size else None
    out["dormant_kc"] = metrics.dormant_units(kc) if kc.size else None
    out["stable_rank"] = metrics.stable_rank(model.pre_layers[-1].weights) if model.pre_layers else None
    out["weight_mag"] = metrics.avg_weight_magnitude(model.parameters())
    out["head_weight_mag"] = metrics.avg_weight_magnitude(model.head.weights)
    return out


def _probe(stream: TaskStream, seed: int) -> np.ndarray:
    first = stream.tasks[0].train
    rng = substream(seed, 9)
    n = min(PROBE_SIZE, len(first))
    return first.features[np.sort(rng.choice(len(first), size=n, replace=False))]


def _class_key(classes) -> tuple:
    return tuple(sorted(int(c) for c in classes))


def _train_task(learner, task_data: Dataset, mask, seed: int, key: tuple, epochs: int,
                batch_size: int, learner_rng):
    for epoch in range(epochs):
        order = substream(seed, 1, epoch, *key).permutation(len(task_data))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            loss, _ = learner.step(task_data.features[idx], task_data.labels[idx], mask, learner_rng)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {start // batch_size}")


class NonFiniteLoss(FlyError, ArithmeticError):
    pass


def run_cil(cfg: ExperimentConfig, seed: int | None = None, stream: TaskStream | None = None,
            snapshot_heads: bool = False, scratch: bool = True) -> MetricsLedger:
    """Train tasks in order and fill the lower-triangular accuracy matrix.

    Evaluation is restricted to classes seen so far. With
    ``cfg.mask_unseen`` the training loss is restricted the same way;
    otherwise it spans the full label space. From-scratch baselines for
    forward transfer are computed too unless ``scratch=False``.
    """
    seed = cfg.seeds[0] if seed is None else seed
    stream = stream or build_stream(cfg, seed)
    if stream.protocol != CIL:
        raise ConfigError("run_cil needs a class-incremental task stream")
    T = len(stream)
    n_classes = stream.n_classes
    model = build_model(cfg, seed, stream.tasks[0].train.n_dims, n_classes)
    learner = _make_learner(cfg, model)
    learner_rng = substream(seed, 5)
    probe = _probe(stream, seed)
    ledger = MetricsLedger(seed, CIL, np.full((T, T), np.nan), config=cfg.echo(),
                           metadata={"eval_masking": "seen-classes", **stream.metadata})
    seen = np.zeros(n_classes, dtype=bool)
    optima_grads = []
    for t, task in enumerate(stream.tasks):
        start = time.perf_counter()
        seen[list(task.classes)] = True
        mask = seen.copy() if cfg.mask_unseen else None
        try:
            _train_task(learner, task.train, mask, seed, _class_key(task.classes), stream.epochs_per_task,
                        stream.batch_size, learner_rng)
        except NonFiniteLoss as exc:
            ledger.status = f"aborted: task {t + 1}: {exc}"
            log.warning("seed %s aborted: %s", seed, ledger.status)
            return ledger
        for i in range(t + 1):
            ledger.accuracy[t, i] = evaluate(model, stream.tasks[i].test, seen)
        if snapshot_heads:
            ledger.snapshots.append(model.copy())
        if T >= 2 and t in (0, T - 1):
            optima_grads.append(head_gradient(model, task.train.features, task.train.labels, mask))
        learner.end_task(task.train.features, mask, learner_rng)
        ledger.diagnostics.append(diagnostics(model, probe))
        ledger.wallclock.append(time.perf_counter() - start)
    if len(optima_grads) == 2 and min(np.linalg.norm(g) for g in optima_grads) >= GRADIENT_NORM_FLOOR:
        ledger.metadata["task_optima_angle"] = gradient_angle(*optima_grads)
    else:
        ledger.metadata["task_optima_angle"] = None
    if scratch:
        ledger.scratch = run_scratch_baselines(cfg, seed, stream)
    return ledger


def run_scratch_baselines(cfg: ExperimentConfig, seed: int | None = None,
                          stream: TaskStream | None = None) -> dict:
    """From-scratch accuracy of every task after the first (0-based keys).

    Each task is learned alone by a freshly initialized model with the same
    seed and budget, and scored over that task's classes only.
    """
    seed = cfg.seeds[0] if seed is None else seed
    stream = stream or build_stream(cfg, seed)
    n_classes = stream.n_classes
    out = {}
    for i, task in enumerate(stream.tasks):
        if i == 0:
            continue
        model = build_model(cfg, seed, task.train.n_dims, n_classes)
        learner = _make_learner(cfg, model)
        mask = np.zeros(n_classes, dtype=bool)
        mask[list(task.classes)] = True
        _train_task(learner, task.train, mask, seed, _class_key(task.classes), stream.epochs_per_task,
                    stream.batch_size, substream(seed, 5))
        out[i] = evaluate(model, task.test, mask)
    return out


def run_streaming(cfg: ExperimentConfig, seed: int | None = None,
                  stream: TaskStream | None = None) -> MetricsLedger:
    """Prequential online training: score each batch, then step on it."""
    seed = cfg.seeds[0] if seed is None else seed
    stream = stream or build_stream(cfg, seed)
    if stream.protocol != STREAMING:
        raise ConfigError("run_streaming needs a streaming task stream")
    model = build_model(cfg, seed, stream.tasks[0].train.n_dims, stream.n_classes)
    learner = _make_learner(cfg, model)
    learner_rng = substream(seed, 5)
    probe = _probe(stream, seed)
    ledger = MetricsLedger(seed, STREAMING, np.zeros((0, 0)), config=cfg.echo(), metadata=dict(stream.metadata))
    for t, task in enumerate(stream.tasks):
        start = time.perf_counter()
        order = substream(seed, 3, t).permutation(len(task.train))
        accs = []
        for b in range(0, len(order), stream.batch_size):
            idx = order[b : b + stream.batch_size]
            y = task.train.labels[idx]
            loss, trace = learner.step(task.train.features[idx], y, None, learner_rng)
            # trace logits were computed before the update
            accs.append(float(np.mean(np.argmax(trace.logits, axis=1) == y)))
            if not math.isfinite(loss):
                ledger.status = f"aborted: task {t + 1}: non-finite loss"
                ledger.online.append(accs)
                return ledger
        ledger.online.append(accs)
        learner.end_task(task.train.features, None, learner_rng)
        ledger.diagnostics.append(diagnostics(model, probe))
        ledger.wallclock.append(time.perf_counter() - start)
    return ledger


def run(cfg: ExperimentConfig, seed: int | None = None) -> MetricsLedger:
    if cfg.protocol == "cil":
        return run_cil(cfg, seed)
    return run_streaming(cfg, seed)


def run_seeds(cfg: ExperimentConfig, threads: int = 1) -> list:
    if threads <= 1:
        return [run(cfg, s) for s in cfg.seeds]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(lambda s: run(cfg, s), cfg.seeds))


SWEEPABLE = {"expansion_ratio", "degree", "coding_level"}


def sweep_config(cfg: ExperimentConfig, parameter: str, value) -> ExperimentConfig:
    if parameter == "expansion_ratio":
        return cfg.replace(n_kc=int(round(value * cfg.n_in)))
    name = _KEY_ALIASES.get(parameter, parameter)
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    if name not in fields or name in ("seeds", "out_dir"):
        raise ConfigError(f"cannot sweep unknown parameter {parameter!r}")
    current = getattr(cfg, name)
    if isinstance(current, bool) or not isinstance(current, (int, float)) and current is not None:
        raise ConfigError(f"parameter {parameter!r} is not a scalar hyperparameter")
    return cfg.replace(**{name: type(current)(value) if current is not None else float(value)})


def sweep(cfg: ExperimentConfig, parameter: str, values, threads: int = 1) -> list:
    """Full experiment per value and seed; ledgers tagged with the swept value."""
    ledgers = []
    for value in values:
        point = sweep_config(cfg, parameter, value)
        for ledger in run_seeds(point, threads):
            ledger.tag = {"parameter": parameter, "value": value}
            ledgers.append(ledger)
    return ledgers
