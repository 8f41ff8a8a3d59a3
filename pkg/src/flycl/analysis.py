"""Side computations: random-vector angles, distinct-subset probabilities,
gradient angles at task optima, expansion-unit overlap and FLOP counts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize
from scipy.special import gammaln

from .errors import MissingDataError, UndefinedError
from .model import CodingConfig, backward, cross_entropy_loss, forward

GRADIENT_NORM_FLOOR = 1e-10


# ---------------------------------------------------------------- angles


def _check_dim(n):
    if n < 2:
        raise UndefinedError(f"angle distribution needs dimension n >= 2, got {n}")


def angle_log_normalizer(n: int) -> float:
    _check_dim(n)
    return gammaln(n / 2) - gammaln((n - 1) / 2) - 0.5 * math.log(math.pi)


def angle_pdf(n: int, theta):
    """Density of the angle between two isotropic random vectors in R^n.

    ``Z_n * sin(theta)^(n-2)`` on [0, pi].
    """
    log_z = angle_log_normalizer(n)
    theta = np.asarray(theta, dtype=np.float64)
    if n == 2:
        return np.full_like(theta, math.exp(log_z)) if theta.ndim else math.exp(log_z)
    s = np.sin(theta)
    with np.errstate(divide="ignore"):
        out = np.where(s > 0, np.exp(log_z + (n - 2) * np.log(np.where(s > 0, s, 1.0))), 0.0)
    return out if out.ndim else float(out)


def _quad(f, lo, hi):
    value, _ = integrate.quad(f, lo, hi, points=[math.pi / 2] if lo < math.pi / 2 < hi else None,
                              limit=400, epsabs=1e-13, epsrel=1e-12)
    return value


def angle_pdf_integral(n: int, lo: float = 0.0, hi: float = math.pi) -> float:
    return _quad(lambda t: angle_pdf(n, t), lo, hi)


def angle_variance(n: int) -> float:
    """Variance of the angle about its mean pi/2."""
    return _quad(lambda t: (t - math.pi / 2) ** 2 * angle_pdf(n, t), 0.0, math.pi)


def random_angles(n: int, n_pairs: int, seed: int = 0) -> np.ndarray:
    """Angles between independent standard-normal vector pairs."""
    _check_dim(n)
    rng = np.random.default_rng(seed)
    out = np.empty(n_pairs)
    chunk = max(1, 2_000_000 // n)
    for start in range(0, n_pairs, chunk):
        stop = min(start + chunk, n_pairs)
        u = rng.standard_normal((stop - start, n))
        v = rng.standard_normal((stop - start, n))
        out[start:stop] = vector_angle(u, v)
    return out


def vector_angle(u, v) -> np.ndarray:
    """Row-wise angle in radians between two arrays of vectors."""
    u = np.atleast_2d(u)
    v = np.atleast_2d(v)
    cos = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
    return np.arccos(np.clip(cos, -1.0, 1.0))


@dataclass(frozen=True)
class AngleHistogram:
    edges: np.ndarray
    mass: np.ndarray
    expected: np.ndarray

    @property
    def l1(self) -> float:
        """L1 distance between empirical and analytic bin probabilities."""
        return float(np.abs(self.mass - self.expected).sum())


def sample_angle_histogram(n: int, n_pairs: int, seed: int = 0, bins: int = 20) -> AngleHistogram:
    angles = random_angles(n, n_pairs, seed)
    edges = np.linspace(0.0, math.pi, bins + 1)
    counts, _ = np.histogram(angles, bins=edges)
    expected = np.array([angle_pdf_integral(n, a, b) for a, b in zip(edges[:-1], edges[1:])])
    return AngleHistogram(edges, counts / n_pairs, expected)


# ------------------------------------------------- distinct input subsets


def birthday_probability(n: int, r: int, m: int):
    """Probability that ``m`` independent uniform ``r``-subsets of ``n`` are all distinct.

    Returns ``(p, log_p)``; evaluated as a sum of logs so that huge subset
    counts do not overflow.
    """
    if not 1 <= r <= n:
        raise UndefinedError(f"need 1 <= r <= n, got r={r}, n={n}")
    if m < 1:
        raise UndefinedError("need at least one expansion unit")
    R = math.comb(n, r)
    if m > R:
        return 0.0, -math.inf
    i = np.arange(m, dtype=np.float64)
    log_p = math.fsum(np.log1p(-i / R))
    return math.exp(log_p), log_p


def birthday_argmax(n: int, m: int) -> int:
    values = [birthday_probability(n, r, m)[1] for r in range(1, n + 1)]
    return int(np.argmax(values)) + 1


# --------------------------------------------------------- gradient angles


def _flatten(g) -> np.ndarray:
    if isinstance(g, (list, tuple)):
        return np.concatenate([np.ravel(a) for a in g])
    return np.ravel(np.asarray(g, dtype=np.float64))


def gradient_angle(g1, g2) -> float:
    """Angle in degrees between two gradients (arrays or lists of arrays)."""
    a, b = _flatten(g1), _flatten(g2)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedError("angle with a zero gradient is undefined")
    cos = float(np.dot(a, b) / (na * nb))
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def head_gradient(model, features, labels, class_mask=None) -> np.ndarray:
    """Full-batch mean cross-entropy gradient with respect to the head weights."""
    trace = forward(model, features)
    _, dlogits = cross_entropy_loss(trace.logits, labels, class_mask)
    grads = backward(model, trace, dlogits)
    n_pre = 2 * len(model.pre_layers)
    return _flatten(grads[n_pre:])


def task_optima_gradient_angle(ledger, stream, first: int = 1, last: int | None = None,
                               mask_unseen: bool = False):
    """Angle between grad L_first at w*_first and grad L_last at w*_last.

    Needs head snapshots taken at each task's end (``run_cil(...,
    snapshot_heads=True)``). Returns ``None`` when either gradient is
    numerically zero. Task indices are 1-based.
    """
    last = len(stream) if last is None else last
    snaps = getattr(ledger, "snapshots", None) or []
    if len(snaps) < max(first, last):
        raise MissingDataError("ledger lacks the task-end model snapshots")
    grads = []
    for t in (first, last):
        task = stream.tasks[t - 1]
        mask = None
        if mask_unseen:
            mask = np.zeros(stream.n_classes, dtype=bool)
            for prev in stream.tasks[:t]:
                mask[list(prev.classes)] = True
        grads.append(head_gradient(snaps[t - 1], task.train.features, task.train.labels, mask))
    if min(np.linalg.norm(g) for g in grads) < GRADIENT_NORM_FLOOR:
        return None
    return gradient_angle(grads[0], grads[1])


# ---------------------------------------------------------------- overlap


def active_profile(coded, threshold: float = 0.5) -> set:
    """Units that are active (nonzero) in at least ``threshold`` of the samples."""
    coded = np.atleast_2d(coded)
    rate = np.mean(coded != 0.0, axis=0)
    return set(np.flatnonzero(rate >= threshold).tolist())


def kc_overlap(trace_a, trace_b, threshold: float = 0.5) -> float:
    """Jaccard index of the active profiles of two tasks' expansion codes."""
    a = active_profile(getattr(trace_a, "kc_coded", trace_a), threshold)
    b = active_profile(getattr(trace_b, "kc_coded", trace_b), threshold)
    union = a | b
    if not union:
        raise UndefinedError("both active profiles are empty")
    return len(a & b) / len(union)


# ------------------------------------------------------------------ FLOPs

HEAD_UPDATE_FACTOR = 6


@dataclass(frozen=True)
class FlopsReport:
    dense_forward_flops: int
    fly_forward_flops: int
    head_update_flops: int | None
    notes: str = (
        "dense forward counts one multiply and one add per weight; "
        "fly forward counts one add per binary connection; "
        f"head update counts {HEAD_UPDATE_FACTOR} operations per active-unit/class weight"
    )


def flops_report(n_in: int, n_kc: int, r: int | None = None, k: float | None = None,
                 n_classes: int | None = None) -> FlopsReport:
    dense = 2 * n_in * n_kc
    fly = r * n_kc if r is not None else None
    head = None
    if k is not None and n_classes is not None:
        head = HEAD_UPDATE_FACTOR * CodingConfig(k, n_kc).active_count * n_classes
    return FlopsReport(dense, fly, head)


# ------------------------------------------------ mean-value forgetting check


def mean_value_check(loss_first, grad_first, w, grad_task, eta: float, grid: int = 1001):
    """Find xi in [0, 1] with L1(w) - L1(w') = eta * <grad L1(w - xi*eta*g), g>.

    ``w' = w - eta * g`` with ``g = grad_task``. Scans a grid, then refines
    with Brent's method when the residual changes sign. Returns
    ``(xi, residual)``.
    """
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(grad_task, dtype=np.float64)
    drop = loss_first(w) - loss_first(w - eta * g)

    def residual(xi):
        return eta * float(np.dot(grad_first(w - xi * eta * g), g)) - drop

    xs = np.linspace(0.0, 1.0, grid)
    rs = np.array([residual(x) for x in xs])
    best = int(np.argmin(np.abs(rs)))
    xi, res = xs[best], rs[best]
    sign_change = np.flatnonzero(np.sign(rs[:-1]) * np.sign(rs[1:]) < 0)
    if res != 0.0 and sign_change.size:
        j = sign_change[np.argmin(np.abs(sign_change - best))]
        xi = optimize.brentq(residual, xs[j], xs[j + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps)
        res = residual(xi)
    return float(xi), abs(float(res))
