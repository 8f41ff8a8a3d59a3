"""Reproduction checks, one function per benchmark criterion.

Each ``check_*`` returns a :class:`Verdict`. Criteria that need training
come in two halves: ``run_*`` executes the experiments and returns ledgers,
``evaluate_*`` judges a set of ledgers (so ``report`` can re-judge saved
runs without retraining).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import analysis
from .checkpoint import decode_checkpoint, encode_checkpoint, restore_learner
from .harness import ExperimentConfig, build_stream, run_cil, run_streaming, sweep_config
from .learners import ClipConfig, make_learner
from .model import CodingConfig, backward, build_projection, cross_entropy_loss, forward, make_model, top_k_code
from .tasks import OdorConfig, decode_flyf, encode_flyf, gen_odor_dataset

DATA_DIR = Path(__file__).resolve().parent / "data"
MNIST_IMAGES = DATA_DIR / "mnist5k-images-idx3-ubyte.gz"
MNIST_LABELS = DATA_DIR / "mnist5k-labels-idx1-ubyte.gz"

CRITERIA = {
    1: "odor class-incremental reproduction",
    2: "coding-level sweep",
    3: "expansion-ratio effects",
    4: "distinct-subset combinatorics",
    5: "random-vector angle distribution",
    6: "FLOPs accounting",
    7: "streaming plasticity",
    8: "property suite",
    9: "imbalance robustness",
    10: "mean-value forgetting identity",
}


@dataclass
class Verdict:
    criterion: int
    passed: bool | None
    checks: dict = field(default_factory=dict)
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def name(self) -> str:
        return CRITERIA[self.criterion]

    def line(self) -> str:
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[self.passed]
        failed = [k for k, v in self.checks.items() if not v]
        tail = f" (failed: {', '.join(failed)})" if failed else ""
        return f"criterion {self.criterion:>2} [{status}] {self.name}{tail}"

    def to_json(self) -> dict:
        return {
            "criterion": self.criterion, "name": self.name,
            "verdict": {True: "pass", False: "fail", None: "not-evaluated"}[self.passed],
            "checks": {k: bool(v) for k, v in self.checks.items()},
            "detail": _plain(self.detail), "seconds": self.seconds,
        }


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def _verdict(criterion, checks, detail, start):
    return Verdict(criterion, all(checks.values()), checks, detail, time.perf_counter() - start)


def _mean_final(ledgers, key):
    vals = [l.final_metrics()[key] for l in ledgers if l.status == "ok"]
    if len(vals) != len(ledgers):
        return math.nan
    return float(np.mean(vals))


def _strictly(values, increasing=True):
    d = np.diff(values)
    return bool(np.all(d > 0) if increasing else np.all(d < 0))


# ----------------------------------------------------------------- configs

ODOR = ExperimentConfig()
ODOR_SI_C = 5.0
ODOR_EWC_LAMBDA = 100.0
STREAM_CLIP = 10.0


def odor_config(strategy="sgd", ablate=False, seeds=(0, 1, 2, 3, 4), **kw) -> ExperimentConfig:
    hp = {"si": {"c": ODOR_SI_C}, "ewc": {"lam": ODOR_EWC_LAMBDA}}.get(strategy, {})
    return ODOR.replace(strategy=strategy, ablate=ablate, seeds=tuple(seeds), **{**hp, **kw})


def stream_config(strategy="ewc", ablate=False, seeds=(0, 1, 2), **kw) -> ExperimentConfig:
    return ExperimentConfig(
        dataset="mnist-input", protocol="stream", strategy=strategy, ablate=ablate,
        images=str(MNIST_IMAGES), labels=str(MNIST_LABELS), n_in=784, hidden=(784, 784),
        n_kc=30000, degree=40, coding_level=0.001, lr=0.05, lam=10.0, c=0.01,
        n_tasks=20, samples_per_task=2000, batch_size=100, clip_norm=STREAM_CLIP, seeds=tuple(seeds),
    ).replace(**kw)


def _run_all(cfg, scratch=True):
    return [run_cil(cfg, s, scratch=scratch) for s in cfg.seeds]


# ------------------------------------------------------------- criterion 1


def run_c1(seeds=(0, 1, 2, 3, 4)) -> dict:
    return {
        (strategy, ablate): _run_all(odor_config(strategy, ablate, seeds))
        for strategy in ("sgd", "si") for ablate in (False, True)
    }


def evaluate_c1(groups: dict, seconds: float | None = None) -> Verdict:
    start = time.perf_counter()
    A = {k: _mean_final(v, "final_A") for k, v in groups.items()}
    bwt = _mean_final(groups[("sgd", True)], "final_BWT")
    fwt_sgd = _mean_final(groups[("sgd", True)], "final_FWT")
    fwt_si = _mean_final(groups[("si", True)], "final_FWT")
    checks = {
        "sgd_fly_gain>=0.15": A[("sgd", False)] - A[("sgd", True)] >= 0.15,
        "si_fly_gain>=0.15": A[("si", False)] - A[("si", True)] >= 0.15,
        "ablated_sgd_bwt<=-0.30": bwt <= -0.30,
        "ablated_sgd_fwt>=-0.05": fwt_sgd >= -0.05,
        "ablated_si_fwt<ablated_sgd_fwt": fwt_si < fwt_sgd,
    }
    if seconds is not None:
        checks["runtime<300s"] = seconds < 300
    detail = {"final_A": {f"{s}{'-ablated' if a else '-fly'}": v for (s, a), v in A.items()},
              "ablated_sgd_bwt": bwt, "ablated_sgd_fwt": fwt_sgd, "ablated_si_fwt": fwt_si,
              "runtime_s": seconds}
    return _verdict(1, checks, detail, start)


def check_c1(seeds=(0, 1, 2, 3, 4)) -> Verdict:
    start = time.perf_counter()
    groups = run_c1(seeds)
    return evaluate_c1(groups, time.perf_counter() - start)


# ------------------------------------------------------------- criterion 2

CODING_LEVELS = (0.001, 0.005, 0.01, 0.05, 0.1, 0.3, 0.5)


def run_c2(seeds=(0, 1, 2)) -> dict:
    base = odor_config("sgd", seeds=seeds)
    return {k: _run_all(sweep_config(base, "coding_level", k)) for k in CODING_LEVELS}


def evaluate_c2(points: dict) -> Verdict:
    start = time.perf_counter()
    ks = sorted(points)
    A = [_mean_final(points[k], "final_A") for k in ks]
    bwt = [_mean_final(points[k], "final_BWT") for k in ks]
    fwt = {k: _mean_final(points[k], "final_FWT") for k in ks}
    rho = float(spearmanr(ks, bwt)[0])
    best = int(np.nanargmax(A))
    checks = {
        "bwt_spearman<-0.8": rho < -0.8,
        "fwt(0.05)-fwt(0.001)>=0.02": fwt[0.05] - fwt[0.001] >= 0.02,
        "accuracy_argmax_interior": 0 < best < len(ks) - 1,
    }
    detail = {"k": ks, "final_A": A, "final_BWT": bwt, "final_FWT": [fwt[k] for k in ks], "spearman": rho}
    return _verdict(2, checks, detail, start)


def check_c2(seeds=(0, 1, 2)) -> Verdict:
    return evaluate_c2(run_c2(seeds))


# ------------------------------------------------------------- criterion 3

EXPANSION_RATIOS = (5, 10, 20, 40)


def run_c3(seeds=(0, 1, 2, 3, 4)) -> dict:
    base = odor_config("sgd", seeds=seeds)
    return {r: _run_all(sweep_config(base, "expansion_ratio", r), scratch=False) for r in EXPANSION_RATIOS}


def evaluate_c3(points: dict) -> Verdict:
    start = time.perf_counter()
    rs = sorted(points)
    angle = [_mean_final(points[r], "task_optima_angle") for r in rs]
    wmag = [_mean_final(points[r], "final_head_weight_mag") for r in rs]
    A = [_mean_final(points[r], "final_A") for r in rs]
    gains = np.diff(A)
    checks = {
        "angle_increasing": _strictly(angle),
        "angle_at_40>=85": angle[-1] >= 85.0,
        "head_weight_decreasing": _strictly(wmag, increasing=False),
        "accuracy_nondecreasing": bool(np.all(gains >= 0)),
        "accuracy_saturating": bool(gains[-1] < gains[0]),
    }
    return _verdict(3, checks, {"ratio": rs, "angle_deg": angle, "head_weight_mag": wmag, "final_A": A}, start)


def check_c3(seeds=(0, 1, 2, 3, 4)) -> Verdict:
    return evaluate_c3(run_c3(seeds))


# ------------------------------------------------------------- criterion 4


def exact_birthday(n: int, r: int, m: int) -> Fraction:
    R = math.comb(n, r)
    p = Fraction(1)
    for i in range(m):
        p *= Fraction(R - i, R)
    return p


def monte_carlo_birthday(n: int, r: int, m: int, trials: int, seed: int = 0) -> float:
    """Fraction of trials in which ``m`` sampled projection rows are all distinct."""
    proj = build_projection(n, trials * m, r, seed)
    # encode each sorted row as an integer so duplicates compare cheaply
    codes = (proj.rows * (n ** np.arange(r))).sum(axis=1).reshape(trials, m)
    codes = np.sort(codes, axis=1)
    return float(np.mean(np.all(np.diff(codes, axis=1) != 0, axis=1)))


def check_c4(trials: int = 1_000_000) -> Verdict:
    start = time.perf_counter()
    argmax = analysis.birthday_argmax(50, 2000)
    worst = 0.0
    for m in range(1, 7):
        p, _ = analysis.birthday_probability(4, 2, m)
        worst = max(worst, abs(p - float(exact_birthday(4, 2, m))))
    mc = monte_carlo_birthday(4, 2, 2, trials)
    target = 5 / 6
    sigma = math.sqrt(target * (1 - target) / trials)
    checks = {
        "argmax_r==25": argmax == 25,
        "exact_rational<=1e-12": worst <= 1e-12,
        "monte_carlo_within_3sigma": abs(mc - target) <= 3 * sigma,
    }
    return _verdict(4, checks, {"argmax": argmax, "max_abs_err": worst, "monte_carlo": mc, "sigma": sigma}, start)


# ------------------------------------------------------------- criterion 5


def check_c5(n_pairs: int = 100_000) -> Verdict:
    start = time.perf_counter()
    integrals = {n: analysis.angle_pdf_integral(n) for n in (2, 10, 100, 2000)}
    variances = [analysis.angle_variance(n) for n in range(2, 201)]
    l1 = {n: analysis.sample_angle_histogram(n, n_pairs, seed=n).l1 for n in (2, 10, 100)}
    seconds = time.perf_counter() - start
    checks = {
        "pdf_integrates_to_1": all(abs(v - 1.0) <= 1e-6 for v in integrals.values()),
        "variance_strictly_decreasing": _strictly(variances, increasing=False),
        "histogram_l1<0.02": all(v < 0.02 for v in l1.values()),
        "runtime<60s": seconds < 60,
    }
    return _verdict(5, checks, {"integrals": integrals, "hist_l1": l1, "runtime_s": seconds}, start)


# ------------------------------------------------------------- criterion 6


def check_c6() -> Verdict:
    start = time.perf_counter()
    rep = analysis.flops_report(50, 2000, 6, 0.01, 10)
    checks = {
        "dense==200000": rep.dense_forward_flops == 200_000,
        "fly==12000": rep.fly_forward_flops == 12_000,
        "head_update==1200": rep.head_update_flops == 1_200,
    }
    return _verdict(6, checks, {"report": rep.__dict__}, start)


# ------------------------------------------------------------- criterion 7


def run_c7(seeds=(0, 1, 2)) -> dict:
    return {
        (strategy, ablate): [run_streaming(stream_config(strategy, ablate, seeds), s) for s in seeds]
        for strategy in ("ewc", "si") for ablate in (False, True)
    }


def evaluate_c7(groups: dict, seconds: float | None = None) -> Verdict:
    start = time.perf_counter()
    m = {k: {key: _mean_final(v, key) for key in
             ("first5_online_acc", "last5_online_acc", "final_dormant", "final_dormant_pre",
              "final_stable_rank", "final_weight_mag")}
         for k, v in groups.items()}
    checks = {}
    for s in ("ewc", "si"):
        fly, abl = m[(s, False)], m[(s, True)]
        checks[f"{s}_ablated_plasticity_loss"] = abl["last5_online_acc"] < abl["first5_online_acc"]
        checks[f"{s}_fly_last5_gain>=0.03"] = fly["last5_online_acc"] - abl["last5_online_acc"] >= 0.03
        checks[f"{s}_dormant_lower"] = fly["final_dormant"] < abl["final_dormant"]
        checks[f"{s}_stable_rank_higher"] = fly["final_stable_rank"] > abl["final_stable_rank"]
        checks[f"{s}_weight_mag_lower"] = fly["final_weight_mag"] < abl["final_weight_mag"]
    if seconds is not None:
        checks["runtime<900s"] = seconds < 900
    detail = {f"{s}-{'ablated' if a else 'fly'}": v for (s, a), v in m.items()}
    detail["runtime_s"] = seconds
    return _verdict(7, checks, detail, start)


def check_c7(seeds=(0, 1, 2)) -> Verdict:
    start = time.perf_counter()
    groups = run_c7(seeds)
    return evaluate_c7(groups, time.perf_counter() - start)


# ------------------------------------------------------------- criterion 8


def _fd_relative_error(model, x, y, eps=1e-6) -> float:
    trace = forward(model, x)
    _, g = cross_entropy_loss(trace.logits, y)
    grads = backward(model, trace, g)
    worst = 0.0
    for p, gp in zip(model.parameters(), grads):
        for i in range(p.size):
            orig = p.flat[i]
            p.flat[i] = orig + eps
            up = cross_entropy_loss(forward(model, x).logits, y)[0]
            p.flat[i] = orig - eps
            down = cross_entropy_loss(forward(model, x).logits, y)[0]
            p.flat[i] = orig
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(gp.flat[i]), 1e-7)
            worst = max(worst, abs(fd - gp.flat[i]) / denom)
    return worst


def _trajectory(strategy, steps=50, **hp):
    model = make_model(20, 4, n_kc=200, degree=5, coding_level=0.05, hidden=(16,), seed=11)
    learner = make_learner(strategy, model, 0.05, ClipConfig(None), **hp)
    data_rng = np.random.default_rng(3)
    x = data_rng.standard_normal((steps, 8, 20))
    y = data_rng.integers(0, 4, (steps, 8))
    rng = np.random.default_rng(4)
    for i in range(steps):
        learner.step(x[i], y[i], None, rng)
        if i % 10 == 9:
            learner.end_task(x[i], None, rng)
    return [p.copy() for p in model.parameters()]


def check_c8() -> Verdict:
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    checks = {}

    sizes_ok = True
    for _ in range(1000):
        m = int(rng.integers(1, 400))
        k = float(rng.uniform(0.001, 1.0))
        coded, active = top_k_code(rng.standard_normal(m), CodingConfig(k, m))
        expected = math.ceil(round(k * m, 9))
        sizes_ok &= active.size == expected and np.count_nonzero(coded) <= expected
    checks["topk_support_size"] = bool(sizes_ok)

    model = make_model(30, 5, n_kc=300, degree=6, coding_level=0.02, seed=1)
    learner = make_learner("sgd", model, 0.05)
    support_ok = True
    for _ in range(100):
        x = rng.standard_normal((16, 30))
        y = rng.integers(0, 5, 16)
        trace = forward(model, x)
        _, g = cross_entropy_loss(trace.logits, y)
        head_grad = backward(model, trace, g)[-1]
        touched = np.flatnonzero(np.any(head_grad != 0, axis=0))
        support_ok &= set(touched.tolist()) <= set(np.unique(trace.active_set).tolist())
        learner.step(x, y, None, rng)
    checks["head_gradient_within_active_set"] = bool(support_ok)

    errs = {}
    for hidden in ((), (7,)):
        m = make_model(10, 3, n_kc=80, degree=3, coding_level=0.1, hidden=hidden, seed=2, head_bias=True)
        x = rng.standard_normal((6, 10))
        y = rng.integers(0, 3, 6)
        errs[len(hidden)] = _fd_relative_error(m, x, y)
    checks["finite_difference<1e-4"] = all(e < 1e-4 for e in errs.values())

    base = _trajectory("sgd")
    off = {
        "ewc": {"lam": 0.0}, "si": {"c": 0.0}, "l2init": {"alpha": 0.0},
        "snp": {"shrink": 0.0, "perturb": 0.0}, "cbp": {"cbp_rate": 0.0},
    }
    identical = {s: all(np.array_equal(a, b) for a, b in zip(base, _trajectory(s, **hp))) for s, hp in off.items()}
    checks["off_switches_match_sgd"] = all(identical.values())

    odor, _, _ = gen_odor_dataset(OdorConfig(train_per_class=20, test_per_class=1, seed=5))
    blob = encode_flyf(odor)
    back = decode_flyf(blob)
    checks["flyf_round_trip"] = encode_flyf(back) == blob and np.array_equal(back.labels, odor.labels)

    model = make_model(12, 4, n_kc=90, degree=4, hidden=(8,), seed=6)
    learner = make_learner("si", model, 0.1, c=1.0)
    learner.step(rng.standard_normal((5, 12)), rng.integers(0, 4, 5), None, rng)
    blob = encode_checkpoint(model, learner)
    m2, rec = decode_checkpoint(blob)
    checks["checkpoint_round_trip"] = encode_checkpoint(m2, restore_learner(m2, rec)) == blob
    return _verdict(8, checks, {"fd_rel_err": errs, "off_switch": identical}, start)


# ------------------------------------------------------------- criterion 9

GAMMAS = (2.0, 10.0)
ORDERS = ("normal", "reverse", "random")


def run_c9(seeds=(0, 1, 2)) -> dict:
    out = {}
    for gamma in GAMMAS:
        for order in ORDERS:
            for strategy in ("sgd", "ewc", "si"):
                for ablate in (False, True):
                    cfg = odor_config(strategy, ablate, seeds, gamma=gamma, imbalance_order=order)
                    out[(gamma, order, strategy, ablate)] = _run_all(cfg, scratch=False)
    return out


def imbalance_ratio(gamma: float, order: str, seed: int = 0) -> tuple:
    """Realized (max/min class-size ratio, min size) on the odor training split."""
    cfg = odor_config(seeds=(seed,), gamma=gamma, imbalance_order=order)
    sizes = np.asarray(build_stream(cfg, seed).metadata["class_sizes"])
    return sizes.max() / sizes.min(), int(sizes.min()), int(sizes.max())


def evaluate_c9(cells: dict) -> Verdict:
    start = time.perf_counter()
    ratio_ok = True
    ratios = {}
    for gamma in GAMMAS:
        for order in ORDERS:
            ratio, lo, hi = imbalance_ratio(gamma, order)
            ratios[f"{gamma:g}-{order}"] = ratio
            # the smallest class is n_max / gamma rounded to an integer
            ratio_ok &= abs(lo - hi / gamma) <= 0.5
    wins = {}
    for (gamma, order, strategy, ablate), ledgers in cells.items():
        if ablate:
            continue
        fly = _mean_final(ledgers, "final_A")
        abl = _mean_final(cells[(gamma, order, strategy, True)], "final_A")
        wins[f"{gamma:g}-{order}-{strategy}"] = (fly, abl)
    checks = {
        "size_ratio_equals_gamma": bool(ratio_ok),
        "fly>=ablated_every_cell": all(f >= a for f, a in wins.values()),
    }
    return _verdict(9, checks, {"ratios": ratios, "final_A_fly_vs_ablated": wins}, start)


def check_c9(seeds=(0, 1, 2)) -> Verdict:
    return evaluate_c9(run_c9(seeds))


# ------------------------------------------------------------ criterion 10


def quadratic_toy(rotation_deg: float, dim: int = 6, seed: int = 0):
    """Two quadratic task losses whose gradients at ``w`` meet at ``rotation_deg``.

    Task 1: ``L1(w) = 0.5 * (w - a)^T H (w - a)``. Task 2's gradient at ``w``
    is a fixed-norm vector at the requested angle to ``grad L1(w)``.
    """
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    H = q @ np.diag(np.linspace(0.5, 2.0, dim)) @ q.T
    a = rng.standard_normal(dim)
    w = a + rng.standard_normal(dim)

    def loss1(v):
        d = v - a
        return 0.5 * float(d @ H @ d)

    def grad1(v):
        return H @ (v - a)

    g1 = grad1(w)
    u = g1 / np.linalg.norm(g1)
    other = rng.standard_normal(dim)
    other -= (other @ u) * u
    other /= np.linalg.norm(other)
    theta = math.radians(rotation_deg)
    g2 = np.linalg.norm(g1) * (math.cos(theta) * u + math.sin(theta) * other)
    return loss1, grad1, w, g2


def check_c10(eta: float = 1e-3) -> Verdict:
    start = time.perf_counter()
    residuals, xis, drops, inner = [], [], [], []
    for deg in (0.0, 30.0, 60.0, 80.0, 89.0):
        loss1, grad1, w, g2 = quadratic_toy(deg)
        xi, res = analysis.mean_value_check(loss1, grad1, w, g2, eta)
        xis.append(xi)
        residuals.append(res)
        drops.append(abs(loss1(w) - loss1(w - eta * g2)))
        inner.append(abs(float(grad1(w) @ g2)))
    ratio = np.array(drops) / (eta * np.array(inner))
    checks = {
        "xi_in_unit_interval": all(0.0 <= x <= 1.0 for x in xis),
        "residual<1e-8": max(residuals) < 1e-8,
        "forgetting_shrinks_toward_orthogonal": _strictly(drops, increasing=False),
        "proportional_to_inner_product": bool(np.all(np.abs(ratio - 1.0) < 0.1)),
    }
    detail = {"xi": xis, "residual": residuals, "loss_change": drops, "inner_product": inner}
    return _verdict(10, checks, detail, start)


# ------------------------------------------------------------------- all

QUICK = {4: check_c4, 5: check_c5, 6: check_c6, 8: check_c8, 10: check_c10}
TRAINED = {1: check_c1, 2: check_c2, 3: check_c3, 7: check_c7, 9: check_c9}


def check(criterion: int) -> Verdict:
    return {**QUICK, **TRAINED}[criterion]()


def main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(prog="python -m flycl.acceptance")
    parser.add_argument("criteria", nargs="*", type=int, help="criterion ids (default: all)")
    parser.add_argument("--quick", action="store_true", help="skip the criteria that train models")
    args = parser.parse_args(argv)
    ids = args.criteria or sorted(QUICK if args.quick else {**QUICK, **TRAINED})
    unknown = [c for c in ids if c not in CRITERIA]
    if unknown:
        parser.error(f"unknown criterion {unknown[0]}")
    verdicts = []
    for c in ids:
        verdicts.append(check(c))
        print(verdicts[-1].line(), flush=True)
    return 0 if all(v.passed for v in verdicts) else 1


if __name__ == "__main__":
    raise SystemExit(main())
