"""Command-line interface: ``flycl <subcommand> [--config PATH] [--set K=V ...]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import acceptance, analysis
from .errors import ConfigError, FlyError
from .harness import (
    ExperimentConfig,
    build_model,
    build_stream,
    forward,
    ledger_from_summary,
    load_config,
    apply_settings,
    run_scratch_baselines,
    run_seeds,
    sweep_config,
)
from .tasks import OdorConfig, atomic_write_bytes, gen_odor_dataset, load_idx, write_feature_file

log = logging.getLogger("flycl")

COMMANDS = (
    "run-cil", "run-stream", "sweep", "scratch", "analyze-angles", "analyze-birthday",
    "analyze-flops", "analyze-overlap", "gen-odor", "ingest-idx", "report",
)


class UsageError(FlyError):
    pass


class AggregationError(FlyError):
    pass


# ------------------------------------------------------------------ output


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, text.encode("utf-8"))
    log.info("wrote %s", path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(_finite(obj), indent=2, sort_keys=True) + "\n"


def _finite(x):
    if isinstance(x, dict):
        return {str(k): _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(float(x)) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def aggregate(per_seed: dict) -> dict:
    """Mean and sample standard deviation of every metric across seeds."""
    keys = sorted({k for finals in per_seed.values() for k in finals})
    out = {}
    for key in keys:
        vals = [f[key] for f in per_seed.values() if key in f and f[key] is not None]
        if not vals:
            continue
        entry = {"mean": float(np.mean(vals)), "n": len(vals)}
        if len(vals) > 1:
            entry["std"] = float(np.std(vals, ddof=1))
        else:
            entry["std"] = 0.0
            entry["single_seed"] = True
        out[key] = entry
    return out


def _config_key(echo: dict) -> str:
    return json.dumps({k: v for k, v in echo.items() if k not in ("seeds", "out_dir")}, sort_keys=True)


def summarize(ledgers) -> dict:
    """Summary JSON body for ledgers that share one configuration."""
    if not ledgers:
        raise AggregationError("no ledgers to aggregate")
    keys = {_config_key(l.config) for l in ledgers}
    if len(keys) > 1:
        raise AggregationError("ledgers with different configurations cannot share one aggregate")
    per_seed = {str(l.seed): (l.final_metrics() if l.status == "ok" else {}) for l in ledgers}
    status = {str(l.seed): l.status for l in ledgers}
    return {
        "config_echo": ledgers[0].config,
        "per_seed": per_seed,
        "status": status,
        "aggregate": aggregate({s: f for s, f in per_seed.items() if f}),
    }


def write_ledgers(out: Path, ledgers, extra: dict | None = None):
    for l in ledgers:
        _write_text(out / f"ledger_seed{l.seed}.csv", l.to_csv())
        _write_text(out / f"ledger_seed{l.seed}.json", _json_text(l.summary()))
    summary = summarize(ledgers)
    if extra:
        summary.update(extra)
    _write_text(out / "summary.json", _json_text(summary))
    timing = {str(l.seed): l.wallclock for l in ledgers}
    _write_text(out / "timing.json", _json_text(timing))
    return summary


# ---------------------------------------------------------------- commands


def _experiment_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return apply_settings(cfg, args.overrides)


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    return Path(args.out or (cfg.out_dir if cfg else "out"))


def cmd_run(args, protocol: str) -> int:
    cfg = _experiment_config(args)
    if cfg.protocol != protocol:
        cfg = cfg.replace(protocol=protocol, **({"epochs": 1} if protocol == "stream" else {}))
    ledgers = run_seeds(cfg, args.threads)
    write_ledgers(_out_dir(args, cfg), ledgers)
    return 0 if all(l.status == "ok" for l in ledgers) else 1


def cmd_sweep(args) -> int:
    cfg = _experiment_config(args)
    if not args.param or not args.values:
        raise UsageError("sweep needs --param NAME and --values v1,v2,...")
    values = [float(v) for v in args.values.split(",") if v.strip()]
    out = _out_dir(args, cfg)
    ok = True
    for value in values:
        point = sweep_config(cfg, args.param, value)
        ledgers = run_seeds(point, args.threads)
        for l in ledgers:
            l.tag = {"parameter": args.param, "value": value}
        write_ledgers(out / f"{args.param}={value:g}", ledgers, {"tag": ledgers[0].tag})
        ok &= all(l.status == "ok" for l in ledgers)
    return 0 if ok else 1


def cmd_scratch(args) -> int:
    cfg = _experiment_config(args)
    rows = []
    for seed in cfg.seeds:
        for i, acc in sorted(run_scratch_baselines(cfg, seed).items()):
            rows.append((seed, i + 1, acc))
    _write_text(_out_dir(args, cfg) / "scratch.csv", _csv_text(["seed", "task", "scratch_acc"], rows))
    return 0


def _params(pairs, defaults: dict) -> dict:
    out = dict(defaults)
    for key, value in pairs:
        key = key.strip()
        if key not in defaults:
            raise ConfigError(f"unknown parameter {key!r}; expected one of {', '.join(defaults)}")
        out[key] = value.strip()
    return out


def _ints(text) -> list:
    return [int(v) for v in str(text).split(",") if v.strip()]


def cmd_angles(args) -> int:
    p = _params(args.overrides, {"n": "2,10,100,2000", "pairs": "100000", "seed": "0", "bins": "20",
                                 "points": "181"})
    thetas = np.linspace(0.0, math.pi, int(p["points"]))
    pdf_rows, stat_rows = [], []
    for n in _ints(p["n"]):
        for theta, dens in zip(thetas, np.atleast_1d(analysis.angle_pdf(n, thetas))):
            pdf_rows.append((n, float(theta), float(dens)))
        hist = analysis.sample_angle_histogram(n, int(p["pairs"]), int(p["seed"]), int(p["bins"]))
        stat_rows.append((n, analysis.angle_pdf_integral(n), analysis.angle_variance(n), hist.l1))
    out = _out_dir(args)
    _write_text(out / "angle_pdf.csv", _csv_text(["n", "theta", "density"], pdf_rows))
    _write_text(out / "angle_stats.csv", _csv_text(["n", "integral", "variance", "hist_l1"], stat_rows))
    return 0


def cmd_birthday(args) -> int:
    p = _params(args.overrides, {"n": "50", "m": "2000"})
    n, m = int(p["n"]), int(p["m"])
    best = analysis.birthday_argmax(n, m)
    rows = []
    for r in range(1, n + 1):
        prob, logp = analysis.birthday_probability(n, r, m)
        rows.append((r, prob, logp, int(r == best)))
    _write_text(_out_dir(args) / "birthday.csv", _csv_text(["r", "p", "log_p", "argmax"], rows))
    return 0


def cmd_flops(args) -> int:
    p = _params(args.overrides, {"pn": "50", "kc": "2000", "r": "6", "k": "0.01", "classes": "10"})
    rep = analysis.flops_report(int(p["pn"]), int(p["kc"]), int(p["r"]), float(p["k"]), int(p["classes"]))
    rows = [("dense_forward", rep.dense_forward_flops), ("fly_forward", rep.fly_forward_flops),
            ("head_update", rep.head_update_flops)]
    out = _out_dir(args)
    _write_text(out / "flops.csv", _csv_text(["quantity", "flops"], rows))
    _write_text(out / "flops.json", _json_text(rep.__dict__))
    return 0


def cmd_overlap(args) -> int:
    threshold = 0.5
    pairs = []
    for key, value in args.overrides:
        if key.strip() == "threshold":
            threshold = float(value)
        else:
            pairs.append((key, value))
    cfg = apply_settings(load_config(args.config) if args.config else ExperimentConfig(), pairs)
    rows = []
    for seed in cfg.seeds:
        stream = build_stream(cfg, seed)
        model = build_model(cfg, seed, stream.tasks[0].train.n_dims, stream.n_classes)
        if model.ablate_kc:
            raise ConfigError("overlap needs the expansion stage (ablate = false)")
        codes = [forward(model, t.train.features).kc_coded for t in stream.tasks]
        for a in range(len(codes)):
            for b in range(a + 1, len(codes)):
                try:
                    j = analysis.kc_overlap(codes[a], codes[b], threshold)
                except FlyError:
                    j = "undefined"
                rows.append((seed, a + 1, b + 1, j))
    _write_text(_out_dir(args, cfg) / "overlap.csv", _csv_text(["seed", "task_a", "task_b", "jaccard"], rows))
    return 0


def cmd_gen_odor(args) -> int:
    cfg = _experiment_config(args)
    odor = OdorConfig(cfg.n_in, cfg.n_classes, cfg.noise_sigma, cfg.train_per_class, cfg.test_per_class,
                      seed=cfg.seeds[0])
    train, test, _ = gen_odor_dataset(odor)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_feature_file(out / "odor_train.flyf", train)
    write_feature_file(out / "odor_test.flyf", test)
    return 0


def cmd_ingest(args) -> int:
    cfg = _experiment_config(args)
    if not cfg.images or not cfg.labels:
        raise ConfigError("ingest-idx needs images=PATH and labels=PATH")
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_feature_file(out / "mnist.flyf", load_idx(cfg.images, cfg.labels))
    return 0


# ------------------------------------------------------------------ report


def load_ledger_groups(root: Path) -> dict:
    """Ledgers grouped by the directory they were written to."""
    groups = {}
    for path in sorted(root.rglob("ledger_seed*.json")):
        with open(path, encoding="utf-8") as fh:
            ledger = ledger_from_summary(json.load(fh))
        groups.setdefault(path.parent.relative_to(root).as_posix() or ".", []).append(ledger)
    for name, ledgers in groups.items():
        if len({_config_key(l.config) for l in ledgers}) > 1:
            raise AggregationError(f"directory {name!r} mixes ledgers from different configurations")
    return groups


def _mean_std(vals):
    vals = [v for v in vals if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return None, None, 0
    return float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0, len(vals)


def _figure_rows(groups: dict) -> dict:
    figs = {k: [] for k in ("fig2b_acc", "fig2b_bwt", "fig2b_fwt", "fig2c_expansion_ratio", "fig2d_degree",
                            "fig2e_coding_level", "fig3b_angles", "fig3c_wmag", "fig6_metrics")}
    sweep_fig = {"expansion_ratio": "fig2c_expansion_ratio", "degree": "fig2d_degree",
                 "coding_level": "fig2e_coding_level"}
    for name, ledgers in sorted(groups.items()):
        ok = [l for l in ledgers if l.status == "ok"]
        if not ok:
            continue
        cfg = ok[0].config
        ident = (name, cfg.get("strategy"), int(bool(cfg.get("ablate"))))
        tag = ok[0].tag or {}
        if ok[0].protocol == "class-incremental":
            if tag.get("parameter") in sweep_fig:
                param, value = tag["parameter"], tag["value"]
                finals = [l.final_metrics() for l in ok]
                for metric in ("final_A", "final_BWT", "final_FWT"):
                    figs[sweep_fig[param]].append((*ident, value, metric, *_mean_std([f.get(metric) for f in finals])))
                if param == "expansion_ratio":
                    figs["fig3b_angles"].append((*ident, value, *_mean_std([f.get("task_optima_angle") for f in finals])))
                    figs["fig3c_wmag"].append((*ident, value, *_mean_std([f.get("final_head_weight_mag") for f in finals])))
                continue
            T = ok[0].accuracy.shape[0]
            from . import metrics

            for t in range(1, T + 1):
                stages = [metrics.stage_metrics(l, t) for l in ok]
                figs["fig2b_acc"].append((*ident, t, *_mean_std([s.average_accuracy for s in stages])))
                if t >= 2:
                    figs["fig2b_bwt"].append((*ident, t, *_mean_std([s.bwt for s in stages])))
                    figs["fig2b_fwt"].append((*ident, t, *_mean_std([s.fwt for s in stages])))
        else:
            T = min(len(l.online) for l in ok)
            for t in range(T):
                figs["fig6_metrics"].append(
                    (*ident, t + 1, "online_acc", *_mean_std([float(np.mean(l.online[t])) for l in ok])))
                for key in ("dormant", "stable_rank", "weight_mag"):
                    figs["fig6_metrics"].append(
                        (*ident, t + 1, key, *_mean_std([l.diagnostics[t].get(key) for l in ok])))
    return figs


_FIG_HEADERS = {
    "fig2b": ["group", "strategy", "ablate", "task_t", "mean", "std", "n"],
    "fig2c": ["group", "strategy", "ablate", "value", "metric", "mean", "std", "n"],
    "fig3": ["group", "strategy", "ablate", "expansion_ratio", "mean", "std", "n"],
    "fig6": ["group", "strategy", "ablate", "task", "metric", "mean", "std", "n"],
}


def _header(fig: str):
    if fig.startswith("fig2b"):
        return _FIG_HEADERS["fig2b"]
    if fig.startswith("fig2"):
        return _FIG_HEADERS["fig2c"]
    if fig.startswith("fig3"):
        return _FIG_HEADERS["fig3"]
    return _FIG_HEADERS["fig6"]


def _match(groups: dict, cfg: ExperimentConfig, tag=None):
    want = _config_key({k: v for k, v in cfg.echo().items() if k not in ("images", "labels")})
    hits = []
    for ledgers in groups.values():
        echo = {k: v for k, v in ledgers[0].config.items() if k not in ("images", "labels")}
        if _config_key(echo) == want and (tag is None or (ledgers[0].tag or {}).get("value") == tag):
            hits += ledgers
    return hits


def judge_saved(groups: dict) -> list:
    """Verdicts for every criterion; trained criteria use matching saved ledgers."""
    A = acceptance
    verdicts = {c: fn() for c, fn in A.QUICK.items()}

    c1 = {(s, a): _match(groups, A.odor_config(s, a)) for s in ("sgd", "si") for a in (False, True)}
    if all(c1.values()):
        verdicts[1] = A.evaluate_c1(c1)
    base = A.odor_config("sgd")
    c2 = {k: _match(groups, sweep_config(base, "coding_level", k), k) for k in A.CODING_LEVELS}
    if all(c2.values()):
        verdicts[2] = A.evaluate_c2(c2)
    c3 = {r: _match(groups, sweep_config(base, "expansion_ratio", r), r) for r in A.EXPANSION_RATIOS}
    if all(c3.values()):
        verdicts[3] = A.evaluate_c3(c3)
    c7 = {(s, a): _match(groups, A.stream_config(s, a)) for s in ("ewc", "si") for a in (False, True)}
    if all(c7.values()):
        verdicts[7] = A.evaluate_c7(c7)
    c9 = {(g, o, s, a): _match(groups, A.odor_config(s, a, gamma=g, imbalance_order=o))
          for g in A.GAMMAS for o in A.ORDERS for s in ("sgd", "ewc", "si") for a in (False, True)}
    if all(c9.values()):
        verdicts[9] = A.evaluate_c9(c9)
    for c in A.CRITERIA:
        verdicts.setdefault(c, A.Verdict(c, None, detail={"reason": "no matching ledgers"}))
    return [verdicts[c] for c in sorted(verdicts)]


def cmd_report(args) -> int:
    root = Path(args.ledger_dir)
    if not root.is_dir():
        raise ConfigError(f"ledger directory {root} does not exist")
    groups = load_ledger_groups(root)
    out = _out_dir(args) if args.out else root / "report"
    for fig, rows in _figure_rows(groups).items():
        _write_text(out / f"{fig}.csv", _csv_text(_header(fig), rows))
    summary = {name: summarize(ledgers) for name, ledgers in sorted(groups.items())}
    _write_text(out / "summary.json", _json_text(summary))
    verdicts = judge_saved(groups)
    _write_text(out / "acceptance.json", _json_text([v.to_json() for v in verdicts]))
    if not args.quiet:
        for v in verdicts:
            print(v.line())
    return 0


# -------------------------------------------------------------------- main


def _pair(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key, value


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flycl", description="Fly Model continual-learning experiments and analyses.")
    parser.add_argument("command", choices=COMMANDS, metavar="COMMAND", help=", ".join(COMMANDS))
    parser.add_argument("ledger_dir", nargs="?", help="ledger directory (report only)")
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--set", dest="overrides", action="append", type=_pair, default=[],
                        metavar="K=V", help="override one key (repeatable)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for seeds")
    parser.add_argument("--quiet", action="store_true", help="only report errors")
    parser.add_argument("--param", help="swept parameter (sweep only)")
    parser.add_argument("--values", help="comma-separated sweep values (sweep only)")
    return parser


DISPATCH = {
    "run-cil": lambda a: cmd_run(a, "cil"),
    "run-stream": lambda a: cmd_run(a, "stream"),
    "sweep": cmd_sweep,
    "scratch": cmd_scratch,
    "analyze-angles": cmd_angles,
    "analyze-birthday": cmd_birthday,
    "analyze-flops": cmd_flops,
    "analyze-overlap": cmd_overlap,
    "gen-odor": cmd_gen_odor,
    "ingest-idx": cmd_ingest,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"flycl: usage error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    if args.command == "report" and not args.ledger_dir:
        print("flycl: usage error: report needs a ledger directory", file=sys.stderr)
        return 2
    try:
        return DISPATCH[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"flycl: usage error: {exc}", file=sys.stderr)
        return 2
    except (FlyError, OSError, ValueError) as exc:
        print(f"flycl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
