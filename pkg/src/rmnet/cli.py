"""Command-line entry point and the replicated benchmark runner.

Config files are flat ``key = value`` text (``#`` starts a comment); keys are
the long option names with dashes or underscores. Command-line flags override
the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import datagen
from .metrics import evaluate
from .models import load_model, save_model
from .train import METHODS, TrainConfig, fit_g_for, fit_method, write_epoch_log

log = logging.getLogger("rmnet")

METRIC_COLUMNS = ["method", "dataset", "seed", "k", "nmcg", "regret", "mse_u", "er_u", "bound_rhs", "bound_ok"]
METHOD_LABELS = {
    "ridge": "OLS",
    "mdnn": "M-DNN",
    "sdnn": "S-DNN",
    "cfrnet": "CFRNet",
    "rmnet": "RMNet",
    "rmnet_no_mse": "RMNet (w/o MSE)",
    "rmnet_no_er": "RMNet (w/o ER)",
    "rmnet_no_ipm": "RMNet (w/o D_IPM)",
}

TRAIN_KEYS = {
    "alpha_grid", "beta", "lr", "batch_size", "cfr_batch_size", "l2", "max_epochs",
    "patience", "sinkhorn_eps_scale", "sinkhorn_max_iters", "sinkhorn_tol",
    "g_lr", "g_max_epochs", "g_patience",
}
SPEC_KEYS = {"d", "m", "bias_strength", "noise_std", "n_train", "n_val", "n_test"}


@dataclass
class ExperimentConfig:
    benchmark: str = "linear-a"
    methods: tuple[str, ...] = ("rmnet",)
    reps: int = 10
    seed: int = 0
    k: tuple[int, ...] = (1,)
    out: str = "results"
    sgemm_path: str | None = None
    m: int | None = None
    train: dict = field(default_factory=dict)
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.k = tuple(int(k) for k in self.k)
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if not self.methods:
            raise ValueError("at least one method is required")
        for name in self.methods:
            if name not in METHODS:
                raise ValueError(f"unknown method {name!r}; choose from {sorted(METHODS)}")
        if self.is_semi:
            if self.m is None:
                self.m = int(self.benchmark.rsplit("m", 1)[1]) if self.benchmark.startswith("sgemm-m") else 3
            if not self.sgemm_path or not Path(self.sgemm_path).exists():
                raise ValueError(f"SGEMM CSV not found: {self.sgemm_path!r}")
        elif self.benchmark.lower() not in datagen.SYNTHETIC_BENCHMARKS:
            raise ValueError(f"unknown benchmark {self.benchmark!r}")

    @property
    def is_semi(self) -> bool:
        return self.benchmark.lower().startswith("sgemm")

    @property
    def dataset_name(self) -> str:
        return f"sgemm-m{self.m}" if self.is_semi else self.benchmark.lower()

    def fingerprint(self) -> dict:
        d = asdict(self)
        d.pop("out")
        return d


# -- config parsing --------------------------------------------------------------


def read_config_file(path) -> dict:
    out = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _floats(s):
    if isinstance(s, (list, tuple)):
        return tuple(float(v) for v in s)
    return tuple(float(v) for v in str(s).replace("[", "").replace("]", "").split(",") if v.strip())


def _ints(s):
    return tuple(int(v) for v in _floats(s))


def _names(s):
    if isinstance(s, (list, tuple)):
        return tuple(s)
    return tuple(v.strip() for v in str(s).split(",") if v.strip())


_CASTS = {
    "alpha_grid": _floats, "k": _ints, "methods": _names,
    "beta": float, "lr": float, "l2": float, "bias_strength": float, "noise_std": float,
    "sinkhorn_eps_scale": float, "sinkhorn_tol": float, "g_lr": float,
    "reps": int, "seed": int, "m": int, "d": int, "batch_size": int, "cfr_batch_size": int,
    "max_epochs": int, "patience": int, "sinkhorn_max_iters": int, "g_max_epochs": int,
    "g_patience": int, "n_train": int, "n_val": int, "n_test": int,
}


def build_experiment_config(values: dict) -> ExperimentConfig:
    values = {k: v for k, v in values.items() if v is not None}
    unknown = set(values) - TRAIN_KEYS - SPEC_KEYS - {
        "benchmark", "methods", "reps", "seed", "k", "out", "sgemm_path", "m",
    }
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cast = {k: _CASTS.get(k, str)(v) for k, v in values.items()}
    train = {k: cast.pop(k) for k in list(cast) if k in TRAIN_KEYS}
    spec = {k: cast.pop(k) for k in list(cast) if k in SPEC_KEYS - {"m"}}
    if "m" in cast and not str(cast.get("benchmark", "")).startswith("sgemm"):
        spec["m"] = cast.pop("m")
    return ExperimentConfig(train=train, spec=spec, **cast)


# -- experiment -------------------------------------------------------------------


def make_benchmark(config: ExperimentConfig, seed: int, sgemm_table=None) -> datagen.Benchmark:
    if config.is_semi:
        table = sgemm_table or datagen.load_sgemm(config.sgemm_path)
        kw = {k: v for k, v in config.spec.items() if k == "bias_strength"}
        return datagen.build_semi_synthetic(table, config.m, seed=seed, **kw)
    spec = datagen.SyntheticSpec.from_benchmark(config.benchmark, seed=seed, **config.spec)
    return datagen.gen_synthetic(spec)


def _fmt(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean and standard error (sample std / sqrt(R)) per (method, dataset, k)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["dataset"], r["k"]), []).append(r)
    out = []
    for (method, dataset, k), rs in groups.items():
        entry = {"method": method, "dataset": dataset, "k": k, "reps": len(rs)}
        for key in ("nmcg", "regret", "mse_u", "er_u"):
            vals = np.array([r[key] for r in rs], dtype=np.float64)
            finite = vals[np.isfinite(vals)]
            entry[f"{key}_mean"] = float(finite.mean()) if len(finite) else math.nan
            entry[f"{key}_se"] = (
                float(finite.std(ddof=1) / math.sqrt(len(finite))) if len(finite) > 1 else math.nan
            )
            entry[f"{key}_undefined"] = int(len(vals) - len(finite))
        entry["bound_ok"] = all(r["bound_ok"] for r in rs)
        out.append(entry)
    return out


def markdown_table(summary: list[dict], metric: str = "nmcg") -> str:
    datasets = sorted({s["dataset"] for s in summary})
    ks = sorted({s["k"] for s in summary})
    methods = list(dict.fromkeys(s["method"] for s in summary))
    cols = [f"{d} @{k}" if len(ks) > 1 else d for d in datasets for k in ks]
    lines = [
        f"| Method | {' | '.join(cols)} |",
        "|---" * (len(cols) + 1) + "|",
    ]
    index = {(s["method"], s["dataset"], s["k"]): s for s in summary}
    for method in methods:
        cells = []
        for d in datasets:
            for k in ks:
                s = index.get((method, d, k))
                if s is None:
                    cells.append("")
                else:
                    mean, se = s[f"{metric}_mean"], s[f"{metric}_se"]
                    se_txt = "n/a" if math.isnan(se) else f"{se:.2f}"
                    cells.append(f"{mean:.2f} ± {se_txt}")
        lines.append(f"| {METHOD_LABELS.get(method, method)} | {' | '.join(cells)} |")
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    rows: list[dict]
    summary: list[dict]
    failures: list[dict]
    out: Path

    @property
    def ok(self) -> bool:
        return not self.failures and all(r["bound_ok"] for r in self.rows)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = datagen.config_hash(config.fingerprint())
    table = datagen.load_sgemm(config.sgemm_path) if config.is_semi else None
    rows, failures, ledger = [], [], []
    for r in range(config.reps):
        seed = config.seed + r
        bench = make_benchmark(config, seed, table)
        tcfg = TrainConfig(seed=seed, **config.train)
        needs_g = any(mth in ("rmnet", "rmnet_no_mse", "rmnet_no_ipm") for mth in config.methods)
        g = fit_g_for(bench.train, bench.val, tcfg) if needs_g else None
        for method in config.methods:
            run_dir = out / "runs" / method / f"seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            t0 = time.perf_counter()
            try:
                model, info = fit_method(method, bench, tcfg, g=g)
            except Exception as exc:  # recorded, aggregation continues
                log.warning("%s seed %d failed: %s", method, seed, exc)
                failures.append({"method": method, "seed": seed, "error": repr(exc)})
                continue
            meta = {"method": method, "dataset": config.dataset_name, "seed": seed,
                    "config_hash": chash, "alpha": info.get("alpha")}
            save_model(run_dir / "model.ckpt", model, meta)
            if info.get("report") is not None:
                write_epoch_log(run_dir / "epochs.csv", info["report"])
            (run_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
            scores = model.score_all(bench.test.X)
            for k in config.k:
                rep = evaluate(scores, bench.test_oracle.Y, k)
                rows.append({
                    "method": method, "dataset": config.dataset_name, "seed": seed, "k": k,
                    "nmcg": rep.nmcg, "regret": rep.regret, "mse_u": rep.mse_u, "er_u": rep.er_u,
                    "bound_rhs": rep.bound_rhs, "bound_ok": rep.bound_ok,
                })
                if not rep.bound_ok:
                    log.error("regret bound violated: %s seed %d k=%d", method, seed, k)
            ledger.append({**meta, "run_dir": str(run_dir.relative_to(out))})
            print(
                f"[{config.dataset_name}] {method:<13} seed={seed:<4} alpha={info.get('alpha')} "
                f"nmcg@{config.k[0]}={rows[-len(config.k)]['nmcg']:.4f} "
                f"({time.perf_counter() - t0:.1f}s)",
                flush=True,
            )
    write_metrics_csv(out / "metrics.csv", rows)
    summary = aggregate(rows)
    write_summary_csv(out / "summary.csv", summary)
    (out / "summary.md").write_text(
        f"Normalized mean CG (mean ± standard error over {config.reps} replications)\n\n"
        + markdown_table(summary)
    )
    (out / "ledger.json").write_text(json.dumps(
        {"config": config.fingerprint(), "config_hash": chash, "runs": ledger, "failures": failures},
        indent=2, sort_keys=True, default=str,
    ) + "\n")
    if failures:
        log.warning("%d run(s) failed; aggregated over completed runs", len(failures))
    return ExperimentResult(rows, summary, failures, out)


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])


def read_metrics_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({
                "method": r["method"], "dataset": r["dataset"], "seed": int(r["seed"]),
                "k": int(r["k"]), **{c: float(r[c]) for c in ("nmcg", "regret", "mse_u", "er_u", "bound_rhs")},
                "bound_ok": r["bound_ok"] == "true",
            })
    return rows


def write_summary_csv(path, summary):
    if not summary:
        Path(path).write_text("")
        return
    cols = list(summary[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for s in summary:
            w.writerow([_fmt(s[c]) for c in cols])


# -- subcommands ------------------------------------------------------------------


def _train_overrides(args) -> dict:
    out = {}
    for key in ("alpha_grid", "beta", "lr", "max_epochs", "patience", "batch_size", "l2"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = _CASTS[key](v)
    return out


def cmd_gen(args) -> int:
    overrides = {k: getattr(args, k) for k in ("noise_std", "bias_strength") if getattr(args, k) is not None}
    spec = datagen.SyntheticSpec.from_benchmark(args.benchmark, seed=args.seed, **overrides)
    bench = datagen.gen_synthetic(spec)
    bench.meta["benchmark"] = args.benchmark
    for p in datagen.save_benchmark(args.out, bench):
        print(p)
    return 0


def cmd_sgemm_prepare(args) -> int:
    table = datagen.load_sgemm(args.sgemm_path)
    bench = datagen.build_semi_synthetic(table, args.m, seed=args.seed)
    bench.meta["benchmark"] = f"sgemm-m{args.m}"
    for p in datagen.save_benchmark(args.out, bench):
        print(p)
    print(f"training rows: {bench.train.n}")
    return 0


def cmd_train(args) -> int:
    bench = datagen.load_benchmark(args.data)
    cfg = TrainConfig(seed=args.seed, **_train_overrides(args))
    model, info = fit_method(args.method, bench, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"method": args.method, "seed": args.seed, "alpha": info.get("alpha"),
            "data": str(args.data), "data_config_hash": bench.meta.get("config_hash")}
    save_model(out / "model.ckpt", model, meta)
    if info.get("report") is not None:
        write_epoch_log(out / "epochs.csv", info["report"])
    print(f"{args.method}: alpha={info.get('alpha')} ({info['seconds']:.1f}s) -> {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    bench = datagen.load_benchmark(args.data)
    part = getattr(bench, args.partition)
    oracle = getattr(bench, f"{args.partition}_oracle")
    if args.scores:
        scores = datagen.read_oracle(args.scores).Y
        method = "scores"
    else:
        model, meta = load_model(args.checkpoint)
        scores = model.score_all(part.X)
        method = meta.get("method", meta["kind"])
    rows = []
    for k in _ints(args.k):
        rep = evaluate(scores, oracle.Y, k)
        rows.append({"method": method, "dataset": bench.meta.get("benchmark", "data"),
                     "seed": bench.meta.get("seed", 0), "k": k, "nmcg": rep.nmcg,
                     "regret": rep.regret, "mse_u": rep.mse_u, "er_u": rep.er_u,
                     "bound_rhs": rep.bound_rhs, "bound_ok": rep.bound_ok})
        print(f"k={k} nmcg={rep.nmcg:.6f} regret={rep.regret:.6f} mse_u={rep.mse_u:.6f} "
              f"er_u={rep.er_u:.6f} bound_rhs={rep.bound_rhs:.6f} bound_ok={rep.bound_ok}")
    if args.out:
        write_metrics_csv(args.out, rows)
    return 0 if all(r["bound_ok"] for r in rows) else 1


def cmd_bench(args) -> int:
    values = read_config_file(args.config) if args.config else {}
    for key in ("benchmark", "methods", "reps", "seed", "k", "out", "sgemm_path", "m",
                "alpha_grid", "beta", "lr", "max_epochs", "patience"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    config = build_experiment_config(values)
    result = run_experiment(config)
    print(markdown_table(result.summary), end="")
    if result.failures:
        print(f"{len(result.failures)} run(s) failed", file=sys.stderr)
    if not all(r["bound_ok"] for r in result.rows):
        print("regret bound violated in at least one run", file=sys.stderr)
    return 0 if result.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add_train_flags(sp):
        sp.add_argument("--alpha-grid", help="comma-separated alpha values")
        sp.add_argument("--beta", type=float)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--max-epochs", type=int)
        sp.add_argument("--patience", type=int)

    g = sub.add_parser("gen", help="generate a synthetic benchmark")
    g.add_argument("--benchmark", required=True, choices=sorted(datagen.SYNTHETIC_BENCHMARKS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--noise-std", type=float)
    g.add_argument("--bias-strength", type=float)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("sgemm-prepare", help="build the semi-synthetic SGEMM benchmark")
    s.add_argument("--sgemm-path", required=True)
    s.add_argument("--m", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sgemm_prepare)

    t = sub.add_parser("train", help="fit one method on a generated benchmark directory")
    t.add_argument("--data", required=True)
    t.add_argument("--method", default="rmnet", choices=sorted(METHODS))
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint (or a score table) against an oracle")
    e.add_argument("--data", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--scores", help="score table in oracle CSV layout")
    e.add_argument("--partition", choices=("val", "test"), default="test")
    e.add_argument("--k", default="1")
    e.add_argument("--out", help="metrics CSV path")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="replicated benchmark over several methods")
    b.add_argument("--config", help="key = value config file")
    b.add_argument("--benchmark")
    b.add_argument("--methods")
    b.add_argument("--reps", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--k")
    b.add_argument("--out")
    b.add_argument("--sgemm-path")
    b.add_argument("--m", type=int)
    add_train_flags(b)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"rmnet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
