"""Biased observational benchmarks with known potential-outcome tables.

Actions are binary vectors in {0,1}^m. Action index j encodes the vector whose
coordinate i is bit i of j (bit 0 = least significant = coordinate 0), and every
oracle table lists its columns in that order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SETUPS = ("A", "B", "C")
FUNCTIONALS = ("Linear", "Quadratic", "Bilinear")

SYNTHETIC_BENCHMARKS = {
    "linear-a": ("Linear", "A"),
    "linear-b": ("Linear", "B"),
    "linear-c": ("Linear", "C"),
    "quadratic-a": ("Quadratic", "A"),
    "quadratic-b": ("Quadratic", "B"),
    "quadratic-c": ("Quadratic", "C"),
    "bilinear": ("Bilinear", "A"),
}

# 1-indexed SGEMM parameter columns turned into action bits, taken from the head
SGEMM_ACTION_COLUMNS = (8, 11, 12, 13, 14, 3)
SGEMM_N_PARAMS = 14
SGEMM_N_RUNS = 4


class DataError(ValueError):
    pass


def action_matrix(m: int) -> np.ndarray:
    """All 2^m actions as rows, row j = binary expansion of j (LSB first)."""
    j = np.arange(2 ** m)
    return ((j[:, None] >> np.arange(m)[None, :]) & 1).astype(np.float64)


def action_index(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A)
    return (A.astype(np.int64) << np.arange(A.shape[1])).sum(axis=1)


@dataclass(frozen=True)
class SyntheticSpec:
    setup: str = "A"
    functional: str = "Linear"
    d: int = 5
    m: int = 5
    bias_strength: float = 10.0
    noise_std: float = 0.1
    n_train: int = 1000
    n_val: int = 100
    n_test: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.setup not in SETUPS:
            raise ValueError(f"setup must be one of {SETUPS}, got {self.setup!r}")
        if self.functional not in FUNCTIONALS:
            raise ValueError(f"functional must be one of {FUNCTIONALS}")
        if self.d < 1 or self.m < 1:
            raise ValueError("d and m must be positive")
        if self.setup == "B" and self.functional != "Bilinear" and self.d < 2:
            raise ValueError("Setup-B reserves the first feature; needs d >= 2")
        if self.n_train < 2:
            raise ValueError("n_train must be >= 2 to standardize outcomes")

    @classmethod
    def from_benchmark(cls, name: str, **overrides) -> "SyntheticSpec":
        try:
            functional, setup = SYNTHETIC_BENCHMARKS[name.lower()]
        except KeyError:
            raise ValueError(
                f"unknown synthetic benchmark {name!r}; choose from {sorted(SYNTHETIC_BENCHMARKS)}"
            ) from None
        return cls(setup=setup, functional=functional, **overrides)

    @property
    def effective_setup(self) -> str | None:
        return None if self.functional == "Bilinear" else self.setup


@dataclass
class SyntheticParams:
    w_x: np.ndarray
    w_a: np.ndarray
    w_a_prime: np.ndarray | None = None
    W: np.ndarray | None = None

    @classmethod
    def draw(cls, spec: SyntheticSpec, rng: np.random.Generator) -> "SyntheticParams":
        d, m = spec.d, spec.m
        # every vector is always drawn so the stream is identical across setups
        w_x = rng.normal(0.0, math.sqrt(1.0 / d), d)
        w_a = rng.normal(0.0, math.sqrt(1.0 / m), m)
        w_a_prime = rng.normal(0.0, math.sqrt(1.0 / m), m)
        W = rng.normal(0.0, math.sqrt(1.0 / (d * m)), (d, m))
        return cls(
            w_x=w_x,
            w_a=w_a,
            w_a_prime=w_a_prime if spec.effective_setup == "A" else None,
            W=W if spec.functional == "Bilinear" else None,
        )


@dataclass
class ObservationalDataset:
    X: np.ndarray
    A: np.ndarray
    y: np.ndarray
    y_mean: float
    y_std: float

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[1]

    @property
    def actions(self) -> np.ndarray:
        return action_index(self.A)


@dataclass
class OracleTable:
    Y: np.ndarray  # n_eval x 2^m, same standardization as the paired dataset

    @property
    def m(self) -> int:
        return int(round(math.log2(self.Y.shape[1])))

    @property
    def action_matrix(self) -> np.ndarray:
        return action_matrix(self.m)


@dataclass
class Benchmark:
    train: ObservationalDataset
    val: ObservationalDataset
    test: ObservationalDataset
    val_oracle: OracleTable
    test_oracle: OracleTable
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.train, self.val, self.test, self.val_oracle, self.test_oracle))


# -- synthetic ----------------------------------------------------------------


def propensity(x_sigma: float, a_sigma_all, strength: float) -> np.ndarray:
    """Softmax over actions of strength * |x_sigma - a_sigma(a)|."""
    logits = strength * np.abs(x_sigma - np.asarray(a_sigma_all, dtype=np.float64))
    logits = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=-1, keepdims=True)


def _x_projections(X, params: SyntheticParams, spec: SyntheticSpec):
    X = np.atleast_2d(X)
    if spec.effective_setup == "B":
        return X[:, 0], X[:, 1:] @ params.w_x[1:]
    xs = X @ params.w_x
    return xs, xs


def _a_projections(A, params: SyntheticParams, spec: SyntheticSpec):
    A = np.atleast_2d(A)
    a_sigma = A @ params.w_a
    if spec.effective_setup == "A" and spec.functional != "Bilinear":
        return a_sigma, A @ params.w_a_prime
    return a_sigma, a_sigma


def expected_outcome(x, a, params: SyntheticParams, spec: SyntheticSpec):
    """Noiseless outcome for feature rows x and action rows a (broadcast row-wise)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if spec.functional == "Bilinear":
        out = np.einsum("nd,dm,nm->n", x, params.W, a)
    else:
        _, x_u = _x_projections(x, params, spec)
        _, a_u = _a_projections(a, params, spec)
        if spec.functional == "Linear":
            out = a_u - 2.0 * x_u
        else:
            out = a_u ** 2 - 2.0 * x_u
    return out


def _outcome_table(X, params, spec) -> np.ndarray:
    A_all = action_matrix(spec.m)
    if spec.functional == "Bilinear":
        return X @ params.W @ A_all.T
    _, x_u = _x_projections(X, params, spec)
    _, a_u = _a_projections(A_all, params, spec)
    if spec.functional == "Linear":
        return a_u[None, :] - 2.0 * x_u[:, None]
    return a_u[None, :] ** 2 - 2.0 * x_u[:, None]


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of a probability matrix (inverse CDF)."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))[:, None] * cum[:, -1:]
    return np.minimum((cum <= u).sum(axis=1), probs.shape[1] - 1)


def _partition(spec, params, n, rng):
    X = rng.normal(size=(n, spec.d))
    x_sigma, _ = _x_projections(X, params, spec)
    a_sigma_all, _ = _a_projections(action_matrix(spec.m), params, spec)
    probs = propensity(x_sigma[:, None], a_sigma_all[None, :], spec.bias_strength)
    idx = sample_actions(probs, rng)
    table = _outcome_table(X, params, spec)
    y = table[np.arange(n), idx] + spec.noise_std * rng.normal(size=n)
    return X, action_matrix(spec.m)[idx], y, table


def gen_synthetic(spec: SyntheticSpec, params: SyntheticParams | None = None) -> Benchmark:
    """Train/val/test partitions plus noiseless oracle tables for val and test.

    Every partition carries one biased action and a noisy outcome per row;
    outcomes and oracle tables are standardized with training statistics.
    """
    rng = np.random.default_rng(spec.seed)
    drawn = SyntheticParams.draw(spec, rng)
    params = params or drawn
    parts = {
        name: _partition(spec, params, n, rng)
        for name, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test))
    }
    y_train = parts["train"][2]
    y_mean = float(y_train.mean())
    y_std = float(y_train.std())
    if not y_std > 0:
        raise DataError("training outcomes are constant; cannot standardize")

    def ds(name):
        X, A, y, _ = parts[name]
        return ObservationalDataset(X, A, (y - y_mean) / y_std, y_mean, y_std)

    meta = {
        "kind": "synthetic",
        "spec": asdict(spec),
        "seed": spec.seed,
        "y_mean": y_mean,
        "y_std": y_std,
        "d": spec.d,
        "m": spec.m,
    }
    return Benchmark(
        train=ds("train"),
        val=ds("val"),
        test=ds("test"),
        val_oracle=OracleTable((parts["val"][3] - y_mean) / y_std),
        test_oracle=OracleTable((parts["test"][3] - y_mean) / y_std),
        meta=meta,
    )


# -- SGEMM semi-synthetic -----------------------------------------------------


@dataclass
class SgemmTable:
    header: list[str]
    params: np.ndarray  # n x 14 integers
    runs: np.ndarray  # n x 4 elapsed times (ms)

    @property
    def y(self) -> np.ndarray:
        """Average speed: inverse of the mean elapsed time."""
        return SGEMM_N_RUNS / self.runs.sum(axis=1)

    def __len__(self):
        return len(self.runs)


def load_sgemm(path) -> SgemmTable:
    n_cols = SGEMM_N_PARAMS + SGEMM_N_RUNS
    params, runs = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) != n_cols:
            raise DataError(f"{path}: expected {n_cols} columns, header has {len(header)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_cols:
                raise DataError(f"{path}:{line_no}: expected {n_cols} fields, got {len(row)}")
            try:
                params.append([int(v) for v in row[:SGEMM_N_PARAMS]])
                runs.append([float(v) for v in row[SGEMM_N_PARAMS:]])
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: malformed value ({exc})") from None
    if not runs:
        raise DataError(f"{path}: no data rows")
    runs_arr = np.asarray(runs, dtype=np.float64)
    if np.any(runs_arr.sum(axis=1) <= 0):
        bad = int(np.flatnonzero(runs_arr.sum(axis=1) <= 0)[0]) + 2
        raise DataError(f"{path}:{bad}: non-positive total elapsed time")
    return SgemmTable(header, np.asarray(params, dtype=np.int64), runs_arr)


def _standardize_columns(Z):
    mu = Z.mean(axis=0)
    sd = Z.std(axis=0)
    sd[sd == 0] = 1.0
    return (Z - mu) / sd


def build_semi_synthetic(
    table: SgemmTable,
    m: int,
    seed: int = 0,
    bias_strength: float = 10.0,
) -> Benchmark:
    """Biased one-action-per-feature-group subsample of the complete SGEMM table.

    Feature groups (unique non-action parameter settings) are split 80/5/15.
    Each training group contributes one row, its action drawn from
    p(a | x, y) ~ exp(-strength * |y - [x, a] . w|) over the actions recorded for
    that group. Validation and test keep only groups where all 2^m actions were
    recorded; their full outcome vectors form the oracle tables.
    """
    if not 1 <= m <= len(SGEMM_ACTION_COLUMNS):
        raise ValueError(f"m must be in 1..{len(SGEMM_ACTION_COLUMNS)}")
    cols = [c - 1 for c in SGEMM_ACTION_COLUMNS[:m]]
    A_raw = table.params[:, cols]
    A = np.empty_like(A_raw)
    for i, c in enumerate(cols):
        levels = np.unique(A_raw[:, i])
        if len(levels) != 2:
            raise ValueError(
                f"action column {c + 1} ({table.header[c]}) has {len(levels)} distinct values, need 2"
            )
        A[:, i] = (A_raw[:, i] == levels[1]).astype(np.int64)
    feat_cols = [c for c in range(SGEMM_N_PARAMS) if c not in cols]
    X_raw = table.params[:, feat_cols]
    X_std = _standardize_columns(X_raw.astype(np.float64))
    y_raw = table.y
    y_mean, y_std = float(y_raw.mean()), float(y_raw.std())
    y = (y_raw - y_mean) / y_std

    n_act = 2 ** m
    uniq, group = np.unique(X_raw, axis=0, return_inverse=True)
    group = group.ravel()
    G = len(uniq)
    a_idx = action_index(A)
    Y = np.full((G, n_act), np.nan)
    Y[group, a_idx] = y
    present = ~np.isnan(Y)
    complete = present.all(axis=1)
    if not complete.any():
        raise DataError(f"no feature group has all {n_act} actions recorded")
    X_group = np.empty((G, len(feat_cols)))
    X_group[group] = X_std

    rng = np.random.default_rng(seed)
    w = rng.normal(size=len(feat_cols) + m)
    order = rng.permutation(G)
    n_train = G * 4 // 5
    n_val = G // 20
    splits = {
        "train": order[:n_train],
        "val": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }
    A_all = action_matrix(m)
    proj_a = A_all @ w[len(feat_cols):]

    def sample(groups):
        proj = X_group[groups] @ w[: len(feat_cols)]
        lin = proj[:, None] + proj_a[None, :]
        Yg = Y[groups]
        logits = np.where(present[groups], -bias_strength * np.abs(np.nan_to_num(Yg) - lin), -np.inf)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        idx = sample_actions(p, rng)
        return ObservationalDataset(
            X_group[groups], A_all[idx], Yg[np.arange(len(groups)), idx], y_mean, y_std
        )

    train = sample(splits["train"])
    val_groups = splits["val"][complete[splits["val"]]]
    test_groups = splits["test"][complete[splits["test"]]]
    meta = {
        "kind": "semi-synthetic",
        "m": m,
        "d": len(feat_cols),
        "seed": seed,
        "bias_strength": bias_strength,
        "y_mean": y_mean,
        "y_std": y_std,
        "n_groups": int(G),
        "n_complete_groups": int(complete.sum()),
        "action_columns": list(SGEMM_ACTION_COLUMNS[:m]),
    }
    return Benchmark(
        train=train,
        val=sample(val_groups),
        test=sample(test_groups),
        val_oracle=OracleTable(Y[val_groups]),
        test_oracle=OracleTable(Y[test_groups]),
        meta=meta,
    )


# -- files --------------------------------------------------------------------

_FMT = "%.17g"


def write_partition(path, ds: ObservationalDataset) -> None:
    d, m = ds.d, ds.m
    header = ",".join([f"x{i}" for i in range(d)] + [f"a{i}" for i in range(m)] + ["y"])
    body = np.column_stack([ds.X, ds.A, ds.y])
    fmt = [_FMT] * d + ["%d"] * m + [_FMT]
    np.savetxt(path, body, delimiter=",", header=header, comments="", fmt=fmt)


def read_partition(path, y_mean: float = 0.0, y_std: float = 1.0) -> ObservationalDataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    d = sum(h.startswith("x") for h in header)
    m = sum(h.startswith("a") for h in header)
    if header != [f"x{i}" for i in range(d)] + [f"a{i}" for i in range(m)] + ["y"]:
        raise DataError(f"{path}: unexpected header {header}")
    body = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ObservationalDataset(body[:, :d], body[:, d:d + m], body[:, -1], y_mean, y_std)


def write_oracle(path, oracle: OracleTable) -> None:
    n, k = oracle.Y.shape
    rows = np.column_stack(
        [np.repeat(np.arange(n), k), np.tile(np.arange(k), n), oracle.Y.ravel()]
    )
    np.savetxt(
        path, rows, delimiter=",", header="x_row,action_index,y", comments="",
        fmt=["%d", "%d", _FMT],
    )


def read_oracle(path) -> OracleTable:
    with open(path) as fh:
        header = fh.readline().strip()
    if header != "x_row,action_index,y":
        raise DataError(f"{path}: unexpected header {header!r}")
    body = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    rows = body[:, 0].astype(np.int64)
    acts = body[:, 1].astype(np.int64)
    Y = np.full((rows.max() + 1, acts.max() + 1), np.nan)
    Y[rows, acts] = body[:, 2]
    if np.isnan(Y).any():
        raise DataError(f"{path}: oracle table has missing cells")
    return OracleTable(Y)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_benchmark(directory, bench: Benchmark) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in ("train", "val", "test"):
        p = out / f"{name}.csv"
        write_partition(p, getattr(bench, name))
        paths.append(p)
    for name in ("val", "test"):
        p = out / f"{name}_oracle.csv"
        write_oracle(p, getattr(bench, f"{name}_oracle"))
        paths.append(p)
    meta = dict(bench.meta)
    meta["config_hash"] = config_hash(bench.meta)
    p = out / "meta.json"
    p.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    paths.append(p)
    return paths


def load_benchmark(directory) -> Benchmark:
    src = Path(directory)
    meta = json.loads((src / "meta.json").read_text())
    mu, sd = meta["y_mean"], meta["y_std"]
    return Benchmark(
        train=read_partition(src / "train.csv", mu, sd),
        val=read_partition(src / "val.csv", mu, sd),
        test=read_partition(src / "test.csv", mu, sd),
        val_oracle=read_oracle(src / "val_oracle.csv"),
        test_oracle=read_oracle(src / "test_oracle.csv"),
        meta=meta,
    )
