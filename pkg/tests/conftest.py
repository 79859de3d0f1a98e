from __future__ import annotations

import numpy as np
import pytest


def central_diff(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function over a flat vector (mutated in place)."""
    grad = np.zeros_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        up = fn()
        x[i] = old - h
        down = fn()
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_sgemm_fixture(path, n_groups=60, drop_groups=10, seed=0):
    """Small CSV in the SGEMM layout: 14 integer parameters then 4 run times.

    Columns 3, 8, 11, 12, 13, 14 (1-indexed) are two-level; the other eight take
    a few values. Every group is complete over the 6 binary columns except the
    first ``drop_groups``, which each lose one row.
    """
    r = np.random.default_rng(seed)
    binary = [2, 7, 10, 11, 12, 13]  # 0-indexed
    levels = {2: (16, 32), 7: (1, 2), 10: (0, 1), 11: (0, 1), 12: (0, 1), 13: (0, 1)}
    feat_cols = [c for c in range(14) if c not in binary]
    header = ["MWG", "NWG", "KWG", "MDIMC", "NDIMC", "MDIMA", "NDIMB", "KWI",
              "VWM", "VWN", "STRM", "STRN", "SA", "SB",
              "Run1 (ms)", "Run2 (ms)", "Run3 (ms)", "Run4 (ms)"]
    seen, rows = set(), []
    while len(seen) < n_groups:
        feats = tuple(int(v) for v in r.choice([8, 16, 32, 64], size=len(feat_cols)))
        if feats in seen:
            continue
        seen.add(feats)
        g = len(seen) - 1
        for j in range(64):
            if g < drop_groups and j == g % 64:
                continue
            row = [0] * 14
            for c, v in zip(feat_cols, feats):
                row[c] = v
            for bit, c in enumerate(binary):
                row[c] = levels[c][(j >> bit) & 1]
            base = 1 + sum(feats) / 50 + 0.3 * bin(j).count("1")
            runs = base * (1 + 0.01 * r.random(4))
            rows.append(row + [f"{t:.2f}" for t in runs])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(map(str, row)) + "\n")
    return path


# -- acceptance summary ---------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
