"""Attention-map tooling: head combination, alignment metrics and export.

The diagonality score is a constructed proxy for "the map shows a diagonal
alignment". It is the attention-weighted mean distance between each query's
relative position and the relative positions it attends to, so 0 is a
perfect (resampled) diagonal and uniform attention on a square map scores
about 1/3.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .fileio import atomic_write


def combine_heads_rms(weights: np.ndarray) -> np.ndarray:
    """Root-mean-square over heads: ``H x T x S -> T x S``."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 3 or w.shape[0] < 1:
        raise ValueError(f"expected H x T x S weights, got shape {w.shape}")
    return np.sqrt(np.mean(w * w, axis=0))


def renormalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    sums = m.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("every row needs positive mass to be renormalised")
    return m / sums


def _positions(n: int) -> np.ndarray:
    return np.zeros(1) if n == 1 else np.arange(n) / (n - 1)


def diagonality(m: np.ndarray) -> float:
    """Mean |i/(T-1) - j/(S-1)| under the row-renormalised map."""
    w = renormalize_rows(m)
    T, S = w.shape
    dist = np.abs(_positions(T)[:, None] - _positions(S)[None, :])
    return float((w * dist).sum() / T)


def argmax_path(m: np.ndarray) -> list[tuple[int, int]]:
    """``(i, j*)`` per query row; ties go to the smallest ``j``."""
    m = np.asarray(m)
    return [(i, int(np.argmax(row))) for i, row in enumerate(m)]


def fragment_runs(path: list[tuple[int, int]]) -> list[tuple[int, int, int]]:
    """Split an argmax path into runs of consecutive target frames.

    Returns ``(first query row, first target frame, length)`` per run; a run
    continues while row ``i+1`` selects target frame ``j*(i) + 1``.
    """
    runs: list[tuple[int, int, int]] = []
    for i, j in path:
        if runs:
            i0, j0, n = runs[-1]
            if j == j0 + n and i == i0 + n:
                runs[-1] = (i0, j0, n + 1)
                continue
        runs.append((i, j, 1))
    return runs


def map_to_csv(m: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in np.asarray(m, dtype=np.float64):
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def read_csv_map(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: attention CSV must be a non-empty rectangular matrix")
    return np.array(rows)


def map_to_pgm(m: np.ndarray) -> bytes:
    """Binary greyscale PGM, query rows top to bottom, max cell -> 255."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("PGM export needs a 2-D map")
    T, S = m.shape
    peak = m.max()
    scaled = np.zeros_like(m) if peak <= 0 else np.round(np.clip(m, 0, None) / peak * 255)
    return f"P5\n{S} {T}\n255\n".encode("ascii") + scaled.astype(np.uint8).tobytes()


def export_map(m: np.ndarray, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt == "csv":
        atomic_write(path, map_to_csv(m).encode("utf-8"))
    elif fmt == "pgm":
        atomic_write(path, map_to_pgm(m))
    else:
        raise ValueError(f"unknown export format {fmt!r} (use csv or pgm)")
