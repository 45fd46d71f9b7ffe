"""Packed N:M storage and a sparse-times-dense multiply with MAC accounting.

Every (row, block) stores exactly ``n`` (value, in-block offset) slots with
strictly increasing offsets. Blocks holding fewer than ``n`` nonzeros are
padded with zero values at the lowest unused offsets, so the multiply loop
has no data-dependent branches.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .sparsity import NmPattern, apply_mask, nm_violations, project_nm

BENCH_FIELDS = ["rows", "cols", "k", "n", "m", "kind", "median_ns", "macs", "mac_ratio"]


@dataclass(frozen=True, eq=False)
class CompressedNm:
    rows: int
    cols: int
    pattern: NmPattern
    values: np.ndarray  # float32, rows * blocks * n
    indices: np.ndarray  # uint8 in-block offsets, same length

    @property
    def blocks_per_row(self) -> int:
        return math.ceil(self.cols / self.pattern.m) if self.cols else 0

    def shaped(self) -> tuple[np.ndarray, np.ndarray]:
        shape = (self.rows, self.blocks_per_row, self.pattern.n)
        return self.values.reshape(shape), self.indices.reshape(shape)


@dataclass(frozen=True)
class MacReport:
    dense_macs: int
    sparse_macs: int

    @property
    def ratio(self) -> float:
        return self.sparse_macs / self.dense_macs if self.dense_macs else 0.0


class MacCounter:
    """Tally of multiply-accumulates actually issued by :func:`spmm`."""

    def __init__(self):
        self.macs = 0

    def add(self, count: int):
        self.macs += int(count)


def compress(w: np.ndarray, pattern: NmPattern) -> CompressedNm:
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {w.shape}")
    rows, cols = w.shape
    bad = nm_violations(w, pattern)
    if len(bad):
        row, block = bad[0]
        raise ValueError(f"matrix violates {pattern} at row {row}, block {block}")
    n, m = pattern.n, pattern.m
    nblocks = math.ceil(cols / m) if cols else 0
    padded = np.zeros((rows, nblocks * m), dtype=np.float32)
    padded[:, :cols] = w
    blocks = padded.reshape(rows, nblocks, m)
    offsets = np.arange(m)
    # nonzeros rank first, then unused offsets in ascending order
    key = np.where(blocks != 0, offsets, offsets + m)
    chosen = np.sort(np.sort(key, axis=2)[:, :, :n] % m, axis=2)
    values = np.take_along_axis(blocks, chosen, axis=2)
    return CompressedNm(
        rows=rows,
        cols=cols,
        pattern=pattern,
        values=values.reshape(-1).astype(np.float32),
        indices=chosen.reshape(-1).astype(np.uint8),
    )


def validate(c: CompressedNm) -> None:
    n, m = c.pattern.n, c.pattern.m
    expected = c.rows * c.blocks_per_row * n
    if c.values.shape != (expected,) or c.indices.shape != (expected,):
        raise ValueError(f"compressed arrays must have length {expected}")
    if expected == 0:
        return
    values, idx = c.shaped()
    idx = idx.astype(np.int64)
    if idx.max() >= m:
        raise ValueError(f"in-block index out of range 0..{m - 1}")
    if n > 1 and np.any(np.diff(idx, axis=2) <= 0):
        row, block, _ = np.argwhere(np.diff(idx, axis=2) <= 0)[0]
        raise ValueError(f"indices not strictly increasing at row {row}, block {block}")
    cols = np.arange(c.blocks_per_row)[None, :, None] * m + idx
    if np.any((cols >= c.cols) & (values != 0)):
        raise ValueError("nonzero value stored beyond the last column")


def decompress(c: CompressedNm) -> np.ndarray:
    validate(c)
    m = c.pattern.m
    out = np.zeros((c.rows, c.blocks_per_row, m), dtype=np.float32)
    if c.values.size:
        values, idx = c.shaped()
        np.put_along_axis(out, idx.astype(np.int64), values, axis=2)
    return out.reshape(c.rows, c.blocks_per_row * m)[:, : c.cols]


def spmm(c: CompressedNm, x: np.ndarray, counter: MacCounter | None = None) -> np.ndarray:
    """``decompress(c) @ x`` touching only stored slots.

    Accumulates in float64 slot by slot, so every output row sees the same
    summation order regardless of how rows are grouped.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != c.cols:
        raise ValueError(f"cannot multiply {c.rows}x{c.cols} by {x.shape}")
    k = x.shape[1]
    out = np.zeros((c.rows, k), dtype=np.float64)
    if c.values.size == 0 or k == 0:
        return out
    n, m = c.pattern.n, c.pattern.m
    nblocks = c.blocks_per_row
    xp = np.zeros((nblocks * m, k), dtype=np.float64)
    xp[: c.cols] = x
    values, idx = c.shaped()
    values = values.astype(np.float64).reshape(c.rows, -1)
    cols = (np.arange(nblocks)[None, :, None] * m + idx.astype(np.int64)).reshape(c.rows, -1)
    for slot in range(nblocks * n):
        out += values[:, slot, None] * xp[cols[:, slot]]
        if counter is not None:
            counter.add(c.rows * k)
    return out


def mac_report(rows: int, cols: int, k: int, pattern: NmPattern) -> MacReport:
    if min(rows, cols, k) <= 0:
        raise ValueError("mac_report needs positive dimensions")
    return MacReport(
        dense_macs=rows * cols * k,
        sparse_macs=rows * math.ceil(cols / pattern.m) * pattern.n * k,
    )


def _median_ns(fn, repetitions: int, warmup: int) -> int:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - start)
    return int(statistics.median(samples))


def bench(
    shapes: Iterable[tuple[int, int, int]],
    patterns: Sequence[NmPattern],
    repetitions: int = 5,
    warmup: int = 1,
    seed: int = 0,
) -> list[dict]:
    """Median wall time of ``spmm`` and of the dense masked multiply per (shape, pattern).

    The dense reference multiplies the same operands with BLAS in float64 and
    ignores the pattern.
    """
    rng = np.random.default_rng(seed)
    table = []
    for rows, cols, k in shapes:
        w = rng.standard_normal((rows, cols)).astype(np.float32)
        x = rng.standard_normal((cols, k))
        dense_w = w.astype(np.float64)
        dense_ns = _median_ns(lambda: dense_w @ x, repetitions, warmup)
        for pattern in patterns:
            c = compress(apply_mask(w, project_nm(w, pattern)), pattern)
            report = mac_report(rows, cols, k, pattern)
            sparse_ns = _median_ns(lambda: spmm(c, x), repetitions, warmup)
            common = {"rows": rows, "cols": cols, "k": k, "n": pattern.n, "m": pattern.m}
            table.append(
                {**common, "kind": "sparse", "median_ns": sparse_ns,
                 "macs": report.sparse_macs, "mac_ratio": report.ratio}
            )
            table.append(
                {**common, "kind": "dense", "median_ns": dense_ns,
                 "macs": report.dense_macs, "mac_ratio": 1.0}
            )
    return table


def bench_csv(table: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(table)
    return buf.getvalue()
