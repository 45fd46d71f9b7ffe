"""Row-wise N:M masks: projection, random sampling, divergence and accounting.

Blocks run along the column (input) axis of a ``fan_out x fan_in`` weight
matrix. When the column count is not a multiple of ``m`` the final block of
each row is narrower; such a ragged block keeps ``min(n, width)`` entries.
Masks are plain ``uint8`` matrices wrapped in :class:`NmMask`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MASK_HEADER = struct.Struct("<4I")


@dataclass(frozen=True)
class NmPattern:
    n: int
    m: int

    def __post_init__(self):
        if not (isinstance(self.n, (int, np.integer)) and isinstance(self.m, (int, np.integer))):
            raise TypeError(f"N:M pattern needs integers, got {self.n!r}:{self.m!r}")
        if not 1 <= self.n <= self.m:
            raise ValueError(f"invalid N:M pattern {self.n}:{self.m}, need 1 <= N <= M")

    @classmethod
    def parse(cls, text: str) -> "NmPattern":
        try:
            n, m = (int(part) for part in text.strip().split(":"))
        except ValueError:
            raise ValueError(f"cannot parse N:M pattern from {text!r}") from None
        return cls(n, m)

    @property
    def density(self) -> float:
        return self.n / self.m

    @property
    def sparsity(self) -> float:
        return 1.0 - self.n / self.m

    @property
    def is_dense(self) -> bool:
        return self.n == self.m

    def blocks(self, cols: int) -> int:
        return math.ceil(cols / self.m)

    def __str__(self):
        return f"{self.n}:{self.m}"


@dataclass(frozen=True, eq=False)
class NmMask:
    """Binary mask ``bits`` (uint8, rows x cols) tagged with its pattern."""

    bits: np.ndarray
    pattern: NmPattern

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        if bits.size and bits.max() > 1:
            raise ValueError("mask entries must be 0 or 1")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def __eq__(self, other):
        if not isinstance(other, NmMask):
            return NotImplemented
        return self.pattern == other.pattern and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return f"NmMask({self.rows}x{self.cols}, {self.pattern}, active={int(self.bits.sum())})"

    def to_bytes(self) -> bytes:
        header = MASK_HEADER.pack(self.rows, self.cols, self.pattern.n, self.pattern.m)
        return header + self.bits.tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> "NmMask":
        if len(data) < MASK_HEADER.size:
            raise ValueError("mask stream shorter than its 16-byte header")
        rows, cols, n, m = MASK_HEADER.unpack_from(data)
        body = data[MASK_HEADER.size:]
        if len(body) != rows * cols:
            raise ValueError(f"mask body has {len(body)} bytes, header says {rows}x{cols}")
        bits = np.frombuffer(body, dtype=np.uint8).reshape(rows, cols)
        return cls(bits.copy(), NmPattern(n, m))


def _blocked(x: np.ndarray, m: int, fill) -> np.ndarray:
    """Pad columns up to a multiple of ``m`` and reshape to (rows, blocks, m)."""
    rows, cols = x.shape
    nblocks = math.ceil(cols / m)
    pad = nblocks * m - cols
    if pad:
        x = np.concatenate([x, np.full((rows, pad), fill, dtype=x.dtype)], axis=1)
    return x.reshape(rows, nblocks, m)


def nm_violations(x: np.ndarray, pattern: NmPattern) -> np.ndarray:
    """(row, block) pairs whose nonzero count exceeds ``pattern.n``."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {x.shape}")
    if x.shape[1] == 0:
        return np.zeros((0, 2), dtype=np.int64)
    counts = np.count_nonzero(_blocked(x, pattern.m, 0), axis=2)
    return np.argwhere(counts > pattern.n)


def satisfies_nm(x: np.ndarray, pattern: NmPattern) -> bool:
    return len(nm_violations(x, pattern)) == 0


def check_mask(mask: NmMask) -> None:
    """Raise ``ValueError`` naming the first offending (row, block)."""
    bad = nm_violations(mask.bits, mask.pattern)
    if len(bad):
        row, block = bad[0]
        raise ValueError(
            f"mask violates {mask.pattern} at row {row}, block {block} "
            f"({len(bad)} offending blocks)"
        )


def project_nm(w: np.ndarray, pattern: NmPattern) -> NmMask:
    """Keep the ``n`` largest-magnitude entries of every block.

    Equal magnitudes go to the lower column index.
    """
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        bad = np.argwhere(~np.isfinite(w))[0]
        raise ValueError(f"cannot project non-finite weights (first at row {bad[0]}, col {bad[1]})")
    rows, cols = w.shape
    if rows == 0 or cols == 0:
        return NmMask(np.zeros((rows, cols), dtype=np.uint8), pattern)
    # padding sorts after every real magnitude, so ragged blocks keep min(n, width)
    score = _blocked(-np.abs(w.astype(np.float64)), pattern.m, np.inf)
    order = np.argsort(score, axis=2, kind="stable")[:, :, : pattern.n]
    bits = np.zeros(score.shape, dtype=np.uint8)
    np.put_along_axis(bits, order, 1, axis=2)
    return NmMask(bits.reshape(rows, -1)[:, :cols], pattern)


def random_nm_mask(rows: int, cols: int, pattern: NmPattern, seed=None) -> NmMask:
    """Uniformly random N:M mask; ``seed`` may be an int or a numpy Generator."""
    if rows < 0 or cols < 0:
        raise ValueError(f"invalid mask dimensions {rows}x{cols}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if rows == 0 or cols == 0:
        return NmMask(np.zeros((rows, cols), dtype=np.uint8), pattern)
    keys = _blocked(rng.random((rows, cols)), pattern.m, np.inf)
    order = np.argsort(keys, axis=2, kind="stable")[:, :, : pattern.n]
    bits = np.zeros(keys.shape, dtype=np.uint8)
    np.put_along_axis(bits, order, 1, axis=2)
    return NmMask(bits.reshape(rows, -1)[:, :cols], pattern)


def dense_mask(rows: int, cols: int, pattern: NmPattern) -> NmMask:
    return NmMask(np.ones((rows, cols), dtype=np.uint8), pattern)


def apply_mask(w: np.ndarray, mask: NmMask) -> np.ndarray:
    w = np.asarray(w)
    if w.shape != mask.shape:
        raise ValueError(f"weight shape {w.shape} does not match mask shape {mask.shape}")
    return w * mask.bits.astype(w.dtype)


def sad(before: NmMask, after: NmMask) -> int:
    """Sparse architecture divergence: number of positions where two masks differ."""
    if before.shape != after.shape:
        raise ValueError(f"mask shapes differ: {before.shape} vs {after.shape}")
    if before.pattern != after.pattern:
        raise ValueError(f"mask patterns differ: {before.pattern} vs {after.pattern}")
    return int(np.count_nonzero(before.bits != after.bits))


def realized_sparsity(layer_dims: Sequence[tuple[int, int, bool]], pattern: NmPattern) -> float:
    """Analytic weight sparsity of a network whose sparse layers sit at exactly n/m density.

    ``layer_dims`` holds ``(fan_in, fan_out, sparse)`` per layer, biases excluded.
    """
    if not layer_dims:
        raise ValueError("realized_sparsity needs at least one layer")
    if layer_dims[-1][2]:
        raise ValueError("the output layer must be dense")
    total = sum(fan_in * fan_out for fan_in, fan_out, _ in layer_dims)
    sparse = sum(fan_in * fan_out for fan_in, fan_out, is_sparse in layer_dims if is_sparse)
    return pattern.sparsity * sparse / total


@dataclass
class SparsityReport:
    target_sparsity: float
    analytic_realized: float
    counted_realized: float
    per_layer: list[tuple[str, float]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "target_sparsity": self.target_sparsity,
            "analytic_realized": self.analytic_realized,
            "counted_realized": self.counted_realized,
            "per_layer": [list(item) for item in self.per_layer],
        }


def sparsity_report(
    layers: Iterable[tuple[str, np.ndarray, bool]], pattern: NmPattern
) -> SparsityReport:
    """Count zeros in effective weight matrices ``(name, weights, sparse)``."""
    layers = list(layers)
    zeros = total = 0
    per_layer = []
    dims = []
    for name, weights, is_sparse in layers:
        nz = int(weights.size - np.count_nonzero(weights))
        zeros += nz
        total += weights.size
        per_layer.append((name, nz / weights.size if weights.size else 0.0))
        fan_out, fan_in = weights.shape
        dims.append((fan_in, fan_out, is_sparse))
    return SparsityReport(
        target_sparsity=pattern.sparsity,
        analytic_realized=realized_sparsity(dims, pattern),
        counted_realized=zeros / total if total else 0.0,
        per_layer=per_layer,
    )
