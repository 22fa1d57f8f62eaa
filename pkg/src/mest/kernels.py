"""Compressed-format compute kernels and the microbenchmark harness.

Kernels consume :class:`~mest.sparsity.CompressedLayer` payloads directly
(convolutions are lowered to GEMM via im2col).  Tiling and unrolling only
restructure the loop nest over output columns and rows; the per-element
reduction order is fixed, so every configuration -- and the row-reordered
variant after undoing the permutation -- produces identical bits.

The benchmark harness times forward and backward passes of each scheme
against the dense kernel on the same machine and reports the acceleration
ratio per sparsity point.
"""

from __future__ import annotations

import csv
import platform
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ShapeError
from .sparsity import (
    BLOCK, CHANNEL, PATTERN, UNSTRUCTURED, PATTERN_STYLES,
    CompressedLayer, Scheme, encode, random_mask,
)


@dataclass(frozen=True)
class KernelConfig:
    tile_rows: int = 8
    tile_cols: int = 64
    unroll: int = 1
    reorder: bool = False

    def __post_init__(self):
        if min(self.tile_rows, self.tile_cols, self.unroll) < 1:
            raise ValueError("kernel config parameters must be >= 1")

    def key(self):
        return (self.tile_rows, self.tile_cols, self.unroll, self.reorder)


def _col_slices(m_cols, cfg):
    """Column tiles split further by the unroll factor (order-preserving)."""
    for c0 in range(0, m_cols, cfg.tile_cols):
        c1 = min(c0 + cfg.tile_cols, m_cols)
        width = c1 - c0
        step = max(1, -(-width // cfg.unroll))
        for u0 in range(c0, c1, step):
            yield u0, min(u0 + step, c1)


def _pattern_cols(packed):
    ki, sid = packed >> 3, packed & 7
    return np.array([ki * 9 + r * 3 + c for (r, c) in PATTERN_STYLES[sid]],
                    dtype=np.int64)


def spmm(cl, a, cfg=KernelConfig()):
    """Compressed weights times a dense matrix: (rows, M) output."""
    rows, cols_total = cl.matrix_shape
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != cols_total:
        raise ShapeError(f"expected A with {cols_total} rows, got {a.shape}")
    m_cols = a.shape[1]
    out = np.zeros((rows, m_cols), dtype=np.result_type(cl.values, a))
    v = cl.scheme.variant

    # Accumulation is written as an explicit ascending loop over nonzeros
    # (elementwise multiply-add) instead of a library GEMM, so the reduction
    # order per output element is identical for every tiling configuration.
    if v == UNSTRUCTURED:
        ri = cl.row_index.astype(np.int64)
        ci = cl.indices.astype(np.int64)
        for r0 in range(0, rows, cfg.tile_rows):
            for r in range(r0, min(r0 + cfg.tile_rows, rows)):
                lo, hi = ri[r], ri[r + 1]
                if lo == hi:
                    continue
                for c0, c1 in _col_slices(m_cols, cfg):
                    acc = out[r, c0:c1]
                    for j in range(lo, hi):
                        acc += cl.values[j] * a[ci[j], c0:c1]
    elif v == CHANNEL:
        kept = cl.indices.astype(np.int64)
        unit = cols_total // cl.dims[1]
        col_sel = (kept[:, None] * unit + np.arange(unit)[None, :]).reshape(-1)
        wk = cl.values.reshape(rows, -1)
        for c0, c1 in _col_slices(m_cols, cfg):
            acc = out[:, c0:c1]
            for j in range(col_sel.size):
                acc += wk[:, j:j + 1] * a[col_sel[j], None, c0:c1]
    elif v == BLOCK:
        m, n = cl.scheme.m, cl.scheme.n
        ri = cl.row_index.astype(np.int64)
        bi = cl.indices.astype(np.int64)
        pos = 0
        for br in range(rows // m):
            r0 = br * m
            for bc in bi[ri[br]:ri[br + 1]]:
                blk = cl.values[pos:pos + m * n].reshape(m, n)
                pos += m * n
                for c0, c1 in _col_slices(m_cols, cfg):
                    acc = out[r0:r0 + m, c0:c1]
                    for j in range(n):
                        acc += blk[:, j:j + 1] * a[bc * n + j, None, c0:c1]
    elif v == PATTERN:
        ri = cl.row_index.astype(np.int64)
        pos = 0
        for f in range(rows):
            for packed in cl.indices[ri[f]:ri[f + 1]].astype(np.int64):
                idx = _pattern_cols(packed)
                vals = cl.values[pos:pos + 4]
                pos += 4
                for c0, c1 in _col_slices(m_cols, cfg):
                    acc = out[f, c0:c1]
                    for j in range(4):
                        acc += vals[j] * a[idx[j], c0:c1]
    else:
        raise ValueError(v)
    return out


def dense_ref(w_dense, a):
    """Dense reference oracle (float64 accumulate)."""
    return np.asarray(w_dense, dtype=np.float64) @ np.asarray(a, dtype=np.float64)


def spmm_backward(cl, delta, a_prev, cfg=KernelConfig()):
    """Backward through the compressed layer.

    Returns (delta_prev, g_compressed): the error w.r.t. the input columns
    and the weight gradient emitted directly in the compressed layout,
    sharing the weight index arrays verbatim.
    """
    rows, cols_total = cl.matrix_shape
    delta = np.asarray(delta)
    a_prev = np.asarray(a_prev)
    if delta.shape[0] != rows or a_prev.shape[0] != cols_total \
            or delta.shape[1] != a_prev.shape[1]:
        raise ShapeError("spmm_backward operand shapes inconsistent")
    acc = np.result_type(cl.values, delta, a_prev)
    dprev = np.zeros((cols_total, delta.shape[1]), dtype=acc)
    gvals = np.zeros(cl.nnz, dtype=np.float64)
    v = cl.scheme.variant

    if v == UNSTRUCTURED:
        ri = cl.row_index.astype(np.int64)
        ci = cl.indices.astype(np.int64)
        for r in range(rows):
            lo, hi = ri[r], ri[r + 1]
            if lo == hi:
                continue
            idx = ci[lo:hi]
            np.add.at(dprev, idx, cl.values[lo:hi, None] * delta[r, None, :])
            gvals[lo:hi] = a_prev[idx] @ delta[r]
    elif v == CHANNEL:
        kept = cl.indices.astype(np.int64)
        unit = cols_total // cl.dims[1]
        col_sel = (kept[:, None] * unit + np.arange(unit)[None, :]).reshape(-1)
        wk = cl.values.reshape(rows, -1)
        dprev[col_sel] = wk.T @ delta
        gvals[:] = (delta @ a_prev[col_sel].T).reshape(-1)
    elif v == BLOCK:
        m, n = cl.scheme.m, cl.scheme.n
        ri = cl.row_index.astype(np.int64)
        bi = cl.indices.astype(np.int64)
        pos = 0
        for br in range(rows // m):
            r0 = br * m
            for bc in bi[ri[br]:ri[br + 1]]:
                blk = cl.values[pos:pos + m * n].reshape(m, n)
                csel = slice(bc * n, bc * n + n)
                dprev[csel] += blk.T @ delta[r0:r0 + m]
                gvals[pos:pos + m * n] = (delta[r0:r0 + m] @ a_prev[csel].T).reshape(-1)
                pos += m * n
    elif v == PATTERN:
        ri = cl.row_index.astype(np.int64)
        pos = 0
        for f in range(rows):
            for packed in cl.indices[ri[f]:ri[f + 1]].astype(np.int64):
                idx = _pattern_cols(packed)
                vals = cl.values[pos:pos + 4]
                np.add.at(dprev, idx, vals[:, None] * delta[f, None, :])
                gvals[pos:pos + 4] = a_prev[idx] @ delta[f]
                pos += 4
    else:
        raise ValueError(v)
    return dprev, cl.with_values(gvals.astype(cl.values.dtype))


# ---------------------------------------------------------------------------
# matrix reorder


def storage_rows(cl):
    """Number of storage rows (block-rows for the block scheme)."""
    if cl.scheme.variant == BLOCK:
        return cl.matrix_shape[0] // cl.scheme.m
    return cl.matrix_shape[0]


def matrix_reorder(cl):
    """Group rows with similar nonzero counts (stable sort, descending).

    Returns (perm, cl') where ``perm[i]`` is the original storage row now
    at position i.  ``undo_reorder`` restores original row order exactly.
    """
    if cl.scheme.variant == CHANNEL:
        return np.arange(cl.matrix_shape[0]), cl
    ri = cl.row_index.astype(np.int64)
    counts = np.diff(ri)
    perm = np.argsort(-counts, kind="stable")
    group = {UNSTRUCTURED: 1, PATTERN: 4, BLOCK: cl.scheme.block_size}[cl.scheme.variant]
    new_vals = []
    new_idx = []
    new_counts = []
    for r in perm:
        lo, hi = ri[r], ri[r + 1]
        new_counts.append(hi - lo)
        new_idx.append(cl.indices[lo:hi])
        new_vals.append(cl.values[lo * group:hi * group])
    row_index = np.concatenate([[0], np.cumsum(new_counts)]).astype(cl.row_index.dtype)
    indices = (np.concatenate(new_idx) if new_idx else cl.indices[:0])
    values = (np.concatenate(new_vals) if new_vals else cl.values[:0])
    cl2 = CompressedLayer(cl.scheme, cl.b_w, cl.b_index, cl.dims,
                          row_index, indices, values)
    return perm, cl2


def undo_reorder(out, perm, cl):
    """Map reordered kernel output back to original row order (exact)."""
    if cl.scheme.variant == BLOCK:
        m = cl.scheme.m
        restored = np.empty_like(out)
        for i, r in enumerate(perm):
            restored[r * m:(r + 1) * m] = out[i * m:(i + 1) * m]
        return restored
    restored = np.empty_like(out)
    restored[perm] = out
    return restored


# ---------------------------------------------------------------------------
# auto-tuning and benchmarking

TILE_ROWS_GRID = (4, 8, 16, 32)
TILE_COLS_GRID = (16, 64, 256)
UNROLL_GRID = (1, 2, 4)


def _time_once(fn):
    t0 = time.perf_counter_ns()
    fn()
    return (time.perf_counter_ns() - t0) / 1e3  # microseconds


def _median_time(fn, repeats, warmup=2):
    for _ in range(warmup):
        fn()
    return float(np.median([_time_once(fn) for _ in range(repeats)]))


@dataclass
class TuningTrial:
    config: KernelConfig
    median_us: float


def autotune(shape, scheme, s, budget=9, seed=0, m_cols=64, repeats=5):
    """Grid-search tile/unroll parameters by median-of-``repeats`` timing.

    Visits the grid in lexicographic order up to ``budget`` trials; returns
    (best config, trial log).  Ties break toward the lexicographically
    smaller configuration.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    mask = random_mask(shape, scheme, s, rng)
    w = rng.standard_normal(shape) * mask.bits
    cl = encode(w, mask, b_w=32, b_index=16)
    a = rng.standard_normal((cl.matrix_shape[1], m_cols)).astype(np.float32)
    grid = [KernelConfig(tr, tc, u)
            for tr in TILE_ROWS_GRID for tc in TILE_COLS_GRID for u in UNROLL_GRID]
    trials = []
    for cfg in grid[:budget]:
        t = _median_time(lambda: spmm(cl, a, cfg), repeats)
        trials.append(TuningTrial(cfg, t))
    best = min(trials, key=lambda tr: (tr.median_us, tr.config.key()))
    return best.config, trials


@dataclass
class AccelPoint:
    scheme: str
    sparsity: float
    fwd_us: float
    bwd_us: float
    accel: float


@dataclass
class AccelReport:
    machine: str
    dense_fwd_us: float
    dense_bwd_us: float
    points: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scheme", "sparsity", "fwd_us", "bwd_us", "accel"])
            for p in self.points:
                writer.writerow([p.scheme, p.sparsity, f"{p.fwd_us:.3f}",
                                 f"{p.bwd_us:.3f}", f"{p.accel:.4f}"])

    def to_gnuplot(self, path):
        schemes = sorted({p.scheme for p in self.points})
        with open(path, "w") as fh:
            for sc in schemes:
                fh.write(f"# scheme: {sc}\n")
                for p in self.points:
                    if p.scheme == sc:
                        fh.write(f"{p.sparsity} {p.accel}\n")
                fh.write("\n\n")


# Benchmark default mirrors a 3x3 conv with 64/64 channels on a 16x16 map.
BENCH_LAYER = {"shape": (64, 64, 3, 3), "fmap": 16}


def bench(shape=(64, 64, 3, 3), schemes=("unstructured",), sparsity_grid=(0.5, 0.9),
          repeats=20, warmup=10, fmap=16, seed=0, cfg=KernelConfig(),
          include_dense_control=False):
    """Time forward+backward per scheme and sparsity against the dense kernel."""
    rng = np.random.default_rng(seed)
    f, ch, k1, k2 = shape
    cols_total = ch * k1 * k2
    m_cols = fmap * fmap
    a = rng.standard_normal((cols_total, m_cols)).astype(np.float32)
    delta = rng.standard_normal((f, m_cols)).astype(np.float32)
    w_dense = rng.standard_normal(shape).astype(np.float32)
    wmat = w_dense.reshape(f, -1)

    dense_fwd = _median_time(lambda: wmat @ a, repeats, warmup)
    dense_bwd = _median_time(lambda: (wmat.T @ delta, delta @ a.T), repeats, warmup)
    report = AccelReport(machine=f"{platform.machine()}/{platform.processor() or 'cpu'}",
                         dense_fwd_us=dense_fwd, dense_bwd_us=dense_bwd)

    if include_dense_control:
        cf = _median_time(lambda: wmat @ a, repeats, warmup)
        cb = _median_time(lambda: (wmat.T @ delta, delta @ a.T), repeats, warmup)
        report.points.append(AccelPoint("dense-control", 0.0, cf, cb,
                                        (dense_fwd + dense_bwd) / (cf + cb)))

    for name in schemes:
        scheme = Scheme(name) if isinstance(name, str) else name
        for s in sparsity_grid:
            if s < scheme.min_sparsity():
                continue
            mask = random_mask(shape, scheme, s, rng)
            w = (rng.standard_normal(shape) * mask.bits).astype(np.float32)
            cl = encode(w, mask, b_w=32, b_index=16)
            fwd = _median_time(lambda: spmm(cl, a, cfg), repeats, warmup)
            bwd = _median_time(lambda: spmm_backward(cl, delta, a, cfg),
                               repeats, warmup)
            accel = (dense_fwd + dense_bwd) / (fwd + bwd)
            report.points.append(AccelPoint(scheme.variant, s, fwd, bwd, accel))
    return report
