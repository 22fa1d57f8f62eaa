"""Sparsity schemes, mask generation, compressed storage, footprint model.

Weight tensors are viewed as GEMM matrices (one row per filter, columns in
channel-major kernel order) for all compressed encodings.  Four schemes are
supported:

* ``unstructured`` -- zeros anywhere; CSR storage.
* ``channel``      -- whole input channels zeroed; index-free storage.
* ``block``        -- fixed m x n blocks on the GEMM view.
* ``pattern``      -- each kept 3x3 kernel holds 4 weights in one of 8
  registered styles; whole-kernel removal supplies the rest of the
  sparsity, and every filter keeps the same number of nonzero kernels.

``footprint_bits`` evaluates the exact per-scheme storage cost of weights,
gradients and indices, with the same granularity rounding that mask
generation uses, so predicted bits equal measured bits of ``encode``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import EncodingError, FeasibilityError, FormatError, ShapeError

# ---------------------------------------------------------------------------
# schemes

UNSTRUCTURED = "unstructured"
CHANNEL = "channel"
BLOCK = "block"
PATTERN = "pattern"

_SCHEME_TAGS = {UNSTRUCTURED: 0, CHANNEL: 1, BLOCK: 2, PATTERN: 3}
_TAG_SCHEMES = {v: k for k, v in _SCHEME_TAGS.items()}

# 8 four-entry styles for 3x3 kernels: the center plus three consecutive
# border cells, clockwise from top-left.  Rotation-complete stand-in set.
_RING = [(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0)]
PATTERN_STYLES = tuple(
    tuple(sorted([(1, 1), _RING[k], _RING[(k + 1) % 8], _RING[(k + 2) % 8]]))
    for k in range(8)
)
_STYLE_LOOKUP = {style: i for i, style in enumerate(PATTERN_STYLES)}

PATTERN_MIN_SPARSITY = 5.0 / 9.0


@dataclass(frozen=True)
class Scheme:
    variant: str
    m: int = 4
    n: int = 1

    def __post_init__(self):
        if self.variant not in _SCHEME_TAGS:
            raise ValueError(f"unknown scheme {self.variant!r}")
        if self.variant == BLOCK and (self.m < 1 or self.n < 1):
            raise ValueError("block dims must be >= 1")

    @property
    def block_size(self):
        return self.m * self.n

    def max_sparsity(self):
        return 1.0 if self.variant != PATTERN else 1.0

    def min_sparsity(self):
        return PATTERN_MIN_SPARSITY if self.variant == PATTERN else 0.0


def round_half_up(x):
    return int(np.floor(x + 0.5))


def matrix_view(arr):
    """Collapse a weight tensor to its 2-D GEMM view (no copy)."""
    if arr.ndim == 2:
        return arr
    if arr.ndim == 4:
        return arr.reshape(arr.shape[0], -1)
    raise ShapeError(f"expected 2-D or 4-D weights, got {arr.ndim}-D")


@dataclass
class Mask:
    """Binary sparsity topology plus the scheme that shaped it."""

    bits: np.ndarray
    scheme: Scheme

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)

    @property
    def shape(self):
        return self.bits.shape

    @property
    def nnz(self):
        return int(self.bits.sum())

    @property
    def size(self):
        return self.bits.size

    def sparsity(self):
        return 1.0 - self.nnz / self.bits.size

    def copy(self):
        return Mask(self.bits.copy(), self.scheme)


def _check_block_dims(shape, scheme):
    mat_rows, mat_cols = matrix_view(np.empty(shape, dtype=bool)).shape
    if mat_rows % scheme.m or mat_cols % scheme.n:
        raise FeasibilityError(
            f"block ({scheme.m},{scheme.n}) does not tile matrix {(mat_rows, mat_cols)}")
    return mat_rows, mat_cols


def _pattern_geometry(shape):
    if len(shape) != 4 or shape[2] != 3 or shape[3] != 3:
        raise FeasibilityError("pattern scheme applies only to 3x3 conv layers")
    return shape[0], shape[1]


def pattern_kept_per_filter(shape, s):
    """Kernels kept in each filter so overall nonzeros hit (1-s)*N."""
    f, ch = _pattern_geometry(shape)
    n = f * ch * 9
    if s < PATTERN_MIN_SPARSITY - 1e-12:
        raise FeasibilityError(
            f"pattern sparsity must be at least {PATTERN_MIN_SPARSITY:.3f}, got {s}")
    kept = round_half_up((1.0 - s) * n / (4.0 * f))
    return min(kept, ch)


def target_nnz(shape, scheme, s):
    """Granularity-rounded nonzero count for sparsity s on this layer."""
    size = int(np.prod(shape))
    if not 0.0 <= s < 1.0 + 1e-12:
        raise FeasibilityError(f"sparsity {s} out of range")
    v = scheme.variant
    if v == UNSTRUCTURED:
        return round_half_up((1.0 - s) * size)
    if v == CHANNEL:
        ch = shape[1]
        return round_half_up((1.0 - s) * ch) * (size // ch)
    if v == BLOCK:
        _check_block_dims(shape, scheme)
        nblocks = size // scheme.block_size
        return round_half_up((1.0 - s) * nblocks) * scheme.block_size
    if v == PATTERN:
        f, _ = _pattern_geometry(shape)
        return pattern_kept_per_filter(shape, s) * 4 * f
    raise ValueError(v)


def random_mask(shape, scheme, s, seed_or_rng):
    """Uniform random mask at the scheme granularity with nnz = target_nnz."""
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(seed_or_rng))
    shape = tuple(shape)
    size = int(np.prod(shape))
    v = scheme.variant
    bits = np.zeros(shape, dtype=bool)
    if v == UNSTRUCTURED:
        k = target_nnz(shape, scheme, s)
        flat = bits.reshape(-1)
        flat[rng.choice(size, size=k, replace=False)] = True
    elif v == CHANNEL:
        ch = shape[1]
        kept = round_half_up((1.0 - s) * ch)
        sel = rng.choice(ch, size=kept, replace=False)
        bits[:, sel] = True
    elif v == BLOCK:
        rows, cols = _check_block_dims(shape, scheme)
        br, bc = rows // scheme.m, cols // scheme.n
        kept = round_half_up((1.0 - s) * br * bc)
        sel = rng.choice(br * bc, size=kept, replace=False)
        mat = bits.reshape(rows, cols)
        blocks = mat.reshape(br, scheme.m, bc, scheme.n)
        for b in sel:
            blocks[b // bc, :, b % bc, :] = True
    elif v == PATTERN:
        f, ch = _pattern_geometry(shape)
        kept = pattern_kept_per_filter(shape, s)
        for fi in range(f):
            kernels = rng.choice(ch, size=kept, replace=False)
            styles = rng.integers(0, 8, size=kept)
            for ki, si in zip(kernels, styles):
                for (r, c) in PATTERN_STYLES[si]:
                    bits[fi, ki, r, c] = True
    else:
        raise ValueError(v)
    mask = Mask(bits, scheme)
    validate_mask(mask)
    return mask


def validate_mask(mask):
    """Raise if the bitset violates the scheme's granularity invariants."""
    bits, scheme = mask.bits, mask.scheme
    v = scheme.variant
    if v == UNSTRUCTURED:
        return
    if v == CHANNEL:
        full = bits.size // bits.shape[1]
        counts = (bits.sum(axis=(0, 2, 3)) if bits.ndim == 4 else bits.sum(axis=0))
        if not np.all((counts == 0) | (counts == full)):
            raise FeasibilityError("channel mask has partially-kept channels")
        return
    if v == BLOCK:
        rows, cols = _check_block_dims(bits.shape, scheme)
        blk = bits.reshape(rows, cols).reshape(
            rows // scheme.m, scheme.m, cols // scheme.n, scheme.n)
        sums = blk.sum(axis=(1, 3))
        if not np.all((sums == 0) | (sums == scheme.block_size)):
            raise FeasibilityError("block mask has partial blocks")
        return
    if v == PATTERN:
        f, ch = _pattern_geometry(bits.shape)
        counts = bits.reshape(f, ch, 9).sum(axis=2)
        if not np.all((counts == 0) | (counts == 4)):
            raise FeasibilityError("pattern kernel with entry count != 4")
        per_filter = (counts == 4).sum(axis=1)
        if per_filter.size and not np.all(per_filter == per_filter[0]):
            raise FeasibilityError("pattern filters keep unequal kernel counts")
        for fi, ki in zip(*np.nonzero(counts == 4)):
            style = tuple(sorted(map(tuple, np.argwhere(bits[fi, ki]))))
            if style not in _STYLE_LOOKUP:
                raise FeasibilityError(f"unregistered pattern style at {(fi, ki)}")
        return
    raise ValueError(v)


def matrix_like_channel_flags(bits):
    """Per-channel kept flags for a channel-scheme mask."""
    if bits.ndim == 4:
        return bits.any(axis=(0, 2, 3))
    return bits.any(axis=0)


# ---------------------------------------------------------------------------
# compressed storage


def _index_dtype(b_index):
    if b_index <= 8:
        return np.uint8
    if b_index <= 16:
        return np.uint16
    if b_index <= 32:
        return np.uint32
    raise EncodingError(f"unsupported index width {b_index}")


def _value_dtype(b_w):
    if b_w == 32:
        return np.float32
    if b_w == 64:
        return np.float64
    raise EncodingError(f"unsupported weight width {b_w}")


@dataclass
class CompressedLayer:
    """Scheme-specific compressed encoding of one layer's weights."""

    scheme: Scheme
    b_w: int
    b_index: int
    dims: tuple  # (F, Ch, K, K) for conv; (out, in, 1, 1) for fc
    row_index: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    @property
    def nnz(self):
        return int(self.values.size)

    @property
    def matrix_shape(self):
        f, ch, k1, k2 = self.dims
        return (f, ch * k1 * k2)

    def value_bits(self):
        return self.nnz * self.b_w

    def index_bits(self):
        """Index storage under the footprint model (channel is index-free)."""
        if self.scheme.variant == CHANNEL:
            return 0
        return (self.indices.size + self.row_index.size) * self.b_index

    def with_values(self, values):
        values = np.asarray(values, dtype=_value_dtype(self.b_w))
        if values.shape != self.values.shape:
            raise ShapeError("replacement values shape mismatch")
        return CompressedLayer(self.scheme, self.b_w, self.b_index, self.dims,
                               self.row_index, self.indices, values)


def _check_range(arr, b_index, what):
    limit = (1 << b_index) - 1
    if arr.size and int(arr.max(initial=0)) > limit:
        raise EncodingError(f"{what} {int(arr.max())} exceeds {b_index}-bit range")


def encode(w, mask, b_w=32, b_index=8):
    """Compress w on the mask support; lossless together with ``decode``."""
    validate_mask(mask)
    if w.shape != mask.shape:
        raise ShapeError("weights/mask shape mismatch")
    scheme = mask.scheme
    vdt = _value_dtype(b_w)
    idt = _index_dtype(b_index)
    dims = w.shape if w.ndim == 4 else (w.shape[0], w.shape[1], 1, 1)
    mat = matrix_view(np.asarray(w))
    bits = matrix_view(mask.bits)
    v = scheme.variant

    if v == UNSTRUCTURED:
        rows, cols = np.nonzero(bits)  # row-major order
        counts = np.bincount(rows, minlength=mat.shape[0])
        row_index = np.concatenate([[0], np.cumsum(counts)])
        _check_range(cols, b_index, "column index")
        _check_range(row_index, b_index, "row index")
        return CompressedLayer(scheme, b_w, b_index, dims,
                               row_index.astype(idt), cols.astype(idt),
                               mat[rows, cols].astype(vdt))

    if v == CHANNEL:
        kept = np.flatnonzero(matrix_like_channel_flags(mask.bits))
        _check_range(kept, b_index, "channel index")
        unit = mat.shape[1] // dims[1]
        col_sel = (kept[:, None] * unit + np.arange(unit)[None, :]).reshape(-1)
        values = mat[:, col_sel].astype(vdt)
        return CompressedLayer(scheme, b_w, b_index, dims,
                               np.zeros(0, dtype=idt), kept.astype(idt),
                               values.reshape(-1))

    if v == BLOCK:
        m, n = scheme.m, scheme.n
        rows, cols = bits.shape
        blk = bits.reshape(rows // m, m, cols // n, n)
        kept = blk[:, 0, :, 0]  # whole blocks, any cell representative
        vals = []
        idx = []
        counts = []
        wblk = mat.reshape(rows // m, m, cols // n, n)
        for br in range(rows // m):
            kb = np.flatnonzero(kept[br])
            counts.append(kb.size)
            idx.append(kb)
            for bc in kb:
                vals.append(wblk[br, :, bc, :].reshape(-1))
        row_index = np.concatenate([[0], np.cumsum(counts)])
        indices = np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)
        _check_range(indices, b_index, "block index")
        _check_range(row_index, b_index, "row index")
        values = (np.concatenate(vals) if vals else np.zeros(0)).astype(vdt)
        return CompressedLayer(scheme, b_w, b_index, dims,
                               row_index.astype(idt), indices.astype(idt), values)

    if v == PATTERN:
        f, ch = dims[0], dims[1]
        kcounts = mask.bits.reshape(f, ch, 9).sum(axis=2)
        vals = []
        idx = []
        counts = []
        for fi in range(f):
            kernels = np.flatnonzero(kcounts[fi] == 4)
            counts.append(kernels.size)
            for ki in kernels:
                style_cells = tuple(sorted(map(tuple, np.argwhere(mask.bits[fi, ki]))))
                sid = _STYLE_LOOKUP[style_cells]
                idx.append(ki * 8 + sid)  # style packed in the 3 low bits
                vals.append([w[fi, ki, r, c] for (r, c) in PATTERN_STYLES[sid]])
        row_index = np.concatenate([[0], np.cumsum(counts)])
        indices = np.asarray(idx, dtype=np.int64)
        _check_range(indices, b_index, "kernel index")
        _check_range(row_index, b_index, "row index")
        values = (np.concatenate(vals) if vals else np.zeros(0)).astype(vdt)
        return CompressedLayer(scheme, b_w, b_index, dims,
                               row_index.astype(idt), indices.astype(idt), values)

    raise ValueError(v)


def decode(cl):
    """Inverse of ``encode``: rebuild the dense weights and their mask."""
    f, ch, k1, k2 = cl.dims
    # fc layers were stored with trailing unit dims
    shape = (f, ch) if k1 == 1 and k2 == 1 else (f, ch, k1, k2)
    w = np.zeros(shape, dtype=np.float64)
    bits = np.zeros(shape, dtype=bool)
    mat = matrix_view(w)
    bmat = matrix_view(bits)
    v = cl.scheme.variant

    if v == UNSTRUCTURED:
        for r in range(mat.shape[0]):
            lo, hi = int(cl.row_index[r]), int(cl.row_index[r + 1])
            cols = cl.indices[lo:hi].astype(np.int64)
            mat[r, cols] = cl.values[lo:hi]
            bmat[r, cols] = True
    elif v == CHANNEL:
        kept = cl.indices.astype(np.int64)
        unit = mat.shape[1] // ch
        col_sel = (kept[:, None] * unit + np.arange(unit)[None, :]).reshape(-1)
        mat[:, col_sel] = cl.values.reshape(mat.shape[0], -1)
        bmat[:, col_sel] = True
    elif v == BLOCK:
        m, n = cl.scheme.m, cl.scheme.n
        rows, cols = mat.shape
        wblk = mat.reshape(rows // m, m, cols // n, n)
        bblk = bmat.reshape(rows // m, m, cols // n, n)
        pos = 0
        for br in range(rows // m):
            lo, hi = int(cl.row_index[br]), int(cl.row_index[br + 1])
            for bc in cl.indices[lo:hi].astype(np.int64):
                wblk[br, :, bc, :] = cl.values[pos:pos + m * n].reshape(m, n)
                bblk[br, :, bc, :] = True
                pos += m * n
    elif v == PATTERN:
        pos = 0
        for fi in range(f):
            lo, hi = int(cl.row_index[fi]), int(cl.row_index[fi + 1])
            for packed in cl.indices[lo:hi].astype(np.int64):
                ki, sid = packed >> 3, packed & 7
                for (r, c), val in zip(PATTERN_STYLES[sid], cl.values[pos:pos + 4]):
                    w[fi, ki, r, c] = val
                    bits[fi, ki, r, c] = True
                pos += 4
    else:
        raise ValueError(v)
    return w, Mask(bits, cl.scheme)


_HEADER = struct.Struct("<BBBIIIII")  # tag, b_w, b_index, dims x4, nnz


def compressed_to_bytes(cl):
    """Little-endian on-disk layout: header, row_index, indices, values."""
    tag = _SCHEME_TAGS[cl.scheme.variant]
    out = bytearray(_HEADER.pack(tag, cl.b_w, cl.b_index, *cl.dims, cl.nnz))
    if cl.scheme.variant == BLOCK:
        out += struct.pack("<BB", cl.scheme.m, cl.scheme.n)
    idt = _index_dtype(cl.b_index)
    out += np.ascontiguousarray(cl.row_index, dtype=idt).tobytes()
    out += np.ascontiguousarray(cl.indices, dtype=idt).tobytes()
    out += np.ascontiguousarray(cl.values, dtype=_value_dtype(cl.b_w)).tobytes()
    return bytes(out)


def compressed_from_bytes(buf, offset=0):
    """Parse one CompressedLayer; returns (layer, next_offset)."""
    try:
        tag, b_w, b_index, d0, d1, d2, d3, nnz = _HEADER.unpack_from(buf, offset)
        offset += _HEADER.size
        variant = _TAG_SCHEMES[tag]
    except (struct.error, KeyError) as exc:
        raise FormatError(f"bad compressed-layer header: {exc}") from None
    if variant == BLOCK:
        m, n = struct.unpack_from("<BB", buf, offset)
        offset += 2
        scheme = Scheme(BLOCK, m, n)
    else:
        scheme = Scheme(variant)
    dims = (d0, d1, d2, d3)
    idt = _index_dtype(b_index)
    vdt = _value_dtype(b_w)
    isz = np.dtype(idt).itemsize

    if variant == UNSTRUCTURED:
        n_row, n_idx = d0 + 1, nnz
    elif variant == CHANNEL:
        per_channel = d0 * d2 * d3  # values stored per kept channel
        n_row, n_idx = 0, (nnz // per_channel if per_channel else 0)
    elif variant == BLOCK:
        n_row, n_idx = d0 // scheme.m + 1, nnz // scheme.block_size
    else:  # pattern
        n_row, n_idx = d0 + 1, nnz // 4

    def take(count, dtype, width):
        nonlocal offset
        end = offset + count * width
        if end > len(buf):
            raise FormatError("truncated compressed-layer payload")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
        offset = end
        return arr.copy()

    row_index = take(n_row, idt, isz)
    indices = take(n_idx, idt, isz)
    values = take(nnz, vdt, np.dtype(vdt).itemsize)
    cl = CompressedLayer(scheme, b_w, b_index, dims, row_index, indices, values)
    return cl, offset


# ---------------------------------------------------------------------------
# footprint model

MODES = ("dense", "structured", "unstructured", "pattern", "block",
         "dense-pruning-at-init", "dense-gradient-sparse-weight")


@dataclass(frozen=True)
class LayerGeom:
    """Per-layer geometry the footprint model needs: sizes and row count."""

    n: int       # weight count N^l
    f: int       # filters / output rows F_l
    ch: int = 0  # input channels (needed for channel-scheme rounding)

    @classmethod
    def of(cls, shape):
        shape = tuple(shape)
        if len(shape) == 2:
            return cls(shape[0] * shape[1], shape[0], shape[1])
        f, ch, k1, k2 = shape
        return cls(f * ch * k1 * k2, f, ch)


@dataclass
class FootprintReport:
    mode: str
    s: float
    b_w: int
    b_index: int
    exact: bool
    per_layer: list = field(default_factory=list)  # dicts w/ weight,grad,index bits

    @property
    def weight_bits(self):
        return sum(r["weight_bits"] for r in self.per_layer)

    @property
    def grad_bits(self):
        return sum(r["grad_bits"] for r in self.per_layer)

    @property
    def index_bits(self):
        return sum(r["index_bits"] for r in self.per_layer)

    @property
    def total_bits(self):
        return self.weight_bits + self.grad_bits + self.index_bits


def _layer_geom(layer):
    if isinstance(layer, LayerGeom):
        return layer
    if isinstance(layer, tuple):
        if len(layer) == 2:
            return LayerGeom(layer[0], layer[1])
        return LayerGeom(*layer)
    raise TypeError(f"cannot interpret layer geometry {layer!r}")


def footprint_bits(layers, mode, s=0.0, b_w=32, b_index=8, scheme=None, exact=True):
    """Bits of weight + gradient + index storage for the whole network.

    ``exact`` evaluates the full formulas (row_index terms included, counts
    rounded at the scheme granularity); otherwise the approximation that
    drops the row_index term and keeps real-valued counts is used.
    """
    if mode not in MODES:
        raise ValueError(f"unknown footprint mode {mode!r}")
    if not 0.0 <= s < 1.0 + 1e-12:
        raise ValueError(f"sparsity {s} out of range")
    report = FootprintReport(mode, s, b_w, b_index, exact)
    for layer in layers:
        g = _layer_geom(layer)
        row = {"n": g.n, "weight_bits": 0.0, "grad_bits": 0.0, "index_bits": 0.0}
        if mode in ("dense", "dense-pruning-at-init"):
            row["weight_bits"] = g.n * b_w
            row["grad_bits"] = g.n * b_w
        elif mode == "structured":
            if exact and g.ch:
                kept = round_half_up((1.0 - s) * g.ch) * (g.n // g.ch)
            else:
                kept = (1.0 - s) * g.n
            row["weight_bits"] = kept * b_w
            row["grad_bits"] = kept * b_w
        elif mode == "unstructured":
            kept = round_half_up((1.0 - s) * g.n) if exact else (1.0 - s) * g.n
            row["weight_bits"] = kept * b_w
            row["grad_bits"] = kept * b_w
            row["index_bits"] = kept * b_index + ((g.f + 1) * b_index if exact else 0)
        elif mode == "pattern":
            if exact:
                ch = g.ch or g.n // (9 * g.f)
                kept = min(round_half_up((1.0 - s) * g.n / (4.0 * g.f)), ch) * 4 * g.f
            else:
                kept = (1.0 - s) * g.n
            row["weight_bits"] = kept * b_w
            row["grad_bits"] = kept * b_w
            row["index_bits"] = kept / 4.0 * b_index + ((g.f + 1) * b_index if exact else 0)
        elif mode == "block":
            sch = scheme or Scheme(BLOCK)
            bsz = sch.block_size
            if exact:
                kept_blocks = round_half_up((1.0 - s) * g.n / bsz)
                kept = kept_blocks * bsz
                rows = g.f // sch.m + 1
            else:
                kept_blocks = (1.0 - s) * g.n / bsz
                kept = (1.0 - s) * g.n
                rows = 0
            row["weight_bits"] = kept * b_w
            row["grad_bits"] = kept * b_w
            row["index_bits"] = kept_blocks * b_index + rows * b_index
        elif mode == "dense-gradient-sparse-weight":
            kept = round_half_up((1.0 - s) * g.n) if exact else (1.0 - s) * g.n
            row["weight_bits"] = kept * b_w
            row["grad_bits"] = g.n * b_w
            row["index_bits"] = kept * b_index
        report.per_layer.append(row)
    return report


# ---------------------------------------------------------------------------
# layer-wise sparsity assignment


def assign_layer_sparsity(sizes, strategy, overall_s, dense=(), groups=None,
                          ratio=None, s_min=0.0, s_max=1.0):
    """Per-layer sparsity ratios whose size-weighted mean hits ``overall_s``.

    ``dense`` lists indices kept fully dense (excluded from the constraint;
    the first conv layer by convention).  Strategies:

    * ``uniform``       -- same ratio everywhere.
    * ``fixed-ratio``   -- two groups (labels from ``groups``), ratio r
      between group-a and group-b sparsities.
    * ``proportional``  -- kept density proportional to 1/sqrt(N^l), so
      larger layers end up sparser.
    """
    sizes = [int(n) for n in sizes]
    dense = set(dense)
    active = [i for i in range(len(sizes)) if i not in dense]
    if not active:
        raise FeasibilityError("no sparsifiable layers")
    total = sum(sizes[i] for i in active)
    out = [0.0] * len(sizes)

    if strategy == "uniform":
        for i in active:
            out[i] = overall_s
    elif strategy == "fixed-ratio":
        if ratio is None or groups is None:
            raise ValueError("fixed-ratio needs groups and ratio")
        na = sum(sizes[i] for i in active if groups[i] == "a")
        nb = total - na
        if na == 0 or nb == 0:
            raise FeasibilityError("fixed-ratio needs both groups populated")
        s_b = overall_s * total / (ratio * na + nb)
        s_a = ratio * s_b
        if s_a >= 1.0 or s_b >= 1.0:
            raise FeasibilityError("fixed-ratio assignment exceeds 100% sparsity")
        for i in active:
            out[i] = s_a if groups[i] == "a" else s_b
    elif strategy == "proportional":
        free = list(active)
        clamped = {}
        for _ in range(len(active) + 1):
            budget = (1.0 - overall_s) * total - sum(
                (1.0 - sv) * sizes[i] for i, sv in clamped.items())
            denom = sum(np.sqrt(sizes[i]) for i in free)
            if budget < 0 or denom == 0:
                raise FeasibilityError("proportional assignment infeasible")
            c = budget / denom
            moved = False
            for i in list(free):
                density = c / np.sqrt(sizes[i])
                sv = 1.0 - density
                if sv < s_min or sv > s_max:
                    clamped[i] = min(max(sv, s_min), s_max)
                    free.remove(i)
                    moved = True
            if not moved:
                for i in free:
                    out[i] = 1.0 - c / np.sqrt(sizes[i])
                for i, sv in clamped.items():
                    out[i] = sv
                break
        else:
            raise FeasibilityError("proportional assignment did not converge")
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    for i in active:
        if out[i] < s_min - 1e-9 or out[i] > s_max + 1e-9:
            raise FeasibilityError(
                f"layer {i} requires sparsity {out[i]:.4f} outside [{s_min}, {s_max}]")
    return out
