"""Importance scoring and scheme-constrained elastic mutation.

The importance of an active weight is |w| + |lambda * g| where g is the
most recent masked gradient.  Removal drops the lowest-aggregate-score
units at the scheme granularity (weights, kernels, blocks or channels);
growth activates random empty units with zero-initialized weights.

Two schedules are provided: the hard-bound variant mutates every
``delta_tau`` epochs by removing down to sparsity s+p and growing back to
s, so the nonzero count never exceeds the budget; the soft-bound variant
grows to s-p at each window start, trains for ``delta_tau`` epochs, then
removes back to s, converging to s once mutation stops.  The mutation
fraction p decays at configured milestones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FeasibilityError, NumericError
from .sparsity import (
    CHANNEL, BLOCK, PATTERN, UNSTRUCTURED, PATTERN_STYLES, Mask,
    pattern_kept_per_filter, round_half_up, target_nnz, validate_mask,
)

EM = "em"
EM_SOFT = "ems"
VANILLA = "vanilla"


@dataclass
class MutationSchedule:
    mode: str                     # em | ems | vanilla
    target_s: float
    p_milestones: list            # [(epoch, p), ...] ascending, p non-increasing
    delta_tau: int
    tau_stop: int
    tau_end: int
    lam: float = 0.01

    def __post_init__(self):
        if self.mode == VANILLA and len(self.p_milestones) > 1:
            raise ValueError("vanilla mode uses a single constant-p milestone")
        if self.mode not in (EM, EM_SOFT, VANILLA):
            raise ValueError(f"unknown mutation mode {self.mode!r}")
        if not self.tau_stop < self.tau_end:
            raise ValueError("tau_stop must precede tau_end")
        epochs = [e for e, _ in self.p_milestones]
        ps = [p for _, p in self.p_milestones]
        if epochs != sorted(epochs):
            raise ValueError("milestones must be epoch-ascending")
        if any(b > a for a, b in zip(ps, ps[1:])):
            raise ValueError("p must be non-increasing across milestones")
        if any(not 0.0 < p < 1.0 for p in ps):
            raise ValueError("p must lie in (0, 1)")
        if self.mode == EM_SOFT and self.target_s - max(ps) < 0:
            raise ValueError("soft bound requires s - p >= 0")

    def p_at(self, tau):
        current = self.p_milestones[0][1]
        for epoch, p in self.p_milestones:
            if tau >= epoch:
                current = p
        return current


def importance(w, g_latest, lam, mask=None):
    """Importance score |w| + |lam*g| on the active support (zero elsewhere)."""
    w = np.asarray(w, dtype=np.float64)
    g = np.zeros_like(w) if g_latest is None else np.asarray(g_latest, dtype=np.float64)
    if not (np.isfinite(w).all() and np.isfinite(g).all()):
        raise NumericError("non-finite weights or gradients in importance()")
    scores = np.abs(w) + np.abs(lam * g)
    if mask is not None:
        scores = scores * mask.bits
    return scores


def _unit_scores(scores, mask):
    """Aggregate per-unit scores and per-unit active flags for a scheme."""
    scheme = mask.scheme
    bits = mask.bits
    v = scheme.variant
    if v == UNSTRUCTURED:
        return scores.reshape(-1), bits.reshape(-1)
    if v == CHANNEL:
        if bits.ndim == 4:
            return scores.sum(axis=(0, 2, 3)), bits.any(axis=(0, 2, 3))
        return scores.sum(axis=0), bits.any(axis=0)
    if v == BLOCK:
        m, n = scheme.m, scheme.n
        smat = scores.reshape(bits.shape[0], -1) if bits.ndim == 4 else scores
        bmat = bits.reshape(bits.shape[0], -1) if bits.ndim == 4 else bits
        rows, cols = bmat.shape
        sblk = smat.reshape(rows // m, m, cols // n, n).sum(axis=(1, 3))
        ablk = bmat.reshape(rows // m, m, cols // n, n).any(axis=(1, 3))
        return sblk.reshape(-1), ablk.reshape(-1)
    if v == PATTERN:
        f, ch = bits.shape[0], bits.shape[1]
        return (scores.reshape(f, ch, 9).sum(axis=2),
                bits.reshape(f, ch, 9).any(axis=2))
    raise ValueError(v)


def _clear_units(bits, scheme, unit_ids):
    v = scheme.variant
    if v == UNSTRUCTURED:
        bits.reshape(-1)[unit_ids] = False
    elif v == CHANNEL:
        bits[:, unit_ids] = False
    elif v == BLOCK:
        m, n = scheme.m, scheme.n
        bmat = bits.reshape(bits.shape[0], -1) if bits.ndim == 4 else bits
        rows, cols = bmat.shape
        blk = bmat.reshape(rows // m, m, cols // n, n)
        bc = cols // n
        for u in unit_ids:
            blk[u // bc, :, u % bc, :] = False
    else:
        raise ValueError(v)


def _set_units(bits, scheme, unit_ids):
    v = scheme.variant
    if v == UNSTRUCTURED:
        bits.reshape(-1)[unit_ids] = True
    elif v == CHANNEL:
        bits[:, unit_ids] = True
    elif v == BLOCK:
        m, n = scheme.m, scheme.n
        bmat = bits.reshape(bits.shape[0], -1) if bits.ndim == 4 else bits
        rows, cols = bmat.shape
        blk = bmat.reshape(rows // m, m, cols // n, n)
        bc = cols // n
        for u in unit_ids:
            blk[u // bc, :, u % bc, :] = True
    else:
        raise ValueError(v)


def _rank_ascending(scores, candidate_ids):
    """Candidate unit ids sorted by (score, unit id) ascending."""
    order = np.argsort(scores[candidate_ids], kind="stable")
    return candidate_ids[order]


def arg_remove_to(w, mask, t, scores):
    """Remove the lowest-score units until sparsity reaches t."""
    shape = mask.shape
    scheme = mask.scheme
    cur = mask.nnz
    want = target_nnz(shape, scheme, t)
    if want > cur:
        raise FeasibilityError(
            f"remove target sparsity {t} below current {mask.sparsity():.4f}")
    bits = mask.bits.copy()

    if scheme.variant == PATTERN:
        f, ch = shape[0], shape[1]
        kscores, kactive = _unit_scores(scores, mask)
        cur_pf = int(kactive[0].sum()) if f else 0
        want_pf = pattern_kept_per_filter(shape, t)
        drop = cur_pf - want_pf
        for fi in range(f):
            ids = np.flatnonzero(kactive[fi])
            victims = _rank_ascending(kscores[fi], ids)[:drop]
            bits[fi, victims] = False
    else:
        uscores, uactive = _unit_scores(scores, mask)
        if scheme.variant == UNSTRUCTURED:
            usize = 1
        elif scheme.variant == CHANNEL:
            usize = mask.size // shape[1]
        else:
            usize = scheme.block_size
        drop = (cur - want) // usize
        ids = np.flatnonzero(uactive)
        victims = _rank_ascending(uscores, ids)[:drop]
        _clear_units(bits, scheme, victims)

    out = Mask(bits, scheme)
    validate_mask(out)
    return out


def arg_grow_to(w, mask, t, rng):
    """Grow random empty units until sparsity drops to t; new weights are 0.

    Returns (mask, grown_bits) where grown_bits flags the newly activated
    positions; callers must zero the weights there before training resumes.
    """
    shape = mask.shape
    scheme = mask.scheme
    cur = mask.nnz
    want = target_nnz(shape, scheme, t)
    if want < cur:
        raise FeasibilityError(
            f"grow target sparsity {t} above current {mask.sparsity():.4f}")
    bits = mask.bits.copy()

    if scheme.variant == PATTERN:
        f, ch = shape[0], shape[1]
        kactive = bits.reshape(f, ch, 9).any(axis=2)
        cur_pf = int(kactive[0].sum()) if f else 0
        want_pf = pattern_kept_per_filter(shape, t)
        add = want_pf - cur_pf
        for fi in range(f):
            empty = np.flatnonzero(~kactive[fi])
            if empty.size < add:
                raise FeasibilityError("not enough empty kernels to grow")
            chosen = rng.choice(empty, size=add, replace=False)
            styles = rng.integers(0, 8, size=add)
            for ki, si in zip(chosen, styles):
                for (r, c) in PATTERN_STYLES[si]:
                    bits[fi, ki, r, c] = True
    else:
        _, uactive = _unit_scores(np.zeros(shape), mask)
        if scheme.variant == UNSTRUCTURED:
            usize = 1
        elif scheme.variant == CHANNEL:
            usize = mask.size // shape[1]
        else:
            usize = scheme.block_size
        add = (want - cur) // usize
        empty = np.flatnonzero(~uactive)
        if empty.size < add:
            raise FeasibilityError("not enough empty units to grow")
        chosen = rng.choice(empty, size=add, replace=False)
        _set_units(bits, scheme, chosen)

    out = Mask(bits, scheme)
    validate_mask(out)
    grown = out.bits & ~mask.bits
    return out, grown


@dataclass
class MutationEvent:
    """Record of one per-layer mutation step (for monitoring/tests)."""

    tau: int
    layer: int
    kind: str        # "remove" | "grow"
    nnz_after: int
    p: float


class MutationEngine:
    """Drives the per-epoch mutation hooks over the trainer's sparse layers.

    ``sparse_layers`` entries must expose ``W`` (ndarray), ``mask`` (Mask),
    ``target_s`` (float) and ``last_grad`` (ndarray or None).  The engine
    mutates masks in place on those objects and zeroes weights that leave
    or enter the support.
    """

    def __init__(self, schedule, rng):
        self.schedule = schedule
        self.rng = rng
        self.events = []

    def epoch_start(self, tau, sparse_layers):
        sched = self.schedule
        if sched.mode == VANILLA:
            return  # static mask baseline: no mutation ever
        if sched.mode == EM:
            # Mutation needs a gradient from the previous epoch, so the
            # first eligible epoch is delta_tau, not 0.
            if tau % sched.delta_tau == 0 and 0 < tau < sched.tau_stop:
                p = sched.p_at(tau)
                for i, layer in enumerate(sparse_layers):
                    self._remove(tau, i, layer, min(layer.target_s + p, 1.0), p)
                    self._grow(tau, i, layer, layer.target_s, p)
        elif sched.mode == EM_SOFT:
            at_boundary = tau % sched.delta_tau == 0
            if at_boundary and 0 < tau <= sched.tau_stop:
                p = sched.p_at(tau)
                for i, layer in enumerate(sparse_layers):
                    self._remove(tau, i, layer, layer.target_s, p)
            if at_boundary and tau < sched.tau_stop:
                p = sched.p_at(tau)
                for i, layer in enumerate(sparse_layers):
                    self._grow(tau, i, layer, layer.target_s - p, p)

    def _remove(self, tau, i, layer, t, p):
        scores = importance(layer.W, layer.last_grad, self.schedule.lam, layer.mask)
        new_mask = arg_remove_to(layer.W, layer.mask, t, scores)
        layer.mask = new_mask
        layer.W *= new_mask.bits
        self.events.append(MutationEvent(tau, i, "remove", new_mask.nnz, p))

    def _grow(self, tau, i, layer, t, p):
        new_mask, grown = arg_grow_to(layer.W, layer.mask, t, self.rng)
        layer.mask = new_mask
        layer.W[grown] = 0.0  # newly activated weights start at zero
        self.events.append(MutationEvent(tau, i, "grow", new_mask.nnz, p))
