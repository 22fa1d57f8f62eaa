"""Training orchestration: optimizer, schedules, hooks, checkpoints.

A run is fully determined by (config, seed): every random draw comes from
a generator keyed on (seed, purpose, epoch), so identical configs yield
bitwise-identical metrics and checkpoints, and resuming from any epoch
checkpoint reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data as datamod
from .errors import FormatError
from .forgetting import (
    ForgettingLog, DatasetView, compress_dataset, two_phase_plan,
    write_report_csv,
)
from .mutation import EM_SOFT, MutationEngine, MutationSchedule
from .nncore import (
    AvgPool2d, Conv2d, Flatten, Linear, MaxPool2d, Network, ReLU,
    ResidualBlock,
)
from .sparsity import (
    BLOCK, PATTERN, UNSTRUCTURED, Scheme, assign_layer_sparsity,
    compressed_from_bytes, compressed_to_bytes, decode, encode, random_mask,
)

CHECKPOINT_MAGIC = b"MEST"
CHECKPOINT_VERSION = 1

# rng stream tags
_RNG_INIT = 1
_RNG_MASK = 2
_RNG_SHUFFLE = 3
_RNG_AUGMENT = 4
_RNG_MUTATION = 5


def stream_rng(seed, tag, epoch=0, extra=0):
    return np.random.default_rng([seed, tag, epoch, extra])


# ---------------------------------------------------------------------------
# configuration


@dataclass
class OptimizerConfig:
    lr0: float = 0.1
    lr_end: float = 4e-8
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 0


@dataclass
class RunConfig:
    model: str = "tiny-cnn"
    dataset: dict = field(default_factory=lambda: {"kind": "synth", "num": 256})
    scheme: dict = field(default_factory=lambda: {"variant": "unstructured"})
    layer_schemes: dict = field(default_factory=dict)   # layer index -> scheme dict
    overall_sparsity: float = 0.9
    sparsity_strategy: str = "uniform"
    strategy_ratio: float | None = None
    strategy_groups: list | None = None
    dense_layers: list | None = None                    # default: first conv
    mutation: dict | None = None
    de: dict = field(default_factory=lambda: {"enabled": False, "e1": 0, "th": 0})
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    dtype: str = "float32"
    b_w: int = 32
    b_index: int = 8
    augment: bool = False
    checkpoint_interval: int = 0                        # 0 = final only
    out_dir: str = "runs/out"

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "optimizer" in d and isinstance(d["optimizer"], dict):
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        d = asdict(self)
        return d

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        """Digest of everything that affects the computation.

        Output location and checkpoint cadence are excluded so a run can be
        resumed into a different directory.
        """
        d = self.to_dict()
        d.pop("out_dir", None)
        d.pop("checkpoint_interval", None)
        payload = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).digest()

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def default_mutation(overall_s, epochs):
    """Desk-scale analogue of the published elastic-mutation schedule."""
    stop = max(1, int(epochs * 0.8))
    mid = max(1, int(epochs * 0.6))
    return {
        "mode": "em",
        "p_milestones": [[0, 0.05], [mid, 0.025]],
        "delta_tau": 5,
        "tau_stop": stop,
        "lam": 0.01,
    }


def build_schedule(cfg):
    m = cfg.mutation
    if not m:
        return None
    return MutationSchedule(
        mode=m.get("mode", "em"),
        target_s=cfg.overall_sparsity,
        p_milestones=[tuple(x) for x in m["p_milestones"]],
        delta_tau=int(m["delta_tau"]),
        tau_stop=int(m["tau_stop"]),
        tau_end=cfg.epochs,
        lam=float(m.get("lam", 0.01)),
    )


# ---------------------------------------------------------------------------
# model zoo


def build_model(name, in_shape, num_classes, dtype):
    c, h, w = in_shape
    if name == "tiny-cnn":
        f1, f2, hid = 16, 32, 128
        flat = f2 * (h // 4) * (w // 4)
        layers = [
            Conv2d(c, f1, 3, pad=1, dtype=dtype), ReLU(), MaxPool2d(2),
            Conv2d(f1, f2, 3, pad=1, dtype=dtype), ReLU(), MaxPool2d(2),
            Flatten(),
            Linear(flat, hid, dtype=dtype), ReLU(),
            Linear(hid, num_classes, dtype=dtype),
        ]
        return Network(layers, dtype=dtype)
    if name == "resnet-8-slim":
        ch = 16
        layers = [
            Conv2d(c, ch, 3, pad=1, dtype=dtype), ReLU(), MaxPool2d(2),
            ResidualBlock(ch, dtype=dtype),
            ResidualBlock(ch, dtype=dtype),
            ResidualBlock(ch, dtype=dtype),
            AvgPool2d(2),
            Flatten(),
            Linear(ch * (h // 4) * (w // 4), num_classes, dtype=dtype),
        ]
        return Network(layers, dtype=dtype)
    raise ValueError(f"unknown model {name!r}")


# ---------------------------------------------------------------------------
# optimizer and schedule


def lr_at(step, opt, steps_per_epoch, total_epochs):
    """Linear warm-up then cosine annealing, evaluated per optimizer step."""
    warm = opt.warmup_epochs * steps_per_epoch
    total = total_epochs * steps_per_epoch
    if step < warm:
        return opt.lr0 * (step + 1) / warm
    span = total - warm - 1
    t = (step - warm) / span if span > 0 else 1.0
    return opt.lr_end + 0.5 * (opt.lr0 - opt.lr_end) * (1.0 + math.cos(math.pi * t))


class LayerState:
    """Per weighted layer: mask, momentum, latest masked gradient."""

    def __init__(self, layer, index):
        self.layer = layer
        self.index = index
        self.mask = None            # sparsity.Mask or None for dense layers
        self.target_s = 0.0
        self.mom_W = np.zeros_like(layer.W)
        self.mom_b = np.zeros_like(layer.b) if layer.b is not None else None
        self.last_grad = None

    @property
    def W(self):
        return self.layer.W

    @W.setter
    def W(self, value):
        self.layer.W[...] = value

    def sync(self):
        """Push mask to the layer and confine momentum to its support."""
        if self.mask is not None:
            self.layer.mask = self.mask.bits
            self.mom_W *= self.mask.bits
            self.layer.W *= self.mask.bits

    def nnz(self):
        return self.mask.nnz if self.mask is not None else self.layer.W.size


def sgd_step(state, lr, opt):
    """Momentum SGD with l2 decay on active weights; masked entries frozen."""
    layer = state.layer
    g = layer.grad_W + opt.weight_decay * layer.W
    if state.mask is not None:
        g = g * state.mask.bits
    state.mom_W *= opt.momentum
    state.mom_W += g
    layer.W -= lr * state.mom_W
    if state.mask is not None:
        layer.W *= state.mask.bits
    if layer.b is not None:
        state.mom_b *= opt.momentum
        state.mom_b += layer.grad_b
        layer.b -= lr * state.mom_b


# ---------------------------------------------------------------------------
# footprint accounting from live masks


def _mask_index_bits(mask, b_index, f_rows):
    v = mask.scheme.variant
    nnz = mask.nnz
    if v == UNSTRUCTURED:
        return nnz * b_index + (f_rows + 1) * b_index
    if v == PATTERN:
        return (nnz // 4) * b_index + (f_rows + 1) * b_index
    if v == BLOCK:
        return (nnz // mask.scheme.block_size) * b_index \
            + (f_rows // mask.scheme.m + 1) * b_index
    return 0  # channel: index-free


def live_footprint_bits(states, b_w, b_index, include_momentum=False):
    total = 0
    for st in states:
        n = st.layer.W.size
        f_rows = st.layer.matrix_shape[0]
        if st.mask is None:
            total += 2 * n * b_w
            if include_momentum:
                total += n * b_w
        else:
            nnz = st.mask.nnz
            total += 2 * nnz * b_w + _mask_index_bits(st.mask, b_index, f_rows)
            if include_momentum:
                total += nnz * b_w
    return total


# ---------------------------------------------------------------------------
# dataset plumbing


def load_dataset(cfg):
    d = cfg.dataset
    kind = d.get("kind", "synth")
    if kind == "synth":
        ds = datamod.synth(d.get("num", 256), d.get("classes", 2),
                           seed=d.get("seed", cfg.seed), size=d.get("size", 8))
        split = d.get("test_fraction", 0.25)
        n_test = int(len(ds) * split)
        train = datamod.LabeledDataset(ds.images[:-n_test], ds.labels[:-n_test], "train")
        test = datamod.LabeledDataset(ds.images[-n_test:], ds.labels[-n_test:], "test")
        return train, test
    root = d.get("dir") or os.environ.get("MEST_DATA_DIR", ".")
    if kind == "mnist":
        train = datamod.load_idx(os.path.join(root, d.get("train_images", "train-images-idx3-ubyte")),
                                 os.path.join(root, d.get("train_labels", "train-labels-idx1-ubyte")))
        test = datamod.load_idx(os.path.join(root, d.get("test_images", "t10k-images-idx3-ubyte")),
                                os.path.join(root, d.get("test_labels", "t10k-labels-idx1-ubyte")),
                                split="test")
    elif kind == "cifar10":
        train = datamod.load_cifar10(
            [os.path.join(root, p) for p in d.get("train_batches", ["data_batch_1.bin"])])
        test = datamod.load_cifar10(
            [os.path.join(root, p) for p in d.get("test_batches", ["test_batch.bin"])],
            split="test")
    else:
        raise FormatError(f"unknown dataset kind {kind!r}")
    limit = d.get("limit")
    if limit:
        train = datamod.LabeledDataset(train.images[:limit], train.labels[:limit], "train")
    return train, test


# ---------------------------------------------------------------------------
# sparsity wiring


def scheme_from_dict(d):
    return Scheme(d.get("variant", "unstructured"),
                  int(d.get("m", 4)), int(d.get("n", 1)))


def wire_sparsity(cfg, net):
    """Assign masks, per-layer sparsity and schemes to the network."""
    weighted = net.weighted_layers()
    states = [LayerState(layer, i) for i, layer in enumerate(weighted)]
    if cfg.overall_sparsity <= 0:
        return states
    dense = cfg.dense_layers if cfg.dense_layers is not None else [0]
    sizes = [layer.W.size for layer in weighted]
    base_scheme = scheme_from_dict(cfg.scheme)
    schemes = []
    for i, layer in enumerate(weighted):
        override = cfg.layer_schemes.get(str(i)) or cfg.layer_schemes.get(i)
        schemes.append(scheme_from_dict(override) if override else base_scheme)
    groups = cfg.strategy_groups
    if groups is None and cfg.sparsity_strategy == "fixed-ratio":
        groups = ["a" if isinstance(l, Conv2d) and l.k == 3 else "b" for l in weighted]
    s_per_layer = assign_layer_sparsity(
        sizes, cfg.sparsity_strategy, cfg.overall_sparsity,
        dense=dense, groups=groups, ratio=cfg.strategy_ratio)
    mask_rng = stream_rng(cfg.seed, _RNG_MASK)
    for st, s_l, scheme in zip(states, s_per_layer, schemes):
        if st.index in dense:
            continue
        st.target_s = s_l
        st.mask = random_mask(st.layer.W.shape, scheme, s_l, mask_rng)
        st.sync()
    return states


def sparse_states(states):
    return [st for st in states if st.mask is not None]


# ---------------------------------------------------------------------------
# checkpointing


def _write_block(out, payload):
    out.write(struct.pack("<I", len(payload)))
    out.write(payload)


def _read_block(buf, offset):
    (length,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    return buf[offset:offset + length], offset + length


def save_checkpoint(path, cfg, states, tail):
    """Binary checkpoint: magic, version, config hash, layer blocks, JSON tail."""
    store_bits = 64 if cfg.np_dtype == np.float64 else 32
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<H", CHECKPOINT_VERSION))
    out.write(cfg.config_hash())
    out.write(struct.pack("<B", len(states)))
    for st in states:
        layer = st.layer
        if st.mask is not None:
            cl = encode(layer.W, st.mask, b_w=store_bits, b_index=32)
            _write_block(out, compressed_to_bytes(cl))
            mom = cl.with_values(st.mom_W[st.mask.bits].astype(cl.values.dtype))
            _write_block(out, compressed_to_bytes(mom))
            grad = st.last_grad[st.mask.bits] if st.last_grad is not None \
                else np.zeros(st.mask.nnz)
            _write_block(out, compressed_to_bytes(cl.with_values(
                grad.astype(cl.values.dtype))))
            out.write(struct.pack("<d", st.target_s))
        else:
            out.write(struct.pack("<I", 0xFFFFFFFF))  # dense marker
            _write_block(out, layer.W.tobytes())
            _write_block(out, st.mom_W.tobytes())
        if layer.b is not None:
            out.write(b"\x01")
            _write_block(out, layer.b.tobytes())
            _write_block(out, st.mom_b.tobytes())
        else:
            out.write(b"\x00")
    _write_block(out, json.dumps(tail, sort_keys=True).encode())
    atomic_write_bytes(path, out.getvalue())


def load_checkpoint(path, cfg, states):
    """Restore layer weights/momentum/grads in place; returns the JSON tail."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if buf[6:38] != cfg.config_hash():
        raise FormatError("checkpoint does not match this config")
    offset = 38
    (count,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    if count != len(states):
        raise FormatError("layer count mismatch")
    for st in states:
        layer = st.layer
        (marker,) = struct.unpack_from("<I", buf, offset)
        if marker == 0xFFFFFFFF:
            offset += 4
            wraw, offset = _read_block(buf, offset)
            mraw, offset = _read_block(buf, offset)
            layer.W[...] = np.frombuffer(wraw, dtype=layer.W.dtype).reshape(layer.W.shape)
            st.mom_W[...] = np.frombuffer(mraw, dtype=layer.W.dtype).reshape(layer.W.shape)
            st.mask = None
        else:
            wblk, offset = _read_block(buf, offset)
            mblk, offset = _read_block(buf, offset)
            gblk, offset = _read_block(buf, offset)
            (st.target_s,) = struct.unpack_from("<d", buf, offset)
            offset += 8
            cl, _ = compressed_from_bytes(wblk)
            w, mask = decode(cl)
            layer.W[...] = w.astype(layer.W.dtype)
            st.mask = mask
            mom_cl, _ = compressed_from_bytes(mblk)
            grad_cl, _ = compressed_from_bytes(gblk)
            st.mom_W[...] = 0
            st.mom_W[mask.bits] = mom_cl.values.astype(layer.W.dtype)
            lg = np.zeros_like(layer.W)
            lg[mask.bits] = grad_cl.values.astype(layer.W.dtype)
            st.last_grad = lg
            st.sync()
        (has_bias,) = struct.unpack_from("<B", buf, offset)
        offset += 1
        if has_bias:
            braw, offset = _read_block(buf, offset)
            bmraw, offset = _read_block(buf, offset)
            layer.b[...] = np.frombuffer(braw, dtype=layer.b.dtype)
            st.mom_b[...] = np.frombuffer(bmraw, dtype=layer.b.dtype)
    tail_raw, offset = _read_block(buf, offset)
    return json.loads(tail_raw.decode())


def inspect_checkpoint(path):
    """Header/summary info without needing the original config."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack_from("<H", buf, 4)
    info = {"version": version, "config_hash": buf[6:38].hex(),
            "layers": [], "bytes": len(buf)}
    offset = 38
    (count,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    for _ in range(count):
        (marker,) = struct.unpack_from("<I", buf, offset)
        if marker == 0xFFFFFFFF:
            offset += 4
            wraw, offset = _read_block(buf, offset)
            _, offset = _read_block(buf, offset)
            info["layers"].append({"kind": "dense", "bytes": len(wraw)})
        else:
            wblk, offset = _read_block(buf, offset)
            _, offset = _read_block(buf, offset)
            _, offset = _read_block(buf, offset)
            (target_s,) = struct.unpack_from("<d", buf, offset)
            offset += 8
            cl, _ = compressed_from_bytes(wblk)
            info["layers"].append({"kind": cl.scheme.variant, "nnz": cl.nnz,
                                   "dims": list(cl.dims), "target_s": target_s})
        (has_bias,) = struct.unpack_from("<B", buf, offset)
        offset += 1
        if has_bias:
            _, offset = _read_block(buf, offset)
            _, offset = _read_block(buf, offset)
    return info


def atomic_write_bytes(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode())


# ---------------------------------------------------------------------------
# metrics

METRIC_COLUMNS = ["epoch", "lr", "train_loss", "train_acc", "test_acc",
                  "nnz_total", "sparsity_actual", "dataset_size", "p_current",
                  "footprint_bits"]


def metrics_csv(rows):
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                         for c in METRIC_COLUMNS])
    return out.getvalue()


# ---------------------------------------------------------------------------
# the run loop


@dataclass
class RunResult:
    config: RunConfig
    metrics: list
    final_test_acc: float
    epoch_times: list
    out_dir: str
    nnz_trace: list               # per epoch: list of per-layer nnz
    forgetting: ForgettingLog
    view: DatasetView | None
    mutation_events: list


def evaluate(net, images, labels, batch_size):
    correct = 0
    for i in range(0, len(labels), batch_size):
        pred = net.predict(images[i:i + batch_size])
        correct += int((pred == labels[i:i + batch_size]).sum())
    return correct / max(1, len(labels))


def run(cfg, resume_from=None, monitor=None):
    """Execute the full training loop; writes artifacts into cfg.out_dir.

    ``monitor(tau, states)`` is called at every epoch boundary and after
    every mutation-affecting step of the epoch hook, for invariant checks.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    atomic_write_text(os.path.join(cfg.out_dir, "config.json"),
                      json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    dtype = cfg.np_dtype
    train, test = load_dataset(cfg)
    mean, std = datamod.normalization_stats(train)
    test_x = datamod.normalize(test.images, mean, std, dtype)
    test_y = test.labels

    in_shape = train.images.shape[1:]
    num_classes = max(train.num_classes, test.num_classes)
    net = build_model(cfg.model, in_shape, num_classes, dtype)
    net.init_weights(stream_rng(cfg.seed, _RNG_INIT))
    states = wire_sparsity(cfg, net)
    sparse = sparse_states(states)

    schedule = build_schedule(cfg)
    engine = MutationEngine(schedule, None) if schedule else None

    de_cfg = cfg.de or {}
    plan = two_phase_plan(int(de_cfg["e1"]), int(de_cfg.get("th", 0)), cfg.epochs) \
        if de_cfg.get("enabled") else None
    log = ForgettingLog(len(train))
    view = None

    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    metrics_rows = []
    epoch_times = []
    nnz_trace = []
    start_epoch = 0
    global_step = 0

    if resume_from:
        tail = load_checkpoint(resume_from, cfg, states)
        start_epoch = tail["epoch"]
        global_step = tail["global_step"]
        metrics_rows = [dict(zip(METRIC_COLUMNS, row)) for row in tail["metrics"]]
        log = ForgettingLog.from_state(tail["forgetting"])
        if tail["view_kept"] is not None:
            view = DatasetView(np.asarray(tail["view_kept"], dtype=np.int64),
                               plan.th if plan else 0,
                               plan.phase1_epochs if plan else 0, len(train))
        nnz_trace = tail.get("nnz_trace", [])

    def checkpoint(tau):
        tail = {
            "epoch": tau,
            "global_step": global_step,
            "metrics": [[r[c] for c in METRIC_COLUMNS] for r in metrics_rows],
            "forgetting": log.state(),
            "view_kept": view.kept.tolist() if view is not None else None,
            "nnz_trace": nnz_trace,
        }
        save_checkpoint(os.path.join(cfg.out_dir, f"checkpoint_{tau:04d}.mest"),
                        cfg, states, tail)

    for tau in range(start_epoch, cfg.epochs):
        t_start = time.perf_counter()

        if engine is not None:
            engine.rng = stream_rng(cfg.seed, _RNG_MUTATION, tau)
            engine.epoch_start(tau, sparse)
            for st in sparse:
                st.sync()
            if monitor:
                monitor(tau, states)

        if plan is not None and plan.should_compress(tau):
            view = compress_dataset(log, plan.th, plan.phase1_epochs)
            view.write_manifest(os.path.join(cfg.out_dir, "dataset_view.txt"),
                                seed=cfg.seed)

        active_idx = view.kept if view is not None else np.arange(len(train))
        order = active_idx[stream_rng(cfg.seed, _RNG_SHUFFLE, tau)
                           .permutation(len(active_idx))]
        aug_rng = stream_rng(cfg.seed, _RNG_AUGMENT, tau)

        epoch_correct = np.zeros(len(train), dtype=bool)
        loss_sum = 0.0
        correct_sum = 0
        lr = 0.0
        for b0 in range(0, len(order), cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            images = train.images[idx]
            if cfg.augment:
                images = datamod.augment(images, aug_rng)
            x = datamod.normalize(images, mean, std, dtype)
            y = train.labels[idx]
            loss, correct = net.loss_and_grads(x, y)
            epoch_correct[idx] = correct
            loss_sum += loss * len(idx)
            correct_sum += int(correct.sum())
            lr = lr_at(global_step, cfg.optimizer, steps_per_epoch, cfg.epochs)
            for st in states:
                if st.mask is not None:
                    st.last_grad = st.layer.grad_W
                sgd_step(st, lr, cfg.optimizer)
            global_step += 1

        recording = view is None
        if recording:
            log.record_epoch(epoch_correct)

        test_acc = evaluate(net, test_x, test_y, cfg.batch_size)
        nnz_layers = [st.nnz() for st in sparse]
        nnz_trace.append(nnz_layers)
        sparse_total = sum(st.layer.W.size for st in sparse)
        metrics_rows.append({
            "epoch": tau,
            "lr": lr,
            "train_loss": float(loss_sum) / len(order),
            "train_acc": correct_sum / len(order),
            "test_acc": test_acc,
            "nnz_total": sum(nnz_layers),
            "sparsity_actual": (1.0 - sum(nnz_layers) / sparse_total)
            if sparse_total else 0.0,
            "dataset_size": len(order),
            "p_current": schedule.p_at(tau) if schedule else 0.0,
            "footprint_bits": live_footprint_bits(states, cfg.b_w, cfg.b_index),
        })
        epoch_times.append(time.perf_counter() - t_start)
        if monitor:
            monitor(tau + 1, states)

        atomic_write_text(os.path.join(cfg.out_dir, "metrics.csv"),
                          metrics_csv(metrics_rows))
        if cfg.checkpoint_interval and (tau + 1) % cfg.checkpoint_interval == 0:
            checkpoint(tau + 1)

    checkpoint(cfg.epochs)
    write_report_csv(log, os.path.join(cfg.out_dir, "forgetting.csv"),
                     removed=set(range(len(train))) - set(view.kept.tolist())
                     if view is not None else set())

    return RunResult(cfg, metrics_rows,
                     metrics_rows[-1]["test_acc"] if metrics_rows else 0.0,
                     epoch_times, cfg.out_dir, nnz_trace, log, view,
                     engine.events if engine else [])


# ---------------------------------------------------------------------------
# FLOP accounting


def layer_shapes(net, in_shape):
    """Walk the layer list symbolically, yielding (layer, out_spatial)."""
    c, h, w = in_shape
    out = []
    for layer in net.layers:
        if isinstance(layer, Conv2d):
            h = (h + 2 * layer.pad - layer.k) // layer.stride + 1
            w = (w + 2 * layer.pad - layer.k) // layer.stride + 1
            c = layer.out_ch
            out.append((layer, h * w))
        elif isinstance(layer, ResidualBlock):
            out.append((layer.conv1, h * w))
            out.append((layer.conv2, h * w))
        elif isinstance(layer, (MaxPool2d, AvgPool2d)):
            h //= layer.k
            w //= layer.k
        elif isinstance(layer, Linear):
            out.append((layer, 1))
    return out


def flops_report(cfg):
    """Per-layer MAC counts and total training FLOPs (1 MAC = 2 FLOPs).

    A training step costs 3x the forward pass (backward approximately
    doubles it).  Sparse layers scale by their kept density, integrated
    over the mutation schedule for the soft-bound mode (training at s-p
    during mutation windows).
    """
    train, _ = load_dataset(cfg)
    in_shape = train.images.shape[1:]
    num_classes = max(2, train.num_classes)
    net = build_model(cfg.model, in_shape, num_classes, np.float32)
    states = wire_sparsity(cfg, net)
    per_layer = []
    shape_list = layer_shapes(net, in_shape)
    weighted = net.weighted_layers()
    state_by_layer = {id(st.layer): st for st in states}
    for layer, positions in shape_list:
        if isinstance(layer, Conv2d):
            macs = layer.out_ch * layer.in_ch * layer.k * layer.k * positions
        else:
            macs = layer.in_dim * layer.out_dim
        st = state_by_layer[id(layer)]
        density = 1.0 - st.target_s if st.mask is not None else 1.0
        per_layer.append({"index": st.index, "dense_macs": macs,
                          "density": density, "sparse_macs": macs * density})

    schedule = build_schedule(cfg)
    steps = math.ceil(len(train) / cfg.batch_size)
    density_sum = 0.0
    for tau in range(cfg.epochs):
        extra = 0.0
        if schedule and schedule.mode == EM_SOFT and tau < schedule.tau_stop:
            extra = schedule.p_at(tau)
        epoch_macs = sum(
            row["dense_macs"] * min(1.0, row["density"] + (extra if row["density"] < 1.0 else 0.0))
            for row in per_layer)
        density_sum += epoch_macs
    inference_flops = 2 * sum(row["sparse_macs"] for row in per_layer)
    training_flops = 3 * 2 * density_sum * steps * cfg.batch_size
    return {
        "per_layer": per_layer,
        "inference_flops": inference_flops,
        "training_flops": training_flops,
        "epochs": cfg.epochs,
        "steps_per_epoch": steps,
        "batch_size": cfg.batch_size,
    }
