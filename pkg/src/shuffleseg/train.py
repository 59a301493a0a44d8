"""Adam, the training loop, evaluation, checkpointing and gradient checking."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint
from .classes import ClassTable
from .config import format_kv, read_kv
from .data import DEFAULT_MEAN, DEFAULT_STD, class_histogram, load_manifest, load_samples
from .errors import ConfigError, NumericError
from .graph import ArchConfig, Graph, WeightStore, build_graph, graph_backward, graph_forward, init_weights
from .metrics import (
    ConfusionMatrix,
    compute_class_weights,
    downsample_labels,
    iou_report,
    l2_penalty,
    predict_labels,
    upsample_nearest,
    weighted_cross_entropy,
)

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Dict[str, np.ndarray], **kw) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if set(grads) != set(params) or set(state.m) != set(params):
        raise ConfigError("parameter, gradient and optimizer keys differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape or state.m[key].shape != p.shape:
            raise ConfigError(f"shape mismatch for {key}: param {p.shape}, grad {g.shape}")
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


# ---------------------------------------------------------------- config

TRAIN_KEYS = {
    "train_manifest": str,
    "val_manifest": str,
    "test_manifest": str,
    "class_table": str,
    "batch_size": int,
    "max_steps": int,
    "weight_decay": float,
    "learning_rate": float,
    "seed": int,
    "checkpoint_interval": int,
    "eval_interval": int,
    "label_downsample": int,
    "class_weight_c": float,
    "out_dir": str,
}
PATH_KEYS = ("train_manifest", "val_manifest", "test_manifest", "class_table", "out_dir")


@dataclass
class TrainConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    class_table: Optional[str] = None
    batch_size: int = 4
    max_steps: int = 1000
    weight_decay: float = 5e-4
    learning_rate: float = 1e-4
    seed: int = 0
    checkpoint_interval: int = 0
    eval_interval: int = 0
    label_downsample: Optional[int] = None
    class_weight_c: float = 1.02
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.label_downsample is None:
            self.label_downsample = self.arch.output_scale
        for name in ("batch_size", "max_steps", "label_downsample"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("checkpoint_interval", "eval_interval"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.weight_decay < 0 or not self.learning_rate > 0:
            raise ConfigError("weight_decay must be >= 0 and learning_rate > 0")
        if self.label_downsample != self.arch.output_scale:
            raise ConfigError(
                f"{self.arch.variant} produces logits at 1/{self.arch.output_scale} resolution; "
                f"label_downsample must be {self.arch.output_scale}"
            )

    @classmethod
    def from_mapping(cls, values: Dict[str, str], base_dir=None) -> "TrainConfig":
        arch_vals = {k: v for k, v in values.items() if k in ArchConfig.KEYS}
        rest = {k: v for k, v in values.items() if k not in ArchConfig.KEYS}
        unknown = set(rest) - set(TRAIN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for key, raw in rest.items():
            try:
                kw[key] = TRAIN_KEYS[key](raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
            if key in PATH_KEYS and base_dir is not None:
                kw[key] = str(Path(base_dir) / kw[key])
        return cls(arch=ArchConfig.from_mapping(arch_vals), **kw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_mapping(read_kv(path), Path(path).parent)

    def to_mapping(self) -> Dict[str, object]:
        out = dict(self.arch.to_mapping())
        for key in TRAIN_KEYS:
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    def class_table_obj(self) -> ClassTable:
        if self.class_table:
            table = ClassTable.load(self.class_table)
        elif self.arch.n_classes == 20:
            table = ClassTable.cityscapes()
        else:
            table = ClassTable.generic(self.arch.n_classes)
        if table.n_classes != self.arch.n_classes:
            raise ConfigError(f"class table has {table.n_classes} classes, architecture {self.arch.n_classes}")
        return table


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(store: WeightStore, state: Optional[AdamState], path, arch: Optional[ArchConfig] = None,
                    class_table: Optional[ClassTable] = None):
    entries = {}
    for k, v in store.params.items():
        entries[f"param/{k}"] = v
    for k, v in store.buffers.items():
        entries[f"buffer/{k}"] = v
    if state is not None:
        for k in store.params:
            entries[f"adam.m/{k}"] = state.m[k]
            entries[f"adam.v/{k}"] = state.v[k]
        entries["adam.t"] = np.array(state.t, dtype=np.int64)
        entries["adam.hyper"] = np.array([state.lr, state.beta1, state.beta2, state.eps], dtype=np.float64)
    if arch is not None:
        entries["meta.arch"] = np.frombuffer(format_kv(arch.to_mapping()).encode(), dtype=np.uint8)
    if class_table is not None:
        entries["meta.classes"] = np.frombuffer(class_table.to_text().encode(), dtype=np.uint8)
    checkpoint.write(path, entries)


@dataclass
class Checkpoint:
    store: WeightStore
    state: Optional[AdamState]
    arch: Optional[ArchConfig] = None
    class_table: Optional[ClassTable] = None


def load_checkpoint(path, graph: Optional[Graph] = None) -> Checkpoint:
    from .config import parse_kv

    entries = checkpoint.read(path)
    store = WeightStore()
    m, v = {}, {}
    for k, arr in entries.items():
        prefix, _, name = k.partition("/")
        if prefix == "param":
            store.params[name] = arr
        elif prefix == "buffer":
            store.buffers[name] = arr
        elif prefix == "adam.m":
            m[name] = arr
        elif prefix == "adam.v":
            v[name] = arr
    state = None
    if "adam.t" in entries:
        lr, b1, b2, eps = (float(x) for x in entries["adam.hyper"])
        state = AdamState(m, v, int(entries["adam.t"]), lr, b1, b2, eps)
    arch = table = None
    if "meta.arch" in entries:
        arch = ArchConfig.from_mapping(parse_kv(entries["meta.arch"].tobytes().decode(), f"{path}:meta.arch"))
    if "meta.classes" in entries:
        table = ClassTable.from_text(entries["meta.classes"].tobytes().decode(), f"{path}:meta.classes")
    if graph is not None:
        store.check_matches(graph)
    return Checkpoint(store, state, arch, table)


# ---------------------------------------------------------------- evaluation


def predict(graph: Graph, store: WeightStore, images: np.ndarray, ignore_index=None, batch_size: int = 8,
            output_scale: int = 1) -> np.ndarray:
    """Full-resolution label predictions in inference mode."""
    preds = []
    for i in range(0, len(images), batch_size):
        logits, _ = graph_forward(graph, store, images[i:i + batch_size], mode="inference")
        preds.append(upsample_nearest(predict_labels(logits, ignore_index), output_scale))
    return np.concatenate(preds)


def evaluate(graph: Graph, store: WeightStore, images, labels, table: ClassTable, output_scale: int = 1,
             batch_size: int = 8):
    cm = ConfusionMatrix(table.n_classes, table.ignore_index)
    cm.update(predict(graph, store, images, table.ignore_index, batch_size, output_scale), labels)
    return iou_report(cm, table.category_map(), table.names)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    losses: List[float]  # weighted cross entropy per step
    store: WeightStore
    state: AdamState
    evals: List[tuple] = field(default_factory=list)
    penalties: List[float] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


def batch_indices(step: int, n_samples: int, batch_size: int, seed: int) -> np.ndarray:
    """Sample indices of 0-based ``step``; a fresh seeded permutation per epoch."""
    per_epoch = max(1, n_samples // batch_size)
    epoch, offset = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, 1, epoch]).permutation(n_samples)
    if n_samples < batch_size:
        return perm
    return perm[offset * batch_size:(offset + 1) * batch_size]


def _diagnose_nan(graph, store, x):
    graph_forward(graph, store, x, mode="train", check_finite=True)
    raise NumericError("loss became non-finite although every layer output is finite")


def train_loop(cfg: TrainConfig, resume: Optional[str] = None, data=None, val_data=None,
               on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Train ``cfg.arch`` on ``cfg.train_manifest`` (or preloaded ``data``).

    ``data`` / ``val_data`` are optional ``(images, labels)`` pairs that bypass
    manifest loading. Returns the per-step losses and final state; the log
    file and checkpoints land in ``cfg.out_dir`` when it is set.
    """
    arch = cfg.arch
    table = cfg.class_table_obj()
    graph = build_graph(arch)
    if data is None:
        if not cfg.train_manifest:
            raise ConfigError("train_manifest is required")
        manifest = load_manifest(cfg.train_manifest, "train", cfg.class_table)
        images, labels, _ = load_samples(manifest, arch.n_classes)
        hist = class_histogram(manifest, arch.n_classes, table.ignore_index)
    else:
        images, labels = data
        hist = np.bincount(labels.reshape(-1), minlength=arch.n_classes)
        if table.ignore_index is not None:
            hist[table.ignore_index] = 0
    if val_data is None and cfg.val_manifest and cfg.eval_interval:
        vm = load_manifest(cfg.val_manifest, "val", cfg.class_table)
        vi, vl, _ = load_samples(vm, arch.n_classes)
        val_data = (vi, vl)
    weights = compute_class_weights(hist, cfg.class_weight_c, table.ignore_index)

    if resume:
        ck = load_checkpoint(resume, graph)
        store, state = ck.store, ck.state
        if state is None:
            raise ConfigError(f"{resume} carries no optimizer state; cannot resume")
    else:
        store = init_weights(graph, cfg.seed)
        state = AdamState.for_params(store.params, lr=cfg.learning_rate)

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    log_file = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train.log", "a")
    result = TrainResult([], store, state)
    try:
        while state.t < cfg.max_steps:
            step = state.t
            t0 = time.perf_counter()
            idx = batch_indices(step, len(images), cfg.batch_size, cfg.seed)
            x, y = images[idx], labels[idx]
            if cfg.label_downsample > 1:
                y = downsample_labels(y, cfg.label_downsample)
            logits, cache = graph_forward(graph, store, x, mode="train")
            loss, grad = weighted_cross_entropy(logits, y, weights)
            penalty, l2_grads = l2_penalty(store.params, cfg.weight_decay)
            total = loss + penalty
            if not np.isfinite(total) or not np.all(np.isfinite(grad)):
                _diagnose_nan(graph, store, x)
            grads = graph_backward(graph, store, cache, grad)
            for k, g in l2_grads.items():
                grads[k] += g
            adam_step(store.params, grads, state)
            store.buffers.update(cache.buffers)
            result.losses.append(loss)
            result.penalties.append(penalty)
            ms = (time.perf_counter() - t0) * 1e3
            if log_file:
                log_file.write(f"step={state.t} loss={loss:.9g} l2={penalty:.9g} wall_ms={ms:.1f}\n")
            if on_step:
                on_step(state.t, loss)
            if cfg.eval_interval and val_data is not None and state.t % cfg.eval_interval == 0:
                rep = evaluate(graph, store, *val_data, table, arch.output_scale)
                result.evals.append((state.t, rep.miou))
                if log_file:
                    log_file.write(f"eval step={state.t} miou={rep.miou:.6f}\n")
                log.info("step %d val mIoU %.4f", state.t, rep.miou)
            if out_dir and cfg.checkpoint_interval and state.t % cfg.checkpoint_interval == 0:
                p = out_dir / f"step{state.t:06d}.sseg"
                save_checkpoint(store, state, p, arch, table)
                result.checkpoints.append(p)
            if log_file:
                log_file.flush()
        if out_dir:
            p = out_dir / "final.sseg"
            save_checkpoint(store, state, p, arch, table)
            result.checkpoints.append(p)
    finally:
        if log_file:
            log_file.close()
    return result


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    entries: List[tuple]  # (param key, flat index, analytic, numeric, rel error)
    skipped: int = 0  # samples rejected for straddling a kink

    def format(self) -> str:
        lines = [f"{'parameter':<40} {'index':>6} {'analytic':>13} {'numeric':>13} {'rel.err':>9}"]
        for key, i, a, n, e in self.entries:
            lines.append(f"{key:<40} {i:>6} {a:>13.6e} {n:>13.6e} {e:>9.2e}")
        lines.append(f"samples straddling a kink (redrawn): {self.skipped}")
        lines.append(f"max relative error: {self.max_rel_error:.3e}")
        return "\n".join(lines)


def rel_error(a: float, n: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps vanishing gradients from dominating."""
    return abs(a - n) / max(abs(a), abs(n), floor)


def tiny_arch(arch: ArchConfig) -> ArchConfig:
    # stride-32 variants need 64x64 so the 1/32 batch norms see more than two values
    h, w = (64, 64) if arch.downsample == 32 else (16, 32)
    return arch.replace(width_multiplier=min(arch.width_multiplier, 0.25), n_classes=min(arch.n_classes, 5),
                        input_height=h, input_width=w)


def grad_check(arch: ArchConfig, seed: int = 0, n_samples: int = 20, step: float = 1e-5,
               keys: Optional[Sequence[str]] = None,
               grad_hook: Optional[Callable[[Dict[str, np.ndarray]], None]] = None) -> GradCheckReport:
    """Compare whole-graph analytic gradients with central differences in double precision.

    The scalar checked is the class-weighted cross entropy of a tiny instance
    of ``arch`` on random input and labels. ``grad_hook`` may tamper with the
    analytic gradients before comparison (used to test the checker itself).
    """
    arch = tiny_arch(arch)
    graph = build_graph(arch)
    rng = np.random.default_rng([seed, 17])
    store = init_weights(graph, seed, dtype=np.float64)
    for k in store.params:
        # move off the symmetric initial point: unit gammas, zero betas/biases and zero score layers
        if k.endswith((".gamma", ".beta", ".bias")) or not np.any(store.params[k]):
            store.params[k] = store.params[k] + rng.normal(0, 0.1, store.params[k].shape)
    x = rng.standard_normal((2, 3, arch.input_height, arch.input_width))
    oh, ow = arch.input_height // arch.output_scale, arch.input_width // arch.output_scale
    y = rng.integers(0, arch.n_classes, size=(2, 1, oh, ow))
    cw = rng.uniform(0.5, 2.0, arch.n_classes)

    def loss_of(s):
        logits, c = graph_forward(graph, s, x, mode="train")
        return weighted_cross_entropy(logits, y, cw), c

    def pattern(c):
        """ReLU sign masks and max-pool winners; equal patterns mean no kink was crossed."""
        out = []
        for node in graph.nodes:
            if node.kind == "relu":
                out.append(c.values[node.inputs[0]] > 0)
            elif node.kind == "maxpool":
                out.append(c.extras[node.name])
        return out

    (loss, g), cache = loss_of(store)
    base = pattern(cache)
    grads = graph_backward(graph, store, cache, g)
    if grad_hook:
        grad_hook(grads)
    pool = list(keys) if keys else sorted(store.params)
    entries = []
    skipped = 0
    while len(entries) < n_samples and skipped < 4 * n_samples:
        key = pool[int(rng.integers(len(pool)))]
        flat = store.params[key].reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + step
        (lp, _), cp = loss_of(store)
        flat[i] = orig - step
        (lm, _), cm = loss_of(store)
        flat[i] = orig
        if not all(np.array_equal(a, b) and np.array_equal(a, c)
                   for a, b, c in zip(base, pattern(cp), pattern(cm))):
            # the +-step interval straddles a ReLU/max-pool kink; no derivative to compare against
            skipped += 1
            continue
        num = (lp - lm) / (2 * step)
        ana = float(grads[key].reshape(-1)[i])
        entries.append((key, i, ana, num, rel_error(ana, num)))
    return GradCheckReport(max(e[4] for e in entries), entries, skipped)
