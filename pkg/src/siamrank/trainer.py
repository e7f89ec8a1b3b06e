"""Ranking training, random-pair baseline, regression fine-tuning, checkpoints.

Checkpoint file layout (all integers little-endian)::

    b"RIQA" | version:u8 | header_len:u32 | header (UTF-8 JSON) | payload

The payload is every parameter tensor as raw float32, in ParameterStore
order; the header records names, shapes, the payload length and its CRC32.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataset import GroupSampler, LabeledSample, iteration_rng, sample_subimage
from .ranking_loss import ComparabilityMatrix, batch_loss, output_gradient_coefficients
from .tensor_core import Network, NetworkSpec, ParameterStore, default_spec, init_params

MAGIC = b"RIQA"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    phase: str = "rank"
    strategy: str = "efficient"
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_step: int = 800
    weight_decay: float = 5e-4
    iterations: int = 2000
    groups_per_batch: int = 2
    pairs_per_batch: int | None = None
    batch_size: int = 10
    patch_size: int = 48
    margin: float = 1.0
    init_seed: int = 0
    data_seed: int = 0
    probe_every: int = 50

    def __post_init__(self):
        if self.phase not in ("rank", "finetune"):
            raise ValueError(f"phase must be 'rank' or 'finetune', got {self.phase!r}")
        if self.strategy not in ("efficient", "randompair"):
            raise ValueError(f"strategy must be 'efficient' or 'randompair', got {self.strategy!r}")
        for name in ("lr", "lr_decay", "margin"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.iterations < 1 or self.lr_step < 1:
            raise ValueError("iterations and lr_step must be at least 1")
        if self.groups_per_batch < 1 or self.batch_size < 1:
            raise ValueError("batch composition parameters must be at least 1")

    @classmethod
    def finetune_defaults(cls, **overrides) -> "TrainConfig":
        base = dict(phase="finetune", lr=1e-4)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    """Step decay: ``lr * lr_decay ** (iteration // lr_step)``."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return config.lr * config.lr_decay ** (iteration // config.lr_step)


def sgd_step(params: ParameterStore, lr: float, weight_decay: float = 0.0) -> None:
    """``theta -= lr * (grad + weight_decay * theta)`` in place, then zero the gradients."""
    for name, p in params.items():
        g = params.grads[name]
        if weight_decay:
            g = g + weight_decay * p
        p -= lr * g
    params.zero_grad()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class ModelCheckpoint:
    spec: NetworkSpec
    params: ParameterStore
    iteration: int = 0
    lr: float = 0.0
    forward_count: int = 0
    config: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _encode(ckpt: ModelCheckpoint) -> bytes:
    blocks = []
    layout = []
    for name, value in ckpt.params.items():
        if value.dtype != np.float32:
            raise CheckpointError(f"parameter {name} is {value.dtype}; checkpoints store float32")
        blocks.append(value.astype("<f4").tobytes())
        layout.append({"name": name, "shape": list(value.shape)})
    payload = b"".join(blocks)
    header = {
        "arch": ckpt.spec.to_dict(),
        "params": layout,
        "iteration": ckpt.iteration,
        "lr": ckpt.lr,
        "forward_count": ckpt.forward_count,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + bytes([ckpt.version]) + struct.pack("<I", len(head)) + head + payload


def save_checkpoint(ckpt: ModelCheckpoint, path) -> Path:
    """Atomically write ``ckpt`` (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = _encode(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    if len(data) < 9 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    version = data[4]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads version {FORMAT_VERSION}")
    (head_len,) = struct.unpack("<I", data[5:9])
    if len(data) < 9 + head_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[9:9 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = data[9 + head_len:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    store = ParameterStore()
    offset = 0
    for entry in header["params"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).astype(np.float32).reshape(entry["shape"])
        store.add(entry["name"], arr)
        offset += 4 * n
    spec = NetworkSpec.from_dict(header["arch"])
    Network(spec, store)  # validates parameter shapes against the architecture
    return ModelCheckpoint(
        spec, store, header["iteration"], header["lr"], header["forward_count"],
        header["config"], header["rng_state"], version,
    )


# ---------------------------------------------------------------------------
# Reports and probes
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    """Per-iteration training curve.

    ``losses`` hold the mean per-pair hinge cost of each ranking batch (so
    both strategies are on one scale) or the squared error of each
    fine-tuning batch. ``probe`` holds ``(iteration, forward_count, loss)``
    from a fixed evaluation set, whose forwards are not counted.
    """

    strategy: str = "efficient"
    iterations: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    forward_counts: list[int] = field(default_factory=list)
    probe: list[tuple[int, int, float]] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_path: str | None = None

    def record(self, iteration, loss, lr, forward_count):
        self.iterations.append(iteration)
        self.losses.append(float(loss))
        self.lrs.append(float(lr))
        self.forward_counts.append(int(forward_count))

    @property
    def forward_count(self) -> int:
        return self.forward_counts[-1] if self.forward_counts else 0

    def final_loss(self, window: int = 50) -> float:
        return float(np.mean(self.losses[-window:]))

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "lr", "forward_count"])
            for row in zip(self.iterations, self.losses, self.lrs, self.forward_counts):
                w.writerow([row[0], repr(row[1]), repr(row[2]), row[3]])

    def write_probe_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "forward_count", "probe_loss"])
            for it, fc, loss in self.probe:
                w.writerow([it, fc, repr(loss)])


class RankingProbe:
    """Mean per-pair hinge cost over all groups, each at its centre crop."""

    def __init__(self, groups, patch_size: int, margin: float = 1.0):
        self.batches = []
        for g in groups:
            h, w = g.distorted[0].shape
            top, left = (h - patch_size) // 2, (w - patch_size) // 2
            images = np.stack([d[top:top + patch_size, left:left + patch_size] for d in g.distorted])
            self.batches.append(images.astype(np.float32)[:, None])
        self.labels = {n: ComparabilityMatrix.full_order(n, margin) for n in {b.shape[0] for b in self.batches}}

    def __call__(self, spec: NetworkSpec, params: ParameterStore) -> float:
        net = Network(spec, params)
        total, pairs = 0.0, 0
        for b in self.batches:
            lab = self.labels[b.shape[0]]
            total += batch_loss(net.forward(b), lab)
            pairs += lab.n_pairs
        return total / pairs


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _start(config: TrainConfig, resume: ModelCheckpoint | None, spec: NetworkSpec | None):
    if resume is None:
        spec = spec or default_spec(config.patch_size)
        return spec, init_params(spec, config.init_seed), 0, 0
    saved = TrainConfig.from_dict(resume.config) if resume.config else None
    if saved is not None:
        for key in ("phase", "strategy", "data_seed", "groups_per_batch", "pairs_per_batch", "batch_size", "patch_size"):
            if getattr(saved, key) != getattr(config, key):
                raise TrainingError(f"cannot resume: config field {key!r} differs from the checkpoint")
    if resume.iteration >= config.iterations:
        raise TrainingError(f"checkpoint is already at iteration {resume.iteration} of {config.iterations}")
    return resume.spec, resume.params.copy(), resume.iteration, resume.forward_count


def _finish(spec, params, config, iteration, forward_count, report, t0, checkpoint_path):
    ckpt = ModelCheckpoint(
        spec, params, iteration, lr_schedule(max(iteration - 1, 0), config), forward_count,
        config.to_dict(), {"data_seed": config.data_seed, "next_iteration": iteration},
    )
    report.wall_time = time.perf_counter() - t0
    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
        report.checkpoint_path = str(checkpoint_path)
    return ckpt, report


def _groups(corpus):
    groups = corpus.groups if hasattr(corpus, "groups") else list(corpus)
    if not groups or sum(g.n * (g.n - 1) // 2 for g in groups) == 0:
        raise TrainingError("corpus has no comparable pairs")
    return groups


def train_ranking(
    config: TrainConfig,
    corpus,
    *,
    resume: ModelCheckpoint | None = None,
    probe: RankingProbe | None = None,
    checkpoint_path=None,
    spec: NetworkSpec | None = None,
):
    """Efficient all-pairs Siamese training: M forwards per iteration.

    Returns ``(ModelCheckpoint, TrainReport)``. Quality labels are never
    read; only within-group level order is used.
    """
    if config.strategy != "efficient":
        return train_ranking_randompair_baseline(
            config, corpus, resume=resume, probe=probe, checkpoint_path=checkpoint_path, spec=spec
        )
    groups = _groups(corpus)
    t0 = time.perf_counter()
    spec, params, start, fcount = _start(config, resume, spec)
    sampler = GroupSampler(groups, config.groups_per_batch, config.data_seed)
    net = Network(spec, params)
    report = TrainReport("efficient")
    if probe is not None and start == 0:
        report.probe.append((0, 0, probe(spec, params)))
    for it in range(start, config.iterations):
        lr = lr_schedule(it, config)
        batch = sampler.batch_for(it, config.patch_size, config.margin)
        scores = net.forward(batch.images)
        coeffs = output_gradient_coefficients(scores, batch.labels)
        loss = batch_loss(scores, batch.labels)
        net.backward(coeffs.c)
        sgd_step(params, lr, config.weight_decay)
        fcount += batch.size
        report.record(it, loss / max(batch.labels.n_pairs, 1), lr, fcount)
        if probe is not None and config.probe_every and (it + 1) % config.probe_every == 0:
            report.probe.append((it + 1, fcount, probe(spec, params)))
    return _finish(spec, params, config, config.iterations, fcount, report, t0, checkpoint_path)


def default_pairs_per_batch(config: TrainConfig, groups) -> int:
    """Pairs matching the efficient strategy's forward budget (M / 2)."""
    m = config.groups_per_batch * max(g.n for g in groups)
    return max(m // 2, 1)


def random_pairs(groups, n_pairs: int, patch_size: int, rng: np.random.Generator):
    """Draw ``n_pairs`` comparable pairs; returns an interleaved (2P, 1, S, S) batch.

    Images ``2k`` (better) and ``2k + 1`` (worse) form pair ``k`` and share
    one crop window.
    """
    images = []
    for _ in range(n_pairs):
        g = groups[int(rng.integers(len(groups)))]
        a, b = sorted(rng.choice(g.n, size=2, replace=False).tolist())
        pair = np.stack([g.distorted[a], g.distorted[b]])
        patch, _ = sample_subimage(pair, patch_size, rng)
        images.append(patch)
    return np.concatenate(images).astype(np.float32)[:, None]


def train_ranking_randompair_baseline(
    config: TrainConfig,
    corpus,
    *,
    resume: ModelCheckpoint | None = None,
    probe: RankingProbe | None = None,
    checkpoint_path=None,
    spec: NetworkSpec | None = None,
):
    """Standard Siamese training on randomly sampled pairs.

    Each pair's two images go through the branch separately (2 forwards
    per pair, nothing shared between pairs) and each pair contributes its
    own hinge gradient.
    """
    groups = _groups(corpus)
    t0 = time.perf_counter()
    spec, params, start, fcount = _start(config, resume, spec)
    n_pairs = config.pairs_per_batch or default_pairs_per_batch(config, groups)
    pair_ids = np.repeat(np.arange(n_pairs), 2)
    labels = ComparabilityMatrix.from_groups(pair_ids, ["pair"] * (2 * n_pairs), np.tile([0, 1], n_pairs), config.margin)
    net = Network(spec, params)
    report = TrainReport("randompair")
    if probe is not None and start == 0:
        report.probe.append((0, 0, probe(spec, params)))
    for it in range(start, config.iterations):
        lr = lr_schedule(it, config)
        batch = random_pairs(groups, n_pairs, config.patch_size, iteration_rng(config.data_seed, it, stream=2))
        scores = net.forward(batch)
        coeffs = output_gradient_coefficients(scores, labels)
        loss = batch_loss(scores, labels)
        net.backward(coeffs.c)
        sgd_step(params, lr, config.weight_decay)
        fcount += 2 * n_pairs
        report.record(it, loss / n_pairs, lr, fcount)
        if probe is not None and config.probe_every and (it + 1) % config.probe_every == 0:
            report.probe.append((it + 1, fcount, probe(spec, params)))
    return _finish(spec, params, config, config.iterations, fcount, report, t0, checkpoint_path)


class RegressionObjective:
    """``scores -> (mean squared error, gradient)`` against fixed targets."""

    def __init__(self, targets):
        self.targets = np.asarray(targets, dtype=np.float64)

    def __call__(self, scores):
        s = np.asarray(scores, dtype=np.float64)
        if s.shape != self.targets.shape:
            raise ValueError(f"{s.shape} scores for {self.targets.shape} targets")
        diff = s - self.targets
        m = s.size
        return float(np.sum(diff * diff) / m), 2.0 * diff / m


def finetune_regression(
    checkpoint: ModelCheckpoint | None,
    samples: list[LabeledSample],
    config: TrainConfig,
    *,
    resume: ModelCheckpoint | None = None,
    checkpoint_path=None,
    spec: NetworkSpec | None = None,
):
    """Calibrate a ranking branch to absolute scores with squared-error loss.

    Starts from ``checkpoint`` (the ranking weights); ``None`` trains from a
    fresh initialisation. Every epoch visits each training image once, one
    random crop per visit.
    """
    if not samples:
        raise TrainingError("no labeled samples to fine-tune on")
    t0 = time.perf_counter()
    if resume is not None:
        spec, params, start, fcount = _start(config, resume, None)
    elif checkpoint is not None:
        spec, params, start, fcount = checkpoint.spec, checkpoint.params.copy(), 0, 0
    else:
        spec, params, start, fcount = _start(config, None, spec)
    patch = spec.input_shape[1]
    net = Network(spec, params)
    report = TrainReport("finetune")
    n = len(samples)
    k = min(config.batch_size, n)
    for it in range(start, config.iterations):
        lr = lr_schedule(it, config)
        first = it * k
        idx = []
        for pos in range(first, first + k):
            perm = iteration_rng(config.data_seed, pos // n, stream=4).permutation(n)
            idx.append(int(perm[pos % n]))
        rng = iteration_rng(config.data_seed, it, stream=3)
        batch = np.stack([sample_subimage(samples[i].image, patch, rng)[0] for i in idx]).astype(np.float32)[:, None]
        objective = RegressionObjective([samples[i].mos for i in idx])
        scores = net.forward(batch)
        loss, grad = objective(scores)
        net.backward(grad)
        sgd_step(params, lr, config.weight_decay)
        fcount += k
        report.record(it, loss, lr, fcount)
    return _finish(spec, params, config, config.iterations, fcount, report, t0, checkpoint_path)
