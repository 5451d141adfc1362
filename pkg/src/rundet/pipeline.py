"""Training: lr schedules, the 2-way -> 3-way protocol, and binary checkpoints.

Checkpoint layout (all integers little-endian)::

    b"RUNCKPT1" | version u32 | stage u8 | iteration u64 | blob count u32
    per blob:   name length u32 | UTF-8 name | rank u32 | extents u32 x rank | float64 data
    trailer:    length u32 | UTF-8 JSON {"config": ..., "rng": ...}
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import config as config_mod
from .config import ExperimentConfig, ScheduleConfig
from .detector import Detector
from .loss import build_targets, multibox_loss
from .shapesdata import ShapesSample, augment
from .tensor import backward, sgd_step, zero_grad

MAGIC = b"RUNCKPT1"
VERSION = 1
STAGE_TAGS = {"2way": 0, "3way": 1, "baseline": 2}
TAG_NAMES = {v: k for k, v in STAGE_TAGS.items()}


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, blob, expected, got):
        super().__init__(f"blob {blob!r}: checkpoint shape {got} does not match model shape {expected}")
        self.blob = blob


class StageError(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    pass


# --- schedule ------------------------------------------------------------------

@dataclass
class Schedule:
    base_lr: float
    milestones: tuple[int, ...]
    iterations: int
    batch_size: int = 32
    decay: float = 0.1

    def __post_init__(self):
        ms = list(self.milestones)
        if ms != sorted(set(ms)) or (ms and ms[-1] >= self.iterations):
            raise ValueError("milestones must be strictly increasing and below the iteration count")

    def lr_at(self, iteration):
        """Learning rate at 1-based ``iteration``; each milestone reached divides it by 10."""
        drops = sum(1 for m in self.milestones if iteration >= m)
        return self.base_lr * self.decay ** drops


def stage1_schedule(s: ScheduleConfig):
    return Schedule(s.base_lr, tuple(s.milestones), s.iterations, s.batch_size)


def finetune_schedule(s: ScheduleConfig):
    T = s.finetune_iterations
    ms = tuple(s.finetune_milestones) or tuple(sorted({round(T * 4 / 7), round(T * 6 / 7)} - {0, T}))
    return Schedule(s.finetune_lr, ms, T, s.batch_size)


# --- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    stage: str
    iteration: int
    blobs: dict[str, np.ndarray]
    config_text: str = ""
    rng_state: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def config(self) -> ExperimentConfig:
        return config_mod.from_text(self.config_text)


def snapshot(model: Detector, stage, iteration, rng=None) -> Checkpoint:
    blobs = {p.name: p.data.copy() for p in model.params()}
    state = rng.bit_generator.state if rng is not None else {}
    return Checkpoint(stage, iteration, blobs, config_mod.to_text(model.cfg), state)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<IBQI", ckpt.version, STAGE_TAGS[ckpt.stage], ckpt.iteration, len(ckpt.blobs))]
    for name, arr in ckpt.blobs.items():
        enc = name.encode("utf-8")
        out.append(struct.pack("<I", len(enc)) + enc)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    trailer = json.dumps({"config": ckpt.config_text, "rng": ckpt.rng_state}, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(trailer)) + trailer)
    return b"".join(out)


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"file truncated at byte {len(self.buf)} (needed {self.pos + n})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < len(MAGIC):
        raise CheckpointTruncatedError("file shorter than the magic header")
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    tag, iteration, count = r.unpack("<BQI")
    if tag not in TAG_NAMES:
        raise CheckpointFormatError(f"unknown stage tag {tag}")
    blobs = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        blobs[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    (tlen,) = r.unpack("<I")
    meta = json.loads(r.take(tlen).decode("utf-8"))
    return Checkpoint(TAG_NAMES[tag], iteration, blobs, meta.get("config", ""), meta.get("rng", {}), version)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def apply_checkpoint(model: Detector, ckpt: Checkpoint, strict=True):
    """Copy blobs into the model's parameters; nothing is modified if any check fails."""
    params = model.named_params()
    for name, arr in ckpt.blobs.items():
        if name not in params:
            if strict:
                raise CheckpointShapeError(name, None, arr.shape)
            continue
        if params[name].shape != arr.shape:
            raise CheckpointShapeError(name, params[name].shape, arr.shape)
    if strict:
        missing = set(params) - set(ckpt.blobs)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
    for name, arr in ckpt.blobs.items():
        if name in params:
            params[name].data = arr.copy()
    return model


def model_from_checkpoint(ckpt: Checkpoint) -> Detector:
    model = Detector(ckpt.config)
    return apply_checkpoint(model, ckpt)


# --- training ------------------------------------------------------------------

class BatchSource:
    """In-memory training set drawn in seeded epochs, optionally augmented."""

    def __init__(self, dataset, rng, batch_size, do_augment=True):
        samples = list(dataset)
        self.pixels = np.stack([np.round(s.image * 255).astype(np.uint8) for s in samples])
        self.meta = [(s.sample_id, s.boxes, s.labels) for s in samples]
        self.rng, self.batch_size, self.do_augment = rng, batch_size, do_augment
        self.order, self.pos = np.zeros(0, dtype=np.int64), 0

    def __len__(self):
        return len(self.meta)

    def sample(self, i):
        sid, boxes, labels = self.meta[i]
        return ShapesSample(sid, self.pixels[i].astype(np.float64) / 255.0, boxes, labels)

    def next_batch(self):
        batch = []
        while len(batch) < self.batch_size:
            if self.pos >= len(self.order):
                self.order, self.pos = self.rng.permutation(len(self.meta)), 0
            s = self.sample(self.order[self.pos])
            self.pos += 1
            batch.append(augment(s, self.rng) if self.do_augment else s)
        images = np.stack([s.image for s in batch])
        return images, [s.boxes for s in batch], [s.labels for s in batch]


@dataclass
class TrainResult:
    model: Detector
    checkpoint: Checkpoint
    log: list[str]


def format_log(it, lr, report):
    n = max(report.num_pos, 1)
    return f"{it} {lr:.6g} {report.loc / n:.6f} {report.conf / n:.6f} {report.total.item():.6f}"


def run_training(model: Detector, params, schedule: Schedule, batches: BatchSource, cfg, stage,
                 rng, log_fn=None):
    s, b = cfg.schedule, cfg.boxes
    log = []
    for it in range(1, schedule.iterations + 1):
        images, gt_boxes, gt_labels = batches.next_batch()
        targets = build_targets(model.defaults, gt_boxes, gt_labels, b.match_threshold, b.variances)
        preds = model(images)
        report = multibox_loss(preds, targets, cfg.loss.neg_pos_ratio)
        if not math.isfinite(report.total.item()):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        backward(report.total)
        lr = schedule.lr_at(it)
        sgd_step(params, lr, s.momentum, s.weight_decay)
        zero_grad(params)
        line = format_log(it, lr, report)
        log.append(line)
        if log_fn is not None:
            log_fn(line)
    return TrainResult(model, snapshot(model, stage, schedule.iterations, rng), log)


def train_from_scratch(cfg: ExperimentConfig, dataset, log_fn=None, iterations=None) -> TrainResult:
    """End-to-end training of whatever architecture ``cfg`` describes."""
    rng = np.random.default_rng(cfg.schedule.seed)
    model = Detector(cfg, rng)
    schedule = stage1_schedule(cfg.schedule)
    if iterations is not None:
        schedule = Schedule(schedule.base_lr, tuple(m for m in schedule.milestones if m < iterations),
                            iterations, schedule.batch_size)
    batches = BatchSource(dataset, rng, schedule.batch_size, cfg.schedule.augment)
    stage = {"none": "baseline", "2way": "2way", "3way": "3way"}[cfg.resblock.mode]
    return run_training(model, model.params(), schedule, batches, cfg, stage, rng, log_fn)


def train_stage1_2way(cfg: ExperimentConfig, dataset, log_fn=None, iterations=None) -> TrainResult:
    if cfg.resblock.mode != "2way":
        raise StageError(f"stage 1 trains a 2way model, config has resblock.mode={cfg.resblock.mode}")
    return train_from_scratch(cfg, dataset, log_fn, iterations)


def is_finetuned(name):
    """Parameters trained in stage 2: branch3 and the prediction head."""
    return name.startswith("head.") or ".b3" in name


def prepare_stage2(stage1: Checkpoint, cfg: ExperimentConfig, rng):
    """3-way model carrying stage-1 weights, with everything but branch3 and head frozen."""
    if stage1.stage != "2way":
        raise StageError(f"stage 2 starts from a 2way checkpoint, got {stage1.stage!r}")
    if cfg.resblock.mode != "3way":
        cfg = cfg.replace(**{"resblock.mode": "3way"})
    model = Detector(cfg, rng)
    apply_checkpoint(model, stage1, strict=False)
    for p in model.params():
        p.freeze(not is_finetuned(p.name))
        if not p.frozen:
            p.zero_grad()
    return model


def train_stage2_3way(stage1: Checkpoint, cfg: ExperimentConfig, dataset, log_fn=None) -> TrainResult:
    rng = np.random.default_rng(cfg.schedule.seed + 1)
    model = prepare_stage2(stage1, cfg, rng)
    schedule = finetune_schedule(cfg.schedule)
    batches = BatchSource(dataset, rng, schedule.batch_size, cfg.schedule.augment)
    trainable = [p for p in model.params() if not p.frozen]
    return run_training(model, trainable, schedule, batches, model.cfg, "3way", rng, log_fn)
