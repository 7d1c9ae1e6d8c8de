"""SGD with momentum and weight decay, LR schedules, the training loop, and
binary checkpoints.

Training is deterministic given the config seed: batch order, augmentation
draws, and initialization all derive from it, so a run can be interrupted at
any iteration and resumed bit-exactly from a checkpoint.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from hrseg.backbone import build_classification_model, classify_forward
from hrseg.config import TrainConfig, network_spec_from_text, network_spec_to_text
from hrseg.data import AugmentConfig, augment_classification, augment_segmentation, dominant_class, resize_label_nearest
from hrseg.layers import cross_entropy_ignore
from hrseg.seghead import SegModel, build_seg_model, seg_forward
from hrseg.tensor import Tensor, backward, scale

CHECKPOINT_MAGIC = b"HRSEG1"
CHECKPOINT_VERSION = 1


# --- learning-rate policies ------------------------------------------------------


def poly_lr(iteration: int, total_iters: int, lr0: float, power: float) -> float:
    """lr0 * (1 - t/T)^power, stepped per iteration."""
    if total_iters <= 0:
        raise ValueError("total_iters must be positive")
    if not 0 <= iteration <= total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {total_iters}]")
    return lr0 * (1.0 - iteration / total_iters) ** power


def step_lr(epoch: int, lr0: float, milestones, factor: float) -> float:
    """lr0 * factor^(number of milestones reached)."""
    drops = sum(1 for m in milestones if m <= epoch)
    return lr0 * factor**drops


def lr_for(cfg: TrainConfig, iteration: int, total_iters: int, epoch: int) -> float:
    if cfg.lr_policy == "poly":
        return poly_lr(iteration, total_iters, cfg.lr0, cfg.poly_power)
    return step_lr(epoch, cfg.lr0, cfg.milestones, cfg.step_factor)


# --- optimizer --------------------------------------------------------------------


@dataclass
class OptimizerState:
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocities: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, momentum=0.9, weight_decay=1e-4):
        return cls(
            momentum=momentum,
            weight_decay=weight_decay,
            velocities=[np.zeros(p.shape, dtype=np.float32) for p in params],
        )


def sgd_step(params, state: OptimizerState, lr: float):
    """v <- momentum*v + (g + wd*w); w <- w - lr*v. Skips grad-less params."""
    if len(params) != len(state.velocities):
        raise ValueError("optimizer state does not match parameter list")
    for p, v in zip(params, state.velocities):
        if v.shape != p.shape:
            raise ValueError(f"velocity shape {v.shape} != param shape {p.shape}")
        if p.grad is None:
            continue
        g = p.grad + state.weight_decay * p.data
        v *= state.momentum
        v += g
        p.data -= lr * v


# --- deterministic per-iteration randomness -----------------------------------------


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7, epoch])))
    return rng.permutation(n)


# --- training loops -----------------------------------------------------------------


@dataclass
class TrainReport:
    curve: list  # (iteration, lr, loss) at every log interval
    iterations: int
    checkpoint_path: str | None = None
    loss_csv_path: str | None = None


def _seg_batch(dataset, indices, cfg, augment_cfg, iteration):
    imgs, labels = [], []
    for j, idx in enumerate(indices):
        s = dataset[int(idx)]
        if augment_cfg is not None:
            s = augment_segmentation(s, augment_cfg, _derived_seed(cfg.seed, 11, iteration, j))
        imgs.append(s.image)
        labels.append(s.label)
    return Tensor(np.stack(imgs)), np.stack(labels)


def _cls_batch(dataset, indices, cfg, augment_cfg, iteration, num_classes):
    imgs, labels = [], []
    for j, idx in enumerate(indices):
        s = dataset[int(idx)]
        if isinstance(s.label, np.ndarray):
            label = dominant_class(s.label, num_classes)
        else:
            label = int(s.label)
        if augment_cfg is not None:
            s = augment_classification(s, augment_cfg, _derived_seed(cfg.seed, 11, iteration, j))
        imgs.append(s.image)
        labels.append(label)
    return Tensor(np.stack(imgs)), np.asarray(labels, dtype=np.int64)


def _loss_for_batch(model, x, labels, cfg):
    if isinstance(model, SegModel):
        out = seg_forward(model, x)
        loss = cross_entropy_ignore(out.final_logits, labels)
        if model.spec.aux_supervision:
            for logits in out.scale_logits:
                small = np.stack(
                    [resize_label_nearest(lab, logits.shape[2], logits.shape[3]) for lab in labels]
                )
                loss = loss + scale(cross_entropy_ignore(logits, small), cfg.aux_weight)
        return loss
    return cross_entropy_ignore(classify_forward(model.backbone, model.head, x), labels)


def train(
    model,
    dataset,
    cfg: TrainConfig,
    augment_cfg: AugmentConfig | None = None,
    out_dir: str | None = None,
    state: OptimizerState | None = None,
    start_iteration: int = 0,
    stop_after: int | None = None,
) -> TrainReport:
    """Run the supervised loop; returns the logged loss curve.

    ``start_iteration``/``state`` resume an interrupted run bit-exactly, since
    every random draw is derived from (seed, iteration). ``stop_after`` halts
    early (checkpointing the progress) without changing the LR schedule.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    params = [t for _, t in model.named_params()]
    if state is None:
        state = OptimizerState.for_params(params, cfg.momentum, cfg.weight_decay)
    else:
        state.momentum, state.weight_decay = cfg.momentum, cfg.weight_decay
    iters_per_epoch = math.ceil(n / cfg.batch_size)
    total_iters = cfg.epochs * iters_per_epoch

    model.set_mode("train")
    curve = []
    iteration = 0
    done = start_iteration
    for epoch in range(cfg.epochs):
        order = epoch_order(cfg.seed, epoch, n)
        for b in range(iters_per_epoch):
            iteration = epoch * iters_per_epoch + b
            if iteration < start_iteration:
                continue
            if stop_after is not None and iteration >= stop_after:
                done = iteration
                return _finish(model, state, cfg, curve, done, out_dir)
            indices = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if isinstance(model, SegModel):
                x, labels = _seg_batch(dataset, indices, cfg, augment_cfg, iteration)
            else:
                x, labels = _cls_batch(dataset, indices, cfg, augment_cfg, iteration, model.spec.num_classes)
            loss = _loss_for_batch(model, x, labels, cfg)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise RuntimeError(f"non-finite loss at iteration {iteration}")
            backward(loss)
            lr = lr_for(cfg, iteration, total_iters, epoch)
            sgd_step(params, state, lr)
            model.zero_grad()
            if iteration % cfg.log_every == 0 or iteration == total_iters - 1:
                curve.append((iteration, lr, loss_value))
            done = iteration + 1
    return _finish(model, state, cfg, curve, done, out_dir)


def _finish(model, state, cfg, curve, done, out_dir):
    report = TrainReport(curve=curve, iterations=done)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        report.checkpoint_path = os.path.join(out_dir, "checkpoint.bin")
        save_checkpoint(model, state, report.checkpoint_path, iteration=done)
        report.loss_csv_path = os.path.join(out_dir, "losses.csv")
        with open(report.loss_csv_path, "w", encoding="utf-8") as f:
            f.write("iter,lr,loss\n")
            for it, lr, loss in curve:
                f.write(f"{it},{lr:.10g},{loss:.10g}\n")
    return report


# --- checkpoints ----------------------------------------------------------------------


def _named_state(model, state: OptimizerState | None, iteration: int):
    named = list(model.named_params())
    entries = [(name, t.data) for name, t in named]
    entries += list(model.named_buffers())
    if state is not None:
        entries += [("opt." + name, v) for (name, _), v in zip(named, state.velocities)]
    entries.append(("meta.iteration", np.array([iteration], dtype=np.float32)))
    return entries


def save_checkpoint(model, state: OptimizerState | None, path: str, iteration: int = 0):
    """magic, version, architecture text, then named float32 tensors."""
    kind = "seg" if isinstance(model, SegModel) else "cls"
    spec_bytes = network_spec_to_text(model.spec, kind=kind).encode("utf-8")
    entries = _named_state(model, state, iteration)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(spec_bytes)))
        f.write(spec_bytes)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            arr = np.asarray(arr)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def _read_exact(f, size, what):
    buf = f.read(size)
    if len(buf) != size:
        raise ValueError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path: str):
    """Rebuild (model, optimizer state, iteration) from a checkpoint file."""
    with open(path, "rb") as f:
        magic = _read_exact(f, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (spec_len,) = struct.unpack("<I", _read_exact(f, 4, "spec length"))
        spec_text = _read_exact(f, spec_len, "spec").decode("utf-8")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            numel = int(np.prod(dims)) if rank else 1
            raw = _read_exact(f, 4 * numel, f"data of {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        if f.read(1):
            raise ValueError("trailing bytes after checkpoint payload")

    spec, kind = network_spec_from_text(spec_text)
    model = build_seg_model(spec, seed=0) if kind == "seg" else build_classification_model(spec, seed=0)
    named = list(model.named_params())
    expected = (
        {name for name, _ in named}
        | {name for name, _ in model.named_buffers()}
        | {"opt." + name for name, _ in named}
        | {"meta.iteration"}
    )
    if expected != set(tensors):
        missing = sorted(expected - set(tensors))[:4]
        extra = sorted(set(tensors) - expected)[:4]
        raise ValueError(f"checkpoint does not match its architecture: missing {missing}, unexpected {extra}")
    for name, t in named:
        if tuple(tensors[name].shape) != tuple(t.shape):
            raise ValueError(f"shape mismatch for {name}")
        t.data = tensors[name]
    for name, buf in model.named_buffers():
        buf[:] = tensors[name]
    state = OptimizerState(
        velocities=[tensors["opt." + name].copy() for name, _ in named]
    )
    iteration = int(tensors["meta.iteration"][0])
    return model, state, iteration
