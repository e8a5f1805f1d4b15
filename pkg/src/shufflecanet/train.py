"""SGD with warmup and per-epoch cosine annealing, and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import OptimConfig, RunConfig
from .data import Sample, letterbox_sample, mosaic, sample_seed
from .losses import assign_targets, total_loss
from .metrics import evaluate
from .model import Detector, images_to_tensor
from .pipeline import detect
from .tensor import Tape

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


def cosine_lr(epoch: float, cfg: OptimConfig) -> float:
    return cfg.lrf + (cfg.lr0 - cfg.lrf) * (1.0 + math.cos(math.pi * epoch / cfg.epochs)) / 2.0


def warmup_steps(cfg: OptimConfig, steps_per_epoch: int) -> int:
    return int(round(cfg.warmup_epochs * steps_per_epoch))


def warmup_schedule(step: int, cfg: OptimConfig, steps_per_epoch: int = 1) -> tuple[float, float]:
    """Linear ramp of lr from 0 and momentum from warmup_momentum, ending on the schedule."""
    nw = warmup_steps(cfg, steps_per_epoch)
    if nw == 0:
        return cosine_lr(0, cfg), cfg.momentum
    f = min(max(step / nw, 0.0), 1.0)
    lr = f * cosine_lr(cfg.warmup_epochs, cfg)
    mom = cfg.warmup_momentum + f * (cfg.momentum - cfg.warmup_momentum)
    return lr, mom


def schedule(step: int, cfg: OptimConfig, steps_per_epoch: int) -> tuple[float, float]:
    if step < warmup_steps(cfg, steps_per_epoch):
        return warmup_schedule(step, cfg, steps_per_epoch)
    return cosine_lr(step // steps_per_epoch, cfg), cfg.momentum


@dataclass
class OptimState:
    buffers: dict = field(default_factory=dict)   # id(param) -> momentum buffer
    step: int = 0
    lr: float = 0.0
    momentum: float = 0.0


def sgd_step(params, grads, state: OptimState, lr: float, momentum: float, weight_decay: float):
    """v = m v + (g + wd p) ; p -= lr v. Decay only where ``p.decay`` is set."""
    for p in params:
        g = grads[p]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.name or ''} {p.shape}")
        if weight_decay and p.decay:
            g = g + weight_decay * p.data
        v = state.buffers.get(id(p))
        if v is None:
            v = np.zeros_like(p.data)
            state.buffers[id(p)] = v
        v *= momentum
        v += g
        p.data -= lr * v
    state.step += 1
    state.lr, state.momentum = lr, momentum
    return state


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)     # dicts: step, lr, box, obj, cls, total
    evals: list = field(default_factory=list)     # dicts: epoch, map
    best_map: float = -1.0
    best_epoch: int = -1
    best_state: dict | None = None

    def log_lines(self) -> list[str]:
        return [f"{s['step']}\t{s['lr']:.8g}\t{s['box']:.8g}\t{s['obj']:.8g}\t{s['cls']:.8g}\t{s['total']:.8g}"
                for s in self.steps]


def _targets_array(samples) -> np.ndarray:
    rows = [np.column_stack([np.full(len(s.annotations), i), s.annotations]) for i, s in enumerate(samples)
            if len(s.annotations)]
    return np.concatenate(rows) if rows else np.zeros((0, 6))


def build_batch(samples, indices, cfg: RunConfig, epoch: int, boxed_cache: dict):
    size = cfg.model.input_size
    out = []
    for idx in indices:
        seed = sample_seed(cfg.seed, epoch, int(idx))
        rng = np.random.default_rng(seed)
        if cfg.data.mosaic > 0 and rng.random() < cfg.data.mosaic and len(samples) > 1:
            others = rng.choice(len(samples), size=3, replace=True)
            group = [samples[idx]] + [samples[j] for j in others]
            out.append(mosaic(group, seed, size))
        else:
            if idx not in boxed_cache:
                boxed_cache[idx] = letterbox_sample(samples[idx], size)[0]
            out.append(boxed_cache[idx])
    return out


def train(model: Detector, dataset, cfg: RunConfig, seed: int | None = None, val_dataset=None,
          log_file=None, max_steps: int | None = None) -> TrainHistory:
    """Train in place; returns per-step losses, evaluations and the best state."""
    samples = list(dataset)
    if not samples:
        raise ValueError("training dataset is empty")
    if seed is not None and seed != cfg.seed:
        from dataclasses import replace
        cfg = replace(cfg, seed=seed)
    oc = cfg.optim
    bs = min(oc.batch_size, len(samples))
    nb = math.ceil(len(samples) / bs)
    params = model.parameters()
    state = OptimState()
    hist = TrainHistory()
    cache: dict = {}
    val = list(val_dataset) if val_dataset is not None else samples
    step = 0
    dtype = params[0].dtype
    model.train()
    for epoch in range(oc.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        for b in range(nb):
            if max_steps is not None and step >= max_steps:
                break
            batch = build_batch(samples, order[b * bs:(b + 1) * bs], cfg, epoch, cache)
            lr, mom = schedule(step, oc, nb)
            x = images_to_tensor([s.image for s in batch], dtype)
            targets = assign_targets(_targets_array(batch), cfg.model.head, cfg.model.input_size,
                                     cfg.loss.anchor_t)
            with Tape() as tape:
                loss, comps = total_loss(model(x), targets, cfg.loss, cfg.num_classes)
            if not np.isfinite(comps["total"]):
                raise TrainingError(step, f"non-finite loss {comps}")
            grads = tape.backward(loss)
            sgd_step(params, grads, state, lr, mom, oc.weight_decay)
            rec = {"step": step, "lr": lr, **comps}
            hist.steps.append(rec)
            if log_file is not None:
                log_file.write(hist.log_lines()[-1] + "\n")
            step += 1
        last = epoch == oc.epochs - 1 or (max_steps is not None and step >= max_steps)
        if (cfg.data.eval_interval and (epoch + 1) % cfg.data.eval_interval == 0) or last:
            m = evaluate_model(model, val, cfg)
            hist.evals.append({"epoch": epoch, "map": m})
            log.info("epoch %d mAP@0.5 %.4f", epoch, m)
            if m > hist.best_map:
                hist.best_map, hist.best_epoch = m, epoch
                hist.best_state = {k: v.copy() for k, v in model.state_dict().items()}
        if max_steps is not None and step >= max_steps:
            break
    return hist


def evaluate_model(model: Detector, samples, cfg: RunConfig, conf_threshold=None):
    """mAP@0.5 of the model on original-resolution samples."""
    thr = cfg.detect.eval_conf_threshold if conf_threshold is None else conf_threshold
    preds = detect(model, [s.image for s in samples], thr, cfg.detect.iou_threshold)
    report = evaluate(preds, [s.annotations for s in samples], cfg.num_classes, cfg.class_names,
                      conf_threshold=cfg.detect.conf_threshold)
    return report.map
