"""AdamW, the warmup/inverse-square-root schedule, and the adaptation loop."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import Utterance
from .errors import ConfigError, DataError, NumericalError
from .model import RunContext, TransducerModel, pad_batch
from .numeric import ADAPTER_PREFIX, ParamStore, Tensor, backward, stream
from .rnnt import batch_transducer_loss

log = logging.getLogger(__name__)

MODES = ("finetune", "adapter")


@dataclass
class TrainConfig:
    total_steps: int
    lr_peak: float
    batch_size: int = 16
    seed: int = 0
    mode: str = "adapter"
    warmup_fraction: float = 0.1
    weight_decay: float | None = None  # None -> 1e-3 for finetune, 0 for adapters
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in (0, 1)")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.weight_decay is None:
            self.weight_decay = 1e-3 if self.mode == "finetune" else 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` over the first warmup_fraction of steps, then 1/sqrt decay."""
    if not 1 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [1, {cfg.total_steps}]")
    w = cfg.warmup_fraction * cfg.total_steps
    return cfg.lr_peak * min(step / w, math.sqrt(w / step))


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, store: ParamStore, beta1=0.9, beta2=0.98, eps=1e-9, weight_decay=0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {n: np.zeros_like(t.data) for n, t in store.trainable_items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.trainable_items()}
        self.steps = 0

    def step(self, store: ParamStore, grads: dict[str, np.ndarray], lr: float):
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for {name}; step aborted")
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.steps
        c2 = 1.0 - b2**self.steps
        for name, t in store.trainable_items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                t.data *= 1.0 - lr * self.weight_decay
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def batch_loss(
    model: TransducerModel,
    utts: Sequence[Utterance],
    ctx: RunContext | None,
    prefix: tuple[int, Sequence[np.ndarray]] | None = None,
) -> Tensor:
    """Mean transducer loss over ``utts``.

    ``prefix=(depth, hiddens)`` supplies cached frozen-encoder outputs aligned
    with ``utts``.
    """
    blank = model.cfg.blank_id
    U = max(len(u.tokens) for u in utts)
    targets = np.zeros((len(utts), U), dtype=np.int64)
    for i, u in enumerate(utts):
        targets[i, : len(u.tokens)] = u.tokens
    tokens_in = np.concatenate([np.full((len(utts), 1), blank), targets], axis=1)
    if prefix is None:
        feats, lengths = pad_batch([u.features for u in utts])
        lp = model.log_probs(Tensor(feats), tokens_in, lengths, ctx)
    else:
        hidden, lengths = pad_batch(prefix[1])
        lp = model.log_probs(None, tokens_in, lengths, ctx, resume=(prefix[0], Tensor(hidden)))
    return batch_transducer_loss(lp, targets, lengths, [len(u.tokens) for u in utts], blank)


def _check_mode(model: TransducerModel, cfg: TrainConfig):
    store = model.store
    if cfg.mode == "adapter":
        if not model.adapters:
            raise ConfigError("adapter mode requires injected adapters")
        for name, t in store.items():
            if t.requires_grad != name.startswith(ADAPTER_PREFIX):
                raise ConfigError("adapter mode requires a frozen base (call freeze_base)")
    else:
        for name, _ in store.items():
            store.set_trainable(name, True)


def adapt(
    model: TransducerModel, train_data: Sequence[Utterance], cfg: TrainConfig
) -> tuple[TransducerModel, list[tuple[int, float, float]]]:
    """Optimise ``model`` in place on ``train_data`` for ``cfg.total_steps`` steps.

    Returns the model and a per-step log of (step, lr, loss).
    """
    if len(train_data) == 0:
        raise DataError("adaptation needs at least one training utterance")
    for u in train_data:
        if u.tokens and max(u.tokens) >= model.cfg.vocab_size:
            raise DataError(f"utterance {u.id} has a token outside the model vocabulary")
    _check_mode(model, cfg)
    opt = AdamW(model.store, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    steplog = []
    n = len(train_data)
    # frozen leading encoder blocks are deterministic: run them once per utterance
    depth = model.frozen_depth()
    cached = model.frozen_prefix([u.features for u in train_data], depth) if depth else None
    for step in range(1, cfg.total_steps + 1):
        idx = stream(cfg.seed, "batch", step).integers(0, n, size=cfg.batch_size)
        ctx = RunContext(seed=cfg.seed, step=step, train=True)
        prefix = (depth, [cached[i] for i in idx]) if cached else None
        loss = batch_loss(model, [train_data[i] for i in idx], ctx, prefix)
        if not math.isfinite(loss.item()):
            raise NumericalError(f"non-finite loss at step {step}")
        grads = backward(loss, model.store)
        clip_global_norm(grads, cfg.clip_norm)
        lr = lr_at(step, cfg)
        opt.step(model.store, grads, lr)
        steplog.append((step, lr, loss.item()))
        if step % 100 == 0 or step == cfg.total_steps:
            log.debug("step %d lr %.3g loss %.4f", step, lr, loss.item())
    return model, steplog


def write_step_log(steplog, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in steplog:
            w.writerow([step, repr(lr), repr(loss)])
