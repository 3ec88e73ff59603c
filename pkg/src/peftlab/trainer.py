"""Mini-batch training with Adam, freeze-aware updates, and wall-clock timing."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import cacnn as cacnn_mod
from . import encoder as enc
from .span import decode_span, score


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 3
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    max_answer_len: int = 30

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


class Adam:
    """Adam with moment buffers only for trainable parameters."""

    def __init__(self, registry, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.registry = registry
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in registry.trainable_items()}
        self.v = {n: np.zeros_like(t.data) for n, t in registry.trainable_items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, tensor in self.registry.trainable_items():
            g = tensor.grad
            if g is None:
                continue
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            tensor.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for _, tensor in self.registry.items():
            tensor.zero_grad()


@dataclass
class Model:
    """Encoder plus task head; the unit train and evaluate operate on."""
    registry: "enc.ParameterRegistry"
    config: "enc.EncoderConfig"
    head: object = "affine_span"  # or a CacnnConfig

    def span_logits(self, example):
        x = enc.forward(self.registry, self.config, example.tokens,
                        example.segments, example.attention_mask)
        if self.head == "affine_span":
            return enc.span_head_logits(self.registry, x)
        maps = cacnn_mod.forward(x, self.registry, self.head)
        return cacnn_mod.head_logits(maps, self.registry)


@dataclass
class TrainResult:
    model: Model
    loss_history: list  # (step, epoch, loss)
    train_seconds: float


def example_loss(model, example):
    """Mean of start- and end-position cross-entropy."""
    start_logits, end_logits = model.span_logits(example)
    s, e = example.gold_span
    loss = ag.add(ag.cross_entropy_from_logits(start_logits, s),
                  ag.cross_entropy_from_logits(end_logits, e))
    return ag.scale(loss, 0.5)


def train(model, dataset, train_config):
    """Run the full loop; Adam touches only trainable-flagged parameters."""
    opt = Adam(model.registry, train_config.learning_rate,
               train_config.beta1, train_config.beta2, train_config.eps)
    rng = np.random.default_rng(train_config.seed)
    history = []
    step = 0
    t0 = time.monotonic()
    for epoch in range(train_config.epochs):
        order = rng.permutation(len(dataset))
        for lo in range(0, len(dataset), train_config.batch_size):
            batch = [dataset[i] for i in order[lo:lo + train_config.batch_size]]
            opt.zero_grad()
            losses = [example_loss(model, ex) for ex in batch]
            total = losses[0]
            for extra in losses[1:]:
                total = ag.add(total, extra)
            total = ag.scale(total, 1.0 / len(batch))
            loss_val = total.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(step, loss_val)
            total.backward()
            opt.step()
            history.append((step, epoch, loss_val))
            step += 1
    train_seconds = time.monotonic() - t0
    return TrainResult(model, history, train_seconds)


def evaluate(model, dataset, train_config):
    """Forward + decode + score; times forward and decode only."""
    predictions = []
    seconds = 0.0
    with ag.no_grad():
        for ex in dataset:
            t0 = time.monotonic()
            start_logits, end_logits = model.span_logits(ex)
            pred = decode_span(start_logits.data, end_logits.data,
                               train_config.max_answer_len)
            seconds += time.monotonic() - t0
            predictions.append(pred)
    em, f1 = score(predictions, dataset)
    return em, f1, seconds


def efficiency_ratio(f1_percent, trainable_count):
    """(F1 - 50) / log10(trainable parameter count), F1 on the 0-100 scale."""
    if 0.0 < f1_percent <= 1.0:
        raise ValueError(
            f"f1_percent {f1_percent} looks like a fraction; pass a percentage"
        )
    if trainable_count < 2:
        raise ValueError("trainable_count must be >= 2")
    return (f1_percent - 50.0) / math.log10(trainable_count)


def save_loss_history(history, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("step,epoch,loss\n")
        for step, epoch, loss in history:
            fh.write(f"{step},{epoch},{loss!r}\n")
