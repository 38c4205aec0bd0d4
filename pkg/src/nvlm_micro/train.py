"""AdamW training step and the overfit harness."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .model import NVLMModel, TrainingExample

log = logging.getLogger(__name__)


class AdamW:
    """Adam with decoupled weight decay, keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, tc: TrainConfig) -> AdamW:
        return cls(tc.lr, (tc.beta1, tc.beta2), tc.eps, tc.weight_decay)

    def step(self, params: dict[str, ad.Tensor], names: Sequence[str], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n in names:
            p = params[n]
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(n, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(n, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[n], self.v[n] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.assign(p.data - lr * update)


def _accumulate(model: NVLMModel, batch: Sequence[TrainingExample], names: Sequence[str]) -> float:
    if not batch:
        raise ValueError("empty batch")
    for n in model.params:
        model.params[n].zero_grad()
    total = 0.0
    for ex in batch:
        _, loss = model.forward(ex)
        ad.backward(ad.scale(loss, 1.0 / len(batch)))
        total += float(loss.data)
    # gradients only ever land on trainable names; drop any stray ones
    keep = set(names)
    for n, p in model.params.items():
        if n not in keep:
            p.zero_grad()
    return total / len(batch)


def _clip(model: NVLMModel, names: Sequence[str], max_norm: float | None) -> float:
    norm = ad.parameters_grad_norm(model.params[n] for n in names)
    if max_norm is not None and norm > max_norm:
        k = max_norm / (norm + 1e-12)
        for n in names:
            p = model.params[n]
            if p.grad is not None:
                p.grad = p.grad * k
    return norm


def _set_trainable(model: NVLMModel, names: Sequence[str]) -> None:
    keep = set(names)
    for n, p in model.params.items():
        p.requires_grad = n in keep


def train_step(model: NVLMModel, batch: Sequence[TrainingExample], opt: AdamW, stage: int = 2,
               grad_clip: float | None = 1.0, lr: float | None = None) -> float:
    """One AdamW update of the non-frozen parameters; returns the mean batch loss."""
    names = model.trainable_names(stage)
    _set_trainable(model, names)
    loss = _accumulate(model, batch, names)
    _clip(model, names, grad_clip)
    opt.step(model.params, names, lr)
    return loss


def sgd_step(model: NVLMModel, batch: Sequence[TrainingExample], lr: float, stage: int = 2) -> float:
    """Plain gradient descent; used for small-step descent sanity checks."""
    names = model.trainable_names(stage)
    _set_trainable(model, names)
    loss = _accumulate(model, batch, names)
    for n in names:
        p = model.params[n]
        if p.grad is not None:
            p.assign(p.data - lr * p.grad)
    return loss


def corpus_loss(model: NVLMModel, corpus: Sequence[TrainingExample]) -> float:
    return float(np.mean([model.loss(ex) for ex in corpus]))


@dataclass
class LossCurve:
    steps: list[int] = field(default_factory=list)
    batch_loss: list[float] = field(default_factory=list)
    corpus_loss: dict[int, float] = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.corpus_loss[max(self.corpus_loss)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "batch_loss", "corpus_loss"])
        rows = sorted(set(self.steps) | set(self.corpus_loss))
        batch = dict(zip(self.steps, self.batch_loss))
        for s in rows:
            b = f"{batch[s]:.10f}" if s in batch else ""
            c = f"{self.corpus_loss[s]:.10f}" if s in self.corpus_loss else ""
            w.writerow([s, b, c])
        return buf.getvalue()


def overfit_harness(model: NVLMModel, corpus: Sequence[TrainingExample], tc: TrainConfig,
                    seed: int = 0, eval_every: int = 50) -> LossCurve:
    """Train on ``corpus`` until the full-corpus loss drops below
    ``tc.target_loss`` or ``tc.steps`` updates have run.

    ``corpus_loss`` is recorded at step 0, every ``eval_every`` steps and at
    the last step; step ``s`` means "after ``s`` updates".
    """
    rng = np.random.default_rng([seed, 7])
    opt = AdamW.from_config(tc)
    curve = LossCurve()
    curve.corpus_loss[0] = corpus_loss(model, corpus)
    if curve.corpus_loss[0] < tc.target_loss:
        return curve
    bs = min(tc.batch_size, len(corpus))
    order: list[int] = []
    for step in range(1, tc.steps + 1):
        if len(order) < bs:
            order.extend(rng.permutation(len(corpus)).tolist())
        idx, order = order[:bs], order[bs:]
        loss = train_step(model, [corpus[i] for i in idx], opt, tc.stage, tc.grad_clip, tc.lr_at(step - 1))
        curve.steps.append(step)
        curve.batch_loss.append(loss)
        if step % eval_every == 0 or step == tc.steps:
            curve.corpus_loss[step] = corpus_loss(model, corpus)
            log.info("step %d batch %.4f corpus %.4f", step, loss, curve.corpus_loss[step])
            if curve.corpus_loss[step] < tc.target_loss:
                break
    return curve
