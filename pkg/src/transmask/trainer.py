"""Desk-scale training: Adam, gradient clipping, uPIT objective, best-validation checkpointing."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .data import generate_dataset
from .objective import si_snr_improvement, upit_loss
from .separator import ConfigError, forward, init_params
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update; ``params`` are rebound to new arrays."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)
    return state


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients by one positive factor so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def training_step(config, params, item):
    """Forward + backward on one utterance; returns (loss, grads)."""
    for p in params.values():
        p.zero_grad()
    estimates = forward(item.mixture.samples, config, params)
    loss, _ = upit_loss(estimates, Tensor(item.references))
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} on item {item.index}")
    loss.backward()
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {k} on item {item.index}")
    return value, grads


def separate_items(config, params, items):
    with no_grad():
        return [np.asarray(forward(it.mixture.samples, config, params).data) for it in items]


def evaluate_si_snri(config, params, items):
    """Mean best-permutation SI-SNRi (dB) over ``items``."""
    scores = []
    for item, est in zip(items, separate_items(config, params, items)):
        scores.append(si_snr_improvement(est, item.references, item.mixture.samples)[0])
    return float(np.mean(scores))


def evaluate_loss(config, params, items):
    with no_grad():
        return float(np.mean([
            upit_loss(forward(it.mixture.samples, config, params), Tensor(it.references))[0].item()
            for it in items
        ]))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list
    best_epoch: int
    params: dict


def train(config, spec, epochs, lr=1e-3, clip_norm=5.0, seed=0, target_si_snri=None, on_record=None,
          dataset=None):
    """Train from a seeded initialisation; keeps the best-validation checkpoint.

    One log record per epoch: ``epoch``, ``train_loss``, ``valid_si_snri``,
    ``wall_seconds``. Stops early once ``target_si_snri`` is reached.
    """
    config.validate()
    if spec.sample_rate != config.sample_rate:
        raise ConfigError(f"dataset sample rate {spec.sample_rate} Hz differs from model {config.sample_rate} Hz")
    data = dataset or generate_dataset(spec)
    params = init_params(config, seed)
    state = AdamState()
    order_rng = np.random.default_rng([seed, 1])
    records, best, best_score = [], None, -np.inf
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        losses = []
        for idx in order_rng.permutation(len(data.train)):
            value, grads = training_step(config, params, data.train[idx])
            grads, _ = clip_by_global_norm(grads, clip_norm)
            adam_step(params, grads, state, lr)
            losses.append(value)
        score = evaluate_si_snri(config, params, data.valid)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "valid_si_snri": score,
                  "wall_seconds": time.perf_counter() - start}
        records.append(record)
        log.info("epoch %d train_loss=%.3f valid_si_snri=%.3f", epoch, record["train_loss"], score)
        if on_record is not None:
            on_record(record)
        if score > best_score:
            best_score = score
            best = Checkpoint.from_tensors(config, params, epoch=epoch, valid_si_snri=score, seed=seed)
        if target_si_snri is not None and score >= target_si_snri:
            break
    for p in params.values():
        p.zero_grad()
    return TrainResult(best, records, best.meta["epoch"], params)
