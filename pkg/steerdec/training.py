"""Drafter alignment: synthetic data from the verifier, KL losses, AdamW with a warmup-cosine schedule."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import xlogy
from tqdm import tqdm

from . import tensor as T
from .errors import ContractError, DomainError, TrainingDivergedError
from .jsonl import append_jsonl, write_jsonl
from .models import DecodeMode, OffsetMode, TrainingConfig
from .specdec import autoregressive_generate
from .steering import SteeringState, SteeringVector, compute_steering, steering_hook
from .tensor import Tensor
from .transformer import MlpSteering, TransformerModel, forward

logger = logging.getLogger(__name__)

KL_FLOOR = 1e-9

Validator = Callable[[TransformerModel, SteeringState | None], float]
EpochCallback = Callable[[int, TransformerModel, SteeringState | None], None]


@dataclass
class SyntheticCorpus:
    sequences: list[list[int]]
    temperature: float
    seed: int
    prompt_lengths: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sequences)


@dataclass
class TrainResult:
    model: TransformerModel
    steering: SteeringState | None
    curve: list[dict[str, Any]] = field(default_factory=list)

    @property
    def final_loss(self) -> float | None:
        return self.curve[-1]["loss"] if self.curve else None


def generate_synthetic(
    verifier: TransformerModel,
    prompt_source: Sequence[Sequence[int]],
    temperature: float,
    max_len: int,
    n_sequences: int,
    seed: int,
    workers: int = 1,
) -> SyntheticCorpus:
    """Sample continuations of ``prompt_source`` (cycled) from the verifier.

    Sequence ``i`` uses its own generator seeded with ``(seed, i)``, so the corpus does not
    depend on ``workers``.
    """
    if not prompt_source:
        raise DomainError("synthetic generation needs at least one prompt")

    def one(i: int) -> list[int]:
        prompt = list(prompt_source[i % len(prompt_source)])
        rng = np.random.default_rng([seed, i])
        budget = max(0, min(max_len, verifier.config.max_seq_len) - len(prompt))
        if budget == 0:
            return prompt[:max_len]
        return prompt + autoregressive_generate(verifier, prompt, budget, temperature, rng)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        sequences = list(pool.map(one, range(n_sequences)))
    lengths = [len(prompt_source[i % len(prompt_source)]) for i in range(n_sequences)]
    logger.info("generated %d synthetic sequences at T=%g", n_sequences, temperature)
    return SyntheticCorpus(sequences, temperature, seed, lengths)


def kl_loss(p_v: np.ndarray | Sequence[float], p_d: np.ndarray | Sequence[float]) -> float:
    pv = np.asarray(p_v, dtype=np.float64)
    pd = np.maximum(np.asarray(p_d, dtype=np.float64), KL_FLOOR)
    return max(0.0, float(np.sum(xlogy(pv, pv) - xlogy(pv, pd))))


def kl_divergence(targets: np.ndarray, logits: Tensor) -> Tensor:
    """Summed KL(targets || softmax(logits)) over rows, differentiable in ``logits``."""
    log_pd = T.log(T.clamp_min(T.softmax(logits), KL_FLOOR))
    cross = T.sum(T.mul(Tensor(targets.astype(logits.dtype)), log_pd))
    neg_entropy = float(np.sum(xlogy(targets, targets)))
    return T.add(T.scale(cross, -1.0), neg_entropy)


def draw_offsets(k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(1, k + 1, size=n)


def steering_sources(n: int, delta: int, k: int, mode: OffsetMode) -> np.ndarray:
    """Verifier row whose steering vector conditions each drafter row, -1 where none exists."""
    if not 1 <= delta <= k:
        raise DomainError(f"offset {delta} outside [1, {k}]")
    p = np.arange(n)
    if OffsetMode(mode) is OffsetMode.PER_SEQUENCE_RANDOM:
        src = p - delta
    else:
        # latest anchor r <= p - 1 with r mod k == delta - 1
        src = (p - 1) - np.mod(p - 1 - (delta - 1), k)
    return np.where(src >= 0, src, -1)


def loss_rows(n: int, k: int) -> np.ndarray:
    return np.arange(k, n - 1)


def _row_hook(steering: SteeringState, g: Tensor, sources: np.ndarray) -> MlpSteering | None:
    padded = T.concat([g, T.zeros((1, g.shape[1]), dtype=g.dtype)], axis=0)
    rows = T.take_rows(padded, np.where(sources < 0, g.shape[0], sources))
    return steering_hook(steering, SteeringVector(rows))


def alignment_loss(
    drafter: TransformerModel,
    verifier: TransformerModel,
    batch: Sequence[Sequence[int]],
    k: int,
    offsets: Sequence[int],
    steering: SteeringState | None = None,
    offset_mode: OffsetMode = OffsetMode.PER_SEQUENCE_RANDOM,
) -> Tensor:
    total: Tensor | None = None
    count = 0
    for seq, delta in zip(batch, offsets, strict=True):
        ids = np.asarray(seq, dtype=np.int64)
        n = ids.shape[0]
        rows = loss_rows(n, k)
        if rows.size == 0:
            continue
        tap_positions = range(n) if steering is not None else None
        out_v = forward(verifier, ids, tap_positions=tap_positions)
        targets = T.softmax(out_v.logits).data[rows]
        hook = None
        if steering is not None and out_v.taps is not None:
            g = compute_steering(steering, out_v.taps).g
            hook = _row_hook(steering, g, steering_sources(n, int(delta), k, offset_mode))
        logits = forward(drafter, ids, steer_bias=hook).logits
        seq_loss = kl_divergence(targets, T.take_rows(logits, rows))
        total = seq_loss if total is None else total + seq_loss
        count += rows.size
    if total is None:
        raise DomainError(f"batch has no sequence longer than k + 1 = {k + 1}")
    return T.scale(total, 1.0 / count)


def next_token_loss(model: TransformerModel, batch: Sequence[Sequence[int]]) -> Tensor:
    """Cross-entropy of the next token, written as KL against one-hot targets."""
    total: Tensor | None = None
    count = 0
    vocab = model.config.vocab_size
    for seq in batch:
        ids = np.asarray(seq, dtype=np.int64)
        if ids.shape[0] < 2:
            continue
        targets = np.eye(vocab)[ids[1:]]
        logits = forward(model, ids[:-1]).logits
        seq_loss = kl_divergence(targets, logits)
        total = seq_loss if total is None else total + seq_loss
        count += ids.shape[0] - 1
    if total is None:
        raise DomainError("batch has no sequence with at least two tokens")
    return T.scale(total, 1.0 / count)


def _backward(loss: Tensor, tape: T.Tape) -> float:
    if loss._tape is not tape:
        raise ContractError("loss does not depend on any trainable parameter")
    tape.backward(loss)
    return loss.item()


def _check_frozen(verifier: TransformerModel) -> None:
    if verifier.is_trainable():
        raise ContractError("the verifier must stay frozen during alignment")


def sd2_training_step(
    drafter: TransformerModel,
    steering: SteeringState,
    verifier: TransformerModel,
    batch: Sequence[Sequence[int]],
    config: TrainingConfig,
    rng: np.random.Generator | None = None,
    offsets: Sequence[int] | None = None,
) -> float:
    _check_frozen(verifier)
    if offsets is None:
        offsets = draw_offsets(config.k, len(batch), rng if rng is not None else np.random.default_rng(config.seed))
    with T.Tape() as tape:
        loss = alignment_loss(drafter, verifier, batch, config.k, offsets, steering, config.offset_mode)
        return _backward(loss, tape)


def distill_training_step(
    drafter: TransformerModel,
    verifier: TransformerModel,
    batch: Sequence[Sequence[int]],
    config: TrainingConfig,
    rng: np.random.Generator | None = None,
) -> float:
    _check_frozen(verifier)
    # offsets are drawn anyway so both modes consume the same rng stream
    if rng is not None:
        draw_offsets(config.k, len(batch), rng)
    with T.Tape() as tape:
        loss = alignment_loss(drafter, verifier, batch, config.k, [1] * len(batch))
        return _backward(loss, tape)


def pretrain_step(model: TransformerModel, batch: Sequence[Sequence[int]]) -> float:
    with T.Tape() as tape:
        return _backward(next_token_loss(model, batch), tape)


def lr_at(step: int, config: TrainingConfig, total_steps: int) -> float:
    peak, floor = config.lr_peak, config.lr_floor
    warmup = config.warmup_steps
    if step < warmup:
        return floor + (peak - floor) * step / warmup
    progress = min(1.0, (step - warmup) / max(1, total_steps - warmup))
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm of at most ``max_norm``; returns the norm before."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if total > max_norm:
        factor = max_norm / total
        for g in grads:
            g *= factor
    return total


def decays(name: str) -> bool:
    return not (name.endswith("norm") or name.startswith("steer."))


@dataclass(frozen=True)
class StepStats:
    lr: float
    grad_norm: float


class AdamW:
    def __init__(self, params: dict[str, Tensor], config: TrainingConfig, total_steps: int) -> None:
        self.params = params
        self.config = config
        self.total_steps = total_steps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def trainable(self) -> dict[str, Tensor]:
        return {name: p for name, p in self.params.items() if p.requires_grad}

    def step(self, step_index: int) -> StepStats:
        active = {name: p for name, p in self.trainable().items() if p.grad is not None}
        bad = sorted(name for name, p in active.items() if not np.isfinite(p.grad).all())  # type: ignore[arg-type]
        if bad:
            raise TrainingDivergedError(f"non-finite gradients at step {step_index} in: {', '.join(bad)}")
        grad_norm = clip_grad_norm(active.values(), self.config.grad_clip_norm)
        lr = lr_at(step_index, self.config, self.total_steps)
        beta1, beta2 = self.config.betas
        for name, p in active.items():
            grad = p.grad
            assert grad is not None
            if name not in self._m:
                self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
                self._t[name] = 0
            self._t[name] += 1
            t = self._t[name]
            m = self._m[name] = beta1 * self._m[name] + (1 - beta1) * grad
            v = self._v[name] = beta2 * self._v[name] + (1 - beta2) * grad * grad
            if decays(name):
                p.data -= lr * self.config.weight_decay * p.data
            m_hat = m / (1 - beta1**t)
            v_hat = v / (1 - beta2**t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.config.adam_eps)).astype(p.dtype)
            p.grad = None
        return StepStats(lr, grad_norm)


def _zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def _fit(
    desc: str,
    params: dict[str, Tensor],
    sequences: list[list[int]],
    config: TrainingConfig,
    step_fn: Callable[[list[list[int]], np.random.Generator], float],
    rng: np.random.Generator,
    evaluate: Callable[[], float] | None,
    on_epoch_end: Callable[[int], None] | None,
    curve_path: str | Path | None,
    progress: bool,
) -> list[dict[str, Any]]:
    steps_per_epoch = math.ceil(len(sequences) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    optimizer = AdamW(params, config, total_steps)
    curve: list[dict[str, Any]] = []
    if curve_path is not None:
        write_jsonl([], curve_path)
    step = 0
    with tqdm(total=total_steps, desc=desc, disable=not progress, leave=False) as bar:
        for epoch in range(config.epochs):
            order = rng.permutation(len(sequences))
            for b in range(steps_per_epoch):
                batch = [sequences[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
                _zero_grads(params)
                loss = step_fn(batch, rng)
                stats = optimizer.step(step)
                record: dict[str, Any] = {
                    "step": step,
                    "epoch": epoch,
                    "lr": stats.lr,
                    "loss": loss,
                    "grad_norm": stats.grad_norm,
                }
                if evaluate is not None and config.eval_every and (step + 1) % config.eval_every == 0:
                    record["val_tau"] = evaluate()
                    logger.info("%s step %d: validation tau %.3f", desc, step, record["val_tau"])
                if config.log_every and step % config.log_every == 0:
                    logger.info(
                        "%s step %d/%d: loss %.5f lr %.2e grad_norm %.3f",
                        desc, step, total_steps, loss, stats.lr, stats.grad_norm,
                    )
                curve.append(record)
                if curve_path is not None:
                    append_jsonl(record, curve_path)
                bar.update(1)
                bar.set_postfix(loss=f"{loss:.4f}")
                step += 1
            if on_epoch_end is not None:
                on_epoch_end(epoch)
    return curve


def _usable(sequences: Iterable[Sequence[int]], seq_len: int, min_len: int) -> list[list[int]]:
    usable = [list(s[:seq_len]) for s in sequences if len(s[:seq_len]) >= min_len]
    if not usable:
        raise DomainError(f"no training sequence has at least {min_len} tokens")
    return usable


def pretrain(
    model: TransformerModel,
    sequences: Iterable[Sequence[int]],
    config: TrainingConfig,
    on_epoch_end: EpochCallback | None = None,
    curve_path: str | Path | None = None,
    progress: bool = False,
) -> TrainResult:
    """Ordinary next-token training; returns a trained copy of ``model``."""
    model = model.clone()
    model.set_trainable(True)
    data = _usable(sequences, config.seq_len, 2)
    callback = (lambda epoch: on_epoch_end(epoch, model, None)) if on_epoch_end is not None else None
    curve = _fit(
        f"pretrain[{model.role}]",
        model.parameters(),
        data,
        config,
        lambda batch, _rng: pretrain_step(model, batch),
        np.random.default_rng(config.seed),
        None,
        callback,
        curve_path,
        progress,
    )
    model.set_trainable(False)
    return TrainResult(model, None, curve)


def train(
    mode: DecodeMode,
    drafter: TransformerModel,
    verifier: TransformerModel,
    sequences: Iterable[Sequence[int]],
    config: TrainingConfig,
    steering: SteeringState | None = None,
    validate: Validator | None = None,
    on_epoch_end: EpochCallback | None = None,
    curve_path: str | Path | None = None,
    progress: bool = False,
) -> TrainResult:
    """Align a copy of ``drafter`` to the frozen verifier by distillation or steered training.

    For ``sd2`` a fresh steering state is initialised unless one is given; with
    ``config.freeze_drafter`` only the steering parameters move.
    """
    mode = DecodeMode(mode)
    if mode is DecodeMode.PRETRAINED:
        raise ContractError("pretrained drafters come from pretrain(), not train()")
    verifier.set_trainable(False)
    drafter = drafter.clone()
    sd2 = mode is DecodeMode.SD2
    if sd2:
        if steering is None:
            steering = SteeringState.init(config.variant, verifier.config, drafter.config, config.seed, drafter.dtype)
        else:
            steering = steering.clone()
        steering.set_trainable(True)
        drafter.set_trainable(not config.freeze_drafter)
    else:
        steering = None
        drafter.set_trainable(True)

    params = dict(drafter.parameters())
    if steering is not None:
        params.update(steering.parameters())
    data = _usable(sequences, config.seq_len, config.k + 2)

    def step_fn(batch: list[list[int]], rng: np.random.Generator) -> float:
        if steering is not None:
            return sd2_training_step(drafter, steering, verifier, batch, config, rng)
        return distill_training_step(drafter, verifier, batch, config, rng)

    evaluate = (lambda: validate(drafter, steering)) if validate is not None else None
    callback = (lambda epoch: on_epoch_end(epoch, drafter, steering)) if on_epoch_end is not None else None
    tag = f"{mode}" + ("-frozen" if sd2 and config.freeze_drafter else "")
    curve = _fit(
        f"align[{tag}]",
        params,
        data,
        config,
        step_fn,
        np.random.default_rng(config.seed),
        evaluate,
        callback,
        curve_path,
        progress,
    )
    drafter.set_trainable(False)
    if steering is not None:
        steering.set_trainable(False)
    return TrainResult(drafter, steering, curve)
