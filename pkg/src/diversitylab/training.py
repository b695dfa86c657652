"""Teacher-forced training with NLL, confidence-penalty and label-smoothing losses."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .corpus import CorpusError, DialoguePair, reverse_pairs
from .model import EOS, ModelConfig, Seq2Seq
from .tensor import Tensor

# ---------------------------------------------------------------- loss kinds


@dataclass(frozen=True)
class NLL:
    name = "nll"


@dataclass(frozen=True)
class ConfidencePenalty:
    beta: float
    name = "confidence-penalty"

    def __post_init__(self):
        if not self.beta >= 0.0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass(frozen=True)
class LabelSmoothing:
    epsilon: float
    name = "label-smoothing"

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")


LossKind = NLL | ConfidencePenalty | LabelSmoothing


class NormalizationError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"loss became {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


def step_entropy(dist) -> float:
    """Shannon entropy (nats) of a probability vector, with 0 ln 0 = 0."""
    p = np.asarray(dist.data if isinstance(dist, Tensor) else dist, dtype=np.float64).reshape(-1)
    if np.any(p < 0.0) or abs(p.sum() - 1.0) > 1e-9:
        raise NormalizationError(f"not a probability vector (sum={p.sum()!r})")
    nz = p[p > 0.0]
    return float(max(0.0, -(nz * np.log(nz)).sum()))


def token_losses(kind: LossKind, logp: Tensor, gold: Sequence[int]) -> Tensor:
    """Per-row losses ``[M]`` from log-distributions ``[M, N]`` and gold ids."""
    m, n = logp.shape
    onehot = np.zeros((m, n))
    onehot[np.arange(m), np.asarray(gold, dtype=np.int64)] = 1.0
    if isinstance(kind, LabelSmoothing):
        target = (1.0 - kind.epsilon) * onehot + kind.epsilon / n
        return T.negate(T.sum_cols(T.mul(logp, T.constant(target))))
    nll = T.negate(T.sum_cols(T.mul(logp, T.constant(onehot))))
    if isinstance(kind, ConfidencePenalty) and kind.beta != 0.0:
        # minus beta times entropy, entropy = -sum p log p
        neg_entropy = T.sum_cols(T.mul(T.exp(logp), logp))
        return T.add(nll, T.scale(neg_entropy, kind.beta))
    return nll


def token_loss(kind: LossKind, dist: Tensor, gold: int) -> Tensor:
    """Loss of one predicted distribution ``[N]`` against a gold token id."""
    n = dist.shape[-1]
    if not 0 <= gold < n:
        raise T.TokenIndexError(f"gold id {gold} outside [0, {n})")
    logp = T.log(T.reshape(dist, (1, n)))
    return T.reshape(token_losses(kind, logp, [gold]), ())


def _targets(pairs: Sequence[DialoguePair]) -> list[tuple[int, ...]]:
    for p in pairs:
        if not p.response or p.response[-1] != EOS:
            raise CorpusError(f"response {p.response} is not terminated by _EOS_")
    return [p.response for p in pairs]


def batch_loss(model: Seq2Seq, pairs: Sequence[DialoguePair], kind: LossKind) -> tuple[Tensor, Tensor, list]:
    """Mean over pairs of the per-pair mean token loss.

    Also returns the ``[M, N]`` log-distributions and their ``(row, t)``
    positions so callers can collect entropy statistics without a second pass.
    """
    targets = _targets(pairs)
    sources = [p.message for p in pairs] if model.config.conditional else None
    logp, where = model.forced_log_probs(sources, targets)
    gold = [targets[r][t] for r, t in where]
    per_token = token_losses(kind, logp, gold)
    weights = np.array([1.0 / (len(targets[r]) * len(pairs)) for r, _ in where])
    return T.dot(per_token, T.constant(weights)), logp, where


def sequence_loss(model: Seq2Seq, pair: DialoguePair, kind: LossKind) -> Tensor:
    return batch_loss(model, [pair], kind)[0]


# ---------------------------------------------------------------- optimisation


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"  # adam | sgd
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0.0:
            raise ValueError("learning rate must be > 0")
        if not self.clip_norm > 0.0:
            raise ValueError("clip norm must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class SGD:
    def __init__(self, params, lr: float):
        self.params, self.lr = params, lr

    def step(self) -> None:
        for p in self.params:
            p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr: float, beta1: float, beta2: float, eps: float):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(params, config.lr)
    return Adam(params, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)


def clip_gradients(params, max_norm: float) -> float:
    norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad *= factor
    return norm


@dataclass
class TrainReport:
    loss: list[float] = field(default_factory=list)
    mean_entropy: list[float] = field(default_factory=list)
    mean_maxprob: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    FIELDS = ("epoch", "loss", "mean_entropy", "mean_maxprob", "seconds")

    def rows(self):
        for i, row in enumerate(zip(self.loss, self.mean_entropy, self.mean_maxprob, self.seconds)):
            yield (i + 1, *row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.FIELDS)
        for row in self.rows():
            writer.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        return buf.getvalue()


def train(
    model: Seq2Seq,
    corpus: Sequence[DialoguePair],
    config: TrainConfig,
    kind: LossKind = NLL(),
    on_epoch: Callable[[int, TrainReport], None] | None = None,
) -> TrainReport:
    """Mini-batch training with a seeded shuffle each epoch.

    The shuffle generator is ``np.random.default_rng(config.seed)``; with the
    same model initialisation the run is bit-for-bit reproducible.
    """
    if not corpus:
        raise CorpusError("cannot train on an empty corpus")
    _targets(corpus)
    report = TrainReport()
    params = model.parameters()
    opt = make_optimizer(params, config)
    rng = np.random.default_rng(config.seed)
    # overflow shows up as a non-finite loss, which is reported below as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        _run_epochs(model, corpus, config, kind, params, opt, rng, report, on_epoch)
    model.zero_grad()
    return report


def _run_epochs(model, corpus, config, kind, params, opt, rng, report, on_epoch) -> None:
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(corpus))
        loss_sum, ent_sum, max_sum, n_tok = 0.0, 0.0, 0.0, 0
        for b, lo in enumerate(range(0, len(order), config.batch_size)):
            batch = [corpus[i] for i in order[lo : lo + config.batch_size]]
            model.zero_grad()
            with T.Tape() as tape:
                loss, logp, _ = batch_loss(model, batch, kind)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(epoch, b + 1, value)
            tape.backward(loss)
            clip_gradients(params, config.clip_norm)
            opt.step()
            probs = np.exp(logp.data)
            ent_sum += float(-(probs * logp.data).sum())
            max_sum += float(probs.max(axis=1).sum())
            n_tok += probs.shape[0]
            loss_sum += value * len(batch)
        report.loss.append(loss_sum / len(corpus))
        report.mean_entropy.append(ent_sum / n_tok)
        report.mean_maxprob.append(max_sum / n_tok)
        report.seconds.append(time.perf_counter() - start)
        if on_epoch is not None:
            on_epoch(epoch, report)


def train_language_model(
    responses: Sequence[DialoguePair] | Sequence[Sequence[int]],
    model_config: ModelConfig,
    config: TrainConfig,
    kind: LossKind = NLL(),
) -> tuple[Seq2Seq, TrainReport]:
    """Decoder-only model of p(Y) with a zero initial state."""
    pairs = [
        r if isinstance(r, DialoguePair) else DialoguePair((EOS,), tuple(r), check=False) for r in responses
    ]
    lm_config = dataclasses.replace(model_config, conditional=False, attention="none", heads=1)
    model = Seq2Seq(lm_config, seed=config.seed)
    return model, train(model, pairs, config, kind)


def train_reverse_model(
    corpus: Sequence[DialoguePair],
    model_config: ModelConfig,
    config: TrainConfig,
    kind: LossKind = NLL(),
) -> tuple[Seq2Seq, TrainReport]:
    """Seq2seq model of p(X|Y), trained on the swapped pairs."""
    model = Seq2Seq(model_config, seed=config.seed)
    return model, train(model, reverse_pairs(corpus), config, kind)
