"""Over-confidence traces and corpus-level diversity metrics.

The quantities here are our own operationalisation of "over-confidence":
per-step entropy of the output distribution, per-step maximum probability,
and the snowball index (fraction of consecutive steps where the maximum
probability strictly increases).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .decoding import MAP, Hypothesis, RerankObjective, beam_search, greedy_decode, rerank
from .model import EOS, START, Seq2Seq
from .training import step_entropy

DEFAULT_TOP_K = 10


@dataclass
class StepDistribution:
    step: int
    entries: list[tuple[str, float]]
    full_entropy: float

    def to_record(self) -> dict:
        return {"step": self.step, "topk": [[t, p] for t, p in self.entries], "entropy": self.full_entropy}


@dataclass
class ConfidenceTrajectory:
    max_probs: list[float]
    entropies: list[float]
    tokens: list[int]


@dataclass
class DiversityReport:
    distinct_1: float | None
    distinct_2: float | None
    mean_response_length: float
    mean_step_entropy: float
    snowball_index: float | None

    FIELDS = ("distinct_1", "distinct_2", "mean_response_length", "mean_step_entropy", "snowball_index")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def csv_row(self, label: str = "") -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", *self.FIELDS])
        writer.writerow([label] + ["" if getattr(self, f) is None else repr(getattr(self, f)) for f in self.FIELDS])
        return buf.getvalue()


@dataclass(frozen=True)
class DecodeConfig:
    max_len: int = 20
    beam: int | None = None  # None: greedy
    objective: RerankObjective = MAP()


def _token_name(vocab, idx: int) -> str:
    return vocab.token_of(idx) if vocab is not None else str(idx)


def forced_trajectory(model: Seq2Seq, source: Sequence[int] | None, tokens: Sequence[int]) -> tuple[list[np.ndarray], ConfidenceTrajectory]:
    """Full distributions and confidence statistics along a fixed token path."""
    state = model.initial_state([list(source)] if model.config.conditional else None, rows=1)
    dists, max_probs, entropies = [], [], []
    prev = START
    for tok in tokens:
        state, lp = model.step_log_probs(state, [prev])
        p = np.exp(lp[0])
        dists.append(p)
        max_probs.append(float(p.max()))
        entropies.append(step_entropy(p))
        prev = tok
    return dists, ConfidenceTrajectory(max_probs, entropies, list(tokens))


def trace_decode(
    model: Seq2Seq,
    source: Sequence[int],
    k: int = DEFAULT_TOP_K,
    max_len: int = 20,
    vocab=None,
) -> tuple[list[StepDistribution], ConfidenceTrajectory]:
    """Greedy decode recording the top-``k`` of every step's full distribution."""
    n = model.config.vocab_size
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    hyp = greedy_decode(model, source, max_len)
    dists, traj = forced_trajectory(model, source, hyp.tokens)
    steps = []
    for i, p in enumerate(dists, start=1):
        top = np.lexsort((np.arange(n), -p))[:k]
        entries = [(_token_name(vocab, int(j)), float(p[j])) for j in top]
        steps.append(StepDistribution(i, entries, traj.entropies[i - 1]))
    return steps, traj


def snowball_index(trajectory: ConfidenceTrajectory | Sequence[float]) -> float | None:
    """Fraction of consecutive steps whose max probability strictly grows; None below 2 steps."""
    probs = trajectory.max_probs if isinstance(trajectory, ConfidenceTrajectory) else list(trajectory)
    if len(probs) < 2:
        return None
    ups = sum(1 for a, b in zip(probs, probs[1:]) if b > a)
    return ups / (len(probs) - 1)


def distinct_n(responses: Sequence[Sequence], n: int) -> float | None:
    """Unique n-grams over total n-grams, ``_EOS_`` excluded; None if there are none."""
    if n < 1:
        raise ValueError("n must be >= 1")
    grams = []
    for r in responses:
        toks = [t for t in r if t != EOS and t != "_EOS_"]
        grams.extend(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))
    if not grams:
        return None
    return len(set(grams)) / len(grams)


def decode_one(
    model: Seq2Seq,
    source: Sequence[int],
    config: DecodeConfig,
    language_model: Seq2Seq | None = None,
    reverse_model: Seq2Seq | None = None,
) -> Hypothesis:
    if config.beam is None:
        return greedy_decode(model, source, config.max_len)
    nbest = beam_search(model, source, config.beam, config.max_len)
    best, _ = rerank(config.objective, nbest, source, model, language_model, reverse_model)
    return best


def corpus_report(
    model: Seq2Seq,
    inputs: Sequence[Sequence[int]],
    config: DecodeConfig = DecodeConfig(),
    language_model: Seq2Seq | None = None,
    reverse_model: Seq2Seq | None = None,
    decode: Callable[..., Hypothesis] = decode_one,
) -> DiversityReport:
    if not inputs:
        raise ValueError("corpus_report needs at least one input")
    responses, entropies, snowballs = [], [], []
    for source in inputs:
        hyp = decode(model, source, config, language_model, reverse_model)
        _, traj = forced_trajectory(model, source, hyp.tokens)
        responses.append([t for t in hyp.tokens if t != EOS])
        entropies.extend(traj.entropies)
        s = snowball_index(traj)
        if s is not None:
            snowballs.append(s)
    return DiversityReport(
        distinct_1=distinct_n(responses, 1),
        distinct_2=distinct_n(responses, 2),
        mean_response_length=float(np.mean([len(r) for r in responses])),
        mean_step_entropy=float(np.mean(entropies)),
        snowball_index=float(np.mean(snowballs)) if snowballs else None,
    )


def trace_jsonl(steps: Sequence[StepDistribution]) -> str:
    return "".join(json.dumps(s.to_record()) + "\n" for s in steps)
