"""MAP greedy decoding, beam search N-best lists and MMI reranking.

Candidate tokens at every step are all vocabulary ids except ``_PAD_`` and
``_START_``, which never occur as targets. Probabilities are still those of
the full softmax over the vocabulary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import EOS, PAD, START, ConfigError, DecoderState, Seq2Seq

_BLOCKED = (PAD, START)


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    finished: bool = False
    truncated: bool = False
    state: DecoderState | None = field(default=None, repr=False, compare=False)

    def sort_key(self):
        return (self.truncated, -self.log_prob, self.tokens)


NBestList = list[Hypothesis]


def _allowed(model: Seq2Seq) -> np.ndarray:
    mask = np.ones(model.config.vocab_size, dtype=bool)
    mask[list(_BLOCKED)] = False
    return mask


def _start(model: Seq2Seq, source: Sequence[int] | None) -> DecoderState:
    return model.initial_state([list(source)] if model.config.conditional else None, rows=1)


def greedy_decode(model: Seq2Seq, source: Sequence[int] | None, max_len: int) -> Hypothesis:
    """Pick the most probable token at each step (smallest id on ties)."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    allowed = _allowed(model)
    state = _start(model, source)
    tokens: list[int] = []
    total, prev = 0.0, START
    for _ in range(max_len):
        state, lp = model.step_log_probs(state, [prev])
        row = np.where(allowed, lp[0], -np.inf)
        prev = int(np.argmax(row))  # first maximum == smallest id
        tokens.append(prev)
        total += float(lp[0, prev])
        if prev == EOS:
            return Hypothesis(tuple(tokens), total, finished=True)
    return Hypothesis(tuple(tokens), total, truncated=True)


def beam_search(model: Seq2Seq, source: Sequence[int] | None, width: int, max_len: int) -> NBestList:
    """Up to ``width`` hypotheses, finished ones first, best log-probability first.

    Each step expands every live hypothesis over all candidate tokens and
    keeps the ``width`` best expansions (ties: lexicographic token order).
    Expansions ending in ``_EOS_`` are set aside as finished. Hypotheses
    still live after ``max_len`` steps are returned as truncated, ranked
    after all finished ones.
    """
    if width < 1 or max_len < 1:
        raise ValueError("width and max_len must be >= 1")
    allowed_ids = np.flatnonzero(_allowed(model))
    live = [Hypothesis((), 0.0, state=_start(model, source))]
    state = live[0].state
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        prev = [h.tokens[-1] if h.tokens else START for h in live]
        state, lp = model.step_log_probs(state, prev)
        base = np.array([h.log_prob for h in live])
        scores = base[:, None] + lp[:, allowed_ids]
        # live hypotheses share one length, so (lex rank of prefix, token) orders expansions lexicographically
        lex_rank = np.empty(len(live), dtype=np.int64)
        lex_rank[sorted(range(len(live)), key=lambda i: live[i].tokens)] = np.arange(len(live))
        rows = np.repeat(np.arange(len(live)), len(allowed_ids))
        cols = np.tile(np.arange(len(allowed_ids)), len(live))
        flat = scores.reshape(-1)
        order = np.lexsort((allowed_ids[cols], lex_rank[rows], -flat))[:width]
        next_live, keep_rows = [], []
        for idx in order:
            r, tok = int(rows[idx]), int(allowed_ids[cols[idx]])
            # accumulate exactly as greedy/rescoring does: prefix sum plus one step
            hyp = Hypothesis(live[r].tokens + (tok,), live[r].log_prob + float(lp[r, tok]))
            if tok == EOS:
                hyp.finished = True
                finished.append(hyp)
            else:
                next_live.append(hyp)
                keep_rows.append(r)
        if not next_live:
            live = []
            break
        state = state.select(keep_rows)
        live = next_live
        if len(finished) >= width:
            finished.sort(key=Hypothesis.sort_key)
            if max(h.log_prob for h in live) < finished[width - 1].log_prob:
                live = []
                break
    for h in live:
        h.truncated = True
    finished.sort(key=Hypothesis.sort_key)
    live.sort(key=Hypothesis.sort_key)
    return (finished + live)[:width]


# ---------------------------------------------------------------- reranking


@dataclass(frozen=True)
class MAP:
    name = "map"


@dataclass(frozen=True)
class MMIAntiLM:
    lam: float
    gamma: float = 0.0
    name = "mmi-antilm"

    def __post_init__(self):
        if not self.lam >= 0.0:
            raise ValueError(f"MMI-antiLM lambda must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class MMIBidi:
    lam: float
    gamma: float = 0.0
    name = "mmi-bidi"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"MMI-bidi lambda must lie in [0, 1], got {self.lam}")


RerankObjective = MAP | MMIAntiLM | MMIBidi


def reverse_source(tokens: Sequence[int]) -> list[int]:
    """Reverse-model input for a response: the tokens without ``_EOS_``.

    A response that is only ``_EOS_`` is fed as the single token ``_EOS_``,
    since the encoder needs at least one position.
    """
    body = [t for t in tokens if t != EOS]
    return body or [EOS]


def score_hypothesis(
    objective: RerankObjective,
    hyp: Hypothesis,
    source: Sequence[int],
    forward_model: Seq2Seq,
    language_model: Seq2Seq | None = None,
    reverse_model: Seq2Seq | None = None,
) -> float:
    """Rerank score of one candidate; every log term is a teacher-forced rescoring."""
    if isinstance(objective, MMIAntiLM) and language_model is None:
        raise ConfigError("MMI-antiLM needs a language model")
    if isinstance(objective, MMIBidi) and reverse_model is None:
        raise ConfigError("MMI-bidi needs a reverse model")
    forward = forward_model.sequence_log_prob(source, hyp.tokens)
    if isinstance(objective, MAP):
        return forward
    length = len(hyp.tokens)
    if isinstance(objective, MMIAntiLM):
        lm = language_model.sequence_log_prob(None, hyp.tokens)
        return forward - objective.lam * lm + objective.gamma * length
    backward = reverse_model.sequence_log_prob(reverse_source(hyp.tokens), list(source) + [EOS])
    return (1.0 - objective.lam) * forward + objective.lam * backward + objective.gamma * length


@dataclass
class Scored:
    hypothesis: Hypothesis
    score: float

    def sort_key(self):
        return (self.hypothesis.truncated, -self.score, self.hypothesis.tokens)


def rerank(
    objective: RerankObjective,
    nbest: Sequence[Hypothesis],
    source: Sequence[int],
    forward_model: Seq2Seq,
    language_model: Seq2Seq | None = None,
    reverse_model: Seq2Seq | None = None,
) -> tuple[Hypothesis, list[Scored]]:
    """Argmax of ``objective`` over the list; truncated candidates rank last."""
    if not nbest:
        raise ValueError("cannot rerank an empty N-best list")
    scored = [
        Scored(h, score_hypothesis(objective, h, source, forward_model, language_model, reverse_model))
        for h in nbest
    ]
    scored.sort(key=Scored.sort_key)
    return scored[0].hypothesis, scored


def dumps_jsonl(records: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
