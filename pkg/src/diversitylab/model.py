"""LSTM encoder-decoder with optional additive / multi-head attention.

All computations are batched over rows: a batch of ``B`` sequences is
processed one time step at a time with ``[B, d]`` hidden states. Padding
positions are frozen with constant masks, so a padded batch gives the same
numbers as running each sequence alone.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor, TokenIndexError

PAD, START, EOS, UNK = 0, 1, 2, 3
RESERVED = ("_PAD_", "_START_", "_EOS_", "_UNK_")

# Score added to padded encoder positions before the attention softmax.
_MASKED = -1e30


class ConfigError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 16
    hidden_dim: int = 32
    attention: str = "none"  # none | single | multi
    heads: int = 1
    tie_output_embeddings: bool = False
    conditional: bool = True  # False: decoder-only language model p(Y)

    def __post_init__(self):
        if self.vocab_size < len(RESERVED):
            raise ConfigError(f"vocab_size must be >= {len(RESERVED)}, got {self.vocab_size}")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("embed_dim and hidden_dim must be positive")
        if self.attention not in ("none", "single", "multi"):
            raise ConfigError(f"unknown attention mode {self.attention!r}")
        if self.attention == "multi" and self.heads < 2:
            raise ConfigError(f"multi-head attention needs heads >= 2, got {self.heads}")
        if self.attention != "multi" and self.heads != 1:
            raise ConfigError(f"heads={self.heads} only valid with attention='multi'")
        if not self.conditional and self.attention != "none":
            raise ConfigError("a language model has no encoder to attend over")

    @property
    def n_heads(self) -> int:
        return self.heads if self.attention == "multi" else 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class DecoderState:
    """Decoder LSTM state for ``B`` rows plus (attention only) encoder memory."""

    h: Tensor
    c: Tensor
    memory: list | None = None  # per head: (values, keys, raw encoder states), each [B,T,d]
    mask: np.ndarray | None = None  # [B, T] additive score mask

    @property
    def enc_states(self) -> Tensor | None:
        return None if self.memory is None else self.memory[0][2]

    def select(self, rows: Sequence[int]) -> "DecoderState":
        """Row-subset of a state; used by beam search (no gradients)."""
        rows = np.asarray(rows, dtype=np.int64)
        memory = None
        if self.memory is not None:
            memory = [
                (T.constant(v.data[rows]), T.constant(k.data[rows]), T.constant(raw.data[rows]))
                for v, k, raw in self.memory
            ]
        return DecoderState(
            T.constant(self.h.data[rows]),
            T.constant(self.c.data[rows]),
            memory,
            None if self.mask is None else self.mask[rows],
        )


def glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Seq2Seq:
    """Encoder-decoder (or decoder-only LM) holding every parameter by name.

    Parameters are created in a fixed order from ``np.random.default_rng(seed)``
    (PCG64), so a (config, seed) pair always yields bit-identical weights.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, zero: bool = False):
        self.config = config
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        e, d, n = config.embed_dim, config.hidden_dim, config.vocab_size

        def new(name, shape, bias=False):
            data = np.zeros(shape) if (bias or zero) else glorot(rng, shape)
            self.params[name] = Parameter(name, data)

        new("embedding", (n, e))
        if config.conditional:
            self._lstm_params("enc", e, new)
        dec_in = e + (d if config.attention != "none" else 0)
        self._lstm_params("dec", dec_in, new)
        if config.attention != "none":
            for k in range(config.n_heads):
                if config.attention == "multi":
                    new(f"att{k}.proj", (d, d))
                new(f"att{k}.W_h", (d, d))
                new(f"att{k}.W_s", (d, d))
                new(f"att{k}.v", (d, 1))
            if config.attention == "multi":
                new("att.combine", (d, config.n_heads * d))
        new("mlp.W1", (d, d))
        new("mlp.b1", (d,), bias=True)
        new("mlp.W2", (e, d))
        new("mlp.b2", (e,), bias=True)
        if not config.tie_output_embeddings:
            new("out_embedding", (n, e))

    def _lstm_params(self, prefix, input_dim, new):
        d = self.config.hidden_dim
        new(f"{prefix}.W_x", (4 * d, input_dim))
        new(f"{prefix}.W_h", (4 * d, d))
        new(f"{prefix}.b", (4 * d,), bias=True)
        # gate layout: input, forget, candidate, output
        self.params[f"{prefix}.b"].data[d : 2 * d] = 1.0

    # ------------------------------------------------------------ utilities

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    @property
    def candidates(self) -> Parameter:
        """Candidate embeddings ``c_i`` scored against the MLP output."""
        if self.config.tie_output_embeddings:
            return self.params["embedding"]
        return self.params["out_embedding"]

    def _check_ids(self, ids: Sequence[int]) -> None:
        n = self.config.vocab_size
        for i in ids:
            if not 0 <= i < n:
                raise TokenIndexError(f"token id {i} outside vocabulary of size {n}")

    # ------------------------------------------------------------ building blocks

    def _lstm(self, prefix: str, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        p, d = self.params, self.config.hidden_dim
        gates = T.add_row(
            T.add(T.matmul(x, T.transpose(p[f"{prefix}.W_x"])), T.matmul(h, T.transpose(p[f"{prefix}.W_h"]))),
            p[f"{prefix}.b"],
        )
        i = T.sigmoid(T.slice_cols(gates, 0, d))
        f = T.sigmoid(T.slice_cols(gates, d, 2 * d))
        g = T.tanh(T.slice_cols(gates, 2 * d, 3 * d))
        o = T.sigmoid(T.slice_cols(gates, 3 * d, 4 * d))
        c_new = T.add(T.mul(f, c), T.mul(i, g))
        h_new = T.mul(o, T.tanh(c_new))
        return h_new, c_new

    def _zeros(self, rows: int) -> Tensor:
        return T.constant(np.zeros((rows, self.config.hidden_dim)))

    # ------------------------------------------------------------ encoder

    def encode_batch(self, sources: Sequence[Sequence[int]]) -> tuple[Tensor, tuple[Tensor, Tensor], np.ndarray]:
        """Run the encoder over a padded batch.

        Returns the stacked hidden states ``[B, T, d]``, the final ``(h, c)``
        taken at each row's own last position, and the ``[B, T]`` validity mask.
        """
        if not self.config.conditional:
            raise ConfigError("language model has no encoder")
        if not sources or any(len(s) == 0 for s in sources):
            raise EmptySequenceError("cannot encode an empty sequence")
        for s in sources:
            self._check_ids(s)
        b, steps, d = len(sources), max(len(s) for s in sources), self.config.hidden_dim
        valid = np.zeros((b, steps))
        for r, s in enumerate(sources):
            valid[r, : len(s)] = 1.0
        h, c = self._zeros(b), self._zeros(b)
        states = []
        emb = self.params["embedding"]
        for t in range(steps):
            ids = [s[t] if t < len(s) else PAD for s in sources]
            h_new, c_new = self._lstm("enc", T.gather_rows(emb, ids), h, c)
            if valid[:, t].all():
                h, c = h_new, c_new
            else:
                keep = T.constant(np.repeat(valid[:, t : t + 1], d, axis=1))
                hold = T.constant(1.0 - keep.data)
                h = T.add(T.mul(keep, h_new), T.mul(hold, h))
                c = T.add(T.mul(keep, c_new), T.mul(hold, c))
            states.append(h)
        return T.stack_steps(states), (h, c), valid

    def encode(self, source: Sequence[int]) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        """Encode one sequence: hidden states ``[|X|, d]`` and final ``(h, c)`` as ``[d]``."""
        states, (h, c), _ = self.encode_batch([source])
        return T.reshape(states, states.shape[1:]), (T.reshape(h, (h.shape[1],)), T.reshape(c, (c.shape[1],)))

    # ------------------------------------------------------------ attention

    def _memory(self, enc_states: Tensor) -> list:
        """Per-head (values, keys, raw states); keys are the W_s-projected values."""
        cfg = self.config
        b, steps, d = enc_states.shape
        flat = T.reshape(enc_states, (b * steps, d))
        memory = []
        for k in range(cfg.n_heads):
            values = flat
            if cfg.attention == "multi":
                values = T.matmul(flat, T.transpose(self.params[f"att{k}.proj"]))
            keys = T.matmul(values, T.transpose(self.params[f"att{k}.W_s"]))
            memory.append((T.reshape(values, (b, steps, d)), T.reshape(keys, (b, steps, d)), enc_states))
        return memory

    def attention_weights(self, h: Tensor, memory: list, mask: np.ndarray | None, head: int) -> Tensor:
        values, keys, _ = memory[head]
        b, steps, d = keys.shape
        query = T.matmul(h, T.transpose(self.params[f"att{head}.W_h"]))
        hidden = T.tanh(T.add_query(keys, query))
        scores = T.reshape(T.matmul(T.reshape(hidden, (b * steps, d)), self.params[f"att{head}.v"]), (b, steps))
        if mask is not None:
            scores = T.add(scores, T.constant(mask))
        return T.softmax_rows(scores)

    def attention_context(self, h: Tensor, memory: list, mask: np.ndarray | None = None) -> Tensor:
        if self.config.attention == "none" or memory is None:
            raise ConfigError("attention_context called on a model without attention")
        contexts = [
            T.attend(self.attention_weights(h, memory, mask, k), memory[k][0]) for k in range(len(memory))
        ]
        if self.config.attention == "single":
            return contexts[0]
        return T.matmul(T.concat_cols(contexts), T.transpose(self.params["att.combine"]))

    # ------------------------------------------------------------ decoder

    def initial_state(self, sources: Sequence[Sequence[int]] | None = None, rows: int = 1) -> DecoderState:
        """Decoder state for a batch: the encoder's final (h, c), or zeros for an LM."""
        if not self.config.conditional:
            rows = len(sources) if sources is not None else rows
            return DecoderState(self._zeros(rows), self._zeros(rows))
        enc_states, (h, c), valid = self.encode_batch(sources)
        return self.decoder_init(enc_states, (h, c), valid)

    def decoder_init(self, enc_states: Tensor, final: tuple[Tensor, Tensor], valid: np.ndarray | None = None) -> DecoderState:
        h, c = final
        if h.data.ndim == 1:
            h, c = T.reshape(h, (1, h.shape[0])), T.reshape(c, (1, c.shape[0]))
        if enc_states.data.ndim == 2:
            enc_states = T.reshape(enc_states, (1,) + enc_states.shape)
        if self.config.attention == "none":
            return DecoderState(h, c)
        mask = None
        if valid is not None and not valid.all():
            mask = np.where(valid > 0, 0.0, _MASKED)
        return DecoderState(h, c, self._memory(enc_states), mask)

    def step(self, state: DecoderState, prev: Sequence[int]) -> tuple[DecoderState, Tensor]:
        """One decoder step for every row; returns the next state and ``[B, N]`` logits."""
        state = self._advance(state, prev)
        return state, self.output_logits(state.h)

    def output_logits(self, h: Tensor) -> Tensor:
        p = self.params
        hidden = T.tanh(T.add_row(T.matmul(h, T.transpose(p["mlp.W1"])), p["mlp.b1"]))
        query = T.add_row(T.matmul(hidden, T.transpose(p["mlp.W2"])), p["mlp.b2"])
        return T.matmul(query, T.transpose(self.candidates))

    def decode_step(self, state: DecoderState, y_prev: int) -> tuple[DecoderState, Tensor]:
        """Single-row step returning the distribution over all N candidates as ``[N]``."""
        new_state, logits = self.step(state, [y_prev])
        probs = T.softmax_rows(logits)
        return new_state, T.reshape(probs, (probs.shape[1],))

    def step_log_probs(self, state: DecoderState, prev: Sequence[int]) -> tuple[DecoderState, np.ndarray]:
        new_state, logits = self.step(state, prev)
        return new_state, T.log_softmax_rows(logits).data

    # ------------------------------------------------------------ teacher forcing

    def forced_log_probs(self, sources, targets: Sequence[Sequence[int]]) -> tuple[Tensor, list[tuple[int, int]]]:
        """Teacher-forced log-distributions for every real target position.

        Returns ``[M, N]`` log-probabilities (rows ordered time-major over
        valid positions) and the ``(row, t)`` index of each returned row.
        """
        b = len(targets)
        state = self.initial_state(sources, rows=b)
        steps = max(len(y) for y in targets)
        hidden = []
        prev = [START] * b
        for t in range(steps):
            state = self._advance(state, prev)
            hidden.append(state.h)
            prev = [y[t] if t < len(y) else PAD for y in targets]
        stacked = T.concat_rows(hidden)
        keep = [t * b + r for t in range(steps) for r in range(b) if t < len(targets[r])]
        where = [(r, t) for t in range(steps) for r in range(b) if t < len(targets[r])]
        logits = self.output_logits(T.gather_rows(stacked, keep))
        return T.log_softmax_rows(logits), where

    def _advance(self, state: DecoderState, prev: Sequence[int]) -> DecoderState:
        self._check_ids(prev)
        x = T.gather_rows(self.params["embedding"], prev)
        if self.config.attention != "none":
            x = T.concat_cols([x, self.attention_context(state.h, state.memory, state.mask)])
        h, c = self._lstm("dec", x, state.h, state.c)
        return DecoderState(h, c, state.memory, state.mask)

    def sequence_log_prob(self, source: Sequence[int] | None, target: Sequence[int]) -> float:
        """``log p(target | source)`` by teacher-forced rescoring, summed step by step."""
        state = self.initial_state([source] if self.config.conditional else None, rows=1)
        total = 0.0
        prev = START
        for tok in target:
            state, lp = self.step_log_probs(state, [prev])
            total += float(lp[0, tok])
            prev = tok
        return total
