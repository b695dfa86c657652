"""Vocabulary, message/response pair files, synthetic corpora and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import EOS, RESERVED, UNK, ModelConfig, Seq2Seq


class CorpusError(ValueError):
    pass


class ParseError(CorpusError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.line_no = line_no


class EmptyCorpusError(CorpusError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Token <-> id map with ids 0-3 fixed to the reserved tokens."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._tokens: list[str] = list(RESERVED)
        self._ids: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self._ids:
            self._ids[token] = len(self._tokens)
            self._tokens.append(token)
        return self._ids[token]

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens: Sequence[str], grow: bool = False) -> tuple[int, ...]:
        if grow:
            return tuple(self.add(t) for t in tokens)
        return tuple(self.id_of(t) for t in tokens)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self._tokens[i] for i in ids]

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)


@dataclass(frozen=True)
class DialoguePair:
    message: tuple[int, ...]
    response: tuple[int, ...]

    def __init__(self, message: Sequence[int], response: Sequence[int], check: bool = True):
        object.__setattr__(self, "message", tuple(message))
        object.__setattr__(self, "response", tuple(response))
        if check:
            if not self.message:
                raise CorpusError("message must contain at least one token")
            if not self.response or self.response[-1] != EOS or self.response.count(EOS) != 1:
                raise CorpusError(f"response {self.response} must end in exactly one _EOS_")


Corpus = tuple[DialoguePair, ...]


def encode_pair(vocab: Vocabulary, message: str, response: str, grow: bool = False) -> DialoguePair:
    msg = vocab.encode(tokenize(message), grow=grow)
    resp = vocab.encode(tokenize(response), grow=grow)
    return DialoguePair(msg, resp + (EOS,))


def read_pairs(path) -> list[tuple[str, str]]:
    """Raw ``(message, response)`` strings from a TSV pair file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    pairs = []
    for no, line in enumerate(text.splitlines(), start=1):
        if line.count("\t") != 1:
            raise ParseError(path, no, f"expected exactly one tab, found {line.count(chr(9))}")
        msg, resp = line.split("\t")
        if not tokenize(msg):
            raise ParseError(path, no, "empty message")
        if not tokenize(resp):
            raise ParseError(path, no, "empty response")
        pairs.append((msg, resp))
    if not pairs:
        raise EmptyCorpusError(f"{path} contains no pairs")
    return pairs


def build_vocabulary(pairs: Iterable[tuple[str, str]]) -> Vocabulary:
    vocab = Vocabulary()
    for msg, resp in pairs:
        vocab.encode(tokenize(msg), grow=True)
        vocab.encode(tokenize(resp), grow=True)
    return vocab


def encode_corpus(pairs: Iterable[tuple[str, str]], vocab: Vocabulary) -> Corpus:
    return tuple(encode_pair(vocab, m, r) for m, r in pairs)


def load_corpus(path, vocab: Vocabulary | None = None) -> tuple[Corpus, Vocabulary]:
    """Load a TSV pair file.

    Without ``vocab`` every token enters a new vocabulary in first-occurrence
    order; with one, unknown tokens map to ``_UNK_``.
    """
    raw = read_pairs(path)
    if vocab is None:
        vocab = build_vocabulary(raw)
    return encode_corpus(raw, vocab), vocab


def write_pairs(path, pairs: Iterable[tuple[str, str]]) -> int:
    lines = [f"{m}\t{r}\n" for m, r in pairs]
    Path(path).write_text("".join(lines), encoding="utf-8")
    return len(lines)


def reverse_pairs(corpus: Sequence[DialoguePair]) -> Corpus:
    """Swap each (X, Y) into (Y without _EOS_, X with _EOS_)."""
    return tuple(DialoguePair(p.response[:-1], p.message + (EOS,)) for p in corpus)


# ---------------------------------------------------------------- synthetic data

GENERIC_RESPONSES = (
    "i don't know what you mean",
    "i am not sure about that at all",
    "i'm sorry i can't say",
    "ok that is fine with me",
    "yes of course it is",
    "no idea what that is",
)


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Parameters of the skewed toy dialogue generator.

    Each message template has a fixed three-word core plus two random filler
    words; its specific response is a fixed four-word string. With
    probability ``generic_skew`` the response is instead drawn uniformly
    from the first ``generic_set`` entries of ``GENERIC_RESPONSES``.
    """

    base_vocab: int = 40
    templates: int = 20
    generic_skew: float = 0.8
    generic_set: int = 2
    seed: int = 0
    core_len: int = 3
    filler_len: int = 2
    response_len: int = 4

    def __post_init__(self):
        if not 0.0 <= self.generic_skew < 1.0:
            raise ValueError(f"generic_skew must lie in [0, 1), got {self.generic_skew}")
        if not 1 <= self.generic_set <= len(GENERIC_RESPONSES):
            raise ValueError(f"generic_set must lie in [1, {len(GENERIC_RESPONSES)}]")
        if self.templates < 1 or self.base_vocab < max(self.core_len, self.response_len):
            raise ValueError("need at least one template and a base vocabulary covering a core")

    @property
    def generic(self) -> tuple[str, ...]:
        return GENERIC_RESPONSES[: self.generic_set]


def _templates(spec: SyntheticCorpusSpec) -> list[tuple[list[str], str]]:
    """Distinct message cores paired with distinct specific replies."""
    rng = np.random.default_rng([spec.seed, 0])
    out, cores, replies = [], set(), set()
    for _ in range(1000 * spec.templates):
        core = tuple(f"w{i}" for i in rng.choice(spec.base_vocab, spec.core_len, replace=False))
        reply = " ".join(f"r{i}" for i in rng.choice(spec.base_vocab, spec.response_len, replace=False))
        if core in cores or reply in replies:
            continue
        cores.add(core)
        replies.add(reply)
        out.append((list(core), reply))
        if len(out) == spec.templates:
            return out
    raise ValueError(f"base vocabulary of {spec.base_vocab} words cannot give {spec.templates} distinct templates")


def synthetic_messages(spec: SyntheticCorpusSpec, size: int, stream: int = 1) -> list[tuple[int, str]]:
    """``size`` (template index, message text) draws from an independent stream."""
    rng = np.random.default_rng([spec.seed, stream])
    templates = _templates(spec)
    out = []
    for _ in range(size):
        k = int(rng.integers(spec.templates))
        filler = [f"w{i}" for i in rng.integers(spec.base_vocab, size=spec.filler_len)]
        out.append((k, " ".join(templates[k][0] + filler)))
    return out


def synthetic_pairs(spec: SyntheticCorpusSpec, size: int) -> list[tuple[str, str]]:
    """Seeded text pairs; a pure function of ``(spec, size)``."""
    if size < 1:
        raise ValueError("size must be >= 1")
    templates = _templates(spec)
    rng = np.random.default_rng([spec.seed, 2])
    pairs = []
    for k, message in synthetic_messages(spec, size):
        if rng.random() < spec.generic_skew:
            response = spec.generic[int(rng.integers(len(spec.generic)))]
        else:
            response = templates[k][1]
        pairs.append((message, response))
    return pairs


def generate_synthetic(spec: SyntheticCorpusSpec, size: int) -> tuple[Corpus, Vocabulary]:
    raw = synthetic_pairs(spec, size)
    vocab = build_vocabulary(raw)
    return encode_corpus(raw, vocab), vocab


def held_out_messages(spec: SyntheticCorpusSpec, train_size: int, count: int) -> list[str]:
    """Fresh messages from the same templates that never occur in the training draw."""
    seen = {m for m, _ in synthetic_pairs(spec, train_size)}
    out: list[str] = []
    stream = 100
    while len(out) < count:
        for _, msg in synthetic_messages(spec, count, stream=stream):
            if msg not in seen and msg not in out:
                out.append(msg)
                if len(out) == count:
                    break
        stream += 1
    return out


# ---------------------------------------------------------------- checkpoints

MAGIC = b"S2SDIVCK"
FORMAT_VERSION = 1
_DIGEST = 32


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"corrupt checkpoint at byte {offset}: {reason}")
        self.offset = offset


def _block(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def save_checkpoint(model: Seq2Seq, vocab: Vocabulary) -> bytes:
    """Serialise a model with its config and vocabulary.

    Layout (little-endian): 8-byte magic, u16 version, config JSON block,
    vocabulary JSON block, u32 parameter count, then per parameter a u16-length
    name, u8 ndim, u32 dims and float64 values; finally a SHA-256 of every
    preceding byte.
    """
    if len(vocab) != model.config.vocab_size:
        raise CheckpointError(f"vocabulary has {len(vocab)} tokens, model expects {model.config.vocab_size}")
    header = json.dumps({"model": model.config.to_dict()}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), _block(header), _block(json.dumps(vocab.tokens).encode())]
    parts.append(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointCorruptError(self.pos, f"need {n} bytes, only {len(self.data) - self.pos} left")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(data: bytes) -> tuple[Seq2Seq, Vocabulary]:
    """Inverse of :func:`save_checkpoint`."""
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointCorruptError(0, "bad magic header")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    if len(data) < r.pos + _DIGEST:
        raise CheckpointCorruptError(len(data), "truncated before checksum")
    body = _Reader(data[:-_DIGEST])
    body.pos = r.pos
    try:
        (n,) = body.unpack("<I")
        header = json.loads(body.take(n))
        (n,) = body.unpack("<I")
        tokens = json.loads(body.take(n))
        (count,) = body.unpack("<I")
        arrays = {}
        for _ in range(count):
            (n,) = body.unpack("<H")
            name = body.take(n).decode()
            (ndim,) = body.unpack("<B")
            shape = body.unpack(f"<{ndim}I")
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(body.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    except (ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointCorruptError):
            raise
        raise CheckpointCorruptError(body.pos, str(exc)) from exc
    if body.pos != len(body.data):
        raise CheckpointCorruptError(body.pos, "trailing bytes before checksum")
    if hashlib.sha256(data[:-_DIGEST]).digest() != data[-_DIGEST:]:
        raise CheckpointCorruptError(len(data) - _DIGEST, "checksum mismatch")

    vocab = Vocabulary(tokens[len(RESERVED) :])
    if vocab.tokens != tokens:
        raise CheckpointCorruptError(0, "vocabulary block does not start with the reserved tokens")
    model = Seq2Seq(ModelConfig.from_dict(header["model"]), zero=True)
    if set(arrays) != set(model.params):
        raise CheckpointCorruptError(0, "parameter names do not match the stored config")
    for name, value in arrays.items():
        if model.params[name].data.shape != value.shape:
            raise CheckpointCorruptError(0, f"parameter {name} has shape {value.shape}")
        model.params[name].data[...] = value
    return model, vocab


def save_checkpoint_file(path, model: Seq2Seq, vocab: Vocabulary) -> None:
    Path(path).write_bytes(save_checkpoint(model, vocab))


def load_checkpoint_file(path) -> tuple[Seq2Seq, Vocabulary]:
    return load_checkpoint(Path(path).read_bytes())
