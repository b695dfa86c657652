import struct
from collections import Counter

import numpy as np
import pytest

from diversitylab.corpus import (
    CheckpointCorruptError,
    CheckpointVersionError,
    CorpusError,
    DialoguePair,
    EmptyCorpusError,
    ParseError,
    SyntheticCorpusSpec,
    Vocabulary,
    generate_synthetic,
    held_out_messages,
    load_checkpoint,
    load_checkpoint_file,
    load_corpus,
    reverse_pairs,
    save_checkpoint,
    save_checkpoint_file,
    synthetic_pairs,
    tokenize,
    write_pairs,
)
from diversitylab.decoding import greedy_decode
from diversitylab.diagnostics import distinct_n
from diversitylab.model import EOS, UNK, ModelConfig, Seq2Seq

from .conftest import toy_model


def test_tokenize_examples():
    assert tokenize("I don't know") == ["i", "don't", "know"]
    assert tokenize("") == []
    assert tokenize("A  B") == ["a", "b"]
    assert tokenize("Hi, there!") == ["hi,", "there!"]


def test_vocabulary_reserved_ids_and_bijection():
    v = Vocabulary(["x", "y", "x"])
    assert v.tokens == ["_PAD_", "_START_", "_EOS_", "_UNK_", "x", "y"]
    assert v.id_of("y") == 5 and v.id_of("zzz") == UNK
    assert v.decode(v.encode(["y", "x", "y"])) == ["y", "x", "y"]


def test_load_corpus_single_line(tmp_path):
    path = tmp_path / "p.tsv"
    path.write_text("hi\thello\n", encoding="utf-8")
    corpus, vocab = load_corpus(path)
    assert len(corpus) == 1 and len(vocab) == 6
    assert vocab.tokens[4:] == ["hi", "hello"]
    assert corpus[0] == DialoguePair([4], [5, EOS])


def test_load_corpus_fixed_vocabulary_maps_unknown(tmp_path):
    path = tmp_path / "p.tsv"
    path.write_text("hi\thello\n", encoding="utf-8")
    corpus, vocab = load_corpus(path, Vocabulary(["hi"]))
    assert corpus[0].response == (UNK, EOS) and len(vocab) == 5


@pytest.mark.parametrize(
    "text,line",
    [("a\tb\nno tab here\n", 2), ("a\tb\tc\n", 1), ("a\tb\nc\td\n\t x\n", 3), ("x\t \n", 1)],
)
def test_malformed_lines_report_line_number(tmp_path, text, line):
    path = tmp_path / "bad.tsv"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_corpus(path)
    assert info.value.line_no == line and f":{line}:" in str(info.value)


def test_empty_file_is_an_empty_corpus_error(tmp_path):
    path = tmp_path / "empty.tsv"
    path.write_text("", encoding="utf-8")
    with pytest.raises(EmptyCorpusError):
        load_corpus(path)


def test_write_then_load_round_trip(tmp_path):
    pairs = [("how are you", "fine thanks"), ("and you ?", "i don't know")]
    path = tmp_path / "rt.tsv"
    assert write_pairs(path, pairs) == 2
    corpus, vocab = load_corpus(path)
    assert [(" ".join(vocab.decode(p.message)), " ".join(vocab.decode(p.response[:-1]))) for p in corpus] == pairs


def test_dialogue_pair_invariants():
    with pytest.raises(CorpusError):
        DialoguePair([], [EOS])
    with pytest.raises(CorpusError):
        DialoguePair([4], [4])
    with pytest.raises(CorpusError):
        DialoguePair([4], [EOS, 4, EOS])


def test_reverse_pairs_properties():
    corpus = (DialoguePair([4, 5], [6, EOS]), DialoguePair([7], [4, 4, EOS]))
    rev = reverse_pairs(corpus)
    assert rev == (DialoguePair([6], [4, 5, EOS]), DialoguePair([4, 4], [7, EOS]))
    assert len(rev) == len(corpus) and reverse_pairs(rev) == corpus
    assert all(p.response.count(EOS) == 1 and p.response[-1] == EOS for p in rev)


def test_synthetic_generation_is_deterministic():
    spec = SyntheticCorpusSpec(seed=3)
    a, va = generate_synthetic(spec, 300)
    b, vb = generate_synthetic(spec, 300)
    assert a == b and va == vb
    assert synthetic_pairs(SyntheticCorpusSpec(seed=4), 300) != synthetic_pairs(spec, 300)


def test_high_skew_concentrates_on_generic_set():
    spec = SyntheticCorpusSpec(generic_skew=0.9, generic_set=2, seed=1)
    counts = Counter(r for _, r in synthetic_pairs(spec, 2000))
    top_two = sum(c for _, c in counts.most_common(2))
    assert set(r for r, _ in counts.most_common(2)) == set(spec.generic)
    assert top_two / 2000 > 0.88


def test_zero_skew_gives_one_response_per_template():
    spec = SyntheticCorpusSpec(generic_skew=0.0, templates=15)
    pairs = synthetic_pairs(spec, 600)
    core = {}
    for msg, resp in pairs:
        key = tuple(msg.split()[: spec.core_len])
        assert core.setdefault(key, resp) == resp
    assert len(set(core.values())) == len(core) == 15
    assert distinct_n([r.split() for r in core.values()], 2) > 0.9


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticCorpusSpec(generic_skew=1.0)
    with pytest.raises(ValueError):
        SyntheticCorpusSpec(generic_set=0)
    with pytest.raises(ValueError):
        synthetic_pairs(SyntheticCorpusSpec(), 0)


def test_held_out_messages_are_unseen():
    spec = SyntheticCorpusSpec()
    seen = {m for m, _ in synthetic_pairs(spec, 500)}
    fresh = held_out_messages(spec, 500, 40)
    assert len(fresh) == len(set(fresh)) == 40 and not seen & set(fresh)


@pytest.mark.parametrize(
    "cfg",
    [ModelConfig(6, 4, 4), ModelConfig(9, 5, 6, "multi", 2, True), ModelConfig(7, 3, 4, conditional=False)],
)
def test_checkpoint_round_trip_is_bit_exact(cfg):
    model = Seq2Seq(cfg, seed=11)
    vocab = Vocabulary([f"t{i}" for i in range(cfg.vocab_size - 4)])
    blob = save_checkpoint(model, vocab)
    loaded, v2 = load_checkpoint(blob)
    assert loaded.config == cfg and v2 == vocab
    for name, p in model.params.items():
        assert p.data.tobytes() == loaded.params[name].data.tobytes()
    assert save_checkpoint(loaded, v2) == blob


def test_round_trip_preserves_greedy_decodes(tmp_path):
    model = toy_model(vocab=10, attention="single", seed=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint_file(path, model, Vocabulary([f"t{i}" for i in range(6)]))
    loaded, _ = load_checkpoint_file(path)
    rng = np.random.default_rng(0)
    for _ in range(100):
        src = rng.integers(4, 10, size=int(rng.integers(1, 6))).tolist()
        assert greedy_decode(model, src, 8).tokens == greedy_decode(loaded, src, 8).tokens


def _blob():
    return save_checkpoint(Seq2Seq(ModelConfig(6, 4, 4)), Vocabulary(["a", "b"]))


def test_tampered_magic_is_corruption():
    blob = bytearray(_blob())
    blob[0] ^= 0xFF
    with pytest.raises(CheckpointCorruptError) as info:
        load_checkpoint(bytes(blob))
    assert info.value.offset == 0


def test_version_mismatch():
    blob = bytearray(_blob())
    blob[8:10] = struct.pack("<H", 2)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(bytes(blob))


def test_truncation_reports_offset():
    blob = _blob()
    for cut in (5, 40, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CheckpointCorruptError) as info:
            load_checkpoint(blob[:cut])
        assert 0 <= info.value.offset <= cut


def test_flipped_parameter_byte_fails_checksum():
    blob = bytearray(_blob())
    blob[-40] ^= 0x01
    with pytest.raises(CheckpointCorruptError, match="checksum"):
        load_checkpoint(bytes(blob))
