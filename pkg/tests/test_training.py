import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diversitylab import tensor as T
from diversitylab.corpus import CorpusError, DialoguePair, reverse_pairs
from diversitylab.decoding import greedy_decode, reverse_source
from diversitylab.model import EOS, START, ModelConfig, Seq2Seq
from diversitylab.training import (
    NLL,
    ConfidencePenalty,
    DivergenceError,
    LabelSmoothing,
    NormalizationError,
    TrainConfig,
    batch_loss,
    sequence_loss,
    step_entropy,
    token_loss,
    token_losses,
    train,
    train_language_model,
    train_reverse_model,
)

from .conftest import random_pair, toy_model


def scalar_entropy(p):
    # independent oracle: plain python loop
    return -sum(x * math.log(x) for x in p if x > 0)


def test_entropy_examples():
    assert abs(step_entropy([0.25] * 4) - math.log(4)) < 1e-12
    assert step_entropy([0.0, 1.0, 0.0]) == 0.0
    assert abs(step_entropy([0.7, 0.2, 0.1]) - 0.801819) < 1e-6
    assert step_entropy([0.7, 0.2, 0.1]) == pytest.approx(scalar_entropy([0.7, 0.2, 0.1]), abs=1e-15)
    with pytest.raises(NormalizationError):
        step_entropy([0.5, 0.4])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=2, max_size=12).filter(lambda v: sum(v) > 1e-3), st.randoms())
def test_entropy_bounds_and_permutation_invariance(weights, rnd):
    p = np.array(weights) / sum(weights)
    h = step_entropy(p)
    assert 0.0 <= h <= math.log(len(p)) + 1e-12
    shuffled = list(p)
    rnd.shuffle(shuffled)
    assert abs(step_entropy(shuffled) - h) < 1e-12


def test_confidence_penalty_hand_example():
    dist = T.constant([0.7, 0.2, 0.1])
    value = float(token_loss(ConfidencePenalty(0.5), dist, 0).data)
    expected = -math.log(0.7) - 0.5 * scalar_entropy([0.7, 0.2, 0.1])
    assert abs(value - expected) < 1e-12 and abs(value - (-0.044235)) < 1e-6


def test_label_smoothing_hand_example():
    p = [0.7, 0.2, 0.1]
    value = float(token_loss(LabelSmoothing(0.3), T.constant(p), 1).data)
    q = [0.1, 0.8, 0.1]
    assert abs(value - -sum(qi * math.log(pi) for qi, pi in zip(q, p))) < 1e-12


def test_reductions_at_zero_strength(rng):
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 10))
        dist = T.constant(rng.dirichlet(np.ones(n)))
        gold = int(rng.integers(n))
        nll = float(token_loss(NLL(), dist, gold).data)
        for kind in (ConfidencePenalty(0.0), LabelSmoothing(0.0)):
            worst = max(worst, abs(float(token_loss(kind, dist, gold).data) - nll))
        assert abs(nll + math.log(dist.data[gold])) < 1e-12
    assert worst == 0.0


def test_loss_kind_validation():
    with pytest.raises(ValueError):
        ConfidencePenalty(-0.1)
    with pytest.raises(ValueError):
        LabelSmoothing(1.0)
    with pytest.raises(T.TokenIndexError):
        token_loss(NLL(), T.constant([0.5, 0.5]), 2)


def test_confidence_penalty_strictly_decreasing_in_beta(rng):
    for _ in range(50):
        dist = T.constant(rng.dirichlet(np.ones(5)))
        values = [float(token_loss(ConfidencePenalty(b), dist, 2).data) for b in (0.0, 0.1, 0.5, 1.0, 3.0)]
        assert all(a > b for a, b in zip(values, values[1:]))


def test_label_smoothing_minimiser_is_the_smoothed_target():
    n, eps, gold = 5, 0.2, 3
    logits = T.Parameter("z", np.zeros((1, n)))
    kind = LabelSmoothing(eps)
    for _ in range(3000):
        logits.zero_grad()
        with T.Tape() as tape:
            loss = T.sum_all(token_losses(kind, T.log_softmax_rows(logits), [gold]))
        tape.backward(loss)
        logits.data -= 0.5 * logits.grad
    p = np.exp(logits.data[0] - logits.data[0].max())
    p /= p.sum()
    q = np.full(n, eps / n)
    q[gold] += 1 - eps
    assert np.max(np.abs(p - q)) < 1e-3


def test_sequence_loss_is_mean_negative_log_likelihood():
    m = toy_model(seed=2)
    pair = DialoguePair([4, 5, 6], [7, 4, EOS])
    assert float(sequence_loss(m, pair, NLL()).data) == pytest.approx(
        -m.sequence_log_prob(pair.message, pair.response) / 3, abs=1e-12
    )
    single = DialoguePair([4], [EOS])
    state = m.initial_state([[4]])
    _, dist = m.decode_step(state, START)
    for kind in (NLL(), ConfidencePenalty(0.4), LabelSmoothing(0.1)):
        assert float(sequence_loss(m, single, kind).data) == pytest.approx(
            float(token_loss(kind, dist, EOS).data), abs=1e-12
        )


def test_unterminated_target_is_a_corpus_error():
    with pytest.raises(CorpusError):
        batch_loss(toy_model(), [DialoguePair([4], [5], check=False)], NLL())


@pytest.mark.parametrize("kind", [NLL(), ConfidencePenalty(0.7), LabelSmoothing(0.15)], ids=lambda k: k.name)
def test_sequence_loss_gradient(kind, rng):
    m = toy_model(attention="single", seed=3)
    pairs = [random_pair(rng) for _ in range(2)]
    err = T.grad_check(
        lambda: batch_loss(m, pairs, kind)[0], m.parameters(), eps=1e-2, order=4, max_coords=60, rng=rng
    )
    assert err < 1e-4


def tiny_corpus():
    return [
        DialoguePair([4, 5], [6, 7, EOS]),
        DialoguePair([5, 4], [7, EOS]),
        DialoguePair([6], [4, 4, EOS]),
        DialoguePair([7, 6, 5], [5, EOS]),
    ]


def test_zero_epochs_leave_parameters_unchanged():
    m = toy_model(seed=1)
    before = {k: p.data.copy() for k, p in m.params.items()}
    report = train(m, tiny_corpus(), TrainConfig(epochs=0))
    assert report.loss == [] and report.to_csv() == "epoch,loss,mean_entropy,mean_maxprob,seconds\n"
    assert all(np.array_equal(before[k], p.data) for k, p in m.params.items())


def test_training_is_deterministic():
    cfg = TrainConfig(epochs=3, batch_size=2, lr=0.01, seed=5)
    a, b = toy_model(seed=1), toy_model(seed=1)
    ra = train(a, tiny_corpus(), cfg, ConfidencePenalty(0.3))
    rb = train(b, tiny_corpus(), cfg, ConfidencePenalty(0.3))
    assert ra.loss == rb.loss and ra.mean_entropy == rb.mean_entropy
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_report_entropy_within_bounds():
    m = toy_model(seed=1)
    report = train(m, tiny_corpus(), TrainConfig(epochs=4, batch_size=3, lr=0.01))
    assert all(0.0 <= h <= math.log(8) for h in report.mean_entropy)
    assert all(0.0 < p <= 1.0 for p in report.mean_maxprob)
    assert report.loss[-1] < report.loss[0]


def test_memorises_four_pairs():
    m = toy_model(dim=12, seed=0)
    corpus = tiny_corpus()
    train(m, corpus, TrainConfig(epochs=500, batch_size=4, lr=0.01, seed=0))
    for pair in corpus:
        assert greedy_decode(m, pair.message, 10).tokens == pair.response


def test_language_model_learns_first_token_frequency():
    responses = [[4, EOS], [5, EOS]] * 40
    lm, _ = train_language_model(responses, ModelConfig(6, 4, 8), TrainConfig(epochs=60, batch_size=8, lr=0.01))
    assert not lm.config.conditional
    _, dist = lm.decode_step(lm.initial_state(None), START)
    assert abs(dist.data[4] - 0.5) < 0.05
    for y in ([4, EOS], [5, 5, EOS], [EOS]):
        assert -math.inf < lm.sequence_log_prob(None, y) <= 0.0


def test_language_model_of_repeated_response_becomes_certain():
    probs = []
    for epochs in (5, 60):
        lm, _ = train_language_model([[4, 5, EOS]] * 8, ModelConfig(6, 4, 8), TrainConfig(epochs=epochs, lr=0.01))
        probs.append(math.exp(lm.sequence_log_prob(None, [4, 5, EOS]) / 3))
    assert probs[1] > probs[0] and probs[1] > 0.95


def test_reverse_pairs_is_an_involution():
    corpus = tiny_corpus()
    assert reverse_pairs(reverse_pairs(corpus)) == tuple(corpus)


def test_reverse_model_recovers_messages_on_bijective_corpus():
    corpus = tiny_corpus()
    rev, _ = train_reverse_model(corpus, ModelConfig(8, 12, 12), TrainConfig(epochs=500, batch_size=4, lr=0.01))
    for pair in corpus:
        assert math.isfinite(rev.sequence_log_prob(reverse_source(pair.response), list(pair.message) + [EOS]))
        assert greedy_decode(rev, reverse_source(pair.response), 10).tokens == tuple(pair.message) + (EOS,)


def test_divergence_names_epoch_and_batch():
    m = toy_model()
    m.params["mlp.W2"].data[0, 0] = np.nan
    with pytest.raises(DivergenceError, match="epoch 1, batch 1"):
        train(m, tiny_corpus(), TrainConfig(epochs=1))


def test_empty_corpus_rejected():
    with pytest.raises(CorpusError):
        train(toy_model(), [], TrainConfig())


def test_config_validation():
    for bad in (dict(lr=0.0), dict(clip_norm=0.0), dict(epochs=-1), dict(optimizer="rmsprop")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_sgd_step_matches_manual_update():
    m = toy_model(seed=4)
    corpus = tiny_corpus()[:1]
    before = {k: p.data.copy() for k, p in m.params.items()}
    with T.Tape() as tape:
        loss = batch_loss(m, corpus, NLL())[0]
    tape.backward(loss)
    grads = {k: p.grad.copy() for k, p in m.params.items()}
    norm = math.sqrt(sum((g * g).sum() for g in grads.values()))
    assert norm < 100.0
    train(m, corpus, TrainConfig(epochs=1, optimizer="sgd", lr=0.1, clip_norm=100.0))
    for k, p in m.params.items():
        assert np.allclose(p.data, before[k] - 0.1 * grads[k], atol=1e-14, rtol=0)


def test_params_are_zero_grad_after_training():
    m = toy_model()
    train(m, tiny_corpus(), TrainConfig(epochs=1))
    assert all(not p.grad.any() for p in m.parameters())


def test_report_csv_shape():
    m = toy_model()
    report = train(m, tiny_corpus(), TrainConfig(epochs=2))
    lines = report.to_csv().splitlines()
    assert len(lines) == 3 and lines[1].startswith("1,") and lines[2].startswith("2,")


def test_nll_lm_of_seq2seq_with_conditional_false():
    lm = Seq2Seq(ModelConfig(8, 4, 5, conditional=False))
    loss, _, _ = batch_loss(lm, [DialoguePair([EOS], [4, EOS])], NLL())
    assert float(loss.data) == pytest.approx(-lm.sequence_log_prob(None, [4, EOS]) / 2, abs=1e-12)
