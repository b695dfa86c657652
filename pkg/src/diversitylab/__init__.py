"""Seq2seq response generation with entropy-regularised training and MMI reranking."""

from .corpus import DialoguePair, SyntheticCorpusSpec, Vocabulary, load_checkpoint, save_checkpoint
from .decoding import MAP, MMIAntiLM, MMIBidi, beam_search, greedy_decode, rerank, score_hypothesis
from .model import ModelConfig, Seq2Seq
from .training import NLL, ConfidencePenalty, LabelSmoothing, TrainConfig, train

__all__ = [
    "DialoguePair",
    "SyntheticCorpusSpec",
    "Vocabulary",
    "load_checkpoint",
    "save_checkpoint",
    "MAP",
    "MMIAntiLM",
    "MMIBidi",
    "beam_search",
    "greedy_decode",
    "rerank",
    "score_hypothesis",
    "ModelConfig",
    "Seq2Seq",
    "NLL",
    "ConfidencePenalty",
    "LabelSmoothing",
    "TrainConfig",
    "train",
]
