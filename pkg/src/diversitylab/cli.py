"""Command-line entry point: gen-corpus, train, decode, diagnose, eval.

Exit codes: 0 success, 1 usage or configuration error, 2 IO or bad input
file, 3 numeric divergence during training. ``DIVERSITYLAB_SEED`` sets the
default ``--seed``; an explicit flag wins.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from pathlib import Path

from . import corpus as C
from .decoding import MAP, MMIAntiLM, MMIBidi, beam_search, dumps_jsonl, greedy_decode, rerank, score_hypothesis
from .diagnostics import DEFAULT_TOP_K, DecodeConfig, corpus_report, snowball_index, trace_decode, trace_jsonl
from .model import ConfigError, ModelConfig, Seq2Seq
from .training import NLL, ConfidencePenalty, DivergenceError, LabelSmoothing, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3
SEED_ENV = "DIVERSITYLAB_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


# ---------------------------------------------------------------- helpers


def _read_messages(path) -> list[str]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise UsageError(f"{path} contains no messages")
    return lines


def _out(path) -> Path:
    """Output path with its parent directory created."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load(path):
    if path is None:
        return None, None
    return C.load_checkpoint_file(path)


def _objective(args):
    if args.objective == "map":
        return MAP()
    if args.objective == "mmi-antilm":
        if args.lm is None:
            raise UsageError("--objective mmi-antilm requires --lm CHECKPOINT")
        return MMIAntiLM(args.lam, args.gamma)
    if args.reverse is None:
        raise UsageError("--objective mmi-bidi requires --reverse CHECKPOINT")
    return MMIBidi(args.lam, args.gamma)


def _decode_models(args, objective):
    model, vocab = _load(args.checkpoint)
    lm, lm_vocab = _load(args.lm if isinstance(objective, MMIAntiLM) else None)
    rev, rev_vocab = _load(args.reverse if isinstance(objective, MMIBidi) else None)
    for flag, other in (("--lm", lm_vocab), ("--reverse", rev_vocab)):
        if other is not None and other != vocab:
            raise UsageError(f"{flag} checkpoint uses a different vocabulary than --checkpoint")
    if lm is not None and lm.config.conditional:
        raise UsageError("--lm checkpoint is not a language model")
    return model, vocab, lm, rev


def _add_decode_flags(p):
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--greedy", action="store_true", help="MAP greedy decoding (default)")
    mode.add_argument("--beam", type=int, metavar="B", help="beam width; rerank the N-best list")
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--objective", choices=("map", "mmi-antilm", "mmi-bidi"), default="map")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5, help="MMI weight lambda (default 0.5)")
    p.add_argument("--gamma", type=float, default=0.0, help="MMI length bonus per token (default 0)")
    p.add_argument("--lm", help="language-model checkpoint for mmi-antilm")
    p.add_argument("--reverse", help="reverse-model checkpoint for mmi-bidi")


def _check_decode_flags(args):
    if args.beam is not None and args.beam < 1:
        raise UsageError("--beam must be >= 1")
    if args.max_len < 1:
        raise UsageError("--max-len must be >= 1")
    objective = _objective(args)
    if args.beam is None and not isinstance(objective, MAP):
        raise UsageError(f"--objective {args.objective} needs --beam to produce candidates")
    return objective


# ---------------------------------------------------------------- commands


def cmd_gen_corpus(args) -> int:
    spec = C.SyntheticCorpusSpec(
        base_vocab=args.base_vocab,
        templates=args.templates,
        generic_skew=args.skew,
        generic_set=args.generic_set,
        seed=args.seed,
    )
    if args.size < 1:
        raise UsageError("--size must be >= 1")
    pairs = C.synthetic_pairs(spec, args.size)
    n = C.write_pairs(_out(args.out), pairs)
    vocab = C.build_vocabulary(pairs)
    generic = sum(1 for _, r in pairs if r in spec.generic) / n
    if args.held_out:
        _out(args.held_out).write_text(
            "".join(m + "\n" for m in C.held_out_messages(spec, args.size, args.held_out_count)), encoding="utf-8"
        )
    print(f"pairs={n} vocab_size={len(vocab)} generic_fraction={generic:.4f}")
    return EXIT_OK


def _loss_kind(args):
    if args.loss == "nll":
        return NLL()
    if args.loss == "confidence-penalty":
        return ConfidencePenalty(args.beta)
    return LabelSmoothing(args.epsilon)


def cmd_train(args) -> int:
    kind = _loss_kind(args)
    tconf = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        optimizer=args.optimizer,
        clip_norm=args.clip,
        seed=args.seed,
    )
    model_flags = dict(
        embed_dim=args.embed_dim,
        hidden_dim=args.hidden_dim,
        attention="none" if args.model_kind == "lm" else args.attention,
        heads=args.heads if args.attention == "multi" and args.model_kind != "lm" else 1,
        tie_output_embeddings=args.tie_embeddings,
        conditional=args.model_kind != "lm",
    )
    ModelConfig(vocab_size=4, **model_flags)  # validate flags before touching any file
    fixed = None
    if args.vocab_from:
        _, fixed = C.load_checkpoint_file(args.vocab_from)
    corpus, vocab = C.load_corpus(args.corpus, fixed)
    if args.model_kind == "reverse":
        corpus = C.reverse_pairs(corpus)
    model = Seq2Seq(ModelConfig(vocab_size=len(vocab), **model_flags), seed=args.seed)

    def progress(epoch, report):
        if not args.quiet:
            print(
                f"epoch {epoch} loss={report.loss[-1]:.4f} entropy={report.mean_entropy[-1]:.4f} "
                f"maxprob={report.mean_maxprob[-1]:.4f}",
                file=sys.stderr,
            )

    report = train(model, corpus, tconf, kind, on_epoch=progress)
    C.save_checkpoint_file(_out(args.out), model, vocab)
    report_path = args.report or str(Path(args.out).with_suffix(".train.csv"))
    _out(report_path).write_text(report.to_csv(), encoding="utf-8")
    print(f"wrote {args.out} ({sum(p.data.size for p in model.parameters())} parameters) and {report_path}")
    return EXIT_OK


def decode_records(args, model, vocab, lm, rev, objective, messages) -> list[dict]:
    records = []
    for i, message in enumerate(messages):
        source = list(vocab.encode(C.tokenize(message)))
        if not source:
            raise UsageError(f"message {i + 1} is empty")
        if args.beam is None:
            nbest = [greedy_decode(model, source, args.max_len)]
        else:
            nbest = beam_search(model, source, args.beam, args.max_len)
        best, scored = rerank(objective, nbest, source, model, lm, rev)
        entries = []
        for s in scored:
            scores = {"map": score_hypothesis(MAP(), s.hypothesis, source, model)}
            scores[objective.name] = s.score
            entries.append(
                {
                    "tokens": vocab.decode(s.hypothesis.tokens),
                    "log_prob": s.hypothesis.log_prob,
                    "objective_scores": scores,
                    "truncated": s.hypothesis.truncated,
                }
            )
        records.append(
            {"index": i, "message": message, "response": vocab.decode(best.tokens), "nbest": entries}
        )
    return records


def cmd_decode(args) -> int:
    objective = _check_decode_flags(args)
    model, vocab, lm, rev = _decode_models(args, objective)
    messages = _read_messages(args.input)
    text = dumps_jsonl(decode_records(args, model, vocab, lm, rev, objective, messages))
    if args.out:
        _out(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    model, vocab = C.load_checkpoint_file(args.checkpoint)
    if not 1 <= args.k <= model.config.vocab_size:
        raise UsageError(f"--k must lie in [1, {model.config.vocab_size}]")
    messages = _read_messages(args.input)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "message", "response", "steps", "snowball_index", "mean_entropy", "first_maxprob", "final_maxprob"])
    for i, message in enumerate(messages):
        source = list(vocab.encode(C.tokenize(message)))
        steps, traj = trace_decode(model, source, args.k, args.max_len, vocab)
        (out / f"trace_{i:04d}.jsonl").write_text(trace_jsonl(steps), encoding="utf-8")
        s = snowball_index(traj)
        writer.writerow(
            [
                i,
                message,
                " ".join(vocab.decode(traj.tokens)),
                len(steps),
                "" if s is None else repr(s),
                repr(sum(traj.entropies) / len(traj.entropies)),
                repr(traj.max_probs[0]),
                repr(traj.max_probs[-1]),
            ]
        )
    (out / "summary.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(f"wrote {len(messages)} traces to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    objective = _check_decode_flags(args)
    model, vocab, lm, rev = _decode_models(args, objective)
    messages = _read_messages(args.input)
    sources = [list(vocab.encode(C.tokenize(m))) for m in messages]
    config = DecodeConfig(max_len=args.max_len, beam=args.beam, objective=objective)
    report = corpus_report(model, sources, config, lm, rev)
    text = report.to_json() + "\n"
    if args.out_json:
        _out(args.out_json).write_text(text, encoding="utf-8")
    if args.out_csv:
        _out(args.out_csv).write_text(report.csv_row(args.label), encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diversitylab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None, help=f"global seed (default ${SEED_ENV} or 0)")
        p.set_defaults(func=func)
        return p

    p = command("gen-corpus", cmd_gen_corpus, "write a synthetic skewed TSV corpus")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base-vocab", type=int, default=40)
    p.add_argument("--templates", type=int, default=20)
    p.add_argument("--skew", type=float, default=0.8, help="fraction of generic responses")
    p.add_argument("--generic-set", type=int, default=2)
    p.add_argument("--held-out", help="also write fresh messages, one per line, to this path")
    p.add_argument("--held-out-count", type=int, default=50)

    p = command("train", cmd_train, "train a forward, language or reverse model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.ckpt)")
    p.add_argument("--report", help="per-epoch CSV (default: <out>.train.csv)")
    p.add_argument("--model-kind", choices=("forward", "lm", "reverse"), default="forward")
    p.add_argument("--loss", choices=("nll", "confidence-penalty", "label-smoothing"), default="nll")
    p.add_argument("--beta", type=float, default=0.5, help="confidence-penalty strength (default 0.5)")
    p.add_argument("--epsilon", type=float, default=0.1, help="label-smoothing mass (default 0.1)")
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--attention", choices=("none", "single", "multi"), default="none")
    p.add_argument("--heads", type=int, default=2, help="K for --attention multi (default 2)")
    p.add_argument("--tie-embeddings", action="store_true")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--clip", type=float, default=5.0)
    p.add_argument("--vocab-from", help="reuse the vocabulary of this checkpoint (unknown tokens -> _UNK_)")
    p.add_argument("--quiet", action="store_true")

    p = command("decode", cmd_decode, "decode messages, optionally with beam search and MMI reranking")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="messages, one per line")
    p.add_argument("--out", help="JSON-lines output (default stdout)")
    _add_decode_flags(p)

    p = command("diagnose", cmd_diagnose, "write per-step top-k traces of greedy decodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", type=int, default=DEFAULT_TOP_K, help="top-k entries per step (default 10)")
    p.add_argument("--max-len", type=int, default=20)

    p = command("eval", cmd_eval, "corpus-level diversity report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out-json")
    p.add_argument("--out-csv")
    p.add_argument("--label", default="")
    _add_decode_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.seed is None:
            args.seed = _default_seed()
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, UnicodeDecodeError, C.CorpusError, C.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
