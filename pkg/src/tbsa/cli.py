"""Command-line entry point: ``tbsa <command> [options]``.

Commands: train, eval, tag, convert, gradcheck, sweep, ablation.
Exit status: 0 ok, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .corpus import (
    DataError,
    Dataset,
    Sentence,
    build_vocabulary,
    convert_spans_to_conll,
    load_embeddings,
    load_lexicon,
    read_conll,
    read_span_records,
    split_dev,
    write_span_records,
)
from .evaluator import ablation_table, evaluate_corpus, format_table, report_records
from .model import ModelConfig, load_checkpoint, predict, save_checkpoint
from .trainer import NumericalError, TrainConfig, grad_check, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULT_EPSILONS = (0.0, 0.3, 0.4, 0.5, 0.6, 0.7, 1.0)
DEFAULT_WINDOWS = (1, 2, 3, 4, 5)

log = logging.getLogger("tbsa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--emb-dim", type=int, default=300)
    g.add_argument("--dim-t", type=int, default=50, help="boundary BiLSTM width (both directions)")
    g.add_argument("--dim-s", type=int, default=50, help="unified BiLSTM width (both directions)")
    g.add_argument("--epsilon", type=float, default=0.5, help="maximum share of boundary-based scores")
    g.add_argument("--window", type=int, default=3, help="opinion-word context window per side")
    g.add_argument("--dropout", type=float, default=0.5)
    g.add_argument("--no-bg", action="store_true", help="disable boundary guidance")
    g.add_argument("--no-sc", action="store_true", help="disable the sentiment-consistency gate")
    g.add_argument("--no-oe", action="store_true", help="disable the opinion-enhanced auxiliary head")
    g.add_argument("--freeze-transition", action="store_true")
    g.add_argument("--seed", type=int, default=0)


def _train_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=50)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--decay", type=float, default=0.05)
    g.add_argument("--batch-size", type=int, default=1)
    g.add_argument("--clip-norm", type=float, default=None)


def _data_args(p: argparse.ArgumentParser, need_test: bool = False) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--train", required=True, help="training corpus (token<TAB>unified-tag)")
    g.add_argument("--dev", help="dev corpus; default: 10%% held out from --train")
    g.add_argument("--dev-fraction", type=float, default=0.1)
    g.add_argument("--test", required=need_test)
    g.add_argument("--embeddings", help="pre-trained vectors, one 'token v1 ... vd' per line")
    g.add_argument("--lexicon", help="opinion lexicon, one word per line")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tbsa", description="Unified target-based sentiment tagger.")
    parser.add_argument("--config", help="key = value file; command-line flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _data_args(p)
    _model_args(p)
    _train_args(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="history file (default: <out>.history.jsonl)")

    p = sub.add_parser("eval", help="exact-match P/R/F1 of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--report", help="write a line-delimited record here")

    p = sub.add_parser("tag", help="tag pre-tokenized text, one sentence per line")
    p.add_argument("--model", required=True)
    p.add_argument("--input", help="default: stdin")
    p.add_argument("--output", help="default: stdout")

    p = sub.add_parser("convert", help="convert between span records and CoNLL schemes")
    p.add_argument("--input", required=True)
    p.add_argument("--from", dest="src", choices=("records", "unified", "joint"), required=True)
    p.add_argument("--to", dest="dst", choices=("records", "unified", "boundary", "joint"), required=True)
    p.add_argument("--output", help="default: stdout")

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--dims", type=int, default=4, help="embedding and hidden width")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--epsilon", type=float, default=0.5)
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--no-bg", action="store_true")
    p.add_argument("--no-sc", action="store_true")
    p.add_argument("--no-oe", action="store_true")
    p.add_argument("--freeze-transition", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sweep", help="dev F1 over a grid of epsilon and window sizes")
    _data_args(p)
    _model_args(p)
    _train_args(p)
    p.add_argument("--epsilons", type=_floats, default=list(DEFAULT_EPSILONS))
    p.add_argument("--windows", type=_ints, default=list(DEFAULT_WINDOWS), help="e.g. 1..5 or 1,3")
    p.add_argument("--out", required=True, help="line-delimited records")

    p = sub.add_parser("ablation", help="train and score the five component configurations")
    _data_args(p)
    _model_args(p)
    _train_args(p)
    p.add_argument("--name", default="dataset")
    p.add_argument("--out", help="line-delimited records")
    return parser


def read_config_file(path: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}: expected 'key = value'", lineno)
        key, value = (x.strip() for x in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """Turn config-file entries into defaults of the chosen sub-parser."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((a for a in rest if a in sub.choices), None)
    if not known.config or command is None:
        return
    values = read_config_file(known.config)
    cmd = sub.choices[command]
    defaults = {}
    for action in cmd._actions:
        if action.dest not in values:
            continue
        raw = values.pop(action.dest)
        if isinstance(action, argparse._StoreTrueAction):
            defaults[action.dest] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            defaults[action.dest] = action.type(raw)
        else:
            defaults[action.dest] = raw
        action.required = False
    if values:
        raise UsageError(f"unknown config keys for {command}: {', '.join(sorted(values))}")
    cmd.set_defaults(**defaults)


def model_config(args) -> ModelConfig:
    return ModelConfig(emb_dim=args.emb_dim, dim_t=args.dim_t, dim_s=args.dim_s, epsilon=args.epsilon,
                       window=args.window, dropout=args.dropout, use_bg=not args.no_bg,
                       use_sc=not args.no_sc, use_oe=not args.no_oe,
                       train_transition=not args.freeze_transition, seed=args.seed)


def train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, lr=args.lr, decay=args.decay, batch_size=args.batch_size,
                       clip_norm=args.clip_norm, seed=args.seed)


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "config_file_values"}


def load_dataset(args, name: str = "dataset") -> Dataset:
    for attr in ("train", "dev", "test", "embeddings", "lexicon"):
        path = getattr(args, attr, None)
        if path is not None and not Path(path).exists():
            raise DataError(f"--{attr} file not found: {path}")
    train_s = read_conll(args.train)
    if args.dev:
        dev_s = read_conll(args.dev)
    else:
        train_s, dev_s = split_dev(train_s, args.dev_fraction, args.seed)
    test_s = read_conll(args.test) if args.test else []
    return Dataset(name, train_s, dev_s, test_s)


def _inputs(args, cfg: ModelConfig, dataset: Dataset):
    if cfg.use_oe and not args.lexicon:
        raise UsageError("the OE component needs --lexicon (or pass --no-oe)")
    lexicon = load_lexicon(args.lexicon) if args.lexicon else None
    embeddings = None
    if args.embeddings:
        vocab = build_vocabulary(dataset.all_sentences())
        embeddings = load_embeddings(args.embeddings, vocab, cfg.emb_dim, seed=cfg.seed)
        log.info("embeddings: %d of %d tokens found", embeddings.found, len(vocab))
    return lexicon, embeddings


def cmd_train(args) -> int:
    cfg, tcfg = model_config(args), train_config(args)
    dataset = load_dataset(args)
    lexicon, embeddings = _inputs(args, cfg, dataset)
    model, history = train(dataset, lexicon, cfg, tcfg, embeddings)
    resolved = _resolved(args)
    save_checkpoint(model, args.out, extra={"run": resolved, "best_epoch": history.best_epoch})
    history.write(args.history or f"{args.out}.history.jsonl", resolved)
    best = history.best
    print(f"best epoch {best.epoch}: dev P={best.dev_p:.4f} R={best.dev_r:.4f} F1={best.dev_f1:.4f}")
    if dataset.test:
        s = evaluate_corpus(model, dataset.test).unified
        print(f"test P={s.precision:.4f} R={s.recall:.4f} F1={s.f1:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    sentences = read_conll(args.test)
    scores = evaluate_corpus(model, sentences)
    u, b = scores.unified, scores.boundary
    print(f"{'':<10} {'P':>7} {'R':>7} {'F1':>7}  {'TP':>5} {'pred':>5} {'gold':>5}")
    for name, s in (("complete", u), ("target", b)):
        print(f"{name:<10} {100 * s.precision:7.2f} {100 * s.recall:7.2f} {100 * s.f1:7.2f}  "
              f"{s.tp:>5} {s.n_pred:>5} {s.n_gold:>5}")
    if args.report:
        rec = {"dataset": args.test, "config": asdict(model.config), "P": u.precision, "R": u.recall,
               "F1": u.f1, "tp": u.tp, "n_pred": u.n_pred, "n_gold": u.n_gold,
               "target": b.as_dict()}
        Path(args.report).write_text(json.dumps(rec, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def format_spans(spans) -> str:
    return ";".join(f"{s.start}-{s.end}:{s.sentiment}" for s in spans)


def cmd_tag(args) -> int:
    model = load_checkpoint(args.model)
    src = open(args.input, encoding="utf-8") if args.input else sys.stdin
    out = []
    with src:
        for line in src:
            tokens = line.split()
            if not tokens:
                out.append("")
                continue
            pred = predict(model, tokens)
            out.append(" ".join(pred.unified) + "\t" + format_spans(pred.spans))
    text = "".join(line + "\n" for line in out)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_convert(args) -> int:
    text = Path(args.input).read_text(encoding="utf-8")
    sentences: list[Sentence]
    if args.src == "records":
        sentences = read_span_records(text)
    else:
        sentences = read_conll(args.input, args.src)
    result = write_span_records(sentences) if args.dst == "records" else convert_spans_to_conll(sentences, args.dst)
    if args.output:
        Path(args.output).write_text(result, encoding="utf-8")
    else:
        sys.stdout.write(result)
    return EXIT_OK


GRADCHECK_SENTENCE = Sentence(
    "The AMD Turin Processor seems to always perform much better than Intel .".split(),
    [(1, 3, "POS"), (11, 11, "NEG")], "gradcheck")


def cmd_gradcheck(args) -> int:
    cfg = ModelConfig(emb_dim=args.dims, dim_t=args.dims, dim_s=args.dims, epsilon=args.epsilon,
                      window=args.window, dropout=args.dropout, use_bg=not args.no_bg,
                      use_sc=not args.no_sc, use_oe=not args.no_oe,
                      train_transition=not args.freeze_transition, seed=args.seed)
    report = grad_check(cfg, GRADCHECK_SENTENCE, args.tol, seed=args.seed)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def sweep(dataset: Dataset, lexicon, base: ModelConfig, tcfg: TrainConfig,
          epsilons: Sequence[float] = DEFAULT_EPSILONS, windows: Sequence[int] = DEFAULT_WINDOWS,
          embeddings=None) -> list[dict]:
    """Best dev F1 for every (epsilon, window) pair, sorted by (epsilon, window)."""
    for e in epsilons:
        if not 0.0 <= e <= 1.0:
            raise ValueError(f"epsilon {e} outside [0, 1]")
    for s in windows:
        if s < 1:
            raise ValueError(f"window {s} must be >= 1")
    records = []
    for e in sorted(set(epsilons)):
        for s in sorted(set(windows)):
            cfg = base.replace(epsilon=e, window=s)
            _, history = train(dataset, lexicon if cfg.use_oe else None, cfg, tcfg, embeddings)
            records.append({"epsilon": e, "window": s, "dev_f1": history.best.dev_f1,
                            "best_epoch": history.best_epoch})
    return records


def cmd_sweep(args) -> int:
    cfg, tcfg = model_config(args), train_config(args)
    dataset = load_dataset(args)
    lexicon, embeddings = _inputs(args, cfg, dataset)
    records = sweep(dataset, lexicon, cfg, tcfg, args.epsilons, args.windows, embeddings)
    resolved = _resolved(args)
    lines = [json.dumps({**r, "resolved": resolved}, sort_keys=True) for r in records]
    Path(args.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    for r in records:
        print(f"epsilon={r['epsilon']:.2f} s={r['window']}  dev F1={100 * r['dev_f1']:.2f}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg, tcfg = model_config(args), train_config(args)
    dataset = load_dataset(args, args.name)
    lexicon, embeddings = _inputs(args, cfg.replace(use_oe=True), dataset)
    rows = ablation_table(dataset, lexicon, cfg, tcfg, embeddings)
    print(format_table(rows, title=args.name))
    if args.out:
        Path(args.out).write_text(report_records(args.name, rows, _resolved(args)), encoding="utf-8")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "tag": cmd_tag, "convert": cmd_convert,
            "gradcheck": cmd_gradcheck, "sweep": cmd_sweep, "ablation": cmd_ablation}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except UsageError as exc:
        print(f"tbsa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"tbsa: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tbsa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"tbsa: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError, KeyError) as exc:
        print(f"tbsa: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
