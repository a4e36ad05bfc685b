"""Command-line entry point: ``logattn <verb> --config FILE``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import io
from . import numerics as nx
from .attention import AttentionTrace
from .model import ConfigError, LineBatch, UserContext, forward_lines, tiered_forward
from .pipeline import (OnlineRunner, ScoringError, SequencingError, UndefinedAUCError, evaluate, group_by_user,
                       repeat_runs)
from .synthgen import GenConfig, GenConfigError, emit_lanl_format, generate
from .tokenizer import (EmptyVocabError, ParseError, TokenizationError, build_vocab, char_vocab,
                        filter_machine_events, tokenize)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("logattn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(args) -> io.RunConfig:
    cfg = io.RunConfig.from_file(args.config)
    if not cfg.data:
        raise io.RunConfigError("config needs a 'data' path")
    return cfg


def _out_dir(cfg: io.RunConfig) -> Path:
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _events(cfg: io.RunConfig):
    return io.read_events(cfg.data, cfg.redteam or None)


def cmd_synth(args) -> int:
    gen = GenConfig.from_file(args.config) if args.config else GenConfig()
    out = Path(args.out or os.environ.get(io.OUTPUT_DIR_ENV) or "synth")
    auth, red = emit_lanl_format(generate(gen), out)
    io.write_json(gen.as_dict(), out / "synth_config.json")
    print(json.dumps({"auth": str(auth), "redteam": str(red)}))
    return EXIT_OK


def cmd_build_vocab(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    events = list(filter_machine_events(_events(cfg), cfg.machine_filter or None))
    if cfg.tokenization == "char":
        vocab = char_vocab()
    else:
        first_day = [e for e in events if events and e.day == events[0].day]
        vocab = build_vocab(first_day, cfg.vocab_threshold)
    path = Path(cfg.vocab) if cfg.vocab else out / "vocab.json"
    io.save_vocab(vocab, path)
    if args.tokens:
        io.write_tokens((tokenize(e, vocab, i) for i, e in enumerate(events)), args.tokens, vocab)
    print(json.dumps({"vocab": str(path), "size": len(vocab)}))
    return EXIT_OK


class _Recorder:
    """Per-day side outputs of a run: checkpoints and attention traces."""

    def __init__(self, cfg: io.RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.runner = None
        self.prev = None
        self.prev_contexts: dict = {}

    def __call__(self, day, seqs, scored, state):
        if scored and self.prev is not None and self.prev.config.attention != "none":
            self._attention(day, seqs)
        io.save_checkpoint(state.eval_params, self.out / f"ckpt_day{day}.npz", {"day": day})
        self.prev = state.eval_params
        self.prev_contexts = dict(state.contexts)

    def _attention(self, day, seqs):
        params, vocab = self.prev, self.runner.vocab
        path = self.out / f"attention_day{day}.jsonl"
        path.unlink(missing_ok=True)
        with nx.no_grad():
            if params.config.tiered:
                groups = group_by_user(seqs)
                for user, idx in groups.items():
                    ctx = self.prev_contexts.get(user) or UserContext.fresh(user, params.config.upper_hidden,
                                                                            params.config.dtype)
                    res = tiered_forward(params, [[seqs[i] for i in idx]], [ctx], capture=True)
                    for i, (line_out, row) in zip(idx, res.lines[0]):
                        io.write_jsonl(io.attention_records(vocab, [seqs[i]], _row_trace(line_out.trace, row),
                                                            tiered=True), path, append=True)
                return
            for start in range(0, len(seqs), self.cfg.batch_size):
                chunk = seqs[start:start + self.cfg.batch_size]
                res = forward_lines(params, LineBatch.from_sequences(chunk))
                io.write_jsonl(io.attention_records(vocab, chunk, res.trace), path, append=True)


def _row_trace(trace: AttentionTrace, row: int) -> AttentionTrace:
    return AttentionTrace(trace.lengths[row:row + 1], {t: w[row:row + 1] for t, w in trace.steps.items()},
                          None if trace.tiered is None else trace.tiered[row:row + 1])


def _vocab_for(cfg: io.RunConfig, out: Path):
    path = Path(cfg.vocab) if cfg.vocab else out / "vocab.json"
    return io.load_vocab(path) if path.exists() else None


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    print(cfg.to_text(), end="")
    (out / "resolved_config.ini").write_text(cfg.to_text())
    recorder = _Recorder(cfg, out)
    runner = OnlineRunner(cfg.settings(), vocab=_vocab_for(cfg, out), on_day=recorder)
    recorder.runner = runner
    scored = [e for day in runner.run(_events(cfg)) for e in day]
    if runner.vocab is not None:
        io.save_vocab(runner.vocab, out / "vocab.json")
    io.write_scores(scored, out / "scores.csv")
    print(json.dumps({"scores": str(out / "scores.csv"), "lines": len(scored),
                      "peak_retained": runner.peak_retained}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    if cfg.n_seeds > 1:
        print(cfg.to_text(), end="")
        summary = repeat_runs(cfg.settings(), lambda: _events(cfg), cfg.n_seeds)
        io.write_json(summary.as_dict(), out / "auc_summary.json")
        table = "model        mean  max   min   std\n" + summary.table_row(cfg.model if cfg.attention == "none"
                                                                         else cfg.attention) + "\n"
        (out / "auc_table.txt").write_text(table)
        print(table, end="")
        return EXIT_OK
    scores_path = Path(args.scores) if args.scores else out / "scores.csv"
    curve = evaluate(io.read_scores(scores_path))
    io.write_roc(curve, out / "roc.csv")
    io.write_json({"auc": curve.auc, "n_runs": 1}, out / "auc.json")
    print(json.dumps({"auc": curve.auc}))
    return EXIT_OK


def cmd_export_attention(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    paths = [Path(args.input)] if args.input else sorted(out.glob("attention_day*.jsonl"))
    if not paths:
        raise FileNotFoundError("no attention trace files; run with an attention model first")
    records = [r for p in paths for r in io.read_jsonl(p)]
    if not records:
        log.warning("attention traces are empty; writing an empty table")
    rows = io.export_attention_summary(records, cfg.tokenization)
    dest = Path(args.output) if args.output else out / "attention_heatmap.csv"
    io.write_heatmap_csv(rows, dest)
    print(json.dumps({"heatmap": str(dest), "cells": len(rows)}))
    return EXIT_OK


def cmd_export_case(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    if cfg.model != "em" or cfg.attention == "none":
        raise io.RunConfigError("case studies need an event model with attention")
    scored = io.read_scores(out / "scores.csv")
    if args.line_id is not None:
        chosen = [e for e in scored if e.line_id == args.line_id]
        if not chosen:
            raise LookupError(f"line {args.line_id} was not scored")
    elif args.red:
        chosen = [e for e in scored if e.red]
    else:
        chosen = sorted(scored, key=lambda e: -e.score)[: args.top_k]
    wanted = {e.line_id: e for e in chosen}
    vocab = io.load_vocab(out / "vocab.json")
    events = filter_machine_events(_events(cfg), cfg.machine_filter or None)
    seqs = [tokenize(e, vocab, i) for i, e in enumerate(events) if i in wanted]
    cases = []
    for s in seqs:
        params, _ = io.load_checkpoint(out / f"ckpt_day{s.day - 1}.npz")
        cases.append(io.export_case_study(params, vocab, s, wanted[s.line_id]))
    dest = Path(args.output) if args.output else out / "case_study.jsonl"
    io.write_jsonl(cases, dest)
    print(json.dumps({"cases": str(dest), "lines": len(cases)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="logattn", description="Streaming log anomaly detection with attention LSTMs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--config", help="generator key-value file")
    s.add_argument("--out", help="output directory")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("build-vocab", help="build the vocabulary from the first day")
    s.add_argument("--config", required=True)
    s.add_argument("--tokens", help="also write token sequences to this file")
    s.set_defaults(fn=cmd_build_vocab)

    s = sub.add_parser("run", help="online train/score over all days")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("eval", help="ROC/AUC from scores, or a multi-seed AUC table")
    s.add_argument("--config", required=True)
    s.add_argument("--scores", help="scores CSV (default: output_dir/scores.csv)")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("export-attention", help="mean/std attention heatmap")
    s.add_argument("--config", required=True)
    s.add_argument("--input", help="attention trace JSONL")
    s.add_argument("--output")
    s.set_defaults(fn=cmd_export_attention)

    s = sub.add_parser("export-case", help="per-token case study of selected lines")
    s.add_argument("--config", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--line-id", type=int)
    g.add_argument("--top-k", type=int)
    g.add_argument("--red", action="store_true")
    s.add_argument("--output")
    s.set_defaults(fn=cmd_export_case)
    return p


_EXIT_FOR = (
    ((UsageError, io.RunConfigError, ConfigError, GenConfigError), EXIT_USAGE),
    ((ScoringError, nx.NumericError), EXIT_NUMERIC),
    ((ParseError, TokenizationError, EmptyVocabError, SequencingError, UndefinedAUCError, LookupError, OSError), EXIT_DATA),
)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.fn(args)
    except Exception as exc:
        for kinds, code in _EXIT_FOR:
            if isinstance(exc, kinds):
                break
        else:
            raise
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        print(json.dumps(record), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
