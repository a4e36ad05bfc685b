"""Run configuration, file formats and attention exports."""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import numerics as nx
from .model import LineBatch, ModelConfig, ModelParams, forward_lines
from .numerics import Tensor
from .pipeline import RocCurve, RunSettings, ScoredEvent, TrainSettings
from .tokenizer import (DEFAULT_MACHINE_PATTERN, WORD_FIELDS, ParseError, RawEvent, TokenSequence,
                        Vocabulary, parse_line, parse_red_line, position_labels)

OUTPUT_DIR_ENV = "LOGATTN_OUTPUT_DIR"
TOKEN_FILE_HEADER = "#logattn-tokens v1"
CHECKPOINT_VERSION = 1
MODEL_KINDS = {
    "em": dict(bidirectional=False, tiered=False),
    "bem": dict(bidirectional=True, tiered=False),
    "t-em": dict(bidirectional=False, tiered=True),
    "t-bem": dict(bidirectional=True, tiered=True),
    "ta-em": dict(bidirectional=False, tiered=True),
    "ta-bem": dict(bidirectional=True, tiered=True),
}
EM_ATTENTION = ("none", "fixed", "syntax", "semantic1", "semantic2")


class RunConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class RunConfig:
    model: str = "em"
    attention: str = "none"
    tokenization: str = "word"
    data: str = ""
    redteam: str = ""
    output_dir: str = "out"
    vocab: str = ""
    vocab_threshold: int = 40
    embedding: int = 128
    hidden: int = 128
    attention_size: int = 128
    upper_hidden: int = 128
    lr: float = 0.01
    batch_size: int = 64
    clip: float = 5.0
    window: int = 3
    seed: int = 0
    n_seeds: int = 1
    machine_filter: str = DEFAULT_MACHINE_PATTERN.pattern
    concurrent: bool = False
    workers: int = 1
    dtype: str = "float64"

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise RunConfigError(f"model must be one of {sorted(MODEL_KINDS)}, got {self.model!r}")
        if self.attention not in EM_ATTENTION:
            raise RunConfigError(f"attention must be one of {EM_ATTENTION}, got {self.attention!r}")
        if self.attention != "none" and self.model != "em":
            raise RunConfigError(f"attention variant {self.attention!r} applies to model 'em' only")
        if self.tokenization not in ("word", "char"):
            raise RunConfigError(f"tokenization must be 'word' or 'char', got {self.tokenization!r}")
        for name in ("vocab_threshold", "embedding", "hidden", "attention_size", "upper_hidden",
                     "batch_size", "window", "n_seeds", "workers"):
            if getattr(self, name) < 1:
                raise RunConfigError(f"{name} must be positive")
        if not self.lr > 0 or not self.clip > 0:
            raise RunConfigError("lr and clip must be positive")
        if self.attention == "semantic2" and self.hidden % 2:
            raise RunConfigError("semantic2 attention needs an even hidden size")
        if self.dtype not in ("float32", "float64"):
            raise RunConfigError("dtype must be float32 or float64")
        if self.machine_filter:
            try:
                re.compile(self.machine_filter)
            except re.error as exc:
                raise RunConfigError(f"machine_filter: {exc}") from None

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(types)
        if unknown:
            raise RunConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in values.items():
            kind = types[k]
            if not isinstance(v, str):
                kw[k] = v
            elif kind == "bool":
                if v.strip().lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise RunConfigError(f"{k}: expected a boolean, got {v!r}")
                kw[k] = v.strip().lower() in ("1", "true", "yes", "on")
            elif kind in ("int", "float"):
                try:
                    kw[k] = int(v) if kind == "int" else float(v)
                except ValueError:
                    raise RunConfigError(f"{k}: cannot parse {v!r} as {kind}") from None
            else:
                kw[k] = v.strip()
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        """Read ``key = value`` lines; an optional ``[run]`` header is allowed."""
        text = Path(path).read_text()
        if not text.lstrip().startswith("["):
            text = "[run]\n" + text
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise RunConfigError(f"{path}: {exc}") from None
        if not parser.has_section("run"):
            raise RunConfigError(f"{path}: missing [run] section")
        return cls.from_mapping(dict(parser["run"]))

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)

    def model_fields(self) -> dict:
        kw = dict(MODEL_KINDS[self.model])
        attention = "tiered" if self.model.startswith("ta-") else self.attention
        kw.update(emb_dim=self.embedding, hidden=self.hidden, attn_dim=self.attention_size,
                  upper_hidden=self.upper_hidden, attention=attention, dtype=self.dtype)
        if self.tokenization == "char":
            kw["max_len"] = 512
        return kw

    def settings(self) -> RunSettings:
        train = TrainSettings(lr=self.lr, batch_size=self.batch_size, clip=self.clip, window=self.window,
                              workers=self.workers, concurrent=self.concurrent)
        return RunSettings(self.model_fields(), train, self.tokenization, self.vocab_threshold,
                           self.machine_filter or None, self.seed)

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "[run]\n" + "".join(f"{k} = {v}\n" for k, v in self.as_dict().items())

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()


# ------------------------------------------------------------- event input


def read_red_keys(path) -> set:
    if not path:
        return set()
    with open(path) as f:
        return {parse_red_line(line) for line in f if line.strip()}


def read_events(path, red_path=None) -> Iterator[RawEvent]:
    """Stream events from a comma-separated auth file, flagging red-team keys."""
    red = read_red_keys(red_path)
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield parse_line(line, red)
            except ParseError as exc:
                raise ParseError(f"{path}:{n}: {exc}") from None


# ------------------------------------------------------------- vocab / tokens


def save_vocab(vocab: Vocabulary, path) -> None:
    doc = {"format": "logattn-vocab", "version": 1, "mode": vocab.mode, "threshold": vocab.threshold,
           "tokens": vocab.tokens}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_vocab(path) -> Vocabulary:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "logattn-vocab":
        raise ParseError(f"{path}: not a vocabulary file")
    return Vocabulary(doc["mode"], list(doc["tokens"]), doc.get("threshold"))


def write_tokens(seqs: Iterable[TokenSequence], path, vocab: Vocabulary) -> None:
    """Tab-separated ``line_id user day red ids`` rows under a versioned header."""
    with open(path, "w") as f:
        f.write(f"{TOKEN_FILE_HEADER} mode={vocab.mode} size={len(vocab)}\n")
        for s in seqs:
            f.write(f"{s.line_id}\t{s.user}\t{s.day}\t{int(s.red)}\t{' '.join(map(str, s.ids))}\n")


def read_tokens(path) -> list[TokenSequence]:
    with open(path) as f:
        header = f.readline()
        if not header.startswith(TOKEN_FILE_HEADER):
            raise ParseError(f"{path}: missing token file header")
        out = []
        for line in f:
            line_id, user, day, red, ids = line.rstrip("\n").split("\t")
            out.append(TokenSequence([int(i) for i in ids.split()], user, int(day), red == "1",
                                     None, int(line_id)))
    return out


# ------------------------------------------------------------- checkpoints


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(params.config), "config_hash": params.config.digest(),
            "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in params.arrays().items()}
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        tensors = {k[len("param/"):]: Tensor(z[k], requires_grad=True, name=k[len("param/"):])
                   for k in z.files if k.startswith("param/")}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    config = ModelConfig(**meta["config"])
    if config.digest() != meta["config_hash"]:
        raise ParseError(f"{path}: config hash mismatch")
    return ModelParams(config, tensors), meta.get("extra", {})


# ------------------------------------------------------------- scores / ROC

SCORE_COLUMNS = ("line_id", "user", "day", "raw_score", "centered_score", "red")


def write_scores(events: Iterable[ScoredEvent], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for e in events:
            w.writerow([e.line_id, e.user, e.day, repr(e.raw), "" if e.centered is None else repr(e.centered),
                        int(e.red)])


def read_scores(path) -> list[ScoredEvent]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [ScoredEvent(int(r["line_id"]), r["user"], int(r["day"]), float(r["raw_score"]),
                        float(r["centered_score"]) if r["centered_score"] else None, r["red"] == "1")
            for r in rows]


def write_roc(curve: RocCurve, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("fpr", "tpr", "threshold"))
        for row in zip(curve.fpr, curve.tpr, curve.thresholds):
            w.writerow([repr(float(x)) for x in row])


def write_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ------------------------------------------------------------- attention


def attention_records(vocab: Vocabulary, seqs: Sequence[TokenSequence], trace, tiered: bool = False) -> list[dict]:
    """Flatten a batch trace into one record per (line, prediction position).

    Tiered traces give one record per line with ``position`` 0.
    """
    recs = []
    for b, s in enumerate(seqs):
        labels = position_labels(vocab, s)
        if tiered:
            recs.append({"line_id": s.line_id, "day": s.day, "user": s.user, "red": s.red, "position": 0,
                         "labels": labels, "weights": trace.tiered_line(b).tolist()})
            continue
        for t, w in sorted(trace.line(b).items()):
            recs.append({"line_id": s.line_id, "day": s.day, "user": s.user, "red": s.red, "position": t,
                         "labels": labels[: len(w)], "weights": w.tolist()})
    return recs


def write_jsonl(records: Iterable[dict], path, append: bool = False) -> None:
    with open(path, "a" if append else "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def read_jsonl(path) -> Iterator[dict]:
    with open(path) as f:
        for line in f:
            if line.strip():
                yield json.loads(line)


def export_attention_summary(records: Iterable[dict], mode: str = "word") -> list[dict]:
    """Mean and std of attention weight per (predicted position, attended position).

    The first prediction position attends over nothing and is excluded. Word
    mode labels positions by field name; char mode by index.
    """
    groups: dict[tuple[int, int], list[float]] = {}
    for r in records:
        if r["position"] == 1:
            continue
        for j, w in enumerate(r["weights"]):
            groups.setdefault((r["position"], j), []).append(w)
    names = ["SOS", *WORD_FIELDS, "EOS"]

    def label(i: int) -> str:
        return names[i] if mode == "word" and i < len(names) else str(i)

    rows = []
    for (t, j), ws in sorted(groups.items()):
        arr = np.asarray(ws)
        rows.append({"predicted": label(t), "predicted_index": t, "attended": label(j), "attended_index": j,
                     "mean": float(arr.mean()), "std": float(arr.std()), "count": arr.size})
    return rows


def write_heatmap_csv(rows: Sequence[dict], path) -> None:
    cols = ("predicted_index", "predicted", "attended_index", "attended", "mean", "std", "count")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in cols})


def export_case_study(params: ModelParams, vocab: Vocabulary, seq: TokenSequence,
                      scored: ScoredEvent | None = None) -> dict:
    """Per-position view of one line: true token, argmax prediction, p(true) and d(t)."""
    if params.config.tiered or params.config.attention == "none":
        raise ValueError("case studies need an event model with attention")
    with nx.no_grad():
        res = forward_lines(params, LineBatch.from_sequences([seq]))
    probs = res.probabilities()[0]
    steps = res.trace.line(0)
    positions = []
    for t in range(1, len(seq.ids)):
        p = probs[t - 1]
        positions.append({"position": t, "true": vocab.token_of(seq.ids[t]),
                          "predicted": vocab.token_of(int(np.argmax(p))),
                          "p_true": float(p[seq.ids[t]]), "attention": steps[t].tolist()})
    rec = {"line_id": seq.line_id, "user": seq.user, "day": seq.day, "red": seq.red,
           "raw_score": float(res.nll[0]), "centered_score": None, "positions": positions}
    if scored is not None:
        rec.update(raw_score=scored.raw, centered_score=scored.centered)
    return rec
