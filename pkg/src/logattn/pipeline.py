"""Online day-cycle training, anomaly scoring, score centering and ROC/AUC.

Each day: score every line with the frozen evaluation copy of the
parameters, then train the live copy on the same lines for one epoch, then
drop the day's data and copy the live parameters over the frozen ones. The
first day is training only.
"""

from __future__ import annotations

import itertools
import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import numerics as nx
from .model import LineBatch, ModelConfig, ModelParams, UserContext, forward_lines, tiered_forward
from .tokenizer import (DEFAULT_MACHINE_PATTERN, RawEvent, TokenSequence, Vocabulary, build_vocab,
                        char_vocab, is_machine_event, tokenize)

log = logging.getLogger(__name__)


class ScoringError(ArithmeticError):
    def __init__(self, line_id: int, message: str = "non-finite forward pass"):
        super().__init__(f"line {line_id}: {message}")
        self.line_id = line_id


class SequencingError(ValueError):
    pass


class UndefinedAUCError(ValueError):
    pass


@dataclass
class ScoredEvent:
    line_id: int
    user: str
    day: int
    raw: float
    centered: float | None = None
    red: bool = False

    @property
    def score(self) -> float:
        """Detection statistic: centered score when available, raw otherwise."""
        return self.raw if self.centered is None else self.centered


# ----------------------------------------------------------------- scoring


def _nll_batch(params: ModelParams, seqs: Sequence[TokenSequence]) -> np.ndarray:
    with nx.no_grad():
        try:
            return forward_lines(params, LineBatch.from_sequences(seqs), capture=False).nll
        except nx.NumericError:
            if len(seqs) == 1:
                raise ScoringError(seqs[0].line_id) from None
    for s in seqs:  # locate the offending line
        _nll_batch(params, [s])
    raise ScoringError(seqs[0].line_id)


def score_line(seq: TokenSequence, params: ModelParams, context: UserContext | None = None) -> float:
    """Summed NLL of a line's predictions (interior tokens and EOS)."""
    if params.config.tiered:
        ctx = context or UserContext.fresh(seq.user, params.config.upper_hidden, params.config.dtype)
        with nx.no_grad():
            try:
                return float(tiered_forward(params, [[seq]], [ctx]).nll[0][0])
            except nx.NumericError:
                raise ScoringError(seq.line_id) from None
    return float(_nll_batch(params, [seq])[0])


def score_lines(params: ModelParams, seqs: Sequence[TokenSequence], batch_size: int = 64,
                workers: int = 1) -> np.ndarray:
    """Raw scores for independent lines (non-tiered models)."""
    if params.config.tiered:
        raise ValueError("tiered models are scored per user stream; use score_streams")
    chunks = [seqs[i:i + batch_size] for i in range(0, len(seqs), batch_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda c: _nll_batch(params, c), chunks))
    else:
        parts = [_nll_batch(params, c) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0)


def group_by_user(seqs: Sequence[TokenSequence]) -> dict[str, list[int]]:
    """Indices of each user's lines, users in order of first appearance."""
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(seqs):
        groups.setdefault(s.user, []).append(i)
    return groups


def score_streams(params: ModelParams, seqs: Sequence[TokenSequence], contexts: dict[str, UserContext],
                  batch_size: int = 64) -> np.ndarray:
    """Raw scores for a tiered model; each user's context advances line by line.

    ``contexts`` is read, never modified.
    """
    cfg = params.config
    groups = group_by_user(seqs)
    users = list(groups)
    scores = np.zeros(len(seqs))
    for start in range(0, len(users), batch_size):
        chunk = users[start:start + batch_size]
        streams = [[seqs[i] for i in groups[u]] for u in chunk]
        ctxs = [contexts.get(u) or UserContext.fresh(u, cfg.upper_hidden, cfg.dtype) for u in chunk]
        with nx.no_grad():
            try:
                out = tiered_forward(params, streams, ctxs)
            except nx.NumericError:
                raise ScoringError(streams[0][0].line_id) from None
        for u, nll in zip(chunk, out.nll):
            scores[groups[u]] = nll
    return scores


def center_user_scores(events: Sequence[ScoredEvent]) -> list[ScoredEvent]:
    """Subtract each (user, day) group's mean raw score."""
    groups: dict[tuple[str, int], list[int]] = {}
    for i, e in enumerate(events):
        groups.setdefault((e.user, e.day), []).append(i)
    out = list(events)
    for idx in groups.values():
        raw = np.array([events[i].raw for i in idx])
        centered = raw - raw.mean()
        for i, c in zip(idx, centered):
            e = events[i]
            out[i] = ScoredEvent(e.line_id, e.user, e.day, e.raw, float(c), e.red)
    return out


# --------------------------------------------------------------------- ROC


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def auc_roc(scores, labels=None) -> RocCurve:
    """ROC by sweeping a threshold down through the distinct scores.

    Tied scores move as one block, so the trapezoid area equals
    P(pos > neg) + P(pos == neg) / 2. ``scores`` may also be a sequence of
    ScoredEvents, in which case labels come from their red flags.
    """
    if labels is None:
        labels = [e.red for e in scores]
        scores = [e.score for e in scores]
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs at least one positive and one negative")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    # integer trapezoid sum keeps the area exact up to one final division
    area = np.sum(np.diff(fp) * (tp[1:] + tp[:-1])) + fp[0] * tp[0]
    auc = float(area) / (2.0 * n_pos * n_neg)
    return RocCurve(fpr, tpr, np.r_[np.inf, s[last]], auc)


# --------------------------------------------------------------- day cycle


@dataclass
class TrainSettings:
    lr: float = 0.01
    batch_size: int = 64
    clip: float = 5.0
    window: int = 3
    epochs: int = 1
    center: bool = True
    workers: int = 1
    concurrent: bool = False


@dataclass
class DayCycleState:
    eval_params: ModelParams
    train_params: ModelParams
    adam: nx.AdamState
    day: int | None = None
    contexts: dict[str, UserContext] = field(default_factory=dict)
    updates: int = 0

    @classmethod
    def create(cls, params: ModelParams, lr: float = 0.01) -> "DayCycleState":
        return cls(params.copy(), params, nx.AdamState(lr=lr))


def _apply_update(params: ModelParams, loss: nx.Tensor, adam: nx.AdamState, clip: float) -> float:
    grads = nx.backward(loss)
    named = {name: grads[t] for name, t in params.tensors.items() if t in grads}
    named, norm = nx.clip_global_norm(named, clip)
    nx.adam_step(params.tensors, named, adam)
    return norm


def train_lines(state: DayCycleState, seqs: Sequence[TokenSequence], settings: TrainSettings) -> None:
    """One pass of minibatch training for a non-tiered model, in stream order."""
    params = state.train_params
    for start in range(0, len(seqs), settings.batch_size):
        chunk = seqs[start:start + settings.batch_size]
        out = forward_lines(params, LineBatch.from_sequences(chunk), capture=False)
        _apply_update(params, nx.mul(out.loss, 1.0 / len(chunk)), state.adam, settings.clip)
        state.updates += 1


def train_streams(state: DayCycleState, seqs: Sequence[TokenSequence], settings: TrainSettings) -> None:
    """Tiered training on windows of consecutive lines per user.

    Update k takes window k of up to ``batch_size`` users; the upper-tier
    state is carried, detached, from one window to the next.
    """
    params = state.train_params
    cfg = params.config
    groups = group_by_user(seqs)
    windows = {u: [idx[i:i + settings.window] for i in range(0, len(idx), settings.window)]
               for u, idx in groups.items()}
    for k in range(max((len(w) for w in windows.values()), default=0)):
        users = [u for u, w in windows.items() if len(w) > k]
        for start in range(0, len(users), settings.batch_size):
            chunk = users[start:start + settings.batch_size]
            streams = [[seqs[i] for i in windows[u][k]] for u in chunk]
            ctxs = [state.contexts.get(u) or UserContext.fresh(u, cfg.upper_hidden, cfg.dtype) for u in chunk]
            out = tiered_forward(params, streams, ctxs)
            n_lines = sum(len(s) for s in streams)
            _apply_update(params, nx.mul(out.loss, 1.0 / n_lines), state.adam, settings.clip)
            state.updates += 1
            for u, (h, c) in zip(chunk, out.states):
                state.contexts[u] = UserContext(u, h, c)


def _score_day(state: DayCycleState, seqs, contexts, settings: TrainSettings) -> np.ndarray:
    if state.eval_params.config.tiered:
        return score_streams(state.eval_params, seqs, contexts, settings.batch_size)
    return score_lines(state.eval_params, seqs, settings.batch_size, settings.workers)


def run_day_cycle(seqs: Sequence[TokenSequence], state: DayCycleState, settings: TrainSettings | None = None,
                  train: bool = True, center: bool | None = None) -> tuple[list[ScoredEvent], DayCycleState]:
    """Score a day with the frozen copy, train the live copy, then sync.

    The first day processed is training only and returns no scores.
    """
    settings = settings or TrainSettings()
    days = {s.day for s in seqs}
    if len(days) > 1:
        raise SequencingError(f"events from several days in one cycle: {sorted(days)}")
    if not days:
        return [], state
    day = days.pop()
    if state.day is not None and day <= state.day:
        raise SequencingError(f"day {day} arrives after day {state.day}")
    first = state.day is None
    snapshot = dict(state.contexts)
    trainer = train_streams if state.train_params.config.tiered else train_lines

    def phase_train():
        if train:
            for _ in range(settings.epochs):
                trainer(state, seqs, settings)

    scores = None
    if first:
        phase_train()
    elif settings.concurrent:
        with ThreadPoolExecutor(2) as pool:
            scoring = pool.submit(_score_day, state, seqs, snapshot, settings)
            pool.submit(phase_train).result()
            scores = scoring.result()
    else:
        scores = _score_day(state, seqs, snapshot, settings)
        phase_train()

    state.eval_params = state.train_params.copy()
    state.day = day
    if scores is None:
        return [], state
    events = [ScoredEvent(s.line_id, s.user, s.day, float(z), None, s.red) for s, z in zip(seqs, scores)]
    if settings.center if center is None else center:
        events = center_user_scores(events)
    return events, state


# ------------------------------------------------------------- stream runner


@dataclass
class RunSettings:
    model: dict = field(default_factory=dict)   # ModelConfig fields other than vocab_size
    train: TrainSettings = field(default_factory=TrainSettings)
    tokenization: str = "word"
    vocab_threshold: int = 40
    machine_pattern: object = DEFAULT_MACHINE_PATTERN
    seed: int = 0


class OnlineRunner:
    """Drive day cycles over a time-ordered event stream.

    Only the current day's events are held in memory; ``peak_retained``
    records the largest number held at once.
    """

    def __init__(self, settings: RunSettings, vocab: Vocabulary | None = None, params: ModelParams | None = None,
                 on_day: Callable | None = None):
        self.settings = settings
        self.vocab = vocab
        self.state = None if params is None else DayCycleState.create(params, settings.train.lr)
        self.on_day = on_day
        self.peak_retained = 0
        self.retained = 0
        self.n_lines = 0

    def _model_config(self) -> ModelConfig:
        kw = dict(self.settings.model)
        if self.settings.tokenization == "char":
            kw.setdefault("max_len", 512)
        return ModelConfig(vocab_size=len(self.vocab), **kw)

    def days(self, events: Iterable[RawEvent]) -> Iterator[tuple[int, list[RawEvent]]]:
        kept = (e for e in events if not is_machine_event(e, self.settings.machine_pattern))
        last = None
        for day, group in itertools.groupby(kept, key=lambda e: e.day):
            if last is not None and day <= last:
                raise SequencingError(f"day {day} follows day {last}; input must be time ordered")
            last = day
            yield day, list(group)

    def run(self, events: Iterable[RawEvent]) -> Iterator[list[ScoredEvent]]:
        """Yield each day's scored events (empty for the first, training-only day)."""
        for day, raw in self.days(events):
            self.retained = len(raw)
            self.peak_retained = max(self.peak_retained, self.retained)
            if self.vocab is None:
                self.vocab = (build_vocab(raw, self.settings.vocab_threshold)
                              if self.settings.tokenization == "word" else char_vocab())
            if self.state is None:
                params = ModelParams.initialize(self._model_config(), self.settings.seed)
                self.state = DayCycleState.create(params, self.settings.train.lr)
            seqs = [tokenize(e, self.vocab, self.n_lines + i) for i, e in enumerate(raw)]
            self.n_lines += len(raw)
            center = self.settings.train.center and self.settings.tokenization == "word"
            scored, self.state = run_day_cycle(seqs, self.state, self.settings.train, center=center)
            log.info("day %d: %d lines, %d scored, %d updates", day, len(seqs), len(scored), self.state.updates)
            if self.on_day is not None:
                self.on_day(day, seqs, scored, self.state)
            del raw, seqs
            self.retained = 0
            yield scored


def evaluate(scored: Sequence[ScoredEvent]) -> RocCurve:
    return auc_roc(scored)


@dataclass
class AucSummary:
    aucs: list[float]

    @property
    def mean(self) -> float:
        return statistics.fmean(self.aucs)

    @property
    def max(self) -> float:
        return max(self.aucs)

    @property
    def min(self) -> float:
        return min(self.aucs)

    @property
    def std(self) -> float:
        return statistics.pstdev(self.aucs)

    def as_dict(self) -> dict:
        return {"n_runs": len(self.aucs), "mean": self.mean, "max": self.max, "min": self.min,
                "std": self.std, "runs": list(self.aucs)}

    def table_row(self, name: str) -> str:
        return f"{name:<12} {self.mean:.3f} {self.max:.3f} {self.min:.3f} {self.std:.3f}"


def run_once(settings: RunSettings, events: Iterable[RawEvent]) -> list[ScoredEvent]:
    runner = OnlineRunner(settings)
    return [e for day in runner.run(events) for e in day]


def repeat_runs(settings: RunSettings, events_factory: Callable[[], Iterable[RawEvent]], n_seeds: int = 5,
                seeds: Sequence[int] | None = None) -> AucSummary:
    """Repeat the full train/score/evaluate cycle with different initial weights."""
    seeds = list(seeds) if seeds is not None else [settings.seed + i for i in range(n_seeds)]
    if len(seeds) < 2:
        raise ValueError("repeat_runs needs at least two seeds")
    aucs = []
    for seed in seeds:
        run = RunSettings(settings.model, settings.train, settings.tokenization, settings.vocab_threshold,
                          settings.machine_pattern, seed)
        aucs.append(evaluate(run_once(run, events_factory())).auc)
        log.info("seed %d: auc %.4f", seed, aucs[-1])
    return AucSummary(aucs)
