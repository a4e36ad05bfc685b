"""LSTM event language models: EM, BEM and their tiered variants.

Token positions run 0..L-1 with SOS at 0 and EOS at L-1. ``h(j)`` is the
forward state after consuming token j. The token at position t (t >= 1) is
predicted from ``h(t-1)``; with event-model attention the head also sees an
attention vector over ``h(0..t-2)``, and the BEM adds ``h_b(t+1)`` from a
right-to-left LSTM (zero past the end). A line's loss, and its anomaly
score, is the summed negative log-likelihood of positions 1..L-1.

Tiered models keep one upper-tier LSTM state per user. Its hidden state is
concatenated onto every token embedding of the user's next line, and it is
advanced by a summary of the current line's lower-tier states.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import attention as att
from . import numerics as nx
from .numerics import Tensor
from .tokenizer import TokenSequence

ATTENTION_KINDS = ("none", "fixed", "syntax", "semantic1", "semantic2", "tiered")
CHAR_MAX_LEN = 512


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    emb_dim: int = 128
    hidden: int = 128
    attn_dim: int = 128
    upper_hidden: int = 128
    bidirectional: bool = False
    tiered: bool = False
    attention: str = "none"
    max_len: int = 11
    dtype: str = "float64"

    def __post_init__(self):
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention {self.attention!r}")
        if self.attention in att.VARIANTS and (self.tiered or self.bidirectional):
            raise ConfigError(f"{self.attention} attention is only defined for the plain EM")
        if self.attention == "tiered" and not self.tiered:
            raise ConfigError("tiered attention needs a tiered model")
        if self.attention == "semantic2" and self.hidden % 2:
            raise ConfigError("semantic2 attention needs an even hidden size")
        if min(self.vocab_size, self.emb_dim, self.hidden, self.attn_dim, self.upper_hidden, self.max_len) < 1:
            raise ConfigError("all model dimensions must be positive")

    @property
    def context_dim(self) -> int:
        return self.upper_hidden if self.tiered else 0

    @property
    def state_width(self) -> int:
        """Width of one lower-tier state row used for line summaries."""
        return self.hidden * (2 if self.bidirectional else 1)

    @property
    def attention_width(self) -> int:
        if self.attention == "semantic2":
            return self.hidden // 2
        return self.hidden if self.attention in att.VARIANTS else 0

    def digest(self) -> str:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()[:16]


class LSTMParams(NamedTuple):
    wx: Tensor  # (L_in, 4 L_h), gate blocks ordered input, forget, output, candidate
    wh: Tensor  # (L_h, 4 L_h)
    b: Tensor   # (4 L_h,)

    @property
    def hidden(self) -> int:
        return self.wh.shape[0]


def _lstm_shapes(prefix: str, n_in: int, n_h: int) -> dict[str, tuple]:
    return {f"{prefix}.wx": (n_in, 4 * n_h), f"{prefix}.wh": (n_h, 4 * n_h), f"{prefix}.b": (4 * n_h,)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    n_in = cfg.emb_dim + cfg.context_dim
    shapes = {"embed": (cfg.vocab_size, cfg.emb_dim)}
    shapes.update(_lstm_shapes("fwd", n_in, cfg.hidden))
    if cfg.bidirectional:
        shapes.update(_lstm_shapes("bwd", n_in, cfg.hidden))
    shapes["out.W"] = (cfg.hidden + cfg.attention_width, cfg.vocab_size)
    if cfg.bidirectional:
        shapes["out.Wb"] = (cfg.hidden, cfg.vocab_size)
    shapes["out.b"] = (cfg.vocab_size,)
    if cfg.attention in ("fixed", "syntax", "semantic1"):
        shapes["att.Wa"] = (cfg.hidden, cfg.attn_dim)
    if cfg.attention == "fixed":
        shapes["att.q"] = (cfg.attn_dim,)
    elif cfg.attention == "syntax":
        shapes["att.Q"] = (cfg.max_len, cfg.attn_dim)
    elif cfg.attention == "semantic1":
        shapes["att.Wsem1"] = (cfg.hidden, cfg.attn_dim)
    elif cfg.attention == "semantic2":
        half = cfg.hidden // 2
        shapes["att.Wa"] = (half, half)
    if cfg.tiered:
        if cfg.attention == "tiered":
            shapes["tier.Wtier"] = (cfg.state_width, cfg.attn_dim)
            shapes["tier.Wa"] = (cfg.state_width, cfg.attn_dim)
        shapes.update(_lstm_shapes("upper", 2 * cfg.state_width, cfg.upper_hidden))
    return shapes


class ModelParams:
    """Named learnable arrays for one model configuration."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if set(expected) != set(tensors):
            raise ConfigError(f"parameter names differ: {sorted(set(expected) ^ set(tensors))}")
        for name, shape in expected.items():
            if tensors[name].shape != tuple(shape):
                raise ConfigError(f"{name}: shape {tensors[name].shape} != {shape}")
        self.config = config
        self.tensors = tensors

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        dtype = np.dtype(config.dtype)
        tensors = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".b"):
                data = np.zeros(shape, dtype=dtype)
                if name != "out.b":
                    h = shape[0] // 4
                    data[h:2 * h] = 1.0  # forget gate
            elif len(shape) == 1:
                data = nx.glorot(rng, shape, 1, shape[0], dtype)
            else:
                data = nx.glorot(rng, shape, shape[0], shape[1], dtype)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def lstm(self, prefix: str) -> LSTMParams:
        return LSTMParams(self[f"{prefix}.wx"], self[f"{prefix}.wh"], self[f"{prefix}.b"])

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {
            k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()
        })

    def digest(self) -> str:
        h = hashlib.sha256(self.config.digest().encode())
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return h.hexdigest()


# ------------------------------------------------------------------ LSTM


def _cell(z_in: Tensor, h: Tensor, c: Tensor, p: LSTMParams) -> tuple[Tensor, Tensor]:
    n = p.hidden
    z = nx.add(z_in, nx.matmul(h, p.wh))
    s = nx.sigmoid(z[:, : 3 * n])
    g = nx.tanh(z[:, 3 * n:])
    c_new = nx.add(nx.mul(s[:, n: 2 * n], c), nx.mul(s[:, :n], g))
    h_new = nx.mul(s[:, 2 * n: 3 * n], nx.tanh(c_new))
    return h_new, c_new


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, p: LSTMParams) -> tuple[Tensor, Tensor]:
    """One standard LSTM step; accepts a single vector or a (B, L_in) batch."""
    single = x.ndim == 1
    if single:
        x = nx.reshape(x, (1, x.shape[0]))
        h_prev = nx.reshape(h_prev, (1, h_prev.shape[0]))
        c_prev = nx.reshape(c_prev, (1, c_prev.shape[0]))
    if x.shape[-1] != p.wx.shape[0] or h_prev.shape[-1] != p.hidden or c_prev.shape[-1] != p.hidden:
        raise nx.DimensionError(f"lstm_step: x {x.shape}, h {h_prev.shape} vs params {p.wx.shape}")
    h, c = _cell(nx.add(nx.matmul(x, p.wx), p.b), h_prev, c_prev, p)
    if single:
        return nx.reshape(h, (p.hidden,)), nx.reshape(c, (p.hidden,))
    return h, c


def run_lstm(inputs: Sequence[Tensor], p: LSTMParams, mask=None, reverse: bool = False,
             h0: Tensor | None = None, c0: Tensor | None = None) -> list[Tensor]:
    """Hidden states for each position (returned in position order).

    With a (B, L) ``mask`` the state is held fixed across masked positions, so
    forward runs freeze after a line ends and reverse runs stay at the initial
    state until they reach the line's last real token.
    """
    b = inputs[0].shape[0]
    zeros = np.zeros((b, p.hidden), dtype=p.wh.dtype)
    h = h0 if h0 is not None else Tensor(zeros)
    c = c0 if c0 is not None else Tensor(zeros)
    order = range(len(inputs) - 1, -1, -1) if reverse else range(len(inputs))
    out: list[Tensor | None] = [None] * len(inputs)
    for j in order:
        h_new, c_new = _cell(nx.add(nx.matmul(inputs[j], p.wx), p.b), h, c, p)
        if mask is not None and not mask[:, j].all():
            keep = mask[:, j, None]
            h_new, c_new = nx.where(keep, h_new, h), nx.where(keep, c_new, c)
        h, c = h_new, c_new
        out[j] = h
    return out


# ---------------------------------------------------------------- batches


@dataclass
class LineBatch:
    ids: np.ndarray      # (B, L) int, right-padded
    lengths: np.ndarray  # (B,)

    @classmethod
    def from_sequences(cls, seqs: Sequence[TokenSequence | Sequence[int]], pad_id: int = 0) -> "LineBatch":
        rows = [s.ids if isinstance(s, TokenSequence) else list(s) for s in seqs]
        if not rows:
            raise nx.ContractError("empty batch")
        lengths = np.array([len(r) for r in rows], dtype=np.int64)
        if lengths.min() < 2:
            raise nx.ContractError("a line needs at least SOS and one predicted token")
        ids = np.full((len(rows), lengths.max()), pad_id, dtype=np.int64)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = r
        return cls(ids, lengths)

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]

    @property
    def dense(self) -> bool:
        return bool((self.lengths == self.ids.shape[1]).all())


@dataclass
class LineOutput:
    logits: Tensor          # (B, L-1, |V|), row t-1 predicts position t
    loss: Tensor            # summed NLL over the batch
    nll: np.ndarray         # (B,) per-line NLL
    states: Tensor          # (B, L, state_width) lower-tier states for summaries
    trace: att.AttentionTrace
    batch: LineBatch

    def probabilities(self) -> np.ndarray:
        return np.exp(nx.log_softmax_data(self.logits.data))


def _inputs(m: ModelParams, batch: LineBatch, context: Tensor | None) -> list[Tensor]:
    b, n = batch.ids.shape
    xs = [nx.take(m["embed"], batch.ids[:, j]) for j in range(n)]
    if m.config.tiered:
        if context is None:
            context = Tensor(np.zeros((b, m.config.context_dim), dtype=m["embed"].dtype))
        if context.shape != (b, m.config.context_dim):
            raise nx.DimensionError(f"context {context.shape} != {(b, m.config.context_dim)}")
        xs = [nx.concat([x, context], axis=-1) for x in xs]
    elif context is not None:
        raise ConfigError("context vector given to a non-tiered model")
    return xs


def _em_attention(m: ModelParams, hs: list[Tensor], trace: att.AttentionTrace | None) -> Tensor:
    """Attention vectors for predictions t = 1..L-1, stacked to (B, L-1, width)."""
    kind = m.config.attention
    if kind == "semantic2":
        halves = [att.split_semantic2(h) for h in hs]
        values, queries = [v for v, _ in halves], [q for _, q in halves]
    else:
        values = hs
        if kind == "semantic1":
            queries = [att.query_semantic1(h, m["att.Wsem1"]) for h in hs[:-1]]
    key_rows = [att.keys(v, m["att.Wa"]) for v in values[:-2]]
    b = hs[0].shape[0]
    out = [Tensor(np.zeros((b, values[0].shape[-1]), dtype=hs[0].dtype))]
    if trace is not None:
        trace.steps[1] = np.zeros((b, 0))  # nothing to attend over yet
    for t in range(2, len(hs)):
        if kind == "fixed":
            q = att.query_fixed(m.tensors)
        elif kind == "syntax":
            q = att.query_syntax(m.tensors, t)
        else:
            q = queries[t - 1]
        a, d = att.attend_keys(nx.stack(values[: t - 1], axis=1), nx.stack(key_rows[: t - 1], axis=1), q)
        if trace is not None:
            trace.steps[t] = d.data
        out.append(a)
    return nx.stack(out, axis=1)


def forward_lines(m: ModelParams, batch: LineBatch, context: Tensor | None = None,
                  use_backward: bool | None = None, capture: bool = True) -> LineOutput:
    """Run the lower-tier model over a batch of lines."""
    cfg = m.config
    b, n = batch.ids.shape
    if n < 2:
        raise nx.ContractError("a line needs at least one predicted token")
    if batch.ids.max() >= cfg.vocab_size or batch.ids.min() < 0:
        raise IndexError("token id outside the vocabulary")
    if cfg.attention == "syntax" and n - 1 > cfg.max_len:
        raise att.RangeError(f"line predicts {n - 1} positions, syntax table has {cfg.max_len}")
    if use_backward is None:
        use_backward = cfg.bidirectional
    if use_backward and not cfg.bidirectional:
        raise ConfigError("model has no backward LSTM parameters")

    mask = None if batch.dense else batch.mask
    xs = _inputs(m, batch, context)
    hs = run_lstm(xs, m.lstm("fwd"), mask)
    trace = att.AttentionTrace(batch.lengths.copy())
    feats = nx.stack(hs[:-1], axis=1)
    if cfg.attention in att.VARIANTS:
        feats = nx.concat([feats, _em_attention(m, hs, trace if capture else None)], axis=-1)
    logits = nx.matmul(feats, m["out.W"])
    states = nx.stack(hs, axis=1)
    if use_backward:
        hb = run_lstm(xs, m.lstm("bwd"), mask, reverse=True)
        after = hb[2:] + [Tensor(np.zeros((b, cfg.hidden), dtype=hs[0].dtype))]
        logits = nx.add(logits, nx.matmul(nx.stack(after, axis=1), m["out.Wb"]))
        states = nx.concat([states, nx.stack(hb, axis=1)], axis=-1)
    logits = nx.add(logits, m["out.b"])

    targets = batch.ids[:, 1:]
    tmask = batch.mask[:, 1:]
    loss = nx.cross_entropy(logits, targets, tmask)
    logp = nx.log_softmax_data(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    nll = -np.where(tmask, picked, 0.0).sum(axis=1)
    return LineOutput(logits, loss, nll, states, trace, batch)


def _single(seq) -> LineBatch:
    return LineBatch.from_sequences([seq])


def em_forward(seq: TokenSequence, m: ModelParams, context: Tensor | None = None):
    """Forward-only event model on one line.

    Returns per-position distributions (row t-1 predicts position t), the
    scalar loss tensor and the attention trace.
    """
    out = forward_lines(m, _single(seq), context=None if context is None else nx.reshape(context, (1, -1)),
                        use_backward=False)
    return out.probabilities()[0], out.loss, out.trace


def bem_forward(seq: TokenSequence, m: ModelParams, context: Tensor | None = None):
    if not m.config.bidirectional:
        raise ConfigError("bem_forward needs backward LSTM parameters")
    out = forward_lines(m, _single(seq), context=None if context is None else nx.reshape(context, (1, -1)),
                        use_backward=True)
    return out.probabilities()[0], out.loss


# ------------------------------------------------------------------ tiers


def line_summary(states: Tensor, mode: str = "mean", lengths=None, m: ModelParams | None = None,
                 trace: att.AttentionTrace | None = None) -> Tensor:
    """Upper-tier input for a batch of lines: [mean or attention ; final state].

    states: (B, T, Lk) or a single line's (T, Lk).
    """
    if states.ndim == 2:
        out = line_summary(nx.expand_dims(states, 0), mode, None, m, trace)
        return nx.reshape(out, (out.shape[-1],))
    b, n, _ = states.shape
    lengths = np.full(b, n) if lengths is None else np.asarray(lengths)
    dense = bool((lengths == n).all())
    mask = np.arange(n)[None, :] < lengths[:, None]
    final = states[:, n - 1] if dense else nx.index(states, (np.arange(b), lengths - 1))
    if mode == "mean":
        if dense:
            pooled = nx.reduce_mean(states, axis=1)
        else:
            total = nx.reduce_sum(nx.where(mask[..., None], states, 0.0), axis=1)
            pooled = nx.mul(total, (1.0 / lengths)[:, None])
    elif mode == "attention":
        pooled, d = att.tiered_attention(states, final, m["tier.Wtier"], m["tier.Wa"],
                                         None if dense else mask)
        if trace is not None:
            trace.tiered = d.data
    else:
        raise ValueError(f"unknown summary mode {mode!r}")
    return nx.concat([pooled, final], axis=-1)


@dataclass
class UserContext:
    user: str
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def fresh(cls, user: str, size: int, dtype="float64") -> "UserContext":
        return cls(user, np.zeros(size, dtype=dtype), np.zeros(size, dtype=dtype))


def tiered_step(summary: Tensor, ctx: UserContext, upper: LSTMParams, user: str | None = None):
    """Advance one user's upper tier; the new hidden state is the next line's context."""
    if user is not None and user != ctx.user:
        raise nx.ContractError(f"context belongs to {ctx.user!r}, line to {user!r}")
    h, c = lstm_step(summary, Tensor(ctx.h), Tensor(ctx.c), upper)
    return h, UserContext(ctx.user, h.data.copy(), c.data.copy())


def summary_mode(cfg: ModelConfig) -> str:
    return "attention" if cfg.attention == "tiered" else "mean"


@dataclass
class TieredOutput:
    loss: Tensor
    nll: list[np.ndarray]          # per stream, one value per line
    states: list[tuple[np.ndarray, np.ndarray]]
    lines: list[list[tuple[LineOutput, int]]]  # per stream: (batch output, row) per line


def tiered_forward(m: ModelParams, streams: Sequence[Sequence[TokenSequence]],
                   contexts: Sequence[UserContext], capture: bool = False) -> TieredOutput:
    """Run several users' line streams through both tiers.

    Streams advance in lockstep: step i feeds line i of every stream that has
    one. Gradients flow through the upper tier across the whole window; the
    starting contexts are treated as constants.
    """
    cfg = m.config
    if not cfg.tiered:
        raise ConfigError("tiered_forward needs a tiered model")
    if len(streams) != len(contexts):
        raise nx.ContractError("one context per stream")
    for s, ctx in zip(streams, contexts):
        if any(seq.user != ctx.user for seq in s):
            raise nx.ContractError(f"stream contains lines not owned by {ctx.user!r}")
    order = sorted(range(len(streams)), key=lambda k: -len(streams[k]))
    h = Tensor(np.stack([contexts[k].h for k in order]))
    c = Tensor(np.stack([contexts[k].c for k in order]))
    upper = m.lstm("upper")
    mode = summary_mode(cfg)
    nll = [np.zeros(len(s)) for s in streams]
    lines: list[list] = [[] for _ in streams]
    total = None
    for i in range(len(streams[order[0]]) if streams else 0):
        n = sum(1 for k in order if len(streams[k]) > i)
        batch = LineBatch.from_sequences([streams[k][i] for k in order[:n]])
        h_act, c_act = (h, c) if n == len(order) else (h[:n], c[:n])
        out = forward_lines(m, batch, context=h_act, capture=capture)
        summary = line_summary(out.states, mode, batch.lengths, m, out.trace if capture else None)
        h_new, c_new = _cell(nx.add(nx.matmul(summary, upper.wx), upper.b), h_act, c_act, upper)
        if n < len(order):
            h_new, c_new = nx.concat([h_new, h[n:]], axis=0), nx.concat([c_new, c[n:]], axis=0)
        h, c = h_new, c_new
        total = out.loss if total is None else nx.add(total, out.loss)
        for row, k in enumerate(order[:n]):
            nll[k][i] = out.nll[row]
            if capture:
                lines[k].append((out, row))
    if total is None:
        total = Tensor(np.zeros(()))
    states = [None] * len(streams)
    for row, k in enumerate(order):
        states[k] = (h.data[row].copy(), c.data[row].copy())
    return TieredOutput(total, nll, states, lines)
