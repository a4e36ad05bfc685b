"""Dot-product attention over LSTM hidden states.

Keys are ``tanh(V @ W_a)``, weights ``d = softmax(q . K)`` and the attention
vector ``a = d @ V``. The event-model variants differ only in where the query
comes from: a single learned vector (fixed), a learned vector per prediction
position (syntax), a projection of the current hidden state (semantic1), or
the second half of the hidden state itself (semantic2). Tiered attention
replaces the mean of a line's hidden states with a weighted average whose
query comes from the line's final state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor

VARIANTS = ("fixed", "syntax", "semantic1", "semantic2")


class RangeError(IndexError):
    pass


class ConfigError(ValueError):
    pass


def keys(values: Tensor, w_keys: Tensor) -> Tensor:
    """``tanh(values @ w_keys)``; values may carry any leading batch axes."""
    return nx.tanh(nx.matmul(values, w_keys))


def attend_keys(values: Tensor, key_rows: Tensor, query: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """Attention with precomputed keys.

    values: (B, n, Lv); key_rows: (B, n, La); query: (B, La) or (La,).
    Returns a: (B, Lv) and d: (B, n).
    """
    b, n = values.shape[0], values.shape[1]
    if n < 1:
        raise nx.DimensionError("attention over zero value rows")
    la = key_rows.shape[-1]
    q = nx.reshape(query, (la, 1)) if query.ndim == 1 else nx.reshape(query, (b, la, 1))
    scores = nx.reshape(nx.matmul(key_rows, q), (b, n))
    d = nx.softmax(scores, axis=-1, mask=mask)
    a = nx.reshape(nx.matmul(nx.reshape(d, (b, 1, n)), values), (b, values.shape[-1]))
    return a, d


def attend(values: Tensor, query: Tensor, w_keys: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """Single-query attention. Accepts an unbatched ``values`` of shape (n, Lv)."""
    if values.ndim == 2:
        q = query if query.ndim == 1 else nx.reshape(query, (query.shape[-1],))
        a, d = attend_keys(nx.expand_dims(values, 0), nx.expand_dims(keys(values, w_keys), 0), q,
                           None if mask is None else np.asarray(mask)[None])
        return nx.reshape(a, (values.shape[-1],)), nx.reshape(d, (values.shape[0],))
    return attend_keys(values, keys(values, w_keys), query, mask)


def query_fixed(params: dict[str, Tensor]) -> Tensor:
    return params["att.q"]


def query_syntax(params: dict[str, Tensor], t: int) -> Tensor:
    """Learned query for prediction position ``t`` (1-based)."""
    table = params["att.Q"]
    if not 1 <= t <= table.shape[0]:
        raise RangeError(f"position {t} outside syntax query table of {table.shape[0]} rows")
    return table[t - 1]


def query_semantic1(hidden: Tensor, w_sem1: Tensor) -> Tensor:
    """``tanh(hidden @ w_sem1)`` for a single state (Lh,) or a batch (..., Lh)."""
    if hidden.ndim == 1:
        row = nx.reshape(hidden, (1, hidden.shape[0]))
        return nx.reshape(nx.tanh(nx.matmul(row, w_sem1)), (w_sem1.shape[1],))
    return nx.tanh(nx.matmul(hidden, w_sem1))


def split_semantic2(hidden: Tensor) -> tuple[Tensor, Tensor]:
    """Split the last axis into value half and query half."""
    width = hidden.shape[-1]
    if width % 2:
        raise ConfigError(f"semantic2 needs an even hidden size, got {width}")
    half = width // 2
    return hidden[..., :half], hidden[..., half:]


def tiered_attention(values: Tensor, final: Tensor, w_tier: Tensor, w_keys: Tensor, mask=None):
    """Weighted summary of a line's hidden states.

    values: (B, T, Lk); final: (B, Lk). ``w_tier`` is (Lk, La) and ``w_keys``
    is stored as (Lk, La) so both the query and the keys live in R^La.
    """
    q = nx.tanh(nx.matmul(final, w_tier))
    return attend_keys(values, keys(values, w_keys), q, mask)


@dataclass
class AttentionTrace:
    """Captured weight vectors for one batch of lines.

    ``steps`` maps prediction position t to a (B, t-1) array for event-model
    attention; ``tiered`` holds a (B, L) array for tiered attention.
    ``lengths`` is each line's token count including SOS/EOS.
    """

    lengths: np.ndarray
    steps: dict[int, np.ndarray] = field(default_factory=dict)
    tiered: np.ndarray | None = None

    def line(self, b: int) -> dict[int, np.ndarray]:
        """Weights for one line keyed by prediction position; padded steps dropped."""
        n = int(self.lengths[b])
        return {t: w[b] for t, w in self.steps.items() if t < n}

    def tiered_line(self, b: int) -> np.ndarray:
        return self.tiered[b, : int(self.lengths[b])]
