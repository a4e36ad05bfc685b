"""Central finite-difference gradient checker shared by unit and acceptance tests.

Each parameter tensor is probed at a seeded random subset of coordinates
plus along a few random global directions. The relative error is
``|a - n| / max(|a|, |n|, FLOOR)``: below FLOOR in magnitude a gradient is
compared in absolute terms, since float64 round-off in the loss difference
alone is about 1e-11 * |loss| / step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from logattn import numerics as nx
from logattn.model import LineBatch, ModelConfig, ModelParams, UserContext, forward_lines, tiered_forward
from logattn.tokenizer import TokenSequence

STEP = 1e-5
FLOOR = 1e-4
TOY = dict(vocab_size=12, emb_dim=6, hidden=8, attn_dim=4, upper_hidden=8, max_len=6)

VARIANTS = {
    "EM": dict(),
    "BEM": dict(bidirectional=True),
    "EM+fixed": dict(attention="fixed"),
    "EM+syntax": dict(attention="syntax"),
    "EM+semantic1": dict(attention="semantic1"),
    "EM+semantic2": dict(attention="semantic2"),
    "T-EM": dict(tiered=True),
    "TA-EM": dict(tiered=True, attention="tiered"),
    "TA-BEM": dict(tiered=True, bidirectional=True, attention="tiered"),
}


@dataclass
class GradReport:
    worst: float
    where: tuple
    n_checked: int

    @property
    def ok(self) -> bool:
        return self.worst <= 1e-4


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), FLOOR)


def _line(rng, length: int, user: str) -> TokenSequence:
    # ids 0..2 are OOV/SOS/EOS; interior tokens include OOV
    return TokenSequence([1] + [int(i) for i in rng.integers(0, 12, length - 2)] + [2], user, 0)


def toy_problem(name: str, seed: int = 0, length: int = 6):
    """Model and a zero-argument loss closure for one variant at toy sizes."""
    cfg = ModelConfig(**TOY, **VARIANTS[name])
    m = ModelParams.initialize(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for t in m.tensors.values():  # move biases off their special init values
        t.data = t.data + rng.normal(0, 0.1, t.shape)
    if cfg.tiered:
        streams = [[_line(rng, length, "a"), _line(rng, length, "a")], [_line(rng, length - 2, "b")]]
        ctxs = [UserContext("a", rng.normal(0, 0.5, 8), rng.normal(0, 0.5, 8)),
                UserContext("b", rng.normal(0, 0.5, 8), rng.normal(0, 0.5, 8))]
        return m, lambda: tiered_forward(m, streams, ctxs).loss
    batch = LineBatch.from_sequences([_line(rng, length, "a"), _line(rng, length - 2, "a")])
    return m, lambda: forward_lines(m, batch, capture=False).loss


def check(m: ModelParams, loss_fn, k: int = 20, n_dirs: int = 3, seed: int = 0) -> GradReport:
    grads = nx.backward(loss_fn())
    rng = np.random.default_rng(seed)

    def value() -> float:
        with nx.no_grad():
            return float(loss_fn().data)

    worst, where, count = 0.0, None, 0
    for name, t in m.tensors.items():
        g = grads.get(t, np.zeros_like(t.data)).reshape(-1)
        flat = t.data.reshape(-1)
        for i in rng.choice(flat.size, min(k, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + STEP
            up = value()
            flat[i] = orig - STEP
            down = value()
            flat[i] = orig
            num = (up - down) / (2 * STEP)
            e = rel_err(g[i], num)
            count += 1
            if e >= worst:
                worst, where = e, (name, int(i), float(g[i]), num)
    originals = {k_: t.data.copy() for k_, t in m.tensors.items()}
    for _ in range(n_dirs):
        dirs = {k_: rng.normal(size=t.shape) for k_, t in m.tensors.items()}
        norm = np.sqrt(sum(np.sum(d * d) for d in dirs.values()))
        analytic = sum(float(np.sum(grads.get(t, 0.0) * dirs[k_])) for k_, t in m.tensors.items()) / norm
        vals = []
        for sign in (1, -1):
            for k_, t in m.tensors.items():
                t.data = originals[k_] + sign * STEP * dirs[k_] / norm
            vals.append(value())
        for k_, t in m.tensors.items():
            t.data = originals[k_].copy()
        num = (vals[0] - vals[1]) / (2 * STEP)
        e = rel_err(analytic, num)
        count += 1
        if e >= worst:
            worst, where = e, ("direction", -1, analytic, num)
    return GradReport(worst, where, count)
