"""Sentinel-gated pointer over recent hidden states: query, window attention, gate and loss.

All functions work on batched arrays: a window holds, for each of the ``B``
streams, up to ``L`` final-layer hidden states ``[B, H]`` paired with the
token ids ``[B]`` that were input at those positions.
"""
from __future__ import annotations

import collections
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DiffValue
from .recurrent import ModelParams, vocab_distribution

UNDERFLOW_FLOOR = 1e-30

counters: collections.Counter = collections.Counter()


class PointerWindow:
    """The last ``capacity`` (hidden, token) pairs, oldest first."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("window capacity must be non-negative")
        self.capacity = capacity
        self.entries: collections.deque = collections.deque(maxlen=capacity or None)

    def push(self, hidden, tokens) -> None:
        if self.capacity == 0:
            return
        self.entries.append((nx.constant(hidden), np.asarray(tokens)))

    def __len__(self):
        return len(self.entries)

    def hiddens(self) -> list[DiffValue]:
        return [h for h, _ in self.entries]

    def tokens(self) -> np.ndarray:
        """[B, n] token ids (n may be 0)."""
        if not self.entries:
            return None
        return np.stack([t for _, t in self.entries], axis=-1)

    @classmethod
    def from_lists(cls, hiddens, tokens, capacity: int | None = None) -> "PointerWindow":
        window = cls(len(hiddens) if capacity is None else capacity)
        for h, t in zip(hiddens, tokens):
            window.push(h, t)
        return window


@dataclass
class MixtureOutput:
    a: DiffValue  # [B, n + 1], sentinel last
    g: DiffValue  # [B]
    p_vocab: DiffValue  # [B, V]
    p: DiffValue  # [B, V]
    tokens: np.ndarray  # [B, n]


def compute_query(h_last, W, b) -> DiffValue:
    """q = tanh(W h + b)."""
    return nx.tanh(nx.linear(h_last, W) + b)


def _window_tokens(window: PointerWindow, batch: int) -> np.ndarray:
    toks = window.tokens()
    return np.zeros((batch, 0), dtype=np.int64) if toks is None else toks


def attention_scores(q, window: PointerWindow, s) -> DiffValue:
    """softmax([q.h_1, ..., q.h_n, q.s]) per stream; an empty window gives [1]."""
    q = nx.constant(q)
    batch, H = q.data.shape
    sentinel = nx.inner(q, s)  # [B]
    if len(window):
        hs = nx.stack(window.hiddens(), axis=1)  # [B, n, H]
        z = nx.inner(nx.getitem(q, (slice(None), None, slice(None))), hs)
    else:
        z = nx.constant(np.zeros((batch, 0), dtype=q.data.dtype))
    return nx.softmax(nx.concat_scalar(z, sentinel))


def gate(a) -> DiffValue:
    return nx.getitem(a, (Ellipsis, -1))


def raw_pointer_mass(a, tokens: np.ndarray, vocab_size: int) -> DiffValue:
    """Word-level pointer mass: attention summed over positions holding each word."""
    a_win = nx.getitem(a, (Ellipsis, slice(None, -1)))
    return nx.scatter_sum(a_win, tokens, vocab_size)


def pointer_distribution(a, tokens: np.ndarray, vocab_size: int):
    """(p_ptr, g) with p_ptr = raw mass / (1 - g).

    Undefined when g == 1 (empty window or saturated sentinel); the mixture and
    loss never divide and should be preferred.
    """
    a = nx.constant(a)
    g = a.data[..., -1]
    if np.any(g >= 1.0):
        raise ZeroDivisionError("pointer distribution undefined when the gate is 1")
    mass = raw_pointer_mass(a, tokens, vocab_size).data
    return mass / (1.0 - g)[..., None], g


def mixture(p_vocab, a, tokens: np.ndarray) -> DiffValue:
    """p(w) = g p_vocab(w) + sum of window attention on w (division free)."""
    p_vocab = nx.constant(p_vocab)
    g = gate(a)
    gated = nx.mul(p_vocab, nx.getitem(g, (Ellipsis, None)))
    return gated + raw_pointer_mass(a, tokens, p_vocab.data.shape[-1])


def target_mass(a, tokens: np.ndarray, target: np.ndarray) -> DiffValue:
    """Attention on window positions holding the target word, per stream."""
    a_win = nx.getitem(a, (Ellipsis, slice(None, -1)))
    match = (tokens == np.asarray(target)[:, None]).astype(nx.constant(a).data.dtype)
    return nx.sum_(a_win * match, axis=-1)


def _neg_log(x) -> DiffValue:
    x = nx.constant(x)
    low = x.data <= UNDERFLOW_FLOOR
    if np.any(low):
        counters["underflow"] += int(low.sum())
    return nx.mul(nx.log(nx.clamp_min(x, UNDERFLOW_FLOOR)), -1.0)


def token_losses(p_vocab, a, tokens: np.ndarray, target, aux_pointer_loss: bool = False) -> DiffValue:
    """Per-stream cross entropy of the mixed probability of ``target``, shape [B].

    ``a=None`` means no pointer component (plain softmax-RNN).
    """
    target = np.asarray(target)
    pv = nx.take_last(p_vocab, target)
    if a is None:
        return _neg_log(pv)
    g = gate(a)
    ptr = target_mass(a, tokens, target)
    losses = _neg_log(g * pv + ptr)
    if aux_pointer_loss:
        losses = losses + _neg_log(g + ptr)
    return losses


def loss(p_vocab, a, tokens, target, aux_pointer_loss: bool = False) -> DiffValue:
    """Mean over streams of :func:`token_losses`."""
    return nx.mean(token_losses(p_vocab, a, tokens, target, aux_pointer_loss))


def predict(params: ModelParams, h_query, window: PointerWindow | None, full: bool = True):
    """Vocabulary softmax plus (for pointer models) the attention vector.

    Returns ``(p_vocab, a, tokens)``, or a :class:`MixtureOutput` when ``full``.
    """
    h_query = nx.constant(h_query)
    p_vocab = vocab_distribution(h_query, params)
    if not params.pointer:
        if not full:
            return p_vocab, None, None
        batch = h_query.data.shape[0]
        ones = nx.constant(np.ones((batch, 1), dtype=p_vocab.data.dtype))
        empty = np.zeros((batch, 0), dtype=np.int64)
        return MixtureOutput(ones, nx.constant(np.ones(batch)), p_vocab, p_vocab, empty)
    window = window if window is not None else PointerWindow(0)
    q = compute_query(h_query, params.W, params.b)
    a = attention_scores(q, window, params.s)
    tokens = _window_tokens(window, h_query.data.shape[0])
    if not full:
        return p_vocab, a, tokens
    return MixtureOutput(a, gate(a), p_vocab, mixture(p_vocab, a, tokens), tokens)


def trace_record(out: MixtureOutput, row: int, target: int, top_k: int = 5, vocab=None) -> dict:
    """One prediction as a JSON-ready dict.

    ``back`` counts positions behind the current input word (0 = the word
    just consumed).
    """
    p = out.p.data[row]
    top = np.argsort(-p, kind="stable")[:top_k]
    a = out.a.data[row]
    toks = out.tokens[row]
    n = len(toks)

    def name(i):
        return vocab.token_of[int(i)] if vocab is not None else int(i)

    return {
        "target": name(target),
        "target_id": int(target),
        "g": float(a[-1]),
        "p_target": float(p[target]),
        "top": [{"token": name(i), "p": float(p[i])} for i in top],
        "window": [
            {"index": i, "back": n - 1 - i, "token": name(toks[i]), "a": float(a[i])}
            for i in range(n)
        ],
    }
