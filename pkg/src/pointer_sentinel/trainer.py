"""Truncated BPTT with window regeneration, learning-rate halving and early stopping.

Every ``k1`` timesteps the last ``k2`` hidden states are recomputed from a
saved boundary state with the current parameters, the pointer window is
built from those fresh states, and the loss of the last ``k1`` predictions
is backpropagated through the whole recomputed span.  With ``k1 = 1`` and
``k2 = L`` each prediction sees gradient flow through the full window.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from . import pointer_mixture as pm
from . import recurrent as rc
from .analysis import perplexity
from .recurrent import ConfigError, ModelParams, RegularizerConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    L: int = 100
    batch_size: int = 32
    max_epochs: int = 64
    patience: int = 3
    lr: float = 1.0
    clip_norm: float = 1.0
    k1: int = 1
    k2: int | None = None  # None -> L
    seed: int = 0
    aux_pointer_loss: bool = False
    zoneout_rate: float = 0.5
    dropout_rate: float = 0.5
    zoneout_on: str = "both"
    # which copy of the final-layer state fills the window: "pre_dropout" or "post_dropout"
    window_states: str = "pre_dropout"
    # k1 = k2 = L; smoke tests only
    fast_mode: bool = False
    dtype: str = "float32"
    eval_batch_size: int = 1
    max_steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.fast_mode:
            self.k1 = self.k2 = self.L
        if self.k2 is None:
            self.k2 = self.L
        if self.L < 1 or self.k1 < 1 or self.k2 < self.k1:
            raise ConfigError(f"need L >= 1, k1 >= 1 and k2 >= k1 (L={self.L}, k1={self.k1}, k2={self.k2})")
        if self.window_states not in ("pre_dropout", "post_dropout"):
            raise ConfigError(f"unknown window_states {self.window_states!r}")
        if self.batch_size < 1 or self.clip_norm <= 0 or self.lr < 0:
            raise ConfigError("batch_size and clip_norm must be positive, lr non-negative")

    def regularizer(self) -> RegularizerConfig:
        return RegularizerConfig(self.zoneout_rate, self.dropout_rate, "train", self.zoneout_on)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


# ---------------------------------------------------------------- schedule

@dataclass
class Schedule:
    """Learning-rate halving and early stopping driven only by validation perplexity."""
    lr: float
    patience: int = 3
    max_epochs: int = 64
    epoch: int = 0
    best: float = math.inf
    best_epoch: int = 0
    previous: float | None = None
    since_best: int = 0
    stopped: bool = False

    def update(self, valid_ppl: float) -> bool:
        """Record one epoch's validation perplexity; returns True when training should stop."""
        if not math.isfinite(valid_ppl):
            raise FloatingPointError(f"validation perplexity is {valid_ppl} after epoch {self.epoch + 1}")
        self.epoch += 1
        if self.previous is not None and valid_ppl > self.previous:
            self.lr /= 2
        self.previous = valid_ppl
        if valid_ppl < self.best:
            self.best, self.best_epoch, self.since_best = valid_ppl, self.epoch, 0
        else:
            self.since_best += 1
        self.stopped = self.since_best >= self.patience or self.epoch >= self.max_epochs
        return self.stopped


# ---------------------------------------------------------------- streams

def batch_streams(ids, batch_size: int) -> np.ndarray:
    """Split a corpus into ``batch_size`` contiguous equal-length streams, [B, N]."""
    ids = np.asarray(ids)
    if len(ids) < batch_size or batch_size < 1:
        raise ConfigError(f"corpus of {len(ids)} tokens is shorter than batch size {batch_size}")
    n = len(ids) // batch_size
    return ids[: n * batch_size].reshape(batch_size, n)


@dataclass
class StepInfo:
    t: int
    loss: float
    bptt_steps: int  # timesteps recomputed and backpropagated through
    window: int
    cells: int
    grad_norm: float


class StreamCache:
    """Most recent per-position states of each stream, for boundaries and old window entries."""

    def __init__(self, keep: int):
        self.keep = keep
        self.states: dict[int, list] = {}
        self.hidden: dict[int, np.ndarray] = {}

    def record(self, pos: int, state, hidden) -> None:
        self.states[pos] = [(h.data, c.data) for h, c in state]
        self.hidden[pos] = hidden.data
        self.states.pop(pos - self.keep - 1, None)
        self.hidden.pop(pos - self.keep - 1, None)

    def boundary(self, pos: int, params: ModelParams, batch: int):
        """State after consuming position ``pos`` (zero state before the stream starts)."""
        if pos < 0:
            return rc.zero_state(params, batch)
        return [(nx.constant(h), nx.constant(c)) for h, c in self.states[pos]]


class Trainer:
    def __init__(self, params: ModelParams, config: TrainConfig, rng: nx.Rng | None = None):
        self.params = params
        self.config = config
        self.rng = rng if rng is not None else nx.make_rng(config.seed)
        self.reg = config.regularizer()
        self.lr = config.lr
        self.cache: StreamCache | None = None
        self.streams: np.ndarray | None = None

    def start_epoch(self, ids) -> None:
        self.streams = batch_streams(ids, self.config.batch_size)
        self.cache = StreamCache(keep=max(self.config.k2, self.config.L) + 1)

    def regenerate_window(self, t: int):
        """Recompute positions ``max(0, t-k2+1) .. t`` with the current parameters.

        Returns ``(start, run output)``; the run output keeps per-step states.
        """
        cfg, params = self.config, self.params
        B = self.streams.shape[0]
        start = max(0, t - cfg.k2 + 1)
        masks = rc.sample_masks(self.rng, self.reg, B, t - start + 1, params.hidden_size,
                                params.depth, params.U.data.dtype)
        boundary = self.cache.boundary(start - 1, params, B)
        out = rc.run_sequence(self.streams[:, start:t + 1], params, self.reg,
                              state=boundary, masks=masks, keep_states=True)
        return start, out

    def _window_for(self, p: int, start: int, out) -> pm.PointerWindow:
        cfg = self.config
        window = pm.PointerWindow(cfg.L)
        for pos in range(max(0, p - cfg.L + 1), p + 1):
            if pos >= start:
                h = out.hidden[pos - start] if cfg.window_states == "pre_dropout" else out.output(pos - start)
            else:
                h = nx.constant(self.cache.hidden[pos])
            window.push(h, self.streams[:, pos])
        return window

    def step_loss(self, t: int):
        """Forward pass for the predictions ending at position ``t``: (loss, start, run output)."""
        cfg, params = self.config, self.params
        start, out = self.regenerate_window(t)
        losses = []
        for p in range(max(start, t - cfg.k1 + 1), t + 1):
            window = self._window_for(p, start, out) if params.pointer else None
            p_vocab, a, toks = pm.predict(params, out.output(p - start), window, full=False)
            losses.append(pm.loss(p_vocab, a, toks, self.streams[:, p + 1], cfg.aux_pointer_loss))
        loss = losses[0]
        for extra in losses[1:]:
            loss = loss + extra
        if len(losses) > 1:
            loss = loss * (1.0 / len(losses))
        return loss, start, out

    def tbptt_step(self, t: int) -> StepInfo:
        """Predict token ``t + 1`` (and the k1-1 before it), backpropagate, clip, update."""
        if t + 1 >= self.streams.shape[1]:
            raise IndexError(f"no target after position {t}")
        before = rc.counters["cell"]
        loss, start, out = self.step_loss(t)
        cells = rc.counters["cell"] - before
        nx.backward(loss)
        norm = nx.clip_and_step(self.params, self.lr, self.config.clip_norm)
        post = self.config.window_states == "post_dropout"
        for i, pos in enumerate(range(start, t + 1)):
            self.cache.record(pos, out.states[i], out.output(i) if post else out.hidden[i])
        window = min(t + 1, self.config.L) if self.params.pointer else 0
        return StepInfo(t, float(loss.data), t - start + 1, window, cells, norm)

    def positions(self):
        """Positions at which an update happens during one pass over the streams."""
        last = self.streams.shape[1] - 2
        k1 = self.config.k1
        pos = [t for t in range(k1 - 1, last + 1, k1)]
        if pos and pos[-1] != last and k1 > 1:
            pos.append(last)
        return pos

    def train_epoch(self, ids, on_step=None) -> dict:
        self.start_epoch(ids)
        total, count = 0.0, 0
        limit = self.config.max_steps_per_epoch
        for i, t in enumerate(self.positions()):
            if limit is not None and i >= limit:
                break
            info = self.tbptt_step(t)
            total += info.loss
            count += 1
            if on_step is not None:
                on_step(info)
        mean = total / max(count, 1)
        return {"steps": count, "train_loss": mean, "train_ppl": math.exp(min(mean, 700))}


# ---------------------------------------------------------------- epoch loop

@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 1.0
    best_valid_ppl: float = math.inf
    best_epoch: int = 0
    since_improvement: int = 0
    history: list[dict] = field(default_factory=list)


def epoch_loop(params: ModelParams, train_ids, valid_ids, config: TrainConfig,
               log_path=None, checkpoint=None, on_step=None) -> TrainState:
    """Train until the schedule stops.

    ``checkpoint(params, state)`` is called on each new best epoch, and the
    best parameters are copied back into ``params`` before returning.
    """
    if len(train_ids) < 2 or len(valid_ids) < 2:
        raise ConfigError("train and validation streams need at least two tokens")
    trainer = Trainer(params, config)
    schedule = Schedule(config.lr, config.patience, config.max_epochs)
    state = TrainState(lr=config.lr)
    eval_reg = config.regularizer().evaluation()
    best = {k: v.copy() for k, v in params.arrays().items()}
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while schedule.epoch < config.max_epochs and not schedule.stopped:
            t0 = time.perf_counter()
            underflow0 = pm.counters["underflow"]
            trainer.lr = schedule.lr
            stats = trainer.train_epoch(train_ids, on_step)
            report = perplexity(params, valid_ids, config.L, reg=eval_reg,
                                batch_size=config.eval_batch_size)
            epoch_lr = schedule.lr
            schedule.update(report.perplexity)
            record = {
                "epoch": schedule.epoch,
                "lr": epoch_lr,
                "train_ppl": stats["train_ppl"],
                "valid_ppl": report.perplexity,
                "wall_time": time.perf_counter() - t0,
                "underflow": pm.counters["underflow"] - underflow0,
                "steps": stats["steps"],
            }
            state.history.append(record)
            state.epoch, state.lr = schedule.epoch, schedule.lr
            state.since_improvement = schedule.since_best
            log.info("epoch %d lr %.4g train ppl %.2f valid ppl %.2f (%.0fs)", record["epoch"],
                     epoch_lr, record["train_ppl"], record["valid_ppl"], record["wall_time"])
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if schedule.best_epoch == schedule.epoch:
                state.best_valid_ppl, state.best_epoch = schedule.best, schedule.epoch
                best = {k: v.copy() for k, v in params.arrays().items()}
                if checkpoint is not None:
                    checkpoint(params, state)
    finally:
        if log_fh:
            log_fh.close()
    for name, p in params.named():
        p.data[...] = best[name]
    return state


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
