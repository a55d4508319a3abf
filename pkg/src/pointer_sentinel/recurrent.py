"""Multi-layer LSTM with zoneout and variational (locked) dropout."""
from __future__ import annotations

import collections
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import DiffValue, Rng

# instrumentation: number of LSTM cell evaluations since last reset
counters: collections.Counter = collections.Counter()


class ConfigError(ValueError):
    pass


class VocabularyError(IndexError):
    pass


@dataclass
class LstmLayerParams:
    W_x: DiffValue  # [4H, H_in], gate blocks ordered input, forget, output, cell
    W_h: DiffValue  # [4H, H]
    bias: DiffValue  # [4H]

    @property
    def hidden_size(self) -> int:
        return self.W_h.data.shape[1]

    @property
    def input_size(self) -> int:
        return self.W_x.data.shape[1]

    def count(self) -> int:
        return self.W_x.data.size + self.W_h.data.size + self.bias.data.size


@dataclass
class ModelParams:
    embedding: DiffValue  # [V, H]
    layers: list[LstmLayerParams]
    U: DiffValue  # [V, H]
    W: DiffValue | None = None  # [H, H] query projection
    b: DiffValue | None = None  # [H]
    s: DiffValue | None = None  # [H] sentinel

    @property
    def pointer(self) -> bool:
        return self.W is not None

    @property
    def vocab_size(self) -> int:
        return self.U.data.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.U.data.shape[1]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def named(self) -> Iterator[tuple[str, DiffValue]]:
        yield "embedding", self.embedding
        for i, layer in enumerate(self.layers):
            yield f"layers.{i}.W_x", layer.W_x
            yield f"layers.{i}.W_h", layer.W_h
            yield f"layers.{i}.bias", layer.bias
        yield "U", self.U
        if self.pointer:
            yield "W", self.W
            yield "b", self.b
            yield "s", self.s

    def zero_grad(self):
        for _, p in self.named():
            p.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named()}

    def copy(self) -> "ModelParams":
        return params_from_arrays({k: v.copy() for k, v in self.arrays().items()})


def params_from_arrays(arrays: dict[str, np.ndarray]) -> ModelParams:
    depth = sum(1 for k in arrays if k.endswith(".W_x"))
    layers = [
        LstmLayerParams(*(nx.parameter(arrays[f"layers.{i}.{n}"], f"layers.{i}.{n}")
                          for n in ("W_x", "W_h", "bias")))
        for i in range(depth)
    ]
    extra = {k: nx.parameter(arrays[k], k) for k in ("W", "b", "s") if k in arrays}
    return ModelParams(nx.parameter(arrays["embedding"], "embedding"), layers,
                       nx.parameter(arrays["U"], "U"), **extra)


def init_params(vocab_size: int, hidden: int, depth: int, rng: Rng, pointer: bool = True,
                init_scale: float = 0.05, dtype=np.float64) -> ModelParams:
    """Uniform(-init_scale, init_scale) weights, zero biases, forget-gate bias 1."""
    if vocab_size < 1 or hidden < 1 or depth < 1:
        raise ConfigError("vocab_size, hidden and depth must be positive")

    def uniform(*shape):
        return rng.uniform(-init_scale, init_scale, size=shape).astype(dtype)

    embedding = nx.parameter(uniform(vocab_size, hidden), "embedding")
    layers = []
    for i in range(depth):
        bias = np.zeros(4 * hidden, dtype=dtype)
        bias[hidden:2 * hidden] = 1.0  # forget gate
        layers.append(LstmLayerParams(
            nx.parameter(uniform(4 * hidden, hidden), f"layers.{i}.W_x"),
            nx.parameter(uniform(4 * hidden, hidden), f"layers.{i}.W_h"),
            nx.parameter(bias, f"layers.{i}.bias"),
        ))
    U = nx.parameter(uniform(vocab_size, hidden), "U")
    if not pointer:
        return ModelParams(embedding, layers, U)
    return ModelParams(
        embedding, layers, U,
        W=nx.parameter(uniform(hidden, hidden), "W"),
        b=nx.parameter(np.zeros(hidden, dtype=dtype), "b"),
        s=nx.parameter(uniform(hidden), "s"),
    )


def param_count(params: ModelParams) -> dict:
    layers = [layer.count() for layer in params.layers]
    pointer = sum(p.data.size for p in (params.W, params.b, params.s) if p is not None)
    counts = {
        "embedding": params.embedding.data.size,
        "lstm_layers": layers,
        "U": params.U.data.size,
        "pointer": pointer,
    }
    counts["total"] = counts["embedding"] + sum(layers) + counts["U"] + pointer
    return counts


# ---------------------------------------------------------------- regularizers

@dataclass
class RegularizerConfig:
    zoneout_rate: float = 0.0
    dropout_rate: float = 0.0
    mode: str = "train"
    # which recurrent vectors zoneout touches: "both", "h" or "c"
    zoneout_on: str = "both"

    def __post_init__(self):
        if not 0.0 <= self.zoneout_rate <= 1.0:
            raise ConfigError(f"zoneout rate {self.zoneout_rate} outside [0, 1]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate {self.dropout_rate} outside [0, 1)")
        if self.mode not in ("train", "eval"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.zoneout_on not in ("both", "h", "c"):
            raise ConfigError(f"zoneout_on must be both/h/c, got {self.zoneout_on!r}")

    @property
    def training(self) -> bool:
        return self.mode == "train"

    def evaluation(self) -> "RegularizerConfig":
        return RegularizerConfig(self.zoneout_rate, self.dropout_rate, "eval", self.zoneout_on)


def zoneout(new, old, rate: float, rng: Rng | None = None, mode: str = "train",
            mask: np.ndarray | None = None) -> DiffValue:
    """Keep each unit at its old value with probability ``rate``.

    Eval mode uses the expectation ``rate * old + (1 - rate) * new``.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"zoneout rate {rate} outside [0, 1]")
    if rate == 0.0:
        return nx.constant(new)
    if mode == "eval":
        return nx.blend(old, new, rate)
    if mask is None:
        mask = rng.random(np.shape(nx.constant(new).data)) < rate
    return nx.blend(old, new, mask)


def variational_mask(shape, rate: float, rng: Rng, dtype=np.float64) -> np.ndarray:
    """Inverted-dropout mask, sampled once and reused for every timestep of a sequence."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"variational dropout rate {rate} must lie in [0, 1)")
    if rate == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


@dataclass
class SequenceMasks:
    """All stochastic masks for one training sequence."""
    inputs: list[np.ndarray]  # per layer, [B, H]
    output: np.ndarray  # final-layer output, [B, H]
    zoneout_h: np.ndarray | None = None  # [T, depth, B, H], 1 = keep old value
    zoneout_c: np.ndarray | None = None


def sample_masks(rng: Rng, reg: RegularizerConfig, batch: int, steps: int, hidden: int,
                 depth: int, dtype=np.float64) -> SequenceMasks | None:
    if not reg.training:
        return None
    inputs = [variational_mask((batch, hidden), reg.dropout_rate, rng, dtype) for _ in range(depth)]
    output = variational_mask((batch, hidden), reg.dropout_rate, rng, dtype)
    zh = zc = None
    if reg.zoneout_rate > 0:
        shape = (steps, depth, batch, hidden)
        if reg.zoneout_on in ("both", "h"):
            zh = (rng.random(shape, dtype=np.float32) < reg.zoneout_rate).astype(dtype)
        if reg.zoneout_on in ("both", "c"):
            zc = (rng.random(shape, dtype=np.float32) < reg.zoneout_rate).astype(dtype)
    return SequenceMasks(inputs, output, zh, zc)


# ---------------------------------------------------------------- LSTM

LstmState = list  # per layer: (h, c), each DiffValue [B, H]


def zero_state(params: ModelParams, batch: int) -> LstmState:
    H = params.hidden_size
    dtype = params.U.data.dtype
    return [(nx.constant(np.zeros((batch, H), dtype)), nx.constant(np.zeros((batch, H), dtype)))
            for _ in params.layers]


def detach_state(state: LstmState) -> LstmState:
    return [(nx.constant(h.data.copy()), nx.constant(c.data.copy())) for h, c in state]


def lstm_cell(x, prev, params: LstmLayerParams, reg: RegularizerConfig | None = None,
              masks: tuple | None = None):
    """One LSTM step.  ``masks`` is an (h_mask, c_mask) pair of zoneout masks (train mode)."""
    x = nx.constant(x)
    if x.data.shape[-1] != params.input_size:
        raise nx.ShapeError(
            f"lstm_cell: input {x.data.shape} does not fit layer input size {params.input_size}")
    return _recur(nx.linear(x, params.W_x) + params.bias, prev, params, reg, masks)


def _recur(projected, prev, params: LstmLayerParams, reg, masks):
    # projected = W_x x + bias, already computed
    h, c = prev
    H = params.hidden_size
    if h.data.shape[-1] != H:
        raise nx.ShapeError(f"lstm_cell: state {h.data.shape} does not fit hidden size {H}")
    counters["cell"] += 1
    gates = projected + nx.linear(h, params.W_h)
    sig = nx.sigmoid(gates[..., :3 * H])
    g = nx.tanh(gates[..., 3 * H:])
    i, f, o = sig[..., :H], sig[..., H:2 * H], sig[..., 2 * H:]
    c_new = f * c + i * g
    h_new = o * nx.tanh(c_new)
    if reg is not None and reg.zoneout_rate > 0:
        zh, zc = masks if masks is not None else (None, None)
        if reg.training:
            if zc is not None:
                c_new = zoneout(c_new, c, reg.zoneout_rate, mask=zc)
            if zh is not None:
                h_new = zoneout(h_new, h, reg.zoneout_rate, mask=zh)
        else:
            if reg.zoneout_on in ("both", "c"):
                c_new = zoneout(c_new, c, reg.zoneout_rate, mode="eval")
            if reg.zoneout_on in ("both", "h"):
                h_new = zoneout(h_new, h, reg.zoneout_rate, mode="eval")
    return h_new, c_new


@dataclass
class RunOutput:
    hidden: list[DiffValue]  # final-layer h per step, before output dropout
    state: LstmState = field(default_factory=list)
    output_mask: np.ndarray | None = None
    states: list[LstmState] | None = None  # state after each step, when requested

    def output(self, t: int) -> DiffValue:
        """Final-layer h at step ``t`` after output dropout."""
        h = self.hidden[t]
        return h if self.output_mask is None else h * self.output_mask

    @property
    def outputs(self) -> list[DiffValue]:
        return [self.output(t) for t in range(len(self.hidden))]


def check_tokens(tokens: np.ndarray, vocab_size: int):
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        bad = tokens[(tokens < 0) | (tokens >= vocab_size)][0]
        raise VocabularyError(f"token id {bad} outside vocabulary of size {vocab_size}")


def run_sequence(tokens, params: ModelParams, reg: RegularizerConfig | None = None,
                 rng: Rng | None = None, state: LstmState | None = None,
                 masks: SequenceMasks | None = None, keep_states: bool = False) -> RunOutput:
    """Run the stack over ``tokens`` of shape [B, T] (a 1-D sequence is treated as B=1).

    Layers are run one after another over the whole sequence so each input
    projection is a single matrix product.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    check_tokens(tokens, params.vocab_size)
    reg = reg or RegularizerConfig(mode="eval")
    B, T = tokens.shape
    if state is None:
        state = zero_state(params, B)
    if masks is None and reg.training:
        if rng is None:
            raise ConfigError("training mode needs an rng or pre-sampled masks")
        masks = sample_masks(rng, reg, B, T, params.hidden_size, params.depth,
                             params.U.data.dtype)
    state = list(state)
    if T == 0:
        return RunOutput([], state, states=[] if keep_states else None)
    x = nx.embed(params.embedding, tokens.T)  # [T, B, H]
    hs: list = []
    per_step = [[None] * len(params.layers) for _ in range(T)] if keep_states else None
    for li, layer in enumerate(params.layers):
        if masks is not None:
            x = x * masks.inputs[li]
        projected = nx.linear(x, layer.W_x) + layer.bias
        hs = []
        for t in range(T):
            zm = None
            if masks is not None:
                zm = (None if masks.zoneout_h is None else masks.zoneout_h[t, li],
                      None if masks.zoneout_c is None else masks.zoneout_c[t, li])
            h, c = _recur(projected[t], state[li], layer, reg, zm)
            state[li] = (h, c)
            hs.append(h)
            if per_step is not None:
                per_step[t][li] = (h, c)
        if li + 1 < len(params.layers):
            x = nx.stack(hs, axis=0)
    return RunOutput(hs, state, None if masks is None else masks.output, per_step)


def vocab_distribution(h_out, params: ModelParams) -> DiffValue:
    """p_vocab = softmax(U h)."""
    return nx.softmax(nx.linear(h_out, params.U))


# ---------------------------------------------------------------- checkpoints

MANIFEST_KEY = "__manifest__"


def save_checkpoint(path, params: ModelParams, manifest: dict) -> None:
    arrays = dict(params.arrays())
    arrays[MANIFEST_KEY] = np.array(json.dumps(manifest, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        manifest = json.loads(str(z[MANIFEST_KEY]))
        arrays = {k: z[k] for k in z.files if k != MANIFEST_KEY}
    return params_from_arrays(arrays), manifest
