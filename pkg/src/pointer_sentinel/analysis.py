"""Evaluation and analyses: perplexity, frequency buckets, attention traces, Zipf tables."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from . import pointer_mixture as pm
from . import recurrent as rc
from .recurrent import ModelParams, RegularizerConfig


@dataclass
class EvalReport:
    tokens: int
    mean_nll: float  # nats per token
    perplexity: float
    nll: np.ndarray | None = None  # per scored token, stream order
    targets: np.ndarray | None = None

    def summary(self) -> dict:
        return {"tokens": self.tokens, "mean_nll": self.mean_nll, "perplexity": self.perplexity}


class StreamScorer:
    """Eval-mode scorer that carries LSTM state and the pointer window across calls.

    Feeding a stream in pieces gives the same NLLs as feeding it at once.
    """

    def __init__(self, params: ModelParams, L: int, reg: RegularizerConfig | None = None,
                 batch: int = 1):
        self.params = params
        self.reg = reg.evaluation() if reg is not None else RegularizerConfig(mode="eval")
        self.window = pm.PointerWindow(L)
        self.state = rc.zero_state(params, batch)
        self.pending = None  # prediction for the next token
        self.position = 0

    def feed(self, tokens, on_prediction=None) -> np.ndarray:
        """Consume ``tokens`` [B, T]; returns NLLs [B, n] of the tokens that had a prediction."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        rc.check_tokens(tokens, self.params.vocab_size)
        nlls = []
        with nx.no_grad():
            for t in range(tokens.shape[1]):
                x = tokens[:, t]
                if self.pending is not None:
                    nll = self._score(x)
                    nlls.append(nll)
                    if on_prediction is not None:
                        on_prediction(self.position, self.pending, x, nll)
                out = rc.run_sequence(x[:, None], self.params, self.reg, state=self.state)
                self.state = out.state
                if self.params.pointer:
                    self.window.push(out.hidden[0], x)
                self.pending = pm.predict(self.params, out.output(0), self.window, full=True)
                self.position += 1
        if not nlls:
            return np.zeros((tokens.shape[0], 0))
        return np.stack(nlls, axis=1)

    def _score(self, target) -> np.ndarray:
        pred = self.pending
        a = pred.a if self.params.pointer else None
        return pm.token_losses(pred.p_vocab, a, pred.tokens, target).data.astype(np.float64)


def perplexity(params: ModelParams, ids, L: int, reg: RegularizerConfig | None = None,
               batch_size: int = 1, keep_nll: bool = False) -> EvalReport:
    """exp(mean NLL) over every token after the first of each stream.

    ``batch_size`` > 1 splits the corpus into that many contiguous streams,
    each starting from a zero state and an empty window.
    """
    ids = np.asarray(ids)
    if len(ids) < 2:
        raise ValueError("need at least two tokens to score")
    if batch_size > 1:
        from .trainer import batch_streams
        streams = batch_streams(ids, batch_size)
    else:
        streams = ids[None, :]
    scorer = StreamScorer(params, L, reg, batch=streams.shape[0])
    nll = scorer.feed(streams)
    flat = nll.reshape(-1)
    mean = float(flat.mean())
    return EvalReport(
        tokens=flat.size,
        mean_nll=mean,
        perplexity=math.exp(mean),
        nll=flat if keep_nll else None,
        targets=streams[:, 1:].reshape(-1) if keep_nll else None,
    )


# ---------------------------------------------------------------- frequency buckets

@dataclass
class BucketReport:
    n_buckets: int
    # rarest first; each: min_freq, max_freq, mean_diff (baseline - pointer NLL), tokens
    buckets: list[dict] = field(default_factory=list)

    def to_rows(self) -> list[dict]:
        return [dict(bucket=i, **b) for i, b in enumerate(self.buckets)]


def bucket_compare(baseline_nll, pointer_nll, targets, train_counts, n_buckets: int = 20) -> BucketReport:
    """Mean NLL improvement of the pointer model per frequency bucket.

    Scored tokens are sorted by the training frequency of their type (rarest
    first, ties in stream order) and cut into ``n_buckets`` equal slices.
    """
    baseline_nll = np.asarray(baseline_nll, dtype=np.float64)
    pointer_nll = np.asarray(pointer_nll, dtype=np.float64)
    targets = np.asarray(targets)
    if not (baseline_nll.shape == pointer_nll.shape == targets.shape):
        raise ValueError(f"stream length mismatch: baseline {baseline_nll.shape}, "
                         f"pointer {pointer_nll.shape}, targets {targets.shape}")
    if n_buckets < 1 or n_buckets > max(len(targets), 1):
        raise ValueError(f"cannot split {len(targets)} tokens into {n_buckets} buckets")
    freq = np.asarray(train_counts)[targets]
    order = np.argsort(freq, kind="stable")
    diff = baseline_nll - pointer_nll
    report = BucketReport(n_buckets)
    for part in np.array_split(order, n_buckets):
        part = np.sort(part)  # stream order inside a bucket, so one bucket is the plain mean
        report.buckets.append({
            "min_freq": int(freq[part].min()),
            "max_freq": int(freq[part].max()),
            "mean_diff": float(diff[part].mean()),
            "tokens": int(part.size),
        })
    return report


# ---------------------------------------------------------------- traces

def dump_traces(params: ModelParams, ids, L: int, threshold: float, path,
                reg: RegularizerConfig | None = None, vocab=None, top_k: int = 5) -> int:
    """Write one JSON line per prediction whose gate is at most ``threshold``.

    Returns the number of records written.
    """
    ids = np.asarray(ids)
    scorer = StreamScorer(params, L, reg, batch=1)
    written = 0
    with open(path, "w", encoding="utf-8") as fh:
        def emit(position, pred, target, nll):
            nonlocal written
            if float(pred.a.data[0, -1]) > threshold:
                return
            record = pm.trace_record(pred, 0, int(target[0]), top_k, vocab)
            record["position"] = position
            record["nll"] = float(nll[0])
            fh.write(json.dumps(record) + "\n")
            written += 1

        scorer.feed(ids[None, :], on_prediction=emit)
    return written


def read_traces(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


_SHADES = " .:-=+*#%@"


def render_traces_text(records: list[dict], max_records: int = 20) -> str:
    """Text heatmap: one block per record, window tokens shaded by attention."""
    lines = []
    for rec in records[:max_records]:
        lines.append(f"target={rec['target']} g={rec['g']:.3f} p={rec['p_target']:.3f}")
        cells = []
        for entry in rec["window"]:
            shade = _SHADES[min(int(entry["a"] * len(_SHADES)), len(_SHADES) - 1)]
            cells.append(f"{entry['token']}[{shade}]")
        lines.append("  " + " ".join(cells))
    return "\n".join(lines) + "\n"


def render_traces_png(records: list[dict], path, max_records: int = 40) -> None:
    """Grid heatmap: rows are predictions, columns are positions back from the current word."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = records[:max_records]
    width = max((len(r["window"]) for r in records), default=1)
    grid = np.zeros((len(records), width + 1))
    for i, rec in enumerate(records):
        for entry in rec["window"]:
            grid[i, entry["back"]] = entry["a"]
        grid[i, width] = rec["g"]
    fig, ax = plt.subplots(figsize=(10, 0.3 * len(records) + 1.5))
    ax.imshow(grid, aspect="auto", cmap="Blues", vmin=0, vmax=1)
    ax.set_xlabel("positions back (last column: gate)")
    ax.set_yticks(range(len(records)), [str(r["target"]) for r in records])
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------- Zipf

def zipf_export(stats, path) -> None:
    """Two-column rank/frequency table (tab separated, header line)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("rank\tfrequency\n")
        for rank, freq in stats.zipf:
            fh.write(f"{rank}\t{freq}\n")


def read_table(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, (int(v) if v.lstrip("-").isdigit() else float(v) for v in line.split("\t"))))
            for line in lines[1:] if line]
