"""Synthetic rare-name corpus: each document introduces one rare name and repeats it.

Filler words follow a Zipf-like law; a name always follows the trigger word
``mr``, so a model can tell *that* a name comes next but only the recent
context says *which* one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import make_rng

TRIGGER = "mr"
STOP = "."


@dataclass
class ToyCorpus:
    train: list[str]
    valid: list[str]
    test: list[str]
    names: list[str]

    def lines(self, split: str) -> list[str]:
        """Documents of a split, one per line (the end-of-sentence token marks line ends)."""
        tokens = getattr(self, split)
        out, cur = [], []
        for tok in tokens:
            if tok == "<eos>":
                out.append(" ".join(cur))
                cur = []
            else:
                cur.append(tok)
        if cur:
            out.append(" ".join(cur))
        return out


def _document(rng, names, filler, weights, doc_len, repeats) -> list[str]:
    length = int(rng.integers(doc_len[0], doc_len[1] + 1))
    name = names[int(rng.integers(len(names)))]
    words = list(rng.choice(filler, size=length, p=weights))
    for i in range(9, length, int(rng.integers(6, 12))):
        words[i] = STOP
    n_mentions = int(rng.integers(repeats[0], repeats[1] + 1))
    # mentions spread over the document, the first near the start
    slots = sorted(rng.choice(np.arange(1, length - 1), size=n_mentions, replace=False))
    slots[0] = min(slots[0], 5)
    doc: list[str] = []
    for i, w in enumerate(words):
        if i in slots:
            doc += [TRIGGER, name]
        doc.append(w)
    doc.append(STOP)
    return doc


def rare_name_corpus(n_tokens: int = 200_000, n_names: int = 200, n_filler: int = 300,
                     seed: int = 0, doc_len=(60, 85), repeats=(3, 6),
                     split=(0.8, 0.1, 0.1)) -> ToyCorpus:
    rng = make_rng(seed)
    names = [f"name{i:03d}" for i in range(n_names)]
    filler = np.array([f"w{i:03d}" for i in range(n_filler)])
    weights = 1.0 / (np.arange(n_filler) + 30.0)
    weights /= weights.sum()
    docs, total = [], 0
    while total < n_tokens:
        doc = _document(rng, names, filler, weights, doc_len, repeats) + ["<eos>"]
        docs.append(doc)
        total += len(doc)
    n_train = int(len(docs) * split[0])
    n_valid = int(len(docs) * split[1])

    def flat(part):
        return [tok for d in part for tok in d]

    return ToyCorpus(flat(docs[:n_train]), flat(docs[n_train:n_train + n_valid]),
                     flat(docs[n_train + n_valid:]), names)


# ---------------------------------------------------------------- benchmark

@dataclass
class BenchmarkConfig:
    hidden: int = 64
    depth: int = 1
    L: int = 100
    batch_size: int = 32
    lr: float = 1.0
    max_epochs: int = 1
    patience: int = 3
    zoneout_rate: float = 0.1
    dropout_rate: float = 0.1
    seed: int = 0
    corpus_seed: int = 0
    n_tokens: int = 200_000
    n_buckets: int = 20
    max_steps_per_epoch: int | None = None


@dataclass
class BenchmarkResult:
    config: BenchmarkConfig
    vocab: object
    names: list[str]
    test_ids: np.ndarray
    train_counts: np.ndarray
    models: dict  # "lstm" / "pointer-sentinel" -> ModelParams
    test_ppl: dict
    test_nll: dict
    train_seconds: dict
    logs: dict
    buckets: object = None


def run_benchmark(cfg: BenchmarkConfig | None = None, log=print) -> BenchmarkResult:
    """Train a matched LSTM baseline and pointer sentinel model on the rare-name corpus."""
    import time

    from . import analysis as an
    from . import corpus as cp
    from . import recurrent as rc
    from .trainer import TrainConfig, epoch_loop

    cfg = cfg or BenchmarkConfig()
    data = rare_name_corpus(n_tokens=cfg.n_tokens, seed=cfg.corpus_seed)
    vocab = cp.build_vocab(data.train, min_count=1)
    ids = {s: vocab.encode(getattr(data, s)) for s in ("train", "valid", "test")}
    train_counts = np.array([vocab.counts.get(t, 0) for t in vocab.token_of])
    tc = TrainConfig(L=cfg.L, batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
                     patience=cfg.patience, lr=cfg.lr, seed=cfg.seed,
                     zoneout_rate=cfg.zoneout_rate, dropout_rate=cfg.dropout_rate,
                     max_steps_per_epoch=cfg.max_steps_per_epoch)
    eval_reg = tc.regularizer().evaluation()
    result = BenchmarkResult(cfg, vocab, data.names, ids["test"], train_counts,
                             {}, {}, {}, {}, {})
    for model in ("lstm", "pointer-sentinel"):
        params = rc.init_params(len(vocab), cfg.hidden, cfg.depth, make_rng(cfg.seed),
                                pointer=model == "pointer-sentinel", dtype=tc.np_dtype)
        t0 = time.perf_counter()
        state = epoch_loop(params, ids["train"], ids["valid"], tc)
        result.train_seconds[model] = time.perf_counter() - t0
        report = an.perplexity(params, ids["test"], cfg.L, reg=eval_reg, keep_nll=True)
        result.models[model] = params
        result.test_ppl[model] = report.perplexity
        result.test_nll[model] = report.nll
        result.logs[model] = state.history
        log(f"{model}: test ppl {report.perplexity:.2f}, "
            f"train {result.train_seconds[model]:.0f}s, epochs {state.epoch}")
    result.buckets = an.bucket_compare(result.test_nll["lstm"], result.test_nll["pointer-sentinel"],
                                       ids["test"][1:], train_counts, cfg.n_buckets)
    return result
