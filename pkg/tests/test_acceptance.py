"""Acceptance gate: the ten criteria at their stated tolerances.

Each test records one PASS/FAIL line (printed in the terminal summary) and
then asserts.  Criteria 7 and 8 share one toy benchmark run (two models,
roughly 15 minutes on one CPU core).
"""
import math
import time

import numpy as np
import pytest

from pointer_sentinel import analysis as an
from pointer_sentinel import corpus as cp
from pointer_sentinel import numerics as nx
from pointer_sentinel import pointer_mixture as pm
from pointer_sentinel import recurrent as rc
from pointer_sentinel.toydata import BenchmarkConfig, run_benchmark
from pointer_sentinel.trainer import Schedule, TrainConfig, Trainer
from conftest import ACCEPTANCE, rel_error
import torch_oracle


def record(n, ok, detail):
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1

def test_c01_gradient_suite():
    t0 = time.perf_counter()
    rng = nx.make_rng(11)
    V, H, L = 12, 8, 5
    params = rc.init_params(V, H, 1, rng, init_scale=0.3, dtype=np.float64)
    tokens = np.array([[3, 5, 3, 7, 5, 3, 1, 5, 3], [2, 2, 9, 4, 2, 9, 11, 0, 2]])
    reg = rc.RegularizerConfig(zoneout_rate=0.3, dropout_rate=0.3)
    masks = rc.sample_masks(rng, reg, 2, tokens.shape[1] - 1, H, 1)

    def loss_value():
        out = rc.run_sequence(tokens[:, :-1], params, reg, masks=masks)
        window = pm.PointerWindow(L)
        total = None
        for t in range(tokens.shape[1] - 1):
            window.push(out.hidden[t], tokens[:, t])
            p_vocab, a, toks = pm.predict(params, out.output(t), window, full=False)
            step = pm.loss(p_vocab, a, toks, tokens[:, t + 1])
            total = step if total is None else total + step
        return total

    loss = loss_value()
    nx.backward(loss)
    # relative error per parameter array, |a - n| / (|a| + |n|) in the Euclidean norm;
    # elementwise ratios are also reported but are dominated by finite-difference
    # roundoff (about 2e-10 absolute here) on entries whose gradient is near zero
    worst, where, elementwise = 0.0, None, 0.0
    for name, p in params.named():
        numeric = nx.finite_difference_grad(lambda: float(loss_value().data), p, eps=1e-5)
        err = float(np.linalg.norm(p.grad - numeric) / (np.linalg.norm(p.grad) + np.linalg.norm(numeric)))
        elementwise = max(elementwise, rel_error(p.grad, numeric))
        if err >= worst:
            worst, where = err, name
    elapsed = time.perf_counter() - t0
    names = {n.split(".")[-1] for n, _ in params.named()}
    record(1, worst < 1e-4 and elapsed < 30 and {"embedding", "U", "W", "b", "s", "W_x", "W_h", "bias"} <= names,
           f"max relative error {worst:.2e} ({where}), elementwise max {elementwise:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2, 3

def _configs(n=200, seed=2):
    rng = nx.make_rng(seed)
    for i in range(n):
        H, L, V = int(rng.integers(2, 9)), int(rng.integers(0, 11)), int(rng.integers(3, 21))
        params = rc.init_params(V, H, 1, nx.make_rng(1000 + i), init_scale=1.0, dtype=np.float64)
        n_fill = int(rng.integers(0, L + 1))
        pool = int(rng.integers(1, V + 1))  # small pools force repeated tokens
        window = pm.PointerWindow(L)
        for _ in range(n_fill):
            window.push(rng.normal(size=(2, H)), rng.integers(0, pool, size=2))
        yield params, rng.normal(size=(2, H)), window


def test_c02_normalization_suite():
    worst, gate_ok, empty_ok, empties = 0.0, True, True, 0
    for params, h, window in _configs():
        out = pm.predict(params, h, window)
        worst = max(worst, float(np.max(np.abs(out.p.data.sum(-1) - 1.0))))
        gate_ok &= bool(np.array_equal(out.g.data, out.a.data[:, -1]))
        if len(window) == 0:
            empties += 1
            empty_ok &= bool(np.all(out.g.data == 1.0) and np.array_equal(out.p.data, out.p_vocab.data))
    record(2, worst < 1e-10 and gate_ok and empty_ok and empties > 0,
           f"max |sum p - 1| {worst:.1e}, g == a[last] {gate_ok}, {empties} empty windows ok {empty_ok}")


def test_c03_mixture_identity():
    worst, checked = 0.0, 0
    for params, h, window in _configs():
        out = pm.predict(params, h, window)
        g = out.a.data[:, -1]
        rows = g < 1 - 1e-9
        if not rows.any():
            continue
        p_ptr, _ = pm.pointer_distribution(out.a.data[rows], out.tokens[rows], params.vocab_size)
        eq = g[rows, None] * out.p_vocab.data[rows] + (1 - g[rows, None]) * p_ptr
        worst = max(worst, float(np.max(np.abs(eq - out.p.data[rows]))))
        checked += int(rows.sum())
    record(3, worst < 1e-12 and checked > 0, f"max deviation {worst:.1e} over {checked} predictions")


# ---------------------------------------------------------------- 4

def test_c04_pointer_sum_equivalence():
    rng = nx.make_rng(4)
    worst = 0.0
    for _ in range(100):
        n, V = int(rng.integers(2, 15)), int(rng.integers(2, 8))
        a = rng.dirichlet(np.ones(n + 1)) * 0.999
        a[-1] += 1.0 - a.sum()
        toks = rng.integers(0, min(V, max(1, n // 2)), size=n)  # duplicates guaranteed
        brute = np.zeros(V)
        for i in range(n):
            brute[toks[i]] += a[i] / (1.0 - a[-1])
        p_ptr, _ = pm.pointer_distribution(a[None, :], toks[None, :], V)
        worst = max(worst, float(np.max(np.abs(p_ptr[0] - brute))))
    record(4, worst < 1e-12, f"max deviation {worst:.1e} over 100 windows")


# ---------------------------------------------------------------- 5

def test_c05_parameter_accounting():
    ok, details = True, []
    for H in (2, 10, 650):
        counts = rc.param_count(rc.init_params(13, H, 2, nx.make_rng(0), dtype=np.float32))
        ok &= counts["pointer"] == H * H + 2 * H
        ok &= counts["lstm_layers"] == [8 * H * H + 4 * H] * 2
    medium = rc.param_count(rc.init_params(10_000, 650, 2, nx.make_rng(0), dtype=np.float32))["total"]
    within = abs(medium - 21e6) / 21e6
    record(5, ok and within < 0.05, f"formulas hold for H in 2/10/650, medium total {medium / 1e6:.2f}M "
                                    f"({within:.1%} from 21M)")


# ---------------------------------------------------------------- 6

def test_c06_truncated_bptt(monkeypatch):
    stream = np.array([3, 7, 1, 9, 0, 11, 4, 2, 8, 5])
    params = rc.init_params(12, 4, 1, nx.make_rng(6), init_scale=0.3, dtype=np.float64)
    cfg = TrainConfig(L=5, batch_size=1, k1=1, k2=3, lr=0.0, clip_norm=1e9, zoneout_rate=0.0,
                      dropout_rate=0.0, dtype="float64")
    trainer = Trainer(params, cfg)
    grads = torch_oracle.trainer_grads(trainer, monkeypatch)
    trainer.start_epoch(stream)
    worst, steps_ok = 0.0, True
    for t in trainer.positions():
        info = trainer.tbptt_step(t)
        steps_ok &= info.bptt_steps == min(t + 1, 3)
        _, want = torch_oracle.truncated_grads(params, stream[None, :], t, 3, 5)
        worst = max(worst, max(float(np.max(np.abs(grads[-1][k] - want[k]))) for k in want))
    record(6, worst < 1e-10 and steps_ok and len(grads) == 9,
           f"max gradient deviation {worst:.1e} over 9 steps, every step spans min(t+1, 3) timesteps {steps_ok}")


# ---------------------------------------------------------------- 7, 8

@pytest.fixture(scope="session")
def benchmark():
    return run_benchmark(BenchmarkConfig())


def test_c07_toy_benchmark(benchmark):
    ppl = benchmark.test_ppl
    ratio = ppl["pointer-sentinel"] / ppl["lstm"]
    diffs = [b["mean_diff"] for b in benchmark.buckets.buckets]
    best = int(np.argmax(diffs))
    budget = all(s <= 15 * 60 for s in benchmark.train_seconds.values())
    record(7, ratio <= 0.9 and best == 0 and budget,
           f"pointer {ppl['pointer-sentinel']:.2f} vs lstm {ppl['lstm']:.2f} (ratio {ratio:.3f}), "
           f"largest NLL gain in bucket {best} ({diffs[best]:.3f} nats; "
           f"train {benchmark.train_seconds['lstm']:.0f}s / {benchmark.train_seconds['pointer-sentinel']:.0f}s)")


def test_c08_trace_sanity(benchmark, tmp_path):
    path = tmp_path / "traces.jsonl"
    an.dump_traces(benchmark.models["pointer-sentinel"], benchmark.test_ids, benchmark.config.L, 0.5,
                   path, vocab=benchmark.vocab)
    names = set(benchmark.names)
    hits = total = 0
    for rec in an.read_traces(path):
        if rec["target"] not in names or rec["g"] >= 0.5:
            continue
        total += 1
        top = max(rec["window"], key=lambda e: e["a"])
        hits += top["token"] == rec["target"]
    frac = hits / total if total else 0.0
    record(8, total > 0 and frac >= 0.9, f"{hits}/{total} rare-name records ({frac:.1%}) point at a prior occurrence")


# ---------------------------------------------------------------- 9

def test_c09_corpus_suite():
    rng = nx.make_rng(9)
    words = [f"t{i}" for i in range(80)]
    weights = 1.0 / np.arange(1, 81)
    tokens = list(rng.choice(words, size=1000, p=weights / weights.sum()))
    vocab = cp.build_vocab(tokens, min_count=3)
    recount = {}
    for t in tokens:
        recount[t] = recount.get(t, 0) + 1
    kept = {t for t, c in recount.items() if c >= 3}
    vocab_ok = set(vocab.token_of) - set(cp.RESERVED) == kept and all(vocab.counts[t] == recount[t] for t in kept)
    tok_ok = " ".join(cp.wikitext_normalize("8,600")) == "8 @,@ 600"
    held_out = list(rng.choice(words + ["zz1", "zz2"], size=400))
    oov = cp.stats(held_out, vocab).oov_rate
    brute = sum(t not in kept for t in held_out) / len(held_out)
    again = cp.build_vocab(list(tokens), min_count=3)
    det_ok = again.token_of == vocab.token_of and cp.stats(held_out, again).oov_rate == oov
    record(9, vocab_ok and tok_ok and oov == brute and det_ok,
           f"vocab recount {vocab_ok}, 8,600 -> 8 @,@ 600 {tok_ok}, OoV {oov:.4f} vs brute {brute:.4f}, "
           f"deterministic {det_ok}")


# ---------------------------------------------------------------- 10

def _schedule_trace(ppls):
    s = Schedule(1.0, patience=3, max_epochs=64)
    lrs = []
    for p in ppls:
        lrs.append(s.lr)
        if s.update(p):
            break
    return lrs, s.epoch, s.stopped


def test_c10_schedule_suite():
    # hand-traced: halve after each worse epoch; stop 3 epochs after the best
    cases = [
        ([100, 90, 95, 85, 86, 80], [1, 1, 1, .5, .5, .25], 6, False),
        ([100, 90, 92, 91, 93, 10], [1, 1, 1, .5, .5], 5, True),
        ([100, 100, 100, 100], [1, 1, 1, 1], 4, True),
        ([50, 60, 55, 49, 70, 71, 72], [1, 1, .5, .5, .5, .25, .125], 7, True),
        ([1000 - i for i in range(80)], [1] * 64, 64, True),
    ]
    bad = []
    for ppls, lrs, epochs, stopped in cases:
        got = _schedule_trace(ppls)
        if got != (lrs, epochs, stopped):
            bad.append((ppls[:6], got))
    record(10, not bad, f"{len(cases) - len(bad)}/{len(cases)} scripted sequences match" + (f"; {bad}" if bad else ""))
