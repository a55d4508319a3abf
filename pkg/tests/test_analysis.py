import numpy as np
import pytest

from pointer_sentinel import analysis as an
from pointer_sentinel import corpus as cp
from pointer_sentinel import numerics as nx
from pointer_sentinel import recurrent as rc
from conftest import make_params


def _ids(n, V, seed=0):
    return nx.make_rng(seed).integers(0, V, size=n)


def test_uniform_model_perplexity_is_vocab_size():
    params = make_params(V=17, H=4, pointer=False)
    params.U.data[...] = 0.0
    report = an.perplexity(params, _ids(50, 17), L=5)
    assert report.tokens == 49
    assert report.perplexity == pytest.approx(17.0, rel=1e-12)


def test_untrained_pointer_model_is_near_uniform():
    params = rc.init_params(10, 16, 1, nx.make_rng(0))
    # with the default window every word of a 10-word vocabulary is almost always present,
    # so uniform attention spreads mass evenly over the vocabulary
    report = an.perplexity(params, _ids(2000, 10), L=100)
    assert abs(report.perplexity - 10) < 0.2 * 10


def test_chunked_scoring_matches_single_pass():
    params = make_params(V=9, H=5, depth=2)
    ids = _ids(60, 9, seed=1).reshape(2, 30)
    whole = an.StreamScorer(params, 7, batch=2).feed(ids)
    scorer = an.StreamScorer(params, 7, batch=2)
    parts = [scorer.feed(ids[:, a:b]) for a, b in [(0, 1), (1, 11), (11, 12), (12, 30)]]
    np.testing.assert_array_equal(np.concatenate(parts, axis=1), whole)


def test_batch_layout_invariance():
    params = make_params(V=9, H=5)
    ids = _ids(90, 9, seed=2).reshape(3, 30)
    batched = an.StreamScorer(params, 6, batch=3).feed(ids)
    for row in range(3):
        alone = an.StreamScorer(params, 6).feed(ids[row])
        np.testing.assert_allclose(batched[row], alone[0], rtol=1e-8)


def test_eval_is_repeatable():
    params = make_params(V=9, H=5)
    ids = _ids(40, 9)
    reg = rc.RegularizerConfig(0.5, 0.5)
    a = an.perplexity(params, ids, 5, reg=reg, batch_size=2)
    b = an.perplexity(params, ids, 5, reg=reg, batch_size=2)
    assert a.perplexity == b.perplexity


def test_perplexity_needs_two_tokens():
    with pytest.raises(ValueError):
        an.perplexity(make_params(), [1], 5)


def test_bucket_compare_single_bucket_is_global_mean():
    rng = nx.make_rng(0)
    base, ptr = rng.random(100), rng.random(100)
    targets = rng.integers(0, 10, 100)
    report = an.bucket_compare(base, ptr, targets, np.arange(10) + 1, n_buckets=1)
    assert report.buckets[0]["mean_diff"] == float(np.mean(base - ptr))
    assert report.buckets[0]["tokens"] == 100


def test_bucket_compare_orders_rarest_first():
    targets = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    counts = np.array([100, 1, 50, 5])
    diff = np.array([0.0, 4.0, 1.0, 2.0, 0.0, 4.0, 1.0, 2.0])
    report = an.bucket_compare(diff, np.zeros(8), targets, counts, n_buckets=4)
    assert [b["mean_diff"] for b in report.buckets] == [4.0, 2.0, 1.0, 0.0]
    assert [b["min_freq"] for b in report.buckets] == [1, 5, 50, 100]


def test_bucket_compare_identical_streams_are_zero():
    nll = np.linspace(0, 3, 40)
    report = an.bucket_compare(nll, nll, np.arange(40) % 4, np.ones(4), n_buckets=20)
    assert all(b["mean_diff"] == 0.0 for b in report.buckets)


def test_bucket_compare_rejects_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        an.bucket_compare(np.zeros(5), np.zeros(4), np.zeros(5, int), np.ones(2))


def test_trace_thresholds(tmp_path):
    params = make_params(V=9, H=5)
    ids = _ids(40, 9)
    n = an.dump_traces(params, ids, 6, 1.0, tmp_path / "all.jsonl")
    assert n == 39
    records = an.read_traces(tmp_path / "all.jsonl")
    assert len(records) == 39
    for rec in records:
        assert sum(e["a"] for e in rec["window"]) + rec["g"] == pytest.approx(1.0, abs=1e-10)
        assert len(rec["window"]) <= 6
    assert an.dump_traces(params, ids, 6, 0.0, tmp_path / "none.jsonl") == 0
    assert (tmp_path / "none.jsonl").read_text() == ""


def test_trace_window_indexing(tmp_path):
    # the window for predicting token n covers the L words up to and including token n-1
    params = make_params(V=9, H=5)
    ids = np.array([1, 2, 3, 4, 5, 6, 7])
    an.dump_traces(params, ids, 3, 1.0, tmp_path / "t.jsonl")
    rec = an.read_traces(tmp_path / "t.jsonl")[-1]
    assert rec["target"] == 7
    assert [e["token"] for e in rec["window"]] == [4, 5, 6]
    assert rec["window"][-1]["back"] == 0


def test_render_traces(tmp_path):
    params = make_params(V=9, H=5)
    vocab = cp.Vocabulary([cp.UNK, cp.EOS, cp.FORMULA] + [f"w{i}" for i in range(6)])
    an.dump_traces(params, _ids(20, 9), 4, 1.0, tmp_path / "t.jsonl", vocab=vocab)
    records = an.read_traces(tmp_path / "t.jsonl")
    text = an.render_traces_text(records, max_records=3)
    assert text.count("target=") == 3
    an.render_traces_png(records, tmp_path / "t.png", max_records=5)
    assert (tmp_path / "t.png").read_bytes()[:4] == b"\x89PNG"


def test_zipf_export(tmp_path):
    vocab = cp.build_vocab("x y y z z z".split(), min_count=1)
    an.zipf_export(cp.stats("x y y z z z".split(), vocab), tmp_path / "z.tsv")
    assert (tmp_path / "z.tsv").read_text() == "rank\tfrequency\n1\t3\n2\t2\n3\t1\n"
    assert an.read_table(tmp_path / "z.tsv")[0] == {"rank": 1, "frequency": 3}
