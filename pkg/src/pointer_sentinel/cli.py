"""Command line: preprocess, train, eval, analyze."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from . import corpus as cp
from . import numerics as nx
from . import recurrent as rc
from .recurrent import ConfigError, RegularizerConfig
from .trainer import TrainConfig, epoch_loop

log = logging.getLogger("pointer_sentinel")

VOCAB_FILE = "vocab.tsv"
SPLITS = ("train", "valid", "test")


class CliError(Exception):
    """Reported as a one-line message with a non-zero exit code."""

    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def _env_path(name: str, default=None):
    value = os.environ.get(name)
    return Path(value) if value else default


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    config: dict
    model: str
    hidden: int
    depth: int
    vocab_size: int
    vocab_digest: str
    corpus: dict = field(default_factory=dict)  # file name -> sha256
    seed: int = 0
    init_scale: float = 0.05
    code_version: str = __version__
    outputs: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- preprocess

def _read_tokens(path: Path, fmt: str) -> list[str]:
    try:
        with open(path, encoding="utf-8", errors="replace") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", 2) from None
    if fmt == "raw":
        return cp.normalize_lines(line.rstrip("\n") for line in lines)
    return list(cp.iter_ptb_tokens(lines))


def cmd_preprocess(args) -> int:
    out = Path(args.out)
    sources = {"train": args.input, "valid": args.valid, "test": args.test}
    tokens = {}
    for split, path in sources.items():
        if path is None:
            continue
        tokens[split] = _read_tokens(Path(path), args.format)
        if not any(t != cp.EOS for t in tokens[split]):
            raise CliError(f"{path}: empty corpus")
    if args.vocab:
        vocab = cp.Vocabulary.load(args.vocab)
    else:
        vocab = cp.build_vocab(tokens["train"], args.min_count)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / VOCAB_FILE)
    for split, toks in tokens.items():
        cp.write_ids(out / f"{split}.ids", vocab.encode(toks), vocab)
        summary = cp.stats(toks, vocab).summary()
        print(json.dumps({"split": split, **summary}))
    return 0


# ---------------------------------------------------------------- train

def _load_corpus(corpus: Path, split: str):
    vocab_path = corpus / VOCAB_FILE
    ids_path = corpus / f"{split}.ids"
    for p in (vocab_path, ids_path):
        if not p.exists():
            raise CliError(f"missing {p}; run preprocess first", 2)
    vocab = cp.Vocabulary.load(vocab_path)
    try:
        ids = cp.read_ids(ids_path, vocab)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return vocab, ids


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        L=args.L, batch_size=args.batch, max_epochs=args.epochs, patience=args.patience,
        lr=args.lr, clip_norm=args.clip, k1=args.k1, k2=args.k2, seed=args.seed,
        aux_pointer_loss=args.aux_pointer_loss, zoneout_rate=args.zoneout,
        dropout_rate=args.dropout, zoneout_on=args.zoneout_on,
        window_states=args.window_states, fast_mode=args.fast_mode, dtype=args.dtype,
        eval_batch_size=args.eval_batch, max_steps_per_epoch=args.max_steps_per_epoch,
    )


def cmd_train(args) -> int:
    try:
        config = _train_config(args)
        config.regularizer()
        if args.H < 1 or args.depth < 1 or args.epochs < 0:
            raise ConfigError("--H and --depth must be positive, --epochs non-negative")
    except ConfigError as exc:
        raise CliError(f"usage error: {exc}", 2) from None
    corpus = Path(args.corpus)
    vocab, train_ids = _load_corpus(corpus, "train")
    _, valid_ids = _load_corpus(corpus, "valid")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pointer = args.model == "pointer-sentinel"
    params = rc.init_params(len(vocab), args.H, args.depth, nx.make_rng(config.seed),
                            pointer=pointer, init_scale=args.init_scale, dtype=config.np_dtype)
    manifest = RunManifest(
        config=asdict(config), model=args.model, hidden=args.H, depth=args.depth,
        vocab_size=len(vocab), vocab_digest=vocab.digest(),
        corpus={name: _sha256(corpus / name) for name in (VOCAB_FILE, "train.ids", "valid.ids")},
        seed=config.seed, init_scale=args.init_scale,
        outputs={"checkpoint": str(out / "model.npz"), "log": str(out / "train.log")},
    )
    manifest.write(out / "manifest.json")
    counts = rc.param_count(params)
    print(json.dumps({"model": args.model, "parameters": counts["total"], "pointer_parameters": counts["pointer"]}))

    ckpt_manifest = asdict(manifest)

    def save(p, state=None):
        meta = dict(ckpt_manifest)
        if state is not None:
            meta["epoch"] = state.epoch
            meta["valid_ppl"] = state.best_valid_ppl
        rc.save_checkpoint(out / "model.npz", p, meta)

    save(params)
    log_path = out / "train.log"
    log_path.write_text("")
    if config.max_epochs == 0:
        print(json.dumps({"epochs": 0, "checkpoint": str(out / "model.npz")}))
        return 0
    state = epoch_loop(params, train_ids, valid_ids, config, log_path=log_path, checkpoint=save)
    print(json.dumps({"epochs": state.epoch, "best_epoch": state.best_epoch,
                      "best_valid_ppl": state.best_valid_ppl, "checkpoint": str(out / "model.npz")}))
    return 0


# ---------------------------------------------------------------- eval

def _load_model(checkpoint: Path):
    if not checkpoint.exists():
        raise CliError(f"missing checkpoint {checkpoint}", 2)
    params, manifest = rc.load_checkpoint(checkpoint)
    cfg = manifest["config"]
    reg = RegularizerConfig(cfg["zoneout_rate"], cfg["dropout_rate"], "eval", cfg["zoneout_on"])
    return params, manifest, reg


def _check_vocab(manifest: dict, vocab: cp.Vocabulary):
    if manifest["vocab_digest"] != vocab.digest():
        raise CliError("vocabulary hash mismatch: checkpoint was trained on a different vocabulary")


def cmd_eval(args) -> int:
    params, manifest, reg = _load_model(Path(args.checkpoint))
    vocab, ids = _load_corpus(Path(args.corpus), args.split)
    _check_vocab(manifest, vocab)
    report = an.perplexity(params, ids, manifest["config"]["L"], reg=reg,
                           batch_size=args.batch, keep_nll=bool(args.nll_out))
    if args.nll_out:
        with open(args.nll_out, "w", encoding="utf-8") as fh:
            fh.write("target\tnll\n")
            for t, v in zip(report.targets, report.nll):
                fh.write(f"{int(t)}\t{float(v)!r}\n")
    print(json.dumps({"split": args.split, **report.summary()}))
    return 0


# ---------------------------------------------------------------- analyze

def _read_nll(path):
    rows = an.read_table(path)
    return np.array([r["target"] for r in rows]), np.array([r["nll"] for r in rows], dtype=np.float64)


def cmd_analyze(args) -> int:
    out = Path(args.out)
    if args.zipf:
        vocab, ids = _load_corpus(Path(args.zipf), args.split)
        stats = cp.stats(vocab.decode(ids), vocab)
        an.zipf_export(stats, out)
        print(json.dumps({"zipf": str(out), "rows": len(stats.zipf)}))
    elif args.buckets:
        base_path, ptr_path = (Path(p) for p in args.buckets)
        for p in (base_path, ptr_path):
            if not p.exists():
                raise CliError(f"missing {p}", 2)
        if args.corpus is None:
            raise CliError("--buckets needs --corpus for training frequencies", 2)
        vocab, _ = _load_corpus(Path(args.corpus), "train")
        tb, nb = _read_nll(base_path)
        tp, np_ = _read_nll(ptr_path)
        if not np.array_equal(tb, tp):
            raise CliError("NLL dumps score different token sequences")
        counts = np.array([vocab.counts.get(t, 0) for t in vocab.token_of])
        try:
            report = an.bucket_compare(nb, np_, tb, counts, args.n_buckets)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        with open(out, "w", encoding="utf-8") as fh:
            fh.write("bucket\tmin_freq\tmax_freq\tmean_diff\ttokens\n")
            for row in report.to_rows():
                fh.write("{bucket}\t{min_freq}\t{max_freq}\t{mean_diff!r}\t{tokens}\n".format(**row))
        print(json.dumps({"buckets": str(out), "n": report.n_buckets}))
    elif args.traces:
        if args.corpus is None:
            raise CliError("--traces needs --corpus", 2)
        params, manifest, reg = _load_model(Path(args.traces))
        vocab, ids = _load_corpus(Path(args.corpus), args.split)
        _check_vocab(manifest, vocab)
        n = an.dump_traces(params, ids, manifest["config"]["L"], args.threshold, out, reg=reg, vocab=vocab)
        print(json.dumps({"traces": str(out), "records": n}))
    elif args.render:
        src = Path(args.render)
        if not src.exists():
            raise CliError(f"missing {src}", 2)
        records = an.read_traces(src)
        if out.suffix == ".png":
            an.render_traces_png(records, out, args.max_records)
        else:
            out.write_text(an.render_traces_text(records, args.max_records), encoding="utf-8")
        print(json.dumps({"rendered": str(out), "records": min(len(records), args.max_records)}))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointer-sentinel", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="build a vocabulary and encode token streams")
    p.add_argument("input", help="training text")
    p.add_argument("--valid")
    p.add_argument("--test")
    p.add_argument("--out", default=_env_path("PSLM_CORPUS", Path("corpus")))
    p.add_argument("--min-count", type=int, default=3)
    p.add_argument("--format", choices=("ptb", "raw"), default="ptb")
    p.add_argument("--vocab", help="reuse an existing vocab.tsv instead of building one")
    p.set_defaults(func=cmd_preprocess)

    # defaults: two-layer H=650 medium configuration
    p = sub.add_parser("train", help="train a model")
    p.add_argument("--corpus", default=_env_path("PSLM_CORPUS", Path("corpus")))
    p.add_argument("--out", default=_env_path("PSLM_RUN", Path("run")))
    p.add_argument("--model", choices=("lstm", "pointer-sentinel"), default="pointer-sentinel")
    p.add_argument("--H", type=int, default=650)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--L", type=int, default=100)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=64)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--k1", type=int, default=1)
    p.add_argument("--k2", type=int, default=None, help="defaults to L")
    p.add_argument("--zoneout", type=float, default=0.5)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--zoneout-on", choices=("both", "h", "c"), default="both")
    p.add_argument("--window-states", choices=("pre_dropout", "post_dropout"), default="pre_dropout")
    p.add_argument("--aux-pointer-loss", action="store_true")
    p.add_argument("--fast-mode", action="store_true", help="k1 = k2 = L (smoke tests only)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--init-scale", type=float, default=0.05)
    p.add_argument("--eval-batch", type=int, default=1)
    p.add_argument("--max-steps-per-epoch", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", default=_env_path("PSLM_CORPUS", Path("corpus")))
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--nll-out", help="write per-token NLLs (for analyze --buckets)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="Zipf tables, frequency buckets, attention traces")
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--zipf", metavar="CORPUS", help="rank/frequency table of a preprocessed corpus")
    what.add_argument("--buckets", nargs=2, metavar=("BASELINE_NLL", "POINTER_NLL"))
    what.add_argument("--traces", metavar="CHECKPOINT", help="dump attention/gate traces")
    what.add_argument("--render", metavar="TRACES", help="render traces as text (.txt) or image (.png)")
    p.add_argument("--corpus")
    p.add_argument("--split", choices=SPLITS, default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--n-buckets", type=int, default=20)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--max-records", type=int, default=40)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
