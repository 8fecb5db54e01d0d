"""``fusionlm`` command line: vocab-train, datagen, train, eval, blind-eval, compare, oracle.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path

from . import config as runcfg
from .alignment import load_segments, read_manifest, write_manifest
from .errors import ConfigError, DataError, NumericalError
from .estimator import FusionLanguageModel
from .evaluation import (blind_eval, nll_compare, perplexity, write_compare_report,
                         write_eval_report)
from .synthetic import GenSpec, generate, oracle_ppl, read_labels, write_corpus
from .tokenizer import Vocab, train_vocab
from .trainer import split_dev, write_epoch_log

log = logging.getLogger("fusionlm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _threads(value) -> int:
    if value is not None:
        return value
    env = os.environ.get("FUSIONLM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"FUSIONLM_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_vocab_train(args) -> int:
    texts = []
    for m in args.manifest:
        texts.extend(r.transcript for r in read_manifest(m))
    if args.corpus:
        texts.extend(Path(args.corpus).read_text(encoding="utf-8").splitlines())
    vocab = train_vocab(texts, args.size)
    out = _out_dir(args.out)
    vocab.save(out / "vocab.txt")
    print(f"{len(vocab)} pieces -> {out / 'vocab.txt'}")
    return EXIT_OK


def cmd_datagen(args) -> int:
    spec = GenSpec(num_objects=args.objects, num_templates=args.templates,
                   noise_sigma=args.noise, missing_feature_rate=args.missing_rate,
                   frames_per_segment=args.frames, segments=args.segments,
                   feature_dim=args.feature_dim, template_len=args.template_len, seed=args.seed)
    segments = generate(spec)
    out = _out_dir(args.out)
    paths = write_corpus(spec, segments, out)
    rows = read_manifest(paths["manifest"])
    train_rows, dev_rows = split_dev(rows, args.dev_fraction, args.seed)
    write_manifest(out / "train.tsv", train_rows)
    write_manifest(out / "dev.tsv", dev_rows)
    print(f"{len(segments)} segments ({len(train_rows)} train / {len(dev_rows)} dev) -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in runcfg.RUN_KEYS if getattr(args, k, None) is not None}
    cfg = runcfg.load_run_config(args.config, overrides)
    cfg["threads"] = _threads(cfg.get("threads"))
    for key in ("manifest", "vocab", "out"):
        if key not in cfg:
            raise ConfigError(f"train needs '{key}' (flag or config file)")
    out = _out_dir(cfg["out"])
    (out / "config.resolved").write_text(runcfg.dump(cfg), encoding="utf-8")
    log.info("resolved config:\n%s", runcfg.dump(cfg).rstrip())

    vocab = Vocab.load(cfg["vocab"])
    segments = load_segments(cfg["manifest"], vocab, cfg.get("visual_raw_dim"))
    dim = segments[0].features.shape[1]
    dev = None
    if cfg.get("dev_manifest"):
        dev = load_segments(cfg["dev_manifest"], vocab, dim)
    params = {k: cfg[k] for k in runcfg.MODEL_KEYS + runcfg.TRAIN_KEYS if k in cfg}
    params["visual_raw_dim"] = dim
    est = FusionLanguageModel(vocab=vocab, vocab_size=len(vocab), **params)
    est.fit(segments, dev_set=dev)
    est.save(out / "best", meta={"best_epoch": est.best_epoch_})
    write_epoch_log(out / "epochs.tsv", est.history_)
    best = est.history_[est.best_epoch_ - 1]
    print(f"best epoch {est.best_epoch_}: dev perplexity {best.dev_ppl:.6f} -> {out / 'best'}")
    return EXIT_OK


def _load_model(path, threads) -> FusionLanguageModel:
    est = FusionLanguageModel.load(path, threads=threads)
    if est.vocab is None:
        raise DataError(f"checkpoint {path} carries no vocabulary")
    return est


def _eval_common(args, blind: bool) -> int:
    model = _load_model(args.ckpt, _threads(args.threads))
    corpus = load_segments(args.manifest, model.vocab, model.config_.visual_raw_dim)
    corpus_id = args.corpus_id or Path(args.manifest).name
    model_id = args.model_id or str(args.ckpt)
    fn = blind_eval if blind else perplexity
    report = fn(model, corpus, corpus_id, model_id, keep_records=True)
    name = "blind_eval" if blind else "eval"
    write_eval_report(report, _out_dir(args.out), name, model.vocab)
    print(f"perplexity\t{report.perplexity!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    return _eval_common(args, blind=False)


def cmd_blind_eval(args) -> int:
    return _eval_common(args, blind=True)


def cmd_compare(args) -> int:
    threads = _threads(args.threads)
    a = _load_model(args.ckpt_a, threads)
    b = _load_model(args.ckpt_b, threads)
    corpus = load_segments(args.manifest, a.vocab, a.config_.visual_raw_dim)
    labels = read_labels(args.labels) if args.labels else None
    report = nll_compare(a, b, corpus, args.sample_n, args.seed, labels)
    label_a = args.label_a or a.config_.fusion.value
    label_b = args.label_b or b.config_.fusion.value
    write_compare_report(report, _out_dir(args.out), label_a, label_b)
    print(f"{label_b} wins\t{report.win_fraction!r}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    spec = GenSpec.from_cfg(Path(args.spec).read_text(encoding="utf-8"))
    condition = args.condition.replace("-", "_")
    value = oracle_ppl(spec, condition)
    print(repr(value))
    if args.out:
        (_out_dir(args.out) / "oracle.tsv").write_text(f"condition\toracle_ppl\n{condition}\t{value!r}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fusionlm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("vocab-train", help="train a wordpiece vocabulary")
    s.add_argument("--manifest", action="append", default=[], help="manifest TSV (repeatable)")
    s.add_argument("--corpus", help="plain text file, one line per utterance")
    s.add_argument("--size", type=int, default=2000)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_vocab_train)

    s = sub.add_parser("datagen", help="generate a grounded synthetic corpus")
    s.add_argument("--objects", type=int, default=8)
    s.add_argument("--templates", type=int, default=1)
    s.add_argument("--segments", type=int, default=1000)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--missing-rate", type=float, default=0.25)
    s.add_argument("--frames", type=int, default=4)
    s.add_argument("--feature-dim", type=int, default=16)
    s.add_argument("--template-len", type=int, default=3)
    s.add_argument("--dev-fraction", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_datagen)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", help="key=value config file")
    for key, kind in runcfg.RUN_KEYS.items():
        flag = "--" + key.replace("_", "-")
        s.add_argument(flag, dest=key, type=kind, default=None)
    s.set_defaults(fn=cmd_train)

    for name, fn, help_ in (("eval", cmd_eval, "perplexity of a checkpoint"),
                            ("blind-eval", cmd_blind_eval, "perplexity with zeroed visual features")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--manifest", required=True)
        s.add_argument("--out", default=".")
        s.add_argument("--corpus-id")
        s.add_argument("--model-id")
        s.add_argument("--threads", type=int)
        s.set_defaults(fn=fn)

    s = sub.add_parser("compare", help="wordpiece-level NLL comparison of two checkpoints")
    s.add_argument("--ckpt-a", required=True)
    s.add_argument("--ckpt-b", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--labels")
    s.add_argument("--sample-n", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--label-a")
    s.add_argument("--label-b")
    s.add_argument("--out", default=".")
    s.add_argument("--threads", type=int)
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("oracle", help="closed-form oracle perplexity of a generator spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--condition", required=True, choices=("text_only", "text-only", "multimodal"))
    s.add_argument("--out")
    s.set_defaults(fn=cmd_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
    except UsageError as exc:
        print(f"{exc}\n\n{parser.format_usage()}", file=sys.stderr, end="")
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.fn(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
