"""Command line entry point: ``loraprun <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from loraprun import bench, checkpoint, data as ds, decode, metrics
from loraprun.accountant import Regime, footprint
from loraprun.lora import AdaptedModel, LoraConfig
from loraprun.model import ArchDescriptor, bart_large, t5_large
from loraprun.numcore import NonFiniteError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

ARCHS = {"bart-large": bart_large, "t5-large": t5_large}


class _Fail(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    group = p.add_argument_group("config overrides")
    for name in bench.config_fields():
        group.add_argument(f"--{name}", dest=f"cfg_{name}", metavar="VALUE")


def _config(args) -> bench.ExperimentConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return bench.load_config(args.config, overrides)


def _write_or_print(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- subcommands


def cmd_train(args) -> None:
    cfg = _config(args)
    bench._single_thread()
    base, base_vocab = bench.load_base(cfg, None) if cfg.base_checkpoint else (None, None)
    bundle = bench.load_data(cfg, base_vocab)
    if base is None:
        base, _ = bench.load_base(cfg, len(bundle.vocab))
    run = bench.train(cfg, bundle, base)
    report = bench.GridReport([run.row])
    if cfg.out_dir:
        bench.write_report(report, cfg.out_dir, "train")
        Path(cfg.out_dir, "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        if args.save_adapters and isinstance(run.model, AdaptedModel):
            checkpoint.save(Path(cfg.out_dir) / "adapters.lopr", run.model, adapters_only=True,
                            step=run.row.best_step, extra={"vocab": bundle.vocab.to_text()})
    sys.stdout.write(bench.aligned_table(bench.report_rows(report)))


def _load_for_inference(path: str, base_path: str | None):
    ck = checkpoint.read(path)
    base = None
    if ck.kind == "adapters":
        if not base_path:
            raise _Fail(EXIT_CONFIG, "adapter-only checkpoint needs --base")
        base = checkpoint.restore(base_path)
    model = checkpoint.restore(ck, base)
    vtext = ck.meta.get("extra", {}).get("vocab")
    if not vtext:
        raise _Fail(EXIT_CONFIG, f"{path} does not record a vocabulary")
    return model, ds.Vocab.from_text(vtext)


def cmd_generate(args) -> None:
    model, vocab = _load_for_inference(args.checkpoint, args.base)
    lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    sources = [line.split("\t")[0] for line in lines]
    max_len = min(args.max_len, bench.decode.mdl._unwrap(model).descriptor.max_positions)
    hyps = decode.beam_search_batch(model, [vocab.encode(s)[:args.max_src_len] for s in sources],
                                    args.beam_width, max_len, args.length_norm)
    out = []
    for h in hyps:
        text = vocab.decode(decode.strip_special(h.tokens))
        out.append(f"{text}\t{h.score(args.length_norm):.6f}" if args.scores else text)
    _write_or_print("".join(line + "\n" for line in out), args.output)


def cmd_evaluate(args) -> None:
    cands = Path(args.candidates).read_text(encoding="utf-8").splitlines()
    refs = Path(args.references).read_text(encoding="utf-8").splitlines()
    if len(cands) != len(refs):
        raise _Fail(EXIT_CONFIG, f"{len(cands)} candidate lines but {len(refs)} reference lines")
    report = metrics.score_corpus((c.split("\t")[0] for c in cands), refs)
    rows = [{"example_id": i, **{k: f"{v:.4f}" for k, v in r.items()}} for i, r in enumerate(report.rows)]
    fields = ["example_id", *metrics.MetricReport.KEYS]
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    mean = report.mean()
    sys.stdout.write(" ".join(f"{k}={mean[k]:.2f}" for k in metrics.MetricReport.KEYS) + "\n")


def _descriptor(args) -> ArchDescriptor:
    if args.arch in ARCHS:
        desc = ARCHS[args.arch]()
    else:
        desc = ArchDescriptor(args.n_layers, args.n_layers, args.d_model, args.d_ffn, args.n_heads,
                              args.vocab_size, args.max_positions, biases=not args.no_biases)
    try:
        desc.validate(allow_empty=True)
    except ValueError as exc:
        raise _Fail(EXIT_CONFIG, str(exc)) from None
    return desc


def cmd_params(args) -> None:
    desc = _descriptor(args)
    cfg = LoraConfig(args.rank, args.alpha, args.placement)
    regimes = [Regime(r) for r in args.regimes.split(",")] if args.regimes else list(Regime)
    rows = []
    for r in regimes:
        fp = footprint(desc, r, cfg, args.tasks)
        rows.append({k: str(v) for k, v in fp.as_row().items()})
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    sys.stdout.write(bench.aligned_table(rows))


def cmd_dataset_stats(args) -> None:
    rows = []
    for path in args.inputs:
        if args.patterns:
            spec = ds.load_pattern_spec(args.patterns)
            docs = Path(path).read_text(encoding="utf-8").splitlines()
            pairs = [ex for i, d in enumerate(docs) if (ex := ds.extract_pairs(d, spec, str(i)))]
            skipped = len([d for d in docs if d.strip()]) - len(pairs)
        else:
            pairs, skipped = ds.read_tsv(path), 0
        if not pairs:
            raise _Fail(EXIT_CONFIG, f"{path}: no usable examples")
        st = metrics.corpus_stats((e.source, e.target) for e in pairs)
        row = {"dataset": Path(path).name, **{k: (f"{v:.2f}" if isinstance(v, float) else str(v))
                                              for k, v in st.as_row().items()}}
        row["skipped"] = str(skipped)
        rows.append(row)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write_or_print(buf.getvalue(), args.output)


def cmd_synth(args) -> None:
    spec = ds.SynthSpec(n_examples=args.n, lexicon_size=args.lexicon, noise=args.noise, mode=args.mode,
                        findings_words=(args.min_words, args.max_words))
    corpus = ds.synth_corpus(spec, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "documents.txt").write_text("".join(doc + "\n" for _, doc in corpus.documents), encoding="utf-8")
    (out / "patterns.txt").write_text(corpus.pattern.to_text(), encoding="utf-8")
    ds.write_tsv(out / "all.tsv", corpus.examples)
    parts = ds.split_examples(corpus.examples)
    for name, items in parts.items():
        ds.write_tsv(out / f"{name}.tsv", items)
    sys.stdout.write(f"wrote {len(corpus.examples)} examples "
                     f"({', '.join(f'{k} {len(v)}' for k, v in parts.items())}); "
                     f"expected novel unigram {spec.expected_novel_unigram():.2f}%\n")


def _emit(report: bench.GridReport, args, stem: str) -> None:
    if args.out:
        bench.write_report(report, args.out, stem)
    sys.stdout.write(bench.aligned_table(bench.report_rows(report)))
    for key, err in report.errors.items():
        sys.stderr.write(f"row {key} failed: {err}\n")
    if report.errors and not report.rows:
        raise _Fail(EXIT_DIVERGED if all("diverged" in e for e in report.errors.values()) else EXIT_FAILURE,
                    "every row failed")


def cmd_grid(args) -> None:
    cfg = _config(args)
    regimes = args.regimes.split(",")
    for r in regimes:
        Regime(r)
    placements = args.placements.split(",") if args.placements else None
    _emit(bench.run_grid(cfg, regimes, placements), args, "grid")


def cmd_sweep(args) -> None:
    cfg = _config(args)
    ranks = [int(r) for r in args.ranks.split(",")]
    _emit(bench.rank_sweep(cfg, ranks), args, "sweep")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loraprun", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train one regime and checkpoint the best validation R-1")
    _add_config_flags(s)
    s.add_argument("--save-adapters", action="store_true", help="also write an adapter-only checkpoint")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("generate", help="beam-search outputs for one source per line")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--base", help="base model checkpoint for adapter-only checkpoints")
    s.add_argument("--input", required=True)
    s.add_argument("--output")
    s.add_argument("--beam-width", type=int, default=6)
    s.add_argument("--max-len", type=int, default=128)
    s.add_argument("--max-src-len", type=int, default=1024)
    s.add_argument("--length-norm", type=float, default=1.0)
    s.add_argument("--scores", action="store_true", help="append a tab and the normalised log-prob")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("evaluate", help="ROUGE/BLEU of candidate lines against reference lines")
    s.add_argument("--candidates", required=True)
    s.add_argument("--references", required=True)
    s.add_argument("--output", help="per-example CSV report")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("params", help="parameter, storage and memory accounting per regime")
    s.add_argument("--arch", default="bart-large", help="bart-large, t5-large or custom")
    s.add_argument("--n-layers", type=int, default=6)
    s.add_argument("--d-model", type=int, default=64)
    s.add_argument("--d-ffn", type=int, default=256)
    s.add_argument("--n-heads", type=int, default=4)
    s.add_argument("--vocab-size", type=int, default=64)
    s.add_argument("--max-positions", type=int, default=128)
    s.add_argument("--no-biases", action="store_true")
    s.add_argument("--rank", type=int, default=16)
    s.add_argument("--alpha", type=float, default=32.0)
    s.add_argument("--placement", default="FF")
    s.add_argument("--tasks", type=int, default=1)
    s.add_argument("--regimes", help="comma list; default all four")
    s.add_argument("--csv")
    s.set_defaults(fn=cmd_params)

    s = sub.add_parser("dataset-stats", help="corpus statistics as CSV")
    s.add_argument("inputs", nargs="+", help="TSV files, or document files with --patterns")
    s.add_argument("--patterns", help="section pattern spec; inputs are then one document per line")
    s.add_argument("--output")
    s.set_defaults(fn=cmd_dataset_stats)

    s = sub.add_parser("synth", help="write a seeded synthetic report corpus")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--lexicon", type=int, default=120)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--mode", default="summary", choices=["summary", "copy"])
    s.add_argument("--min-words", type=int, default=3)
    s.add_argument("--max-words", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("grid", help="train every regime on shared data and report")
    _add_config_flags(s)
    s.add_argument("--regimes", default="full,prune,lora,lora+prune")
    s.add_argument("--placements", help="comma list of adapter placements, e.g. QV,FF")
    s.add_argument("--out", help="report directory")
    s.set_defaults(fn=cmd_grid)

    s = sub.add_parser("sweep", help="adapter rank sweep")
    _add_config_flags(s)
    s.add_argument("--ranks", default="4,8,16,32")
    s.add_argument("--out", help="report directory")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except _Fail as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.code
    except NonFiniteError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DIVERGED
    except (bench.ConfigError, KeyError) as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except (OSError, checkpoint.CheckpointError) as exc:
        sys.stderr.write(f"I/O error: {exc}\n")
        return EXIT_IO
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
