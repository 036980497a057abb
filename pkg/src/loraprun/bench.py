"""Experiment orchestration: training under a regime, best-R-1 checkpointing, grids, sweeps, reports."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from loraprun import checkpoint as ckpt_io
from loraprun import data as ds
from loraprun import decode
from loraprun import numcore as nc
from loraprun.accountant import Regime, footprint
from loraprun.lora import AdaptedModel, LoraConfig, Placement, inject
from loraprun.metrics import MetricReport, tokenize
from loraprun.model import ArchDescriptor, TransformerModel, build_model, forward, seq_loss
from loraprun.optim import AdamWConfig, OptimState, accumulate_and_step
from loraprun.prune import apply_prune, prune_plan

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    regime: str = "full"
    placement: str = "FF"
    rank: int = 16
    alpha: float = 32.0
    # architecture, used when no base checkpoint is given
    n_layers: int = 6
    d_model: int = 64
    d_ffn: int = 256
    n_heads: int = 4
    base_checkpoint: str = ""
    # data
    data_path: str = ""
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    vocab_mode: str = "char"
    max_src_len: int = 1024
    max_tgt_len: int = 128
    max_eval_examples: int = 0
    # optimisation
    epochs: int = 10
    batch_size: int = 8
    accumulation: int = 2
    lr: float = 5e-5
    lora_lr: float = 1e-4
    warmup_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    # evaluation
    eval_fraction: float = 0.3
    beam_width: int = 6
    length_norm: float = 1.0
    greedy_eval: bool = False
    max_gen_len: int = 128
    seed: int = 0
    out_dir: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            Regime(self.regime)
            Placement(self.placement.upper())
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not 0.0 < self.eval_fraction <= 1.0:
            raise ConfigError("eval_fraction must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.accumulation < 1:
            raise ConfigError("epochs, batch_size and accumulation must be >= 1")
        if self.beam_width < 1 or self.rank < 1:
            raise ConfigError("beam_width and rank must be >= 1")
        if self.vocab_mode not in ("char", "word"):
            raise ConfigError("vocab_mode must be char or word")

    @property
    def lora(self) -> LoraConfig:
        return LoraConfig(self.rank, self.alpha, Placement(self.placement.upper()))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def _coerce(name: str, kind, raw: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None


def config_fields() -> dict[str, str]:
    return {f.name: (f.type if isinstance(f.type, str) else f.type.__name__)
            for f in dataclasses.fields(ExperimentConfig)}


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Flat ``key = value`` lines (``#`` comments); ``overrides`` win over file values."""
    kinds = config_fields()
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in kinds:
            raise ConfigError(f"line {lineno}: unknown or malformed entry {raw.strip()!r}")
        values[key] = value.strip()
    for key, value in (overrides or {}).items():
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return ExperimentConfig(**{k: _coerce(k, kinds[k], v) for k, v in values.items()})


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_config(text, overrides)


# ---------------------------------------------------------------- data and models


@dataclass
class DataBundle:
    vocab: ds.Vocab
    train: list[ds.EncodedExample]
    valid: list[ds.EncodedExample]
    test: list[ds.EncodedExample]
    valid_text: list[ds.Seq2SeqExample]
    test_text: list[ds.Seq2SeqExample]


def _splits(cfg: ExperimentConfig) -> dict[str, list[ds.Seq2SeqExample]]:
    if cfg.train_path:
        if not (cfg.valid_path and cfg.test_path):
            raise ConfigError("train_path needs valid_path and test_path")
        return {"train": ds.read_tsv(cfg.train_path), "valid": ds.read_tsv(cfg.valid_path),
                "test": ds.read_tsv(cfg.test_path)}
    if cfg.data_path:
        return ds.split_examples(ds.read_tsv(cfg.data_path))
    raise ConfigError("set data_path or train_path/valid_path/test_path")


def load_data(cfg: ExperimentConfig, vocab: ds.Vocab | None = None) -> DataBundle:
    parts = _splits(cfg)
    if not parts["train"] or not parts["valid"] or not parts["test"]:
        raise ConfigError("every split needs at least one example")
    if vocab is None:
        vocab = ds.build_vocab((t for e in parts["train"] for t in (e.source, e.target)), cfg.vocab_mode)
    if cfg.max_eval_examples:
        parts["valid"] = parts["valid"][:cfg.max_eval_examples]
    enc = {k: ds.encode_examples(v, vocab) for k, v in parts.items()}
    return DataBundle(vocab, enc["train"], enc["valid"], enc["test"], parts["valid"], parts["test"])


def load_base(cfg: ExperimentConfig, vocab_size: int | None = None
              ) -> tuple[TransformerModel, ds.Vocab | None]:
    """Base model from ``base_checkpoint`` (with its stored vocab) or freshly seeded."""
    if cfg.base_checkpoint:
        ck = ckpt_io.read(cfg.base_checkpoint)
        model = ckpt_io.restore(ck)
        if isinstance(model, AdaptedModel):
            raise ConfigError("base_checkpoint must hold a plain model")
        vtext = ck.meta.get("extra", {}).get("vocab")
        return model, (ds.Vocab.from_text(vtext) if vtext else None)
    if vocab_size is None:
        raise ConfigError("vocab size unknown without a base checkpoint")
    desc = ArchDescriptor(cfg.n_layers, cfg.n_layers, cfg.d_model, cfg.d_ffn, cfg.n_heads, vocab_size,
                          max_positions=max(cfg.max_src_len, cfg.max_tgt_len))
    return build_model(desc, seed=cfg.seed), None


def prepare(cfg: ExperimentConfig, base: TransformerModel) -> TransformerModel | AdaptedModel:
    """Prune (if the regime asks), then inject adapters (if it asks)."""
    regime = Regime(cfg.regime)
    model = base.copy()
    model.unfreeze()
    if regime.pruned:
        d = model.descriptor
        if d.n_enc != d.n_dec:
            raise ConfigError("pruning needs equal encoder and decoder depth")
        model = apply_prune(model, prune_plan(d.n_enc))
    if regime.uses_lora:
        return inject(model, cfg.lora, seed=cfg.seed)
    return model


def trainable(model) -> list[nc.Tensor]:
    if isinstance(model, AdaptedModel):
        return model.trainable_parameters()
    return [t for t in model.parameters() if t.requires_grad]


# ---------------------------------------------------------------- evaluation


def generate(model, sources: Sequence[np.ndarray], cfg: ExperimentConfig, greedy: bool = False,
             chunk: int = 64) -> list[list[int]]:
    max_len = min(cfg.max_gen_len, decode.mdl._unwrap(model).descriptor.max_positions)
    out: list[list[int]] = []
    srcs = [np.asarray(s[:cfg.max_src_len]) for s in sources]
    for i in range(0, len(srcs), chunk):
        part = srcs[i:i + chunk]
        if greedy or cfg.beam_width == 1:
            out += decode.greedy_batch(model, part, max_len)
        else:
            hyps = decode.beam_search_batch(model, part, cfg.beam_width, max_len, cfg.length_norm)
            out += [list(h.tokens) for h in hyps]
    return [decode.strip_special(o) for o in out]


def score(model, examples: Sequence[ds.EncodedExample], refs: Sequence[ds.Seq2SeqExample],
          vocab: ds.Vocab, cfg: ExperimentConfig, greedy: bool = False) -> tuple[MetricReport, list[str]]:
    hyps = [vocab.decode(ids) for ids in generate(model, [e.src for e in examples], cfg, greedy)]
    report = MetricReport()
    for h, r in zip(hyps, refs):
        report.add(tokenize(h), tokenize(r.target))
    return report, hyps


# ---------------------------------------------------------------- training


@dataclass
class EvalPoint:
    step: int
    epoch: float
    loss: float
    r1: float
    r2: float
    rL: float


@dataclass
class ExperimentRow:
    regime: str
    placement: str
    rank: int
    seed: int
    trained_params: int
    total_params: int
    est_training_bytes: int
    tokens_per_sec: float
    rel_speed: float
    r1: float
    r2: float
    rL: float
    bleu1: float
    bleu4: float
    best_step: int
    best_valid_r1: float
    curve: list[EvalPoint] = field(default_factory=list)

    METRIC_KEYS = ("regime", "placement", "rank", "seed", "trained_params", "total_params",
                   "est_training_bytes", "r1", "r2", "rL", "bleu1", "bleu4", "best_step", "best_valid_r1")
    TIMING_KEYS = ("tokens_per_sec", "rel_speed")


@dataclass
class TrainedRun:
    row: ExperimentRow
    model: TransformerModel | AdaptedModel
    test_hypotheses: list[str]


def eval_schedule(steps_per_epoch: int, epochs: int, eval_fraction: float) -> list[int]:
    """Optimizer steps after which validation runs: every ceil(fraction * steps_per_epoch)."""
    every = max(1, math.ceil(eval_fraction * steps_per_epoch))
    return list(range(every, steps_per_epoch * epochs + 1, every))


def _snapshot(params: Sequence[nc.Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: Sequence[nc.Tensor], snap: Sequence[np.ndarray]) -> None:
    for p, s in zip(params, snap):
        p.data = s.copy()


def train(cfg: ExperimentConfig, bundle: DataBundle, base: TransformerModel,
          timing_skip: int = 3) -> TrainedRun:
    """Train one regime; evaluate on schedule; reload the best-R-1 weights; score the test split."""
    regime = Regime(cfg.regime)
    model = prepare(cfg, base)
    params = trainable(model)
    lr = cfg.lora_lr if regime.uses_lora else cfg.lr
    opt = AdamWConfig(lr=lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay,
                      warmup_steps=cfg.warmup_steps, accumulation=1)
    state = OptimState()
    n_batches = math.ceil(len(bundle.train) / cfg.batch_size)
    steps_per_epoch = math.ceil(n_batches / cfg.accumulation)
    schedule = set(eval_schedule(steps_per_epoch, cfg.epochs, cfg.eval_fraction))
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    def loss_fn(batch: ds.Batch) -> nc.Tensor:
        return seq_loss(forward(model, batch.src, batch.tgt_in), batch.tgt_out)

    curve: list[EvalPoint] = []
    best_r1, best_step, best = -1.0, 0, _snapshot(params)
    timed_tokens, timed_secs, step, recent = 0, 0.0, 0, []
    for epoch in range(cfg.epochs):
        it = ds.batches(bundle.train, cfg.batch_size, cfg.max_src_len, cfg.max_tgt_len, cfg.seed, epoch)
        micro = list(it)
        for start in range(0, len(micro), cfg.accumulation):
            group = micro[start:start + cfg.accumulation]
            t0 = time.perf_counter()
            try:
                state, loss = accumulate_and_step(params, group, loss_fn, state,
                                                  dataclasses.replace(opt, accumulation=len(group)))
            except nc.NonFiniteError as exc:
                raise nc.NonFiniteError(f"{cfg.regime}: training diverged at step {step + 1}: {exc}") from exc
            elapsed = time.perf_counter() - t0
            step += 1
            recent.append(loss)
            if step > timing_skip:
                timed_tokens += sum(b.n_tokens for b in group)
                timed_secs += elapsed
            if step in schedule:
                report, _ = score(model, bundle.valid, bundle.valid_text, bundle.vocab, cfg, cfg.greedy_eval)
                m = report.mean()
                curve.append(EvalPoint(step, step / steps_per_epoch, float(np.mean(recent)),
                                       m["r1"], m["r2"], m["rL"]))
                recent = []
                log.info("%s step %d loss %.4f valid R-1 %.2f", cfg.regime, step, curve[-1].loss, m["r1"])
                if m["r1"] > best_r1:
                    best_r1, best_step, best = m["r1"], step, _snapshot(params)
                    if out_dir:
                        ckpt_io.save(out_dir / "best.lopr", model, step=step,
                                     extra={"vocab": bundle.vocab.to_text(), "valid_r1": best_r1})
    if out_dir:
        ckpt_io.save(out_dir / "last.lopr", model, step=step, optim_state=state, optim_params=params,
                     extra={"vocab": bundle.vocab.to_text()})
    _restore(params, best)
    report, hyps = score(model, bundle.test, bundle.test_text, bundle.vocab, cfg)
    m = report.mean()
    fp = footprint(base.descriptor, regime, cfg.lora)
    row = ExperimentRow(
        regime=regime.value, placement=cfg.lora.placement.value if regime.uses_lora else "-",
        rank=cfg.rank if regime.uses_lora else 0, seed=cfg.seed,
        trained_params=nc.parameters_count(params), total_params=fp.P_total,
        est_training_bytes=fp.est_training_bytes,
        tokens_per_sec=timed_tokens / timed_secs if timed_secs else 0.0, rel_speed=100.0,
        r1=m["r1"], r2=m["r2"], rL=m["rL"], bleu1=m["bleu1"], bleu4=m["bleu4"],
        best_step=best_step, best_valid_r1=best_r1, curve=curve)
    return TrainedRun(row, model, hyps)


def run_experiment(cfg: ExperimentConfig, bundle: DataBundle | None = None,
                   base: TransformerModel | None = None) -> ExperimentRow:
    _single_thread()
    if base is None:
        base, base_vocab = load_base(cfg, None) if cfg.base_checkpoint else (None, None)
        if bundle is None:
            bundle = load_data(cfg, base_vocab)
        if base is None:
            base, _ = load_base(cfg, len(bundle.vocab))
    elif bundle is None:
        bundle = load_data(cfg)
    return train(cfg, bundle, base).row


@dataclass
class GridReport:
    rows: list[ExperimentRow]
    errors: dict[str, str] = field(default_factory=dict)


def _relative(rows: list[ExperimentRow]) -> None:
    ref = next((r.tokens_per_sec for r in rows if r.regime == Regime.FULL.value), None)
    for r in rows:
        if ref:
            r.rel_speed = 100.0 if r.regime == Regime.FULL.value else 100.0 * r.tokens_per_sec / ref
        else:
            r.rel_speed = float("nan")


def run_grid(cfg: ExperimentConfig, regimes: Iterable[str], placements: Iterable[str] | None = None
             ) -> GridReport:
    """One row per regime (and placement for adapter regimes) on shared data, base and seed."""
    _single_thread()
    base, base_vocab = load_base(cfg, None) if cfg.base_checkpoint else (None, None)
    bundle = load_data(cfg, base_vocab)
    if base is None:
        base, _ = load_base(cfg, len(bundle.vocab))
    report = GridReport([])
    for regime in regimes:
        places = list(placements or [cfg.placement]) if Regime(regime).uses_lora else [cfg.placement]
        for place in places:
            row_cfg = cfg.replace(regime=regime, placement=place)
            key = regime if len(places) == 1 else f"{regime}/{place}"
            try:
                report.rows.append(train(row_cfg, bundle, base).row)
            except (nc.NonFiniteError, ValueError) as exc:
                report.errors[key] = str(exc)
    _relative(report.rows)
    return report


def rank_sweep(cfg: ExperimentConfig, ranks: Iterable[int]) -> GridReport:
    """Adapter regime at several ranks; other settings shared."""
    ranks = list(ranks)
    if any(r < 1 for r in ranks):
        raise ConfigError("ranks must be positive")
    if not Regime(cfg.regime).uses_lora:
        cfg = cfg.replace(regime=Regime.LORA.value)
    _single_thread()
    base, base_vocab = load_base(cfg, None) if cfg.base_checkpoint else (None, None)
    bundle = load_data(cfg, base_vocab)
    if base is None:
        base, _ = load_base(cfg, len(bundle.vocab))
    report = GridReport([])
    for r in ranks:
        try:
            report.rows.append(train(cfg.replace(rank=r), bundle, base).row)
        except (nc.NonFiniteError, ValueError) as exc:
            report.errors[f"rank={r}"] = str(exc)
    for row in report.rows:
        row.rel_speed = float("nan")
    return report


# ---------------------------------------------------------------- speed


def measure_speed(base: TransformerModel, regimes: Sequence[str], batch: ds.Batch, cfg: ExperimentConfig,
                  steps: int = 5, rounds: int = 3) -> dict[str, float]:
    """Training tokens/sec per regime on one fixed batch, from its fastest step.

    Rounds are interleaved across regimes.  Interference from other load only
    ever slows a step down, so the best step is the most stable estimate.
    """
    _single_thread()
    setups = {}
    for regime in regimes:
        model = prepare(cfg.replace(regime=regime), base)
        params = trainable(model)
        opt = AdamWConfig(lr=1e-4, warmup_steps=0)

        def loss_fn(b, model=model):
            return seq_loss(forward(model, b.src, b.tgt_in), b.tgt_out)

        state = OptimState()
        accumulate_and_step(params, [batch], loss_fn, state, opt)  # warm caches and moments
        setups[regime] = (params, loss_fn, state, opt)
    samples: dict[str, list[float]] = {r: [] for r in regimes}
    for _ in range(rounds):
        for regime in regimes:
            params, loss_fn, state, opt = setups[regime]
            for _ in range(steps):
                t0 = time.perf_counter()
                accumulate_and_step(params, [batch], loss_fn, state, opt)
                samples[regime].append(batch.n_tokens / (time.perf_counter() - t0))
    return {r: max(v) for r, v in samples.items()}


def _single_thread() -> None:
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass


# ---------------------------------------------------------------- reports


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def report_rows(report: GridReport) -> list[dict[str, str]]:
    keys = ExperimentRow.METRIC_KEYS + ExperimentRow.TIMING_KEYS
    return [{k: _fmt(getattr(r, k)) for k in keys} for r in report.rows]


def to_csv(report: GridReport) -> str:
    buf = io.StringIO()
    keys = ExperimentRow.METRIC_KEYS + ExperimentRow.TIMING_KEYS
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    w.writerows(report_rows(report))
    return buf.getvalue()


def curve_csv(report: GridReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["regime", "placement", "rank", "step", "epoch", "loss", "r1", "r2", "rL"])
    for r in report.rows:
        for p in r.curve:
            w.writerow([r.regime, r.placement, r.rank, p.step, _fmt(p.epoch), _fmt(p.loss),
                        _fmt(p.r1), _fmt(p.r2), _fmt(p.rL)])
    return buf.getvalue()


def aligned_table(rows: Sequence[dict[str, str]]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    widths = {k: max(len(k), *(len(str(r[k])) for r in rows)) for k in keys}
    lines = ["  ".join(k.rjust(widths[k]) for k in keys)]
    lines += ["  ".join(str(r[k]).rjust(widths[k]) for k in keys) for r in rows]
    return "\n".join(lines) + "\n"


def write_report(report: GridReport, out_dir: str | Path, stem: str = "report") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}.csv", out / f"{stem}_curve.csv", out / f"{stem}.txt"]
    paths[0].write_text(to_csv(report), encoding="utf-8")
    paths[1].write_text(curve_csv(report), encoding="utf-8")
    text = aligned_table(report_rows(report))
    if report.errors:
        text += "".join(f"error {k}: {v}\n" for k, v in report.errors.items())
    paths[2].write_text(text, encoding="utf-8")
    return paths
