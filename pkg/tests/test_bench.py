import csv
import io

import numpy as np
import pytest

from loraprun import bench, checkpoint as ck, data as ds
from loraprun.accountant import pruned_descriptor
from loraprun.lora import LoraConfig, count_lora_params


@pytest.fixture(scope="module")
def copy_tsv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "copy.tsv"
    corpus = ds.synth_corpus(ds.SynthSpec(n_examples=50, mode="copy", findings_words=(1, 3),
                                          lexicon_size=12), seed=0)
    ds.write_tsv(path, corpus.examples)
    return path


def small_cfg(path, **kw):
    base = dict(data_path=str(path), n_layers=6, d_model=16, d_ffn=32, n_heads=2, max_src_len=32,
                max_tgt_len=32, max_gen_len=24, epochs=2, batch_size=8, accumulation=1, lr=3e-3,
                lora_lr=3e-3, warmup_steps=2, beam_width=2, greedy_eval=True, rank=2, alpha=4.0)
    base.update(kw)
    return bench.ExperimentConfig(**base)


def test_config_parse_and_overrides():
    cfg = bench.parse_config("regime = lora  # comment\nrank = 8\ngreedy_eval = yes\n", {"rank": "4"})
    assert (cfg.regime, cfg.rank, cfg.greedy_eval) == ("lora", 4, True)
    assert bench.parse_config(cfg.to_text()) == cfg
    assert bench.ExperimentConfig().eval_fraction == 0.3 and bench.ExperimentConfig().beam_width == 6
    for text in ("bogus = 1", "rank", "rank = x", "greedy_eval = maybe", "regime = half",
                 "eval_fraction = 0", "epochs = 0", "placement = KV"):
        with pytest.raises(bench.ConfigError):
            bench.parse_config(text)
    with pytest.raises(bench.ConfigError):
        bench.parse_config("", {"nope": "1"})


@pytest.mark.parametrize("spe, epochs, frac, expect", [
    (4, 2, 0.5, [2, 4, 6, 8]), (10, 1, 0.3, [3, 6, 9]), (1, 3, 0.3, [1, 2, 3]), (7, 1, 1.0, [7])])
def test_eval_schedule(spe, epochs, frac, expect):
    assert bench.eval_schedule(spe, epochs, frac) == expect


def test_smoke_full_run(copy_tsv, tmp_path):
    cfg = small_cfg(copy_tsv, eval_fraction=0.5, out_dir=str(tmp_path / "run"))
    bundle = bench.load_data(cfg)
    assert len(bundle.train) == 42  # 6 steps per epoch, so an eval point every 3 steps
    base, _ = bench.load_base(cfg, len(bundle.vocab))
    run = bench.train(cfg, bundle, base)
    row = run.row
    assert row.rel_speed == 100.0 and row.r1 >= 0 and row.tokens_per_sec > 0
    assert len(row.curve) == 4
    assert row.best_valid_r1 == max(p.r1 for p in row.curve)
    assert row.best_step in [p.step for p in row.curve]
    assert row.trained_params == row.total_params == base.num_parameters()
    # the model handed back carries the best weights
    report, _ = bench.score(run.model, bundle.valid, bundle.valid_text, bundle.vocab, cfg, greedy=True)
    assert report.mean()["r1"] == pytest.approx(row.best_valid_r1, abs=1e-9)
    best = ck.restore(tmp_path / "run" / "best.lopr")
    for k, t in best.params.items():
        np.testing.assert_array_equal(t.data, run.model.params[k].data)
    last = ck.read(tmp_path / "run" / "last.lopr")
    assert last.meta["step"] == 12 and "optim" in last.meta


def test_lora_prune_row_counts(copy_tsv):
    cfg = small_cfg(copy_tsv, regime="lora+prune", epochs=1, eval_fraction=1.0)
    bundle = bench.load_data(cfg)
    base, _ = bench.load_base(cfg, len(bundle.vocab))
    row = bench.train(cfg, bundle, base).row
    expect = count_lora_params(pruned_descriptor(base.descriptor), LoraConfig(2, 4.0, "FF"))
    assert row.trained_params == expect
    assert (row.placement, row.rank) == ("FF", 2)


def test_frozen_base_after_lora_training(copy_tsv):
    cfg = small_cfg(copy_tsv, regime="lora", epochs=1, eval_fraction=1.0)
    bundle = bench.load_data(cfg)
    base, _ = bench.load_base(cfg, len(bundle.vocab))
    before = base.state_dict()
    run = bench.train(cfg, bundle, base)
    for k, t in run.model.model.params.items():
        assert t.data.tobytes() == before[k].tobytes()
    for k, t in base.params.items():
        assert t.data.tobytes() == before[k].tobytes()


def test_grid_report_and_files(copy_tsv, tmp_path):
    cfg = small_cfg(copy_tsv, epochs=1, eval_fraction=1.0)
    report = bench.run_grid(cfg, ["full", "lora"], placements=["QV", "FF"])
    assert not report.errors
    assert [(r.regime, r.placement) for r in report.rows] == [("full", "-"), ("lora", "QV"), ("lora", "FF")]
    assert report.rows[0].rel_speed == 100.0
    paths = bench.write_report(report, tmp_path, "grid")
    rows = list(csv.DictReader(io.StringIO(paths[0].read_text())))
    assert len(rows) == 3 and rows[0]["rel_speed"] == "100.0000"
    assert "regime" in paths[2].read_text().splitlines()[0]
    assert paths[1].read_text().startswith("regime,placement,rank,step")


def test_grid_without_full_row_has_nan_speed(copy_tsv):
    report = bench.run_grid(small_cfg(copy_tsv, epochs=1, eval_fraction=1.0), ["prune"])
    assert np.isnan(report.rows[0].rel_speed)


def test_grid_collects_row_errors(copy_tsv):
    report = bench.run_grid(small_cfg(copy_tsv, epochs=1, eval_fraction=1.0, rank=64), ["lora", "prune"])
    assert list(report.errors) == ["lora"] and len(report.rows) == 1


def test_rank_sweep_counts_linear(copy_tsv):
    report = bench.rank_sweep(small_cfg(copy_tsv, epochs=1, eval_fraction=1.0), [1, 2, 4, 4])
    counts = [r.trained_params for r in report.rows]
    assert counts == [counts[0] * k for k in (1, 2, 4, 4)]
    a, b = (bench.report_rows(bench.GridReport([r])) for r in report.rows[2:])
    assert {k: v for k, v in a[0].items() if k != "tokens_per_sec"} == \
        {k: v for k, v in b[0].items() if k != "tokens_per_sec"}
    with pytest.raises(bench.ConfigError):
        bench.rank_sweep(small_cfg(copy_tsv), [0])


def test_missing_data_config():
    with pytest.raises(bench.ConfigError):
        bench.load_data(bench.ExperimentConfig())
    with pytest.raises(bench.ConfigError):
        bench.load_data(bench.ExperimentConfig(train_path="x.tsv"))


def test_base_checkpoint_carries_vocab(copy_tsv, tmp_path):
    cfg = small_cfg(copy_tsv)
    bundle = bench.load_data(cfg)
    base, _ = bench.load_base(cfg, len(bundle.vocab))
    ck.save(tmp_path / "b.lopr", base, extra={"vocab": bundle.vocab.to_text()})
    again, vocab = bench.load_base(cfg.replace(base_checkpoint=str(tmp_path / "b.lopr")))
    assert vocab == bundle.vocab and again.num_parameters() == base.num_parameters()


def test_measure_speed_returns_positive_rates(copy_tsv):
    cfg = small_cfg(copy_tsv)
    bundle = bench.load_data(cfg)
    base, _ = bench.load_base(cfg, len(bundle.vocab))
    batch = next(ds.batches(bundle.train, 8, 32, 32))
    speeds = bench.measure_speed(base, ["full", "lora+prune"], batch, cfg, steps=1, rounds=1)
    assert set(speeds) == {"full", "lora+prune"} and min(speeds.values()) > 0
