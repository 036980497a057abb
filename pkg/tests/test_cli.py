import csv
import subprocess
import sys

import pytest

from loraprun import checkpoint as ck
from loraprun.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out-dir", str(out), "--n", "60", "--lexicon", "12", "--mode", "copy",
                 "--min-words", "1", "--max-words", "2"]) == EXIT_OK
    return out


TINY = ["--n_layers", "2", "--d_model", "16", "--d_ffn", "32", "--n_heads", "2", "--epochs", "1",
        "--batch_size", "8", "--accumulation", "1", "--max_src_len", "24", "--max_tgt_len", "24",
        "--max_gen_len", "20", "--beam_width", "2", "--greedy_eval", "true", "--eval_fraction", "1",
        "--lr", "3e-3", "--warmup_steps", "1", "--rank", "2"]


def test_synth_outputs(corpus):
    names = {p.name for p in corpus.iterdir()}
    assert names == {"documents.txt", "patterns.txt", "all.tsv", "train.tsv", "valid.tsv", "test.tsv"}
    assert len((corpus / "all.tsv").read_text().splitlines()) == 60


def test_dataset_stats(corpus, tmp_path, capsys):
    out = tmp_path / "stats.csv"
    assert main(["dataset-stats", str(corpus / "all.tsv"), "--output", str(out)]) == EXIT_OK
    (row,) = rows(out)
    assert row["examples"] == "60" and row["novel_1"] == "0.00"
    assert main(["dataset-stats", str(corpus / "documents.txt"), "--patterns", str(corpus / "patterns.txt")]) == 0
    assert "documents.txt" in capsys.readouterr().out


def test_params(tmp_path, capsys):
    out = tmp_path / "p.csv"
    assert main(["params", "--arch", "bart-large", "--regimes", "full,lora", "--csv", str(out)]) == EXIT_OK
    table = rows(out)
    assert [r["regime"] for r in table] == ["full", "lora"]
    assert table[0]["total_params"] == "406291456" and table[1]["trained_params"] == "3932160"
    assert main(["params", "--arch", "custom", "--d-model", "10", "--n-heads", "4"]) == EXIT_CONFIG


def test_evaluate(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("the cat sat\nfoo\n")
    (tmp_path / "r.txt").write_text("the cat sat\nbar\n")
    out = tmp_path / "e.csv"
    assert main(["evaluate", "--candidates", str(tmp_path / "c.txt"), "--references", str(tmp_path / "r.txt"),
                 "--output", str(out)]) == EXIT_OK
    table = rows(out)
    assert list(table[0]) == ["example_id", "r1", "r2", "rL", "bleu1", "bleu4"]
    assert table[0]["r1"] == "100.0000" and table[1]["r1"] == "0.0000"
    (tmp_path / "short.txt").write_text("x\n")
    assert main(["evaluate", "--candidates", str(tmp_path / "short.txt"),
                 "--references", str(tmp_path / "r.txt")]) == EXIT_CONFIG


def test_train_then_generate(corpus, tmp_path):
    run = tmp_path / "run"
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(f"data_path = {corpus / 'all.tsv'}\nregime = lora\n")
    assert main(["train", "--config", str(cfg), "--out_dir", str(run), "--save-adapters", *TINY]) == EXIT_OK
    assert {"best.lopr", "last.lopr", "adapters.lopr", "train.csv", "train.txt", "config.txt"} <= \
        {p.name for p in run.iterdir()}
    assert rows(run / "train.csv")[0]["regime"] == "lora"
    inp = tmp_path / "in.txt"
    inp.write_text("pa ko.\nzu.\n")
    out = tmp_path / "gen.txt"
    assert main(["generate", "--checkpoint", str(run / "best.lopr"), "--input", str(inp), "--output", str(out),
                 "--beam-width", "2", "--max-len", "10", "--scores"]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert len(lines) == 2 and all(len(line.split("\t")) == 2 for line in lines)
    # adapter-only checkpoints need their base
    assert main(["generate", "--checkpoint", str(run / "adapters.lopr"), "--input", str(inp)]) == EXIT_CONFIG


def test_grid_and_sweep(corpus, tmp_path):
    data = ["--data_path", str(corpus / "all.tsv")]
    assert main(["grid", *data, *TINY, "--regimes", "full,lora", "--out", str(tmp_path / "g")]) == EXIT_OK
    assert [r["rel_speed"] for r in rows(tmp_path / "g" / "grid.csv")][0] == "100.0000"
    assert main(["sweep", *data, *TINY, "--ranks", "1,2", "--out", str(tmp_path / "s")]) == EXIT_OK
    counts = [int(r["trained_params"]) for r in rows(tmp_path / "s" / "sweep.csv")]
    assert counts[1] == 2 * counts[0]


def test_error_codes(tmp_path):
    assert main(["train", "--regime", "half"]) == EXIT_CONFIG
    assert main(["train", "--data_path", str(tmp_path / "none.tsv")]) == EXIT_IO
    (tmp_path / "bad.lopr").write_bytes(b"junk")
    (tmp_path / "in.txt").write_text("x\n")
    assert main(["generate", "--checkpoint", str(tmp_path / "bad.lopr"), "--input", str(tmp_path / "in.txt")]) \
        == EXIT_IO
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "loraprun.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in ("train", "generate", "evaluate", "params", "dataset-stats", "synth", "grid", "sweep"):
        assert name in out.stdout
