import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from ctzip import cli, codec, metrics, models
from ctzip.imaging import GrayImage, denormalize, load_pgm, otsu_threshold, save_pgm
from ctzip.synthdata import PorousSpec, gen_noisy_gray, gen_porous_binary
from ctzip.training import read_loss_csv


def run(*args):
    return cli.run([str(a) for a in args])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("synth", "--output", data, "--count", 6, "--size", 16, "--seed", 1, "--correlation", 4) == 0
    ckpt = root / "m.ctz"
    assert run("train", "--input", data, "--output", ckpt, "--kind", "vqvae", "--level", "l1",
               "--codebook", 8, "--epochs", 2, "--batch", 2, "--no-timing") == 0
    return root, data, ckpt


def test_synth_writes_dataset(workspace):
    _, data, _ = workspace
    files = sorted(os.listdir(data))
    assert files[:2] == ["manifest.txt", "slice_0000.pgm"] and len(files) == 7
    assert load_pgm(data / "slice_0003.pgm").shape == (16, 16)


def test_train_outputs(workspace):
    root, _, ckpt = workspace
    m = models.load_checkpoint(ckpt)
    assert m.kind == "vqvae" and m.codebook.K == 8
    log = read_loss_csv(root / "m.loss.csv")
    assert len(log) == 2 and all(e.seconds == 0.0 for e in log)


def test_compress_decompress_matches_library(workspace, tmp_path):
    _, data, ckpt = workspace
    src = data / "slice_0000.pgm"
    assert run("compress", "--input", src, "--checkpoint", ckpt, "--output", tmp_path / "a.ctl") == 0
    assert run("decompress", "--input", tmp_path / "a.ctl", "--checkpoint", ckpt, "--output", tmp_path / "a.pgm") == 0
    m = models.load_checkpoint(ckpt)
    art = codec.compress(m, load_pgm(src))
    assert (tmp_path / "a.ctl").read_bytes() == art.to_bytes()
    assert load_pgm(tmp_path / "a.pgm") == denormalize(codec.decompress(m, art))


def test_eval_csv_and_laplacian(workspace, tmp_path):
    _, data, _ = workspace
    a, b = data / "slice_0000.pgm", data / "slice_0001.pgm"
    out = tmp_path / "m.csv"
    assert run("eval", "--a", a, "--b", b, "--max", 1, "--output", out, "--laplacian", tmp_path / "lap.pgm") == 0
    assert run("eval", "--a", a, "--b", a, "--max", 1, "--output", out, "--append") == 0
    reps = metrics.read_reports_csv(out)
    assert len(reps) == 2
    expected = metrics.evaluate_gray_pair(load_pgm(a), load_pgm(b), 1)
    assert reps[0].mse == expected.mse and reps[0].msle == expected.msle
    assert reps[1].psnr_db == metrics.INF_PSNR
    assert load_pgm(tmp_path / "lap.pgm").shape == (16, 16)
    scale = (tmp_path / "lap.scale.txt").read_text()
    assert scale.startswith("min=")


def test_eval_stdout(workspace, capsys):
    _, data, _ = workspace
    assert run("eval", "--a", data / "slice_0000.pgm", "--b", data / "slice_0002.pgm") == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0] == metrics.CSV_HEADER and rows[1][2] == "255"


def test_binarize_and_otsu(tmp_path, capsys):
    b = gen_porous_binary(PorousSpec(32, 32, seed=4))
    g = gen_noisy_gray(b, 180, 60, 10, seed=4)
    save_pgm(g, tmp_path / "g.pgm")
    assert run("otsu", "--input", tmp_path / "g.pgm", "--output", tmp_path / "o.pgm") == 0
    out = capsys.readouterr().out
    assert out.startswith(f"threshold={otsu_threshold(g)} ")
    assert run("binarize", "--input", tmp_path / "g.pgm", "--output", tmp_path / "b.pgm") == 0
    seg = load_pgm(tmp_path / "b.pgm").data == 255
    assert np.mean(seg == b.data) > 0.97
    assert run("binarize", "--input", tmp_path / "g.pgm", "--output", tmp_path / "c.pgm", "--threshold", 0,
               "--no-filter", "--invert") == 0
    assert np.all(load_pgm(tmp_path / "c.pgm").data == 255)


def test_report_table(workspace, tmp_path, capsys):
    _, data, _ = workspace
    csvs = []
    for name, other in (("m1", "slice_0001.pgm"), ("m2", "slice_0002.pgm")):
        p = tmp_path / f"{name}.csv"
        assert run("eval", "--a", data / "slice_0000.pgm", "--b", data / other, "--max", 1, "--output", p) == 0
        csvs.append(p)
    capsys.readouterr()
    assert run("report", "--input", *csvs, "--labels", "A", "B") == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0] == ["metric", "original", "A", "B"]
    table = {r[0]: r[1:] for r in rows}
    assert set(table) >= {"MSE", "PSNR (dB)", "MSLE", "Porosity %"}
    rep = metrics.read_reports_csv(csvs[0])[0]
    assert float(table["MSE"][1]) == pytest.approx(rep.mse, rel=1e-5)


def test_config_file_overridden_by_flags(workspace, tmp_path):
    _, data, _ = workspace
    cfg = tmp_path / "train.cfg"
    cfg.write_text(f"# desk run\ninput={data}\noutput={tmp_path / 'c.ctz'}\nkind=dcnn\nepochs=3\nbatch=3\n")
    assert run("train", "--config", cfg, "--epochs", 1, "--no-timing") == 0
    assert len(read_loss_csv(tmp_path / "c.loss.csv")) == 1
    assert models.load_checkpoint(tmp_path / "c.ctz").kind == "dcnn"
    cfg.write_text("bogus=1\n")
    assert run("train", "--config", cfg) == cli.EXIT_USAGE


def test_exit_codes(workspace, tmp_path, capsys):
    _, data, ckpt = workspace
    assert run("--frobnicate") == cli.EXIT_USAGE
    assert run() == cli.EXIT_USAGE
    assert run("train", "--kind", "gan") == cli.EXIT_USAGE
    assert run("eval", "--a", tmp_path / "nope.pgm", "--b", tmp_path / "nope.pgm") == cli.EXIT_DATA
    save_pgm(GrayImage(np.zeros((8, 8), np.uint8)), tmp_path / "small.pgm")
    assert run("eval", "--a", data / "slice_0000.pgm", "--b", tmp_path / "small.pgm") == cli.EXIT_DATA
    assert run("compress", "--input", tmp_path / "small.pgm", "--checkpoint", ckpt,
               "--output", tmp_path / "x.ctl") == cli.EXIT_DATA
    (tmp_path / "junk.ctl").write_bytes(b"garbage")
    assert run("decompress", "--input", tmp_path / "junk.ctl", "--checkpoint", ckpt,
               "--output", tmp_path / "x.pgm") == cli.EXIT_DATA
    err = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith("ctzip") for line in err)


def test_thread_env(workspace, monkeypatch):
    _, data, _ = workspace
    args = ("eval", "--a", data / "slice_0000.pgm", "--b", data / "slice_0001.pgm")
    monkeypatch.setenv("CTZIP_THREADS", "1")
    assert run(*args) == 0
    monkeypatch.setenv("CTZIP_THREADS", "many")
    assert run(*args) == cli.EXIT_USAGE


def test_console_entry_point(workspace):
    _, data, _ = workspace
    proc = subprocess.run([sys.executable, "-m", "ctzip.cli", "otsu", "--input", str(data / "slice_0000.pgm")],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("threshold=")
    proc = subprocess.run([sys.executable, "-m", "ctzip.cli", "nonsense"], capture_output=True, text=True)
    assert proc.returncode == 1


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--output", tmp_path / name, "--count", 3, "--size", 32, "--porosity", 19.16,
                   "--seed", 7) == 0
    for f in sorted(os.listdir(tmp_path / "a")):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_eval_identity_row(workspace, capsys):
    _, data, _ = workspace
    src = data / "slice_0004.pgm"
    assert run("eval", "--a", src, "--b", src) == 0
    row = list(csv.reader(capsys.readouterr().out.splitlines()))[1]
    assert row[3:] == ["0.0", "inf", "0.0"]


def test_gray_synth(tmp_path):
    assert run("synth", "--output", tmp_path / "g", "--count", 2, "--size", 16, "--gray") == 0
    assert len(np.unique(load_pgm(tmp_path / "g" / "slice_0000.pgm").data)) > 2
