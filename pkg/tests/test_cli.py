import csv
import math
import shutil

import numpy as np
import pytest

from dense_stego import cli
from dense_stego.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from dense_stego.image_io import DatasetManifest, load_image
from dense_stego.metrics import psnr
from dense_stego.training import load_checkpoint


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, desk_manifest_path):
    out = tmp_path_factory.mktemp("cli_train")
    code = main(["train", "--manifest", str(desk_manifest_path), "--out", str(out), "--size", "8",
                 "--epochs", "2", "--seed", "1"])
    assert code == EXIT_OK
    return out


def fixture_image(desk_manifest_path, i):
    return str(desk_manifest_path.parent / f"img_{i:02d}.png")


# -- train ---------------------------------------------------------------------


def test_train_writes_artifacts(tiny_run):
    assert (tiny_run / "checkpoint.dsc").is_file()
    rows = (tiny_run / "loss.csv").read_text().splitlines()
    assert rows[0] == "epoch,step,zeta,tau,gamma"
    assert len(rows) == 1 + 2 * 2
    ckpt = load_checkpoint(tiny_run / "checkpoint.dsc")
    assert ckpt.config.image_size == 8 and ckpt.epoch == 2


def test_train_zero_epochs_gives_initial_weights(tmp_path, desk_manifest_path):
    assert main(["train", "--manifest", str(desk_manifest_path), "--out", str(tmp_path), "--size", "8",
                 "--epochs", "0", "--seed", "4"]) == EXIT_OK
    ckpt = load_checkpoint(tmp_path / "checkpoint.dsc")
    assert ckpt.optimizer_step == 0 and ckpt.epoch == 0
    from dense_stego.network import StegoNet, state_arrays

    fresh = state_arrays(StegoNet(ckpt.config, seed=4))
    assert all(np.array_equal(ckpt.arrays[k], v) for k, v in fresh.items())


def test_train_missing_manifest(tmp_path, capsys):
    assert main(["train", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert "manifest not found" in capsys.readouterr().err


@pytest.mark.parametrize("flags", [["--epochs", "-1"], ["--beta", "-1"], ["--size", "30"], ["--preset", "big"],
                                   ["--batch", "0"]])
def test_train_bad_overrides(tmp_path, desk_manifest_path, flags):
    argv = ["train", "--manifest", str(desk_manifest_path), "--out", str(tmp_path / "o"), *flags]
    assert main(argv) == EXIT_USAGE
    assert not (tmp_path / "o").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(tmp_path, desk_manifest_path, capsys):
    argv = ["train", "--manifest", str(desk_manifest_path), "--out", str(tmp_path), "--size", "8",
            "--epochs", "3", "--lr", "1e38"]
    assert main(argv) == EXIT_NUMERIC
    assert "not finite" in capsys.readouterr().err


def test_bad_thread_env(tmp_path, desk_manifest_path, monkeypatch):
    monkeypatch.setenv("DENSE_STEGO_THREADS", "zero")
    assert main(["train", "--manifest", str(desk_manifest_path), "--out", str(tmp_path), "--epochs", "0"]) == EXIT_USAGE


def test_no_command_is_usage_error():
    assert main([]) == EXIT_USAGE


# -- hide / reveal -------------------------------------------------------------


def test_hide_size_psnr_and_repeatability(tiny_run, tmp_path, desk_manifest_path, capsys):
    ckpt = str(tiny_run / "checkpoint.dsc")
    c, s = fixture_image(desk_manifest_path, 0), fixture_image(desk_manifest_path, 9)
    for name in ("a.png", "b.png"):
        assert main(["hide", "--checkpoint", ckpt, "--carrier", c, "--secret", s,
                     "--out", str(tmp_path / name)]) == EXIT_OK
    stdout = capsys.readouterr().out
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    stego = load_image(tmp_path / "a.png")
    assert stego.shape == (8, 8, 3)
    expected = psnr(load_image(c, 8), stego)
    assert f"PSNR {expected:.3f} dB" in stdout


def test_hide_directory_output_and_jpeg_rejected(tiny_run, tmp_path, desk_manifest_path):
    ckpt = str(tiny_run / "checkpoint.dsc")
    c, s = fixture_image(desk_manifest_path, 1), fixture_image(desk_manifest_path, 2)
    assert main(["hide", "--checkpoint", ckpt, "--carrier", c, "--secret", s, "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "stego.png").is_file()
    assert main(["hide", "--checkpoint", ckpt, "--carrier", c, "--secret", s,
                 "--out", str(tmp_path / "x.jpg")]) == EXIT_USAGE
    assert main(["hide", "--checkpoint", ckpt, "--carrier", c, "--secret", s, "--size", "16",
                 "--out", str(tmp_path / "y.png")]) == EXIT_USAGE


def test_hide_missing_checkpoint(tmp_path, desk_manifest_path):
    c = fixture_image(desk_manifest_path, 0)
    assert main(["hide", "--checkpoint", str(tmp_path / "none.dsc"), "--carrier", c, "--secret", c,
                 "--out", str(tmp_path / "s.png")]) == EXIT_USAGE


def test_hide_corrupt_checkpoint(tiny_run, tmp_path, desk_manifest_path, capsys):
    bad = tmp_path / "bad.dsc"
    bad.write_bytes((tiny_run / "checkpoint.dsc").read_bytes()[:100])
    c = fixture_image(desk_manifest_path, 0)
    code = main(["hide", "--checkpoint", str(bad), "--carrier", c, "--secret", c, "--out", str(tmp_path / "s.png")])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_reveal_untrained_and_deterministic(tmp_path, desk_manifest_path):
    assert main(["train", "--manifest", str(desk_manifest_path), "--out", str(tmp_path / "init"), "--size", "8",
                 "--epochs", "0"]) == EXIT_OK
    ckpt = str(tmp_path / "init" / "checkpoint.dsc")
    c, s = fixture_image(desk_manifest_path, 3), fixture_image(desk_manifest_path, 12)
    assert main(["hide", "--checkpoint", ckpt, "--carrier", c, "--secret", s, "--out", str(tmp_path / "st.png")]) == 0
    for name in ("r1.png", "r2.png"):
        assert main(["reveal", "--checkpoint", ckpt, "--stego", str(tmp_path / "st.png"),
                     "--out", str(tmp_path / name)]) == EXIT_OK
    assert load_image(tmp_path / "r1.png").shape == (8, 8, 3)
    assert (tmp_path / "r1.png").read_bytes() == (tmp_path / "r2.png").read_bytes()


def test_reveal_size_mismatch(tiny_run, tmp_path, desk_manifest_path, capsys):
    code = main(["reveal", "--checkpoint", str(tiny_run / "checkpoint.dsc"),
                 "--stego", fixture_image(desk_manifest_path, 0), "--out", str(tmp_path / "r.png")])
    assert code != EXIT_OK
    assert "expects 8x8" in capsys.readouterr().err
    assert not (tmp_path / "r.png").exists()


# -- evaluate ------------------------------------------------------------------


def read_table(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_evaluate_outputs(tiny_run, tmp_path, desk_manifest_path):
    out = tmp_path / "eval"
    assert main(["evaluate", "--checkpoint", str(tiny_run / "checkpoint.dsc"),
                 "--manifest", str(desk_manifest_path), "--out", str(out)]) == EXIT_OK
    t1 = read_table(out / "quality.csv")
    rows, avg = t1[1:-1], t1[-1]
    assert len(rows) == 8 and avg[0] == "average"
    for col in range(1, 6):
        assert float(avg[col]) == pytest.approx(np.mean([float(r[col]) for r in rows]), abs=1e-12)
    for col in (2, 4):
        assert all(-1 <= float(r[col]) <= 1 for r in rows)
    assert len(list((out / "residuals").glob("*.png"))) == 8 * 3
    assert len(list((out / "histograms").glob("*.csv"))) == 8 * 4
    t2 = read_table(out / "capacity.csv")
    assert t2[-1] == ["Ours", "64", "8x8", "1.0"]


def test_evaluate_identity_residual_zero(tiny_run, tmp_path, desk_manifest_path, monkeypatch):
    # an encoder that returns the carrier unchanged makes stego == carrier
    monkeypatch.setattr(cli, "_hide", lambda net, carrier, secret: carrier.copy())
    m = DatasetManifest.load(desk_manifest_path)
    m.pairs = m.pairs[:2]
    m.save(tmp_path / "m.json")
    for c, s in m.pairs:
        shutil.copy(m.resolve(c), tmp_path)
        shutil.copy(m.resolve(s), tmp_path)
    out = tmp_path / "eval"
    assert main(["evaluate", "--checkpoint", str(tiny_run / "checkpoint.dsc"),
                 "--manifest", str(tmp_path / "m.json"), "--out", str(out)]) == EXIT_OK
    for gain in (1, 10, 20):
        for p in out.glob(f"residuals/*_gain{gain:02d}.png"):
            assert not load_image(p).any()
    assert math.isinf(float(read_table(out / "quality.csv")[1][1]))


def test_evaluate_capacity_row_at_256(tmp_path, desk_manifest_path):
    assert main(["train", "--manifest", str(desk_manifest_path), "--out", str(tmp_path / "c"), "--size", "256",
                 "--epochs", "0"]) == EXIT_OK
    m = DatasetManifest.load(desk_manifest_path)
    m.pairs = m.pairs[:1]
    m.root = desk_manifest_path.parent
    m.pairs = [(str(m.resolve(c)), str(m.resolve(s))) for c, s in m.pairs]
    m.save(tmp_path / "one.json")
    assert main(["evaluate", "--checkpoint", str(tmp_path / "c" / "checkpoint.dsc"),
                 "--manifest", str(tmp_path / "one.json"), "--out", str(tmp_path / "e")]) == EXIT_OK
    assert read_table(tmp_path / "e" / "capacity.csv")[-1] == ["Ours", "65536", "256x256", "1.0"]


def test_evaluate_empty_manifest(tiny_run, tmp_path):
    DatasetManifest(pairs=[]).save(tmp_path / "empty.json")
    assert main(["evaluate", "--checkpoint", str(tiny_run / "checkpoint.dsc"),
                 "--manifest", str(tmp_path / "empty.json"), "--out", str(tmp_path / "e")]) == EXIT_USAGE


# -- fixture -------------------------------------------------------------------


def test_fixture_command_reproduces_bundled_set(tmp_path, desk_manifest_path):
    assert main(["fixture", "--out", str(tmp_path), "--seed", "2019"]) == EXIT_OK
    for p in sorted(desk_manifest_path.parent.iterdir()):
        assert (tmp_path / p.name).read_bytes() == p.read_bytes(), p.name


def test_inputs_not_mutated(tiny_run, tmp_path, desk_manifest_path):
    before = {p.name: p.read_bytes() for p in desk_manifest_path.parent.iterdir()}
    ckpt_bytes = (tiny_run / "checkpoint.dsc").read_bytes()
    main(["evaluate", "--checkpoint", str(tiny_run / "checkpoint.dsc"),
          "--manifest", str(desk_manifest_path), "--out", str(tmp_path / "e")])
    assert {p.name: p.read_bytes() for p in desk_manifest_path.parent.iterdir()} == before
    assert (tiny_run / "checkpoint.dsc").read_bytes() == ckpt_bytes

