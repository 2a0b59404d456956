import numpy as np
import pytest

from ilens import analysis, cli, resources, scorer
from ilens.imageio import read_image, write_image

REVISE_FAST = ["--r-set", "7", "--samples-per-r", "4", "--alpha", "1", "--steps", "2",
               "--jobs", "1"]


def files(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


def rerun_from_manifest(first, second, extra=()):
    manifest = first / "manifest.txt"
    command = cli.parse_kv(manifest.read_text())["command"]
    return cli.main([command, "--config", str(manifest), "--out-dir", str(second), *extra])


def test_parse_kv():
    assert cli.parse_kv("a = 1\n# c\nb=x y # tail\n\n") == {"a": "1", "b": "x y"}
    with pytest.raises(cli.BadInputError):
        cli.parse_kv("a = 1\na = 2\n")
    with pytest.raises(cli.BadInputError):
        cli.parse_kv("novalue\n")


def test_verify_passes_and_is_deterministic(tmp_path, capsys):
    args = ["verify", "--n", "6", "--games", "4", "--seed", "7"]
    assert cli.main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert sum(line.startswith("PASS") for line in out.splitlines()) == 7
    assert "ALL PASS: 7/7" in out
    assert cli.main(args + ["--out-dir", str(tmp_path / "b")]) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")
    assert rerun_from_manifest(tmp_path / "a", tmp_path / "c") == 0
    assert files(tmp_path / "a") == files(tmp_path / "c")


def test_verify_fault_injection_fails(capsys):
    assert cli.main(["verify", "--n", "5", "--games", "3", "--inject-fault", "closed-form"]) == 3
    assert "FAIL closed form" in capsys.readouterr().out


def test_config_errors_exit_2(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("bogus = 1\n")
    assert cli.main(["verify", "--config", str(cfg)]) == 2
    cfg.write_text("games = many\n")
    assert cli.main(["verify", "--config", str(cfg)]) == 2
    assert cli.main(["verify", "--config", str(tmp_path / "missing.txt")]) == 2


def test_flags_override_config(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("n = 9\ngames = 2\n")
    assert cli.main(["verify", "--config", str(cfg), "--n", "5"]) == 0
    assert "verify n=5 games=2" in capsys.readouterr().out


def test_train_epochs_zero_and_determinism(tmp_path):
    base = ["train", "--count", "8", "--size", "16", "--channels", "2,2,2", "--seed", "4"]
    assert cli.main(base + ["--epochs", "0", "--out", str(tmp_path / "z.ilens")]) in (0, 3)
    init = scorer.init_model(scorer.default_architecture(16, (2, 2, 2)), (16, 16, 3), seed=4)
    assert (tmp_path / "z.ilens").read_bytes() == scorer.dumps_weights(init)
    code_a = cli.main(base + ["--epochs", "1", "--out", str(tmp_path / "a.ilens")])
    code_b = cli.main(base + ["--epochs", "1", "--out", str(tmp_path / "b.ilens")])
    assert code_a == code_b
    assert (tmp_path / "a.ilens").read_bytes() == (tmp_path / "b.ilens").read_bytes()
    assert (tmp_path / "a.ilens.manifest.txt").read_text() == (tmp_path / "b.ilens.manifest.txt").read_text()


def test_train_default_dataset_reaches_high_accuracy(tmp_path, capsys):
    code = cli.main(["train", "--out", str(tmp_path / "m.ilens")])
    assert code == 0
    acc = float(capsys.readouterr().out.split()[-1])
    assert acc > 0.9


def test_synth_writes_scenes_and_boxes(tmp_path):
    assert cli.main(["synth", "--out-dir", str(tmp_path), "--count", "3", "--size", "32"]) == 0
    assert len(list(tmp_path.glob("scene_*.png"))) == 3
    assert len(analysis.read_boxes(tmp_path / "boxes.txt")) == 3


def test_revise_dry_run_is_identity(tmp_path):
    assert cli.main(["revise", "--dry-run", "--out-dir", str(tmp_path)]) == 0
    original = read_image(resources.toy_scene_path(0))
    np.testing.assert_array_equal(read_image(tmp_path / "revised.png"), original)
    for op in ("hue", "sat", "bright", "blursharp"):
        assert not analysis.read_grid_csv(tmp_path / f"heatmap_{op}.csv").any()


def test_revise_run_and_manifest_rerun(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert cli.main(["revise", "--out-dir", str(first), *REVISE_FAST]) == 0
    expected = {"revised.png", "theta.csv", "loss_trace.csv", "coalitions.csv", "manifest.txt"}
    expected |= {f"heatmap_{op}.{ext}" for op in ("hue", "sat", "bright", "blursharp")
                 for ext in ("png", "csv")}
    assert set(files(first)) == expected
    assert rerun_from_manifest(first, second, ["--jobs", "2"]) == 0
    assert files(first) == files(second)


def test_revise_error_exit_codes(tmp_path):
    out = ["--out-dir", str(tmp_path / "o")]
    assert cli.main(["revise", "--image", str(tmp_path / "nope.png"), *out]) == 2
    bad = tmp_path / "bad.ilens"
    bad.write_bytes(b"garbage")
    assert cli.main(["revise", "--weights", str(bad), *out]) == 2
    small = tmp_path / "small.png"
    write_image(small, np.full((16, 16, 3), 0.5))
    assert cli.main(["revise", "--image", str(small), *out]) == 2
    assert cli.main(["revise", "--r-set", "7", "--samples-per-r", "1", "--steps", "1", *out]) == 5


def test_manifest_hash_mismatch_is_rejected(tmp_path):
    img = tmp_path / "in.png"
    img.write_bytes(resources.toy_scene_path(1).read_bytes())
    assert cli.main(["revise", "--dry-run", "--image", str(img), "--out-dir", str(tmp_path / "a")]) == 0
    write_image(img, np.full((64, 64, 3), 0.5))
    assert rerun_from_manifest(tmp_path / "a", tmp_path / "b") == 2


@pytest.fixture
def corpus(tmp_path):
    d = tmp_path / "corpus"
    assert cli.main(["synth", "--out-dir", str(d), "--count", "2", "--seed", "5"]) == 0
    (d / "manifest.txt").unlink()
    return d


def test_analyze_tau_self_is_zero_and_reruns(tmp_path, corpus):
    out = tmp_path / "tau"
    args = ["analyze", "--mode", "tau", "--corpus-a", str(corpus), "--corpus-b", str(corpus),
            "--r", "7,13", "--samples-per-image", "10", "--svg", "--out-dir", str(out)]
    assert cli.main(args) == 0
    for r in (7, 13):
        tau = np.loadtxt(out / f"tau_r{r}.csv", delimiter=",", skiprows=1)[:, 2]
        assert not tau.any()
        hist = np.loadtxt(out / f"hist_r{r}.csv", delimiter=",", skiprows=1)
        assert abs(hist[:, 2].sum() - 1) < 1e-9
    assert (out / "tau_r7.svg").exists()
    assert rerun_from_manifest(out, tmp_path / "again") == 0
    assert files(out) == files(tmp_path / "again")


def test_analyze_kappa_histograms_are_normalized(tmp_path, corpus):
    out = tmp_path / "kappa"
    assert cli.main(["analyze", "--mode", "kappa", "--corpus-a", str(corpus), "--r", "7",
                     "--samples-per-image", "10", "--out-dir", str(out)]) == 0
    hist = np.loadtxt(out / "hist_r7.csv", delimiter=",", skiprows=1)
    assert abs(hist[:, 2].sum() - 1) < 1e-9 and abs(hist[:, 3].sum() - 1) < 1e-9
    kappa = np.loadtxt(out / "kappa_r7.csv", delimiter=",", skiprows=1)[:, 2]
    np.testing.assert_allclose(kappa, hist[:, 2] - hist[:, 3], atol=1e-15)


def test_analyze_large_scale_needs_flag(tmp_path, corpus):
    base = ["analyze", "--corpus-a", str(corpus), "--corpus-b", str(corpus), "--r", "58",
            "--samples-per-image", "5", "--out-dir", str(tmp_path / "o")]
    assert cli.main(base) == 2
    assert cli.main(base + ["--allow-large-r"]) == 0


def test_analyze_posterior_separable(tmp_path):
    heat_dir = tmp_path / "heat"
    heat_dir.mkdir()
    boxes = []
    for k in range(2):
        heat = np.full((8, 8), 0.6)
        heat[2:5, 1 + k:4 + k] = -0.6
        analysis.write_grid_csv(heat_dir / f"h{k}.csv", heat)
        boxes.append((1 + k, 2, 4 + k, 5))
    analysis.write_boxes(tmp_path / "boxes.txt", boxes)
    out = tmp_path / "post"
    assert cli.main(["analyze", "--mode", "posterior", "--corpus-a", str(heat_dir),
                     "--boxes", str(tmp_path / "boxes.txt"), "--bins", "4", "--out-dir", str(out)]) == 0
    rows = [line.split(",") for line in (out / "posterior.csv").read_text().splitlines()[1:]]
    assert [r[2] for r in rows] == ["1.0", "nan", "nan", "0.0"]


def test_analyze_bad_inputs(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    out = ["--out-dir", str(tmp_path / "o")]
    assert cli.main(["analyze", "--corpus-a", str(empty), "--corpus-b", str(empty), *out]) == 2
    assert cli.main(["analyze", "--mode", "posterior", "--corpus-a", str(empty), *out]) == 2
    assert cli.main(["analyze", "--mode", "tau", *out]) == 2
