import subprocess
import sys

import numpy as np
import pytest

from dawmr.cli import main
from dawmr.config import ConfigError, RunConfig, load_config, parse_config
from dawmr.pipeline import read_manifest
from dawmr.segmentation import read_metrics
from dawmr.volume import SegmentationVolume, Volume, affinities_from_segmentation, read_volume, write_volume

TINY = """\
architecture = ss-fv   # base preset
dict_size = 4
patch_size = 3
neighborhood = 3
hidden_units = 8
updates = 100
batch_size = 20
dict_patches = 400
dict_epochs = 2
subsample_fraction = 0.3
augment = off
tile = 8
"""


@pytest.fixture
def data(tmp_path):
    assert main(["gen", "--dims", "20", "--seeds", "5", "--seed", "3", "--out", str(tmp_path)]) == 0
    (tmp_path / "tiny.cfg").write_text(TINY)
    return tmp_path


def run_args(data, command, *extra, run="run"):
    return [command, "--config", str(data / "tiny.cfg"), "--run", str(data / run),
            "--image", str(data / "image.dwmr"), "--seg", str(data / "seg.dwmr"), *extra]


def test_gen_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["gen", "--dims", "12,14,16", "--seed", "5", "--out", str(tmp_path / d)]) == 0
    for f in ("image.dwmr", "seg.dwmr"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    img = read_volume(tmp_path / "a" / "image.dwmr")
    assert img.dims == (12, 14, 16) and img.channels == 1


def test_config_parsing_rules():
    cfg = parse_config("dict_size = 8\narchitecture = ss\n")
    assert cfg.dict_size == 8 and cfg.representation == "rf"
    for bad in ("nonsense = 1", "dict_size = 4\ndict_size = 5", "dict_size", "led = maybe",
                "encoder = sparse"):
        with pytest.raises(ConfigError):
            parse_config(bad)
    with pytest.raises(ConfigError, match="feature_dims"):
        parse_config("architecture = ms-fv\nfeature_dims = 100")
    assert parse_config("architecture = ms-fv\nfeature_dims = 8000").feature_dims == 8000


def test_config_text_roundtrip(tmp_path):
    cfg = parse_config(TINY)
    (tmp_path / "c.txt").write_text(cfg.to_text())
    assert load_config(tmp_path / "c.txt") == RunConfig(**{**cfg.__dict__, "feature_dims": cfg.spec().dims})


def test_train_predict_evaluate_layout(data, capsys):
    assert main(run_args(data, "train")) == 0
    run = data / "run"
    for d in ("models", "shards", "predictions", "metrics"):
        assert (run / d).is_dir()
    assert (run / "config.txt").exists() and "command = train" in (run / "manifest.txt").read_text()
    assert read_manifest(run / "models" / "manifest.txt")["iterations"] == "1"
    assert main(["predict", "--config", str(data / "tiny.cfg"), "--run", str(run),
                 "--image", str(data / "image.dwmr")]) == 0
    pred = read_volume(run / "predictions" / "affinity.dwmr")
    assert pred.channels == 3 and pred.dims == (20, 20, 20)
    assert main(["evaluate", "--pred", str(run / "predictions" / "affinity.dwmr"),
                 "--seg", str(data / "seg.dwmr"), "--run", str(run), "--sweep", "20"]) == 0
    metrics = read_metrics(run / "metrics" / "metrics.txt")
    assert all(0 <= v <= 1 for v in metrics.values())
    assert (run / "metrics" / "metrics_curve.tsv").exists()
    assert "bal_acc" in capsys.readouterr().out


def test_train_predict_equals_recurse_once(data):
    assert main(run_args(data, "train")) == 0
    assert main(run_args(data, "recurse", "--iterations", "1", "--led", "off", run="run2")) == 0
    for run in ("run", "run2"):
        assert main(["predict", "--run", str(data / run), "--image", str(data / "image.dwmr"),
                     "--config", str(data / "tiny.cfg")]) == 0
    a = (data / "run" / "predictions" / "affinity.dwmr").read_bytes()
    b = (data / "run2" / "predictions" / "affinity.dwmr").read_bytes()
    assert a == b


def test_learn_dict_then_extract(data):
    assert main(run_args(data, "learn-dict")) == 0
    dicts = sorted((data / "run" / "models" / "dictionaries").iterdir())
    assert [p.name for p in dicts] == ["dict_s1_image.dwdc"]
    assert main(run_args(data, "extract")) == 0
    assert sorted(p.name for p in (data / "run" / "shards" / "iter1").iterdir()) == ["shard_00000.dwfs"]


def test_evaluate_ground_truth(tmp_path):
    main(["gen", "--dims", "16", "--seeds", "5", "--out", str(tmp_path)])
    seg = read_volume(tmp_path / "seg.dwmr")
    aff, _ = affinities_from_segmentation(seg.ids)
    write_volume(Volume(aff.astype(np.float32)), tmp_path / "truth_aff.dwmr")
    assert main(["evaluate", "--pred", str(tmp_path / "truth_aff.dwmr"),
                 "--seg", str(tmp_path / "seg.dwmr"), "--out", str(tmp_path / "m.txt")]) == 0
    m = read_metrics(tmp_path / "m.txt")
    assert m["bal_acc"] == 1.0 and m["max_ri"] == 1.0


def test_exit_codes(data, tmp_path):
    (tmp_path / "bad.cfg").write_text("dict_size = 4\nbogus = 1\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--run", str(tmp_path / "r"),
                 "--image", str(data / "image.dwmr"), "--seg", str(data / "seg.dwmr")]) == 1
    assert main(["evaluate", "--pred", str(tmp_path / "missing.dwmr"),
                 "--seg", str(data / "seg.dwmr")]) == 2
    (tmp_path / "junk.dwmr").write_bytes(b"not a volume")
    assert main(["evaluate", "--pred", str(tmp_path / "junk.dwmr"),
                 "--seg", str(data / "seg.dwmr")]) == 2
    # a segmentation where an image is expected is a usage error
    assert main(["evaluate", "--pred", str(data / "seg.dwmr"), "--seg", str(data / "seg.dwmr")]) == 1
    assert main(["predict", "--image", str(data / "image.dwmr")]) == 1
    assert main(["predict", "--model", str(tmp_path / "nomodel"),
                 "--image", str(data / "image.dwmr")]) == 2


def test_console_script_runs(tmp_path):
    out = subprocess.run([sys.executable, "-m", "dawmr.cli", "gen", "--dims", "8",
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 0
    assert isinstance(read_volume(tmp_path / "seg.dwmr"), SegmentationVolume)


@pytest.mark.slow
def test_recurse_three_iterations_multiscale(tmp_path):
    main(["gen", "--dims", "64", "--seeds", "12", "--seed", "1", "--out", str(tmp_path)])
    (tmp_path / "ms.cfg").write_text(
        "architecture = ms-fv\ndict_size = 2\nhidden_units = 8\nupdates = 100\n"
        "dict_patches = 400\ndict_epochs = 2\nsubsample_fraction = 0.05\naugment = off\n"
        "normalizer_sample = 2000\n")
    assert main(["recurse", "--config", str(tmp_path / "ms.cfg"), "--run", str(tmp_path / "run"),
                 "--image", str(tmp_path / "image.dwmr"), "--seg", str(tmp_path / "seg.dwmr"),
                 "--iterations", "3", "--led", "on"]) == 0
    manifest = read_manifest(tmp_path / "run" / "models" / "manifest.txt")
    assert manifest["iterations"] == "3"
    assert manifest["fov"] == "54,54,54" and manifest["fov_strict"] == "52,52,52"
    assert main(["predict", "--run", str(tmp_path / "run"), "--image", str(tmp_path / "image.dwmr"),
                 "--all-iterations", "--config", str(tmp_path / "ms.cfg")]) == 0
    preds = sorted(p.name for p in (tmp_path / "run" / "predictions").iterdir())
    assert preds == ["affinity.dwmr", "affinity_iter1.dwmr", "affinity_iter2.dwmr",
                     "affinity_iter3.dwmr"]
