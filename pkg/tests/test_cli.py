import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from scanet.checkpoint import load_checkpoint
from scanet.cli import main
from scanet.data import Sample, export_dataset, synth_generate
from scanet.metrics import METRIC_NAMES
from scanet.tensor import Tensor
from scanet.train import evaluate


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--synthetic", "16", "--size", "64", "--epochs", "3", "--out", str(out)])
    assert code == 0
    return out


def test_train_outputs(trained):
    rows = read_csv(trained / "history.csv")
    assert len(rows) == 1 + 3
    assert (trained / "final.sckp").exists()
    table = read_csv(trained / "metrics.csv")
    assert table[0] == ["subset", *METRIC_NAMES]
    assert [r[0] for r in table[1:]] == ["day", "all"]


def test_train_rerun_identical(trained, tmp_path):
    assert main(["train", "--synthetic", "16", "--size", "64", "--epochs", "3", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()


def test_missing_dataset_root(tmp_path, capsys):
    missing = tmp_path / "no_such_root"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"lr": 1}}))
    assert main(["train", "--config", str(cfg), "--synthetic", "2", "--out", str(tmp_path)]) == 2
    cfg.write_text("{nope")
    assert main(["train", "--config", str(cfg), "--synthetic", "2", "--out", str(tmp_path)]) == 2
    cfg.write_text(json.dumps({"model": {"input_size": 30}}))
    assert main(["train", "--config", str(cfg), "--synthetic", "2", "--out", str(tmp_path)]) == 2


def test_config_file_applied(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"input_size": 32}, "train": {"epochs": 2, "batch_size": 4}}))
    assert main(["train", "--config", str(cfg), "--synthetic", "4", "--out", str(tmp_path / "o")]) == 0
    assert len(read_csv(tmp_path / "o/history.csv")) == 3
    ck = load_checkpoint(tmp_path / "o/final.sckp")
    assert ck.config["input_size"] == 32
    # flags override the file
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--synthetic", "4", "--out", str(tmp_path / "p")]) == 0
    assert len(read_csv(tmp_path / "p/history.csv")) == 2


def test_train_on_dataset_layout(tmp_path):
    samples = synth_generate(10, 32, seed=0, night_fraction=0.5)
    root = export_dataset(samples, tmp_path / "data")
    out = tmp_path / "run"
    assert main(["train", "--data", str(root), "--size", "32", "--epochs", "1", "--out", str(out)]) == 0
    assert (out / "metrics.csv").exists()


def test_pretrain_then_init(tmp_path, capsys):
    out = tmp_path / "pt"
    assert main(["pretrain", "--synthetic", "4", "--size", "64", "--epochs", "2", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "positive=" in text and "negative=" in text and "ignored=" in text
    ckpt = out / "swpt_backbone.sckp"
    assert all(k.startswith("backbone.") for k in load_checkpoint(ckpt).tensors)
    run = tmp_path / "ft"
    assert main(["train", "--synthetic", "4", "--size", "64", "--epochs", "1", "--init", str(ckpt), "--out", str(run)]) == 0


def test_pretrain_single_class(tmp_path, capsys):
    code = main(["pretrain", "--synthetic", "4", "--synthetic-cover", "0", "--size", "64", "--out", str(tmp_path)])
    assert code != 0
    assert "single class" in capsys.readouterr().err


def test_eval_writes_six_metrics(trained, tmp_path):
    ck = str(trained / "final.sckp")
    assert main(["eval", "--checkpoint", ck, "--synthetic", "16", "--split", "all", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "metrics.csv")
    assert rows[0][1:] == list(METRIC_NAMES) and len(rows[0]) == 7


def test_eval_variant_mismatch(trained, tmp_path):
    ck = str(trained / "final.sckp")
    assert main(["eval", "--checkpoint", ck, "--variant", "base", "--synthetic", "4", "--out", str(tmp_path)]) == 1


def test_eval_bad_checkpoint(tmp_path):
    bad = tmp_path / "bad.sckp"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(bad), "--synthetic", "4", "--out", str(tmp_path)]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--synthetic", "4", "--out", str(tmp_path)]) == 2


def test_identity_stub_gives_perfect_metrics():
    # the image carries the mask in channel 0, so the stub returns ground truth
    samples = []
    for s in synth_generate(4, 32, seed=0, night_fraction=0.5):
        img = s.image.data.copy()
        img[:, 0] = s.mask.data[:, 0] - 0.5
        samples.append(Sample(Tensor(img), s.mask, s.source_id, s.subset))
    res = evaluate(lambda x: Tensor(x.data[:, :1] + 0.5), samples)
    for _, m in res.values():
        assert all(m.as_dict()[k] == 1.0 for k in METRIC_NAMES if k != "error_rate")
        assert m.error_rate == 0.0


def test_infer_and_dump(trained, tmp_path):
    img = tmp_path / "sky.png"
    rgb = np.random.default_rng(0).integers(0, 256, (50, 70, 3)).astype(np.uint8)
    Image.fromarray(rgb).save(img)
    out = tmp_path / "inf"
    ck = str(trained / "final.sckp")
    assert main(["infer", "--checkpoint", ck, "--image", str(img), "--dump-stages", "--out", str(out)]) == 0
    mask = np.asarray(Image.open(out / "sky_mask.png"))
    assert mask.shape == (50, 70)
    assert set(np.unique(mask)) <= {0, 255}
    aux = sorted(p.name for p in out.iterdir() if p.name != "sky_mask.png")
    assert len(aux) == 7
    sizes = {p: Image.open(out / p).size[0] for p in aux}
    assert [sizes[f"sky_s{i}.png"] for i in range(1, 5)] == [8, 16, 32, 64]
    assert [sizes[f"sky_m{i}.png"] for i in range(2, 5)] == [8, 16, 32]


def test_infer_undecodable(trained, tmp_path):
    bad = tmp_path / "x.png"
    bad.write_bytes(b"nope")
    assert main(["infer", "--checkpoint", str(trained / "final.sckp"), "--image", str(bad), "--out", str(tmp_path)]) == 1


def test_curves(trained, tmp_path):
    ck = str(trained / "final.sckp")
    assert main(["curves", "--checkpoint", ck, "--synthetic", "16", "--out", str(tmp_path)]) == 0
    pr = read_csv(tmp_path / "pr_all.csv")
    fm = read_csv(tmp_path / "fmeasure_all.csv")
    assert pr[0] == ["threshold", "precision", "recall"] and fm[0] == ["threshold", "f_score"]
    assert len(pr) - 1 == 256 and len(fm) - 1 == 256
    recall = [float(r[2]) for r in pr[1:]]
    assert all(b <= a for a, b in zip(recall, recall[1:]))
    for (t, p, r), (t2, f) in zip(pr[1:], fm[1:]):
        p, r = float(p), float(r)
        want = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        assert t == t2 and abs(float(f) - want) <= 1e-9


def test_curves_empty_test_set(trained, tmp_path):
    # 5 synthetic samples -> floor(5/10) = 0 test samples
    code = main(["curves", "--checkpoint", str(trained / "final.sckp"), "--synthetic", "5", "--out", str(tmp_path)])
    assert code == 1


def test_bench_random_weights(tmp_path, capsys):
    args = ["bench", "--random-weights", "--size", "32", "--iters", "3", "--warmup", "1", "--out", str(tmp_path)]
    assert main(args + ["--precision", "fp16"]) == 0
    rows = read_csv(tmp_path / "bench_fp16.csv")
    report = dict(zip(rows[0], rows[1]))
    assert report["iterations"] == "3" and report["precision"] == "fp16"
    assert "MAC=2" in capsys.readouterr().out


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "scanet.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("train", "pretrain", "eval", "infer", "curves", "bench"):
        assert cmd in res.stdout
