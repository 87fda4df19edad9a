import json

import numpy as np
import pytest

from lowa.cli import main, read_queries
from lowa.config import ConfigError, dump_run_config, load_run_config, parse_override, resolve_seed
from lowa.dataset import AnnotationError
from lowa.trainer import load_checkpoint, read_loss_csv

TINY = """\
[model]
image_size = 32
embed_dim = 16
num_layers = 1
num_heads = 2
mlp_hidden = 32
proj_dim = 8

[train]
steps_o = 2
steps_a = 2
steps_f = 2
batch_size = 2

[data]
train_images = 10
heldout_images = 4
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


# -- config -----------------------------------------------------------------

def test_unknown_key_and_section(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        load_run_config(bad)
    bad.write_text("[optim]\nlr = 0.1\n")
    with pytest.raises(ConfigError, match="optim"):
        load_run_config(bad)
    bad.write_text("[train]\nsteps_o = many\n")
    with pytest.raises(ConfigError, match="steps_o"):
        load_run_config(bad)
    bad.write_text("[train]\nsteps_o = -2\n")
    with pytest.raises(ConfigError):
        load_run_config(bad)


def test_dump_round_trip(cfg_file, tmp_path):
    cfg = load_run_config(cfg_file, seed=4)
    out = tmp_path / "dump.cfg"
    out.write_text(dump_run_config(cfg))
    assert load_run_config(out) == cfg


def test_overrides_beat_file(cfg_file):
    cfg = load_run_config(cfg_file, {"train": {"batch_size": "3"}})
    assert cfg.train.batch_size == 3 and cfg.model.embed_dim == 16
    assert parse_override("train.lr_image=0.5") == ("train", "lr_image", "0.5")
    with pytest.raises(ConfigError):
        parse_override("lr_image=0.5")


def test_seed_precedence(monkeypatch, tmp_path):
    monkeypatch.delenv("LOWA_SEED", raising=False)
    assert resolve_seed(None, None) == 0
    monkeypatch.setenv("LOWA_SEED", "11")
    assert resolve_seed(None, None) == 11
    assert resolve_seed(None, 5) == 5
    assert resolve_seed(3, 5) == 3
    path = tmp_path / "s.cfg"
    path.write_text("[train]\nseed = 5\n")
    assert load_run_config(path).seed == 5
    assert load_run_config(path, seed=2).seed == 2
    assert load_run_config().seed == 11
    monkeypatch.setenv("LOWA_SEED", "x")
    with pytest.raises(ConfigError, match="LOWA_SEED"):
        load_run_config()


# -- CLI --------------------------------------------------------------------

def test_usage_errors_exit_one(cfg_file, tmp_path, capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["synth"]) == 1
    assert main(["synth", "--config", str(cfg_file), "--set", "train.bogus=1", "--out", str(tmp_path)]) == 1
    assert main(["synth", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_data_errors_exit_two(cfg_file, tmp_path):
    assert main(["train", "--config", str(cfg_file), "--data", str(tmp_path / "none.json"),
                 "--out", str(tmp_path / "r")]) == 2
    (tmp_path / "bad.json").write_text('{"images": [{"id": "a"}]}')
    assert main(["train", "--config", str(cfg_file), "--data", str(tmp_path / "bad.json"),
                 "--out", str(tmp_path / "r")]) == 2
    (tmp_path / "fake.lwa").write_bytes(b"junk")
    assert main(["eval", "--checkpoint", str(tmp_path / "fake.lwa"), "--data", str(tmp_path / "bad.json"),
                 "--out", str(tmp_path / "e")]) == 2


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["synth", "--config", str(cfg), "--seed", "1", "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--seed", "1", "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root, cfg


def test_synth_is_deterministic_and_summary_counts(workspace, tmp_path):
    root, cfg = workspace
    assert main(["synth", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "again")]) == 0
    for name in ("train.json", "heldout.json", "summary.json"):
        assert (root / "data" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()
    ann = json.loads((root / "data" / "train.json").read_text())
    summary = json.loads((root / "data" / "summary.json").read_text())[0]
    insts = [i for img in ann["images"] for i in img["instances"]]
    assert summary["images"] == 10 and summary["instances"] == len(insts)
    for a, info in summary["attributes"].items():
        assert info["count"] == sum(a in i["attributes"] for i in insts)


def test_train_writes_checkpoint_and_csv(workspace):
    root, _ = workspace
    ckpt = load_checkpoint(root / "run" / "checkpoint.lwa")
    assert ckpt.global_step == 6 and ckpt.phase == "F"
    assert [r.step for r in read_loss_csv(root / "run" / "loss.csv")] == list(range(6))


def test_stop_and_resume_equal_full_run(workspace, tmp_path):
    root, cfg = workspace
    common = ["train", "--config", str(cfg), "--seed", "1", "--data", str(root / "data")]
    assert main(common + ["--out", str(tmp_path / "part"), "--stop-at", "3"]) == 0
    assert load_checkpoint(tmp_path / "part" / "checkpoint.lwa").global_step == 3
    assert main(common + ["--out", str(tmp_path / "rest"), "--resume",
                          str(tmp_path / "part" / "checkpoint.lwa")]) == 0
    assert (tmp_path / "rest" / "loss.csv").read_bytes() == (root / "run" / "loss.csv").read_bytes()
    assert (tmp_path / "rest" / "checkpoint.lwa").read_bytes() == (root / "run" / "checkpoint.lwa").read_bytes()


def test_resume_with_changed_config_needs_force(workspace, tmp_path):
    root, cfg = workspace
    args = ["train", "--config", str(cfg), "--set", "train.lr_image=0.01", "--data", str(root / "data"),
            "--out", str(tmp_path / "x"), "--resume", str(root / "run" / "checkpoint.lwa")]
    assert main(args) == 2
    assert main(args + ["--force", "--steps-f", "3"]) == 0


def test_eval_outputs(workspace, tmp_path):
    root, _ = workspace
    args = ["eval", "--checkpoint", str(root / "run" / "checkpoint.lwa"), "--data", str(root / "data"),
            "--out", str(tmp_path / "rep"), "--k", "3", "--logits"]
    assert main(args) == 0
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert report["k"] == 3
    assert (tmp_path / "rep" / "logits.csv").read_text().startswith("instance,a photo of")
    assert main(args[:-3] + ["--k", "0"]) == 1


def _image(root):
    return str(sorted((root / "data" / "images").iterdir())[0])


@pytest.mark.parametrize("mode, extra", [
    ("closed", []),
    ("open", ["--threshold", "0.2"]),
    ("attr-localize", ["--top-k", "2"]),
    ("attr-classify", ["--box", "0.1,0.1,0.5,0.5"]),
])
def test_infer_modes(workspace, tmp_path, mode, extra):
    root, _ = workspace
    out = tmp_path / "p.json"
    assert main(["infer", "--checkpoint", str(root / "run" / "checkpoint.lwa"), "--image", _image(root),
                 "--mode", mode, "--query", "red", "--query", "square", "--out", str(out)] + extra) == 0
    doc = json.loads(out.read_text())
    assert doc["mode"] == mode and doc["queries"] == ["red", "square"]
    if mode == "attr-classify":
        assert set(doc["scores"]) == {"red", "square"}
    else:
        assert all(set(d) == {"bbox", "query", "score"} for d in doc["detections"])
    if mode == "attr-localize":
        assert len(doc["detections"]) <= 4


def test_infer_usage_errors(workspace, tmp_path):
    root, _ = workspace
    base = ["infer", "--checkpoint", str(root / "run" / "checkpoint.lwa"), "--image", _image(root),
            "--out", str(tmp_path / "p.json")]
    assert main(base + ["--mode", "psychic", "--query", "red"]) == 1
    assert main(base + ["--mode", "open"]) == 1
    assert main(base + ["--mode", "open", "--query", "red", "--threshold", "1.5"]) == 1
    assert main(base + ["--mode", "attr-classify", "--query", "red"]) == 1
    assert main(base + ["--mode", "attr-classify", "--query", "red", "--box", "0.5,0.5,0.1,0.1"]) == 1
    qf = tmp_path / "q.txt"
    qf.write_text("red\n!!!\n")
    assert main(base + ["--mode", "open", "--query-file", str(qf)]) == 2


def test_query_file_error_names_line(tmp_path):
    qf = tmp_path / "q.txt"
    qf.write_text("# comment\nred square\n\n...\n")
    with pytest.raises(AnnotationError, match=":4:"):
        read_queries(qf)
    qf.write_text("red square\n\nblue\n")
    assert read_queries(qf) == ["red square", "blue"]


def test_npy_image_input(workspace, tmp_path):
    root, _ = workspace
    np.save(tmp_path / "img.npy", np.full((40, 40, 3), 0.5))
    out = tmp_path / "p.json"
    assert main(["infer", "--checkpoint", str(root / "run" / "checkpoint.lwa"), "--image", str(tmp_path / "img.npy"),
                 "--mode", "closed", "--query", "bar", "--out", str(out)]) == 0
    np.save(tmp_path / "flat.npy", np.zeros((4, 4)))
    assert main(["infer", "--checkpoint", str(root / "run" / "checkpoint.lwa"), "--image", str(tmp_path / "flat.npy"),
                 "--mode", "closed", "--query", "bar", "--out", str(out)]) == 2
