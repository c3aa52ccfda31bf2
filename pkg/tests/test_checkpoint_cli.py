import argparse
import csv
import json
import os

import numpy as np
import pytest

from sttree import cli
from sttree.checkpoint import (FORMAT_VERSION, CheckpointError, load_checkpoint, load_model,
                               manifest_path, save_checkpoint)
from sttree.config import ConfigError, RunConfig, apply_overrides, from_dict, load_config
from sttree.encoder import EncoderConfig
from sttree.model import ModelConfig, STTreeModel


def small_model(seed=0):
    return STTreeModel(ModelConfig(EncoderConfig(num_channels=2, num_classes=3, embed_dim=8,
                                                 mlp_hidden=16), depth=2, proto_size=2, seed=seed))


# -- checkpoint ---------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = small_model(4)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, a, {"note": "x"})
    config, tensors, manifest = load_checkpoint(a)
    assert manifest["format_version"] == FORMAT_VERSION and manifest["extra"] == {"note": "x"}
    assert os.path.getsize(a) == sum(8 * t.size for t in model.parameters()) == manifest["blob_bytes"]
    assert list(tensors) == model.store.names()
    for name, t in model.named_parameters():
        assert tensors[name].tobytes() == t.data.tobytes()
    loaded = load_model(a)
    assert loaded.config == model.config
    save_checkpoint(loaded, b, {"note": "x"})
    assert a.read_bytes() == b.read_bytes()
    assert open(manifest_path(a), "rb").read() == open(manifest_path(b), "rb").read()


def test_checkpoint_is_little_endian_f8(tmp_path):
    model = small_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    _, _, manifest = load_checkpoint(path)
    entry = manifest["tensors"][3]
    raw = path.read_bytes()[entry["offset"] : entry["offset"] + 8]
    first = model.store[entry["name"]].data.ravel()[0]
    assert np.frombuffer(raw, dtype="<f8")[0] == first


@pytest.mark.parametrize("defect", ["version", "truncate", "offset", "json"])
def test_checkpoint_defects(tmp_path, defect):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_model(), path)
    mpath = manifest_path(path)
    manifest = json.loads(open(mpath).read())
    if defect == "version":
        manifest["format_version"] = 99
    elif defect == "offset":
        manifest["tensors"][1]["offset"] += 8
    if defect == "truncate":
        path.write_bytes(path.read_bytes()[:-1])
    elif defect == "json":
        open(mpath, "w").write("{not json")
    else:
        open(mpath, "w").write(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# -- configuration ------------------------------------------------------------

def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="tree: widths"):
        from_dict({"tree": {"widths": 3}})


def test_validation():
    cfg = from_dict({"tree": {"depth": 0}})
    with pytest.raises(ConfigError, match="depth"):
        cfg.validate()
    with pytest.raises(ConfigError):
        from_dict({"train": {"learning_rate": -1}}).validate()


def test_env_default_data_root(monkeypatch):
    monkeypatch.setenv("ST_TREE_DATA", "/somewhere")
    assert RunConfig().data_root == "/somewhere"


FIELDS = {
    # field: (file value, flag value, reader)
    "data_root": ("/file/root", "/flag/root", lambda c: c.data_root),
    "dataset": ("FileSet", "FlagSet", lambda c: c.dataset),
    "out": ("file_out", "flag_out", lambda c: c.out),
    "seed": (3, 7, lambda c: c.seed),
    "fine_tune_from": ("file.ckpt", "flag.ckpt", lambda c: c.fine_tune_from),
    "depth": (5, 4, lambda c: c.tree.depth),
    "epochs": (20, 30, lambda c: c.train.epochs),
    "no_tree": (False, True, lambda c: c.train.no_tree),
    "no_attention": (False, True, lambda c: c.train.no_attention),
}


def file_dict(field, value):
    if field == "depth":
        return {"tree": {"depth": value}}
    if field in ("epochs", "no_tree", "no_attention"):
        return {"train": {field: value}}
    return {field: value}


@pytest.mark.parametrize("field", sorted(FIELDS))
def test_precedence(tmp_path, field):
    file_value, flag_value, read = FIELDS[field]
    default = read(RunConfig())
    path = tmp_path / "c.json"
    path.write_text(json.dumps(file_dict(field, file_value)))
    blank = argparse.Namespace()
    flagged = argparse.Namespace(**{field: flag_value})
    assert read(apply_overrides(RunConfig(), blank)) == default
    assert read(apply_overrides(load_config(path), blank)) == file_value
    assert read(apply_overrides(load_config(path), flagged)) == flag_value
    assert read(apply_overrides(RunConfig(), flagged)) == flag_value


def test_depth_flag_beats_file_via_parser(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"tree": {"depth": 2}}))
    args = cli.build_parser().parse_args(["train", "--config", str(path), "--depth", "4"])
    assert cli.resolve_config(args).tree.depth == 4


# -- commands -----------------------------------------------------------------

def test_bad_config_exit_1(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text('{"tree": {"depth": 0}}')
    assert cli.main(["train", "--config", str(path)]) == 1
    path.write_text("{")
    assert cli.main(["train", "--config", str(path)]) == 1
    assert "config error" in capsys.readouterr().err


def test_missing_dataset_exit_2(tmp_path, capsys):
    assert cli.main(["train", "--data-root", str(tmp_path), "--dataset", "Nope",
                     "--out", str(tmp_path / "o")]) == 2
    assert str(tmp_path / "Nope" / "Nope_TRAIN.ts") in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort_exit_3(tmp_path, capsys):
    d = tmp_path / "Bad"
    d.mkdir()
    rows = "".join(f"{v},1,2,3:1,1,2,2:{'ab'[i % 2]}\n" for i, v in enumerate(["inf", "1", "2", "3"]))
    for split in ("TRAIN", "TEST"):
        (d / f"Bad_{split}.ts").write_text("@problemName Bad\n@classLabel true a b\n@data\n" + rows)
    code = cli.main(["train", "--data-root", str(tmp_path), "--dataset", "Bad", "--epochs", "1",
                     "--depth", "1", "--out", str(tmp_path / "o")])
    assert code == 3
    assert "epoch 1, batch 0" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--depth", "1", "--length", "32"]) == 0
    assert "gradcheck ok" in capsys.readouterr().out
    assert cli.main(["gradcheck", "--depth", "1", "--length", "8", "--tol", "1e-30"]) == 4


def test_train_evaluate_explain(tmp_path, data_root, capsys):
    out = tmp_path / "run"
    base = ["--data-root", str(data_root), "--out", str(out)]
    assert cli.main(["train", *base, "--epochs", "2", "--depth", "2"]) == 0
    assert (out / "model.ckpt").is_file() and (out / "model.ckpt.json").is_file()
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert rows[0] == ["epoch", "lr", "train_loss", "train_acc", "val_acc"] and len(rows) == 3
    _, _, manifest = load_checkpoint(out / "model.ckpt")
    assert manifest["extra"]["class_names"] == ["Standing", "Running", "Walking", "Badminton"]
    assert manifest["config"]["depth"] == 2
    assert cli.main(["evaluate", *base]) == 0
    assert "BasicMotions test: accuracy" in capsys.readouterr().out
    assert cli.main(["explain", *base, "--samples", "0,5", "--split", "train"]) == 0
    for i in (0, 5):
        path = json.loads((out / "explain" / f"train_{i}.json").read_text())
        assert len(path["nodes"]) == 2
        assert (out / "explain" / f"train_{i}.svg").is_file()
    assert cli.main(["explain", *base, "--samples", "99"]) == 2
    assert cli.main(["evaluate", *base, "--checkpoint", str(tmp_path / "none.ckpt")]) == 2


def test_fine_tune_flag(tmp_path, data_root):
    out = tmp_path / "run"
    base = ["--data-root", str(data_root), "--epochs", "1", "--depth", "1"]
    assert cli.main(["train", *base, "--out", str(out)]) == 0
    assert cli.main(["train", *base, "--out", str(tmp_path / "ft"),
                     "--fine-tune-from", str(out / "model.ckpt")]) == 0
    assert cli.main(["train", *base, "--out", str(tmp_path / "bad"),
                     "--fine-tune-from", str(tmp_path / "missing.ckpt")]) == 2
