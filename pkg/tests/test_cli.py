import csv
import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from forgekey.checkpoint import load_checkpoint, load_model
from forgekey.cli import main, pca_2d, read_ids
from forgekey.errors import DataError

DIMS = dict(image_size=8, channels=1, patch=4, hidden=8, depth=2, heads=2, mlp_ratio=2,
            value_dim=4, key_dim=8, classes=3)
SPEC = dict(classes=3, samples_per_class=30, image_size=8, seed=5)


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--spec", write_json(d / "spec.json", SPEC), "--out", d / "data") == 0
    cfg = {"train": {"dims": DIMS, "epochs": 3, "batch_size": 8, "probe_size": 16, "seed": 1},
           "data_dir": str(d / "data"), "forget_rate": 0.1, "forget_ids_out": str(d / "forget.txt")}
    config = write_json(d / "run.json", cfg)
    assert run("train", "--config", config, "--out", d / "m.ckpt") == 0
    assert run("train", "--config", config, "--out", d / "oracle.ckpt", "--forget-ids", d / "forget.txt") == 0
    assert run("unlearn", "--ckpt", d / "m.ckpt", "--forget-ids", d / "forget.txt", "--out", d / "u.ckpt") == 0
    return d


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_outputs_and_determinism(work):
    log = rows(str(work / "m.ckpt") + ".epochs.csv")
    assert [int(r["epoch"]) for r in log] == [1, 2, 3]
    assert set(log[0]) == {"epoch", "train_loss", "val_acc", "lr", "p_s_probe"}
    assert run("train", "--config", work / "run.json", "--out", work / "m2.ckpt") == 0
    assert (work / "m2.ckpt").read_bytes() == (work / "m.ckpt").read_bytes()
    assert len(read_ids(work / "forget.txt")) == 6


def test_seed_env_override(work, monkeypatch):
    cfg = json.loads((work / "run.json").read_text())
    del cfg["forget_ids_out"]
    monkeypatch.setenv("FORGEKEY_SEED", "9")
    assert run("train", "--config", write_json(work / "run9.json", cfg), "--out", work / "s9.ckpt") == 0
    assert load_model(work / "s9.ckpt").config.seed == 9
    assert (work / "s9.ckpt").read_bytes() != (work / "m.ckpt").read_bytes()


def test_train_config_errors(work, capsys):
    bad = write_json(work / "bad.json", {"train": {"p_i": 0.7, "p_t": 0.5}})
    assert run("train", "--config", bad, "--out", work / "x.ckpt") == 2
    assert "ConfigError" in capsys.readouterr().err
    typo = write_json(work / "typo.json", {"train": {"epohcs": 3}})
    assert run("train", "--config", typo, "--out", work / "x.ckpt") == 2
    assert not (work / "x.ckpt").exists()


def test_unlearn_keeps_model_bytes(work, capsys):
    before, after = load_checkpoint(work / "m.ckpt"), load_checkpoint(work / "u.ckpt")
    for name, arr in before.tensors.items():
        if name.startswith("model."):
            assert after.tensors[name].tobytes() == arr.tobytes()
    n = len(read_ids(work / "forget.txt"))
    assert int(after.tensors["mem.live"].sum()) == int(before.tensors["mem.live"].sum()) - n

    (work / "empty.txt").write_text("")
    assert run("unlearn", "--ckpt", work / "m.ckpt", "--forget-ids", work / "empty.txt",
               "--out", work / "same.ckpt") == 0
    assert (work / "same.ckpt").read_bytes() == (work / "m.ckpt").read_bytes()
    out = capsys.readouterr().out
    assert "deleted 0 entries" in out


def test_unlearn_errors(work):
    (work / "unknown.txt").write_text("123456\n")
    assert run("unlearn", "--ckpt", work / "m.ckpt", "--forget-ids", work / "unknown.txt",
               "--out", work / "z.ckpt") == 3
    (work / "garbage.txt").write_text("12\nabc\n")
    with pytest.raises(DataError):
        read_ids(work / "garbage.txt")
    (work / "broken.ckpt").write_bytes(b"JUNK" + (work / "m.ckpt").read_bytes()[4:])
    assert run("unlearn", "--ckpt", work / "broken.ckpt", "--forget-ids", work / "empty.txt",
               "--out", work / "z.ckpt") == 4
    assert run("unlearn", "--ckpt", work / "missing.ckpt", "--forget-ids", work / "empty.txt",
               "--out", work / "z.ckpt") == 1


def eval_report(work, capsys, *extra):
    assert run("eval", "--ckpt", work / "u.ckpt", "--data", work / "data",
               "--forget-ids", work / "forget.txt", *extra) == 0
    return json.loads(capsys.readouterr().out)


def test_eval_self_oracle_and_key_order(work, capsys):
    text_path = work / "report.json"
    rep = eval_report(work, capsys, "--oracle", work / "u.ckpt", "--report", text_path)
    assert rep["avg_gap"] == 0.0
    assert '"avg_gap": 0.0000' in text_path.read_text()
    assert list(rep) == ["ta", "ra", "fa", "mia_auroc", "avg_gap", "p_s", "unlearn_seconds"]
    rep = eval_report(work, capsys, "--oracle", work / "oracle.ckpt")
    assert rep["avg_gap"] >= 0
    assert eval_report(work, capsys)["avg_gap"] is None


def test_eval_k1_strategies_agree(work, capsys):
    tas = {eval_report(work, capsys, "--strategy", s, "--k", "1")["ta"] for s in ("ensemble", "softmax", "rank")}
    assert len(tas) == 1


def test_eval_k_sweep(work, capsys):
    reps = [eval_report(work, capsys, "--k", str(k)) for k in (1, 2, 4, 8, 16)]
    assert len(reps) == 5 and all(0 <= r["ta"] <= 100 for r in reps)


def test_export_tokens2d(work):
    out = work / "tok"
    assert run("export", "--ckpt", work / "m.ckpt", "--data", work / "data", "--kind", "tokens2d", "--out", out) == 0
    n_live = int(load_checkpoint(work / "m.ckpt").tensors["mem.live"].sum())
    for stem in ("values2d", "features2d"):
        table = rows(out / f"{stem}.csv")
        assert len(table) == n_live and list(table[0]) == ["id", "x", "y", "label"]
        ET.parse(out / f"{stem}.svg")


def test_export_neighbors_respects_deletion(work):
    out = work / "nb"
    assert run("export", "--ckpt", work / "m.ckpt", "--data", work / "data", "--kind", "neighbors",
               "--forget-ids", work / "forget.txt", "--out", out) == 0
    forget = set(read_ids(work / "forget.txt"))
    table = rows(out / "neighbors.csv")
    pre = [r for r in table if r["state"] == "pre"]
    post = [r for r in table if r["state"] == "post"]
    assert pre and post
    assert any(int(r["neighbor_id"]) == int(r["query_id"]) for r in pre)
    assert not any(int(r["neighbor_id"]) in forget for r in post)


def test_export_curves_and_unknown_kind(work):
    out = work / "curves"
    assert run("export", "--ckpt", work / "m.ckpt", "--kind", "curves", "--out", out) == 0
    assert len(rows(out / "curves.csv")) == 3
    for name in ("curves_loss.svg", "curves_accuracy.svg"):
        root = ET.parse(out / name).getroot()
        assert root.tag.endswith("svg")
    assert run("export", "--ckpt", work / "m.ckpt", "--kind", "umap", "--out", out) == 2
    assert run("export", "--ckpt", work / "m.ckpt", "--kind", "tokens2d", "--out", out) == 2


def test_gen_data_bad_spec(work):
    assert run("gen-data", "--spec", write_json(work / "s.json", {"classes": 0}), "--out", work / "d2") == 2
    assert run("gen-data", "--spec", write_json(work / "s2.json", {"colour": 1}), "--out", work / "d2") == 2
    assert not os.path.exists(work / "d2")


def test_pca_is_deterministic_and_centered():
    x = np.random.default_rng(0).normal(size=(40, 5)) * [5, 1, 0.1, 0.1, 0.1]
    a, b = pca_2d(x), pca_2d(x.copy())
    assert np.array_equal(a, b) and a.shape == (40, 2)
    assert np.allclose(a.mean(axis=0), 0, atol=1e-9)
    assert a[:, 0].var() >= a[:, 1].var()
