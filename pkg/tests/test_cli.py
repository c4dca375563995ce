import csv
import json

import numpy as np
import pytest

from vesselseg.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from vesselseg.volume_io import Mask, Volume, load_mask, save_volume


@pytest.fixture(scope="module")
def cfg(tmp_path_factory):
    root = tmp_path_factory.mktemp("cfg")
    doc = {
        "phantom": {"dims": [6, 32, 32], "r_max": 2.0},
        "model": {"adapter": {"blocks_per_stage": 1}},
        "train": {"steps": 2, "crop_depth": 4, "eval_every": 2},
        "heldout": 1,
    }
    path = root / "run.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, cfg):
    out = tmp_path_factory.mktemp("ph") / "train"
    assert main(["phantom", "--spec", str(cfg), "--n", "2", "--out", str(out), "--seed", "3"]) == EXIT_OK
    return out / "manifest.json"


def test_phantom_manifest_and_repeatability(tmp_path, cfg, dataset):
    assert len(json.loads(dataset.read_text())["items"]) == 2
    main(["phantom", "--spec", str(cfg), "--n", "2", "--out", str(tmp_path / "again"), "--seed", "3"])
    for f in sorted(dataset.parent.iterdir()):
        assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes()


def test_phantom_bad_spec(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"phantom": {"contrast": -1}}))
    assert main(["phantom", "--spec", str(bad), "--n", "1", "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert "contrast" in capsys.readouterr().err
    bad.write_text(json.dumps({"phantom": {}, "extra": 1}))
    assert main(["phantom", "--spec", str(bad), "--n", "1", "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["phantom", "--out", str(tmp_path)])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE


def test_train_eval_infer_score(tmp_path, cfg, dataset):
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(run)]) == EXIT_OK
    assert (run / "training.png").is_file() and (run / "checkpoint" / "state.json").is_file()
    rep = tmp_path / "rep"
    assert main(["eval", "--ckpt", str(run / "checkpoint"), "--data", str(dataset), "--report", str(rep)]) == EXIT_OK
    rows = list(csv.DictReader(open(rep / "metrics.csv")))
    assert len(rows) == 2 and (rep / "metrics.png").is_file()
    rep2 = tmp_path / "rep2"
    main(["eval", "--ckpt", str(run / "checkpoint"), "--data", str(dataset), "--report", str(rep2)])
    assert (rep / "metrics.csv").read_bytes() == (rep2 / "metrics.csv").read_bytes()

    out = tmp_path / "pred.msk"
    vol = dataset.parent / "case_000.vol"
    assert main(["infer", "--ckpt", str(run / "checkpoint"), "--volume", str(vol), "--out", str(out)]) == EXIT_OK
    assert load_mask(out).dims == (6, 32, 32)

    # ground truth scored against itself
    sc = tmp_path / "score"
    assert main(["score", "--pred", str(dataset.parent), "--gt", str(dataset.parent), "--report", str(sc)]) == EXIT_OK
    assert all(float(r["dice"]) == 1.0 for r in csv.DictReader(open(sc / "metrics.csv")))


def test_train_ablate_flag_and_errors(tmp_path, cfg, dataset, capsys):
    run = tmp_path / "noad"
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(run), "--ablate", "no-adapter"]) == EXIT_OK
    state = json.loads((run / "checkpoint" / "state.json").read_text())
    assert state["flags"]["use_adapter"] is False
    full = tmp_path / "full"
    main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(full)])
    assert state["trainable_params"] < json.loads((full / "checkpoint" / "state.json").read_text())["trainable_params"]
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "none.json"), "--out", str(run)]) == EXIT_DATA
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(run), "--ablate", "bogus"]) == EXIT_USAGE
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(run),
                 "--ablate", "no-adapter,no-aggregator"]) == EXIT_USAGE
    assert main(["infer", "--ckpt", str(tmp_path / "nockpt"), "--volume", "x.vol", "--out", "y.msk"]) == EXIT_DATA


def test_eval_accepts_ood(tmp_path, cfg):
    ood = tmp_path / "ood"
    assert main(["phantom", "--spec", str(cfg), "--n", "1", "--out", str(ood), "--ood"]) == EXIT_OK
    run = tmp_path / "r"
    main(["train", "--config", str(cfg), "--data", str(ood / "manifest.json"), "--out", str(run), "--steps", "1"])
    assert main(["eval", "--ckpt", str(run / "checkpoint"), "--data", str(ood / "manifest.json"), "--report", str(tmp_path / "e")]) == EXIT_OK


def test_ablate_table(tmp_path, cfg, dataset):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg), "--data", str(dataset), "--out", str(out), "--steps", "1"]) == EXIT_OK
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [r["method"] for r in rows] == [
        "w/o 3D Aggregator", "w/o 3D Adapter", "Only Last Layer (11)", "Only Last Layer (11) w/o Z", "Ours (Full)",
    ]
    assert [r["full"] for r in rows] == ["False"] * 4 + ["True"]
    assert len({r["seeds"] for r in rows}) == 1
    assert "**Ours (Full)**" in (out / "ablation.md").read_text()
    assert (out / "ablation.png").is_file() and (out / "heldout" / "manifest.json").is_file()


def test_infer_rejects_mask(tmp_path, cfg, dataset):
    run = tmp_path / "r"
    main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(run), "--steps", "1"])
    m = tmp_path / "m.msk"
    save_volume(Mask(np.zeros((2, 32, 32), np.uint8)), m)
    assert main(["infer", "--ckpt", str(run / "checkpoint"), "--volume", str(m), "--out", str(tmp_path / "o.msk")]) == EXIT_DATA
