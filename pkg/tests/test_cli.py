import csv
import hashlib
import json

import pytest

from davsr.cli import ExperimentConfig, bundle_dir, main
from davsr.metrics import CSV_COLUMNS
from davsr.volume import read_vol

TINY_RUN = {
    "phantom_shape": [16, 16, 16], "n_train": 2, "n_val": 1, "n_test": 2, "scales": [2],
    "train": {"epochs": 2, "steps_per_epoch": 2, "batch": 4, "patch": [8, 4], "val_every": 1},
    "srn": {"epochs": 1, "steps_per_epoch": 2, "batch": 4, "patch": [8, 8]},
    "adapt": {"epochs": 1}, "smore": {"epochs": 1},
}


def write_config(tmp_path, **overrides):
    doc = {**TINY_RUN, "out_root": str(tmp_path / "run"), **overrides}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


def tree_hashes(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    return tmp, cfg


def test_gen_data_default_counts(tmp_path):
    assert main(["gen-data", "--config", str(write_config(tmp_path, **{
        k: v for k, v in ExperimentConfig().to_dict().items() if k in ("n_train", "n_val", "n_test", "scales")
    }, phantom_shape=[16, 16, 16]))]) == 0
    manifest = json.loads((tmp_path / "run" / "data" / "manifest.json").read_text())
    sets = [e["set"] for e in manifest["volumes"]]
    assert sets.count("train") == 6 and sets.count("val") == 2
    assert manifest["test_sets"] == ["test_shift0", "test_shift0.8"]
    for name in manifest["test_sets"]:
        roles = [e["role"] for e in manifest["volumes"] if e["set"] == name]
        assert roles.count("hr") == 4 and roles.count("lr") == 4


def test_gen_data_reproducible_and_guarded(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    first = tree_hashes(tmp_path / "run" / "data")
    assert main(["gen-data", "--config", str(cfg)]) == 1
    assert main(["gen-data", "--config", str(cfg), "--force"]) == 0
    assert tree_hashes(tmp_path / "run" / "data") == first
    lr = read_vol(tmp_path / "run" / "data" / "test_shift0" / "case000_x2_lr.vol", role="lr")
    assert lr.shape == (16, 16, 8)


def test_train_outputs(trained_run):
    tmp, _ = trained_run
    root = tmp / "run" / "bundles" / "x2" / "seed0"
    assert (root / "main" / "manifest.json").exists() and (root / "saint" / "manifest.json").exists()
    lines = (root / "logs" / "main_main.jsonl").read_text().splitlines()
    assert len(lines) == TINY_RUN["train"]["epochs"]
    assert all(set(json.loads(line)) >= {"epoch", "l_tpu", "l_ipu", "l_main"} for line in lines)


def test_train_main_stage_is_flagged(tmp_path):
    cfg = write_config(tmp_path, variants=["davsr_na"])
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg), "--stage", "main"]) == 0
    manifest = json.loads((tmp_path / "run" / "bundles" / "x2" / "seed0" / "main" / "manifest.json").read_text())
    assert {"stage": "srn", "trained": False} in manifest["provenance"]


def test_adapt_per_volume_and_audit(trained_run):
    tmp, cfg = trained_run
    assert main(["adapt", "--config", str(cfg), "--variant", "davsr", "--force"]) == 0
    out = bundle_dir(ExperimentConfig.from_dict(json.loads(cfg.read_text())), 2, 0) / "adapted" / "test_shift0.8"
    assert json.loads((out / "audit.json").read_text())["hr_reads"] == 0
    assert sorted(p.name for p in (out / "davsr").iterdir()) == ["case000_x2", "case001_x2"]
    assert not (out / "davsr_nofro").exists()


def test_adapt_zero_epochs_is_noop(trained_run, tmp_path):
    tmp, cfg = trained_run
    cfg0 = tmp_path / "zero.json"
    cfg0.write_text(json.dumps({**json.loads(cfg.read_text()), "adapt": {"epochs": 0},
                                "per_dataset_adaptation": True}))
    assert main(["adapt", "--config", str(cfg0), "--variant", "davsr", "--force"]) == 0
    root = tmp / "run" / "bundles" / "x2" / "seed0"
    main_tensors = json.loads((root / "main" / "manifest.json").read_text())["tensors"]
    adapted = json.loads((root / "adapted" / "test_shift0" / "davsr" / "manifest.json").read_text())["tensors"]
    assert [t["sha256"] for t in main_tensors] == [t["sha256"] for t in adapted]


def test_eval_bicubic_without_bundles(tmp_path):
    cfg = write_config(tmp_path, variants=["bicubic"])
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["eval", "--config", str(cfg)]) == 0
    rows = list(csv.reader((tmp_path / "run" / "reports" / "report.csv").open()))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert {r[0] for r in rows[1:]} == {"test_shift0", "test_shift0.8"}
    assert all(r[2] == "bicubic" and r[5] == "2" for r in rows[1:])


def test_eval_missing_bundle_marks_absent(tmp_path):
    cfg = write_config(tmp_path, variants=["bicubic", "davsr_na"])
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["eval", "--config", str(cfg)]) == 2
    report = json.loads((tmp_path / "run" / "reports" / "report.json").read_text())
    absent = {r["variant"] for r in report["rows"] if r["absent"]}
    assert absent == {"davsr_na"}


def test_exit_codes(tmp_path, trained_run):
    assert main(["train", "--config", str(write_config(tmp_path))]) == 2  # no data yet
    with pytest.raises(SystemExit) as err:
        main(["train", "--scale", "3"])
    assert err.value.code == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    assert main(["gen-data", "--config", str(bad)]) == 1
    _, cfg = trained_run
    blow = tmp_path / "blow.json"
    blow.write_text(json.dumps({**json.loads(cfg.read_text()),
                                "adapt": {"epochs": 2, "lr": 1e12, "optimizer": "sgd"}}))
    assert main(["adapt", "--config", str(blow), "--variant", "davsr", "--force"]) == 3


def test_output_root_override(tmp_path, monkeypatch):
    monkeypatch.setenv("DAVSR_OUT", str(tmp_path / "elsewhere"))
    assert main(["gen-data", "--config", str(write_config(tmp_path))]) == 0
    assert (tmp_path / "elsewhere" / "data" / "manifest.json").exists()
    assert not (tmp_path / "run").exists()


def test_infer_writes_volume(trained_run, tmp_path):
    tmp, cfg = trained_run
    src = tmp / "run" / "data" / "test_shift0" / "case000_x2_lr.vol"
    out = tmp_path / "sr.vol"
    assert main(["infer", "--config", str(cfg), "--variant", "davsr_na", "--scale", "2",
                 "--bundle", str(tmp / "run" / "bundles" / "x2" / "seed0" / "main"),
                 "--input", str(src), "--output", str(out)]) == 0
    assert read_vol(out, role="sr").shape == (16, 16, 16)
    assert main(["infer", "--config", str(cfg), "--input", str(src), "--output", str(out)]) == 1
