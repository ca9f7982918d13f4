"""CLI tests: config parsing, dataset specs, and subcommand integration
through main()."""

import json

import numpy as np
import pytest

from subcomp import data as datamod
from subcomp.cli import (ConfigError, build_run_config, main, parse_config,
                         parse_dataset_spec)

BLOBS = "synth:blobs,seed=0,n=200,dim=8,classes=2"

BASE_CFG = """
# small separable problem
dataset = {blobs}
model.arch = mlp
model.input_shape = 8
model.num_classes = 2
model.hidden = 12
train.epochs = 60
train.lr = 0.05
train.batch_size = null
train.seed = 0
train.quant_epochs = 15
train.quant_lr = 0.02
projector_kind = dense
sub_dim = 16
num_levels = 4
init_method = kmeans
""".format(blobs=BLOBS)


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(BASE_CFG)
    return str(p)


class TestParseConfig:
    def test_key_value_with_comments_and_nesting(self):
        cfg = parse_config("a = 1  # trailing\n\n# full line\nb.c = hi\nb.d = 2.5\n")
        assert cfg == {"a": 1, "b": {"c": "hi", "d": 2.5}}

    def test_json_passthrough(self):
        cfg = parse_config('{"model": {"arch": "mlp"}, "sub_dim": 9}')
        assert cfg["sub_dim"] == 9

    def test_comma_values_become_lists(self):
        cfg = parse_config("model.hidden = 64,32\n")
        assert cfg["model"]["hidden"] == [64, 32]

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config("a = 1\nbroken line\n")

    def test_scalar_nesting_conflict_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("a = 1\na.b = 2\n")


class TestDatasetSpec:
    def test_blobs_and_random(self):
        ds = parse_dataset_spec(BLOBS)
        assert len(ds) == 200 and ds.input_shape == (8,)
        dr = parse_dataset_spec("synth:random,seed=1,n=50,dim=4,classes=3")
        assert dr.num_classes == 3

    def test_images_with_options(self):
        ds = parse_dataset_spec(
            "synth:image,seed=2,n=30,height=10,width=12,classes=4,sample_seed=7")
        assert ds.inputs.shape == (30, 10, 12)
        assert ds.num_classes == 4

    def test_idx_round_trip(self, tmp_path):
        rc = main(["corrupt", "--dataset", "synth:image,seed=0,n=25,height=6,width=6",
                   "--mode", "shuffle_labels", "--seed", "3",
                   "--out", str(tmp_path / "out")])
        assert rc == 0
        ds = parse_dataset_spec(
            f"idx:{tmp_path}/out-images.idx,{tmp_path}/out-labels.idx")
        assert len(ds) == 25 and ds.input_shape == (6, 6)

    def test_bad_specs(self):
        for spec in ("csv:stuff", "idx:only_one_path", "synth:spiral",
                     "synth:image,seed"):
            with pytest.raises(ConfigError):
                parse_dataset_spec(spec)


class TestBuildRunConfig:
    def test_sections_routed(self):
        cfg = parse_config(BASE_CFG)
        run = build_run_config(cfg)
        assert run.model.hidden == (12,)
        assert run.train.lr == 0.05 and run.train.batch_size is None
        assert run.sub_dim == 16 and run.init_method == "kmeans"

    def test_missing_model_section(self):
        with pytest.raises(ConfigError, match="model"):
            build_run_config({"sub_dim": 4})


class TestCommands:
    def test_bound_writes_report_and_blob(self, tmp_path, cfg_file, capsys):
        report = tmp_path / "report.json"
        blob = tmp_path / "weights.bin"
        rc = main(["bound", "--config", cfg_file, "--out", str(report),
                   "--blob", str(blob)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "catoni=" in out and "emp_risk=" in out
        doc = json.loads(report.read_text())
        assert doc["schema_version"] == 1
        run = doc["runs"][0]
        assert run["emp_risk"] <= 0.1
        assert run["catoni"] < 1.0
        assert blob.stat().st_size * 8 >= run["ledger"]["payload_bits"]

    def test_seed_and_delta_overrides(self, tmp_path, cfg_file):
        outs = []
        for seed in (1, 1, 2):
            p = tmp_path / f"r{len(outs)}.json"
            assert main(["bound", "--config", cfg_file, "--seed", str(seed),
                         "--delta", "0.1", "--out", str(p)]) == 0
            outs.append(json.loads(p.read_text())["runs"][0])
        assert outs[0]["catoni"] == outs[1]["catoni"]
        assert outs[0]["delta"] == 0.1
        assert outs[0]["config"]["init_seed"] == 1
        assert outs[2]["config"]["init_seed"] == 2

    def test_corrupt_flag_degrades_fit(self, tmp_path, cfg_file):
        p = tmp_path / "bad.json"
        assert main(["bound", "--config", cfg_file,
                     "--corrupt", "shuffle_labels:5", "--out", str(p)]) == 0
        run = json.loads(p.read_text())["runs"][0]
        assert run["catoni"] > 0.4

    def test_train_then_transfer_prior(self, tmp_path, cfg_file):
        ckpt = tmp_path / "prior.ckpt"
        assert main(["train", "--config", cfg_file, "--out", str(ckpt)]) == 0
        assert ckpt.read_bytes()[:4] == b"OCKP"
        p = tmp_path / "transfer.json"
        assert main(["bound", "--config", cfg_file,
                     "--prior", f"transfer:{ckpt}", "--out", str(p)]) == 0
        run = json.loads(p.read_text())["runs"][0]
        assert run["prior_mode"] == "transfer"

    def test_datadep_prior_flag(self, tmp_path, cfg_file):
        p = tmp_path / "dd.json"
        assert main(["bound", "--config", cfg_file, "--prior", "datadep:0.5",
                     "--out", str(p)]) == 0
        run = json.loads(p.read_text())["runs"][0]
        assert run["prior_mode"] == "data_dependent"
        assert run["hoeffding_prior"] is not None
        assert run["n"] == 100

    def test_grid_and_report_conversion(self, tmp_path, cfg_file, capsys):
        gj = tmp_path / "grid.json"
        rc = main(["grid", "--config", cfg_file, "--grid", "num_levels=2,4",
                   "--grid", "sub_dim=8,16", "--out", str(gj)])
        assert rc == 0
        assert "4 runs" in capsys.readouterr().out
        doc = json.loads(gj.read_text())
        assert len(doc["runs"]) == 4
        assert doc["summary"]["hyperparameter_bits"] == pytest.approx(2.0)
        csv = tmp_path / "grid.csv"
        assert main(["report", "--in", str(gj), "--format", "csv",
                     "--out", str(csv)]) == 0
        lines = csv.read_text().strip().split("\n")
        assert len(lines) == 5 and lines[0].startswith("run,prior_mode")

    def test_grid_from_config_section(self, tmp_path, cfg_file):
        text = BASE_CFG + "grid.num_levels = 2,4\n"
        p = tmp_path / "g.cfg"
        p.write_text(text)
        out = tmp_path / "g.json"
        assert main(["grid", "--config", str(p), "--out", str(out)]) == 0
        assert len(json.loads(out.read_text())["runs"]) == 2


class TestErrors:
    def test_missing_dataset(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("model.arch = mlp\nmodel.input_shape = 4\n"
                     "model.num_classes = 2\n")
        assert main(["bound", "--config", str(p)]) == 2

    def test_missing_config_file(self):
        assert main(["bound", "--config", "/nonexistent.cfg",
                     "--dataset", BLOBS]) == 2

    def test_bad_prior_flag(self, cfg_file):
        assert main(["bound", "--config", cfg_file, "--prior", "bogus"]) == 2

    def test_grid_without_grids(self, cfg_file):
        assert main(["grid", "--config", cfg_file]) == 2

    def test_report_schema_mismatch(self, tmp_path):
        p = tmp_path / "old.json"
        p.write_text(json.dumps({"schema_version": 99, "runs": []}))
        assert main(["report", "--in", str(p), "--out",
                     str(tmp_path / "o.csv")]) == 2
