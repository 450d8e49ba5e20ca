import json
import subprocess
import sys

import pytest

from camloc.cli import build_config, main, make_parser
from camloc.data import load_feature_store, load_manifest
from camloc.errors import ConfigError
from camloc.harness import load_run_config


def write_config(tmp_path, name="cfg.json", **overrides):
    payload = {
        "scene": "toy", "head": "lstm", "hidden_size": 2, "feature_size": 8,
        "steps": 3, "seed": 1, "out_dir": str(tmp_path / "run"),
        "optim": {"beta_loss": 5.0, "lr": 1e-3, "batch_size": 4,
                  "lam": 0.0, "dropout": 0.0},
        "synth": {"seed": 2, "n_train": 12, "n_test": 3, "extent_m": 4.0},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            payload.setdefault(key, {}).update(value)
        elif value is None:
            payload.pop(key, None)
        else:
            payload[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


class TestBuildConfig:
    def parse(self, argv):
        return make_parser().parse_args(argv)

    def test_config_file_alone(self, tmp_path):
        path = write_config(tmp_path)
        cfg = build_config(self.parse(["train", "--config", str(path)]))
        assert cfg.scene == "toy"
        assert cfg.optim.beta_loss == 5.0

    def test_flags_override_file(self, tmp_path):
        path = write_config(tmp_path)
        cfg = build_config(self.parse(
            ["train", "--config", str(path), "--steps", "9", "--lr", "0.01",
             "--n-train", "20"]))
        assert cfg.steps == 9
        assert cfg.optim.lr == 0.01
        assert cfg.synth.n_train == 20
        assert cfg.scene == "toy"

    def test_flags_alone(self, tmp_path):
        cfg = build_config(self.parse(
            ["train", "--scene", "s", "--head", "fc", "--hidden-size", "2",
             "--feature-size", "8", "--steps", "2", "--out-dir",
             str(tmp_path / "o"), "--beta", "7", "--lr", "1e-3",
             "--synth-seed", "4", "--n-train", "12", "--n-test", "3",
             "--extent-m", "4"]))
        assert cfg.head == "fc"
        assert cfg.optim.beta_loss == 7.0
        assert cfg.synth.seed == 4

    def test_beta_preset_names(self, tmp_path):
        path = write_config(tmp_path)
        cfg = build_config(self.parse(
            ["train", "--config", str(path), "--beta", "indoor-low"]))
        assert cfg.optim.beta_loss == 120.0
        cfg = build_config(self.parse(
            ["train", "--config", str(path), "--beta", "outdoor-high"]))
        assert cfg.optim.beta_loss == 2000.0

    def test_bad_beta_rejected_by_parser(self):
        with pytest.raises(SystemExit):
            self.parse(["train", "--beta", "cathedral"])

    def test_lr_required(self, tmp_path):
        path = write_config(tmp_path, optim={"beta_loss": 5.0})
        (tmp_path / "nolr.json").write_text(json.dumps(
            {**json.loads(path.read_text()),
             "optim": {"beta_loss": 5.0, "batch_size": 4}}))
        with pytest.raises(ConfigError, match="lr"):
            build_config(self.parse(["train", "--config",
                                     str(tmp_path / "nolr.json")]))

    def test_missing_config_file(self):
        with pytest.raises(ConfigError, match="not found"):
            build_config(self.parse(["train", "--config", "/no/such/file.json"]))


class TestTrainVerb:
    def test_train_from_config_file(self, tmp_path):
        path = write_config(tmp_path)
        assert main(["-q", "train", "--config", str(path)]) == 0
        out = tmp_path / "run"
        for name in ("final.clck", "best.clck", "train_log.csv",
                     "eval_test.json", "config.json"):
            assert (out / name).exists()

    def test_beta_preset_lands_in_saved_config(self, tmp_path):
        path = write_config(tmp_path)
        assert main(["-q", "train", "--config", str(path),
                     "--beta", "indoor-high"]) == 0
        saved = load_run_config(tmp_path / "run" / "config.json")
        assert saved.optim.beta_loss == 750.0

    def test_missing_lr_exits_nonzero(self, tmp_path):
        cfg = {"scene": "t", "head": "lstm", "hidden_size": 2,
               "feature_size": 8, "steps": 2, "out_dir": str(tmp_path / "r"),
               "optim": {"beta_loss": 5.0},
               "synth": {"seed": 2, "n_train": 12, "n_test": 3, "extent_m": 4.0}}
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        assert main(["-q", "train", "--config", str(path)]) == 1

    def test_missing_dataset_exits_nonzero(self, tmp_path):
        path = write_config(tmp_path, synth=None,
                            data={"train_manifest": str(tmp_path / "no.txt"),
                                  "test_manifest": str(tmp_path / "no.txt"),
                                  "feature_store": str(tmp_path / "no.clfs")})
        assert main(["-q", "train", "--config", str(path)]) == 1


class TestEvalVerb:
    def test_eval_matches_training_report(self, tmp_path):
        path = write_config(tmp_path)
        assert main(["-q", "train", "--config", str(path)]) == 0
        out = tmp_path / "run"
        rc = main(["-q", "eval", "--checkpoint", str(out / "final.clck"),
                   "--config", str(path), "--out", str(tmp_path / "again.json")])
        assert rc == 0
        assert (tmp_path / "again.json").read_bytes() == \
            (out / "eval_test.json").read_bytes()

    def test_default_output_next_to_checkpoint(self, tmp_path):
        path = write_config(tmp_path)
        main(["-q", "train", "--config", str(path)])
        out = tmp_path / "run"
        rc = main(["-q", "eval", "--checkpoint", str(out / "best.clck"),
                   "--split", "train", "--config", str(path)])
        assert rc == 0
        report = json.loads((out / "eval_train.json").read_text())
        assert report["split"] == "train"
        assert report["n"] == 12


class TestAblateVerb:
    def test_single_seed(self, tmp_path):
        path = write_config(tmp_path, out_dir=str(tmp_path / "ab"))
        rc = main(["-q", "ablate", "--config", str(path), "--seeds", "5"])
        assert rc == 0
        payload = json.loads((tmp_path / "ab" / "ablation.json").read_text())
        assert payload["runs"][0]["seed"] == 5
        assert payload["n_seeds"] == 1

    def test_n_seeds_counts_up_from_config_seed(self, tmp_path):
        path = write_config(tmp_path, out_dir=str(tmp_path / "ab2"), seed=4)
        rc = main(["-q", "ablate", "--config", str(path), "--n-seeds", "2"])
        assert rc == 0
        payload = json.loads((tmp_path / "ab2" / "ablation.json").read_text())
        assert [r["seed"] for r in payload["runs"]] == [4, 5]


class TestReportVerb:
    def test_aggregates_eval_jsons(self, tmp_path):
        path = write_config(tmp_path)
        main(["-q", "train", "--config", str(path)])
        eval_json = tmp_path / "run" / "eval_test.json"
        rc = main(["-q", "report", str(eval_json), str(eval_json),
                   "--out-dir", str(tmp_path / "agg"), "--no-figures"])
        assert rc == 0
        lines = (tmp_path / "agg" / "report.csv").read_text().splitlines()
        assert len(lines) == 3
        assert not list((tmp_path / "agg").glob("*.png"))

    def test_figures_by_default(self, tmp_path):
        path = write_config(tmp_path)
        main(["-q", "train", "--config", str(path)])
        eval_json = tmp_path / "run" / "eval_test.json"
        rc = main(["-q", "report", str(eval_json),
                   "--out-dir", str(tmp_path / "agg")])
        assert rc == 0
        assert sorted(p.name for p in (tmp_path / "agg").glob("*.png")) == \
            ["hist_ori_deg.png", "hist_pos_m.png"]
        assert sorted(p.name for p in (tmp_path / "agg").glob("*.svg")) == \
            ["hist_ori_deg.svg", "hist_pos_m.svg"]

    def test_missing_report_exits_nonzero(self, tmp_path):
        rc = main(["-q", "report", str(tmp_path / "nope.json"),
                   "--out-dir", str(tmp_path / "agg")])
        assert rc == 1


class TestSynthGenVerb:
    def test_writes_loadable_dataset(self, tmp_path):
        out = tmp_path / "scene"
        rc = main(["-q", "synth-gen", "--out", str(out), "--seed", "3",
                   "--n-train", "10", "--n-test", "2", "--feature-size", "4",
                   "--extent-m", "6"])
        assert rc == 0
        train = load_manifest(out / "train.txt", split="train", check_files=False)
        test = load_manifest(out / "test.txt", split="test", check_files=False)
        store = load_feature_store(out / "features.clfs")
        assert (len(train), len(test)) == (10, 2)
        assert store.feature_size == 4
        for rel, _ in list(train.records) + list(test.records):
            assert store.get(rel).shape == (4,)

    def test_generated_dataset_trains(self, tmp_path):
        out = tmp_path / "scene"
        main(["-q", "synth-gen", "--out", str(out), "--n-train", "12",
              "--n-test", "3", "--feature-size", "8"])
        path = write_config(tmp_path, synth=None,
                            data={"train_manifest": str(out / "train.txt"),
                                  "test_manifest": str(out / "test.txt"),
                                  "feature_store": str(out / "features.clfs")})
        assert main(["-q", "train", "--config", str(path)]) == 0
        assert (tmp_path / "run" / "final.clck").exists()


class TestEntryPoint:
    def test_console_script_runs(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "camloc.cli", "-q", "synth-gen",
             "--out", str(tmp_path / "s"), "--n-train", "10", "--n-test", "1",
             "--feature-size", "4"],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert (tmp_path / "s" / "features.clfs").exists()

    def test_help_lists_verbs(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["--help"])
        assert err.value.code == 0
        out = capsys.readouterr().out
        for verb in ("train", "eval", "ablate", "report", "synth-gen"):
            assert verb in out
