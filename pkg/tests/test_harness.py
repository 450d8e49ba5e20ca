import json

import numpy as np
import pytest

from camloc.checkpoint import load_checkpoint
from camloc.data import (DatasetManifest, FeatureStore, save_feature_store,
                         save_manifest, synth_scene)
from camloc.errors import ConfigError, ParseError, UsageError
from camloc.harness import (BETA_PRESETS, ManifestSpec, RunConfig, SynthSpec,
                            cmd_ablate, cmd_eval, cmd_train, config_from_dict,
                            config_hash, config_to_dict, evaluate_poses,
                            init_model, load_dataset, load_run_config,
                            matched_bottleneck, model_from_checkpoint,
                            save_run_config)
from camloc.layers import FcHeadParams, HeadParams
from camloc.optim import OptimConfig
from camloc.pose import Pose


def random_pose(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return Pose(p=rng.normal(size=3), q=q)


def tiny_config(tmp_path, **overrides):
    """Small synthetic run that trains in well under a second."""
    base = dict(
        scene="toy", head="lstm", hidden_size=2, feature_size=8,
        optim=OptimConfig(beta_loss=10.0, lr=1e-3, batch_size=4, lam=0.0,
                          dropout=0.0),
        steps=4, seed=3,
        out_dir=str(tmp_path / "run"),
        synth=SynthSpec(seed=1, n_train=12, n_test=4, extent_m=4.0),
    )
    base.update(overrides)
    return RunConfig(**base)


class TestRunConfig:
    def test_dict_round_trip(self, tmp_path):
        cfg = tiny_config(tmp_path)
        assert config_from_dict(config_to_dict(cfg)) == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = tiny_config(tmp_path)
        save_run_config(cfg, tmp_path / "c.json")
        assert load_run_config(tmp_path / "c.json") == cfg

    def test_hash_is_stable(self, tmp_path):
        a = tiny_config(tmp_path)
        b = tiny_config(tmp_path)
        assert config_hash(a) == config_hash(b)
        assert len(config_hash(a)) == 64

    def test_hash_tracks_every_section(self, tmp_path):
        base = tiny_config(tmp_path)
        variants = [
            tiny_config(tmp_path, seed=4),
            tiny_config(tmp_path, steps=5),
            tiny_config(tmp_path, optim=OptimConfig(beta_loss=11.0, lr=1e-3,
                                                    batch_size=4, lam=0.0,
                                                    dropout=0.0)),
            tiny_config(tmp_path, synth=SynthSpec(seed=2, n_train=12, n_test=4,
                                                  extent_m=4.0)),
        ]
        hashes = {config_hash(v) for v in variants}
        assert config_hash(base) not in hashes
        assert len(hashes) == len(variants)

    def test_unknown_top_level_field(self, tmp_path):
        d = config_to_dict(tiny_config(tmp_path))
        d["momentum"] = 0.9
        with pytest.raises(ConfigError, match="momentum"):
            config_from_dict(d)

    def test_unknown_optim_field(self, tmp_path):
        d = config_to_dict(tiny_config(tmp_path))
        d["optim"]["nesterov"] = True
        with pytest.raises(ConfigError, match="nesterov"):
            config_from_dict(d)

    def test_beta_loss_required(self, tmp_path):
        d = config_to_dict(tiny_config(tmp_path))
        del d["optim"]["beta_loss"]
        with pytest.raises(ConfigError, match="beta_loss"):
            config_from_dict(d)

    def test_config_files_must_set_lr(self, tmp_path):
        d = config_to_dict(tiny_config(tmp_path))
        del d["optim"]["lr"]
        (tmp_path / "c.json").write_text(json.dumps(d))
        with pytest.raises(ConfigError, match="lr"):
            load_run_config(tmp_path / "c.json")
        # in-memory construction may still fall back to the library default
        assert config_from_dict(d).optim.lr == 1e-4

    def test_corrupt_json_reports_position(self, tmp_path):
        (tmp_path / "c.json").write_text('{\n  "scene": "x",\n  oops\n}')
        with pytest.raises(ParseError) as err:
            load_run_config(tmp_path / "c.json")
        assert err.value.line == 3

    def test_exactly_one_dataset(self, tmp_path):
        with pytest.raises(ConfigError, match="exactly one"):
            tiny_config(tmp_path, synth=None)
        spec = ManifestSpec(train_manifest="a", test_manifest="b",
                            feature_store="c")
        with pytest.raises(ConfigError, match="exactly one"):
            tiny_config(tmp_path, data=spec)

    def test_head_validated(self, tmp_path):
        with pytest.raises(ConfigError, match="head"):
            tiny_config(tmp_path, head="transformer")

    def test_bottleneck_needs_fc_head(self, tmp_path):
        with pytest.raises(ConfigError, match="fc_bottleneck"):
            tiny_config(tmp_path, fc_bottleneck=3)
        cfg = tiny_config(tmp_path, head="fc", fc_bottleneck=3)
        assert cfg.fc_bottleneck == 3

    def test_beta_presets(self):
        assert BETA_PRESETS == {"indoor-low": 120.0, "indoor-high": 750.0,
                                "outdoor-low": 250.0, "outdoor-high": 2000.0,
                                "large-indoor": 1000.0}


class TestModelConstruction:
    def test_init_model_dispatch(self, tmp_path):
        rng = np.random.default_rng(0)
        lstm = init_model(tiny_config(tmp_path), rng)
        fc = init_model(tiny_config(tmp_path, head="fc"), rng)
        assert isinstance(lstm, HeadParams)
        assert isinstance(fc, FcHeadParams)
        assert fc.bottleneck == 0

    def test_matched_bottleneck_reference_width(self):
        assert matched_bottleneck(32) == 21

    @pytest.mark.parametrize("hidden", [8, 16, 32, 48])
    def test_matched_totals_are_close(self, hidden, tmp_path):
        rng = np.random.default_rng(1)
        m = matched_bottleneck(hidden)
        lstm = init_model(tiny_config(tmp_path, hidden_size=hidden,
                                      feature_size=16), rng)
        fc = init_model(tiny_config(tmp_path, head="fc", fc_bottleneck=m,
                                    feature_size=16), rng)
        n_lstm = lstm.as_model_params().total_size()
        n_fc = fc.as_model_params().total_size()
        assert abs(n_fc - n_lstm) / n_lstm < 0.02

    def test_model_from_checkpoint_unknown_head(self, tmp_path):
        rng = np.random.default_rng(2)
        params = init_model(tiny_config(tmp_path), rng).as_model_params()
        with pytest.raises(ConfigError, match="head"):
            model_from_checkpoint(params, {"head": "gru"})


class TestLoadDataset:
    def test_synth_counts(self, tmp_path):
        train, test = load_dataset(tiny_config(tmp_path))
        assert (len(train), len(test)) == (12, 4)
        assert train[0].payload.shape == (8,)

    def test_synth_matches_direct_call(self, tmp_path):
        train, _ = load_dataset(tiny_config(tmp_path))
        scene = synth_scene(seed=1, n_train=12, n_test=4, extent_m=4.0, F=8)
        np.testing.assert_array_equal(train[0].payload, scene.train[0].payload)

    def make_disk_dataset(self, tmp_path, feature_size=6):
        rng = np.random.default_rng(5)
        ids = ["seq1/f0.ppm", "seq1/f1.ppm", "seq2/f0.ppm"]
        poses, feats = [], {}
        for rel in ids:
            poses.append(random_pose(rng))
            feats[rel] = rng.normal(size=feature_size)
        save_manifest(DatasetManifest(root=tmp_path, split="train",
                                      records=tuple(zip(ids, poses))),
                      tmp_path / "train.txt")
        save_manifest(DatasetManifest(root=tmp_path, split="test",
                                      records=tuple(zip(ids[:1], poses[:1]))),
                      tmp_path / "test.txt")
        save_feature_store(FeatureStore(feats), tmp_path / "store.clfs")
        return ManifestSpec(train_manifest=str(tmp_path / "train.txt"),
                            test_manifest=str(tmp_path / "test.txt"),
                            feature_store=str(tmp_path / "store.clfs"))

    def test_manifest_path(self, tmp_path):
        spec = self.make_disk_dataset(tmp_path)
        cfg = tiny_config(tmp_path, synth=None, data=spec, feature_size=6)
        train, test = load_dataset(cfg)
        assert (len(train), len(test)) == (3, 1)
        assert train[0].id == "seq1/f0.ppm"
        assert train[0].payload.shape == (6,)

    def test_feature_size_mismatch(self, tmp_path):
        spec = self.make_disk_dataset(tmp_path, feature_size=6)
        cfg = tiny_config(tmp_path, synth=None, data=spec, feature_size=9)
        with pytest.raises(ConfigError, match="feature"):
            load_dataset(cfg)


class TestEvaluatePoses:
    def test_ground_truth_scores_zero(self):
        rng = np.random.default_rng(7)
        poses = [random_pose(rng) for _ in range(5)]
        p_hat = np.stack([t.p for t in poses])
        q_hat = np.stack([t.q for t in poses])
        rows = evaluate_poses(poses, p_hat, q_hat, [str(i) for i in range(5)])
        for _, pos_err, ori_err in rows:
            assert pos_err == 0.0
            assert ori_err == 0.0

    def test_known_offsets(self):
        truth = [Pose(p=np.zeros(3), q=np.array([1.0, 0, 0, 0]))]
        # 90 degree rotation about z: half-angle 45
        s = np.sqrt(0.5)
        rows = evaluate_poses(truth, np.array([[3.0, 4.0, 0.0]]),
                              np.array([[s, 0, 0, s]]), ["a"])
        assert rows[0][1] == pytest.approx(5.0)
        assert rows[0][2] == pytest.approx(90.0)

    def test_negated_quaternion_is_same_rotation(self):
        truth = [Pose(p=np.zeros(3), q=np.array([1.0, 0, 0, 0]))]
        rows = evaluate_poses(truth, np.zeros((1, 3)),
                              np.array([[-1.0, 0, 0, 0]]), ["a"])
        assert rows[0][2] == 0.0

    def test_length_mismatch(self):
        truth = [Pose(p=np.zeros(3), q=np.array([1.0, 0, 0, 0]))]
        with pytest.raises(UsageError):
            evaluate_poses(truth, np.zeros((2, 3)), np.zeros((2, 4)), ["a", "b"])


class TestCmdTrain:
    def test_artifacts_and_shapes(self, tmp_path):
        cfg = tiny_config(tmp_path)
        result = cmd_train(cfg)
        for path in (result.final_path, result.best_path, result.log_path,
                     result.report_path):
            assert path.exists()
        assert len(result.objectives) == cfg.steps
        lines = result.log_path.read_text().splitlines()
        assert lines[0] == "step,objective,lr"
        assert len(lines) == cfg.steps + 1
        assert result.report.n == 4
        assert result.report.split == "test"
        assert result.run_hash == config_hash(cfg)
        saved = load_run_config(result.final_path.parent / "config.json")
        assert saved == cfg

    def test_checkpoint_meta(self, tmp_path):
        cfg = tiny_config(tmp_path)
        result = cmd_train(cfg)
        _, meta = load_checkpoint(result.final_path)
        assert meta["head"] == "lstm"
        assert meta["hidden_size"] == 2
        assert meta["feature_size"] == 8
        assert meta["config_hash"] == result.run_hash
        assert meta["step"] == cfg.steps

    def test_two_runs_same_bytes(self, tmp_path):
        cfg = tiny_config(tmp_path, optim=OptimConfig(beta_loss=10.0, lr=1e-3,
                                                      batch_size=4, lam=0.0,
                                                      dropout=0.3))
        first = cmd_train(cfg)
        blobs = {p: p.read_bytes() for p in (first.final_path, first.best_path,
                                             first.log_path, first.report_path)}
        second = cmd_train(cfg)
        for path, blob in blobs.items():
            assert path.read_bytes() == blob
        assert second.objectives == first.objectives

    def test_seed_changes_trajectory(self, tmp_path):
        a = cmd_train(tiny_config(tmp_path, seed=3))
        b = cmd_train(tiny_config(tmp_path, seed=4,
                                  out_dir=str(tmp_path / "run_b")))
        assert a.objectives != b.objectives

    def test_best_checkpoint_tracks_interim_eval(self, tmp_path):
        cfg = tiny_config(tmp_path, steps=4, eval_every=2)
        result = cmd_train(cfg)
        _, meta = load_checkpoint(result.best_path)
        assert meta["step"] in (2, 4)
        assert meta["step"] == result.best_step

    def test_best_equals_final_without_evals(self, tmp_path):
        cfg = tiny_config(tmp_path, eval_every=0)
        result = cmd_train(cfg)
        params_f, meta_f = load_checkpoint(result.final_path)
        params_b, meta_b = load_checkpoint(result.best_path)
        assert meta_b["step"] == meta_f["step"]
        for name in params_f.names():
            np.testing.assert_array_equal(params_f[name].data, params_b[name].data)

    def test_fc_head_trains_too(self, tmp_path):
        result = cmd_train(tiny_config(tmp_path, head="fc"))
        _, meta = load_checkpoint(result.final_path)
        assert meta["head"] == "fc"

    def test_objective_decreases_on_longer_run(self, tmp_path):
        cfg = tiny_config(tmp_path, steps=60)
        result = cmd_train(cfg)
        first = np.mean(result.objectives[:5])
        last = np.mean(result.objectives[-5:])
        assert last < first


class TestCmdEval:
    def test_reproduces_training_report(self, tmp_path):
        cfg = tiny_config(tmp_path)
        result = cmd_train(cfg)
        report = cmd_eval(result.final_path, cfg, split="test")
        assert report == result.report

    def test_train_split(self, tmp_path):
        cfg = tiny_config(tmp_path)
        result = cmd_train(cfg)
        report = cmd_eval(result.final_path, cfg, split="train")
        assert report.n == 12
        assert report.split == "train"

    def test_feature_size_mismatch(self, tmp_path):
        cfg = tiny_config(tmp_path)
        result = cmd_train(cfg)
        other = tiny_config(tmp_path, feature_size=16)
        with pytest.raises(ConfigError, match="feature"):
            cmd_eval(result.final_path, other)

    def test_bad_split(self, tmp_path):
        cfg = tiny_config(tmp_path)
        result = cmd_train(cfg)
        with pytest.raises(UsageError, match="split"):
            cmd_eval(result.final_path, cfg, split="val")


class TestCmdAblate:
    def test_single_seed_structure(self, tmp_path):
        cfg = tiny_config(tmp_path, out_dir=str(tmp_path / "ab"))
        result = cmd_ablate(cfg, seeds=[5])
        assert result.n_seeds == 1
        assert result.lstm_wins_pos in (0, 1)
        assert result.out_path.exists()
        payload = json.loads(result.out_path.read_text())
        assert payload["match"] == "steps"
        run = payload["runs"][0]
        assert run["seed"] == 5
        assert isinstance(run["improvement_pos_pct"], int)
        assert isinstance(run["improvement_ori_pct"], int)
        for head in ("lstm", "fc"):
            assert (tmp_path / "ab" / "seed5" / head / "final.clck").exists()
        assert payload["config_diff"]["head"] == ["lstm", "fc"]
        assert "head" not in payload["config_diff"]["shared"]
        assert "out_dir" not in payload["config_diff"]["shared"]

    def test_match_params_sizes_the_baseline(self, tmp_path):
        cfg = tiny_config(tmp_path, out_dir=str(tmp_path / "abp"))
        result = cmd_ablate(cfg, seeds=[2], match="params")
        m = matched_bottleneck(cfg.hidden_size)
        assert result.config_diff["fc_bottleneck"] == [0, m]
        fc_cfg = load_run_config(tmp_path / "abp" / "seed2" / "fc" / "config.json")
        assert fc_cfg.fc_bottleneck == m
        assert fc_cfg.head == "fc"

    def test_synth_seed_follows_run_seed(self, tmp_path):
        cfg = tiny_config(tmp_path, out_dir=str(tmp_path / "abs"))
        cmd_ablate(cfg, seeds=[9])
        lstm_cfg = load_run_config(tmp_path / "abs" / "seed9" / "lstm" / "config.json")
        assert lstm_cfg.synth.seed == 9
        assert lstm_cfg.seed == 9

    def test_heads_share_data(self, tmp_path):
        cfg = tiny_config(tmp_path, out_dir=str(tmp_path / "abd"))
        cmd_ablate(cfg, seeds=[4])
        lstm_cfg = load_run_config(tmp_path / "abd" / "seed4" / "lstm" / "config.json")
        fc_cfg = load_run_config(tmp_path / "abd" / "seed4" / "fc" / "config.json")
        assert lstm_cfg.synth == fc_cfg.synth

    def test_bad_match(self, tmp_path):
        with pytest.raises(UsageError, match="match"):
            cmd_ablate(tiny_config(tmp_path), seeds=[0], match="flops")

    def test_empty_seeds(self, tmp_path):
        with pytest.raises(UsageError, match="seed"):
            cmd_ablate(tiny_config(tmp_path), seeds=[])
