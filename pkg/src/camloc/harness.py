"""Run orchestration: configs, training loops, evaluation, ablation.

A run is fully described by a RunConfig; its SHA-256 hash is stamped
into every checkpoint and report the run produces, which is what makes
"same config, same seed, same bytes" checkable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import ModelParams, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Sample, load_feature_store, load_manifest, load_samples, synth_scene
from .errors import ConfigError, ParseError, UsageError
from .layers import (EMBED_DIM, GRID_COLS, GRID_ROWS, FcHeadParams, HeadParams,
                     forward_head, init_fc_head_params, init_head_params)
from .optim import AdamState, OptimConfig, shuffle_batches, train_step
from .pose import angular_error_deg, quat_normalize
from .reports import EvalReport, improvement_pct, write_eval_report

log = logging.getLogger("camloc")

# Published loss-weight operating points: indoor scenes 120-750, outdoor
# 250-2000, and the large indoor hall setting fixed at 1000.
BETA_PRESETS = {
    "indoor-low": 120.0,
    "indoor-high": 750.0,
    "outdoor-low": 250.0,
    "outdoor-high": 2000.0,
    "large-indoor": 1000.0,
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Synthetic scene parameters; the seed here fixes the data only,
    independent of the training seed."""

    seed: int = 0
    n_train: int = 200
    n_test: int = 50
    extent_m: float = 10.0
    noise_sigma: float = 0.01
    bandwidth: float = 1.25


@dataclass(frozen=True)
class ManifestSpec:
    """On-disk dataset: two manifests plus a feature store file."""

    train_manifest: str
    test_manifest: str
    feature_store: str


@dataclass(frozen=True)
class RunConfig:
    scene: str
    head: str
    hidden_size: int
    feature_size: int
    optim: OptimConfig
    steps: int
    eval_every: int = 0
    seed: int = 0
    out_dir: str = "runs/run"
    synth: SynthSpec | None = None
    data: ManifestSpec | None = None
    fc_bottleneck: int = 0

    def __post_init__(self):
        if self.head not in ("lstm", "fc"):
            raise ConfigError(f"RunConfig: head must be 'lstm' or 'fc', got {self.head!r}")
        if self.steps < 1:
            raise ConfigError(f"RunConfig: steps must be >= 1, got {self.steps}")
        if self.eval_every < 0:
            raise ConfigError(f"RunConfig: eval_every must be >= 0, got {self.eval_every}")
        if self.hidden_size < 1:
            raise ConfigError(f"RunConfig: hidden_size must be >= 1, got {self.hidden_size}")
        if self.feature_size < 1:
            raise ConfigError(f"RunConfig: feature_size must be >= 1, got {self.feature_size}")
        if (self.synth is None) == (self.data is None):
            raise ConfigError("RunConfig: exactly one of synth/data must be set")
        if self.fc_bottleneck < 0:
            raise ConfigError(f"RunConfig: fc_bottleneck must be >= 0, got {self.fc_bottleneck}")
        if self.fc_bottleneck and self.head != "fc":
            raise ConfigError("RunConfig: fc_bottleneck only applies to head='fc'")


def config_to_dict(config: RunConfig) -> dict:
    d = {
        "scene": config.scene,
        "head": config.head,
        "hidden_size": config.hidden_size,
        "feature_size": config.feature_size,
        "steps": config.steps,
        "eval_every": config.eval_every,
        "seed": config.seed,
        "out_dir": config.out_dir,
        "fc_bottleneck": config.fc_bottleneck,
        "optim": asdict(config.optim),
    }
    if config.synth is not None:
        d["synth"] = asdict(config.synth)
    if config.data is not None:
        d["data"] = asdict(config.data)
    return d


def _check_fields(section: str, given: dict, allowed) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown fields {sorted(unknown)}")


def config_from_dict(d: dict, require_lr: bool = False) -> RunConfig:
    """Build a RunConfig from plain nested dicts (parsed JSON).

    ``require_lr`` enforces the config-file rule that the learning rate
    is never taken from the library default silently.
    """
    if not isinstance(d, dict):
        raise ConfigError(f"config must be an object, got {type(d).__name__}")
    _check_fields("config", d, {f for f in RunConfig.__dataclass_fields__})
    optim_d = d.get("optim")
    if not isinstance(optim_d, dict):
        raise ConfigError("config: missing 'optim' section")
    _check_fields("optim", optim_d, {f for f in OptimConfig.__dataclass_fields__})
    if require_lr and "lr" not in optim_d:
        raise ConfigError("optim.lr must be set explicitly in config files "
                          "(no published value exists to default to)")
    if "beta_loss" not in optim_d:
        raise ConfigError("optim.beta_loss is required")
    try:
        optim = OptimConfig(**optim_d)
    except TypeError as exc:
        raise ConfigError(f"optim: {exc}") from None
    synth = data = None
    if "synth" in d:
        _check_fields("synth", d["synth"], {f for f in SynthSpec.__dataclass_fields__})
        synth = SynthSpec(**d["synth"])
    if "data" in d:
        _check_fields("data", d["data"], {f for f in ManifestSpec.__dataclass_fields__})
        try:
            data = ManifestSpec(**d["data"])
        except TypeError as exc:
            raise ConfigError(f"data: {exc}") from None
    plain = {k: v for k, v in d.items() if k not in ("optim", "synth", "data")}
    try:
        return RunConfig(optim=optim, synth=synth, data=data, **plain)
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from None


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        parsed = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=str(path), line=exc.lineno,
                         column=exc.colno) from None
    return config_from_dict(parsed, require_lr=True)


def save_run_config(config: RunConfig, path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(config), sort_keys=True, indent=2) + "\n",
        encoding="utf-8")


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical JSON form."""
    canonical = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Dataset and model construction
# ---------------------------------------------------------------------------

def load_dataset(config: RunConfig) -> tuple[list[Sample], list[Sample]]:
    """Materialize (train, test) samples with feature-vector payloads."""
    if config.synth is not None:
        s = config.synth
        scene = synth_scene(seed=s.seed, n_train=s.n_train, n_test=s.n_test,
                            extent_m=s.extent_m, F=config.feature_size,
                            noise_sigma=s.noise_sigma, bandwidth=s.bandwidth)
        return list(scene.train), list(scene.test)
    spec = config.data
    store = load_feature_store(spec.feature_store)
    if store.feature_size != config.feature_size:
        raise ConfigError(
            f"feature store holds {store.feature_size}-dim vectors but the "
            f"config says feature_size={config.feature_size}")
    train = load_samples(load_manifest(spec.train_manifest, split="train",
                                       check_files=False), store)
    test = load_samples(load_manifest(spec.test_manifest, split="test",
                                      check_files=False), store)
    return train, test


def init_model(config: RunConfig, rng: np.random.Generator):
    if config.head == "lstm":
        return init_head_params(rng, config.feature_size, hidden=config.hidden_size)
    return init_fc_head_params(rng, config.feature_size,
                               bottleneck=config.fc_bottleneck)


def model_from_checkpoint(params: ModelParams, meta: dict):
    kind = meta.get("head")
    if kind == "lstm":
        return HeadParams.from_model_params(params)
    if kind == "fc":
        return FcHeadParams.from_model_params(params)
    raise ConfigError(f"checkpoint meta has unknown head {kind!r}")


def matched_bottleneck(hidden_size: int) -> int:
    """Bottleneck width that makes the FC baseline's post-embedding
    parameter count track the recurrent head's (identical embeddings on
    both sides cancel out)."""
    h = hidden_size
    sweeps = 2 * 4 * (h * GRID_ROWS + h * h + h) + 2 * 4 * (h * GRID_COLS + h * h + h)
    heads = 7 * (4 * h) + 7
    per_unit = EMBED_DIM + 1 + 7
    return max(1, round((sweeps + heads - 7) / per_unit))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_poses(truths, p_hat: np.ndarray, q_hat: np.ndarray,
                   ids) -> list[tuple[str, float, float]]:
    """Per-sample (id, position error m, orientation error deg) rows.

    Predicted quaternions must already be unit length; truths are Poses.
    """
    p_hat = np.asarray(p_hat, dtype=np.float64)
    q_hat = np.asarray(q_hat, dtype=np.float64)
    if not (len(truths) == p_hat.shape[0] == q_hat.shape[0] == len(ids)):
        raise UsageError("evaluate_poses: length mismatch between truths and predictions")
    rows = []
    for i, (pose, sample_id) in enumerate(zip(truths, ids)):
        pos_err = float(np.linalg.norm(pose.p - p_hat[i]))
        ori_err = angular_error_deg(pose.q, q_hat[i])
        rows.append((str(sample_id), pos_err, ori_err))
    return rows


def evaluate_model(model, samples, scene: str, split: str,
                   run_hash: str) -> EvalReport:
    """Eval-mode batch forward, quaternion normalization, error rows."""
    if not samples:
        raise UsageError("evaluate_model: no samples")
    feats = np.stack([s.payload for s in samples])
    out = forward_head(model, Tensor(feats), mode="eval")
    q_hat = np.stack([quat_normalize(q) for q in out.q_raw.data])
    rows = evaluate_poses([s.pose for s in samples], out.p_hat.data, q_hat,
                          [s.id for s in samples])
    return EvalReport.create(scene=scene, split=split, config_hash=run_hash, rows=rows)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainResult:
    config: RunConfig
    run_hash: str
    objectives: tuple[float, ...]
    final_path: Path
    best_path: Path
    log_path: Path
    report_path: Path
    report: EvalReport
    best_step: int


def cmd_train(config: RunConfig) -> TrainResult:
    """Train per the config; write checkpoints, a step log, and the test
    split's eval report under config.out_dir.

    Deterministic per (config, seed): initialization, batch order, and
    dropout all derive from config.seed via independent seed streams.
    The best checkpoint is the periodic-eval winner by median position
    error when eval_every > 0, otherwise the final parameters.
    """
    run_hash = config_hash(config)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = load_dataset(config)
    if not test:
        raise ConfigError("cmd_train: test split is empty")
    f_data = train[0].payload.shape[0]
    if f_data != config.feature_size:
        raise ConfigError(f"cmd_train: data has {f_data}-dim features, "
                          f"config says {config.feature_size}")

    init_ss, shuffle_ss, drop_ss = np.random.SeedSequence(config.seed).spawn(3)
    model = init_model(config, np.random.default_rng(init_ss))
    state = AdamState.fresh(model.as_model_params())
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)

    pairs = [(s.payload, s.pose) for s in train]
    objectives: list[float] = []
    log_lines = ["step,objective,lr"]
    best = (math.inf, -1)
    best_model = None
    step = 0
    log.info("training %s head on %s: %d samples, %d steps",
             config.head, config.scene, len(pairs), config.steps)
    while step < config.steps:
        for idx in shuffle_batches(len(pairs), config.optim.batch_size, shuffle_rng):
            batch = [pairs[i] for i in idx]
            objective, model, state = train_step(batch, model, state, config.optim,
                                                 rng=drop_rng)
            step += 1
            objectives.append(objective)
            log_lines.append(f"{step},{objective!r},{config.optim.lr!r}")
            if step % 500 == 0 or step == config.steps:
                log.info("step %d/%d objective %.4f", step, config.steps, objective)
            if config.eval_every and step % config.eval_every == 0:
                interim = evaluate_model(model, test, config.scene, "test", run_hash)
                log.info("eval at step %d: med_pos %.3f m, med_ori %.2f deg",
                         step, interim.med_pos_m, interim.med_ori_deg)
                if interim.med_pos_m < best[0]:
                    best = (interim.med_pos_m, step)
                    best_model = model
            if step >= config.steps:
                break

    meta = {"head": config.head, "hidden_size": config.hidden_size,
            "feature_size": config.feature_size, "config_hash": run_hash,
            "scene": config.scene, "step": step}
    final_path = out_dir / "final.clck"
    save_checkpoint(final_path, model.as_model_params(), meta)
    if best_model is None:
        best_model, best = model, (math.inf, step)
    best_path = out_dir / "best.clck"
    save_checkpoint(best_path, best_model.as_model_params(),
                    {**meta, "step": best[1]})
    log_path = out_dir / "train_log.csv"
    log_path.write_text("\n".join(log_lines) + "\n", encoding="utf-8")

    report = evaluate_model(model, test, config.scene, "test", run_hash)
    report_path = out_dir / "eval_test.json"
    write_eval_report(report, report_path)
    save_run_config(config, out_dir / "config.json")
    log.info("final: med_pos %.3f m, med_ori %.2f deg (report %s)",
             report.med_pos_m, report.med_ori_deg, report_path)
    return TrainResult(config=config, run_hash=run_hash,
                       objectives=tuple(objectives), final_path=final_path,
                       best_path=best_path, log_path=log_path,
                       report_path=report_path, report=report, best_step=best[1])


def cmd_eval(checkpoint_path, config: RunConfig, split: str = "test") -> EvalReport:
    """Evaluate a checkpoint on one split of the config's dataset.

    The report carries the config hash stamped into the checkpoint by
    the run that produced it.
    """
    if split not in ("train", "test"):
        raise UsageError(f"cmd_eval: split must be train or test, got {split!r}")
    params, meta = load_checkpoint(checkpoint_path)
    model = model_from_checkpoint(params, meta)
    if meta.get("feature_size") != config.feature_size:
        raise ConfigError(
            f"checkpoint was trained on {meta.get('feature_size')}-dim features, "
            f"config says {config.feature_size}")
    train, test = load_dataset(config)
    samples = train if split == "train" else test
    run_hash = meta.get("config_hash", config_hash(config))
    return evaluate_model(model, samples, config.scene, split, run_hash)


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationResult:
    runs: tuple[dict, ...]
    lstm_wins_pos: int
    n_seeds: int
    match: str
    config_diff: dict
    out_path: Path


def _seeded(config: RunConfig, seed: int, head: str, out_dir: Path,
            bottleneck: int) -> RunConfig:
    synth = config.synth
    if synth is not None:
        synth = replace(synth, seed=seed)
    return replace(config, head=head, seed=seed, synth=synth,
                   out_dir=str(out_dir), fc_bottleneck=bottleneck)


def cmd_ablate(config: RunConfig, seeds=None, match: str = "steps") -> AblationResult:
    """Train the recurrent head and the FC baseline under identical data,
    seeds, and step budgets; report per-seed medians and improvements.

    ``match='steps'`` runs the plain baseline (same steps, same lr);
    ``match='params'`` additionally sizes the baseline's bottleneck so
    parameter counts agree. Synthetic datasets are re-drawn per seed so
    multi-seed runs sample scene variability too.
    """
    if match not in ("steps", "params"):
        raise UsageError(f"cmd_ablate: match must be 'steps' or 'params', got {match!r}")
    if seeds is None:
        seeds = [config.seed]
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise UsageError("cmd_ablate: need at least one seed")
    bottleneck = matched_bottleneck(config.hidden_size) if match == "params" else 0
    out_root = Path(config.out_dir)
    runs = []
    wins = 0
    for seed in seeds:
        pair = {}
        for head in ("lstm", "fc"):
            run_dir = out_root / f"seed{seed}" / head
            run_cfg = _seeded(config, seed, head, run_dir,
                              bottleneck if head == "fc" else 0)
            result = cmd_train(run_cfg)
            pair[head] = result
        lstm_rep, fc_rep = pair["lstm"].report, pair["fc"].report
        if lstm_rep.med_pos_m <= fc_rep.med_pos_m:
            wins += 1
        runs.append({
            "seed": seed,
            "lstm": {"med_pos_m": lstm_rep.med_pos_m, "med_ori_deg": lstm_rep.med_ori_deg,
                     "config_hash": pair["lstm"].run_hash},
            "fc": {"med_pos_m": fc_rep.med_pos_m, "med_ori_deg": fc_rep.med_ori_deg,
                   "config_hash": pair["fc"].run_hash},
            "improvement_pos_pct": improvement_pct(fc_rep.med_pos_m, lstm_rep.med_pos_m)
                                   if fc_rep.med_pos_m > 0 else 0,
            "improvement_ori_pct": improvement_pct(fc_rep.med_ori_deg, lstm_rep.med_ori_deg)
                                   if fc_rep.med_ori_deg > 0 else 0,
        })
        log.info("seed %d: lstm %.3f m vs fc %.3f m", seed,
                 lstm_rep.med_pos_m, fc_rep.med_pos_m)

    base = config_to_dict(replace(config, head="lstm", fc_bottleneck=0))
    for key in ("head", "fc_bottleneck", "out_dir", "seed"):
        base.pop(key, None)
    config_diff = {"head": ["lstm", "fc"],
                   "fc_bottleneck": [0, bottleneck],
                   "shared": base}
    payload = {"match": match, "n_seeds": len(seeds), "lstm_wins_pos": wins,
               "config_diff": config_diff, "runs": runs}
    out_root.mkdir(parents=True, exist_ok=True)
    out_path = out_root / "ablation.json"
    out_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                        encoding="utf-8")
    return AblationResult(runs=tuple(runs), lstm_wins_pos=wins, n_seeds=len(seeds),
                          match=match, config_diff=config_diff, out_path=out_path)
