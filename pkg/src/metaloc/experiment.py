"""Config-driven experiment orchestration.

One JSON document describes an experiment: radio, shared geometry, the
environment roster, architecture, training settings, and the transfer sweep.
Every stage writes its artifacts under the output directory and records them
in a manifest keyed by the sha256 of the raw config bytes, so a finished
directory is reproducible from its config alone.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from .channel import Geometry, RadioConfig, Rect, build_environment
from .errors import ConfigError
from .fingerprint import Dataset, build_dataset, load_dataset, save_dataset
from .model import ArchConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, meta_train, train_separate
from .transfer import CurveSpec, EvalReport, run_curve, transfer_train

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    seed: int
    num_scatterers: int
    role: str  # "source" | "target"

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ConfigError(f"environment role must be source|target, got {self.role!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out_dir: str
    samples_per_env: int
    radio: RadioConfig
    geometry: Geometry
    environments: tuple
    arch: ArchConfig
    train: TrainConfig
    curve: CurveSpec
    transfer_cell: dict = field(default_factory=dict)

    @property
    def sources(self):
        return [e for e in self.environments if e.role == "source"]

    @property
    def target(self) -> EnvSpec:
        targets = [e for e in self.environments if e.role == "target"]
        if len(targets) != 1:
            raise ConfigError(f"expected exactly one target environment, found {len(targets)}")
        return targets[0]


def default_experiment_config() -> dict:
    """Desk-scale profile: 4 source environments plus one target.

    The radio is reduced relative to the full 8x4-antenna, 52-pilot setup so
    the whole sweep stays CPU-friendly; structural tests use the full radio.
    """
    return {
        "seed": 7,
        "out_dir": "runs/desk",
        "samples_per_env": 2000,
        "radio": {
            "carrier_freq_hz": 3.5e9,
            "bandwidth_hz": 100e6,
            "total_subcarriers": 1024,
            "comb_factor": 10,
            "num_pilot_subcarriers": 16,
            "n_rx": 4,
            "n_tx": 2,
            "tx_power_dbm_per_antenna": 23.0,
            "noise_floor_dbm_hz": -174.0,
            "noise_figure_db": 2.0,
            "element_spacing": 0.5,
        },
        "geometry": {
            "area": {"x_min": -50.0, "y_min": -10.0, "width": 100.0, "height": 20.0},
            "bs_relative": [0.1, 0.5],
            "bs_array_orientation": 0.0,
        },
        "environments": [
            {"env_id": "env1", "seed": 101, "num_scatterers": 24, "role": "source"},
            {"env_id": "env2", "seed": 102, "num_scatterers": 24, "role": "source"},
            {"env_id": "env3", "seed": 103, "num_scatterers": 24, "role": "source"},
            {"env_id": "env4", "seed": 104, "num_scatterers": 24, "role": "source"},
            {"env_id": "env5", "seed": 105, "num_scatterers": 24, "role": "target"},
        ],
        "arch": {
            "num_residual_blocks": 2,
            "filters": 32,
            "kernel": [4, 4],
            "block_stride": [1, 4],
            "fc_width": 128,
            "trunk_fc_layers": 1,
            "head_fc_layers": 2,
            "output_dim": 2,
        },
        "train": {
            "batch_size": 64,
            "epochs": 50,
            "optimizer": "adam",
            "learning_rate": 1e-3,
            "transfer_epochs": 200,
            "samples_per_env": 2000,
        },
        "curve": {
            "target_sample_counts": [50, 100, 200, 500, 1000],
            "n_sources": [1, 2, 3, 4],
            "seeds": [0, 1, 2],
            "modes": ["finetune", "freeze"],
            "constrained": False,
        },
    }


def parse_experiment_config(doc: dict) -> ExperimentConfig:
    try:
        g = doc["geometry"]
        geometry = Geometry(
            area=Rect(**g["area"]),
            bs_relative=tuple(g["bs_relative"]),
            bs_array_orientation=g.get("bs_array_orientation", 0.0),
        )
        envs = tuple(EnvSpec(**e) for e in doc["environments"])
        if len({e.env_id for e in envs}) != len(envs):
            raise ConfigError("environment ids must be distinct")
        train = dict(doc["train"])
        train.setdefault("samples_per_env", doc["samples_per_env"])
        arch = dict(doc["arch"])
        arch["kernel"] = tuple(arch.get("kernel", (4, 4)))
        arch["block_stride"] = tuple(arch.get("block_stride", (1, 4)))
        curve = dict(doc["curve"])
        for k in ("target_sample_counts", "n_sources", "seeds", "modes"):
            if k in curve:
                curve[k] = tuple(curve[k])
        return ExperimentConfig(
            seed=int(doc["seed"]),
            out_dir=str(doc["out_dir"]),
            samples_per_env=int(doc["samples_per_env"]),
            radio=RadioConfig(**doc["radio"]),
            geometry=geometry,
            environments=envs,
            arch=ArchConfig(**arch),
            train=TrainConfig(**train),
            curve=CurveSpec(**curve),
            transfer_cell=dict(doc.get("transfer", {})),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed experiment config: {exc}") from exc


def load_experiment_config(path) -> tuple:
    """Returns (ExperimentConfig, raw bytes). The raw bytes feed the manifest hash."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    raw = path.read_bytes()
    try:
        doc = json.loads(raw.decode())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_experiment_config(doc), raw


def config_hash(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def derive_seed(base: int, index: int) -> int:
    return (int(base) * 1_000_003 + index) & 0x7FFFFFFFFFFFFFFF


class RunPaths:
    """Canonical artifact layout under one output directory."""

    def __init__(self, out_dir):
        self.root = Path(out_dir)

    def dataset_dir(self, env_id):
        return self.root / "datasets" / env_id

    def environment_json(self, env_id):
        return self.root / "environments" / f"{env_id}.json"

    def joint_checkpoint(self, n, seed):
        return self.root / "checkpoints" / f"joint_n{n}_seed{seed}.ckpt"

    def separate_checkpoint(self, env_id, seed):
        return self.root / "checkpoints" / f"separate_{env_id}_seed{seed}.ckpt"

    def joint_history(self, n, seed):
        return self.root / "histories" / f"joint_n{n}_seed{seed}.csv"

    def separate_history(self, env_id, seed):
        return self.root / "histories" / f"separate_{env_id}_seed{seed}.csv"

    def transfer_checkpoint(self, mode, n, k, seed):
        return self.root / "checkpoints" / f"transfer_{mode}_n{n}_k{k}_seed{seed}.ckpt"

    def transfer_report(self, mode, n, k, seed):
        return self.root / "reports" / f"transfer_{mode}_n{n}_k{k}_seed{seed}.csv"

    def curve_report(self):
        return self.root / "reports" / "curve.csv"

    def report_dir(self):
        return self.root / "report"

    def manifest(self):
        return self.root / MANIFEST_NAME


def update_manifest(paths: RunPaths, raw_config: bytes, stage: str, artifacts, overrides=None) -> None:
    mpath = paths.manifest()
    doc = {}
    if mpath.exists():
        doc = json.loads(mpath.read_text())
    doc["config_hash"] = config_hash(raw_config)
    doc["tool_version"] = __version__
    if overrides:
        doc["overrides"] = overrides
    stages = doc.setdefault("stages", {})
    stages[stage] = {
        "artifacts": sorted(str(Path(a).relative_to(paths.root)) for a in artifacts),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    mpath.parent.mkdir(parents=True, exist_ok=True)
    mpath.write_text(json.dumps(doc, indent=2, sort_keys=True))


def stage_gen_data(cfg: ExperimentConfig, paths: RunPaths, log=print) -> list:
    """One dataset directory per environment, deterministic from the global seed."""
    artifacts = []
    for i, spec in enumerate(cfg.environments):
        env = build_environment(spec.env_id, spec.seed, cfg.geometry, spec.num_scatterers)
        log(f"gen-data: {spec.env_id} ({spec.role}, {cfg.samples_per_env} samples)")
        ds = build_dataset(
            env,
            cfg.radio,
            count=cfg.samples_per_env,
            rng_seed=derive_seed(cfg.seed, i),
            role=spec.role,
        )
        ddir = paths.dataset_dir(spec.env_id)
        save_dataset(ds, ddir)
        ejson = paths.environment_json(spec.env_id)
        ejson.parent.mkdir(parents=True, exist_ok=True)
        ejson.write_text(ds.env_json)
        artifacts += [ddir / "manifest.json", ejson]
    return artifacts


def load_run_datasets(cfg: ExperimentConfig, paths: RunPaths):
    """(source datasets in roster order, target dataset); diagnostics if missing."""
    missing = [
        spec.env_id for spec in cfg.environments if not (paths.dataset_dir(spec.env_id) / "manifest.json").exists()
    ]
    if missing:
        raise ConfigError(f"datasets missing for {missing}; run gen-data first")
    sources = [load_dataset(paths.dataset_dir(s.env_id)) for s in cfg.sources]
    target = load_dataset(paths.dataset_dir(cfg.target.env_id))
    return sources, target


def stage_meta_train(cfg: ExperimentConfig, paths: RunPaths, log=print) -> list:
    """Joint training over all source environments, once per report seed."""
    sources, _ = load_run_datasets(cfg, paths)
    n = len(sources)
    artifacts = []
    for seed in cfg.curve.seeds:
        log(f"meta-train: N={n} seed={seed}")
        model, hist = meta_train(
            {ds.env_id: ds for ds in sources}, cfg.arch, replace(cfg.train, rng_seed=seed)
        )
        ckpt = paths.joint_checkpoint(n, seed)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, ckpt)
        hcsv = paths.joint_history(n, seed)
        hcsv.parent.mkdir(parents=True, exist_ok=True)
        hist.to_csv(hcsv)
        artifacts += [ckpt, hcsv]
    return artifacts


def stage_train_separate(cfg: ExperimentConfig, paths: RunPaths, log=print) -> list:
    """Per-environment baseline training, once per report seed."""
    sources, _ = load_run_datasets(cfg, paths)
    artifacts = []
    for seed in cfg.curve.seeds:
        for ds in sources:
            log(f"train: {ds.env_id} seed={seed}")
            model, hist = train_separate(ds, cfg.arch, replace(cfg.train, rng_seed=seed))
            ckpt = paths.separate_checkpoint(ds.env_id, seed)
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, ckpt)
            hcsv = paths.separate_history(ds.env_id, seed)
            hcsv.parent.mkdir(parents=True, exist_ok=True)
            hist.to_csv(hcsv)
            artifacts += [ckpt, hcsv]
    return artifacts


def stage_transfer(cfg: ExperimentConfig, paths: RunPaths, log=print) -> list:
    """A single transfer cell described by the config's optional `transfer` block."""
    sources, target = load_run_datasets(cfg, paths)
    cell = cfg.transfer_cell
    mode = cell.get("mode", "finetune")
    n = int(cell.get("n_sources", len(sources)))
    k = int(cell.get("target_samples", max(cfg.curve.target_sample_counts)))
    seed = int(cell.get("seed", cfg.curve.seeds[0]))

    theta = None
    if mode != "scratch":
        ckpt = paths.joint_checkpoint(n, seed)
        if not ckpt.exists():
            raise ConfigError(f"missing checkpoint {ckpt}; run meta-train first")
        theta, _ = load_checkpoint(ckpt, expect_arch=cfg.arch)
    log(f"transfer: mode={mode} N={n} k={k} seed={seed}")
    tcfg = replace(cfg.train, rng_seed=seed)
    model, hist = transfer_train(theta, target.limit_train_pool(k), mode, cfg.arch, tcfg)
    me = evaluate(model, target.env_id, target, tcfg)

    out_ckpt = paths.transfer_checkpoint(mode, n, k, seed)
    out_ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_ckpt)
    report = EvalReport(
        [
            {
                "n_sources": n if mode != "scratch" else 0,
                "target_samples": k,
                "mode": mode,
                "seed": seed,
                "me_m": me,
                "constrained": cfg.curve.constrained,
                "wall_seconds": sum(r["seconds"] for r in hist.records),
            }
        ]
    )
    out_csv = paths.transfer_report(mode, n, k, seed)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_csv)
    return [out_ckpt, out_csv]


def stage_curve(cfg: ExperimentConfig, paths: RunPaths, jobs: int = 1, log=print) -> list:
    sources, target = load_run_datasets(cfg, paths)
    report = run_curve(sources, target, cfg.curve, cfg.arch, cfg.train, jobs=jobs, log=log)
    out = paths.curve_report()
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    return [out]
