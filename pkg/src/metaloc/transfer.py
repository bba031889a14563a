"""Target-environment training: fine-tune, freeze, or from-scratch baselines.

The trunk is initialized from a jointly trained model (or freshly for the
scratch baseline); the head is freshly seeded in every mode. Freezing fixes
every trunk tensor and its batchnorm running statistics for the whole run.
`run_curve` sweeps source-environment counts and nested target-sample
subsets into one tidy report.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ContractError
from .fingerprint import Dataset
from .model import ArchConfig, ModelParams, clone_trunk, init_model
from .training import TrainConfig, TrainHistory, evaluate, meta_train, run_training_loop

TRANSFER_MODES = ("finetune", "freeze", "scratch")
SCRATCH_N_SOURCES = 0  # n_sources written on scratch rows


@dataclass(frozen=True)
class CurveSpec:
    """Sweep grid for the transfer-learning report."""

    target_sample_counts: tuple = (50, 100, 200, 500, 1000)
    n_sources: tuple = (1, 2, 3, 4)
    seeds: tuple = (0, 1, 2)
    modes: tuple = ("finetune", "freeze")
    constrained: bool = False

    def __post_init__(self):
        if any(n < 1 for n in self.n_sources):
            raise ConfigError("n_sources entries must be >= 1")
        if any(k < 1 for k in self.target_sample_counts):
            raise ConfigError("target sample counts must be >= 1")
        bad = set(self.modes) - {"finetune", "freeze"}
        if bad:
            raise ConfigError(f"unknown transfer modes {sorted(bad)}; scratch runs implicitly")


@dataclass
class EvalReport:
    rows: list

    CSV_HEADER = "n_sources,target_samples,mode,seed,me_m,constrained,wall_seconds"

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.CSV_HEADER + "\n")
            for r in self.rows:
                f.write(
                    f"{r['n_sources']},{r['target_samples']},{r['mode']},{r['seed']},"
                    f"{r['me_m']!r},{int(r['constrained'])},{r['wall_seconds']!r}\n"
                )

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        rows = []
        with open(path) as f:
            header = f.readline().strip()
            if header != cls.CSV_HEADER:
                raise ConfigError(f"{path}: unexpected report header {header!r}")
            for line in f:
                n, k, mode, seed, me, cons, wall = line.strip().split(",")
                rows.append(
                    {
                        "n_sources": int(n),
                        "target_samples": int(k),
                        "mode": mode,
                        "seed": int(seed),
                        "me_m": float(me),
                        "constrained": bool(int(cons)),
                        "wall_seconds": float(wall),
                    }
                )
        return cls(rows)


def percent_increase(frozen_me: float, finetuned_me: float) -> float:
    """Percent ME increase of freezing relative to fine-tuning (one-sided)."""
    if finetuned_me <= 0:
        raise ContractError(f"fine-tuned ME must be positive, got {finetuned_me}")
    return 100.0 * (frozen_me - finetuned_me) / finetuned_me


def transfer_train(
    theta_init: ModelParams | None,
    target: Dataset,
    mode: str,
    arch: ArchConfig,
    cfg: TrainConfig,
):
    """Train on the target environment under the given transfer mode.

    Returns (ModelParams, TrainHistory). The head is freshly seeded from
    cfg.rng_seed in every mode; scratch ignores theta_init entirely.
    """
    if mode not in TRANSFER_MODES:
        raise ConfigError(f"mode must be one of {TRANSFER_MODES}, got {mode!r}")
    if mode in ("finetune", "freeze") and theta_init is None:
        raise ConfigError(f"{mode} mode needs trunk parameters to start from")

    model = init_model(arch, target.fingerprint_shape, [target.env_id], rng_seed=cfg.rng_seed)
    if mode != "scratch":
        if theta_init.arch != arch or tuple(theta_init.input_shape) != tuple(target.fingerprint_shape):
            raise ConfigError("trunk initializer does not match the requested architecture")
        model.trunk, model.trunk_bn = clone_trunk(theta_init)

    if mode == "freeze":
        for t in model.trunk.values():
            t.requires_grad = False
        trainable = model.named_parameters(include_trunk=False)
        trunk_mode = "eval"
    else:
        trainable = model.named_parameters()
        trunk_mode = "train"

    hist = run_training_loop(
        model,
        {target.env_id: target},
        cfg,
        epochs=cfg.effective_transfer_epochs,
        trainable=trainable,
        trunk_mode=trunk_mode,
    )
    return model, hist


def _constrained_pool_size(sources, n: int) -> int:
    base = min(len(ds.train_indices) for ds in sources)
    per_env = base // n
    if per_env < 1:
        raise ConfigError(f"constrained budget {base} cannot cover {n} environments")
    return per_env


def run_curve(
    sources,
    target: Dataset,
    spec: CurveSpec,
    arch: ArchConfig,
    cfg: TrainConfig,
    jobs: int = 1,
    log=None,
) -> EvalReport:
    """Full transfer sweep: meta-train per (N, seed), then each (k, mode) cell.

    Scratch baselines are run once per (seed, k) and recorded with
    n_sources=0. The target test split is fixed across every cell.
    """
    if not sources:
        raise ConfigError("need at least one source environment")
    if max(spec.n_sources) > len(sources):
        raise ConfigError(f"spec asks for {max(spec.n_sources)} sources, only {len(sources)} given")
    pool = len(target.train_indices)
    too_big = [k for k in spec.target_sample_counts if k > pool]
    if too_big:
        raise ConfigError(f"target sample counts {too_big} exceed the training pool ({pool})")

    units = [(seed, n) for seed in spec.seeds for n in spec.n_sources]
    if jobs > 1:
        from multiprocessing import get_context

        with get_context("fork").Pool(jobs) as p:
            chunks = p.starmap(
                _curve_unit,
                [(sources, target, spec, arch, cfg, seed, n) for seed, n in units],
            )
    else:
        chunks = []
        for seed, n in units:
            if log:
                log(f"meta-train: seed={seed} n_sources={n}")
            chunks.append(_curve_unit(sources, target, spec, arch, cfg, seed, n))

    rows = [r for chunk in chunks for r in chunk]
    for seed in spec.seeds:
        if log:
            log(f"scratch baselines: seed={seed}")
        rows.extend(_scratch_unit(target, spec, arch, cfg, seed))
    rows.sort(key=lambda r: (r["n_sources"], r["target_samples"], r["mode"], r["seed"]))
    return EvalReport(rows)


def _curve_unit(sources, target, spec, arch, cfg, seed, n):
    """All (k, mode) cells for one (seed, n_sources) meta-trained trunk."""
    train_sets = list(sources[:n])
    if spec.constrained:
        per_env = _constrained_pool_size(sources, n)
        train_sets = [ds.limit_train_pool(per_env) for ds in train_sets]
    cfg_n = replace(cfg, rng_seed=seed, constrained=spec.constrained)
    t0 = time.perf_counter()
    theta, _ = meta_train({ds.env_id: ds for ds in train_sets}, arch, cfg_n)
    meta_seconds = time.perf_counter() - t0

    rows = []
    for k in spec.target_sample_counts:
        tgt = target.limit_train_pool(k)
        for mode in spec.modes:
            t1 = time.perf_counter()
            model, _ = transfer_train(theta, tgt, mode, arch, cfg_n)
            me = evaluate(model, target.env_id, target, cfg_n)
            rows.append(
                {
                    "n_sources": n,
                    "target_samples": k,
                    "mode": mode,
                    "seed": seed,
                    "me_m": me,
                    "constrained": spec.constrained,
                    "wall_seconds": time.perf_counter() - t1 + meta_seconds,
                }
            )
    return rows


def _scratch_unit(target, spec, arch, cfg, seed):
    rows = []
    for k in spec.target_sample_counts:
        tgt = target.limit_train_pool(k)
        cfg_s = replace(cfg, rng_seed=seed, constrained=spec.constrained)
        t0 = time.perf_counter()
        model, _ = transfer_train(None, tgt, "scratch", arch, cfg_s)
        me = evaluate(model, target.env_id, target, cfg_s)
        rows.append(
            {
                "n_sources": SCRATCH_N_SOURCES,
                "target_samples": k,
                "mode": "scratch",
                "seed": seed,
                "me_m": me,
                "constrained": spec.constrained,
                "wall_seconds": time.perf_counter() - t0,
            }
        )
    return rows


def seed_mean(report: EvalReport, n_sources: int, target_samples: int, mode: str) -> float:
    """Mean ME over seeds for one report cell."""
    vals = [
        r["me_m"]
        for r in report.rows
        if r["n_sources"] == n_sources
        and r["target_samples"] == target_samples
        and r["mode"] == mode
    ]
    if not vals:
        raise KeyError(f"no rows for N={n_sources}, k={target_samples}, mode={mode}")
    return float(np.mean(vals))
