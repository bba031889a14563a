"""Summary tables and figures from persisted run artifacts.

Everything here is regenerable from the CSVs alone: the report stage first
writes tidy per-figure CSVs (seed means), then renders each figure from the
tidy file it just wrote, so plotted points and published numbers cannot
drift apart.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError
from .experiment import ExperimentConfig, RunPaths
from .transfer import EvalReport, percent_increase


def _final_me_from_history(path: Path, env_id: str) -> float:
    rows = []
    with open(path) as f:
        header = f.readline().strip().split(",")
        if header != ["epoch", "env_id", "train_loss", "test_me_m", "seconds"]:
            raise ConfigError(f"{path}: unexpected history header {header}")
        for line in f:
            epoch, env, loss, me, secs = line.strip().split(",")
            if env == env_id:
                rows.append((int(epoch), float(me)))
    if not rows:
        raise ConfigError(f"{path}: no rows for environment {env_id!r}")
    return max(rows)[1]


def build_summary_table(cfg: ExperimentConfig, paths: RunPaths) -> list:
    """Separate vs joint final test ME per source environment (seed means)."""
    n = len(cfg.sources)
    rows = []
    for spec in cfg.sources:
        sep, joint = [], []
        for seed in cfg.curve.seeds:
            sep_path = paths.separate_history(spec.env_id, seed)
            joint_path = paths.joint_history(n, seed)
            if not sep_path.exists() or not joint_path.exists():
                raise ConfigError(
                    f"missing history for {spec.env_id} seed {seed}; run train and meta-train first"
                )
            sep.append(_final_me_from_history(sep_path, spec.env_id))
            joint.append(_final_me_from_history(joint_path, spec.env_id))
        rows.append(
            {
                "env_id": spec.env_id,
                "separate_me_m": float(np.mean(sep)),
                "joint_me_m": float(np.mean(joint)),
            }
        )
    return rows


def write_summary_table(rows, path: Path) -> None:
    with open(path, "w") as f:
        f.write("env_id,separate_me_m,joint_me_m\n")
        for r in rows:
            f.write(f"{r['env_id']},{r['separate_me_m']!r},{r['joint_me_m']!r}\n")


def _seed_mean_grid(report: EvalReport, mode: str) -> dict:
    """(n_sources, target_samples) -> seed-mean ME for one mode."""
    cells = {}
    for r in report.rows:
        if r["mode"] != mode:
            continue
        cells.setdefault((r["n_sources"], r["target_samples"]), []).append(r["me_m"])
    return {key: float(np.mean(v)) for key, v in cells.items()}


def write_curve_csv(report: EvalReport, mode: str, path: Path) -> None:
    grid = _seed_mean_grid(report, mode)
    if not grid:
        raise ConfigError(f"no rows for mode {mode!r} in the curve report")
    with open(path, "w") as f:
        f.write("n_sources,target_samples,me_m\n")
        for (n, k) in sorted(grid):
            f.write(f"{n},{k},{grid[(n, k)]!r}\n")


def read_curve_csv(path: Path) -> list:
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "n_sources,target_samples,me_m":
            raise ConfigError(f"{path}: unexpected tidy header {header!r}")
        for line in f:
            n, k, me = line.strip().split(",")
            rows.append({"n_sources": int(n), "target_samples": int(k), "me_m": float(me)})
    return rows


def plot_curve_from_csv(tidy_path: Path, out_path: Path, title: str) -> None:
    """ME vs target samples, one line per source count; reads the tidy CSV."""
    rows = read_curve_csv(tidy_path)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for n in sorted({r["n_sources"] for r in rows}):
        pts = sorted((r["target_samples"], r["me_m"]) for r in rows if r["n_sources"] == n)
        label = "scratch" if n == 0 else f"N={n}"
        style = "--" if n == 0 else "-"
        ax.plot([p[0] for p in pts], [p[1] for p in pts], style, marker="o", label=label)
    ax.set_xscale("log")
    ax.set_xlabel("target training samples")
    ax.set_ylabel("mean error (m)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def write_percent_increase_csv(report: EvalReport, path: Path) -> None:
    frozen = _seed_mean_grid(report, "freeze")
    tuned = _seed_mean_grid(report, "finetune")
    keys = sorted(set(frozen) & set(tuned))
    if not keys:
        raise ConfigError("percent increase needs both freeze and finetune rows")
    with open(path, "w") as f:
        f.write("n_sources,target_samples,percent_increase\n")
        for n, k in keys:
            f.write(f"{n},{k},{percent_increase(frozen[(n, k)], tuned[(n, k)])!r}\n")


def read_percent_increase_csv(path: Path) -> list:
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "n_sources,target_samples,percent_increase":
            raise ConfigError(f"{path}: unexpected tidy header {header!r}")
        for line in f:
            n, k, v = line.strip().split(",")
            rows.append({"n_sources": int(n), "target_samples": int(k), "percent_increase": float(v)})
    return rows


def plot_percent_increase_from_csv(tidy_path: Path, out_path: Path) -> None:
    rows = read_percent_increase_csv(tidy_path)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for k in sorted({r["target_samples"] for r in rows}):
        pts = sorted((r["n_sources"], r["percent_increase"]) for r in rows if r["target_samples"] == k)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"k={k}")
    ax.set_xlabel("source environments")
    ax.set_ylabel("ME increase when frozen (%)")
    ax.set_title("Cost of freezing the shared trunk")
    ax.set_xticks(sorted({r["n_sources"] for r in rows}))
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def stage_report(cfg: ExperimentConfig, paths: RunPaths, log=print) -> list:
    """Emit the summary table, learning-curve figures, and tidy CSVs."""
    out = paths.report_dir()
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []

    table = build_summary_table(cfg, paths)
    table_path = out / "summary_table.csv"
    write_summary_table(table, table_path)
    artifacts.append(table_path)
    log(f"report: wrote {table_path}")

    curve_csv = paths.curve_report()
    if not curve_csv.exists():
        raise ConfigError(f"missing {curve_csv}; run curve first")
    report = EvalReport.from_csv(curve_csv)
    if not report.rows:
        raise ConfigError(f"{curve_csv}: no data")

    scratch_rows = [r for r in report.rows if r["mode"] == "scratch"]
    for mode, title in (("finetune", "Transfer with fine-tuned trunk"), ("freeze", "Transfer with frozen trunk")):
        if not any(r["mode"] == mode for r in report.rows):
            continue
        tidy = out / f"curve_{mode}.csv"
        write_curve_csv(report, mode, tidy)
        # scratch line rides along on the fine-tune figure (n_sources = 0)
        if mode == "finetune" and scratch_rows:
            grid = _seed_mean_grid(report, "scratch")
            with open(tidy, "a") as f:
                for (n, k) in sorted(grid):
                    f.write(f"{n},{k},{grid[(n, k)]!r}\n")
        fig_path = out / f"curve_{mode}.svg"
        plot_curve_from_csv(tidy, fig_path, title)
        artifacts += [tidy, fig_path]
        log(f"report: wrote {fig_path}")

    has_both = {r["mode"] for r in report.rows} >= {"finetune", "freeze"}
    if has_both:
        tidy = out / "percent_increase.csv"
        write_percent_increase_csv(report, tidy)
        fig_path = out / "percent_increase.svg"
        plot_percent_increase_from_csv(tidy, fig_path)
        artifacts += [tidy, fig_path]
        log(f"report: wrote {fig_path}")
    return artifacts
