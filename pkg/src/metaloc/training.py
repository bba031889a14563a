"""Joint multi-environment training and the per-environment baseline.

One joint step draws a batch from every environment (ascending env id),
runs each through the shared trunk and that environment's head, and
backpropagates each environment's MSE loss separately: a head only ever
accumulates gradient from its own environment, while the trunk gradient is
the sum of the per-environment contributions. A single optimizer step then
updates the trunk and every head, which is exactly the summed-loss
objective. Separate training is the N=1 degenerate case and shares the
same loop, so both produce bit-identical update sequences for one
environment under one seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import OptimizerState, Tensor, backward, mse_loss, optimizer_step
from .errors import ConfigError, ContractError
from .fingerprint import Dataset
from .model import ArchConfig, ModelParams, forward_head, forward_trunk, init_model

_STREAM_BATCH = 7


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 50
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    rng_seed: int = 0
    samples_per_env: int = 2000
    constrained: bool = False
    transfer_epochs: int | None = None  # target-environment runs; None = epochs
    eval_batch_size: int = 512

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batchnorm needs batch statistics)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @property
    def effective_transfer_epochs(self) -> int:
        return self.epochs if self.transfer_epochs is None else self.transfer_epochs


@dataclass
class TrainHistory:
    """Per-epoch, per-environment loss and test error records."""

    records: list = field(default_factory=list)

    def append(self, epoch, env_id, train_loss, test_me_m, seconds):
        self.records.append(
            {
                "epoch": int(epoch),
                "env_id": str(env_id),
                "train_loss": float(train_loss),
                "test_me_m": float(test_me_m),
                "seconds": float(seconds),
            }
        )

    def final_test_me(self, env_id) -> float:
        rows = [r for r in self.records if r["env_id"] == str(env_id)]
        if not rows:
            raise KeyError(f"no history rows for environment {env_id!r}")
        return rows[-1]["test_me_m"]

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("epoch,env_id,train_loss,test_me_m,seconds\n")
            for r in self.records:
                f.write(
                    f"{r['epoch']},{r['env_id']},{r['train_loss']!r},"
                    f"{r['test_me_m']!r},{r['seconds']!r}\n"
                )


def _batch_bounds(n: int, batch_size: int):
    """Contiguous batch bounds covering all n samples once.

    A final remainder of a single sample is merged into the previous batch:
    batchnorm over the dense trunk output cannot normalize one row.
    """
    bounds = []
    start = 0
    while start < n:
        end = min(start + batch_size, n)
        if n - end == 1:
            end = n
        bounds.append((start, end))
        start = end
    return bounds


def _check_shapes(datasets: dict) -> tuple:
    shapes = {ds.fingerprint_shape for ds in datasets.values()}
    if len(shapes) != 1:
        raise ConfigError(f"environments disagree on fingerprint shape: {shapes}")
    return shapes.pop()


def run_training_loop(
    model: ModelParams,
    datasets: dict,
    cfg: TrainConfig,
    *,
    epochs: int | None = None,
    trainable: dict | None = None,
    trunk_mode: str = "train",
    history: bool = True,
) -> TrainHistory:
    """The shared epoch/step loop used by joint, separate, and transfer runs.

    `trainable` restricts which named parameters receive optimizer updates
    (all of them by default); `trunk_mode` controls batchnorm behaviour so a
    frozen trunk keeps its running statistics untouched.
    """
    env_ids = sorted(datasets)
    for env in env_ids:
        if len(datasets[env].train_indices) < 1:
            raise ConfigError(f"environment {env!r} has an empty training split")
    _check_shapes(datasets)
    epochs = cfg.epochs if epochs is None else epochs
    params = model.named_parameters() if trainable is None else trainable
    opt = OptimizerState(kind=cfg.optimizer, lr=cfg.learning_rate)

    pools = {env: datasets[env].train_indices for env in env_ids}
    # epoch length follows the smallest environment so the loss sum stays balanced
    steps_per_epoch = min(len(_batch_bounds(len(pools[env]), cfg.batch_size)) for env in env_ids)

    hist = TrainHistory()
    for epoch in range(epochs):
        t0 = time.perf_counter()
        batches = {}
        for i, env in enumerate(env_ids):
            rng = np.random.default_rng([int(cfg.rng_seed), _STREAM_BATCH, i, epoch])
            order = rng.permutation(len(pools[env]))
            bounds = _batch_bounds(len(pools[env]), cfg.batch_size)
            batches[env] = [pools[env][order[a:b]] for a, b in bounds]
        loss_sums = {env: 0.0 for env in env_ids}
        for step in range(steps_per_epoch):
            grads = {}
            for env in env_ids:
                ds = datasets[env]
                idx = batches[env][step]
                x = Tensor(ds.normalized(idx))
                y = Tensor(ds.labels64(idx))
                z = forward_trunk(model, x, trunk_mode)
                pred = forward_head(model.heads[env], z)
                loss = mse_loss(pred, y)
                backward(loss)
                loss_sums[env] += float(loss.data)
                for name, t in params.items():
                    if t.grad is None:
                        continue
                    if name in grads:
                        grads[name] += t.grad
                    else:
                        grads[name] = t.grad.copy()
            optimizer_step(params, grads, opt)
        seconds = time.perf_counter() - t0
        if history:
            for env in env_ids:
                me = (
                    evaluate(model, env, datasets[env], cfg)
                    if len(datasets[env].test_indices) > 0
                    else float("nan")
                )
                hist.append(epoch, env, loss_sums[env] / steps_per_epoch, me, seconds)
    return hist


def meta_train(datasets: dict, arch: ArchConfig, cfg: TrainConfig):
    """Jointly train a shared trunk and one head per environment.

    Returns (ModelParams, TrainHistory). Heads are keyed by env_id.
    """
    if len(datasets) < 1:
        raise ConfigError("meta_train needs at least one environment")
    shape = _check_shapes(datasets)
    model = init_model(arch, shape, sorted(datasets), rng_seed=cfg.rng_seed)
    hist = run_training_loop(model, datasets, cfg)
    return model, hist


def train_separate(dataset: Dataset, arch: ArchConfig, cfg: TrainConfig):
    """Single-environment supervised training of trunk plus head."""
    return meta_train({dataset.env_id: dataset}, arch, cfg)


def mean_euclidean_error(pred: np.ndarray, labels: np.ndarray) -> float:
    """ME in meters: mean over samples of the 2-D Euclidean distance."""
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if pred.shape != labels.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ConfigError(f"expected matching (N,2) arrays, got {pred.shape} and {labels.shape}")
    if pred.shape[0] == 0:
        raise ContractError("mean error over an empty set")
    d = pred - labels
    return float(np.mean(np.hypot(d[:, 0], d[:, 1])))


def predict(model: ModelParams, env_id: str, dataset: Dataset, indices, batch: int = 512) -> np.ndarray:
    """Eval-mode position estimates for the given sample indices."""
    out = []
    for start in range(0, len(indices), batch):
        chunk = indices[start : start + batch]
        x = Tensor(dataset.normalized(chunk))
        z = forward_trunk(model, x, "eval")
        out.append(forward_head(model.heads[str(env_id)], z).data)
    return np.concatenate(out, axis=0)


def evaluate(
    model: ModelParams,
    env_id: str,
    dataset: Dataset,
    cfg: TrainConfig | None = None,
    split: str = "test",
) -> float:
    """Mean Euclidean error in meters over the requested split (eval mode)."""
    idx = dataset.test_indices if split == "test" else dataset.train_indices
    if len(idx) == 0:
        raise ContractError(f"cannot evaluate on an empty {split} split")
    batch = cfg.eval_batch_size if cfg is not None else 512
    pred = predict(model, env_id, dataset, idx, batch=batch)
    return mean_euclidean_error(pred, dataset.labels64(idx))
