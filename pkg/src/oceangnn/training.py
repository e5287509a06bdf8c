"""Two-phase curriculum training: one-step fit, then two-step rollout fine-tuning."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import DayDataset
from .diff_core import AdamW, ParamStore, Tape, global_norm, load_checkpoint, save_checkpoint
from .gnn_model import MultiScaleGNN, NumericalError
from .ocean_grid import FieldSet, NormStats

PHASES = {1: "one_step", 2: "two_step", "one_step": "one_step", "two_step": "two_step"}
DEFAULT_LR = {"one_step": 1e-3, "two_step": 1e-4}


class TrainingAborted(NumericalError):
    """Non-finite loss; the last good checkpoint on disk is left untouched."""


# ----------------------------------------------------------------------------
# loss


def _loss_weights(weights, n: int) -> np.ndarray:
    w = np.ones(n) if weights is None else np.asarray(weights, np.float64)
    if w.shape != (n,):
        raise ValueError(f"expected {n} channel weights, got shape {w.shape}")
    return w


def masked_mse(pred: FieldSet, truth: FieldSet, stats: NormStats, weights=None) -> tuple[float, np.ndarray]:
    """Mean over ocean cells and channels of the squared error in units of each channel's std.

    Returns the loss and its gradient with respect to ``pred.values`` (zero on land).
    """
    if pred.channels != truth.channels or not pred.grid.same_layout(truth.grid):
        raise ValueError("prediction and truth differ in channels or grid layout")
    mask = truth.grid.mask
    n_cells = int(mask.sum())
    if n_cells == 0:
        raise ValueError("no ocean cells")
    _, std = stats.arrays(pred.channels)
    w = _loss_weights(weights, len(pred.channels))
    err = (np.asarray(pred.values, np.float64) - truth.values) / std[:, None, None]
    err = np.where(mask, err, 0.0)
    n = n_cells * len(pred.channels)
    loss = float(np.einsum("c,cij->", w, err * err) / n)
    grad = 2.0 * w[:, None, None] * err / std[:, None, None] / n
    return loss, grad


def _tape_loss(tape: Tape, model: MultiScaleGNN, pred, truth_rows: np.ndarray, weights) -> object:
    inv = 1.0 / model.x_std
    return tape.mse(tape.affine(pred, inv), truth_rows * inv, weights)


# ----------------------------------------------------------------------------
# configuration and logging


@dataclass
class TrainConfig:
    phase: str = "one_step"
    lr: float | None = None  # None -> phase default
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 1
    steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0  # 0 -> only at the end
    val_every: int = 0
    val_samples: int = 16
    loss_weights: list[float] | None = None
    train_days: tuple[int, int] | None = None  # inclusive range of initial days t
    val_days: tuple[int, int] | None = None
    init_checkpoint: str | None = None
    out_dir: str = "run"

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        self.phase = PHASES[self.phase]
        if self.lr is None:
            self.lr = DEFAULT_LR[self.phase]
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.phase == "two_step" and not self.init_checkpoint:
            raise ValueError("the two-step phase starts from a one-step checkpoint (init_checkpoint)")

    @property
    def rollout_steps(self) -> int:
        return 1 if self.phase == "one_step" else 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    FIELDS = ("step", "loss", "grad_norm", "val_loss", "seconds")

    def append(self, step: int, loss: float, grad_norm: float, seconds: float, val_loss: float | None = None):
        if self.rows and step <= self.rows[-1]["step"]:
            raise ValueError("log steps must increase")
        if not (np.isfinite(loss) and np.isfinite(grad_norm)):
            raise ValueError("log values must be finite")
        self.rows.append({"step": step, "loss": loss, "grad_norm": grad_norm, "val_loss": val_loss, "seconds": seconds})

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, self.FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if r[k] is None else r[k]) for k in self.FIELDS})

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as f:
            for r in csv.DictReader(f):
                log.rows.append({
                    "step": int(r["step"]),
                    "loss": float(r["loss"]),
                    "grad_norm": float(r["grad_norm"]),
                    "val_loss": float(r["val_loss"]) if r["val_loss"] else None,
                    "seconds": float(r["seconds"]),
                })
        return log


# ----------------------------------------------------------------------------
# samples


def valid_init_days(dataset: DayDataset, n_steps: int, day_range=None) -> list[int]:
    """Days t for which X(t-1..t+n_steps) and A(t-1..t+n_steps) all exist."""
    forcing = set(dataset.forcing_days)
    out = []
    for t in dataset.days:
        if day_range is not None and not day_range[0] <= t <= day_range[1]:
            continue
        span = range(t - 1, t + n_steps + 1)
        if dataset.has_days(span) and all(d in forcing for d in span):
            out.append(t)
    if not out:
        raise ValueError(f"dataset has no window of {n_steps + 2} consecutive days")
    return out


def sample_days(days: Sequence[int], seed: int, step: int, batch: int) -> list[int]:
    """Training days for one optimizer step; keyed on (seed, step) so resumption replays exactly."""
    rng = np.random.default_rng([seed, step])
    return [int(days[i]) for i in rng.integers(0, len(days), batch)]


def rollout_loss(
    tape: Tape, model: MultiScaleGNN, dataset: DayDataset, t: int, n_steps: int, weights=None
):
    """Mean normalized MSE over ``n_steps`` autoregressive steps from initial day ``t``."""
    dt = model.dtype
    prev = tape.const(dataset.ocean(t - 1).rows(dt))
    cur = tape.const(dataset.ocean(t).rows(dt))
    w = None if weights is None else np.asarray(weights)
    losses = []
    for k in range(n_steps):
        day = t + k
        a = [dataset.forcing(d).rows() for d in (day - 1, day, day + 1)]
        nxt = model.forward(tape, prev, cur, *a)
        losses.append(_tape_loss(tape, model, nxt, dataset.ocean(day + 1).rows(dt), w))
        prev, cur = cur, nxt
    return tape.scale_sum(losses, 1.0 / n_steps)


def persistence_loss(model: MultiScaleGNN, dataset: DayDataset, days: Sequence[int], n_steps: int = 1, weights=None) -> float:
    """The same loss for the forecast that repeats X(t) at every lead."""
    total = 0.0
    for t in days:
        x0 = dataset.ocean(t)
        for k in range(1, n_steps + 1):
            total += masked_mse(x0, dataset.ocean(t + k), model.stats, weights)[0] / n_steps
    return total / len(days)


def evaluate_loss(model: MultiScaleGNN, params: ParamStore, dataset: DayDataset, days: Sequence[int], n_steps: int, weights=None) -> float:
    total = 0.0
    for t in days:
        tape = Tape(params, record=False)
        total += float(rollout_loss(tape, model, dataset, t, n_steps, weights).value)
    return total / len(days)


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ParamStore
    optimizer: AdamW
    log: TrainLog
    checkpoint: Path | None


def _validation_days(config: TrainConfig, dataset: DayDataset) -> list[int]:
    if config.val_days is None:
        return []
    days = valid_init_days(dataset, config.rollout_steps, config.val_days)
    if len(days) > config.val_samples:
        idx = np.linspace(0, len(days) - 1, config.val_samples).round().astype(int)
        days = [days[i] for i in idx]
    return days


def train_phase(
    config: TrainConfig,
    model: MultiScaleGNN,
    dataset: DayDataset,
    params: ParamStore | None = None,
    optimizer: AdamW | None = None,
    log: TrainLog | None = None,
    provenance: dict | None = None,
    write: bool = True,
) -> TrainResult:
    """Run optimizer steps until ``config.steps`` have been taken in total.

    Passing the ``params``/``optimizer``/``log`` restored from a checkpoint resumes
    the run; sample selection depends only on (seed, step), so a resumed run
    follows the same trajectory as an uninterrupted one.
    """
    out_dir = Path(config.out_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    if params is None:
        if config.phase == "two_step":
            params, _, _ = load_checkpoint(config.init_checkpoint)
        else:
            params = model.init_params(config.seed)
    params = params.astype(model.dtype) if params.dtype != model.dtype else params
    if optimizer is None:
        optimizer = AdamW(config.lr, config.beta1, config.beta2, config.eps, config.weight_decay)
    log = log or TrainLog()

    n_steps = config.rollout_steps
    train_days = valid_init_days(dataset, n_steps, config.train_days)
    val_days = _validation_days(config, dataset)
    weights = None if config.loss_weights is None else _loss_weights(config.loss_weights, model.schema.c_x)
    ckpt_path = out_dir / f"{config.phase}.ockp"
    meta = {"train": config.to_dict(), **(provenance or {})}
    last_ckpt = ckpt_path if ckpt_path.exists() else None

    def checkpoint():
        nonlocal last_ckpt
        if write:
            save_checkpoint(ckpt_path, params, optimizer, {**meta, "step": optimizer.step})
            log.write_csv(out_dir / f"{config.phase}_log.csv")
            last_ckpt = ckpt_path

    start = time.perf_counter()
    while optimizer.step < config.steps:
        step = optimizer.step
        grads, loss = None, 0.0
        for t in sample_days(train_days, config.seed, step, config.batch_size):
            tape = Tape(params)
            try:
                out = rollout_loss(tape, model, dataset, t, n_steps, weights)
            except NumericalError as exc:
                raise TrainingAborted(f"step {step}: {exc}; last good checkpoint: {last_ckpt}") from None
            value = float(out.value)
            if not np.isfinite(value):
                raise TrainingAborted(f"non-finite loss at step {step}; last good checkpoint: {last_ckpt}")
            g = tape.backward(out)
            loss += value / config.batch_size
            if grads is None:
                grads = g
            else:
                for k in grads:
                    grads[k] = grads[k] + g[k]
        if config.batch_size > 1:
            for k in grads:
                grads[k] = grads[k] / config.batch_size
        gnorm = global_norm(grads)
        if not np.isfinite(gnorm):
            raise TrainingAborted(f"non-finite gradient at step {step}; last good checkpoint: {last_ckpt}")
        optimizer.update(params, grads)
        val = None
        if val_days and config.val_every and optimizer.step % config.val_every == 0:
            val = evaluate_loss(model, params, dataset, val_days, n_steps, weights)
        log.append(optimizer.step, loss, gnorm, time.perf_counter() - start, val)
        if config.checkpoint_every and optimizer.step % config.checkpoint_every == 0:
            checkpoint()
    checkpoint()
    return TrainResult(params, optimizer, log, last_ckpt)
