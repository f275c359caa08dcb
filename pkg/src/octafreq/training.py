"""AdamW + L1 training loop over (single, merged) depth-plane pairs.

Planes arrive on the storage scale [0, 255]; the loop divides by 255 at the
model boundary and reports the L1 loss on that [0, 1] scale.  Validation
uses the inference path (no drop path, clamped output) and also reports PSNR
back on [0, 255] with a fixed peak of 255.
"""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DomainError
from .metrics import psnr
from .model import Model, enhance_plane, forward, named_parameters
from .tensor import Tensor, l1_loss

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "PairDataset",
    "TrainResult",
    "adamw_step",
    "lr_for_epoch",
    "evaluate",
    "train",
    "write_curve",
]


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8
    batch: int = 1
    total_iters: int = 5000
    halve_every_epochs: int = 20
    drop_path: float = 0.1
    seed: int = 0
    eval_every: int = 250

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError(f"betas must lie in [0, 1), got "
                              f"{self.beta1}, {self.beta2}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.batch != 1:
            raise ConfigError("only batch size 1 is supported")
        if self.total_iters < 0:
            raise ConfigError(f"total_iters must be >= 0, got {self.total_iters}")
        if self.halve_every_epochs < 1:
            raise ConfigError("halve_every_epochs must be >= 1, "
                              f"got {self.halve_every_epochs}")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError(f"drop_path must be in [0, 1), got {self.drop_path}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclass_fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        return cls(**d)


@dataclass
class OptimizerState:
    """AdamW first/second moment buffers plus the shared step counter."""

    step: int
    m: dict
    v: dict

    @classmethod
    def fresh(cls, model: Model) -> "OptimizerState":
        return cls(step=0,
                   m={n: np.zeros_like(p.data) for n, p in named_parameters(model)},
                   v={n: np.zeros_like(p.data) for n, p in named_parameters(model)})

    def as_dict(self) -> dict:
        return {"step": self.step, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        return cls(step=int(d["step"]), m=dict(d["m"]), v=dict(d["v"]))


@dataclass
class PairDataset:
    """(single-repeat plane, merged plane) pairs on the [0, 255] scale."""

    train: list
    val: list


@dataclass
class TrainResult:
    model: Model
    optimizer: OptimizerState
    curve: list = field(default_factory=list)   # (iter, train_l1, val_l1, val_psnr)


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Initial rate halved every ``halve_every_epochs`` epochs."""
    return cfg.lr0 * 0.5 ** (epoch // cfg.halve_every_epochs)


def adamw_step(named_params, state: OptimizerState, cfg: TrainConfig,
               lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay multiplies the parameter by (1 - lr*wd) before the adaptive update
    and never touches gradients or moments; decay-exempt parameters
    (normalisation gains/shifts and the scalar temperature/skip weights)
    skip it entirely.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise DomainError(f"non-finite gradient in {name} at step {t} "
                              f"(|g|max={np.abs(g).max()})")
        if cfg.weight_decay and not p.decay_exempt:
            p.data *= np.float32(1.0 - lr * cfg.weight_decay)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data -= (lr * update).astype(np.float32)


def evaluate(model: Model, pairs) -> tuple[float, float]:
    """Mean L1 (on [0, 1]) and mean PSNR (on [0, 255], peak 255) over pairs,
    through the inference path."""
    if not pairs:
        raise ConfigError("cannot evaluate on an empty pair list")
    l1s, psnrs = [], []
    for single, merged in pairs:
        pred = enhance_plane(model, np.asarray(single, np.float32) / np.float32(255.0))
        target = np.asarray(merged, np.float64) / 255.0
        l1s.append(float(np.mean(np.abs(pred - target))))
        psnrs.append(psnr(pred * 255.0, merged, peak=255.0))
    return float(np.mean(l1s)), float(np.mean(psnrs))


def train(model: Model, dataset: PairDataset, cfg: TrainConfig,
          verbose: bool = True) -> TrainResult:
    """Optimise ``model`` in place and return it with the loss curve.

    Fully reproducible from ``cfg.seed``: the same seed drives the epoch
    shuffles and the drop-path draws.  The curve holds one row per
    evaluation point — iteration stamp, mean train L1 since the previous
    row (NaN for the row at iteration 0), validation L1, validation PSNR.
    """
    if not dataset.train:
        raise ConfigError("training set is empty")
    if not dataset.val:
        raise ConfigError("validation set is empty")

    for stage in list(model.stages) + ([model.refine] if model.refine else []):
        stage.config.drop_path = cfg.drop_path
    model.config.drop_path = cfg.drop_path

    params = named_parameters(model)
    state = OptimizerState.fresh(model)
    rng = np.random.default_rng(cfg.seed)
    n_train = len(dataset.train)

    curve = []
    window: list[float] = []

    def log_point(it: int) -> None:
        train_l1 = float(np.mean(window)) if window else float("nan")
        window.clear()
        val_l1, val_psnr = evaluate(model, dataset.val)
        curve.append((it, train_l1, val_l1, val_psnr))
        if verbose:
            print(f"iter {it}/{cfg.total_iters}  train_l1 {train_l1:.5f}  "
                  f"val_l1 {val_l1:.5f}  val_psnr {val_psnr:.2f}",
                  file=sys.stderr)

    log_point(0)
    order = np.empty(0, dtype=np.int64)
    for it in range(cfg.total_iters):
        pos = it % n_train
        if pos == 0:
            order = rng.permutation(n_train)
        epoch = it // n_train
        single, merged = dataset.train[order[pos]]
        x = Tensor(np.asarray(single, np.float32)[..., None] / np.float32(255.0))
        y = Tensor(np.asarray(merged, np.float32)[..., None] / np.float32(255.0))

        for _, p in params:
            p.grad = None
        loss = l1_loss(forward(model, x, training=True, rng=rng), y)
        loss.backward()
        adamw_step(params, state, cfg, lr_for_epoch(cfg, epoch))
        window.append(float(loss.data))

        if (it + 1) % cfg.eval_every == 0 or it + 1 == cfg.total_iters:
            log_point(it + 1)

    return TrainResult(model=model, optimizer=state, curve=curve)


def write_curve(path, curve) -> None:
    """Write evaluation rows as CSV with an ``iter,train_l1,val_l1,val_psnr``
    header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "train_l1", "val_l1", "val_psnr"])
        for it, train_l1, val_l1, val_psnr in curve:
            w.writerow([it, f"{train_l1:.6g}", f"{val_l1:.6g}", f"{val_psnr:.6g}"])
