"""SGD training loop: warmup, linear decay, checkpoints, per-epoch log."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import evaluate
from .loss import detection_loss
from .model import Model, save_checkpoint
from .tensor import Tensor

LOG_FILE = "train_log.txt"
BEST_FILE = "best.npz"
LAST_FILE = "last.npz"


@dataclass(frozen=True)
class HyperParams:
    """Training protocol constants; defaults follow the reference recipe."""

    lr0: float = 0.0032
    lrf: float = 0.12
    batch_size: int = 16
    warmup_epochs: float = 2.0
    warmup_bias_lr: float = 0.05
    epochs: int = 100
    momentum: float = 0.937
    weight_decay: float = 0.0005
    seed: int = 0
    # lrf is a multiplier on lr0 by default; set this to treat it as the
    # absolute final learning rate instead
    final_lr_absolute: bool = False

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 {self.lr0} must be positive")
        if self.final_lr_absolute:
            if self.lrf <= 0:
                raise ValueError(f"absolute final lr {self.lrf} must be positive")
        elif not 0.0 < self.lrf <= 1.0:
            raise ValueError(f"lrf {self.lrf} outside (0, 1]")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(
                f"warmup_epochs {self.warmup_epochs} not below epochs {self.epochs}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size {self.batch_size} must be at least 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum {self.momentum} outside [0, 1)")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay {self.weight_decay} is negative")

    def _multiplier(self) -> float:
        return self.lrf / self.lr0 if self.final_lr_absolute else self.lrf

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


def lr_at(epoch_frac: float, hp: HyperParams) -> tuple:
    """Learning rates for weights and biases at a fractional epoch.

    Linear decay from lr0 to lr0*lrf over the run; during warmup the weight
    lr ramps from 0 and the bias lr from warmup_bias_lr, both landing on the
    decayed schedule so the curve is continuous at the boundary.
    """
    if not 0.0 <= epoch_frac <= hp.epochs:
        raise ValueError(f"epoch {epoch_frac} outside [0, {hp.epochs}]")
    m = hp._multiplier()
    scheduled = hp.lr0 * ((1.0 - epoch_frac / hp.epochs) * (1.0 - m) + m)
    if epoch_frac < hp.warmup_epochs:
        t = epoch_frac / hp.warmup_epochs
        return t * scheduled, hp.warmup_bias_lr + (scheduled - hp.warmup_bias_lr) * t
    return scheduled, scheduled


class SGD:
    """Momentum SGD with decoupled parameter groups.

    Biases follow the warmup bias schedule; weight decay applies only to
    non-bias, non-attention weights.
    """

    def __init__(self, model: Model, hp: HyperParams):
        self.model = model
        self.hp = hp
        self._velocity = {
            name: np.zeros_like(p.data) for name, p in model.params.items()
        }

    @staticmethod
    def _group(name: str) -> str:
        if name.endswith(".bias"):
            return "bias"
        if ".cbam." in name:
            return "no_decay"
        return "decay"

    def step(self, lr_weights: float, lr_bias: float) -> None:
        for name, p in self.model.params.items():
            if p.grad is None:
                continue
            group = self._group(name)
            g = p.grad
            if group == "decay" and self.hp.weight_decay > 0.0:
                g = g + self.hp.weight_decay * p.data
            v = self._velocity[name]
            v *= self.hp.momentum
            v += g
            p.data -= (lr_bias if group == "bias" else lr_weights) * v


@dataclass
class TrainingRun:
    """Outcome of a train() call: per-epoch records plus checkpoint paths."""

    log: list = field(default_factory=list)
    best_epoch: int = -1
    best_map50: float = -1.0
    best_path: Path | None = None
    last_path: Path | None = None


def _format_record(rec: dict) -> str:
    parts = [
        f"epoch={rec['epoch']}",
        f"steps={rec['steps']}",
        f"lr={rec['lr']:.8f}",
        f"loss_box={rec['loss_box']:.6f}",
        f"loss_obj={rec['loss_obj']:.6f}",
        f"loss_cls={rec['loss_cls']:.6f}",
        f"val_map50={rec['val_map50']:.6f}",
    ]
    return " ".join(parts)


def train_on_pairs(model: Model, train_pairs, val_pairs, hp: HyperParams,
                   out_dir=None, log_fn=None) -> TrainingRun:
    """Core loop over preloaded (image, annotations) pairs.

    Deterministic for a fixed seed: data order comes from one seeded
    generator and every update is plain numpy arithmetic.
    """
    if not train_pairs:
        raise ValueError("training split is empty")
    if not val_pairs:
        raise ValueError("validation split is empty")
    images = np.stack([
        img.data if isinstance(img, Tensor) else np.asarray(img)
        for img, _ in train_pairs
    ])
    annotations = [anns for _, anns in train_pairs]

    n = len(train_pairs)
    steps_per_epoch = math.ceil(n / hp.batch_size)
    rng = np.random.default_rng(hp.seed)
    optimizer = SGD(model, hp)
    run = TrainingRun()
    out_dir = Path(out_dir) if out_dir is not None else None
    log_lines = []

    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        sums = {"box": 0.0, "obj": 0.0, "cls": 0.0}
        last_lr = 0.0
        for step in range(steps_per_epoch):
            idx = order[step * hp.batch_size:(step + 1) * hp.batch_size]
            lr_w, lr_b = lr_at(epoch + step / steps_per_epoch, hp)
            last_lr = lr_w
            model.zero_grad()
            preds = model(Tensor(images[idx]))
            loss, parts = detection_loss(preds, [annotations[i] for i in idx],
                                         model.cfg)
            loss.backward()
            optimizer.step(lr_w, lr_b)
            for key in sums:
                sums[key] += parts[key]

        report = evaluate(model, val_pairs, thresholds=(0.5,))
        rec = {
            "epoch": epoch,
            "steps": steps_per_epoch,
            "lr": last_lr,
            "loss_box": sums["box"] / steps_per_epoch,
            "loss_obj": sums["obj"] / steps_per_epoch,
            "loss_cls": sums["cls"] / steps_per_epoch,
            "val_map50": report.map50,
        }
        run.log.append(rec)
        log_lines.append(_format_record(rec))
        if log_fn is not None:
            log_fn(log_lines[-1])

        if report.map50 > run.best_map50:
            run.best_map50 = report.map50
            run.best_epoch = epoch
            if out_dir is not None:
                out_dir.mkdir(parents=True, exist_ok=True)
                run.best_path = out_dir / BEST_FILE
                save_checkpoint(model, run.best_path)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            run.last_path = out_dir / LAST_FILE
            save_checkpoint(model, run.last_path)
            (out_dir / LOG_FILE).write_text("\n".join(log_lines) + "\n")
    return run


def train(model: Model, manifest, hp: HyperParams, root=".", out_dir=None,
          log_fn=None, threads: int = 1) -> TrainingRun:
    """Load the manifest's train/val splits from disk and run the loop."""
    from .dataio import load_split

    train_pairs = load_split(root, manifest, "train", model.cfg.input_size,
                             model.cfg.num_classes, threads=threads)
    val_pairs = load_split(root, manifest, "val", model.cfg.input_size,
                           model.cfg.num_classes, threads=threads)
    return train_on_pairs(model, train_pairs, val_pairs, hp, out_dir=out_dir,
                          log_fn=log_fn)
