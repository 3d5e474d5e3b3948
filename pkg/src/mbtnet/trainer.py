"""RMSprop training with plateau learning-rate reduction and checkpointing."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import (MODEL_MAGIC, OPTIMIZER_MAGIC, CheckpointError, assign_parameters,
                         atomic_write, read_section, write_section)
from .config import coerce, read_kv, write_kv
from .data import SampleRecord
from .model import MBTNet, ModelConfig
from .supervision import LossWeights, evaluate, joint_loss, mean_of, pooled

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class RMSprop:
    """Plain RMSprop: s <- rho*s + (1-rho)*g^2;  p <- p - lr*g/(sqrt(s)+eps)."""

    def __init__(self, params, lr: float = 2e-4, rho: float = 0.99, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.square_avg = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        rmsprop_step(self.params, [p.grad for p in self.params], self)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def rmsprop_step(params, grads, state: RMSprop) -> None:
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(g))[0]
            raise TrainingError(f"non-finite gradient in {p.name!r} at {tuple(bad)}; step aborted")
    for p, g in zip(params, grads):
        dt = p.data.dtype.type
        s = state.square_avg[p.name]
        s *= dt(state.rho)
        s += dt(1 - state.rho) * g * g
        p.data -= dt(state.lr) * g / (np.sqrt(s) + dt(state.eps))


@dataclass
class PlateauSchedule:
    """Multiply lr by ``factor`` once the monitored loss stalls for ``patience`` epochs."""

    lr: float = 2e-4
    factor: float = 0.5
    patience: int = 5
    min_delta: float = 1e-4
    min_lr: float = 1e-6
    best: float = float("inf")
    bad_epochs: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def plateau_schedule_step(schedule: PlateauSchedule, val_loss: float) -> float:
    return schedule.step(val_loss)


@dataclass
class TrainOptions:
    lr: float = 2e-4
    rho: float = 0.99
    eps: float = 1e-8
    factor: float = 0.5
    patience: int = 5
    min_delta: float = 1e-4
    min_lr: float = 1e-6
    threshold: float = 0.5


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_body: float
    train_edge: float
    train_final: float
    val_loss: float
    val_dice: float
    val_f1: float
    val_se: float
    val_sp: float
    val_mean_dice: float
    lr: float
    wall_time: float


LOSS_COLUMNS = [f.name for f in fields(EpochStats) if f.name != "wall_time"]


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    initial_dice: float | None = None

    @property
    def best_dice(self) -> float:
        return max((e.val_dice for e in self.epochs), default=float("nan"))

    @property
    def lr_trace(self) -> list[float]:
        return [e.lr for e in self.epochs]

    def loss_trace(self) -> list[tuple]:
        return [tuple(getattr(e, c) for c in LOSS_COLUMNS) for e in self.epochs]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f.name for f in fields(EpochStats)])
            for e in self.epochs:
                writer.writerow([repr(v) if isinstance(v, float) else v
                                 for v in asdict(e).values()])

    @classmethod
    def from_csv(cls, path) -> "TrainReport":
        report = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                report.epochs.append(EpochStats(**{
                    f.name: (int(row[f.name]) if f.type in (int, "int") else float(row[f.name]))
                    for f in fields(EpochStats)}))
        return report


# ---------------------------------------------------------------- checkpoints

@dataclass
class TrainerState:
    epoch: int = 0
    best_dice: float = -1.0
    lr: float = 2e-4
    schedule_best: float = float("inf")
    bad_epochs: int = 0


def save_checkpoint(model: MBTNet, optimizer: RMSprop | None, path,
                    state: TrainerState | None = None) -> None:
    """Write parameters (and optimizer accumulators) plus a key-value sidecar."""
    path = Path(path)

    def writer(fh):
        write_section(fh, MODEL_MAGIC, ((p.name, p.data) for p in model.parameters()))
        if optimizer is not None:
            write_section(fh, OPTIMIZER_MAGIC,
                          ((p.name, optimizer.square_avg[p.name]) for p in model.parameters()))

    atomic_write(path, writer)
    sidecar = dict(model.config.to_dict())
    if optimizer is not None:
        sidecar.update(optimizer_lr=optimizer.lr, optimizer_rho=optimizer.rho,
                       optimizer_eps=optimizer.eps)
    if state is not None:
        sidecar.update({f"trainer_{k}": v for k, v in asdict(state).items()})
    tmp = path.with_name(path.name + ".cfg.tmp")
    write_kv(tmp, sidecar)
    tmp.replace(config_path(path))


def config_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".cfg")


def read_model_config(path) -> ModelConfig:
    values = read_kv(config_path(path))
    defaults = ModelConfig()
    known = {f.name for f in fields(ModelConfig)}
    return ModelConfig(**{k: coerce(v, getattr(defaults, k), k)
                          for k, v in values.items() if k in known})


def load_checkpoint(path, dtype=None) -> tuple[MBTNet, RMSprop | None, TrainerState | None]:
    """Rebuild the model (and optimizer, trainer state when present) from ``path``."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    config = read_model_config(path)
    values = read_kv(config_path(path))
    with T.default_dtype(dtype or T.get_default_dtype()):
        model = MBTNet(config)
    with open(path, "rb") as fh:
        assign_parameters(model, read_section(fh, MODEL_MAGIC))
        rest = fh.read(4)
        optimizer = None
        if rest:
            if rest != OPTIMIZER_MAGIC:
                raise CheckpointError(f"bad magic {rest!r} after model section")
            fh.seek(-4, 1)
            accumulators = dict(read_section(fh, OPTIMIZER_MAGIC))
            optimizer = RMSprop(model.parameters(), lr=float(values["optimizer_lr"]),
                                rho=float(values["optimizer_rho"]),
                                eps=float(values["optimizer_eps"]))
            for p in model.parameters():
                if p.name not in accumulators or accumulators[p.name].shape != p.shape:
                    raise CheckpointError(f"optimizer state missing or misshapen for {p.name}")
                optimizer.square_avg[p.name][...] = accumulators[p.name]
    state = None
    if "trainer_epoch" in values:
        defaults = TrainerState()
        state = TrainerState(**{f.name: coerce(values[f"trainer_{f.name}"],
                                               getattr(defaults, f.name), f.name)
                                for f in fields(TrainerState)})
    return model, optimizer, state


# ---------------------------------------------------------------- loop

def _image_tensor(record: SampleRecord, dtype) -> T.Tensor:
    return T.Tensor(record.image[None].astype(dtype, copy=False))


def validate(model: MBTNet, records: Sequence[SampleRecord], weights: LossWeights,
             threshold: float = 0.5):
    """Mean total loss and per-image metrics over ``records``."""
    losses, reports = [], []
    dtype = model.parameters()[0].dtype
    with T.no_grad():
        for rec in records:
            out = model(_image_tensor(rec, dtype))
            losses.append(float(joint_loss(out, rec.masks, weights).total.data))
            reports.append(evaluate(out.final_logits, rec.masks.final[None, None], threshold))
    return float(np.mean(losses)) if losses else float("nan"), reports


def train(model: MBTNet, train_set: Sequence[SampleRecord], val_set: Sequence[SampleRecord],
          epochs: int, weights: LossWeights = LossWeights(), seed: int = 0,
          out_dir=None, options: TrainOptions = TrainOptions(), resume=None) -> TrainReport:
    """Batch-size-1 training; checkpoints ``last.ckpt`` and ``best.ckpt`` in ``out_dir``.

    With ``resume`` pointing at a training checkpoint, parameters, optimizer
    accumulators, schedule and epoch counter are restored from it and
    ``epochs`` counts the total, not the additional, epochs.
    """
    if not train_set:
        raise TrainingError("training split is empty")
    if {id(r) for r in train_set} & {id(r) for r in val_set}:
        raise TrainingError("train and validation sets overlap")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    optimizer = RMSprop(model.parameters(), options.lr, options.rho, options.eps)
    schedule = PlateauSchedule(options.lr, options.factor, options.patience,
                               options.min_delta, options.min_lr)
    state = TrainerState(lr=options.lr)
    report = TrainReport()
    if resume is not None:
        restored, opt_state, state = load_checkpoint(resume)
        if opt_state is None or state is None:
            raise CheckpointError(f"{resume} is not a training checkpoint")
        assign_parameters(model, [(p.name, p.data) for p in restored.parameters()])
        for p in model.parameters():
            optimizer.square_avg[p.name][...] = opt_state.square_avg[p.name]
        schedule.lr = optimizer.lr = state.lr
        schedule.best, schedule.bad_epochs = state.schedule_best, state.bad_epochs
        previous = Path(resume).parent / "report.csv"
        if previous.is_file():
            report.epochs = TrainReport.from_csv(previous).epochs[:state.epoch]
    elif out is not None:
        save_checkpoint(model, optimizer, out / "last.ckpt", state)

    dtype = model.parameters()[0].dtype
    if val_set and resume is None:
        _, initial = validate(model, val_set, weights, options.threshold)
        report.initial_dice = pooled(initial).dice

    for epoch in range(state.epoch, epochs):
        started = time.perf_counter()
        order = np.random.default_rng([seed, epoch]).permutation(len(train_set))
        sums = np.zeros(4)
        for idx in order:
            rec = train_set[idx]
            out_b = model(_image_tensor(rec, dtype))
            try:
                loss = joint_loss(out_b, rec.masks, weights)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite loss on record {rec.ident or idx} "
                                    f"(epoch {epoch + 1}): {exc}") from exc
            value = float(loss.total.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss on record {rec.ident or idx} "
                                    f"(epoch {epoch + 1})")
            optimizer.zero_grad()
            loss.total.backward()
            rmsprop_step(optimizer.params, [p.grad for p in optimizer.params], optimizer)
            sums += (value, loss.body, loss.edge, loss.final)
        means = sums / len(train_set)

        if val_set:
            val_loss, reports = validate(model, val_set, weights, options.threshold)
            metrics = pooled(reports)
            per_image = mean_of(reports)["dice"]
        else:
            val_loss, metrics, per_image = float(means[0]), None, float("nan")
        optimizer.lr = schedule.step(val_loss)
        dice = metrics.dice if metrics else float("nan")
        stats = EpochStats(
            epoch=epoch + 1, train_loss=float(means[0]), train_body=float(means[1]),
            train_edge=float(means[2]), train_final=float(means[3]), val_loss=val_loss,
            val_dice=dice, val_f1=metrics.f1 if metrics else float("nan"),
            val_se=metrics.sensitivity if metrics else float("nan"),
            val_sp=metrics.specificity if metrics else float("nan"),
            val_mean_dice=per_image, lr=optimizer.lr,
            wall_time=time.perf_counter() - started,
        )
        report.epochs.append(stats)
        log.info("epoch %d loss %.4f val_loss %.4f dice %.4f lr %.2e (%.1fs)", stats.epoch,
                 stats.train_loss, val_loss, dice, stats.lr, stats.wall_time)

        improved = metrics is not None and dice > state.best_dice
        state = TrainerState(epoch=epoch + 1,
                             best_dice=dice if improved else state.best_dice,
                             lr=optimizer.lr, schedule_best=schedule.best,
                             bad_epochs=schedule.bad_epochs)
        if out is not None:
            if improved:
                save_checkpoint(model, optimizer, out / "best.ckpt", state)
            save_checkpoint(model, optimizer, out / "last.ckpt", state)
            report.to_csv(out / "report.csv")
    if out is not None:
        report.to_csv(out / "report.csv")
    return report
