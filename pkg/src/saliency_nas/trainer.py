"""Training loops: baseline, averaged-teacher self-distillation, sandwich
rule and inplace distillation, all driven by SGD with momentum under a
cosine schedule with warm restarts.

Randomness comes from named streams of one seed (see :mod:`rng`), so two
runs with identical arguments produce bit-identical stores and logs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import losses
from .data import SaliencyDataset
from .metrics import eval_cc
from .network import ExecutableNet, build_network
from .rng import stream
from .space import ArchConfig, sample_subnet
from .store import ParameterStore
from .tensor import Tensor, backward, no_grad

STRATEGIES = ("baseline", "self-kd", "sandwich", "inplace")


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries where it happened."""

    def __init__(self, strategy: str, epoch: int, step: int, value: float):
        self.strategy, self.epoch, self.step, self.value = strategy, epoch, step, value
        super().__init__(f"{strategy}: non-finite training loss {value!r} at epoch {epoch}, step {step}")


@dataclass(frozen=True)
class ScheduleConfig:
    lr_max: float = 0.1
    lr_min: float = 0.0
    T0: float = 10
    epochs: int = 20
    momentum: float = 0.9
    batch_size: int = 64
    alpha: float = 0.5
    teacher_update: str = "running-mean"  # or "pairwise"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.T0 < 1:
            raise ValueError(f"T0 must be >= 1, got {self.T0}")
        if self.lr_min < 0 or self.lr_max < self.lr_min:
            raise ValueError("need 0 <= lr_min <= lr_max")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")
        if self.teacher_update not in ("running-mean", "pairwise"):
            raise ValueError(f"unknown teacher_update {self.teacher_update!r}")


# ------------------------------------------------------------ primitives
def cosine_lr(t: float, cfg: ScheduleConfig) -> float:
    """Learning rate at epoch progress ``t``; restarts at every multiple of T0."""
    if t < 0:
        raise ValueError(f"epoch progress must be >= 0, got {t}")
    phase = math.fmod(t, cfg.T0) / cfg.T0
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * phase))


def sgd_momentum_step(params: dict[str, Tensor], velocity: dict[str, np.ndarray], lr: float,
                      momentum: float) -> None:
    """v <- momentum * v + g; theta <- theta - lr * v, in place.

    Parameters without a gradient (not read by any subnet this step) are
    left alone, velocity included.
    """
    for name, p in params.items():
        if p.grad is None:
            continue
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p.data)
        v *= momentum
        v += p.grad
        p.data -= (lr * v).astype(p.data.dtype)


def blend_target(gt, p_avg, alpha: float) -> np.ndarray:
    """p_avg + (gt - p_avg) * alpha, renormalized per image to sum 1."""
    g = np.asarray(getattr(gt, "data", gt))
    p = np.asarray(getattr(p_avg, "data", p_avg))
    if g.shape != p.shape:
        raise ValueError(f"target shapes differ: {g.shape} vs {p.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    b = p + (g - p) * alpha
    axes = tuple(range(1, b.ndim)) if b.ndim > 2 else None
    return b / b.sum(axis=axes, keepdims=True)


@dataclass
class TrainState:
    student: ParameterStore
    teacher: ParameterStore | None = None
    accepted_count: int = 0
    best_val_loss: float = math.inf
    epoch: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    snapshots: list[dict[str, np.ndarray]] | None = None


def update_teacher(state: TrainState, rule: str = "running-mean") -> None:
    """Fold the current student into the averaged teacher.

    The first acceptance copies the student exactly. ``running-mean`` keeps
    an equal-weight average over all accepted snapshots; ``pairwise``
    averages the teacher with the new snapshot.
    """
    s = state.student
    if state.teacher is None or state.accepted_count == 0:
        state.teacher = s.copy()
        for t in state.teacher.params.values():
            t.requires_grad = False
    else:
        n = state.accepted_count
        for name, t in state.teacher.params.items():
            if rule == "pairwise":
                t.data[...] = (t.data + s[name].data) / 2
            else:
                t.data[...] = (t.data * n + s[name].data) / (n + 1)
    state.accepted_count += 1
    if state.snapshots is not None:
        state.snapshots.append({k: p.data.copy() for k, p in s.params.items()})


# ------------------------------------------------------------ helpers
def train_batches(ds: SaliencyDataset, batch_size: int, rng: np.random.Generator):
    """Shuffled batches; a trailing batch of one image is dropped (batch norm needs two)."""
    order = rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2:
            break
        yield ds.images[idx], ds.densities[idx], ds.fixations[idx]


def _ordered_batches(ds: SaliencyDataset, batch_size: int, min_size: int = 1):
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        if len(ds.images[sl]) >= min_size:
            yield ds.images[sl], ds.densities[sl], ds.fixations[sl]


def recalibrate_bn(net: ExecutableNet, ds: SaliencyDataset, batch_size: int) -> int:
    """Recompute the running statistics net reads with a cumulative average
    over one ordered pass of ``ds``. Returns the number of forwards run."""
    saved_mode, saved_m = net.training, net.bn_momentum
    count = net.forward_count
    net.train()
    with no_grad():
        for k, (x, _, _) in enumerate(_ordered_batches(ds, batch_size, 2), start=1):
            net.bn_momentum = 1.0 / k
            net.forward(x)
    net.training, net.bn_momentum = saved_mode, saved_m
    used = net.forward_count - count
    net.forward_count = count
    return used


def evaluate_loss(net: ExecutableNet, ds: SaliencyDataset, batch_size: int = 64,
                  loss_cfg: losses.LossConfig = losses.DEFAULT) -> tuple[float, float]:
    """(mean combined loss, mean CC) over ``ds`` in eval mode."""
    was_training = net.training
    net.eval()
    total, cc, n = 0.0, 0.0, 0
    with no_grad():
        for x, g, f in _ordered_batches(ds, batch_size):
            p = net.forward(x)
            total += float(losses.combined_loss(p, g, f, loss_cfg).data) * len(x)
            cc += sum(eval_cc(pi, gi) for pi, gi in zip(p.data, g))
            n += len(x)
    net.training = was_training
    return total / n, cc / n


def _at_resolution(config: ArchConfig, ds: SaliencyDataset) -> ArchConfig:
    return replace(config, resolution=tuple(ds.resolution))


def _check_splits(train: SaliencyDataset, val: SaliencyDataset) -> None:
    if len(train) < 2:
        raise ValueError("training split needs at least 2 samples")
    if len(val) < 1:
        raise ValueError("validation split is empty")


def _loss_step(net: ExecutableNet, x, g, f, loss_cfg) -> tuple[float, Tensor]:
    p = net.forward(x)
    loss = losses.combined_loss(p, g, f, loss_cfg)
    backward(loss)
    return float(loss.data), p


def _guard(value: float, strategy: str, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(strategy, epoch, step, value)


@dataclass
class TrainResult:
    store: ParameterStore
    log: list[dict]
    state: TrainState | None = None
    counters: dict = field(default_factory=dict)

    def log_lines(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.log)


def _record(epoch, lr, train_loss, val_loss, accepted, strategy, seed, **extra) -> dict:
    rec = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss,
           "teacher_accepted": accepted, "strategy": strategy, "seed": seed}
    rec.update(extra)
    return rec


# ------------------------------------------------------------ single-config strategies
def _train_single(strategy: str, config: ArchConfig, store: ParameterStore, train: SaliencyDataset,
                  val: SaliencyDataset, cfg: ScheduleConfig, seed: int, loss_cfg: losses.LossConfig,
                  keep_snapshots: bool, on_epoch: Callable | None) -> TrainResult:
    _check_splits(train, val)
    config = _at_resolution(config, train)
    selfkd = strategy == "self-kd"
    state = TrainState(student=store, snapshots=[] if keep_snapshots else None)
    net = build_network(config, store).train()
    teacher_net: ExecutableNet | None = None
    log: list[dict] = []
    counters = {"forwards": 0, "backwards": 0, "teacher_forwards": 0, "bn_recal_forwards": 0}
    steps = math.ceil(len(train) / cfg.batch_size)
    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        rng = stream(seed, f"shuffle/{epoch}")
        lr0 = cosine_lr(epoch - 1, cfg)
        tot, n = 0.0, 0
        ep = {"forwards": 0, "backwards": 0, "teacher_forwards": 0}
        for step, (x, g, f) in enumerate(train_batches(train, cfg.batch_size, rng)):
            lr = cosine_lr(epoch - 1 + step / steps, cfg)
            target = g
            if selfkd and epoch > 1:
                with no_grad():
                    p_avg = teacher_net.forward(x).data
                ep["teacher_forwards"] += 1
                target = blend_target(g, p_avg, cfg.alpha)
            store.zero_grad()
            value, _ = _loss_step(net, x, target, f, loss_cfg)
            ep["forwards"] += 1
            ep["backwards"] += 1
            _guard(value, strategy, epoch, step)
            sgd_momentum_step(store.params, state.velocity, lr, cfg.momentum)
            tot += value * len(x)
            n += len(x)
        store.zero_grad()
        val_loss, val_cc = evaluate_loss(net, val, cfg.batch_size, loss_cfg)
        _guard(val_loss, strategy, epoch, -1)
        accepted = None
        if selfkd:
            accepted = val_loss < state.best_val_loss
            if accepted:
                state.best_val_loss = val_loss
                update_teacher(state, cfg.teacher_update)
                if teacher_net is None:
                    teacher_net = build_network(config, state.teacher).eval()
                counters["bn_recal_forwards"] += recalibrate_bn(teacher_net, train, cfg.batch_size)
        else:
            state.best_val_loss = min(state.best_val_loss, val_loss)
        for k, v in ep.items():
            counters[k] += v
        rec = _record(epoch, lr0, tot / n, val_loss, accepted, strategy, seed, val_cc=val_cc,
                      forwards=ep["forwards"], backwards=ep["backwards"],
                      teacher_forwards=ep["teacher_forwards"], accepted_count=state.accepted_count)
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec, state)
    counters["teacher_net_forwards"] = teacher_net.forward_count if teacher_net is not None else 0
    return TrainResult(store, log, state, counters)


def train_baseline(config: ArchConfig, store: ParameterStore, train: SaliencyDataset,
                   val: SaliencyDataset, cfg: ScheduleConfig = ScheduleConfig(), seed: int = 0,
                   loss_cfg: losses.LossConfig = losses.DEFAULT,
                   on_epoch: Callable | None = None) -> TrainResult:
    """Plain combined-loss training of one config (no teacher)."""
    return _train_single("baseline", config, store, train, val, cfg, seed, loss_cfg, False, on_epoch)


def train_selfkd(config: ArchConfig, store: ParameterStore, train: SaliencyDataset,
                 val: SaliencyDataset, cfg: ScheduleConfig = ScheduleConfig(), seed: int = 0,
                 loss_cfg: losses.LossConfig = losses.DEFAULT, keep_snapshots: bool = False,
                 on_epoch: Callable | None = None) -> TrainResult:
    """Averaged-teacher self-distillation.

    Epoch 1 trains on the raw targets. Afterwards each batch's density target
    is blended with the teacher's prediction (fixations unchanged). After
    every epoch the student is validated and, on strict improvement, folded
    into the teacher, whose batch-norm statistics are then recomputed over
    the training set.
    """
    return _train_single("self-kd", config, store, train, val, cfg, seed, loss_cfg, keep_snapshots,
                         on_epoch)


# ------------------------------------------------------------ supernet strategies
def sandwich_roster(space, rng: np.random.Generator, resolution, n_random: int = 2) -> list[ArchConfig]:
    roster = [sample_subnet(space, "min"), sample_subnet(space, "max")]
    roster += [sample_subnet(space, "uniform-random", rng) for _ in range(n_random)]
    return [replace(c, resolution=tuple(resolution)) for c in roster]


def sandwich_gradients(store: ParameterStore, configs: Sequence[ArchConfig], x, g, f,
                       loss_cfg: losses.LossConfig = losses.DEFAULT) -> list[float]:
    """Forward/backward every config; gradients accumulate in the shared store."""
    values = []
    for c in configs:
        net = build_network(c, store).train()
        value, _ = _loss_step(net, x, g, f, loss_cfg)
        values.append(value)
    return values


def inplace_gradients(store: ParameterStore, max_config: ArchConfig, small: Sequence[ArchConfig], x, g, f,
                      loss_cfg: losses.LossConfig = losses.DEFAULT,
                      probe: dict | None = None) -> list[float]:
    """Max subnet against the ground truth; smaller ones against its detached map.

    With ``probe`` a dict, it receives ``max_grads`` (store gradients right
    after the max subnet's backward) and ``target`` (the detached map).
    """
    net = build_network(max_config, store).train()
    value, p_max = _loss_step(net, x, g, f, loss_cfg)
    target = p_max.data.copy()
    if probe is not None:
        probe["max_grads"] = store.grads()
        probe["target"] = target
    values = [value]
    for c in small:
        sub = build_network(c, store).train()
        v, _ = _loss_step(sub, x, target, f, loss_cfg)
        values.append(v)
    return values


def _train_supernet(strategy: str, store: ParameterStore, train: SaliencyDataset, val: SaliencyDataset,
                    cfg: ScheduleConfig, seed: int, loss_cfg: losses.LossConfig, n_random: int,
                    roster_fn: Callable | None, on_epoch: Callable | None) -> TrainResult:
    _check_splits(train, val)
    space = store.space
    velocity: dict[str, np.ndarray] = {}
    steps = math.ceil(len(train) / cfg.batch_size)
    log: list[dict] = []
    counters = {"forwards": 0, "backwards": 0}
    max_cfg = replace(sample_subnet(space, "max"), resolution=tuple(train.resolution))
    for epoch in range(1, cfg.epochs + 1):
        rng = stream(seed, f"shuffle/{epoch}")
        roster_rng = stream(seed, f"roster/{epoch}")
        lr0 = cosine_lr(epoch - 1, cfg)
        tot, n = 0.0, 0
        for step, (x, g, f) in enumerate(train_batches(train, cfg.batch_size, rng)):
            lr = cosine_lr(epoch - 1 + step / steps, cfg)
            roster = (roster_fn(epoch, step) if roster_fn is not None
                      else sandwich_roster(space, roster_rng, train.resolution, n_random))
            store.zero_grad()
            if strategy == "sandwich":
                values = sandwich_gradients(store, roster, x, g, f, loss_cfg)
            else:
                values = inplace_gradients(store, roster[1], [roster[0]] + list(roster[2:]), x, g, f, loss_cfg)
            counters["forwards"] += len(roster)
            counters["backwards"] += len(roster)
            total = float(np.sum(values))
            _guard(total, strategy, epoch, step)
            sgd_momentum_step(store.params, velocity, lr, cfg.momentum)
            tot += values[0] * len(x)
            n += len(x)
        store.zero_grad()
        net = build_network(max_cfg, store)
        recalibrate_bn(net, train, cfg.batch_size)
        val_loss, val_cc = evaluate_loss(net, val, cfg.batch_size, loss_cfg)
        _guard(val_loss, strategy, epoch, -1)
        rec = _record(epoch, lr0, tot / n, val_loss, None, strategy, seed, val_cc=val_cc)
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec, None)
    return TrainResult(store, log, None, counters)


def train_sandwich(store: ParameterStore, train: SaliencyDataset, val: SaliencyDataset,
                   cfg: ScheduleConfig = ScheduleConfig(), seed: int = 0,
                   loss_cfg: losses.LossConfig = losses.DEFAULT, roster_fn: Callable | None = None,
                   on_epoch: Callable | None = None) -> TrainResult:
    """Per step: min, max and two random subnets, gradients summed, one update.

    ``train_loss`` in the log is the min subnet's loss; validation runs on the
    max subnet after recomputing its batch-norm statistics.
    """
    return _train_supernet("sandwich", store, train, val, cfg, seed, loss_cfg, 2, roster_fn, on_epoch)


def train_inplace_distill(store: ParameterStore, train: SaliencyDataset, val: SaliencyDataset,
                          cfg: ScheduleConfig = ScheduleConfig(), seed: int = 0,
                          loss_cfg: losses.LossConfig = losses.DEFAULT, roster_fn: Callable | None = None,
                          on_epoch: Callable | None = None) -> TrainResult:
    """Per step: the max subnet learns from the ground truth, the min and two
    random subnets learn from the max subnet's detached prediction.

    ``train_loss`` in the log is the max subnet's loss.
    """
    return _train_supernet("inplace", store, train, val, cfg, seed, loss_cfg, 2, roster_fn, on_epoch)


def schedule_trace(cfg: ScheduleConfig, steps_per_epoch: int) -> list[float]:
    """Every per-step learning rate a run with ``cfg`` would use."""
    return [cosine_lr(e + s / steps_per_epoch, cfg) for e in range(cfg.epochs) for s in range(steps_per_epoch)]


def config_dict(cfg: ScheduleConfig) -> dict:
    return asdict(cfg)
