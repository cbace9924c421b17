"""Training regime: domain-balanced batches, shift augmentation, Nesterov SGD with a triangular CLR."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from . import CYCLE_SAMPLES
from .features import FeatureConfig, extract_fused, fused_dim, parse_kinds
from .model import init_model, loss_and_grad, stem_correlation

log = logging.getLogger(__name__)


class TrainingDiverged(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    base_lr: float = 1e-3
    max_lr: float = 1e-2
    clr_step_size: int | None = None  # None -> 4 epochs' worth of iterations
    momentum: float = 0.9
    max_shift: int = 250
    seed: int = 0
    replacement: bool = True
    float32: bool = True

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be a positive even number (exact class balance)")
        if not 0 < self.base_lr < self.max_lr:
            raise ValueError("require 0 < base_lr < max_lr")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.max_shift < 0:
            raise ValueError("epochs and max_shift must be non-negative")


@dataclass
class BatchItem:
    index: int
    label: int
    domain: str
    shift: int


@dataclass
class BatchPlan:
    items: list[BatchItem] = field(default_factory=list)

    @property
    def indices(self):
        return [it.index for it in self.items]

    def __len__(self):
        return len(self.items)


def batches_per_epoch(n_segments: int, batch_size: int) -> int:
    return math.ceil(n_segments / batch_size)


def _cells(labels, domains):
    cells: dict[int, dict[str, np.ndarray]] = {}
    labels = np.asarray(labels)
    domains = np.asarray(domains)
    for c in np.unique(labels):
        cells[int(c)] = {
            str(d): np.flatnonzero((labels == c) & (domains == d)) for d in sorted(set(domains[labels == c].tolist()))
        }
    return cells


def dbt_batches(labels, domains, cfg: TrainConfig, epoch: int, n_classes: int = 2) -> list[BatchPlan]:
    """Class- and domain-balanced batch plans for one epoch.

    Every batch holds ``batch_size / n_classes`` draws per class. Inside a
    class the quota is spread over that class's non-empty domains so that
    cell counts differ by at most one; which cells receive the remainder
    rotates from batch to batch. Draws are uniform with replacement inside
    each cell (without replacement while a cell lasts if
    ``cfg.replacement`` is False). Deterministic in ``(cfg.seed, epoch)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    cells = _cells(labels, domains)
    for c in range(n_classes):
        if c not in cells:
            raise ValueError(f"class {c} has no segments")
    if cfg.batch_size % n_classes:
        raise ValueError("batch_size must be divisible by the number of classes")
    quota = cfg.batch_size // n_classes
    rng = np.random.default_rng([cfg.seed, epoch])
    pools = {}
    if not cfg.replacement:
        for c in range(n_classes):
            for d, idx in cells[c].items():
                pools[c, d] = list(rng.permutation(idx))
    plans = []
    for b in range(batches_per_epoch(len(labels), cfg.batch_size)):
        plan = BatchPlan()
        for c in range(n_classes):
            doms = list(cells[c])
            n = len(doms)
            base, rem = divmod(quota, n)
            start = (b * rem) % n if rem else 0
            extra = {doms[(start + i) % n] for i in range(rem)}
            for d in doms:
                k = base + (d in extra)
                if k == 0:
                    continue
                if cfg.replacement:
                    picks = rng.choice(cells[c][d], size=k, replace=True)
                else:
                    picks = []
                    for _ in range(k):
                        if not pools[c, d]:
                            pools[c, d] = list(rng.permutation(cells[c][d]))
                        picks.append(pools[c, d].pop())
                shifts = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=k) if cfg.max_shift else np.zeros(k, int)
                plan.items.extend(BatchItem(int(i), c, d, int(s)) for i, s in zip(picks, shifts))
        plans.append(plan)
    return plans


def shift_augment(samples, offset: int, max_shift: int = 250) -> np.ndarray:
    """Shift a cycle right (positive) or left (negative), zero-filling the vacated end."""
    x = np.asarray(samples)
    if abs(offset) > max_shift:
        raise ValueError(f"|offset| {abs(offset)} exceeds max_shift {max_shift}")
    out = np.zeros_like(x)
    if offset > 0:
        out[offset:] = x[: len(x) - offset]
    elif offset < 0:
        out[:offset] = x[-offset:]
    else:
        out[:] = x
    return out


def clr_lr(iteration: int, base_lr: float, max_lr: float, step_size: int) -> float:
    """Triangular cyclic learning rate with half-period ``step_size``."""
    cycle = math.floor(iteration / (2 * step_size))
    x = abs(iteration / step_size - 2 * cycle - 1)
    return base_lr + (max_lr - base_lr) * max(0.0, 1.0 - x)


def sgd_nesterov_step(params, grads, velocity, lr: float, momentum: float):
    """One Nesterov momentum update.

    ``grads`` must be evaluated at the look-ahead point
    ``params + momentum * velocity`` (see :func:`lookahead`). Then
    ``v' = momentum * v - lr * grads`` and ``params' = params + v'``.
    Parameters without a gradient (batch-norm running statistics) are
    carried over unchanged. Returns new dicts; inputs are not modified.
    """
    new_params, new_vel = dict(params), {}
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"training diverged: non-finite gradient in {name}")
        v = momentum * velocity.get(name, 0.0) - lr * g
        new_vel[name] = v
        new_params[name] = params[name] + v
    return new_params, new_vel


def lookahead(params, velocity, momentum: float):
    if momentum == 0 or not velocity:
        return params
    return {k: (v + momentum * velocity[k]) if k in velocity else v for k, v in params.items()}


@dataclass
class SegmentSet:
    """Training segments: raw 2500-sample cycles with class and domain."""

    samples: np.ndarray  # (N, 2500)
    labels: np.ndarray  # (N,) 0 normal, 1 abnormal
    domains: np.ndarray  # (N,) str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=str)
        if self.samples.ndim != 2 or self.samples.shape[1] != CYCLE_SAMPLES:
            raise ValueError(f"samples must have shape (N, {CYCLE_SAMPLES})")
        if not len(self.samples) == len(self.labels) == len(self.domains):
            raise ValueError("samples, labels and domains must align")

    def __len__(self):
        return len(self.labels)


def assemble_batch(segs: SegmentSet, plan: BatchPlan, kinds, feat_cfg: FeatureConfig, max_shift: int, dtype=np.float64):
    x = np.empty((len(plan), 1, fused_dim(kinds), feat_cfg.frame.num_frames(CYCLE_SAMPLES)), dtype=dtype)
    for row, it in enumerate(plan.items):
        shifted = shift_augment(segs.samples[it.index], it.shift, max_shift)
        x[row, 0] = extract_fused(shifted, kinds, feat_cfg)
    return x, np.array([it.label for it in plan.items], dtype=np.int64)


@dataclass
class FitResult:
    params: dict
    log: list[dict]
    best_epoch: int | None


def fit(
    segs: SegmentSet,
    kinds,
    cfg: TrainConfig = TrainConfig(),
    feat_cfg: FeatureConfig = FeatureConfig(),
    init_params: dict | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train from scratch (or from ``init_params``) and keep the lowest-loss epoch.

    Each iteration: plan a balanced batch, shift the raw cycles, extract and
    normalise features, take a Nesterov step at the CLR learning rate.
    One record per epoch (epoch, iteration, lr, loss, train_acc) is logged
    and passed to ``on_record``.
    """
    kinds = parse_kinds(kinds)
    params = init_params if init_params is not None else init_model(fused_dim(kinds), cfg.seed)
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    records: list[dict] = []
    if cfg.epochs == 0:
        return FitResult(params, records, None)
    n_batches = batches_per_epoch(len(segs), cfg.batch_size)
    step = cfg.clr_step_size or 4 * n_batches
    dtype = np.float32 if cfg.float32 else np.float64
    velocity: dict[str, np.ndarray] = {}
    best, best_loss, best_epoch = params, math.inf, None
    it = 0
    for epoch in range(cfg.epochs):
        losses, correct, seen = [], 0, 0
        lr = cfg.base_lr
        for plan in dbt_batches(segs.labels, segs.domains, cfg, epoch):
            x, y = assemble_batch(segs, plan, kinds, feat_cfg, cfg.max_shift, dtype)
            lr = clr_lr(it, cfg.base_lr, cfg.max_lr, step)
            point = lookahead(params, velocity, cfg.momentum)
            loss, grads, trace, probs = loss_and_grad(point, x, y, return_trace=True)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"training diverged: loss {loss} at iteration {it}")
            params, velocity = sgd_nesterov_step(params, grads, velocity, lr, cfg.momentum)
            for name, val in trace.running.items():
                params[name] = np.asarray(val, dtype=np.float64)
            losses.append(loss)
            correct += int((probs.argmax(axis=1) == y).sum())
            seen += len(y)
            it += 1
        rec = {
            "epoch": epoch,
            "iteration": it,
            "lr": lr,
            "loss": float(np.mean(losses)),
            "train_acc": correct / seen,
        }
        records.append(rec)
        log.info("epoch %d loss %.4f acc %.3f", epoch, rec["loss"], rec["train_acc"])
        if on_record:
            on_record(rec)
        if rec["loss"] < best_loss:
            best, best_loss, best_epoch = params, rec["loss"], epoch
    return FitResult(best, records, best_epoch)


def noise_orthogonality_stat(params, noise_features, clean_features) -> float:
    """Ratio of mean first-layer responses to noise versus clean inputs.

    ``mean_j || mean_n(F_n (x) K_j) || / mean_j || mean_c(F_c (x) K_j) ||``
    with ``(x)`` the bias-free first-layer correlation, taken before any
    normalisation or activation. Zero means the kernels cancel the noise on
    average.
    """
    noise = np.asarray(noise_features, dtype=np.float64)
    clean = np.asarray(clean_features, dtype=np.float64)
    if len(noise) == 0 or len(clean) == 0:
        raise ValueError("feature sets must be non-empty")
    gn = stem_correlation(params, noise).mean(axis=0)  # (d, T, J)
    gc = stem_correlation(params, clean).mean(axis=0)
    num = np.sqrt((gn**2).sum(axis=(0, 1))).mean()
    den = np.sqrt((gc**2).sum(axis=(0, 1))).mean()
    if den == 0:
        raise ValueError("clean features give an all-zero first-layer response")
    return float(num / den)


def lr_range_test(segs: SegmentSet, kinds, lrs: Sequence[float], cfg: TrainConfig = TrainConfig(),
                  feat_cfg: FeatureConfig = FeatureConfig(), iters_per_lr: int = 2) -> list[tuple[float, float]]:
    """Loss after a few steps at each learning rate (increasing), for picking CLR bounds."""
    kinds = parse_kinds(kinds)
    params = init_model(fused_dim(kinds), cfg.seed)
    velocity: dict = {}
    dtype = np.float32 if cfg.float32 else np.float64
    plans = dbt_batches(segs.labels, segs.domains, cfg, 0)
    out = []
    k = 0
    for lr in lrs:
        losses = []
        for _ in range(iters_per_lr):
            x, y = assemble_batch(segs, plans[k % len(plans)], kinds, feat_cfg, cfg.max_shift, dtype)
            k += 1
            loss, grads = loss_and_grad(lookahead(params, velocity, cfg.momentum), x, y)
            params, velocity = sgd_nesterov_step(params, grads, velocity, lr, cfg.momentum)
            losses.append(loss)
        out.append((float(lr), float(np.mean(losses))))
    return out


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
