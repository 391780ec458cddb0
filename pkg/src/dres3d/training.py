"""Losses, gradients, optimizers, the step learning-rate schedule, and training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, backward, no_grad
from .exceptions import DivergedLoss, NonFiniteGradient, ShapeMismatch
from .model import ForwardTrace, ModelConfig, ModelState, build_graph, init_state
from .samples import Sample

logger = logging.getLogger(__name__)

DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossConfig:
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    lambda_score: float = 0.5
    supervise_all_layers: bool = True

    def __post_init__(self):
        if min(self.lambda_bce, self.lambda_dice, self.lambda_score) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    layers: list[int]
    bce: list[float]
    dice: list[float]
    score: list[float]
    total: float

    def as_dict(self) -> dict:
        return {
            "bce": float(np.sum(self.bce)),
            "dice": float(np.sum(self.dice)),
            "score": float(np.sum(self.score)),
            "total": self.total,
        }


@dataclass(frozen=True)
class TrainSchedule:
    base_lr: float = 1e-4
    decay_epochs: tuple[int, ...] = (26, 34, 42)
    decay_rate: float = 0.5
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"
    max_steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_at(epoch: int, schedule: TrainSchedule) -> float:
    """Base rate times ``decay_rate`` for every decay epoch already reached."""
    n = sum(1 for e in schedule.decay_epochs if e <= epoch)
    return schedule.base_lr * schedule.decay_rate ** n


# --- losses ----------------------------------------------------------------------

def _pair(logits, gt):
    z = logits if isinstance(logits, Tensor) else Tensor(logits)
    t = np.asarray(gt, dtype=np.float64)
    if z.shape != t.shape:
        raise ShapeMismatch(f"logits {z.shape} vs targets {t.shape}")
    return z, t


def _out(x, like):
    return x if isinstance(like, Tensor) else float(x.data)


def bce_loss(logits, gt):
    """Mean binary cross-entropy on logits, in the overflow-free softplus form."""
    z, t = _pair(logits, gt)
    return _out((z.softplus() - z * t).mean(), logits)


def dice_loss(logits, gt, smooth: float = DICE_SMOOTH):
    """``1 - (2|p t| + s) / (|p| + |t| + s)`` per row, averaged over rows."""
    z, t = _pair(logits, gt)
    if z.ndim == 1:
        z, t = z.reshape(1, -1), t.reshape(1, -1)
    p = z.sigmoid()
    num = (p * t).sum(axis=-1) * 2.0 + smooth
    den = p.sum(axis=-1) + t.sum(axis=-1) + smooth
    return _out((1.0 - num / den).mean(), logits)


def mask_iou_targets(logits, gt, threshold: float = 0.0) -> np.ndarray:
    """IoU of each binarized logit row against its target row (no gradient)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    pred = z > threshold
    t = np.asarray(gt).astype(bool)
    inter = (pred & t).sum(axis=-1)
    union = (pred | t).sum(axis=-1)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def score_loss(scores, logits, gt, threshold: float = 0.0):
    """Squared error between predicted scores and the masks' actual IoU."""
    s = scores if isinstance(scores, Tensor) else Tensor(scores)
    target = mask_iou_targets(logits, gt, threshold)
    if s.shape != target.shape:
        raise ShapeMismatch(f"scores {s.shape} vs {target.shape} masks")
    return _out((s - target).square().mean(), scores)


def _supervised_layers(n_snapshots, cfg: LossConfig):
    return list(range(n_snapshots)) if cfg.supervise_all_layers else [n_snapshots - 1]


def _loss_terms(logits_list, scores_list, rows, gt_sp, cfg: LossConfig, threshold=0.0):
    layers = _supervised_layers(len(logits_list), cfg)
    bce, dice, score = [], [], []
    total = None
    for i in layers:
        z = logits_list[i][rows]
        s = scores_list[i][rows]
        lb, ld = bce_loss(z, gt_sp), dice_loss(z, gt_sp)
        ls = score_loss(s, z, gt_sp, threshold)
        bce.append(lb)
        dice.append(ld)
        score.append(ls)
        term = lb * cfg.lambda_bce + ld * cfg.lambda_dice + ls * cfg.lambda_score
        total = term if total is None else total + term
    return layers, bce, dice, score, total


def _value(x):
    return float(x.data) if isinstance(x, Tensor) else float(x)


def total_loss(trace: ForwardTrace, rows: Sequence[int], gt_superpoint, cfg: LossConfig,
               threshold: float = 0.0) -> LossBreakdown:
    """Weighted BCE + Dice + Score summed over the supervised snapshots.

    ``rows`` are the supervised query rows (phrase heads + 1, or 0 for a
    sentence target) and ``gt_superpoint`` the matching superpoint targets.
    """
    rows = np.asarray(rows, dtype=np.int64)
    layers, bce, dice, score, total = _loss_terms(
        trace.mask_logits, trace.scores, rows, np.asarray(gt_superpoint, dtype=np.float64),
        cfg, threshold)
    return LossBreakdown(layers, [_value(x) for x in bce], [_value(x) for x in dice],
                         [_value(x) for x in score], _value(total))


def sample_loss(params: dict, config: ModelConfig, sample: Sample, cfg: LossConfig,
                grad: bool = True):
    """Loss graph for one sample. Returns (total tensor, breakdown, final logits)."""
    g = build_graph(params, config, sample.token_features, pooled=sample.pooled)
    layers, bce, dice, score, total = _loss_terms(
        g.logits, g.scores, sample.rows, sample.gt_superpoint, cfg, config.binarize_threshold)
    br = LossBreakdown(layers, [_value(x) for x in bce], [_value(x) for x in dice],
                       [_value(x) for x in score], _value(total))
    return total, br, g.logits[-1].data


def loss_value(state: ModelState, samples: Sequence[Sample], cfg: LossConfig) -> float:
    """Mean total loss over ``samples`` (forward only)."""
    with no_grad():
        vals = [sample_loss(state.params, state.config, s, cfg)[1].total
                for s in _ordered(samples)]
    return float(np.sum(vals) / len(vals))


def _ordered(samples):
    return sorted(samples, key=lambda s: s.description.description_id)


def gradients(state: ModelState, samples: Sequence[Sample] | Sample, cfg: LossConfig):
    """Exact gradients of the mean total loss over ``samples``.

    Returns ``(grads, breakdowns, final_logits)`` where ``grads`` maps every
    parameter name to an array of the parameter's shape.
    """
    if isinstance(samples, Sample):
        samples = [samples]
    samples = _ordered(samples)
    grads = {k: np.zeros_like(v) for k, v in state.params.items()}
    breakdowns, finals = [], []
    scale = 1.0 / len(samples)
    for s in samples:
        leaves = {k: Tensor(v, requires_grad=True) for k, v in state.params.items()}
        total, br, final = sample_loss(leaves, state.config, s, cfg)
        if not np.isfinite(br.total):
            raise DivergedLoss(f"non-finite loss on {s.description.description_id}")
        if total.requires_grad:
            backward(total)
        for k, leaf in leaves.items():
            if leaf.grad is not None:
                grads[k] += scale * leaf.grad
        breakdowns.append(br)
        finals.append(final)
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    return grads, breakdowns, finals


# --- optimizers ------------------------------------------------------------------

class SGD:
    def __init__(self, params):
        pass

    def step(self, params: dict, grads: dict, lr: float) -> None:
        for k in params:
            params[k] -= lr * grads[k]


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


OPTIMIZERS = {"adam": Adam, "sgd": SGD}


# --- training loop --------------------------------------------------------------

def _phrase_ious(sample: Sample, final_logits, threshold) -> list[float]:
    pred = final_logits[sample.rows] > threshold
    inter = (pred * sample.gt_positive_counts).sum(axis=1)
    union = (pred * sample.sizes).sum(axis=1) + sample.gt_positive_counts.sum(axis=1) - inter
    return [1.0 if u == 0 else i / u for i, u in zip(inter, union)]


@dataclass
class TrainResult:
    state: ModelState
    log: list[dict] = field(default_factory=list)
    steps: int = 0


def train(samples: Sequence[Sample], schedule: TrainSchedule, loss_cfg: LossConfig,
          state: ModelState | ModelConfig | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Seeded mini-batch training.

    Each epoch shuffles the samples (after sorting by description id) with a
    generator seeded by ``schedule.seed``. The log holds one record per epoch:
    learning rate, mean loss components, and phrase mIoU of the predictions
    made during that epoch. Training stops early once ``max_steps`` optimizer
    steps have been taken.
    """
    if not samples:
        raise ValueError("train needs at least one sample")
    if state is None:
        state = ModelConfig()
    if isinstance(state, ModelConfig):
        state = init_state(state, schedule.seed)
    state = state.copy()
    opt = OPTIMIZERS[schedule.optimizer](state.params)
    rng = np.random.default_rng(schedule.seed)
    ordered = _ordered(samples)
    result = TrainResult(state)
    thr = state.config.binarize_threshold
    for epoch in range(schedule.epochs):
        if schedule.max_steps is not None and result.steps >= schedule.max_steps:
            break
        lr = lr_at(epoch, schedule)
        perm = rng.permutation(len(ordered))
        sums = {"bce": 0.0, "dice": 0.0, "score": 0.0, "total": 0.0}
        ious: list[float] = []
        seen = 0
        for start in range(0, len(perm), schedule.batch_size):
            if schedule.max_steps is not None and result.steps >= schedule.max_steps:
                break
            batch = [ordered[i] for i in perm[start:start + schedule.batch_size]]
            grads, brs, finals = gradients(state, batch, loss_cfg)
            for s, br, fin in zip(_ordered(batch), brs, finals):
                for key, val in br.as_dict().items():
                    sums[key] += val
                ious.extend(_phrase_ious(s, fin, thr))
            seen += len(batch)
            opt.step(state.params, grads, lr)
            result.steps += 1
        record = {"epoch": epoch, "lr": lr, "steps": result.steps}
        record.update({k: v / seen for k, v in sums.items()})
        record["miou"] = float(np.mean(ious)) if ious else float("nan")
        if not np.isfinite(record["total"]):
            raise DivergedLoss(f"non-finite loss at epoch {epoch}")
        result.log.append(record)
        logger.debug("epoch %d lr %.3g loss %.5f miou %.4f", epoch, lr, record["total"], record["miou"])
        if on_epoch is not None:
            on_epoch(record)
    return result
