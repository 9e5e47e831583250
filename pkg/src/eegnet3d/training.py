"""Optimizer, LR schedule, training loop, metrics, and the ablation harness."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalError
from .models import BinaryConv3d, LayerGraph, ModelConfig, build_model, count_params, memory_bits
from .ops import LossConfig, cross_entropy_smoothed
from .tensor import Rng


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_milestones: tuple[int, ...] = (75,)
    lr_gamma: float = 0.5
    label_smoothing: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if any(m >= self.epochs or m < 0 for m in self.lr_milestones):
            raise ValueError(f"milestones {self.lr_milestones} must lie inside [0, {self.epochs})")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0,1)")


# Paper-scale defaults vs a desk-scale profile that finishes in minutes on a
# laptop. The desk milestone keeps the same 3/4-of-training decay point.
PAPER_PROFILE = TrainConfig()
DESK_PROFILE = TrainConfig(epochs=30, batch_size=64, lr_milestones=(22,))


def profile_config(name: str, binary_model: bool, seed: int = 0, **overrides) -> TrainConfig:
    base = {"paper": PAPER_PROFILE, "desk": DESK_PROFILE}[name]
    smoothing = 0.1 if binary_model else 0.0
    return replace(base, label_smoothing=smoothing, seed=seed, **overrides)


def multistep_lr(epoch: int, cfg: TrainConfig) -> float:
    """Initial LR decayed by gamma at every passed milestone."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    passed = sum(1 for m in cfg.lr_milestones if epoch >= m)
    return cfg.learning_rate * cfg.lr_gamma**passed


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on (param, m, v). t is 1-based."""
    if param.shape != grad.shape:
        raise ValueError(f"param shape {param.shape} != grad shape {grad.shape}")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    param -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype)
    return param, m, v


class Adam:
    """Adam over all graph parameters, keyed by (layer, param) name."""

    def __init__(self, graph: LayerGraph, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.slots = {
            (layer.name, pname): (np.zeros_like(arr, dtype=np.float64),
                                  np.zeros_like(arr, dtype=np.float64))
            for layer, pname, arr in graph.param_items()
        }
        self._params = {
            (layer.name, pname): arr for layer, pname, arr in graph.param_items()
        }

    def step(self, grads: dict[tuple[str, str], np.ndarray], lr: float):
        self.t += 1
        for key, g in grads.items():
            m, v = self.slots[key]
            adam_step(self._params[key], g.astype(np.float64), m, v, self.t, lr,
                      self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    """Binary-classification metrics; the positive class is label 1."""

    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_predictions(cls, predicted: np.ndarray, actual: np.ndarray) -> "Metrics":
        predicted = np.asarray(predicted)
        actual = np.asarray(actual)
        if predicted.shape != actual.shape or predicted.size == 0:
            raise ValueError("predictions and labels must be equal-length and non-empty")
        return cls(
            tp=int(np.sum((predicted == 1) & (actual == 1))),
            fp=int(np.sum((predicted == 1) & (actual == 0))),
            fn=int(np.sum((predicted == 0) & (actual == 1))),
            tn=int(np.sum((predicted == 0) & (actual == 0))),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def precision(self) -> float:
        denom = self.tp + self.fp
        return self.tp / denom if denom else 0.0

    @property
    def recall(self) -> float:
        denom = self.tp + self.fn
        return self.tp / denom if denom else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if (p + r) else 0.0

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn},
        }


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def _model_input(x: np.ndarray) -> np.ndarray:
    return x[:, None] if x.ndim == 4 else x


def evaluate(graph: LayerGraph, x: np.ndarray, y: np.ndarray, batch_size: int = 256,
             loss_cfg: LossConfig | None = None) -> tuple[Metrics, float | None]:
    """Eval-mode metrics over a labeled chunk set; optionally the mean loss."""
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = np.empty(len(x), dtype=np.int64)
    total_loss = 0.0
    for sl in _batches(len(x), batch_size):
        logits, _ = graph.forward(_model_input(x[sl]), mode="eval")
        preds[sl] = np.argmax(logits, axis=1)
        if loss_cfg is not None:
            loss, _ = cross_entropy_smoothed(logits, y[sl], loss_cfg)
            total_loss += loss * (sl.stop - sl.start)
    mean_loss = total_loss / len(x) if loss_cfg is not None else None
    return Metrics.from_predictions(preds, np.asarray(y)), mean_loss


def split_train_val(x: np.ndarray, y: np.ndarray, val_fraction: float = 0.2,
                    seed: int = 0, subjects: np.ndarray | None = None):
    """Chunk-level random split (the default protocol); optional subject-level split."""
    n = len(x)
    rng = Rng(seed).child(97)
    if subjects is None:
        order = rng.permutation(n)
        n_val = int(round(n * val_fraction))
        val_idx, train_idx = order[:n_val], order[n_val:]
    else:
        uniq = np.unique(subjects)
        order = rng.permutation(len(uniq))
        n_val = max(1, int(round(len(uniq) * val_fraction)))
        val_subj = set(uniq[order[:n_val]].tolist())
        mask = np.array([s in val_subj for s in subjects])
        val_idx, train_idx = np.flatnonzero(mask), np.flatnonzero(~mask)
    train_idx = np.sort(train_idx)
    val_idx = np.sort(val_idx)
    return (x[train_idx], y[train_idx]), (x[val_idx], y[val_idx])


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    log: list[dict]
    best_epoch: int
    best_val_accuracy: float
    best_state: dict[tuple[str, str], np.ndarray]
    graph: LayerGraph

    def restore_best(self) -> LayerGraph:
        for key, arr in _state_arrays(self.graph):
            arr[...] = self.best_state[key]
        self.graph.refresh_binary()
        return self.graph


def _state_arrays(graph: LayerGraph):
    """Learnable parameters plus BN running statistics (eval behavior buffers)."""
    for layer, pname, arr in graph.param_items():
        yield (layer.name, pname), arr
    for layer in graph.layers:
        if hasattr(layer, "state") and hasattr(layer.state, "running_mean"):
            yield (layer.name, "running_mean"), layer.state.running_mean
            yield (layer.name, "running_var"), layer.state.running_var


def _snapshot(graph: LayerGraph) -> dict[tuple[str, str], np.ndarray]:
    return {key: arr.copy() for key, arr in _state_arrays(graph)}


def train(graph: LayerGraph, train_data, val_data, cfg: TrainConfig) -> TrainResult:
    """Seed-deterministic training with per-epoch validation and best-state tracking."""
    x_train, y_train = train_data
    x_val, y_val = val_data
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("train() needs non-empty train and validation sets")
    y_train = np.asarray(y_train, dtype=np.int64)
    y_val = np.asarray(y_val, dtype=np.int64)

    num_classes = graph.meta["config"].num_classes if "config" in graph.meta else 2
    loss_cfg = LossConfig(cfg.label_smoothing, num_classes)
    opt = Adam(graph, cfg)
    rng = Rng(cfg.seed)
    binary_layers = [l for l in graph.layers if isinstance(l, BinaryConv3d)]

    log: list[dict] = []
    best = (-1.0, np.inf, -1)  # (val acc, val loss, epoch); higher acc then lower loss wins
    best_state = _snapshot(graph)

    for epoch in range(cfg.epochs):
        lr = multistep_lr(epoch, cfg)
        order = rng.child(1, epoch).permutation(len(x_train))
        epoch_loss = 0.0
        correct = 0
        for step, sl in enumerate(_batches(len(x_train), cfg.batch_size)):
            idx = order[sl.start : sl.stop]
            xb = _model_input(x_train[idx])
            yb = y_train[idx]
            logits, ctx = graph.forward(xb, mode="train", rng=rng.child(2, epoch, step))
            loss, grad = cross_entropy_smoothed(logits, yb, loss_cfg)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"loss became non-finite at epoch {epoch} step {step} (lr={lr})"
                )
            epoch_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == yb))
            pgrads = graph.backward(grad, ctx)
            opt.step(pgrads, lr)
            for layer in binary_layers:
                np.clip(layer.latent, -1, 1, out=layer.latent)
                layer.refresh()
        val_metrics, val_loss = evaluate(graph, x_val, y_val, cfg.batch_size, loss_cfg)
        entry = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": epoch_loss / len(x_train),
            "train_accuracy": correct / len(x_train),
            "val_loss": val_loss,
            **{f"val_{k}": v for k, v in val_metrics.as_dict().items()},
        }
        log.append(entry)
        key = (val_metrics.accuracy, -val_loss, epoch)
        if (key[0], key[1]) > (best[0], -best[1]):
            best = (val_metrics.accuracy, val_loss, epoch)
            best_state = _snapshot(graph)
    return TrainResult(
        log=log,
        best_epoch=best[2],
        best_val_accuracy=best[0],
        best_state=best_state,
        graph=graph,
    )


# ---------------------------------------------------------------------------
# Ablation harness: the three binarization techniques, all 8 combinations
# ---------------------------------------------------------------------------

ABLATION_VARIANTS: tuple[tuple[str, dict], ...] = (
    ("plain", dict(real_shortcuts=False, channel_wise_alpha=False, last_stage_tuning=False)),
    ("1", dict(real_shortcuts=True, channel_wise_alpha=False, last_stage_tuning=False)),
    ("2", dict(real_shortcuts=False, channel_wise_alpha=True, last_stage_tuning=False)),
    ("3", dict(real_shortcuts=False, channel_wise_alpha=False, last_stage_tuning=True)),
    ("1&2", dict(real_shortcuts=True, channel_wise_alpha=True, last_stage_tuning=False)),
    ("1&3", dict(real_shortcuts=True, channel_wise_alpha=False, last_stage_tuning=True)),
    ("2&3", dict(real_shortcuts=False, channel_wise_alpha=True, last_stage_tuning=True)),
    ("1&2&3", dict(real_shortcuts=True, channel_wise_alpha=True, last_stage_tuning=True)),
)


def ablation_suite(base_cfg: ModelConfig, train_data, val_data, train_cfg: TrainConfig,
                   model_seed: int = 0) -> list[dict]:
    """Train all 8 technique combinations plus the full-precision reference."""
    if not base_cfg.binary:
        raise ValueError("ablation_suite expects a binary base config")
    rows = []
    plain_acc = None
    for label, flags in ABLATION_VARIANTS:
        cfg = replace(base_cfg, **flags)
        graph = build_model(cfg, seed=model_seed)
        result = train(graph, train_data, val_data, train_cfg)
        acc = result.best_val_accuracy
        if label == "plain":
            plain_acc = acc
        real, bin_ = count_params(graph)
        rows.append(
            {
                "variant": label,
                "flags": flags,
                "val_accuracy": acc,
                "delta_vs_plain": acc - plain_acc,
                "real_params": real,
                "binary_params": bin_,
                "memory_mbits": memory_bits(real, bin_),
            }
        )
    fp_cfg = replace(base_cfg, binary=False)
    graph = build_model(fp_cfg, seed=model_seed)
    fp_train_cfg = replace(train_cfg, label_smoothing=0.0)
    result = train(graph, train_data, val_data, fp_train_cfg)
    real, bin_ = count_params(graph)
    rows.append(
        {
            "variant": "full-precision",
            "flags": {},
            "val_accuracy": result.best_val_accuracy,
            "delta_vs_plain": None,
            "real_params": real,
            "binary_params": bin_,
            "memory_mbits": memory_bits(real, bin_),
        }
    )
    return rows
