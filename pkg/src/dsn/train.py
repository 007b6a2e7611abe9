"""MSE loss, Adam with decoupled weight decay, the training loop and
evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import metrics
from .autodiff import GradTape, Tensor
from .data import Dataset, make_batch
from .errors import ConfigError, DataError, NumericError
from .model import ModelConfig, init_params, model_forward


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 64  # desk-scale default; the reference setting is 512
    seed: int = 13
    patience: Optional[int] = None  # early stopping off by default

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=float)
    if pred.data.shape != target.shape:
        raise DataError(f"mse_loss shapes disagree: {pred.data.shape} vs {target.shape}")
    if target.size == 0:
        raise DataError("mse_loss of an empty batch is undefined")
    diff = ad.sub(pred, ad.constant(target))
    return ad.reduce_mean(ad.mul(diff, diff))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params: dict[str, Tensor], state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam update with decoupled additive weight decay."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = ADAM_BETA1 * state.m[name] + (1 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1 - ADAM_BETA2) * g * g
        m_hat = state.m[name] / (1 - ADAM_BETA1 ** t)
        v_hat = state.v[name] / (1 - ADAM_BETA2 ** t)
        p.data = (p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
                  - cfg.lr * cfg.weight_decay * p.data)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_mae: float
    val_src: float


@dataclass
class TrainResult:
    params: dict[str, Tensor]       # best-val-MAE parameters
    final_params: dict[str, Tensor]
    log: list[EpochLog]
    best_epoch: int


@dataclass
class EvalResult:
    mae: float
    src: Optional[float]
    predictions: np.ndarray
    labels: np.ndarray
    post_ids: list[str]
    attention: np.ndarray  # [n, heads, l-1]


def _clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: ad.parameter(v.data.copy(), k) for k, v in params.items()}


def evaluate(params: dict[str, Tensor], mcfg: ModelConfig, dataset: Dataset,
             split: range, batch_size: int = 256) -> EvalResult:
    """Eval-mode forward over one split; deterministic given params."""
    idx = list(split)
    preds, labels, ids, attn = [], [], [], []
    for lo in range(0, len(idx), batch_size):
        chunk = idx[lo:lo + batch_size]
        batch = make_batch(dataset.posts, [dataset.windows[i] for i in chunk],
                           dataset.img, dataset.txt, dataset.stats)
        out = model_forward(batch, params, mcfg, mode="eval")
        preds.append(out.predictions.data)
        labels.append(batch.labels)
        ids.extend(batch.post_ids)
        attn.append(out.attention)
    preds = np.concatenate(preds)
    labels = np.concatenate(labels)
    attn = np.concatenate(attn) if attn else np.zeros((0, mcfg.heads, 0))
    m = metrics.mae(preds, labels)
    try:
        s = metrics.src(preds, labels)
    except DataError:
        s = None  # constant predictions: SRC undefined, reported as missing
    return EvalResult(m, s, preds, labels, ids, attn)


def train(mcfg: ModelConfig, tcfg: TrainConfig, dataset: Dataset,
          log_fn=None) -> TrainResult:
    """Seed-deterministic training; retains the best-val-MAE checkpoint."""
    rng = np.random.default_rng(tcfg.seed)
    params = init_params(mcfg, seed=tcfg.seed)
    state = AdamState()
    train_idx = np.array(dataset.train_idx)
    log: list[EpochLog] = []
    best_mae = np.inf
    best_params = _clone_params(params)
    best_epoch = 0
    bad_epochs = 0

    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(train_idx)
        losses = []
        for lo in range(0, order.size, tcfg.batch_size):
            chunk = order[lo:lo + tcfg.batch_size]
            batch = make_batch(dataset.posts, [dataset.windows[i] for i in chunk],
                               dataset.img, dataset.txt, dataset.stats)
            for p in params.values():
                p.zero_grad()
            with GradTape() as tape:
                out = model_forward(batch, params, mcfg, mode="train", rng=rng)
                loss = mse_loss(out.predictions, batch.labels)
                tape.backward(loss)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            adam_step(params, state, tcfg)
            losses.append(float(loss.data))
        val = evaluate(params, mcfg, dataset, dataset.val_idx)
        row = EpochLog(epoch, float(np.mean(losses)), val.mae,
                       val.src if val.src is not None else float("nan"))
        log.append(row)
        if log_fn:
            log_fn(row)
        if val.mae < best_mae:
            best_mae = val.mae
            best_params = _clone_params(params)
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if tcfg.patience is not None and bad_epochs >= tcfg.patience:
                break
    return TrainResult(best_params, params, log, best_epoch)


def mean_predictor_mae(dataset: Dataset, split: range) -> float:
    """Baseline: predict the training-split mean popularity everywhere.
    SRC is undefined for the constant prediction and is not reported."""
    from .data import normalize_popularity
    train_labels = np.array([normalize_popularity(dataset.posts[i].r, dataset.posts[i].d)
                             for i in dataset.train_idx])
    split_labels = np.array([normalize_popularity(dataset.posts[i].r, dataset.posts[i].d)
                             for i in split])
    return metrics.mae(np.full(split_labels.size, train_labels.mean()), split_labels)
