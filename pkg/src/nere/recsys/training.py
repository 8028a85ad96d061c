"""Mini-batch Adam training with early stopping on validation MSE."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from nere.errors import ConfigError, PreconditionError
from nere.neuralcore.losses import mse_loss
from nere.neuralcore.optim import AdamState, adam_step
from nere.recsys.model import NereModel, model_inputs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 40
    lr: float = 1e-3
    patience: int = 5
    validation_fraction: float = 0.1
    seed: int = 0
    early_stopping: bool = True
    train_eval_rows: int = 4096

    def validate(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch normalization)")
        if self.max_epochs < 0 or self.patience < 1 or self.lr < 0:
            raise ConfigError("max_epochs >= 0, patience >= 1 and lr >= 0 required")


def split_rows(n, fraction, seed):
    """Deterministic row split -> (kept, held_out) index arrays."""
    if n < 2:
        raise PreconditionError(f"need at least 2 rows to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_out = min(n - 1, max(1, int(round(fraction * n))))
    return np.sort(perm[n_out:]), np.sort(perm[:n_out])


def _batches(idx, batch_size):
    chunks = [idx[s:s + batch_size] for s in range(0, len(idx), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def evaluate_mse(model: NereModel, triple, rows):
    if len(rows) == 0:
        return float("nan")
    pred = model.predict(*model_inputs(model, triple, rows))
    return mse_loss(pred, triple.target[rows])


def refresh_bn_stats(model: NereModel, triple, rows, batch_size=4096):
    """Set batch-norm running moments to the exact moments over ``rows``."""
    D = model.input_width
    total = np.zeros(D)
    total_sq = np.zeros(D)
    count = 0
    for s in range(0, len(rows), batch_size):
        x = model.embed_inputs(*model_inputs(model, triple, rows[s:s + batch_size]))
        x2 = x.reshape(-1, D)
        total += x2.sum(axis=0)
        total_sq += (x2 * x2).sum(axis=0)
        count += x2.shape[0]
    mean = total / count
    model.bn.running_mean = mean
    model.bn.running_var = np.maximum(total_sq / count - mean * mean, 0.0)


def train(model: NereModel, triple, config: TrainConfig | None = None, rows=None):
    """Train ``model`` on ``triple`` (optionally restricted to ``rows``).

    Returns the per-epoch history: dicts with ``epoch``, ``train_loss``
    (mean mini-batch objective incl. L2), ``train_mse`` and ``val_mse``
    (inference-mode MSE).  The best-validation state is restored before
    returning.
    """
    config = config or TrainConfig()
    config.validate()
    all_rows = np.arange(len(triple)) if rows is None else np.asarray(rows, dtype=np.int64)
    if len(all_rows) == 0:
        raise PreconditionError("train needs non-empty tensors")
    tr_pos, va_pos = split_rows(len(all_rows), config.validation_fraction, config.seed)
    tr, va = all_rows[tr_pos], all_rows[va_pos]
    rng = np.random.default_rng([config.seed, 1])
    eval_tr = tr if len(tr) <= config.train_eval_rows else np.sort(
        np.random.default_rng([config.seed, 2]).choice(tr, config.train_eval_rows, replace=False)
    )

    adam = AdamState(lr=config.lr)
    history = []
    best = None
    best_val = np.inf
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(tr)
        losses = []
        for b in _batches(order, config.batch_size):
            model.zero_grad()
            loss, _ = model.loss_and_backward(model_inputs(model, triple, b), triple.target[b], rng=rng)
            adam_step(model.parameters(), model.gradients(), adam)
            losses.append(loss * len(b))
        refresh_bn_stats(model, triple, tr)
        rec = {
            "epoch": epoch,
            "train_loss": float(np.sum(losses) / len(tr)),
            "train_mse": evaluate_mse(model, triple, eval_tr),
            "val_mse": evaluate_mse(model, triple, va),
        }
        history.append(rec)
        log.info("epoch %d loss %.6f train %.6f val %.6f", epoch, rec["train_loss"], rec["train_mse"], rec["val_mse"])
        if rec["val_mse"] < best_val:
            best_val = rec["val_mse"]
            best = {k: v.copy() for k, v in model.state_arrays().items()}
            stale = 0
        else:
            stale += 1
            if config.early_stopping and stale >= config.patience:
                break
    if best is not None:
        model.load_state_arrays(best)
    return history
