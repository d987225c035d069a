"""Training with the evidential loss and Monte Carlo dropout inference."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, TrainingError
from .evidential import DEFAULT_LAMBDA, NIGParams
from .model import Batch, DropoutMask, ModelConfig, Weights, build_graph, embed, head, init_weights, loss_and_grad
from .splitting import SplitTask
from .structure import LabeledDataset

log = logging.getLogger(__name__)

MC_PASSES = 50
INFER_CHUNK = 256


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = DEFAULT_LAMBDA
    patience: int = 30
    val_passes: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.lam < 0 or not np.isfinite(self.lam):
            raise ConfigError("lam must be finite and >= 0")


@dataclass(frozen=True)
class PassTensor:
    """NIG parameters from T stochastic passes over N samples; arrays are (T, N)."""

    gamma: np.ndarray
    nu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        arrays = [np.atleast_2d(np.asarray(getattr(self, k), dtype=float)) for k in ("gamma", "nu", "alpha", "beta")]
        if len({a.shape for a in arrays}) != 1:
            raise ValueError("pass tensor fields differ in shape")
        for name, a in zip(("gamma", "nu", "alpha", "beta"), arrays):
            bad = np.argwhere(~np.isfinite(a))
            if len(bad):
                raise DomainError(f"non-finite {name} at pass {bad[0][0]}, sample {bad[0][1]}")
            object.__setattr__(self, name, a)
        for name, a, lo in (("nu", arrays[1], 0.0), ("alpha", arrays[2], 1.0), ("beta", arrays[3], 0.0)):
            bad = np.argwhere(a <= lo)
            if len(bad):
                t, i = bad[0]
                raise DomainError(f"{name} <= {lo:g} at pass {t}, sample {i} ({a[t, i]!r})")

    @property
    def T(self) -> int:
        return self.gamma.shape[0]

    @property
    def N(self) -> int:
        return self.gamma.shape[1]

    def pass_params(self, t: int) -> NIGParams:
        return NIGParams(self.gamma[t], self.nu[t], self.alpha[t], self.beta[t])

    @classmethod
    def from_passes(cls, passes) -> "PassTensor":
        passes = list(passes)
        return cls(*(np.stack([getattr(p, k) for p in passes]) for k in ("gamma", "nu", "alpha", "beta")))


def pass_mean(a: np.ndarray) -> np.ndarray:
    """Mean over passes (axis 0), taken as an offset from pass 0 so identical passes average exactly."""
    return a[0] + (a - a[0]).mean(axis=0)


class GraphCache:
    """Lazily built graphs for the structures of one dataset."""

    def __init__(self, data: LabeledDataset, mcfg: ModelConfig):
        self.data = data
        self.mcfg = mcfg
        self._graphs = {}

    def __getitem__(self, i):
        i = int(i)
        if i not in self._graphs:
            self._graphs[i] = build_graph(self.data.structures[i], self.mcfg)
        return self._graphs[i]

    def batch(self, idx) -> Batch:
        return Batch([self[i] for i in idx])


def _check_idx(idx, n):
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if len(idx) and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"sample index out of range for dataset of size {n}")
    return idx


def pooled_features(data, idx, w, mcfg, graphs=None) -> np.ndarray:
    graphs = graphs or GraphCache(data, mcfg)
    idx = _check_idx(idx, len(data))
    parts = [embed(graphs.batch(idx[lo:lo + INFER_CHUNK]), w, mcfg)[0] for lo in range(0, len(idx), INFER_CHUNK)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, mcfg.embed_dim))


def mc_passes(pooled, w, mcfg, T, seed) -> PassTensor:
    """T dropout passes over precomputed pooled features; pass t uses mask (seed, t)."""
    if T < 1:
        raise ValueError("need T >= 1")
    out = []
    for t in range(T):
        mask = DropoutMask.sample(mcfg.dropout_rate, mcfg.embed_dim, seed, t)
        out.append(head(pooled, w, mask)[0])
    return PassTensor.from_passes(out)


def mcd_infer(data: LabeledDataset, idx, w: Weights, mcfg: ModelConfig, T: int = MC_PASSES, seed: int = 0,
              graphs=None) -> PassTensor:
    """Monte Carlo dropout inference.

    Dropout sits after pooling, so the message-passing part is evaluated
    once and only the head is repeated per pass.
    """
    if T < 1:
        raise ValueError("need T >= 1")
    return mc_passes(pooled_features(data, idx, w, mcfg, graphs), w, mcfg, T, seed)


def deterministic_infer(data: LabeledDataset, idx, w: Weights, mcfg: ModelConfig, graphs=None) -> NIGParams:
    return head(pooled_features(data, idx, w, mcfg, graphs), w, None)[0]


def _val_d_mae(pooled, y, w, mcfg, T, seed):
    passes = mc_passes(pooled, w, mcfg, T, seed)
    return float(np.mean(np.abs(pass_mean(passes.gamma) - y)))


def _mean_loss(graphs, idx, y, w, mcfg, lam):
    total = 0.0
    for lo in range(0, len(idx), INFER_CHUNK):
        part = idx[lo:lo + INFER_CHUNK]
        total += loss_and_grad(graphs.batch(part), y[part], w, mcfg, None, lam)[0] * len(part)
    return total / len(idx)


def _adam_step(w, grads, m, v, step, tcfg):
    b1, b2 = tcfg.beta1, tcfg.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for k in w:
        m[k] = b1 * m[k] + (1.0 - b1) * grads[k]
        v[k] = b2 * v[k] + (1.0 - b2) * grads[k] ** 2
        w[k] -= tcfg.learning_rate * (m[k] / c1) / (np.sqrt(v[k] / c2) + tcfg.adam_eps)


def train(data: LabeledDataset, task: SplitTask, mcfg: ModelConfig, tcfg: TrainConfig, graphs=None):
    """Mini-batch Adam on the task's train set.

    Returns ``(best_weights, history)``.  ``history`` holds one dict per
    epoch with ``epoch``, ``train_loss`` and ``val_d_mae``; epoch 0 is the
    untrained model.  The weights of the epoch with the lowest validation
    D-MAE are returned (lowest train loss when the validation set is empty).
    """
    task.check_bounds(len(data))
    train_idx = np.asarray(task.train_idx, dtype=np.int64)
    val_idx = np.asarray(task.val_idx, dtype=np.int64)
    if len(train_idx) == 0:
        raise ValueError("empty training set")
    graphs = graphs or GraphCache(data, mcfg)
    y = data.targets
    w = init_weights(mcfg)
    m, v = w.zeros_like(), w.zeros_like()

    val_batch = graphs.batch(val_idx) if len(val_idx) else None
    y_val = y[val_idx]

    def evaluate(weights, train_loss):
        if val_batch is None:
            return float("nan"), train_loss
        pooled = embed(val_batch, weights, mcfg)[0]
        score = _val_d_mae(pooled, y_val, weights, mcfg, tcfg.val_passes, tcfg.seed)
        return score, score

    init_loss = _mean_loss(graphs, train_idx, y, w, mcfg, tcfg.lam)
    val0, crit0 = evaluate(w, init_loss)
    history = [{"epoch": 0, "train_loss": init_loss, "val_d_mae": val0}]
    best_w, best_crit, best_epoch = w.copy(), crit0, 0

    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        rng = np.random.default_rng([int(tcfg.seed), epoch])
        order = rng.permutation(train_idx)
        total = 0.0
        for b, lo in enumerate(range(0, len(order), tcfg.batch_size)):
            idx = order[lo:lo + tcfg.batch_size]
            mask = None
            if mcfg.dropout_rate > 0:
                mask = DropoutMask.sample(mcfg.dropout_rate, mcfg.embed_dim, tcfg.seed, (epoch, b, 1), len(idx))
            loss, grads = loss_and_grad(graphs.batch(idx), y[idx], w, mcfg, mask, tcfg.lam)
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite in epoch {epoch}")
            step += 1
            _adam_step(w, grads, m, v, step, tcfg)
            total += loss * len(idx)
        train_loss = total / len(order)
        val, crit = evaluate(w, train_loss)
        if not np.isfinite(crit):
            raise TrainingError(f"validation metric became non-finite in epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_d_mae": val})
        if crit < best_crit:
            best_w, best_crit, best_epoch = w.copy(), crit, epoch
        elif epoch - best_epoch >= tcfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    return best_w, history


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "train_loss", "val_d_mae"])
        for row in history:
            wr.writerow([row["epoch"], repr(float(row["train_loss"])), repr(float(row["val_d_mae"]))])
