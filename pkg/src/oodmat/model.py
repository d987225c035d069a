"""A small message-passing regressor with an evidential output head.

Architecture (per structure)::

    h_i    = embedding[Z_i]
    m_ij   = W_msg [h_i | h_j | rbf(d_ij)] + b_msg          for each neighbour pair
    h_i   <- h_i + tanh(W_upd mean_j(m_ij) + b_upd)          n_layers times
    g      = mean_i h_i
    g      = g * keep / (1 - rate)                           spatial dropout, optional
    raw    = W_head g + b_head                               4 values
    gamma  = raw_0
    nu     = softplus(raw_1) + 1e-6
    alpha  = softplus(raw_2) + 1 + 1e-6
    beta   = softplus(raw_3) + 1e-6

The network only sees interatomic distances, so outputs are invariant to
rigid motions; mean aggregation and pooling make them invariant to atom
order.  Gradients are computed by hand (reverse mode) and checked against
finite differences in the test suite.

Batches are disjoint unions of graphs; the segment means are sparse
matrix products, which keeps the reduction order fixed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .evidential import DEFAULT_LAMBDA, NIGParams, der_loss_grad, nll_loss, reg_loss
from .structure import MAX_Z, CrystalStructure, neighbor_list

EPS = 1e-6
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    n_layers: int = 3
    n_rbf: int = 32
    r_cut: float = 5.0
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.embed_dim, self.n_layers, self.n_rbf) < 1:
            raise ConfigError("model dimensions must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if not self.r_cut > 0:
            raise ConfigError("r_cut must be positive")


@dataclass(frozen=True)
class DropoutMask:
    keep: np.ndarray  # (embed_dim,) or (batch, embed_dim) of 0/1
    scale: float

    @classmethod
    def sample(cls, rate: float, dim: int, seed: int, index, batch: int | None = None):
        """Channel mask drawn deterministically from ``(seed, index)``.

        ``index`` is an int (inference pass number) or a tuple of ints
        (e.g. epoch and batch number during training).
        """
        key = (index,) if np.isscalar(index) else tuple(index)
        rng = np.random.default_rng([int(seed), *(int(k) for k in key)])
        shape = (dim,) if batch is None else (batch, dim)
        keep = (rng.random(shape) >= rate).astype(float)
        return cls(keep, 1.0 / (1.0 - rate))

    def factor(self) -> np.ndarray:
        return self.keep * self.scale


class Weights(dict):
    """Named parameter arrays.  Ordered; copying is deep."""

    def copy(self) -> "Weights":
        return Weights((k, v.copy()) for k, v in self.items())

    def zeros_like(self) -> "Weights":
        return Weights((k, np.zeros_like(v)) for k, v in self.items())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values()])

    def allclose(self, other, **kw) -> bool:
        return self.keys() == other.keys() and all(np.allclose(self[k], other[k], **kw) for k in self)

    def array_equal(self, other) -> bool:
        return self.keys() == other.keys() and all(np.array_equal(self[k], other[k]) for k in self)


ModelWeights = Weights


def init_weights(cfg: ModelConfig) -> Weights:
    """Gaussian initialisation scaled by 1/sqrt(fan_in); biases zero."""
    rng = np.random.default_rng(cfg.seed)
    d, k = cfg.embed_dim, cfg.n_rbf
    w = Weights()
    w["embedding"] = rng.standard_normal((MAX_Z + 1, d))
    for l in range(cfg.n_layers):
        w[f"layer{l}.msg_w"] = rng.standard_normal((2 * d + k, d)) / np.sqrt(2 * d + k)
        w[f"layer{l}.msg_b"] = np.zeros(d)
        w[f"layer{l}.upd_w"] = rng.standard_normal((d, d)) / np.sqrt(d)
        w[f"layer{l}.upd_b"] = np.zeros(d)
    w["head.w"] = rng.standard_normal((d, 4)) / np.sqrt(d)
    w["head.b"] = np.zeros(4)
    return w


def check_weights(w: Weights, cfg: ModelConfig):
    ref = init_weights(ModelConfig(**{**asdict(cfg), "seed": 0}))
    if list(w) != list(ref) or any(w[k].shape != ref[k].shape for k in ref):
        raise ConfigError("weights do not match the model configuration")
    if not all(np.all(np.isfinite(v)) for v in w.values()):
        raise ConfigError("non-finite weights")


# ---------------------------------------------------------------------------
# graphs


class Graph(NamedTuple):
    """Per-structure inputs to message passing.

    ``nbr_rows/nbr_cols/nbr_vals`` define the sparse neighbour-averaging
    operator (row i averages over the neighbour images of atom i, periodic
    copies counted with multiplicity); ``rbf_mean`` is the mean radial
    expansion over those pairs; ``has_edges`` flags atoms with neighbours.
    """

    species: np.ndarray
    nbr_rows: np.ndarray
    nbr_cols: np.ndarray
    nbr_vals: np.ndarray
    rbf_mean: np.ndarray
    has_edges: np.ndarray


def rbf_expand(d, cfg: ModelConfig) -> np.ndarray:
    mu = np.linspace(0.0, cfg.r_cut, cfg.n_rbf)
    width = cfg.r_cut / (cfg.n_rbf - 1) if cfg.n_rbf > 1 else cfg.r_cut
    return np.exp(-0.5 * ((np.asarray(d)[:, None] - mu[None, :]) / width) ** 2)


def build_graph(s: CrystalStructure, cfg: ModelConfig) -> Graph:
    if len(s) == 0:
        raise ValueError("structure has no atoms")
    n = len(s)
    nl = neighbor_list(s, cfg.r_cut)
    deg = np.bincount(nl.centers, minlength=n).astype(float)
    inv_deg = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    mean_op = sp.csr_matrix((inv_deg[nl.centers], (nl.centers, np.arange(len(nl)))), shape=(n, len(nl)))
    nbr = sp.csr_matrix((np.ones(len(nl)), (np.arange(len(nl)), nl.neighbors)), shape=(len(nl), n))
    nbr_mean = (mean_op @ nbr).tocoo()
    rbf_mean = mean_op @ rbf_expand(nl.distances, cfg) if len(nl) else np.zeros((n, cfg.n_rbf))
    return Graph(np.asarray(s.atomic_numbers), nbr_mean.row, nbr_mean.col, nbr_mean.data,
                 np.asarray(rbf_mean), (deg > 0).astype(float))


class Batch:
    """Disjoint union of graphs with block-diagonal averaging operators."""

    def __init__(self, graphs):
        graphs = list(graphs)
        if not graphs:
            raise ValueError("empty batch")
        sizes = np.array([len(g.species) for g in graphs])
        if np.any(sizes == 0):
            raise ValueError("structure has no atoms")
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.n_graphs = len(graphs)
        self.n_atoms = n = int(sizes.sum())
        self.species = np.concatenate([g.species for g in graphs])
        rows = np.concatenate([g.nbr_rows + o for g, o in zip(graphs, offsets)])
        cols = np.concatenate([g.nbr_cols + o for g, o in zip(graphs, offsets)])
        vals = np.concatenate([g.nbr_vals for g in graphs])
        self.nbr_mean = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        self.nbr_mean_t = self.nbr_mean.T.tocsr()
        self.rbf_mean = np.concatenate([g.rbf_mean for g in graphs], axis=0)
        self.has_edges = np.concatenate([g.has_edges for g in graphs])[:, None]
        graph_of = np.repeat(np.arange(self.n_graphs), sizes)
        self.pool = sp.csr_matrix((1.0 / sizes[graph_of], (graph_of, np.arange(n))), shape=(self.n_graphs, n))
        self.pool_t = self.pool.T.tocsr()


# ---------------------------------------------------------------------------
# forward / backward


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def embed(batch: Batch, w: Weights, cfg: ModelConfig, keep_trace: bool = False):
    """Message passing + mean pooling; returns pooled features (B, d) and trace.

    Messages are affine in ``[h_i | h_j | rbf_ij]``, so their mean over the
    neighbours of atom i is the same affine map applied to
    ``[h_i | mean_j h_j | mean_j rbf_ij]``; that is what is evaluated here.
    Atoms without neighbours receive a zero aggregate.
    """
    h = w["embedding"][batch.species]
    trace = {"h0": h} if keep_trace else None
    has = batch.has_edges
    for l in range(cfg.n_layers):
        x = np.concatenate([has * h, batch.nbr_mean @ h, batch.rbf_mean], axis=1)
        a = x @ w[f"layer{l}.msg_w"] + has * w[f"layer{l}.msg_b"]
        t = np.tanh(a @ w[f"layer{l}.upd_w"] + w[f"layer{l}.upd_b"])
        if keep_trace:
            trace[f"x{l}"] = x
            trace[f"a{l}"] = a
            trace[f"t{l}"] = t
        h = h + t
    pooled = batch.pool @ h
    return pooled, trace


def head(pooled, w: Weights, mask: DropoutMask | None = None):
    """Dropout + linear head + NIG transforms.  Returns (NIGParams, raw, dropped)."""
    dropped = pooled if mask is None else pooled * mask.factor()
    raw = dropped @ w["head.w"] + w["head.b"]
    params = NIGParams(
        raw[..., 0],
        _softplus(raw[..., 1]) + EPS,
        _softplus(raw[..., 2]) + 1.0 + EPS,
        _softplus(raw[..., 3]) + EPS,
    )
    return params, raw, dropped


def forward_batch(batch: Batch, w: Weights, cfg: ModelConfig, mask: DropoutMask | None = None):
    pooled, trace = embed(batch, w, cfg, keep_trace=True)
    params, raw, dropped = head(pooled, w, mask)
    trace.update(pooled=pooled, raw=raw, dropped=dropped)
    return params, trace


def forward(s: CrystalStructure, w: Weights, cfg: ModelConfig, mask: DropoutMask | None = None):
    """Single-structure forward pass: (NIGParams with scalar fields, trace)."""
    params, trace = forward_batch(Batch([build_graph(s, cfg)]), w, cfg, mask)
    return params[0], trace


def loss_and_grad(batch: Batch, y, w: Weights, cfg: ModelConfig, mask: DropoutMask | None = None,
                  lam: float = DEFAULT_LAMBDA):
    """Mean DER loss over the batch and its gradient w.r.t. every weight."""
    y = np.asarray(y, dtype=float).reshape(-1)
    params, tr = forward_batch(batch, w, cfg, mask)
    loss = float(np.mean(nll_loss(params, y) + lam * reg_loss(params, y)))

    scale = 1.0 / batch.n_graphs
    dg, dn, da, db = der_loss_grad(params, y, lam)
    raw = tr["raw"]
    draw = np.stack(
        [dg, dn * _sigmoid(raw[:, 1]), da * _sigmoid(raw[:, 2]), db * _sigmoid(raw[:, 3])], axis=1
    ) * scale

    grads = w.zeros_like()
    grads["head.w"] = tr["dropped"].T @ draw
    grads["head.b"] = draw.sum(axis=0)
    dpooled = draw @ w["head.w"].T
    if mask is not None:
        dpooled = dpooled * mask.factor()
    dh = batch.pool_t @ dpooled

    d = cfg.embed_dim
    has = batch.has_edges
    for l in reversed(range(cfg.n_layers)):
        t = tr[f"t{l}"]
        du = dh * (1.0 - t * t)
        grads[f"layer{l}.upd_w"] = tr[f"a{l}"].T @ du
        grads[f"layer{l}.upd_b"] = du.sum(axis=0)
        da = du @ w[f"layer{l}.upd_w"].T
        grads[f"layer{l}.msg_w"] = tr[f"x{l}"].T @ da
        grads[f"layer{l}.msg_b"] = (has * da).sum(axis=0)
        dx = da @ w[f"layer{l}.msg_w"].T
        dh = dh + has * dx[:, :d] + batch.nbr_mean_t @ dx[:, d:2 * d]
    np.add.at(grads["embedding"], batch.species, dh)
    return loss, grads


def backward(s: CrystalStructure, w: Weights, cfg: ModelConfig, mask: DropoutMask | None, y: float,
             lam: float = DEFAULT_LAMBDA):
    """Per-structure DER loss and weight gradients."""
    return loss_and_grad(Batch([build_graph(s, cfg)]), [y], w, cfg, mask, lam)


# ---------------------------------------------------------------------------
# checkpoints


def save_weights(w: Weights, cfg: ModelConfig, path):
    """Write an ``.npz`` checkpoint: version, config JSON, then the arrays."""
    meta = json.dumps({"version": CHECKPOINT_VERSION, "config": asdict(cfg)}, sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(meta), **{k: v for k, v in w.items()})


def load_weights(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = ModelConfig(**meta["config"])
        w = Weights((k, z[k].copy()) for k in z.files if k != "__meta__")
    check_weights(w, cfg)
    return w, cfg
