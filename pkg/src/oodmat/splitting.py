"""Out-of-distribution task generation.

Every strategy is a pure function of its inputs and seed.  Ties are always
broken by ascending sample index.  Within a task the non-test samples are
shuffled with a task-specific generator and split 4:1 into train and
validation, with ``|val| = floor(remaining / 5)``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError

STRATEGIES = ("LOCO", "SXS", "SXC", "SYS", "SYC", "SOAP-LOCO")
LOCO_DEFAULT_K = 50
N_SPARSE_TASKS = 50
N_NEIGHBORS = 10
K_DENSITY = 10
VAL_FRACTION_DENOM = 5  # train:val = 4:1


@dataclass(frozen=True)
class SplitTask:
    name: str
    train_idx: tuple
    val_idx: tuple
    test_idx: tuple

    def __post_init__(self):
        for attr in ("train_idx", "val_idx", "test_idx"):
            object.__setattr__(self, attr, tuple(int(i) for i in getattr(self, attr)))
        if not self.test_idx:
            raise ValueError(f"task {self.name}: empty test set")
        if not self.train_idx:
            raise ValueError(f"task {self.name}: empty train set")
        tr, va, te = map(set, (self.train_idx, self.val_idx, self.test_idx))
        if tr & va or tr & te or va & te:
            raise ValueError(f"task {self.name}: index sets overlap")

    def check_bounds(self, n: int):
        for idx in (self.train_idx, self.val_idx, self.test_idx):
            if idx and (min(idx) < 0 or max(idx) >= n):
                raise ValueError(f"task {self.name}: index out of range for N={n}")


@dataclass(frozen=True)
class Scenario:
    strategy: str
    tasks: tuple
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tasks)

    def task(self, name: str) -> SplitTask:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "params": self.params,
            "tasks": [
                {"name": t.name, "train": list(t.train_idx), "val": list(t.val_idx), "test": list(t.test_idx)}
                for t in self.tasks
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        tasks = tuple(SplitTask(t["name"], t["train"], t["val"], t["test"]) for t in d["tasks"])
        return cls(d["strategy"], tasks, int(d["seed"]), dict(d.get("params", {})))


def save_scenario(sc: Scenario, path):
    """Write a split manifest; output is canonical so save/load/save is byte-stable."""
    Path(path).write_text(json.dumps(sc.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_scenario(path) -> Scenario:
    try:
        return Scenario.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: bad split manifest ({exc})") from exc


# ---------------------------------------------------------------------------
# k-means


def _sqdist(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(X, k, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = _sqdist(X, X[centers])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            unused = np.setdiff1d(np.arange(n), centers)
            nxt = int(unused[0])
        centers.append(nxt)
        d2 = np.minimum(d2, _sqdist(X, X[[nxt]])[:, 0])
    return X[centers].copy()


def kmeans(X, k: int, seed: int = 0, max_iter: int = 300, return_inertia: bool = False):
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded with the point farthest from its current
    centre.  Stops once assignments no longer change.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= N={n}, got {k}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(X, k, rng)
    labels = None
    prev_inertia = np.inf
    for _ in range(max_iter):
        d2 = _sqdist(X, centers)
        new = np.argmin(d2, axis=1)
        inertia = d2[np.arange(n), new].sum()
        scale = max(abs(prev_inertia), 1.0) if np.isfinite(prev_inertia) else 1.0
        assert inertia <= prev_inertia + 1e-9 * scale, "k-means inertia increased"
        prev_inertia = inertia
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        if np.any(counts == 0):
            dist = d2[np.arange(n), labels].copy()
            for c in np.flatnonzero(counts == 0):
                dist[counts[labels] <= 1] = -np.inf  # never empty another cluster
                far = int(np.argmax(dist))  # first index on ties
                counts[labels[far]] -= 1
                labels[far] = c
                counts[c] = 1
                dist[far] = -np.inf
        centers = np.vstack([X[labels == c].mean(axis=0) for c in range(k)])
        # centre update cannot increase inertia; refresh the reference
        prev_inertia = ((X - centers[labels]) ** 2).sum()
    inertia = float(((X - centers[labels]) ** 2).sum())
    return (labels, inertia) if return_inertia else labels


# ---------------------------------------------------------------------------
# helpers


def _task_rng(seed: int, task: int):
    return np.random.default_rng([int(seed), int(task)])


def train_val_split(pool, seed: int, task: int):
    """Shuffle ``pool`` and cut it 4:1 into (train, val), both returned sorted."""
    pool = np.asarray(sorted(int(i) for i in pool), dtype=np.int64)
    perm = _task_rng(seed, task).permutation(pool)
    n_val = len(pool) // VAL_FRACTION_DENOM
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _make_task(name, test, n, seed, k):
    test = np.sort(np.asarray(test, dtype=np.int64))
    mask = np.ones(n, bool)
    mask[test] = False
    train, val = train_val_split(np.flatnonzero(mask), seed, k)
    return SplitTask(name, train, val, test)


def loco_split(X, k: int = LOCO_DEFAULT_K, seed: int = 0, strategy: str = "LOCO") -> Scenario:
    """Leave-one-cluster-out: each k-means cluster is one task's test set."""
    if k < 2:
        raise ValueError("LOCO needs k >= 2")
    X = np.asarray(X, dtype=float)
    labels = kmeans(X, k, seed)
    n = len(labels)
    tasks = []
    for c in range(k):
        test = np.flatnonzero(labels == c)
        if len(test) == 0:
            raise RuntimeError(f"cluster {c} is empty after re-seeding")
        tasks.append(_make_task(f"{strategy}-{c:03d}", test, n, seed, c))
    return Scenario(strategy, tuple(tasks), int(seed), {"k": int(k)})


def random_split(n: int, test_sizes, seed: int = 0) -> Scenario:
    """Random test sets with the given sizes; the in-distribution baseline."""
    tasks = []
    for t, size in enumerate(test_sizes):
        rng = np.random.default_rng([int(seed), 1_000_003, t])
        test = rng.choice(n, size=int(size), replace=False)
        tasks.append(_make_task(f"RANDOM-{t:03d}", test, n, seed, t))
    return Scenario("RANDOM", tuple(tasks), int(seed), {"test_sizes": [int(s) for s in test_sizes]})


def embed_2d(X) -> np.ndarray:
    """Projection onto the top two principal components.

    The sign of each axis is fixed so its largest-magnitude loading is
    positive.  Rank-deficient input gives a warning and zero columns.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2 or X.shape[0] < 3:
        raise ValueError(f"embed_2d needs N >= 3 and D >= 2, got {X.shape}")
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    tol = max(Xc.shape) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    rank = int(np.sum(s > tol)) if s[0] > 0 else 0
    out = np.zeros((len(X), 2))
    for ax in range(min(rank, 2)):
        v = vt[ax]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out[:, ax] = Xc @ v
    if rank < 2:
        warnings.warn(f"degenerate 2-D embedding (rank {rank})", stacklevel=2)
    return out


def _as_points(P):
    P = np.asarray(P, dtype=float)
    return P[:, None] if P.ndim == 1 else P


def knn_distance(P, k: int, chunk: int = 1024) -> np.ndarray:
    """Distance from each point to its k-th nearest other point."""
    P = _as_points(P)
    n = len(P)
    out = np.empty(n)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        d = np.sqrt(_sqdist(P[lo:hi], P))
        d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        out[lo:hi] = np.partition(d, k - 1, axis=1)[:, k - 1]
    return out


def nearest_neighbors(P, i: int, m: int) -> np.ndarray:
    """Indices of the m nearest other points to point i (ties: lower index first)."""
    P = _as_points(P)
    d = np.sqrt(((P - P[i]) ** 2).sum(axis=1))
    d[i] = np.inf
    return np.argsort(d, kind="stable")[:m]


def sparsest(P, n_select: int, k_density: int = K_DENSITY) -> np.ndarray:
    """Indices of the ``n_select`` lowest-density points, sparsest first."""
    score = knn_distance(P, k_density)
    order = np.lexsort((np.arange(len(score)), -score))
    return order[:n_select]


def _sparse_scenario(P, strategy, n_tasks, m_neighbors, k_density, seed):
    P = _as_points(P)
    n = len(P)
    if n_tasks < 1 or k_density < 1 or m_neighbors < 0:
        raise ValueError("n_tasks and k_density must be >= 1, m_neighbors >= 0")
    need = max(n_tasks + k_density, m_neighbors + 3)
    if n < need:
        raise ValueError(f"{strategy} needs at least {need} samples, got {n}")
    anchors = sparsest(P, n_tasks, k_density)
    tasks = []
    for t, a in enumerate(anchors):
        test = [int(a)]
        if m_neighbors:
            test += nearest_neighbors(P, int(a), m_neighbors).tolist()
        tasks.append(_make_task(f"{strategy}-{t:03d}", test, n, seed, t))
    params = {"n_tasks": int(n_tasks), "m_neighbors": int(m_neighbors), "k_density": int(k_density)}
    return Scenario(strategy, tuple(tasks), int(seed), params)


def sparse_x_single(X, n_tasks=N_SPARSE_TASKS, k_density=K_DENSITY, seed=0) -> Scenario:
    return _sparse_scenario(embed_2d(X), "SXS", n_tasks, 0, k_density, seed)


def sparse_x_cluster(X, n_tasks=N_SPARSE_TASKS, m_neighbors=N_NEIGHBORS, k_density=K_DENSITY, seed=0) -> Scenario:
    return _sparse_scenario(embed_2d(X), "SXC", n_tasks, m_neighbors, k_density, seed)


def sparse_y_single(y, n_tasks=N_SPARSE_TASKS, k_density=K_DENSITY, seed=0) -> Scenario:
    return _sparse_scenario(np.asarray(y, dtype=float).reshape(-1), "SYS", n_tasks, 0, k_density, seed)


def sparse_y_cluster(y, n_tasks=N_SPARSE_TASKS, m_neighbors=N_NEIGHBORS, k_density=K_DENSITY, seed=0) -> Scenario:
    return _sparse_scenario(np.asarray(y, dtype=float).reshape(-1), "SYC", n_tasks, m_neighbors, k_density, seed)


# ---------------------------------------------------------------------------
# cluster-count selection


def knn_regress(X_train, y_train, X_query, k: int = 5) -> np.ndarray:
    """Inverse-distance weighted k-nearest-neighbour regression.

    Queries that coincide with training points take the mean target of the
    coincident points.
    """
    X_train = _as_points(X_train)
    X_query = _as_points(X_query)
    y_train = np.asarray(y_train, dtype=float)
    k = min(k, len(X_train))
    d = np.sqrt(_sqdist(X_query, X_train))
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    dn = np.take_along_axis(d, nn, axis=1)
    yn = y_train[nn]
    out = np.empty(len(X_query))
    zero = dn <= 0.0
    exact = zero.any(axis=1)
    out[exact] = [yn[i][zero[i]].mean() for i in np.flatnonzero(exact)]
    w = 1.0 / np.where(zero, 1.0, dn)
    rest = ~exact
    out[rest] = (w[rest] * yn[rest]).sum(1) / w[rest].sum(1)
    return out


def proxy_fold_mae(X, y, scenario: Scenario, k_neighbors: int = 5) -> np.ndarray:
    """Per-task test MAE of the k-NN proxy fitted on each task's train set."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    maes = []
    for t in scenario.tasks:
        tr, te = list(t.train_idx), list(t.test_idx)
        pred = knn_regress(X[tr], y[tr], X[te], k_neighbors)
        maes.append(float(np.mean(np.abs(pred - y[te]))))
    return np.array(maes)


def optimize_cluster_count(X, y, candidates, seed: int = 0, k_neighbors: int = 5, return_scores: bool = False):
    """Cluster count whose LOCO folds give the highest mean proxy MAE.

    Candidates larger than N are skipped with a warning; ties go to the
    smallest k.
    """
    X = np.asarray(X, dtype=float)
    cands = sorted(set(int(k) for k in candidates))
    if not cands:
        raise ValueError("no candidate cluster counts")
    if min(cands) < 2:
        raise ValueError("candidate cluster counts must be >= 2")
    scores = {}
    for k in cands:
        if k > len(X):
            warnings.warn(f"skipping k={k} > N={len(X)}", stacklevel=2)
            continue
        sc = loco_split(X, k, seed)
        scores[k] = float(np.mean(proxy_fold_mae(X, y, sc, k_neighbors)))
    if not scores:
        raise ValueError("every candidate exceeds the dataset size")
    best = max(scores.values())
    k_best = min(k for k, v in scores.items() if v == best)
    return (k_best, scores) if return_scores else k_best


def make_scenario(strategy: str, X=None, y=None, seed: int = 0, k: int | None = None,
                  n_tasks: int = N_SPARSE_TASKS, m_neighbors: int = N_NEIGHBORS,
                  k_density: int = K_DENSITY) -> Scenario:
    """Dispatch on the strategy name."""
    if strategy in ("LOCO", "SOAP-LOCO"):
        return loco_split(X, LOCO_DEFAULT_K if k is None else k, seed, strategy)
    if strategy == "SXS":
        return sparse_x_single(X, n_tasks, k_density, seed)
    if strategy == "SXC":
        return sparse_x_cluster(X, n_tasks, m_neighbors, k_density, seed)
    if strategy == "SYS":
        return sparse_y_single(y, n_tasks, k_density, seed)
    if strategy == "SYC":
        return sparse_y_cluster(y, n_tasks, m_neighbors, k_density, seed)
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
