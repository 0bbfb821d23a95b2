"""Tree ensembles that produce sample-correlation features.

* CART regression trees with exact split search (squared-error criterion).
* Logistic gradient boosting on top of them; each tree fits the residual
  ``y - sigmoid(logit)`` and its leaves hold Newton-step values.
* Leaf-path one-hot encoding: one block per tree, one bit per leaf.
* A bootstrap random forest of Gini trees whose per-tree leaf frequencies serve
  as the probability-style augmented features of the ablation study.

Trees are stored as flat node arrays; leaves are numbered 0..L-1 in preorder.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import make_rng

FORMAT_VERSION = 1
NEWTON_FLOOR = 1e-12
PROB_CLIP = 1e-7


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_loss(y: np.ndarray, logit: np.ndarray) -> float:
    """Mean logistic loss computed stably from logits."""
    logit = np.asarray(logit, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, logit) - y * logit))


@dataclass
class Tree:
    feature: np.ndarray  # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_id: np.ndarray  # -1 at internal nodes
    value: np.ndarray
    n_samples: np.ndarray
    depth: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf id reached by each row of ``X`` (``x <= threshold`` goes left)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                break
            r, n = rows[inner], node[inner]
            go_left = X[r, f[inner]] <= self.threshold[n]
            node[inner] = np.where(go_left, self.left[n], self.right[n])
        return self.leaf_id[node]

    def leaf_values(self) -> np.ndarray:
        leaves = self.feature < 0
        out = np.empty(self.n_leaves)
        out[self.leaf_id[leaves]] = self.value[leaves]
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_values()[self.apply(X)]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        ints = {"feature", "left", "right", "leaf_id", "n_samples", "depth"}
        return cls(**{k: np.asarray(d[k], dtype=np.int64 if k in ints else np.float64)
                      for k in cls.__dataclass_fields__})


# -- split search -----------------------------------------------------------

def _sse_gain(xs, ts, msl):
    """Squared-error reduction for every cut position of a sorted column."""
    n = xs.size
    total = ts.sum()
    cs = np.cumsum(ts)[:-1]
    nl = np.arange(1, n, dtype=np.float64)
    nr = n - nl
    gain = cs * cs / nl + (total - cs) ** 2 / nr - total * total / n
    valid = (xs[:-1] < xs[1:]) & (nl >= msl) & (nr >= msl)
    return np.where(valid, gain, -np.inf)


def _gini_gain(xs, ts, msl):
    """Weighted Gini decrease for every cut position (binary targets)."""
    n = xs.size
    pos = ts.sum()
    cs = np.cumsum(ts)[:-1]
    nl = np.arange(1, n, dtype=np.float64)
    nr = n - nl
    parent = 2.0 * pos * (n - pos) / n
    left = 2.0 * cs * (nl - cs) / nl
    right = 2.0 * (pos - cs) * (nr - (pos - cs)) / nr
    gain = parent - left - right
    valid = (xs[:-1] < xs[1:]) & (nl >= msl) & (nr >= msl)
    return np.where(valid, gain, -np.inf)


def _best_split(X, t, idx, features, msl, gain_fn):
    """Exact scan; ties go to the lowest feature index, then lowest threshold."""
    best_gain, best_f, best_thr = 0.0, -1, 0.0
    tol = 1e-12 * max(1.0, float(np.abs(t[idx]).sum()))
    for f in sorted(features):
        x = X[idx, f]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        gain = gain_fn(xs, t[idx][order], msl)
        if gain.size == 0:
            continue
        i = int(np.argmax(gain))
        if gain[i] > best_gain + tol:
            best_gain, best_f = float(gain[i]), f
            best_thr = 0.5 * (xs[i] + xs[i + 1])
            if best_thr >= xs[i + 1]:
                best_thr = xs[i]  # midpoint rounded up onto the right value
    return best_f, best_thr


def grow_tree(X, target, leaf_value, max_depth=8, min_samples_leaf=2,
              criterion="sse", feature_sampler=None) -> Tree:
    """Grow a CART tree depth-first.

    ``leaf_value(idx)`` gives the value stored at a leaf holding rows ``idx``.
    ``feature_sampler()`` (optional) returns the candidate features per node.
    A node becomes a leaf when it is at ``max_depth``, when its target is
    constant, or when no cut leaves ``min_samples_leaf`` rows on both sides.
    """
    X = np.asarray(X, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    gain_fn = _sse_gain if criterion == "sse" else _gini_gain
    d = X.shape[1]
    nodes: list[list] = []

    def build(idx, depth):
        node = len(nodes)
        nodes.append([-1, 0.0, -1, -1, -1, 0.0, idx.size, depth])
        t = target[idx]
        splittable = (depth < max_depth and idx.size >= 2 * min_samples_leaf
                      and t.max() > t.min())
        f = -1
        if splittable:
            feats = feature_sampler() if feature_sampler else range(d)
            f, thr = _best_split(X, target, idx, feats, min_samples_leaf, gain_fn)
        if f < 0:
            nodes[node][5] = float(leaf_value(idx))
            return node
        mask = X[idx, f] <= thr
        nodes[node][0], nodes[node][1] = f, thr
        nodes[node][2] = build(idx[mask], depth + 1)
        nodes[node][3] = build(idx[~mask], depth + 1)
        return node

    build(np.arange(X.shape[0]), 0)
    arr = list(zip(*nodes))
    tree = Tree(
        feature=np.array(arr[0], dtype=np.int64),
        threshold=np.array(arr[1], dtype=np.float64),
        left=np.array(arr[2], dtype=np.int64),
        right=np.array(arr[3], dtype=np.int64),
        leaf_id=np.full(len(nodes), -1, dtype=np.int64),
        value=np.array(arr[5], dtype=np.float64),
        n_samples=np.array(arr[6], dtype=np.int64),
        depth=np.array(arr[7], dtype=np.int64),
    )
    leaves = np.flatnonzero(tree.feature < 0)
    tree.leaf_id[leaves] = np.arange(leaves.size)
    return tree


# -- gradient boosting --------------------------------------------------------

@dataclass(frozen=True)
class GbdtConfig:
    n_trees: int | None = None  # None -> floor(d / 2)
    max_depth: int = 8
    min_samples_leaf: int = 2
    shrinkage: float = 0.1

    def resolve(self, d: int) -> "GbdtConfig":
        if self.n_trees is not None:
            return self
        return GbdtConfig(d // 2, self.max_depth, self.min_samples_leaf, self.shrinkage)


@dataclass
class GbdtModel:
    trees: list[Tree]
    shrinkage: float
    base_score: float
    config: GbdtConfig
    train_loss: list[float] = field(default_factory=list)

    @property
    def leaf_counts(self) -> list[int]:
        return [t.n_leaves for t in self.trees]

    @property
    def encoding(self) -> "LeafEncoding":
        return LeafEncoding.from_counts(self.leaf_counts)

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        z = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            z += self.shrinkage * tree.predict(X)
        return z

    def to_dict(self) -> dict:
        return {
            "format": "leaffuse-gbdt",
            "version": FORMAT_VERSION,
            "config": asdict(self.config),
            "shrinkage": self.shrinkage,
            "base_score": self.base_score,
            "train_loss": list(self.train_loss),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtModel":
        if d.get("format") != "leaffuse-gbdt" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a supported GBDT document")
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            shrinkage=float(d["shrinkage"]),
            base_score=float(d["base_score"]),
            config=GbdtConfig(**d["config"]),
            train_loss=list(d.get("train_loss", [])),
        )


def fit_gbdt(X, y, config: GbdtConfig = GbdtConfig()) -> GbdtModel:
    """Logistic-loss gradient boosting with squared-error CART base learners."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    cfg = config.resolve(X.shape[1])
    if X.shape[0] < 2 * cfg.min_samples_leaf:
        raise ValueError(f"need at least {2 * cfg.min_samples_leaf} training rows")
    p_bar = min(max(y.mean(), PROB_CLIP), 1.0 - PROB_CLIP)
    base = math.log(p_bar / (1.0 - p_bar))
    logit = np.full(X.shape[0], base)
    trees, losses = [], [log_loss(y, logit)]
    for _ in range(cfg.n_trees):
        p = sigmoid(logit)
        resid = y - p
        hess = p * (1.0 - p)

        def newton(idx, resid=resid, hess=hess):
            return resid[idx].sum() / max(hess[idx].sum(), NEWTON_FLOOR)

        tree = grow_tree(X, resid, newton, cfg.max_depth, cfg.min_samples_leaf)
        logit = logit + cfg.shrinkage * tree.predict(X)
        trees.append(tree)
        losses.append(log_loss(y, logit))
    return GbdtModel(trees, cfg.shrinkage, base, cfg, losses)


def gbdt_predict_proba(model: GbdtModel, X) -> np.ndarray | float:
    """sigmoid(base_score + shrinkage * sum of reached leaf values)."""
    single = np.ndim(X) == 1
    p = sigmoid(model.decision_function(X))
    return float(p[0]) if single else p


# -- leaf-path encoding -------------------------------------------------------

@dataclass(frozen=True)
class LeafEncoding:
    leaf_counts: tuple[int, ...]
    block_offsets: tuple[int, ...]

    @classmethod
    def from_counts(cls, counts) -> "LeafEncoding":
        counts = tuple(int(c) for c in counts)
        return cls(counts, tuple(np.concatenate([[0], np.cumsum(counts)]).astype(int).tolist()))

    @property
    def n_trees(self) -> int:
        return len(self.leaf_counts)

    @property
    def total_dim(self) -> int:
        return self.block_offsets[-1]


def leaf_indices(model: GbdtModel, X) -> np.ndarray:
    """Global one-hot positions, shape (N, T): ``block_offsets[t] + leaf_t(x)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    offsets = model.encoding.block_offsets
    if not model.trees:
        return np.zeros((X.shape[0], 0), dtype=np.int64)
    return np.stack([offsets[t] + tree.apply(X) for t, tree in enumerate(model.trees)], axis=1)


def leaf_one_hot(model: GbdtModel, X) -> np.ndarray:
    """Binary leaf-path vector(s) with exactly one 1 per tree block."""
    single = np.ndim(X) == 1
    idx = leaf_indices(model, X)
    out = np.zeros((idx.shape[0], model.encoding.total_dim), dtype=np.float64)
    np.put_along_axis(out, idx, 1.0, axis=1)
    return out[0] if single else out


def concat_augmented(x, x_aug) -> np.ndarray:
    """``[x_aug || x]`` along the last axis."""
    x, x_aug = np.asarray(x, dtype=np.float64), np.asarray(x_aug, dtype=np.float64)
    if x.shape[:-1] != x_aug.shape[:-1]:
        raise ValueError(f"batch shapes differ: {x.shape} vs {x_aug.shape}")
    return np.concatenate([x_aug, x], axis=-1)


def split_augmented(x_tilde, total_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`concat_augmented`; returns ``(x, x_aug)``."""
    x_tilde = np.asarray(x_tilde)
    if not 0 <= total_dim <= x_tilde.shape[-1]:
        raise ValueError("total_dim exceeds vector length")
    return x_tilde[..., total_dim:], x_tilde[..., :total_dim]


def export_encoding(path, model: GbdtModel, X) -> None:
    """Dump x_aug per sample as delimited text (debugging aid)."""
    enc = leaf_one_hot(model, np.atleast_2d(X)).astype(int)
    header = ",".join(f"t{t}_leaf{leaf}" for t, c in enumerate(model.leaf_counts) for leaf in range(c))
    np.savetxt(path, enc, fmt="%d", delimiter=",", header=header, comments="")


# -- random forest ------------------------------------------------------------

@dataclass(frozen=True)
class RfConfig:
    n_trees: int = 100
    max_depth: int = 8
    min_samples_leaf: int = 2
    seed: int = 0


@dataclass
class RfModel:
    trees: list[Tree]  # leaf value = class-1 frequency of the bootstrap rows there
    config: RfConfig

    def to_dict(self) -> dict:
        return {"format": "leaffuse-rf", "version": FORMAT_VERSION,
                "config": asdict(self.config), "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "RfModel":
        if d.get("format") != "leaffuse-rf":
            raise ValueError("not a supported RF document")
        return cls([Tree.from_dict(t) for t in d["trees"]], RfConfig(**d["config"]))


def fit_rf(X, y, config: RfConfig = RfConfig()) -> RfModel:
    """Bootstrap forest of Gini trees, ceil(sqrt(d)) candidate features per node."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    n, d = X.shape
    k = math.ceil(math.sqrt(d))
    rng = make_rng(config.seed, "rf")
    trees = []
    for _ in range(config.n_trees):
        boot = rng.integers(0, n, size=n)
        Xb, yb = X[boot], y[boot]
        tree = grow_tree(
            Xb, yb, lambda idx, yb=yb: yb[idx].mean(),
            config.max_depth, config.min_samples_leaf, criterion="gini",
            feature_sampler=lambda: rng.choice(d, size=k, replace=False).tolist(),
        )
        trees.append(tree)
    return RfModel(trees, config)


def rf_correlation_features(model: RfModel, X) -> np.ndarray:
    """Per-tree class-1 leaf frequency, shape (N, n_trees) (or (n_trees,) for one row)."""
    single = np.ndim(X) == 1
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.stack([t.predict(X) for t in model.trees], axis=1) if model.trees \
        else np.zeros((X.shape[0], 0))
    return out[0] if single else out


def rf_predict_proba(model: RfModel, X) -> np.ndarray:
    return rf_correlation_features(model, np.atleast_2d(X)).mean(axis=1)
