"""Feature-aware interaction module.

Each augmented dimension ``i`` owns an embedding ``h_i`` and a linear weight
vector ``w_i`` (both length ``p``). For a sample with augmented vector ``x``::

    h_aug = sum_i w_i x_i + sum_{i<j} a_ij (h_i * h_j) x_i x_j
    a'_ij = q . relu(W_attn (h_i * h_j) x_i x_j + b_attn)
    a_ij  = softmax of a'_ij over the pairs with x_i x_j != 0

Batches are handled in padded form: every sample's non-zero positions are
packed into ``K`` slots and the ``K(K-1)/2`` slot pairs are enumerated once.
Padding slots carry value 0 and are masked out of the softmax.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
import scipy.sparse as sp

from .rng import make_rng

PARAM_NAMES = ("emb", "lin", "w_attn", "b_attn", "q")


@dataclass
class FaimParams:
    emb: np.ndarray  # (D, p) interaction embeddings h_i
    lin: np.ndarray  # (D, p) linear weights w_i
    w_attn: np.ndarray  # (p, p)
    b_attn: np.ndarray  # (p,)
    q: np.ndarray  # (p,)

    @classmethod
    def init(cls, total_dim: int, p: int = 8, seed: int = 0, std: float = 0.1) -> "FaimParams":
        rng = make_rng(seed, "faim-init")
        return cls(
            emb=rng.normal(0.0, std, (total_dim, p)),
            lin=rng.normal(0.0, std, (total_dim, p)),
            w_attn=rng.normal(0.0, std, (p, p)),
            b_attn=np.zeros(p),
            q=rng.normal(0.0, std, p),
        )

    @property
    def total_dim(self) -> int:
        return self.emb.shape[0]

    @property
    def p(self) -> int:
        return self.emb.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "FaimParams":
        return FaimParams(**{k: v.copy() for k, v in self.arrays().items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays().values())

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in self.arrays().items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FaimParams":
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in PARAM_NAMES})


@dataclass(frozen=True)
class InteractionSet:
    active: list[int]
    pairs: list[tuple[int, int]]


def active_pairs(x_aug) -> InteractionSet:
    """Non-zero positions of one augmented vector and all their unordered pairs."""
    active = np.flatnonzero(np.asarray(x_aug)).tolist()
    return InteractionSet(active, list(combinations(active, 2)))


class ActiveBatch:
    """Padded active-index view of a batch of augmented vectors.

    Build it once per fixed batch; it holds the pair enumeration and the sparse
    scatter matrices used to accumulate embedding gradients.
    """

    def __init__(self, idx: np.ndarray, val: np.ndarray, total_dim: int):
        idx = np.asarray(idx, dtype=np.int64)
        val = np.asarray(val, dtype=np.float64)
        n, k = idx.shape
        self.n, self.k, self.total_dim = n, k, total_dim
        self.idx, self.val = idx, val
        self.mask = val != 0
        slot_pairs = np.array(list(combinations(range(k), 2)), dtype=np.int64).reshape(-1, 2)
        a, b = slot_pairs[:, 0], slot_pairs[:, 1]
        self.pi, self.pj = idx[:, a], idx[:, b]
        self.c = val[:, a] * val[:, b]  # x_i x_j
        self.pmask = self.mask[:, a] & self.mask[:, b]
        self.n_pairs = self.pmask.sum(axis=1)
        self._lin_scatter = self._scatter(idx, self.mask)
        self._pi_scatter = self._scatter(self.pi, self.pmask)
        self._pj_scatter = self._scatter(self.pj, self.pmask)

    def _scatter(self, index, mask):
        rows = index[mask]
        cols = np.flatnonzero(mask.ravel())
        return sp.csr_matrix((np.ones(rows.size), (rows, cols)),
                             shape=(self.total_dim, mask.size))

    @classmethod
    def from_dense(cls, x_aug) -> "ActiveBatch":
        x_aug = np.atleast_2d(np.asarray(x_aug, dtype=np.float64))
        n, dim = x_aug.shape
        counts = (x_aug != 0).sum(axis=1)
        k = int(counts.max()) if n else 0
        idx = np.zeros((n, k), dtype=np.int64)
        val = np.zeros((n, k))
        for r in range(n):
            nz = np.flatnonzero(x_aug[r])
            idx[r, :nz.size] = nz
            val[r, :nz.size] = x_aug[r, nz]
        return cls(idx, val, dim)

    @classmethod
    def from_leaf_indices(cls, leaf_idx, total_dim: int) -> "ActiveBatch":
        """Fast path for one-hot leaf encodings: every slot is active with value 1."""
        leaf_idx = np.asarray(leaf_idx, dtype=np.int64)
        return cls(leaf_idx, np.ones(leaf_idx.shape), total_dim)

    def scatter_linear(self, rows: np.ndarray) -> np.ndarray:
        return self._lin_scatter @ rows.reshape(-1, rows.shape[-1])

    def scatter_pairs(self, left: np.ndarray, right: np.ndarray) -> np.ndarray:
        p = left.shape[-1]
        return self._pi_scatter @ left.reshape(-1, p) + self._pj_scatter @ right.reshape(-1, p)


@dataclass
class FaimCache:
    batch: ActiveBatch
    prod: np.ndarray  # (N, P, p) h_i * h_j
    pre: np.ndarray  # (N, P, p) attention pre-activation
    logits: np.ndarray  # (N, P), 0 at masked pairs
    weights: np.ndarray  # (N, P), 0 at masked pairs
    h_aug: np.ndarray  # (N, p)


@dataclass(frozen=True)
class AttentionWeights:
    logits: np.ndarray
    weights: np.ndarray
    mask: np.ndarray


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True, initial=-np.inf)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(z - zmax), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def faim_forward_batch(params: FaimParams, batch: ActiveBatch) -> FaimCache:
    h_lin = np.einsum("nk,nkp->np", batch.val * batch.mask, params.lin[batch.idx])
    prod = params.emb[batch.pi] * params.emb[batch.pj]
    c = batch.c[..., None]
    pre = (prod * c) @ params.w_attn.T + params.b_attn
    logits = np.maximum(pre, 0.0) @ params.q
    logits = np.where(batch.pmask, logits, 0.0)
    weights = masked_softmax(logits, batch.pmask)
    h_aug = h_lin + np.einsum("nq,nqp->np", weights * batch.c, prod)
    return FaimCache(batch, prod, pre, logits, weights, h_aug)


def attention(cache: FaimCache) -> AttentionWeights:
    return AttentionWeights(cache.logits, cache.weights, cache.batch.pmask)


def faim_forward(params: FaimParams, x_aug) -> np.ndarray:
    """h_aug for one vector or a batch of augmented vectors."""
    single = np.ndim(x_aug) == 1
    h = faim_forward_batch(params, ActiveBatch.from_dense(x_aug)).h_aug
    return h[0] if single else h


def attention_forward(params: FaimParams, pairs: InteractionSet | list[tuple[int, int]],
                      x_aug=None) -> AttentionWeights:
    """Attention logits and softmax weights over an explicit pair list.

    ``x_aug`` supplies the ``x_i x_j`` factors; without it every listed pair is
    treated as active with factor 1.
    """
    plist = pairs.pairs if isinstance(pairs, InteractionSet) else list(pairs)
    if not plist:
        raise ValueError("attention needs at least one active pair")
    i, j = np.array(plist).T
    c = np.ones(len(plist)) if x_aug is None else np.asarray(x_aug, float)[i] * np.asarray(x_aug, float)[j]
    prod = params.emb[i] * params.emb[j]
    logits = np.maximum((prod * c[:, None]) @ params.w_attn.T + params.b_attn, 0.0) @ params.q
    mask = c != 0
    return AttentionWeights(logits, masked_softmax(logits, mask), mask)


def sparse_penalty(weights: AttentionWeights | FaimCache, mode: str = "logit_l1") -> float:
    """L1 sparsity term summed over samples and active pairs.

    ``literal`` penalizes the softmax outputs (always 1 per sample with a
    pair); ``logit_l1`` penalizes the pre-softmax logits.
    """
    if isinstance(weights, FaimCache):
        weights = attention(weights)
    mask = weights.mask
    if mode == "literal":
        return float(np.abs(np.where(mask, weights.weights, 0.0)).sum())
    if mode == "logit_l1":
        return float(np.abs(np.where(mask, weights.logits, 0.0)).sum())
    raise ValueError(f"unknown sparse mode {mode!r}")


def faim_backward(params: FaimParams, cache: FaimCache, grad_h: np.ndarray,
                  sparse_scale: float = 0.0, sparse_mode: str = "logit_l1") -> dict[str, np.ndarray]:
    """Exact gradients of ``<grad_h, h_aug> + sparse_scale * sparse_penalty``.

    ReLU'(0) and sign(0) are taken as 0.
    """
    b = cache.batch
    pm = b.pmask
    grad_h = np.asarray(grad_h, dtype=np.float64)
    g_w = np.einsum("np,nqp->nq", grad_h, cache.prod) * b.c
    a = cache.weights
    tot = a.sum(axis=1, keepdims=True)
    gbar = np.divide((a * g_w).sum(axis=1, keepdims=True), tot,
                     out=np.zeros_like(tot), where=tot > 0)
    g_logit = a * (g_w - gbar)
    if sparse_scale and sparse_mode == "literal":
        # d/da_k sum|a| = sign(a_k); pushed through the softmax as
        # a_k * sum_j a_j (s_k - s_j), which is exactly 0 for constant s.
        s = np.sign(a) * pm
        diff = s[:, :, None] - s[:, None, :]
        g_logit = g_logit + sparse_scale * a * np.einsum("nj,nkj->nk", a, diff)
    elif sparse_scale and sparse_mode == "logit_l1":
        g_logit = g_logit + sparse_scale * np.sign(cache.logits) * pm
    g_logit = np.where(pm, g_logit, 0.0)

    act = np.maximum(cache.pre, 0.0)
    g_q = np.einsum("nq,nqp->p", g_logit, act)
    g_pre = g_logit[..., None] * params.q * (cache.pre > 0)
    c = b.c[..., None]
    g_w_attn = np.einsum("nqi,nqj->ij", g_pre, cache.prod * c)
    g_b_attn = g_pre.sum(axis=(0, 1))
    g_prod = (g_pre @ params.w_attn) * c + (a * b.c)[..., None] * grad_h[:, None, :]
    g_prod = g_prod * pm[..., None]
    g_emb = b.scatter_pairs(g_prod * params.emb[b.pj], g_prod * params.emb[b.pi])
    g_lin = b.scatter_linear((b.val * b.mask)[..., None] * grad_h[:, None, :])
    return {"emb": g_emb, "lin": g_lin, "w_attn": g_w_attn, "b_attn": g_b_attn, "q": g_q}


def faim_gradients(params: FaimParams, batch, upstream, sparse_scale: float = 0.0,
                   sparse_mode: str = "logit_l1") -> dict[str, np.ndarray]:
    """Forward + backward in one call; ``batch`` is a dense x_aug matrix or an ActiveBatch."""
    if not isinstance(batch, ActiveBatch):
        batch = ActiveBatch.from_dense(batch)
    cache = faim_forward_batch(params, batch)
    return faim_backward(params, cache, np.atleast_2d(upstream), sparse_scale, sparse_mode)


def pair_weight_matrix(cache: FaimCache) -> np.ndarray:
    """Sum of a_ij over the batch as a symmetric (D, D) matrix with zero diagonal."""
    b = cache.batch
    m = np.zeros((b.total_dim, b.total_dim))
    pm = b.pmask
    np.add.at(m, (b.pi[pm], b.pj[pm]), cache.weights[pm])
    return m + m.T


def pair_weight_triples(cache: FaimCache) -> list[tuple[int, int, int, float]]:
    """(sample, i, j, a_ij) rows for every active pair, i < j."""
    b = cache.batch
    rows = []
    for n, q in zip(*np.nonzero(b.pmask)):
        i, j = sorted((int(b.pi[n, q]), int(b.pj[n, q])))
        rows.append((int(n), i, j, float(cache.weights[n, q])))
    return rows
