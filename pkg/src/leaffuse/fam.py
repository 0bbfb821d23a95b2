"""Feature alignment module: generator, discriminator, classifier and their losses.

All three networks are small dense maps written directly in numpy with
hand-derived backward passes:

* generator ``G``: d -> H1 -> p, ReLU on both layers
* discriminator ``D``: p -> H_D -> p, ReLU hidden, sigmoid output
* classifier ``F``: p -> 1, sigmoid

Losses (N = batch size)::

    L_D   = -sum_i || D(h_i) - D(h_aug_i) ||_1
    L_G   =  sum_i || D(G(x_i)) - 1 ||_1
    L_aux =  mean binary cross-entropy of F(h_i) against y_i
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forest import sigmoid
from .rng import make_rng

PROB_CLAMP = 1e-7
ACTIVATIONS = ("relu", "sigmoid", "linear")


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    return z


def _act_grad(z, out, kind):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "sigmoid":
        return out * (1.0 - out)
    return np.ones_like(z)


@dataclass
class Mlp:
    """Two-layer map ``out_act(W2 . hidden_act(W1 . x + b1) + b2)``."""

    w1: np.ndarray  # (H, in)
    b1: np.ndarray
    w2: np.ndarray  # (out, H)
    b2: np.ndarray
    hidden_act: str = "relu"
    out_act: str = "relu"

    @classmethod
    def init(cls, n_in: int, n_hidden: int, n_out: int, seed: int = 0, tag: str = "mlp",
             hidden_act: str = "relu", out_act: str = "relu") -> "Mlp":
        """He-normal weights, zero biases."""
        rng = make_rng(seed, tag)
        return cls(
            w1=rng.normal(0.0, np.sqrt(2.0 / max(n_in, 1)), (n_hidden, n_in)),
            b1=np.zeros(n_hidden),
            w2=rng.normal(0.0, np.sqrt(2.0 / max(n_hidden, 1)), (n_out, n_hidden)),
            b2=np.zeros(n_out),
            hidden_act=hidden_act,
            out_act=out_act,
        )

    @classmethod
    def zeros(cls, n_in, n_hidden, n_out, hidden_act="relu", out_act="relu") -> "Mlp":
        return cls(np.zeros((n_hidden, n_in)), np.zeros(n_hidden), np.zeros((n_out, n_hidden)),
                   np.zeros(n_out), hidden_act, out_act)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "Mlp":
        return Mlp(**{k: v.copy() for k, v in self.arrays().items()},
                   hidden_act=self.hidden_act, out_act=self.out_act)

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays().values())

    def to_dict(self) -> dict:
        d = {k: v.tolist() for k, v in self.arrays().items()}
        d.update(hidden_act=self.hidden_act, out_act=self.out_act)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in ("w1", "b1", "w2", "b2")},
                   hidden_act=d["hidden_act"], out_act=d["out_act"])

    def forward(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        z1 = X @ self.w1.T + self.b1
        a1 = _act(z1, self.hidden_act)
        z2 = a1 @ self.w2.T + self.b2
        out = _act(z2, self.out_act)
        return out, (X, z1, a1, z2, out)

    def __call__(self, X):
        return self.forward(X)[0]

    def backward(self, cache, grad_out) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Parameter gradients and the gradient w.r.t. the input."""
        X, z1, a1, z2, out = cache
        g2 = grad_out * _act_grad(z2, out, self.out_act)
        grads = {"w2": g2.T @ a1, "b2": g2.sum(axis=0)}
        g1 = (g2 @ self.w2) * _act_grad(z1, a1, self.hidden_act)
        grads["w1"] = g1.T @ X
        grads["b1"] = g1.sum(axis=0)
        return grads, g1 @ self.w1


def generator(d: int, p: int = 8, hidden: int = 16, seed: int = 0) -> Mlp:
    return Mlp.init(d, hidden, p, seed, "generator", "relu", "relu")


def discriminator(p: int = 8, hidden: int = 16, seed: int = 0) -> Mlp:
    return Mlp.init(p, hidden, p, seed, "discriminator", "relu", "sigmoid")


def generator_forward(phi: Mlp, x) -> np.ndarray:
    single = np.ndim(x) == 1
    h = phi(x)
    return h[0] if single else h


def discriminator_forward(theta: Mlp, v) -> np.ndarray:
    single = np.ndim(v) == 1
    out = theta(v)
    return out[0] if single else out


@dataclass
class Classifier:
    w: np.ndarray  # (p,)
    b: np.ndarray  # (1,) so optimizers can update it in place

    @classmethod
    def init(cls, p: int = 8, seed: int = 0, std: float = 0.1) -> "Classifier":
        return cls(make_rng(seed, "classifier").normal(0.0, std, p), np.zeros(1))

    @classmethod
    def zeros(cls, p: int = 8) -> "Classifier":
        return cls(np.zeros(p), np.zeros(1))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def copy(self) -> "Classifier":
        return Classifier(self.w.copy(), self.b.copy())

    def n_params(self) -> int:
        return self.w.size + 1

    def to_dict(self) -> dict:
        return {"w": self.w.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Classifier":
        return cls(np.asarray(d["w"], dtype=np.float64), np.asarray(d["b"], dtype=np.float64).reshape(1))

    def logit(self, V):
        return np.atleast_2d(V) @ self.w + self.b[0]

    def __call__(self, V):
        return sigmoid(self.logit(V))


def classifier_forward(psi: Classifier, v) -> np.ndarray | float:
    single = np.ndim(v) == 1
    p = psi(v)
    return float(p[0]) if single else p


# -- losses -------------------------------------------------------------------

def bce(prob: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean clamped binary cross-entropy and its gradient w.r.t. ``prob``.

    Clamped entries get zero gradient.
    """
    y = np.asarray(y, dtype=np.float64)
    pc = np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = y.size
    loss = -float(np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    inside = (prob >= PROB_CLAMP) & (prob <= 1.0 - PROB_CLAMP)
    grad = np.where(inside, -(y / pc - (1.0 - y) / (1.0 - pc)) / n, 0.0)
    return loss, grad


def classifier_loss(psi: Classifier, V, y):
    """Mean BCE of ``F(V)``; returns (loss, grads wrt psi, grad wrt V)."""
    V = np.atleast_2d(V)
    prob = psi(V)
    loss, g_prob = bce(prob, y)
    g_z = g_prob * prob * (1.0 - prob)
    grads = {"w": g_z @ V, "b": np.atleast_1d(g_z.sum())}
    return loss, grads, np.outer(g_z, psi.w)


def loss_aux(psi: Classifier, H, y) -> float:
    return classifier_loss(psi, H, y)[0]


def loss_discriminator(theta: Mlp, H, H_aug, grad: bool = False):
    """``L_D = -sum_i ||D(h_i) - D(h_aug_i)||_1`` over index-aligned rows."""
    d_h, c_h = theta.forward(H)
    d_a, c_a = theta.forward(H_aug)
    gap = d_h - d_a
    loss = -float(np.abs(gap).sum())
    if not grad:
        return loss
    s = -np.sign(gap)
    g1, _ = theta.backward(c_h, s)
    g2, _ = theta.backward(c_a, -s)
    return loss, {k: g1[k] + g2[k] for k in g1}


def loss_generator(phi: Mlp, theta: Mlp, X, grad: bool = False):
    """``L_G = sum_i ||D(G(x_i)) - 1||_1``; gradients flow to ``phi`` only."""
    h, c_g = phi.forward(X)
    d, c_d = theta.forward(h)
    loss = float(np.abs(d - 1.0).sum())
    if not grad:
        return loss
    _, g_h = theta.backward(c_d, np.sign(d - 1.0))
    g_phi, _ = phi.backward(c_g, g_h)
    return loss, g_phi


def alignment_gap(theta: Mlp, H, H_aug) -> np.ndarray:
    """Per-sample ``||D(h_i) - D(h_aug_i)||_1`` (mode-collapse diagnostic)."""
    return np.abs(theta(H) - theta(H_aug)).sum(axis=1)
