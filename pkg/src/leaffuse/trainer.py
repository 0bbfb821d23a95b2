"""Two-stage training, checkpoints, inference head and gradient audit.

Stage 1 fits the augmented-feature branch and the classifier with full-batch
Adam on ``L_y + alpha * L_sparse`` and keeps the parameters from the epoch with
the best validation accuracy (validation cross-entropy breaks ties).

Stage 2 freezes the augmented branch and the classifier. Each epoch takes one
SGD step on the discriminator (``L_D``) and then one SGD step on the generator
(``L_aux + beta * L_G``) against the freshly updated discriminator. Gradients
are clipped to a global norm of 5 in this stage. With validation data the
generator and discriminator are restored to their best-accuracy epoch.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fam
from .datakit import apply_standardization
from .faim import ActiveBatch, FaimParams, faim_backward, faim_forward_batch, sparse_penalty
from .fam import Classifier, Mlp, classifier_loss
from .forest import GbdtModel, RfModel, leaf_indices, rf_correlation_features
from .rng import make_rng

CHECKPOINT_FORMAT = "leaffuse-checkpoint"
CHECKPOINT_VERSION = 1
HEADS = ("aug_only", "gen_only", "mean_fusion")
VARIANTS = ("base", "rf_no_fam", "no_faim", "full")


class TrainingAborted(RuntimeError):
    """A loss became non-finite; ``state`` holds the diagnostic snapshot."""

    def __init__(self, stage: str, epoch: int, losses: dict, state: dict | None = None):
        super().__init__(f"non-finite loss in {stage} at epoch {epoch}: {losses}")
        self.stage, self.epoch, self.losses, self.state = stage, epoch, losses, state or {}


@dataclass
class StageOneConfig:
    epochs: int = 10000
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = 0.05
    sparse_mode: str = "logit_l1"

    def __post_init__(self):
        if self.alpha < 0 or self.epochs < 1:
            raise ValueError("stage 1 needs alpha >= 0 and epochs >= 1")
        if self.sparse_mode not in ("literal", "logit_l1"):
            raise ValueError(f"unknown sparse mode {self.sparse_mode!r}")


@dataclass
class StageTwoConfig:
    epochs: int = 10000
    learning_rate: float = 0.005
    beta: float = 0.5
    d_steps_per_epoch: int = 1
    g_steps_per_epoch: int = 1
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.beta < 0 or self.epochs < 0:
            raise ValueError("stage 2 needs beta >= 0 and epochs >= 0")


# -- optimizers ---------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class Sgd:
    def __init__(self, params: dict[str, np.ndarray], lr):
        self.params, self.lr = params, lr

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p -= self.lr * grads[k]


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def prefixed(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in arrays.items()}


def accuracy(prob: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((prob >= 0.5).astype(int) == y)) if len(y) else float("nan")


def validation_score(prob: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """``(key, accuracy, bce)``; snapshots are ranked by ``key`` and only replaced on
    a strict improvement, so exact ties keep the earlier epoch.

    Accuracy decides; validation cross-entropy breaks accuracy ties. On small
    validation splits accuracy saturates within a few epochs, and ranking by
    accuracy alone would freeze a barely trained model.
    """
    acc = accuracy(prob, y)
    loss = fam.bce(prob, y)[0]
    return (acc, -loss), acc, loss


# -- augmented-feature branches -----------------------------------------------

class FaimBranch:
    """Adapter so stage 1 can drive either FaIM or a plain MLP."""

    def __init__(self, params: FaimParams):
        self.params = params

    def arrays(self):
        return self.params.arrays()

    def forward(self, batch: ActiveBatch):
        cache = faim_forward_batch(self.params, batch)
        return cache.h_aug, cache

    def penalty(self, cache, mode):
        return sparse_penalty(cache, mode)

    def backward(self, cache, grad_h, alpha, mode):
        return faim_backward(self.params, cache, grad_h, alpha, mode)


class MlpBranch:
    def __init__(self, net: Mlp):
        self.params = net

    def arrays(self):
        return self.params.arrays()

    def forward(self, X):
        return self.params.forward(X)

    def penalty(self, cache, mode):
        return 0.0

    def backward(self, cache, grad_h, alpha, mode):
        return self.params.backward(cache, grad_h)[0]


def _branch(obj):
    if isinstance(obj, FaimParams):
        return FaimBranch(obj)
    if isinstance(obj, Mlp):
        return MlpBranch(obj)
    return obj


def _snapshot(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in arrays.items()}


def _restore(arrays: dict[str, np.ndarray], snap: dict[str, np.ndarray]) -> None:
    for k, v in arrays.items():
        v[...] = snap[k]


def stage1_losses(branch, psi: Classifier, inputs, y, cfg: StageOneConfig, grad=False):
    """``L_1 = L_y + alpha * L_sparse`` and optionally its gradients."""
    branch = _branch(branch)
    h_aug, cache = branch.forward(inputs)
    l_y, g_psi, g_h = classifier_loss(psi, h_aug, y)
    l_sparse = branch.penalty(cache, cfg.sparse_mode)
    losses = {"L_y": l_y, "L_sparse": l_sparse, "L1": l_y + cfg.alpha * l_sparse}
    if not grad:
        return losses
    g_branch = branch.backward(cache, g_h, cfg.alpha, cfg.sparse_mode)
    return losses, {**prefixed("aug", g_branch), **prefixed("psi", g_psi)}


def train_stage1(branch, psi: Classifier, train_inputs, y_train, cfg: StageOneConfig,
                 val_inputs=None, y_val=None):
    """Full-batch Adam on ``L_1``; parameters are updated in place.

    Returns ``(trace, best_epoch)``. Row ``e`` of the trace is evaluated at the
    parameters after ``e`` updates. On return the parameters hold the best
    snapshot under :func:`validation_score`. Without validation data the final
    parameters are kept.
    """
    branch = _branch(branch)
    params = {**prefixed("aug", branch.arrays()), **prefixed("psi", psi.arrays())}
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    trace, best_key, best_epoch, best = [], None, 0, None
    for epoch in range(cfg.epochs + 1):
        losses, grads = stage1_losses(branch, psi, train_inputs, y_train, cfg, grad=True)
        if not all(math.isfinite(v) for v in losses.values()):
            raise TrainingAborted("stage1", epoch, losses, _snapshot(params))
        row = {"epoch": epoch, **losses}
        if val_inputs is not None:
            key, row["val_acc"], row["val_loss"] = validation_score(
                psi(branch.forward(val_inputs)[0]), y_val)
            if best_key is None or key > best_key:
                best_key, best_epoch, best = key, epoch, _snapshot(params)
        trace.append(row)
        if epoch == cfg.epochs:
            break
        opt.step(grads)
    if best is not None:
        _restore(params, best)
    else:
        best_epoch = cfg.epochs
    return trace, best_epoch


def stage2_losses(phi: Mlp, theta: Mlp, psi: Classifier, X, H_aug, y, beta: float):
    h = phi(X)
    l_d = fam.loss_discriminator(theta, h, H_aug)
    l_aux = fam.loss_aux(psi, h, y)
    l_g = fam.loss_generator(phi, theta, X)
    return {"L_D": l_d, "L_aux": l_aux, "L_G": l_g, "L2": l_aux + beta * l_g}


def generator_grads(phi: Mlp, theta: Mlp, psi: Classifier, X, y, beta: float):
    """Gradient of ``L_aux + beta * L_G`` w.r.t. the generator only."""
    h, cache = phi.forward(X)
    l_aux, _, g_h = classifier_loss(psi, h, y)
    grads = phi.backward(cache, g_h)[0]
    l_g = 0.0
    if beta:
        l_g, g_adv = fam.loss_generator(phi, theta, X, grad=True)
        for k in grads:
            grads[k] = grads[k] + beta * g_adv[k]
    return {"L_aux": l_aux, "L_G": l_g, "L2": l_aux + beta * l_g}, grads


def train_stage2(phi: Mlp, theta: Mlp, psi: Classifier, X_train, H_aug_train, y_train,
                 cfg: StageTwoConfig, val=None, head: str = "mean_fusion"):
    """Alternating discriminator / generator SGD; ``H_aug_train`` is frozen input.

    ``val`` is an optional ``(X_val, H_aug_val, y_val)`` triple. Returns
    ``(trace, best_epoch)``; row ``e`` reports validation accuracy of ``head`` at
    the parameters after ``e`` epochs. With validation data, ``phi`` and
    ``theta`` are restored to the best epoch under :func:`validation_score`
    (the state after the last epoch counts as epoch ``epochs``). The adversarial sum
    over rows dwarfs the mean auxiliary loss, so late epochs can drift.
    """
    th = theta.arrays()
    ph = phi.arrays()
    both = {**prefixed("theta", th), **prefixed("phi", ph)}
    opt_d = Sgd(th, cfg.learning_rate)
    opt_g = Sgd(ph, cfg.learning_rate)
    trace, best_key, best_epoch, best = [], None, cfg.epochs, None

    def check(epoch, row):
        nonlocal best_key, best_epoch, best
        X_val, H_val, y_val = val
        key, row["val_acc"], row["val_loss"] = validation_score(
            fuse(psi, phi(X_val), H_val, head), y_val)
        if best_key is None or key > best_key:
            best_key, best_epoch, best = key, epoch, _snapshot(both)

    for epoch in range(cfg.epochs):
        row = {"epoch": epoch}
        if val is not None:
            check(epoch, row)
        for _ in range(cfg.d_steps_per_epoch):
            h = phi(X_train)
            l_d, g_d = fam.loss_discriminator(theta, h, H_aug_train, grad=True)
            if not math.isfinite(l_d):
                raise TrainingAborted("stage2", epoch, {"L_D": l_d}, _snapshot(th))
            row["grad_norm_D"] = clip_global_norm(g_d, cfg.clip_norm)
            opt_d.step(g_d)
        row["L_D"] = l_d
        for _ in range(cfg.g_steps_per_epoch):
            losses, g_g = generator_grads(phi, theta, psi, X_train, y_train, cfg.beta)
            if not all(math.isfinite(v) for v in losses.values()):
                raise TrainingAborted("stage2", epoch, losses, _snapshot(ph))
            row["grad_norm_G"] = clip_global_norm(g_g, cfg.clip_norm)
            opt_g.step(g_g)
        row.update(losses)
        trace.append(row)
    if val is not None:
        check(cfg.epochs, {})
        _restore(both, best)
    return trace, best_epoch


def fuse(psi: Classifier, h: np.ndarray, h_aug: np.ndarray, head: str) -> np.ndarray:
    if head == "aug_only":
        return psi(h_aug)
    if head == "gen_only":
        return psi(h)
    if head == "mean_fusion":
        return psi(0.5 * (h + h_aug))
    raise ValueError(f"unknown head {head!r}")


# -- checkpoint -----------------------------------------------------------------

@dataclass
class Checkpoint:
    variant: str
    seed: int
    mean: np.ndarray
    std: np.ndarray
    generator: Mlp
    classifier: Classifier
    gbdt: GbdtModel | None = None
    rf: RfModel | None = None
    faim: FaimParams | None = None
    aug_net: Mlp | None = None  # x_aug branch of no_faim, RF branch of rf_no_fam
    discriminator: Mlp | None = None
    head: str = "mean_fusion"
    configs: dict = field(default_factory=dict)
    epochs: dict = field(default_factory=dict)
    param_counts: dict = field(default_factory=dict)

    # -- inference -------------------------------------------------------------
    def standardize(self, X) -> np.ndarray:
        return apply_standardization(np.atleast_2d(X), self.mean, self.std)

    def aug_inputs(self, Z):
        """Input of the augmented branch for standardized rows ``Z``."""
        if self.variant == "full":
            return ActiveBatch.from_leaf_indices(leaf_indices(self.gbdt, Z),
                                                 self.gbdt.encoding.total_dim)
        if self.variant == "no_faim":
            idx = leaf_indices(self.gbdt, Z)
            out = np.zeros((Z.shape[0], self.gbdt.encoding.total_dim))
            np.put_along_axis(out, idx, 1.0, axis=1)
            return out
        if self.variant == "rf_no_fam":
            return rf_correlation_features(self.rf, Z)
        return None

    def representations(self, X, standardized: bool = False):
        """``(h, h_aug)`` for raw rows; ``h_aug`` is None for the base variant."""
        Z = np.atleast_2d(X) if standardized else self.standardize(X)
        h = self.generator(Z)
        inputs = self.aug_inputs(Z)
        if self.variant == "full":
            h_aug = faim_forward_batch(self.faim, inputs).h_aug
        elif inputs is not None:
            h_aug = self.aug_net(inputs)
        else:
            h_aug = None
        return h, h_aug

    def predict_proba(self, X, head: str | None = None, standardized: bool = False) -> np.ndarray:
        h, h_aug = self.representations(X, standardized)
        if self.variant == "base":
            return self.classifier(h)
        if self.variant == "rf_no_fam":
            return self.classifier(h + h_aug)
        return fuse(self.classifier, h, h_aug, head or self.head)

    # -- serialization -----------------------------------------------------------
    def to_dict(self) -> dict:
        def opt(obj):
            return None if obj is None else obj.to_dict()

        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "variant": self.variant,
            "seed": int(self.seed),
            "head": self.head,
            "standardization": {"mean": self.mean.tolist(), "std": self.std.tolist()},
            "gbdt": opt(self.gbdt),
            "rf": opt(self.rf),
            "params": {
                "faim": opt(self.faim),
                "aug_net": opt(self.aug_net),
                "generator": self.generator.to_dict(),
                "discriminator": opt(self.discriminator),
                "classifier": self.classifier.to_dict(),
            },
            "configs": self.configs,
            "epochs": self.epochs,
            "param_counts": self.param_counts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a supported checkpoint")
        p = d["params"]

        def opt(kind, obj):
            return None if obj is None else kind.from_dict(obj)

        return cls(
            variant=d["variant"],
            seed=d["seed"],
            mean=np.asarray(d["standardization"]["mean"], dtype=np.float64),
            std=np.asarray(d["standardization"]["std"], dtype=np.float64),
            generator=Mlp.from_dict(p["generator"]),
            classifier=Classifier.from_dict(p["classifier"]),
            gbdt=opt(GbdtModel, d["gbdt"]),
            rf=opt(RfModel, d["rf"]),
            faim=opt(FaimParams, p["faim"]),
            aug_net=opt(Mlp, p["aug_net"]),
            discriminator=opt(Mlp, p["discriminator"]),
            head=d.get("head", "mean_fusion"),
            configs=d.get("configs", {}),
            epochs=d.get("epochs", {}),
            param_counts=d.get("param_counts", {}),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def sha256(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def params_hash(*modules) -> str:
    """SHA-256 over the raw bytes of every parameter array, in order."""
    h = hashlib.sha256()
    for mod in modules:
        for name, arr in mod.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def predict(checkpoint: Checkpoint, x, head: str | None = None) -> tuple[float | np.ndarray, int | np.ndarray]:
    """Probability and class (``prob >= 0.5``) for one raw row or a batch."""
    single = np.ndim(x) == 1
    prob = checkpoint.predict_proba(x, head)
    cls = (prob >= 0.5).astype(int)
    return (float(prob[0]), int(cls[0])) if single else (prob, cls)


# -- finite-difference audit -------------------------------------------------------

def _audit_batch(ck: Checkpoint, n: int, seed: int):
    rng = make_rng(seed, "audit-batch")
    d = ck.mean.size
    Z = rng.normal(size=(n, d))
    y = rng.integers(0, 2, n)
    return Z, y


def finite_diff_audit(ck: Checkpoint, n_probes: int = 200, seed: int = 0, step: float = 1e-6,
                      batch=None, alpha: float | None = None, beta: float | None = None,
                      sparse_mode: str | None = None) -> dict:
    """Compare analytic and central-difference gradients at random coordinates.

    Probes are split evenly across ``L1`` (augmented branch + classifier),
    ``L_D`` (discriminator) and ``L2`` (generator). The relative error of a
    probe is ``|g - fd| / max(|g|, |fd|, 1e-8)``.
    """
    s1 = ck.configs.get("stage1", {})
    s2 = ck.configs.get("stage2", {})
    cfg1 = StageOneConfig(epochs=1, alpha=s1.get("alpha", 0.05) if alpha is None else alpha,
                          sparse_mode=sparse_mode or s1.get("sparse_mode", "logit_l1"))
    beta = s2.get("beta", 0.5) if beta is None else beta
    Z, y = batch if batch is not None else _audit_batch(ck, 16, seed)
    inputs = ck.aug_inputs(Z)
    branch = _branch(ck.faim if ck.faim is not None else ck.aug_net)
    theta = ck.discriminator
    if theta is None or branch is None:
        raise ValueError("audit needs a checkpoint with both stages (full or no_faim)")
    h_aug = branch.forward(inputs)[0]

    def l1():
        return stage1_losses(branch, ck.classifier, inputs, y, cfg1)["L1"]

    def ld():
        return fam.loss_discriminator(theta, ck.generator(Z), h_aug)

    def l2():
        return stage2_losses(ck.generator, theta, ck.classifier, Z, h_aug, y, beta)["L2"]

    _, g1 = stage1_losses(branch, ck.classifier, inputs, y, cfg1, grad=True)
    _, gd = fam.loss_discriminator(theta, ck.generator(Z), h_aug, grad=True)
    _, g2 = generator_grads(ck.generator, theta, ck.classifier, Z, y, beta)
    groups = {
        "L1": (l1, {**prefixed("aug", branch.arrays()), **prefixed("psi", ck.classifier.arrays())}, g1),
        "L_D": (ld, theta.arrays(), gd),
        "L2": (l2, ck.generator.arrays(), g2),
    }
    rng = make_rng(seed, "audit-probes")
    report = {"n_probes": 0, "step": step, "per_loss": {}, "probes": []}
    share = [n_probes // 3 + (i < n_probes % 3) for i in range(3)]
    for (name, (fn, params, grads)), k in zip(groups.items(), share):
        keys = list(params)
        sizes = np.array([params[kk].size for kk in keys], dtype=float)
        worst = 0.0
        for _ in range(k):
            key = keys[rng.choice(len(keys), p=sizes / sizes.sum())]
            flat = params[key].reshape(-1)
            i = int(rng.integers(flat.size))
            orig = flat[i]
            flat[i] = orig + step
            up = fn()
            flat[i] = orig - step
            down = fn()
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            g = float(grads[key].reshape(-1)[i])
            err = abs(g - fd) / max(abs(g), abs(fd), 1e-8)
            worst = max(worst, err)
            report["probes"].append({"loss": name, "param": key, "index": i,
                                     "analytic": g, "numeric": fd, "rel_err": err})
        report["per_loss"][name] = {"n": k, "max_rel_err": worst}
    report["n_probes"] = len(report["probes"])
    report["max_rel_err"] = max(v["max_rel_err"] for v in report["per_loss"].values())
    return report
