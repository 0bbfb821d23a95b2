"""Per-seed training pipelines for the four model variants.

* ``base``      original features -> generator -> classifier (supervised only)
* ``rf_no_fam`` base plus RF leaf-frequency features through a second two-layer
                net, fused by summing the two representations; no adversarial loss
* ``no_faim``   GBDT one-hot features through a two-layer net instead of FaIM,
                followed by the full alignment stage
* ``full``      GBDT one-hot -> FaIM, then the alignment stage

Hidden widths of the smaller variants are widened so that every variant's
trainable parameter count lands within 10% of the full model's.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import fam
from .datakit import Dataset, SplitBundle, standardize
from .faim import ActiveBatch, FaimParams, faim_forward_batch, pair_weight_matrix
from .fam import Classifier, Mlp
from .forest import GbdtConfig, RfConfig, fit_gbdt, fit_rf, leaf_indices, leaf_one_hot, rf_correlation_features
from .trainer import (VARIANTS, Checkpoint, StageOneConfig, StageTwoConfig, train_stage1,
                      train_stage2)

PARAM_BAND = 0.10


@dataclass
class ModelConfig:
    p: int = 8
    gen_hidden: int = 16
    disc_hidden: int = 16
    init_std: float = 0.1
    head: str = "mean_fusion"
    match_params: bool = True


@dataclass
class RunConfig:
    gbdt: GbdtConfig = field(default_factory=GbdtConfig)
    rf: RfConfig = field(default_factory=RfConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: StageOneConfig = field(default_factory=StageOneConfig)
    stage2: StageTwoConfig = field(default_factory=StageTwoConfig)

    def to_dict(self) -> dict:
        return {k: asdict(getattr(self, k)) for k in ("gbdt", "rf", "model", "stage1", "stage2")}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kinds = {"gbdt": GbdtConfig, "rf": RfConfig, "model": ModelConfig,
                 "stage1": StageOneConfig, "stage2": StageTwoConfig}
        return cls(**{k: kinds[k](**d.get(k, {})) for k in kinds})


def desk_profile(**overrides) -> RunConfig:
    """2000 + 2000 epochs; the default for tests and the CLI."""
    cfg = RunConfig(stage1=StageOneConfig(epochs=2000), stage2=StageTwoConfig(epochs=2000))
    return replace(cfg, **overrides)


def fidelity_profile() -> RunConfig:
    return RunConfig()


# -- parameter matching --------------------------------------------------------

def mlp_count(n_in: int, hidden: int, n_out: int) -> int:
    return n_in * hidden + hidden + hidden * n_out + n_out


def faim_count(total_dim: int, p: int) -> int:
    return 2 * total_dim * p + p * p + 2 * p


def variant_widths(d: int, total_dim: int, n_rf: int, mc: ModelConfig) -> dict:
    """Hidden widths and parameter counts per variant.

    The full model fixes the budget; the other variants solve for the integer
    width closest to it.
    """
    p = mc.p
    psi = p + 1
    gen = mlp_count(d, mc.gen_hidden, p)
    disc = mlp_count(p, mc.disc_hidden, p)
    full = faim_count(total_dim, p) + gen + disc + psi
    out = {"full": {"gen_hidden": mc.gen_hidden, "aug_hidden": None, "count": full}}
    if not mc.match_params:
        out["no_faim"] = {"gen_hidden": mc.gen_hidden, "aug_hidden": mc.gen_hidden,
                          "count": mlp_count(total_dim, mc.gen_hidden, p) + gen + disc + psi}
        out["base"] = {"gen_hidden": mc.gen_hidden, "aug_hidden": None, "count": gen + psi}
        out["rf_no_fam"] = {"gen_hidden": mc.gen_hidden, "aug_hidden": mc.gen_hidden,
                            "count": gen + mlp_count(n_rf, mc.gen_hidden, p) + psi}
    else:
        ha = max(1, round((faim_count(total_dim, p) - p) / (total_dim + 1 + p)))
        out["no_faim"] = {"gen_hidden": mc.gen_hidden, "aug_hidden": ha,
                          "count": mlp_count(total_dim, ha, p) + gen + disc + psi}
        hb = max(1, round((full - psi - p) / (d + 1 + p)))
        out["base"] = {"gen_hidden": hb, "aug_hidden": None, "count": mlp_count(d, hb, p) + psi}
        hr = max(1, round((full - psi - 2 * p) / (d + 1 + p + n_rf + 1 + p)))
        out["rf_no_fam"] = {"gen_hidden": hr, "aug_hidden": hr,
                            "count": mlp_count(d, hr, p) + mlp_count(n_rf, hr, p) + psi}
    for v in out.values():
        v["rel_dev"] = v["count"] / full - 1.0
    return out


class SumBranch:
    """Two-tower map ``G(x) + net(r)`` trained as one stage-1 branch."""

    def __init__(self, gen: Mlp, net: Mlp):
        self.gen, self.net = gen, net

    def arrays(self):
        return {**{f"g.{k}": v for k, v in self.gen.arrays().items()},
                **{f"r.{k}": v for k, v in self.net.arrays().items()}}

    def forward(self, inputs):
        X, R = inputs
        h, cg = self.gen.forward(X)
        hr, cr = self.net.forward(R)
        return h + hr, (cg, cr)

    def penalty(self, cache, mode):
        return 0.0

    def backward(self, cache, grad_h, alpha, mode):
        gg = self.gen.backward(cache[0], grad_h)[0]
        gr = self.net.backward(cache[1], grad_h)[0]
        return {**{f"g.{k}": v for k, v in gg.items()}, **{f"r.{k}": v for k, v in gr.items()}}


@dataclass
class RunResult:
    checkpoint: Checkpoint
    traces: dict[str, list[dict]]
    widths: dict


def run_variant(data: Dataset, split: SplitBundle, variant: str, cfg: RunConfig, seed: int) -> RunResult:
    """Train one variant on one prepared dataset (unstandardized) and split."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    std = standardize(data, split)
    Z, y = std.features, std.labels
    tr, va = split.train_idx, split.val_idx
    mc = cfg.model
    gbdt = fit_gbdt(Z[tr], y[tr], cfg.gbdt)
    enc = gbdt.encoding
    n_rf = cfg.rf.n_trees
    widths = variant_widths(std.d, enc.total_dim, n_rf, mc)
    w = widths[variant]
    psi = Classifier.init(mc.p, seed, mc.init_std)
    gen = fam.generator(std.d, mc.p, w["gen_hidden"], seed)
    ck = Checkpoint(variant=variant, seed=seed, mean=std.mean, std=std.std, generator=gen,
                    classifier=psi, head=mc.head, configs=cfg.to_dict(),
                    param_counts={"this": w["count"], "full": widths["full"]["count"],
                                  "rel_dev": w["rel_dev"]})
    traces: dict[str, list[dict]] = {}

    if variant in ("full", "no_faim"):
        ck.gbdt = gbdt
        if variant == "full":
            ck.faim = FaimParams.init(enc.total_dim, mc.p, seed, mc.init_std)
            branch = ck.faim
            tr_in = ActiveBatch.from_leaf_indices(leaf_indices(gbdt, Z[tr]), enc.total_dim)
            va_in = ActiveBatch.from_leaf_indices(leaf_indices(gbdt, Z[va]), enc.total_dim)
            s1 = cfg.stage1
        else:
            ck.aug_net = Mlp.init(enc.total_dim, w["aug_hidden"], mc.p, seed, "aug-net",
                                  "relu", "linear")
            branch = ck.aug_net
            tr_in, va_in = leaf_one_hot(gbdt, Z[tr]), leaf_one_hot(gbdt, Z[va])
            s1 = replace(cfg.stage1, alpha=0.0)
        traces["stage1"], best = train_stage1(branch, psi, tr_in, y[tr], s1, va_in, y[va])
        ck.epochs["stage1_best"] = best
        ck.discriminator = fam.discriminator(mc.p, mc.disc_hidden, seed)
        _, h_aug_tr = ck.representations(Z[tr], standardized=True)
        _, h_aug_va = ck.representations(Z[va], standardized=True)
        traces["stage2"], best2 = train_stage2(gen, ck.discriminator, psi, Z[tr], h_aug_tr, y[tr],
                                               cfg.stage2, (Z[va], h_aug_va, y[va]), mc.head)
        ck.epochs["stage2"] = cfg.stage2.epochs
        ck.epochs["stage2_best"] = best2
    elif variant == "base":
        traces["stage1"], best = train_stage1(gen, psi, Z[tr], y[tr], replace(cfg.stage1, alpha=0.0),
                                              Z[va], y[va])
        ck.epochs["stage1_best"] = best
    else:
        rf = fit_rf(Z[tr], y[tr], replace(cfg.rf, seed=seed))
        ck.rf = rf
        ck.aug_net = Mlp.init(n_rf, w["aug_hidden"], mc.p, seed, "rf-net", "relu", "linear")
        R = rf_correlation_features(rf, Z)
        branch = SumBranch(gen, ck.aug_net)
        traces["stage1"], best = train_stage1(branch, psi, (Z[tr], R[tr]), y[tr],
                                              replace(cfg.stage1, alpha=0.0), (Z[va], R[va]), y[va])
        ck.epochs["stage1_best"] = best
    return RunResult(ck, traces, widths)


def predict_test_split(ck: Checkpoint, data: Dataset, split: SplitBundle, head: str | None = None):
    """Probabilities and labels on the test rows of a prepared (raw-scale) dataset."""
    X = data.features[split.test_idx]
    return ck.predict_proba(X, head), data.labels[split.test_idx]


def attention_summary(ck: Checkpoint, X_raw: np.ndarray):
    """Summed attention matrix and per-sample weight totals for raw rows."""
    Z = ck.standardize(X_raw)
    batch = ActiveBatch.from_leaf_indices(leaf_indices(ck.gbdt, Z), ck.gbdt.encoding.total_dim)
    cache = faim_forward_batch(ck.faim, batch)
    return pair_weight_matrix(cache), cache.weights.sum(axis=1), cache

