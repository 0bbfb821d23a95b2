"""Experiment runner: ``leaffuse {prepare,train,eval,sweep,ablate,heatmap,audit}``.

Settings come from an optional JSON file (``--config``) overlaid by flags.
Everything is written under ``--out``::

    prepared/d0.50/s3/{data.csv,meta.json}
    train/<tag>/d0.50/s3/{checkpoint.json,trace.csv}
    eval/<tag>/d0.50/<head>/{report.csv,report.json}
    sweep/<tag>/{sweep.csv,sweep.json}
    ablate/d0.50/{ablation.csv,ablation.json}
    heatmap/<mode>/d0.50/{matrix.csv,long.csv,heatmap.json}
    audit/{audit.json}

Every command directory gets a ``manifest.json`` with a SHA-256 per file.
Exit codes: 0 ok, 1 config error, 2 data error, 3 training abort.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import evalkit
from .datakit import DataError, prepare, read_prepared, write_prepared
from .evalkit import METRICS, confusion, metrics, welch_t_one_tailed
from .pipeline import RunConfig, attention_summary, desk_profile, fidelity_profile, predict_test_split, run_variant
from .trainer import HEADS, VARIANTS, Checkpoint, TrainingAborted, finite_diff_audit

log = logging.getLogger("leaffuse")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ABORT = 0, 1, 2, 3
SWEEP_DELTAS = (0.5, 0.6, 0.7, 0.8, 0.9)
SPARSE_MODES = ("literal", "logit_l1")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    data: str = ""
    label_column: str = "Class"
    positive_label: str | None = None
    delta: float = 0.0
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    variant: str = "full"
    head: str = "mean_fusion"
    out: str = "runs"
    deltas: list[float] = field(default_factory=lambda: list(SWEEP_DELTAS))
    modes: list[str] = field(default_factory=lambda: ["logit_l1"])
    fidelity: bool = False
    workers: int = 1
    run: dict = field(default_factory=dict)  # nested RunConfig overrides

    def validate(self, need_data: bool = True) -> "ExperimentConfig":
        if need_data:
            if not self.data:
                raise ConfigError("no dataset given (--data)")
            if not Path(self.data).is_file():
                raise ConfigError(f"dataset not found: {self.data}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct: {self.seeds}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; choose from {HEADS}")
        for d in [self.delta, *self.deltas]:
            if not 0.0 <= d <= 1.0:
                raise ConfigError(f"delta must lie in [0, 1], got {d}")
        for m in self.modes:
            if m not in SPARSE_MODES:
                raise ConfigError(f"unknown sparse mode {m!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.run_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad run settings: {exc}") from exc
        return self

    def run_config(self) -> RunConfig:
        base = (fidelity_profile() if self.fidelity else desk_profile()).to_dict()
        for section, values in self.run.items():
            if section not in base:
                raise ConfigError(f"unknown run section {section!r}")
            unknown = set(values) - set(base[section])
            if unknown:
                raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
            base[section].update(values)
        return RunConfig.from_dict(base)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path: str | None) -> ExperimentConfig:
    if not path:
        return ExperimentConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**raw)


# -- paths and manifests ------------------------------------------------------------

def dtag(delta: float) -> str:
    return f"d{delta:.2f}"


def run_tag(variant: str, run: RunConfig) -> str:
    if variant in ("full", "no_faim") and run.stage1.sparse_mode != "logit_l1":
        return f"{variant}-{run.stage1.sparse_mode}"
    return variant


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Manifest:
    """Collects written files; ``write`` hashes them into ``manifest.json``."""

    def __init__(self, root: Path, command: str, cfg: ExperimentConfig):
        self.root, self.command, self.cfg = Path(root), command, cfg
        self.paths: list[Path] = []

    def add(self, *paths: Path) -> None:
        self.paths.extend(Path(p) for p in paths)

    def write_text(self, path: Path, text: str) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.add(path)
        return path

    def write(self, extra: dict | None = None) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        entries = []
        for p in sorted(set(self.paths)):
            entries.append({"path": p.relative_to(self.root).as_posix(),
                            "sha256": sha256_file(p), "bytes": p.stat().st_size})
        doc = {"command": self.command, "config": self.cfg.to_dict(), "files": entries, **(extra or {})}
        out = self.root / "manifest.json"
        out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return out


# -- building blocks ------------------------------------------------------------------

def prepared_dir(cfg: ExperimentConfig, delta: float, seed: int) -> Path:
    return Path(cfg.out) / "prepared" / dtag(delta) / f"s{seed}"


def ensure_prepared(cfg: ExperimentConfig, delta: float, seed: int) -> list[Path]:
    """Write the (delta, seed) artifact unless an identical one already exists."""
    out = prepared_dir(cfg, delta, seed)
    source = {"source_sha256": sha256_file(Path(cfg.data)), "positive_label": cfg.positive_label}
    meta_path = out / "meta.json"
    if meta_path.is_file() and (out / "data.csv").is_file():
        meta = json.loads(meta_path.read_text())
        if (meta.get("delta") == delta and meta.get("seed") == seed
                and meta.get("label_column") == cfg.label_column
                and all(meta.get(k) == v for k, v in source.items())):
            return [out / "data.csv", meta_path]
    data, split = prepare(cfg.data, cfg.label_column, delta, seed, cfg.positive_label)
    return write_prepared(out, data, split, seed, extra=source)


def train_dir(cfg: ExperimentConfig, variant: str, run: RunConfig, delta: float) -> Path:
    return Path(cfg.out) / "train" / run_tag(variant, run) / dtag(delta)


TRACE_COLUMNS = ["stage", "epoch", "L_y", "L_sparse", "L1", "L_D", "L_aux", "L_G", "L2",
                 "grad_norm_D", "grad_norm_G", "val_acc", "val_loss"]


def trace_table(traces: dict[str, list[dict]]) -> str:
    rows = [{"stage": stage, **row} for stage, rows_ in traces.items() for row in rows_]
    return evalkit.write_table(rows, TRACE_COLUMNS)


def _train_job(args) -> dict:
    """Train one seed; runs in a worker process when ``workers > 1``."""
    prep, out, variant, run_dict, seed = args
    run = RunConfig.from_dict(run_dict)
    data, split, _ = read_prepared(prep)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = run_variant(data, split, variant, run, seed)
    except TrainingAborted as exc:
        err = out / "error.json"
        err.write_text(json.dumps({"stage": exc.stage, "epoch": exc.epoch, "losses": exc.losses},
                                  indent=1, sort_keys=True, default=str) + "\n")
        for stale in ("checkpoint.json", "trace.csv"):
            (out / stale).unlink(missing_ok=True)
        return {"seed": seed, "aborted": True, "files": [str(err)], "error": str(exc)}
    (out / "error.json").unlink(missing_ok=True)
    ck_path = result.checkpoint.save(out / "checkpoint.json")
    tr_path = out / "trace.csv"
    tr_path.write_text(trace_table(result.traces))
    return {"seed": seed, "aborted": False, "files": [str(ck_path), str(tr_path)],
            "epochs": result.checkpoint.epochs, "params": result.checkpoint.param_counts}


def _map(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


@dataclass
class TrainSummary:
    root: Path
    results: list[dict]

    @property
    def aborted(self) -> list[int]:
        return [r["seed"] for r in self.results if r["aborted"]]


def train_variant(cfg: ExperimentConfig, variant: str, delta: float, run: RunConfig) -> TrainSummary:
    root = train_dir(cfg, variant, run, delta)
    manifest = Manifest(root, "train", cfg)
    jobs = []
    for seed in cfg.seeds:
        ensure_prepared(cfg, delta, seed)
        jobs.append((str(prepared_dir(cfg, delta, seed)), str(root / f"s{seed}"), variant,
                     run.to_dict(), seed))
    log.info("train %s %s: %d seed(s)", run_tag(variant, run), dtag(delta), len(jobs))
    results = _map(_train_job, jobs, cfg.workers)
    for r in results:
        manifest.add(*r["files"])
        if r["aborted"]:
            log.error("seed %s aborted: %s", r["seed"], r["error"])
    manifest.write({"variant": variant, "delta": delta, "run": run.to_dict(),
                    "aborted_seeds": [r["seed"] for r in results if r["aborted"]]})
    return TrainSummary(root, results)


def evaluate(cfg: ExperimentConfig, variant: str, delta: float, run: RunConfig,
             head: str, seeds=None) -> tuple[evalkit.RunAggregate, list[int], Path]:
    """Test-split metrics per seed from saved checkpoints, plus report files."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    root = train_dir(cfg, variant, run, delta)
    reports, used = [], []
    for seed in seeds:
        ck_path = root / f"s{seed}" / "checkpoint.json"
        if not ck_path.is_file():
            if (root / f"s{seed}" / "error.json").is_file():
                log.warning("seed %s skipped: training aborted", seed)
                continue
            raise ConfigError(f"missing checkpoint {ck_path}; run `train` first")
        ck = Checkpoint.load(ck_path)
        data, split, _ = read_prepared(prepared_dir(cfg, delta, seed))
        prob, y = predict_test_split(ck, data, split, head)
        reports.append(metrics(confusion((prob >= 0.5).astype(int), y)))
        used.append(seed)
    if not reports:
        raise ConfigError(f"no usable checkpoints under {root}")
    agg = evalkit.aggregate(reports)
    out = Path(cfg.out) / "eval" / run_tag(variant, run) / dtag(delta) / head
    manifest = Manifest(out, "eval", cfg)
    manifest.write_text(out / "report.csv", evalkit.report_table(agg, used))
    manifest.write_text(out / "report.json", evalkit.dumps_json(
        {"variant": variant, "delta": delta, "head": head, "seeds": used, **agg.to_dict()}))
    manifest.write()
    return agg, used, out


# -- commands -------------------------------------------------------------------------------

def cmd_prepare(cfg: ExperimentConfig) -> int:
    root = Path(cfg.out) / "prepared" / dtag(cfg.delta)
    manifest = Manifest(root, "prepare", cfg)
    for seed in cfg.seeds:
        manifest.add(*ensure_prepared(cfg, cfg.delta, seed))
    manifest.write()
    meta = json.loads((prepared_dir(cfg, cfg.delta, cfg.seeds[0]) / "meta.json").read_text())
    print(f"prepared {len(cfg.seeds)} seed(s) at delta={cfg.delta}: n={meta['n']}, "
          f"perturbed rows={meta['n_perturbed']} -> {root}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    summary = train_variant(cfg, cfg.variant, cfg.delta, cfg.run_config())
    print(f"trained {len(summary.results) - len(summary.aborted)}/{len(summary.results)} "
          f"seed(s) -> {summary.root}")
    return EXIT_ABORT if summary.aborted else EXIT_OK


def _against(report_path: str, agg: evalkit.RunAggregate) -> dict:
    other = json.loads(Path(report_path).read_text())
    out = {}
    for m in METRICS:
        a = [r[m] for r in (x.to_dict() for x in agg.reports) if r[m] is not None]
        b = [r[m] for r in other["reports"] if r[m] is not None]
        try:
            res = welch_t_one_tailed(a, b)
            out[m] = {"t": res.t, "dof": res.dof, "p": res.p}
        except evalkit.MetricError as exc:
            out[m] = {"error": str(exc)}
    return out


def cmd_eval(cfg: ExperimentConfig, against: str | None = None) -> int:
    run = cfg.run_config()
    agg, used, out = evaluate(cfg, cfg.variant, cfg.delta, run, cfg.head)
    print(evalkit.report_table(agg, used), end="")
    if against:
        test = _against(against, agg)
        manifest = Manifest(out, "eval", cfg)
        manifest.add(out / "report.csv", out / "report.json")
        manifest.write_text(out / "welch.json", evalkit.dumps_json(
            {"against": against, "one_tailed_greater": test}))
        manifest.write()
        for metric, r in test.items():
            print(f"welch {metric}: " + (f"t={r['t']:.4f} dof={r['dof']:.2f} p={r['p']:.3g}"
                                         if "p" in r else r["error"]))
    return EXIT_OK


def sweep_rows(cfg: ExperimentConfig) -> tuple[list[dict], bool]:
    run = cfg.run_config()
    rows, failed = [], False
    for delta in sorted(cfg.deltas):
        row = {"delta": delta}
        try:
            summary = train_variant(cfg, cfg.variant, delta, run)
            failed |= bool(summary.aborted)
            agg, used, _ = evaluate(cfg, cfg.variant, delta, run, cfg.head)
            row.update(evalkit.summary_row(agg), n_runs=len(used))
        except (TrainingAborted, ConfigError, DataError, evalkit.MetricError) as exc:
            log.error("delta %s failed: %s", delta, exc)
            row["error"] = str(exc)
            failed = True
        rows.append(row)
    return rows, failed


def cmd_sweep(cfg: ExperimentConfig) -> int:
    rows, failed = sweep_rows(cfg)
    out = Path(cfg.out) / "sweep" / run_tag(cfg.variant, cfg.run_config())
    manifest = Manifest(out, "sweep", cfg)
    cols = ["delta", *evalkit.summary_columns(), "n_runs"]
    text = evalkit.write_table(rows, cols)
    manifest.write_text(out / "sweep.csv", text)
    manifest.write_text(out / "sweep.json", evalkit.dumps_json(
        {"variant": cfg.variant, "head": cfg.head, "seeds": cfg.seeds, "rows": rows}))
    manifest.write()
    print(text, end="")
    return EXIT_ABORT if failed else EXIT_OK


ABLATION_METRICS = ("accuracy", "sensitivity", "precision")


def ablation_rows(cfg: ExperimentConfig) -> tuple[list[dict], dict, bool]:
    """Train and evaluate all four variants on the same prepared data and seeds."""
    run = cfg.run_config()
    aggs, params, failed = {}, {}, False
    for variant in VARIANTS:
        try:
            summary = train_variant(cfg, variant, cfg.delta, run)
            failed |= bool(summary.aborted)
            head = cfg.head if variant in ("full", "no_faim") else "aug_only"
            aggs[variant] = evaluate(cfg, variant, cfg.delta, run, head)[0]
            params[variant] = next((r["params"] for r in summary.results if not r["aborted"]), {})
        except (TrainingAborted, ConfigError, evalkit.MetricError) as exc:
            log.error("variant %s failed: %s", variant, exc)
            failed = True
    rows = []
    base = aggs.get("base")
    for variant in VARIANTS:
        row = {"variant": variant}
        if variant in aggs:
            agg = aggs[variant]
            for m in ABLATION_METRICS:
                row[f"{m}_mean"] = agg.mean(m)
                if base is not None and base.mean(m):
                    row[f"{m}_rel_improvement"] = (agg.mean(m) - base.mean(m)) / base.mean(m)
            row["n_params"] = params[variant].get("this")
            row["param_rel_dev"] = params[variant].get("rel_dev")
        rows.append(row)
    tests = {}
    if base is not None:
        for variant, agg in aggs.items():
            if variant != "base":
                a = [r.accuracy for r in agg.reports]
                b = [r.accuracy for r in base.reports]
                try:
                    res = welch_t_one_tailed(a, b)
                    tests[variant] = {"t": res.t, "dof": res.dof, "p": res.p}
                except evalkit.MetricError as exc:
                    tests[variant] = {"error": str(exc)}
    return rows, {"welch_accuracy_vs_base": tests, "aggregates": {k: v.to_dict() for k, v in aggs.items()}}, failed


def cmd_ablate(cfg: ExperimentConfig) -> int:
    rows, extra, failed = ablation_rows(cfg)
    out = Path(cfg.out) / "ablate" / dtag(cfg.delta)
    manifest = Manifest(out, "ablate", cfg)
    cols = ["variant", *(f"{m}_rel_improvement" for m in ABLATION_METRICS),
            *(f"{m}_mean" for m in ABLATION_METRICS), "n_params", "param_rel_dev"]
    text = evalkit.write_table(rows, cols)
    manifest.write_text(out / "ablation.csv", text)
    manifest.write_text(out / "ablation.json", evalkit.dumps_json(
        {"delta": cfg.delta, "head": cfg.head, "seeds": cfg.seeds, "rows": rows, **extra}))
    manifest.write()
    print(text, end="")
    return EXIT_ABORT if failed else EXIT_OK


def heatmap_matrix(cfg: ExperimentConfig, mode: str) -> tuple[np.ndarray, dict]:
    """Average pair weight over every test sample of every seed.

    Seeds grow different forests, so matrices are zero-padded to the largest
    encoding before averaging.
    """
    run = cfg.run_config()
    run = replace(run, stage1=replace(run.stage1, sparse_mode=mode))
    root = train_dir(cfg, "full", run, cfg.delta)
    total, n_samples, dims, worst = None, 0, [], 0.0
    for seed in cfg.seeds:
        ck_path = root / f"s{seed}" / "checkpoint.json"
        if not ck_path.is_file():
            raise ConfigError(f"missing checkpoint {ck_path}; train the full variant "
                              f"with sparse_mode={mode} first")
        ck = Checkpoint.load(ck_path)
        data, split, _ = read_prepared(prepared_dir(cfg, cfg.delta, seed))
        mat, sums, cache = attention_summary(ck, data.features[split.test_idx])
        has_pairs = cache.batch.n_pairs > 0
        if has_pairs.any():
            worst = max(worst, float(np.max(np.abs(sums[has_pairs] - 1.0))))
        dims.append(mat.shape[0])
        if total is None or total.shape[0] < mat.shape[0]:
            grown = np.zeros((mat.shape[0],) * 2)
            if total is not None:
                grown[: total.shape[0], : total.shape[0]] = total
            total = grown
        total[: mat.shape[0], : mat.shape[0]] += mat
        n_samples += len(split.test_idx)
    avg = total / n_samples
    off = avg[~np.eye(avg.shape[0], dtype=bool)]
    info = {"mode": mode, "n_samples": n_samples, "total_dims": dims, "dim": int(avg.shape[0]),
            "max_weight_sum_error": worst,
            "zero_fraction": float(np.mean(off == 0.0)),
            "near_zero_fraction": float(np.mean(off < 0.01 * off.max())) if off.size and off.max() > 0 else 1.0}
    return avg, info


def cmd_heatmap(cfg: ExperimentConfig) -> int:
    infos = []
    for mode in cfg.modes:
        avg, info = heatmap_matrix(cfg, mode)
        out = Path(cfg.out) / "heatmap" / mode / dtag(cfg.delta)
        manifest = Manifest(out, "heatmap", cfg)
        dim = avg.shape[0]
        manifest.write_text(out / "matrix.csv", evalkit.write_table(
            [{"row": i, **{str(j): float(avg[i, j]) for j in range(dim)}} for i in range(dim)],
            ["row", *(str(j) for j in range(dim))]))
        manifest.write_text(out / "long.csv", evalkit.write_table(
            [{"i": i, "j": j, "weight": float(avg[i, j])} for i in range(dim) for j in range(dim)],
            ["i", "j", "weight"]))
        manifest.write_text(out / "heatmap.json", evalkit.dumps_json(info))
        manifest.write()
        infos.append(info)
        print(f"{mode}: dim={info['dim']} samples={info['n_samples']} "
              f"zero={info['zero_fraction']:.3f} near-zero={info['near_zero_fraction']:.3f} -> {out}")
    return EXIT_OK


def cmd_audit(cfg: ExperimentConfig, checkpoint: str | None, n_probes: int, tolerance: float) -> int:
    if checkpoint:
        ck = Checkpoint.load(checkpoint)
    else:
        # freshly initialized networks: one epoch per stage on the first seed
        seed = cfg.seeds[0]
        ensure_prepared(cfg, cfg.delta, seed)
        data, split, _ = read_prepared(prepared_dir(cfg, cfg.delta, seed))
        run = cfg.run_config()
        run = replace(run, stage1=replace(run.stage1, epochs=1), stage2=replace(run.stage2, epochs=1))
        variant = cfg.variant if cfg.variant in ("full", "no_faim") else "full"
        ck = run_variant(data, split, variant, run, seed).checkpoint
    report = finite_diff_audit(ck, n_probes, seed=cfg.seeds[0])
    report["tolerance"] = tolerance
    report["pass"] = report["max_rel_err"] <= tolerance
    out = Path(cfg.out) / "audit"
    manifest = Manifest(out, "audit", cfg)
    manifest.write_text(out / "audit.json", evalkit.dumps_json(report))
    manifest.write()
    for name, r in report["per_loss"].items():
        print(f"{name}: {r['n']} probes, max rel err {r['max_rel_err']:.3e}")
    print(f"overall max rel err {report['max_rel_err']:.3e} "
          f"({'PASS' if report['pass'] else 'FAIL'} at {tolerance:g})")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------------

def parse_seeds(text: str) -> list[int]:
    seeds = []
    try:
        for part in filter(None, (p.strip() for p in text.split(","))):
            lo, _, hi = part.partition("-")
            seeds.extend(range(int(lo), int(hi or lo) + 1))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    return seeds


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with ExperimentConfig fields")
    common.add_argument("--data", help="raw CSV with a label column")
    common.add_argument("--label-column")
    common.add_argument("--positive-label", help="raw label value mapped to class 1")
    common.add_argument("--delta", type=float)
    common.add_argument("--seeds", type=parse_seeds, help="e.g. 0-9 or 1,4,7")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--head", choices=HEADS)
    common.add_argument("--out")
    common.add_argument("--workers", type=int)
    common.add_argument("--fidelity", action="store_true", default=None,
                        help="10000/10000 epochs instead of the 2000/2000 desk profile")
    common.add_argument("--epochs1", type=int, help="stage-1 epochs")
    common.add_argument("--epochs2", type=int, help="stage-2 epochs")
    common.add_argument("--alpha", type=float)
    common.add_argument("--beta", type=float)
    common.add_argument("--sparse-mode", choices=SPARSE_MODES)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="leaffuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="impute, perturb and split")
    sub.add_parser("train", parents=[common], help="train one variant for every seed")
    ev = sub.add_parser("eval", parents=[common], help="test-split metrics over seeds")
    ev.add_argument("--against", help="report.json of another run set for a one-tailed Welch test")
    sw = sub.add_parser("sweep", parents=[common], help="prepare/train/eval over several deltas")
    sw.add_argument("--deltas", type=_floats)
    sub.add_parser("ablate", parents=[common], help="all four variants on paired data")
    hm = sub.add_parser("heatmap", parents=[common], help="average attention weight matrix")
    hm.add_argument("--modes", type=lambda s: [m for m in s.split(",") if m],
                    help="sparse modes to compare, e.g. literal,logit_l1")
    au = sub.add_parser("audit", parents=[common], help="finite-difference gradient audit")
    au.add_argument("--checkpoint")
    au.add_argument("--n-probes", type=int, default=200)
    au.add_argument("--tolerance", type=float, default=1e-4)
    return p


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    direct = {"data": "data", "label_column": "label_column", "positive_label": "positive_label",
              "delta": "delta", "seeds": "seeds", "variant": "variant", "head": "head",
              "out": "out", "workers": "workers", "fidelity": "fidelity",
              "deltas": "deltas", "modes": "modes"}
    updates = {k: getattr(args, a) for k, a in direct.items() if getattr(args, a, None) is not None}
    cfg = replace(cfg, **updates)
    run = {k: dict(v) for k, v in cfg.run.items()}
    for attr, section, key in (("epochs1", "stage1", "epochs"), ("epochs2", "stage2", "epochs"),
                               ("alpha", "stage1", "alpha"), ("beta", "stage2", "beta"),
                               ("sparse_mode", "stage1", "sparse_mode")):
        v = getattr(args, attr, None)
        if v is not None:
            run.setdefault(section, {})[key] = v
    if args.command == "heatmap" and args.modes is None and "sparse_mode" in run.get("stage1", {}):
        cfg = replace(cfg, modes=[run["stage1"]["sparse_mode"]])
    return replace(cfg, run=run)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args).validate(need_data=args.command != "audit" or not args.checkpoint)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.against)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "heatmap":
            return cmd_heatmap(cfg)
        return cmd_audit(cfg, args.checkpoint, args.n_probes, args.tolerance)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
