"""Training runs, evaluation, cross-dataset transfer, ablations and reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from .datasets import (DatasetManifest, SplitSpec, fixture_key, load_manifest, load_sequences,
                       split)
from .estimator import XLSTMRegressor
from .metrics import MetricsReport, evaluate_predictions, polyfit4, polyval4, reports_to_csv
from .predictor import POOLINGS, load_checkpoint, save_checkpoint
from .protocol import Aspect
from .xlstm import DEFAULT_LAYOUT

log = logging.getLogger(__name__)

RUN_ROOT_ENV = "M3_RUN_ROOT"
COMPOSITIONS = ("w_id", "full_conv", "none")
RUN_RECORD_SCHEMA_VERSION = 1


@dataclass
class TrainConfig:
    manifest: str = ""
    aspect: str = "quality"
    d_h: int = 32
    layout: tuple = DEFAULT_LAYOUT
    heads: int = 1
    pooling: str = "mean"
    bypass_xlstm: bool = False
    feature_source: str = "logits"
    hidden_width: int | None = None
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    split_ratios: tuple = (4, 1, 0)
    split_seed: int = 0
    composition: str = "w_id"
    selection: str = "best_val_srcc"
    val_fraction: float = 0.1
    workers: int = 1
    run_dir: str | None = None

    def __post_init__(self):
        self.layout = tuple(self.layout)
        self.split_ratios = tuple(self.split_ratios)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.composition not in COMPOSITIONS:
            raise ValueError(f"unknown composition {self.composition!r}; expected {COMPOSITIONS}")
        Aspect.parse(self.aspect)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layout"] = list(self.layout)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def estimator(self) -> XLSTMRegressor:
        return XLSTMRegressor(
            d_h=self.d_h, layout=self.layout, heads=self.heads, pooling=self.pooling,
            bypass_xlstm=self.bypass_xlstm, feature_source=self.feature_source,
            hidden_width=self.hidden_width, lr=self.lr, weight_decay=self.weight_decay,
            beta1=self.beta1, beta2=self.beta2, eps=self.eps, clip_norm=self.clip_norm,
            epochs=self.epochs, batch_size=self.batch_size, val_fraction=self.val_fraction,
            selection=self.selection, seed=self.seed, n_jobs=self.workers)


def feature_key(aspect, composition: str = "w_id", feature_source: str = "logits") -> str:
    """Which fixture of a record feeds the model for this run."""
    if composition == "none":
        variant = "no_desc"
    elif composition == "full_conv":
        variant = "full_conv"
    else:
        variant = ""
    if feature_source == "hidden_states":
        if variant:
            raise ValueError("hidden-state features are only available for the w/ ID composition")
        variant = "hidden_states"
    return fixture_key(aspect, variant)


@dataclass
class RunRecord:
    config: dict
    train_loss: list
    val_srcc: list
    best_epoch: int
    checkpoint: str
    wall_clock: float
    split_sizes: dict
    split_digest: str
    test_report: dict | None = None
    name: str = ""

    def to_json(self) -> str:
        d = asdict(self)
        d["schema_version"] = RUN_RECORD_SCHEMA_VERSION
        return json.dumps(d, indent=2, sort_keys=True, allow_nan=True)


@dataclass
class EvalResult:
    """Per-sample predictions plus the aggregate report for one evaluation."""

    name: str
    ids: list
    y_pred: np.ndarray
    y_true: np.ndarray
    report: MetricsReport


def default_run_dir(seed: int) -> Path:
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S-%f")
    return root / f"{stamp}-seed{seed}"


def split_digest(parts: dict) -> str:
    h = hashlib.sha256()
    for k in ("train", "test", "val"):
        h.update(k.encode())
        for i in parts[k]:
            h.update(i.encode() + b"\0")
    return h.hexdigest()[:16]


def _resolve_manifest(m) -> DatasetManifest:
    return m if isinstance(m, DatasetManifest) else load_manifest(m)


def train(cfg: TrainConfig, manifest: DatasetManifest | None = None, name: str = "") -> RunRecord:
    t0 = time.perf_counter()
    manifest = manifest or load_manifest(cfg.manifest)
    aspect = Aspect.parse(cfg.aspect).value
    if not manifest.aspects.get(aspect):
        raise ValueError(f"{manifest.name} has no {aspect} MOS")
    parts = split(manifest, SplitSpec(cfg.split_ratios, cfg.split_seed))
    if not parts["train"]:
        raise ValueError("training split is empty")
    key = feature_key(aspect, cfg.composition, cfg.feature_source)
    X = load_sequences(manifest, parts["train"], key)
    y = manifest.targets(parts["train"], aspect)
    X_val = y_val = None
    if parts["val"]:
        X_val = load_sequences(manifest, parts["val"], key)
        y_val = manifest.targets(parts["val"], aspect)
    est = cfg.estimator().fit(X, y, X_val, y_val)

    run_dir = Path(cfg.run_dir) if cfg.run_dir else default_run_dir(cfg.seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run_dir / "checkpoint.m3ck"
    save_checkpoint(ckpt, est.config_, est.params_,
                    extra={"aspect": aspect, "mos_range": list(manifest.mos_range)})
    test_report = None
    if parts["test"]:
        res = _evaluate_estimator(est, manifest, parts["test"], aspect, key, "test", name or "run")
        test_report = res.report.to_dict()
        write_predictions(run_dir / "predictions_test.csv", res)
    rec = RunRecord(
        config=cfg.to_dict(),
        train_loss=[float(v) for v in est.history_["train_loss"]],
        val_srcc=[None if v is None else float(v) for v in est.history_["val_srcc"]],
        best_epoch=int(est.best_epoch_),
        checkpoint=str(ckpt),
        wall_clock=time.perf_counter() - t0,
        split_sizes={k: len(v) for k, v in parts.items()},
        split_digest=split_digest(parts),
        test_report=test_report,
        name=name,
    )
    atomic_write_text(run_dir / "run_record.json", rec.to_json())
    atomic_write_text(run_dir / "config.json", json.dumps(cfg.to_dict(), indent=2))
    return rec


def _evaluate_estimator(est, manifest, ids, aspect, key, split_name, name) -> EvalResult:
    if not ids:
        raise ValueError("evaluation split is empty")
    X = load_sequences(manifest, ids, key)
    y = manifest.targets(ids, aspect)
    y_pred = est.predict(X)
    rep = evaluate_predictions(y_pred, y, manifest.mos_range, manifest.name, split_name)
    return EvalResult(name, list(ids), y_pred, y, rep)


def evaluate(checkpoint, manifest, ids=None, aspect="quality", split_name: str = "test",
             composition: str = "w_id", workers: int = 1, name: str = "eval",
             report_path=None) -> EvalResult:
    """Score a frozen checkpoint on ``ids`` (default: every record)."""
    manifest = _resolve_manifest(manifest)
    config, params, _ = load_checkpoint(checkpoint)
    aspect = Aspect.parse(aspect).value
    key = feature_key(aspect, composition, config.feature_source)
    est = XLSTMRegressor.from_checkpoint(config, params, n_jobs=workers)
    ids = manifest.ids if ids is None else list(ids)
    X_width = None
    if ids:
        X_width = load_sequences(manifest, ids[:1], key)[0].shape[1]
    if X_width is not None and X_width != config.d_in:
        raise ValueError(f"checkpoint expects feature width {config.d_in}, fixtures have {X_width}")
    res = _evaluate_estimator(est, manifest, ids, aspect, key, split_name, name)
    if report_path is not None:
        atomic_write_text(report_path, res.report.to_json())
    return res


def cross_eval(checkpoint_a, manifest_b, with_tp: bool = False, tp_cfg: TrainConfig | None = None,
               aspect: str = "quality") -> list:
    """Zero-shot evaluation of an A-trained checkpoint on B, optionally followed by
    retraining only the predictor on B's training split ("w/ TP")."""
    manifest_b = _resolve_manifest(manifest_b)
    tp_cfg = tp_cfg or TrainConfig()
    parts = split(manifest_b, SplitSpec(tp_cfg.split_ratios, tp_cfg.split_seed))
    results = [evaluate(checkpoint_a, manifest_b, parts["test"], aspect, "test",
                        tp_cfg.composition, tp_cfg.workers, name="zero_shot")]
    if with_tp:
        config, params, _ = load_checkpoint(checkpoint_a)
        est = XLSTMRegressor.from_checkpoint(config, params)
        est.set_params(**{k: v for k, v in tp_cfg.estimator().get_params().items()
                          if k not in ("d_h", "layout", "heads", "pooling", "bypass_xlstm",
                                       "feature_source", "hidden_width", "warm_start")},
                       warm_start=True)
        key = feature_key(aspect, tp_cfg.composition, config.feature_source)
        X = load_sequences(manifest_b, parts["train"], key)
        y = manifest_b.targets(parts["train"], aspect)
        X_val = y_val = None
        if parts["val"]:
            X_val = load_sequences(manifest_b, parts["val"], key)
            y_val = manifest_b.targets(parts["val"], aspect)
        est.fit(X, y, X_val, y_val)
        results.append(_evaluate_estimator(est, manifest_b, parts["test"], aspect, key, "test",
                                           "with_tp"))
    return results


ABLATION_VARIANTS = POOLINGS + ("bypass_xlstm", "feature_source", "full_conv")


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    """Apply a ``+``-joined variant name (e.g. ``max+bypass_xlstm``) to ``base``."""
    cfg = replace(base)
    for part in variant.split("+"):
        if part in POOLINGS:
            cfg = replace(cfg, pooling=part)
        elif part == "bypass_xlstm":
            cfg = replace(cfg, bypass_xlstm=True)
        elif part == "feature_source":
            cfg = replace(cfg, feature_source="hidden_states")
        elif part == "full_conv":
            cfg = replace(cfg, composition="full_conv")
        else:
            raise ValueError(f"unknown ablation variant {part!r}; expected one of {ABLATION_VARIANTS}")
    return cfg


def run_ablation(suite, base: TrainConfig, manifest: DatasetManifest | None = None,
                 out_dir=None) -> list:
    """One training run per variant on a shared split and seed.

    Returns ``(variant, RunRecord)`` pairs and writes ``ablation.csv`` to
    ``out_dir`` when given.
    """
    suite = list(suite)
    if not suite:
        raise ValueError("empty ablation suite")
    cfgs = [(v, variant_config(base, v)) for v in suite]  # validate names before running
    manifest = manifest or load_manifest(base.manifest)
    root = Path(out_dir) if out_dir else default_run_dir(base.seed)
    rows = []
    for variant, cfg in cfgs:
        cfg = replace(cfg, run_dir=str(root / variant.replace("+", "__")))
        log.info("ablation variant %s", variant)
        rows.append((variant, train(cfg, manifest, name=variant)))
    atomic_write_text(root / "ablation.csv", ablation_table(rows))
    return rows


def ablation_table(rows) -> str:
    pairs = []
    for variant, rec in rows:
        rep = MetricsReport.from_dict(rec.test_report) if rec.test_report else \
            MetricsReport(None, None, float("nan"), 0, error="no test split")
        pairs.append(({"variant": variant, "split_digest": rec.split_digest}, rep))
    return reports_to_csv(pairs, extra_fields=("variant", "split_digest"))


# ---------------------------------------------------------------- reports

def write_predictions(path, res: EvalResult) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "pred", "truth"])
    for i, p, t in zip(res.ids, res.y_pred, res.y_true):
        w.writerow([i, repr(float(p)), repr(float(t))])
    atomic_write_text(path, buf.getvalue())


def read_predictions(path, name: str = "") -> EvalResult:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    ids = [r["id"] for r in rows]
    y_pred = np.array([float(r["pred"]) for r in rows])
    y_true = np.array([float(r["truth"]) for r in rows])
    return EvalResult(name or Path(path).stem, ids, y_pred, y_true,
                      evaluate_predictions(y_pred, y_true))


def emit_report(results, out_dir) -> dict:
    """Scatter CSVs, a summary table, a JSON report and an SVG with quartic fits."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    results = list(results)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary, report = [], {"schema_version": 1, "runs": [],
                           "poly_convention": "ascending powers of the prediction: c0 + c1*x + ... + c4*x^4"}
    plt.rcParams["svg.hashsalt"] = "m3iqa"
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(10, 4.5))
    for k, res in enumerate(results):
        write_predictions(out_dir / f"scatter_{res.name}.csv", res)
        rep = res.report
        try:
            coef = polyfit4(res.y_pred, res.y_true)
        except (np.linalg.LinAlgError, ValueError):
            coef = None
        entry = {"name": res.name, "metrics": rep.to_dict(),
                 "poly4": None if coef is None else [float(c) for c in coef]}
        report["runs"].append(entry)
        summary.append(({"name": res.name}, rep))
        color = f"C{k % 10}"
        ax.scatter(res.y_pred, res.y_true, s=6, alpha=0.5, color=color)
        label = f"{res.name} (SRCC={_fmt(rep.srcc)}, PLCC={_fmt(rep.plcc)})"
        if coef is not None:
            xs = np.linspace(res.y_pred.min(), res.y_pred.max(), 200)
            ax.plot(xs, polyval4(coef, xs), color=color, label=label)
        else:
            ax.plot([], [], color=color, label=label)
        if rep.srcc is not None:
            ax2.scatter([rep.srcc], [rep.plcc], s=40 + 400 * min(rep.mse, 1.0), color=color,
                        label=res.name)
    lo = min([float(np.min(r.y_true)) for r in results] + [0.0])
    hi = max([float(np.max(r.y_true)) for r in results] + [1.0])
    ax.plot([lo, hi], [lo, hi], "k:", lw=0.8)
    ax.set_xlabel("predicted MOS")
    ax.set_ylabel("ground-truth MOS")
    ax.legend(fontsize=7)
    ax2.set_xlabel("SRCC")
    ax2.set_ylabel("PLCC")
    if any(r.report.srcc is not None for r in results):
        ax2.legend(fontsize=7)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write_bytes(out_dir / "scatter.svg", buf.getvalue())
    atomic_write_text(out_dir / "summary.csv", reports_to_csv(summary, extra_fields=("name",)))
    atomic_write_text(out_dir / "report.json", json.dumps(report, indent=2, sort_keys=True))
    return report


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"
