"""Correlation, error and label metrics, all computed in float64."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

REPORT_SCHEMA_VERSION = 1
N_CLASSES = 5


class UndefinedCorrelationError(ValueError):
    """Correlation requested for input with zero variance."""


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("correlation needs at least 2 samples")
    return x, y


def plcc(x, y) -> float:
    x, y = _pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("zero variance input; PLCC undefined")
    r = float(xc @ yc) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def srcc(x, y) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    x, y = _pair(x, y)
    rx, ry = rankdata(x, method="average"), rankdata(y, method="average")
    if np.ptp(rx) == 0 and np.ptp(ry) == 0:
        raise UndefinedCorrelationError("both inputs constant; SRCC undefined")
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        raise UndefinedCorrelationError("constant input; SRCC undefined")
    return plcc(rx, ry)


def _labels(pred, true):
    p = np.asarray(pred).reshape(-1)
    t = np.asarray(true).reshape(-1)
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} vs {t.size}")
    if p.size == 0:
        raise ValueError("no labels")
    for arr in (p, t):
        if not np.all((arr == np.round(arr)) & (arr >= 0) & (arr < N_CLASSES)):
            raise ValueError("labels must be integers in 0..4")
    return p.astype(np.int64), t.astype(np.int64)


def rough_accuracy(pred_labels, true_labels) -> float:
    """Fraction of samples whose label is within one level of the truth."""
    p, t = _labels(pred_labels, true_labels)
    return float(np.mean(np.abs(p - t) <= 1))


def classification_metrics(pred_labels, true_labels) -> dict:
    """Exact accuracy plus macro precision / F1 over classes seen in either vector."""
    p, t = _labels(pred_labels, true_labels)
    precisions, f1s = [], []
    for c in range(N_CLASSES):
        in_p, in_t = p == c, t == c
        if not (in_p.any() or in_t.any()):
            continue
        tp = float(np.sum(in_p & in_t))
        prec = tp / in_p.sum() if in_p.any() else 0.0
        rec = tp / in_t.sum() if in_t.any() else 0.0
        precisions.append(prec)
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return {"accuracy": float(np.mean(p == t)),
            "precision": float(np.mean(precisions)),
            "f1": float(np.mean(f1s))}


def polyfit4(x, y) -> np.ndarray:
    """Least-squares quartic; coefficients ascending (c0 + c1 x + ... + c4 x^4).

    Solved by normal equations on the standardized abscissa, then mapped back.
    """
    x, y = _pair(x, y)
    if x.size < 5:
        raise ValueError("polyfit4 needs at least 5 points")
    mu, sd = x.mean(), x.std()
    if sd == 0:
        raise np.linalg.LinAlgError("all abscissae equal; quartic fit is rank deficient")
    u = (x - mu) / sd
    V = np.vander(u, 5, increasing=True)
    G = V.T @ V
    if np.linalg.matrix_rank(G) < 5:
        raise np.linalg.LinAlgError("fewer than 5 distinct abscissae; quartic fit is rank deficient")
    a = np.linalg.solve(G, V.T @ y)
    # p(x) = sum a_k ((x - mu) / sd)^k, expanded in powers of x
    base = np.polynomial.Polynomial([-mu / sd, 1.0 / sd])
    poly = sum((a[k] * base ** k for k in range(5)), np.polynomial.Polynomial([0.0]))
    coef = np.zeros(5)
    coef[:len(poly.coef)] = poly.coef
    return coef


def polyval4(coef, x):
    return np.polynomial.polynomial.polyval(np.asarray(x, dtype=np.float64), coef)


@dataclass
class MetricsReport:
    srcc: float | None
    plcc: float | None
    mse: float
    n: int
    dataset: str = ""
    split: str = ""
    rough_accuracy: float | None = None
    accuracy: float | None = None
    precision: float | None = None
    f1: float | None = None
    error: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = REPORT_SCHEMA_VERSION
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = {k: v for k, v in d.items() if k != "schema_version"}
        return cls(**d)

    CSV_FIELDS = ("dataset", "split", "n", "srcc", "plcc", "mse",
                  "rough_accuracy", "accuracy", "precision", "f1", "error")

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


def reports_to_csv(rows, extra_fields=()) -> str:
    """``rows`` are ``(dict_of_extra, MetricsReport)`` pairs."""
    buf = io.StringIO()
    fields = list(extra_fields) + list(MetricsReport.CSV_FIELDS)
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for extra, rep in rows:
        w.writerow({**extra, **rep.csv_row()})
    return buf.getvalue()


def evaluate_predictions(y_hat, y, mos_range=None, dataset: str = "", split: str = "") -> MetricsReport:
    """Score predictions; an undefined correlation is reported, not raised."""
    from .protocol import mos_to_label

    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("cannot evaluate an empty split")
    mse = float(np.mean((y_hat - y) ** 2))
    rep = MetricsReport(None, None, mse, int(y.size), dataset, split)
    try:
        rep.srcc = srcc(y_hat, y)
        rep.plcc = plcc(y_hat, y)
    except (UndefinedCorrelationError, ValueError) as exc:
        rep.error = str(exc)
    if mos_range is not None:
        lo, hi = mos_range
        pl = [mos_to_label(float(np.clip(v, lo, hi)), mos_range).index for v in y_hat]
        tl = [mos_to_label(float(v), mos_range).index for v in y]
        rep.rough_accuracy = rough_accuracy(pl, tl)
        rep.__dict__.update(classification_metrics(pl, tl))
    return rep
