"""scikit-learn compatible regressor around the projection + xLSTM predictor."""
from __future__ import annotations

import copy
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from threadpoolctl import threadpool_limits

from . import xlstm
from .metrics import UndefinedCorrelationError, srcc
from .numerics import AdamW, NonFiniteError, clip_grad_norm, make_rng, spawn_seeds
from .predictor import (PredictorConfig, forward_batch, init_predictor, loss_and_grads)

log = logging.getLogger(__name__)


def check_sequences(X, width: int | None = None, name: str = "X") -> list:
    """Validate a batch of ``(L, D)`` feature sequences.

    Accepts a 3-D array or a sequence of 2-D arrays (lengths may differ).
    Returns a list of float arrays; raises ``ValueError`` on empty, ragged
    width, or non-finite input.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        seqs = list(X)
    elif isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError(f"{name} must be a collection of (L, D) sequences, got one 2-D array")
    else:
        seqs = [np.asarray(s) for s in X]
    if not seqs:
        raise ValueError(f"{name} is empty")
    for i, s in enumerate(seqs):
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError(f"{name}[{i}] must be (L>=1, D), got shape {s.shape}")
        if width is not None and s.shape[1] != width:
            raise ValueError(f"{name}[{i}] has width {s.shape[1]}, expected {width}")
        if not np.all(np.isfinite(s)):
            raise ValueError(f"{name}[{i}] contains NaN or inf")
    widths = {s.shape[1] for s in seqs}
    if len(widths) > 1:
        raise ValueError(f"{name} mixes feature widths {sorted(widths)}")
    return seqs


def length_buckets(seqs, order=None) -> list:
    """Group indices by sequence length, preserving ``order`` within each bucket."""
    order = range(len(seqs)) if order is None else order
    buckets: dict = {}
    for i in order:
        buckets.setdefault(seqs[i].shape[0], []).append(i)
    return list(buckets.values())


class XLSTMRegressor(RegressorMixin, BaseEstimator):
    """Regress a score from a sequence of vocabulary-logit features.

    ``fit`` minimizes MSE with AdamW. When validation data is available
    (passed explicitly or carved from the training set via ``val_fraction``)
    the parameters from the epoch with the best validation SRCC are kept.
    ``warm_start=True`` continues from the current parameters.
    """

    def __init__(self, d_h=512, layout=xlstm.DEFAULT_LAYOUT, heads=1, pooling="mean",
                 bypass_xlstm=False, feature_source="logits", hidden_width=None,
                 lr=1e-4, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8,
                 clip_norm=1.0, epochs=50, batch_size=16, val_fraction=0.1,
                 selection="best_val_srcc", seed=0, dtype="float32", n_jobs=1,
                 warm_start=False, verbose=False):
        self.d_h = d_h
        self.layout = layout
        self.heads = heads
        self.pooling = pooling
        self.bypass_xlstm = bypass_xlstm
        self.feature_source = feature_source
        self.hidden_width = hidden_width
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.epochs = epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.selection = selection
        self.seed = seed
        self.dtype = dtype
        self.n_jobs = n_jobs
        self.warm_start = warm_start
        self.verbose = verbose

    def _make_config(self, width: int) -> PredictorConfig:
        kw = dict(d_h=self.d_h, layout=tuple(self.layout), heads=self.heads, pooling=self.pooling,
                  bypass_xlstm=self.bypass_xlstm, feature_source=self.feature_source,
                  hidden_width=self.hidden_width)
        if self.feature_source == "hidden_states":
            kw["d_hidden_states"] = width
        else:
            kw["d_vocab"] = width
        return PredictorConfig(**kw)

    @classmethod
    def from_checkpoint(cls, config: PredictorConfig, params: dict, **kwargs) -> "XLSTMRegressor":
        est = cls(d_h=config.d_h, layout=config.layout, heads=config.heads, pooling=config.pooling,
                  bypass_xlstm=config.bypass_xlstm, feature_source=config.feature_source,
                  hidden_width=config.hidden_width, **kwargs)
        est.config_ = config
        est.params_ = {k: np.array(v, dtype=np.dtype(est.dtype)) for k, v in params.items()}
        est.n_features_in_ = config.d_in
        est.history_ = {"train_loss": [], "val_srcc": []}
        return est

    def fit(self, X, y, X_val=None, y_val=None):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.selection not in ("best_val_srcc", "last"):
            raise ValueError(f"unknown selection rule {self.selection!r}")
        seqs = check_sequences(X)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.size != len(seqs):
            raise ValueError(f"{len(seqs)} sequences but {y.size} targets")
        width = seqs[0].shape[1]
        dtype = np.dtype(self.dtype)
        seeds = spawn_seeds(self.seed, 3)

        if X_val is None and self.selection == "best_val_srcc" and self.val_fraction > 0:
            n_val = int(round(self.val_fraction * len(seqs)))
            if 2 <= n_val < len(seqs):
                perm = make_rng(seeds[2]).permutation(len(seqs))
                vi, ti = perm[:n_val], perm[n_val:]
                X_val, y_val = [seqs[i] for i in vi], y[vi]
                seqs, y = [seqs[i] for i in ti], y[ti]
        if X_val is not None:
            X_val = check_sequences(X_val, width, "X_val")
            y_val = np.asarray(y_val, dtype=np.float64).reshape(-1)

        if self.warm_start and hasattr(self, "params_"):
            if self.n_features_in_ != width:
                raise ValueError(f"warm start expects width {self.n_features_in_}, got {width}")
            params = self.params_
        else:
            self.config_ = self._make_config(width)
            params = init_predictor(self.config_, seed=seeds[0], dtype=dtype)
            params["head.b2"][...] = y.mean()
            self.n_features_in_ = width
            self.history_ = {"train_loss": [], "val_srcc": []}
        self.initial_params_ = copy.deepcopy(params)
        config = self.config_

        opt = AdamW(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                    weight_decay=self.weight_decay)
        shuffle_rng = make_rng(seeds[1])
        best = (-np.inf, copy.deepcopy(params), 0)
        data = [s.astype(dtype, copy=False) for s in seqs]
        yd = y.astype(dtype)
        with threadpool_limits(limits=1):
            for epoch in range(1, self.epochs + 1):
                order = shuffle_rng.permutation(len(data))
                batches = []
                for bucket in length_buckets(data, order):
                    batches += [bucket[i:i + self.batch_size]
                                for i in range(0, len(bucket), self.batch_size)]
                total = 0.0
                for b, idx in enumerate(batches):
                    E = np.stack([data[i] for i in idx])
                    loss, grads, _ = loss_and_grads(E, yd[idx], params, config)
                    if not np.isfinite(loss):
                        raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
                    if self.clip_norm:
                        clip_grad_norm(grads, self.clip_norm)
                    opt.step(params, grads, context=f"epoch {epoch}, batch {b}")
                    total += loss * len(idx)
                self.history_["train_loss"].append(total / len(data))
                val_score = None
                if X_val is not None:
                    try:
                        val_score = srcc(self._predict(X_val, params), y_val)
                    except UndefinedCorrelationError:
                        val_score = float("nan")
                    if np.isfinite(val_score) and val_score > best[0]:
                        best = (val_score, copy.deepcopy(params), epoch)
                self.history_["val_srcc"].append(val_score)
                if self.verbose:
                    log.info("epoch %d loss %.5f val_srcc %s", epoch, total / len(data), val_score)
        if X_val is not None and self.selection == "best_val_srcc" and best[2] > 0:
            params, self.best_epoch_ = best[1], best[2]
        else:
            self.best_epoch_ = self.epochs
        self.params_ = params
        return self

    def _predict(self, seqs, params) -> np.ndarray:
        out = np.empty(len(seqs), dtype=np.float64)
        batches = [bucket[i:i + max(self.batch_size, 64)]
                   for bucket in length_buckets(seqs)
                   for i in range(0, len(bucket), max(self.batch_size, 64))]

        def run(idx):
            E = np.stack([seqs[i] for i in idx]).astype(params["proj.W"].dtype, copy=False)
            return idx, forward_batch(E, params, self.config_)

        if self.n_jobs and self.n_jobs > 1:
            with ThreadPoolExecutor(self.n_jobs) as pool:
                results = list(pool.map(run, batches))
        else:
            results = [run(b) for b in batches]
        for idx, y_hat in results:  # fixed order, so the reduction is deterministic
            out[idx] = y_hat
        return out

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit() first")
        seqs = check_sequences(X, self.n_features_in_)
        return self._predict(seqs, self.params_)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.two_d_array = False
        tags.input_tags.three_d_array = True
        return tags
