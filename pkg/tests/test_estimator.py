import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from m3iqa.estimator import XLSTMRegressor, check_sequences, length_buckets
from m3iqa.numerics import make_rng


def toy_data(n=24, L=5, D=6, seed=0):
    rng = make_rng(seed)
    y = rng.uniform(0, 5, size=n)
    g = rng.normal(size=D)
    X = rng.normal(scale=0.3, size=(n, L, D)) + y[:, None, None] * g / np.linalg.norm(g)
    return X.astype(np.float32), y


def small(**kw):
    base = dict(d_h=6, layout=("m", "s"), epochs=3, batch_size=8, lr=1e-3, seed=0)
    base.update(kw)
    return XLSTMRegressor(**base)


def test_zero_lr_leaves_parameters_untouched():
    X, y = toy_data()
    est = small(epochs=1, lr=0.0, selection="last").fit(X, y)
    assert all(est.params_[k].tobytes() == est.initial_params_[k].tobytes() for k in est.params_)


def test_loss_decreases():
    X, y = toy_data(n=40)
    est = small(epochs=10, selection="last").fit(X, y)
    loss = est.history_["train_loss"]
    assert len(loss) == 10 and loss[-1] < loss[0]


def test_fit_is_deterministic():
    X, y = toy_data()
    a, b = small().fit(X, y), small().fit(X, y)
    assert a.history_ == b.history_
    assert a.predict(X).tobytes() == b.predict(X).tobytes()


def test_workers_do_not_change_predictions():
    X, y = toy_data()
    est = small().fit(X, y)
    one = est.predict(X)
    est.set_params(n_jobs=3, batch_size=1)
    assert est.predict(X).tobytes() == one.tobytes()


def test_best_epoch_selection():
    X, y = toy_data(n=40)
    est = small(epochs=4).fit(X, y)
    vals = est.history_["val_srcc"]
    assert est.best_epoch_ == 1 + int(np.nanargmax(vals))


def test_ragged_sequences_and_buckets():
    X, y = toy_data(n=12)
    ragged = [x[: 2 + i % 3] for i, x in enumerate(X)]
    est = small(epochs=2).fit(ragged, y)
    assert est.predict(ragged).shape == (12,)
    buckets = length_buckets(ragged)
    assert sorted(i for b in buckets for i in b) == list(range(12))
    assert all(len({ragged[i].shape[0] for i in b}) == 1 for b in buckets)


def test_input_validation():
    with pytest.raises(NotFittedError):
        small().predict(np.zeros((1, 2, 6)))
    with pytest.raises(ValueError):
        check_sequences([np.zeros((0, 3))])
    with pytest.raises(ValueError):
        check_sequences([np.full((2, 3), np.nan)])
    with pytest.raises(ValueError):
        small().fit(np.zeros((3, 2, 6)), [1.0, 2.0])
    X, y = toy_data()
    est = small(epochs=1).fit(X, y)
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 2, 5)))


def test_sklearn_protocol():
    est = small(pooling="max")
    assert clone(est).get_params() == est.get_params()
    X, y = toy_data()
    assert np.isfinite(small(epochs=2).fit(X, y).score(X, y))


def test_warm_start_continues():
    X, y = toy_data()
    est = small(epochs=2, selection="last").fit(X, y)
    before = {k: v.copy() for k, v in est.params_.items()}
    est.set_params(warm_start=True, epochs=1)
    est.fit(X, y)
    assert all(est.initial_params_[k].tobytes() == before[k].tobytes() for k in before)
    assert len(est.history_["train_loss"]) == 3
