"""Compare the hand-written backward pass against central differences."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import CHECK_DTYPE, finite_diff_grad, make_rng, rel_error
from .predictor import PredictorConfig, init_predictor, loss_and_grads, tiny_config

PRESETS = {"tiny": dict(config=tiny_config(), length=6, batch=3)}


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    per_param: dict
    analytic: dict = field(default_factory=dict, repr=False)
    numeric: dict = field(default_factory=dict, repr=False)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol

    def mismatches(self, rtol: float = 1e-4, atol: float = 0.0) -> dict:
        """Entries whose error exceeds both ``rtol`` (relative) and ``atol`` (absolute)."""
        out = {}
        for name, a in self.analytic.items():
            g = self.numeric[name]
            bad = (rel_error(a, g) >= rtol) & (np.abs(a - g) >= atol)
            if bad.any():
                out[name] = int(bad.sum())
        return out


def param_group(name: str) -> str:
    return name.split(".", 1)[0]


def gradcheck(config: PredictorConfig, length: int = 6, batch: int = 3, seed: int = 0,
              h: float = 1e-3, params: dict | None = None) -> GradCheckResult:
    """MSE-loss gradient check of every parameter in float64."""
    rng = make_rng(seed)
    if params is None:
        params = init_predictor(config, seed=seed, dtype=CHECK_DTYPE)
        # nonzero biases and non-unit norms so no gradient path is trivially zero
        for name, arr in params.items():
            if arr.ndim == 1:
                arr[...] = rng.normal(0.0, 0.5, size=arr.shape) + (1.0 if name.endswith("ln_g") else 0.0)
    E = rng.normal(size=(batch, length, config.d_in))
    y = rng.uniform(0.0, 5.0, size=batch)
    _, grads, _ = loss_and_grads(E, y, params, config)

    per_param, numerics = {}, {}
    worst = (0.0, "", ())
    for name in params:
        def f(v, name=name):
            saved = params[name]
            params[name] = v
            try:
                return loss_and_grads(E, y, params, config)[0]
            finally:
                params[name] = saved

        numeric = finite_diff_grad(f, params[name].copy(), h)
        numerics[name] = numeric
        err = rel_error(grads[name], numeric)
        per_param[name] = float(err.max())
        if err.max() > worst[0]:
            worst = (float(err.max()), name, np.unravel_index(int(err.argmax()), err.shape))
    return GradCheckResult(worst[0], worst[1], tuple(int(i) for i in worst[2]), per_param,
                           {k: np.asarray(grads[k], dtype=CHECK_DTYPE) for k in params}, numerics)
