"""Projection -> xLSTM stack -> pooling -> two-layer regression head.

Parameters live in one flat ``dict`` keyed ``proj.W``, ``block{i}.<name>``,
``head.W1`` ... in declaration order; that order is also the checkpoint order.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import xlstm
from ._io import atomic_write_bytes
from .numerics import DimensionError, TRAIN_DTYPE, init_params, spawn_seeds

POOLINGS = ("mean", "max", "fl_mean", "last")
FEATURE_SOURCES = ("logits", "hidden_states")

CHECKPOINT_MAGIC = b"M3CK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PredictorConfig:
    d_vocab: int = 128256
    d_h: int = 512
    layout: tuple = xlstm.DEFAULT_LAYOUT
    heads: int = 1
    pooling: str = "mean"
    bypass_xlstm: bool = False
    feature_source: str = "logits"
    # width of last-layer hidden states when feature_source == "hidden_states"
    d_hidden_states: int = 4096
    hidden_width: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layout", tuple(xlstm.parse_kind(k) for k in self.layout))
        if self.d_vocab < 1 or self.d_h < 1 or self.d_hidden_states < 1:
            raise ValueError("widths must be >= 1")
        if self.hidden_width is not None and self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}; expected one of {POOLINGS}")
        if self.feature_source not in FEATURE_SOURCES:
            raise ValueError(f"unknown feature_source {self.feature_source!r}")
        if self.heads < 1 or self.d_h % self.heads:
            raise ValueError(f"heads={self.heads} must divide d_h={self.d_h}")

    @property
    def d_in(self) -> int:
        return self.d_vocab if self.feature_source == "logits" else self.d_hidden_states

    @property
    def head_width(self) -> int:
        return self.hidden_width or self.d_h

    @property
    def variant(self) -> str:
        parts = [self.pooling]
        if self.bypass_xlstm:
            parts.append("no_xlstm")
        if self.feature_source != "logits":
            parts.append(self.feature_source)
        return "+".join(parts)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layout"] = list(self.layout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        d = dict(d)
        d["layout"] = tuple(d.get("layout", xlstm.DEFAULT_LAYOUT))
        return cls(**d)


@dataclass
class Prediction:
    sample_id: str
    y_hat: float
    label: int | None = None
    variant: str = "mean"


def param_shapes(config: PredictorConfig) -> dict:
    shapes = {"proj.W": (config.d_in, config.d_h)}
    for i, kind in enumerate(config.layout):
        for name, shape in xlstm.block_param_shapes(kind, config.d_h, config.heads).items():
            shapes[f"block{i}.{name}"] = shape
    hw = config.head_width
    shapes.update({"head.W1": (config.d_h, hw), "head.b1": (hw,),
                   "head.W2": (hw, 1), "head.b2": (1,)})
    return shapes


def param_count(config: PredictorConfig) -> dict:
    """Analytic parameter counts per component; nothing is allocated."""
    counts = {"projection": config.d_in * config.d_h}
    for i, kind in enumerate(config.layout):
        counts[f"block{i}:{kind}"] = xlstm.block_param_count(kind, config.d_h, config.heads)
    hw = config.head_width
    counts["regression_head"] = config.d_h * hw + hw + hw + 1
    counts["total"] = sum(counts.values())
    return counts


def init_predictor(config: PredictorConfig, seed=0, dtype=TRAIN_DTYPE) -> dict:
    seeds = spawn_seeds(seed, 3 + len(config.layout))
    params = {"proj.W": init_params((config.d_in, config.d_h), "uniform_fan", seeds[0], dtype=dtype)}
    for i, kind in enumerate(config.layout):
        for name, arr in xlstm.init_block(kind, config.d_h, config.heads, seeds[3 + i], dtype).items():
            params[f"block{i}.{name}"] = arr
    hw = config.head_width
    params["head.W1"] = init_params((config.d_h, hw), "uniform_fan", seeds[1], dtype=dtype)
    params["head.b1"] = init_params((hw,), "zeros", dtype=dtype)
    params["head.W2"] = init_params((hw, 1), "uniform_fan", seeds[2], dtype=dtype)
    params["head.b2"] = init_params((1,), "zeros", dtype=dtype)
    return params


def block_params(params: dict, n_blocks: int) -> list:
    """Per-block views onto ``params`` (same array objects, so updates propagate)."""
    out = []
    for i in range(n_blocks):
        prefix = f"block{i}."
        out.append({k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)})
    return out


def cast_params(params: dict, dtype) -> dict:
    return {k: v.astype(dtype, copy=True) for k, v in params.items()}


# ---------------------------------------------------------------- pieces

def project(E, W_proj):
    """``E @ W_proj``: vocabulary-space features down to the hidden width."""
    E = np.asarray(E)
    if E.shape[-1] != W_proj.shape[0]:
        raise DimensionError(f"feature width {E.shape[-1]} does not match projection input {W_proj.shape[0]}")
    return E @ W_proj


def pool(E_out, strategy: str = "mean"):
    """Collapse the time axis (second to last) of ``(..., L, d)``."""
    E_out = np.asarray(E_out)
    if E_out.ndim < 2 or E_out.shape[-2] == 0:
        raise ValueError("cannot pool an empty sequence")
    if strategy == "mean":
        # shifted by the first row: exact on constant sequences
        first = E_out[..., :1, :]
        return first[..., 0, :] + (E_out - first).mean(axis=-2)
    if strategy == "max":
        return E_out.max(axis=-2)
    if strategy == "fl_mean":
        return 0.5 * (E_out[..., 0, :] + E_out[..., -1, :])
    if strategy == "last":
        return E_out[..., -1, :].copy()
    raise ValueError(f"unknown pooling {strategy!r}; expected one of {POOLINGS}")


def pool_backward(dz, E_out, strategy: str):
    dE = np.zeros_like(E_out)
    L = E_out.shape[-2]
    if strategy == "mean":
        dE += dz[..., None, :] / L
    elif strategy == "max":
        idx = E_out.argmax(axis=-2)
        np.put_along_axis(dE, idx[..., None, :], dz[..., None, :], axis=-2)
    elif strategy == "fl_mean":
        dE[..., 0, :] += 0.5 * dz
        dE[..., -1, :] += 0.5 * dz
    elif strategy == "last":
        dE[..., -1, :] = dz
    else:
        raise ValueError(f"unknown pooling {strategy!r}")
    return dE


def regress(z, params: dict):
    """Affine -> ReLU -> affine; returns ``y_hat`` with the trailing unit axis dropped."""
    a1 = z @ params["head.W1"] + params["head.b1"]
    r = np.maximum(a1, 0)
    return (r @ params["head.W2"] + params["head.b2"])[..., 0]


def regress_backward(dy, z, params: dict):
    a1 = z @ params["head.W1"] + params["head.b1"]
    r = np.maximum(a1, 0)
    dy2 = dy[..., None]
    grads = {"head.W2": r.reshape(-1, r.shape[-1]).T @ dy2.reshape(-1, 1),
             "head.b2": dy2.reshape(-1, 1).sum(axis=0)}
    dr = dy2 @ params["head.W2"].T
    da1 = dr * (a1 > 0)
    grads["head.W1"] = z.reshape(-1, z.shape[-1]).T @ da1.reshape(-1, da1.shape[-1])
    grads["head.b1"] = da1.reshape(-1, da1.shape[-1]).sum(axis=0)
    dz = da1 @ params["head.W1"].T
    return dz, grads


def mse_loss(y_hat, y) -> float:
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y_hat.size == 0:
        raise ValueError("mse_loss of an empty batch")
    if y_hat.shape != y.shape:
        raise DimensionError(f"prediction length {y_hat.size} != target length {y.size}")
    return float(np.mean((y_hat - y) ** 2))


# ---------------------------------------------------------------- full model

@dataclass
class ForwardCache:
    E: np.ndarray
    E_proj: np.ndarray
    E_out: np.ndarray
    z: np.ndarray
    stack: object = None
    blocks: list = field(default_factory=list)


def _check_input(E, config: PredictorConfig):
    E = np.asarray(E)
    if E.ndim not in (2, 3):
        raise DimensionError(f"expected (L, D) or (B, L, D) features, got shape {E.shape}")
    if E.shape[-1] != config.d_in:
        raise DimensionError(
            f"feature width mismatch: config expects {config.d_in} "
            f"({config.feature_source}), got {E.shape[-1]}")
    if E.shape[-2] < 1:
        raise ValueError("empty sequence")
    return E


def forward_batch(E, params: dict, config: PredictorConfig, cache: bool = False):
    """Predict for ``(B, L, D)`` (or a single ``(L, D)``) equal-length input."""
    E = _check_input(E, config)
    E = E.astype(params["proj.W"].dtype, copy=False)
    E_proj = project(E, params["proj.W"])
    blocks = []
    stack_cache = None
    if config.bypass_xlstm:
        E_out = E_proj
    else:
        blocks = block_params(params, len(config.layout))
        E_out, stack_cache = xlstm.stack_forward_cached(E_proj, config.layout, blocks)
    z = pool(E_out, config.pooling)
    y_hat = regress(z, params)
    if cache:
        return y_hat, ForwardCache(E, E_proj, E_out, z, stack_cache, blocks)
    return y_hat


def backward_batch(dy, params: dict, config: PredictorConfig, fc: ForwardCache) -> dict:
    """Gradients of a scalar loss given ``dy = dLoss/dy_hat``."""
    dz, grads = regress_backward(dy, fc.z, params)
    dE_out = pool_backward(dz, fc.E_out, config.pooling)
    for k, v in params.items():
        if k.startswith("block"):
            grads[k] = np.zeros_like(v)
    if config.bypass_xlstm:
        dE_proj = dE_out
    else:
        dE_proj, per_block = xlstm.stack_backward(dE_out, fc.stack, fc.blocks)
        for i, g in enumerate(per_block):
            for name, val in g.items():
                grads[f"block{i}.{name}"] = val
    d = fc.E.shape[-1]
    grads["proj.W"] = fc.E.reshape(-1, d).T @ dE_proj.reshape(-1, dE_proj.shape[-1])
    return {k: grads[k].astype(params[k].dtype, copy=False).reshape(params[k].shape) for k in params}


def loss_and_grads(E, y, params: dict, config: PredictorConfig):
    """MSE over a same-length batch and its gradient for every parameter."""
    y_hat, fc = forward_batch(E, params, config, cache=True)
    y_hat = np.atleast_1d(y_hat)
    y = np.asarray(y, dtype=y_hat.dtype).reshape(y_hat.shape)
    n = y_hat.size
    loss = mse_loss(y_hat, y)
    dy = (2.0 / n) * (y_hat - y)
    if fc.E.ndim == 2:
        dy = dy[0]
    return loss, backward_batch(dy, params, config, fc), y_hat


def forward(E, params: dict, config: PredictorConfig, sample_id: str = "",
            mos_range: tuple | None = None) -> Prediction:
    """Single-sequence prediction. ``mos_range`` enables the 5-level label."""
    E = np.asarray(E)
    if E.ndim != 2:
        raise DimensionError(f"forward takes one (L, D) sequence, got shape {E.shape}")
    y_hat = float(forward_batch(E, params, config))
    label = None
    if mos_range is not None:
        from .protocol import mos_to_label
        lo, hi = mos_range
        label = mos_to_label(min(max(y_hat, lo), hi), mos_range).index
    return Prediction(sample_id, y_hat, label, config.variant)


# ---------------------------------------------------------------- checkpoints

def dump_checkpoint(config: PredictorConfig, params: dict, extra: dict | None = None) -> bytes:
    """Serialize to the ``M3CK`` binary layout.

    magic(4) | version u32 | config_len u32 | config JSON (utf-8) |
    n_tensors u32 | per tensor: name_len u32, name, ndim u32, dims u32*ndim,
    float32 little-endian data
    """
    meta = {"config": config.to_dict()}
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    names = list(param_shapes(config))
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        enc = name.encode("utf-8")
        buf.write(struct.pack("<I", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class CheckpointError(ValueError):
    pass


def parse_checkpoint(data: bytes):
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    view = memoryview(data)
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    version, clen = take("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(view[pos:pos + clen]).decode("utf-8"))
    pos += clen
    config = PredictorConfig.from_dict(meta["config"])
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        nbytes = 4 * int(np.prod(shape))
        if pos + nbytes > len(data):
            raise CheckpointError(f"truncated tensor {name}: need {nbytes} bytes, have {len(data) - pos}")
        params[name] = np.frombuffer(data, dtype="<f4", count=int(np.prod(shape)), offset=pos) \
            .reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} unexpected trailing bytes after the last tensor")
    expected = param_shapes(config)
    if list(params) != list(expected):
        raise CheckpointError("checkpoint tensors do not match its config")
    for name, shape in expected.items():
        if tuple(params[name].shape) != tuple(shape):
            raise CheckpointError(f"{name}: shape {params[name].shape} != {shape}")
    return config, params, meta.get("extra", {})


def save_checkpoint(path, config: PredictorConfig, params: dict, extra: dict | None = None) -> None:
    atomic_write_bytes(path, dump_checkpoint(config, params, extra))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def tiny_config(**overrides) -> PredictorConfig:
    """The gradient-check preset: 32-wide features, d_h=8, layout [m, s]."""
    base = PredictorConfig(d_vocab=32, d_h=8, layout=(xlstm.MLSTM, xlstm.SLSTM))
    return replace(base, **overrides)
