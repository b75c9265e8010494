"""sLSTM / mLSTM blocks with exponential gating, stacked with pre-norm residuals.

All scans accept ``(L, d)`` or ``(B, L, d)`` input and keep whatever dtype the
parameters carry. Backward passes are written out by hand; the
``*_cached`` variants return the activation record that the matching
``*_backward`` consumes.

Cell equations (per time step, ``x`` is the layer-normalized block input):

sLSTM::

    z = tanh(Wz x + Rz h + bz)            i~, f~, o~ analogous
    m = max(f~ + m_prev, i~)
    i' = exp(i~ - m)      f' = exp(f~ + m_prev - m)
    c = f' c_prev + i' z  n = f' n_prev + i'
    h = sigmoid(o~) * c / n

mLSTM (per head, gates are one scalar per head and see only ``x``)::

    q = Wq x   k = Wk x / sqrt(dk)   v = Wv x
    C = f' C_prev + i' v k^T           n = f' n_prev + i' k
    h = sigmoid(Wo x + bo) * (C q) / max(|n . q|, 1)
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, init_params, spawn_seeds, TRAIN_DTYPE

MLSTM = "mLSTM"
SLSTM = "sLSTM"
DEFAULT_LAYOUT = (MLSTM, SLSTM, MLSTM, MLSTM)
LN_EPS = 1e-5

_KIND_ALIASES = {"m": MLSTM, "mlstm": MLSTM, "s": SLSTM, "slstm": SLSTM}


def parse_kind(kind: str) -> str:
    try:
        return _KIND_ALIASES[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown block kind {kind!r}; expected mLSTM or sLSTM") from None


@dataclass(frozen=True)
class BlockLayout:
    kinds: tuple = DEFAULT_LAYOUT
    d_h: int = 512
    heads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(parse_kind(k) for k in self.kinds))
        if self.d_h < 1:
            raise ValueError("d_h must be >= 1")
        if self.heads < 1 or self.d_h % self.heads:
            raise ValueError(f"heads={self.heads} must divide d_h={self.d_h}")

    def __len__(self):
        return len(self.kinds)


@dataclass
class CellState:
    """Recurrent state carried across time steps for one block."""

    kind: str
    m: np.ndarray
    n: np.ndarray
    c: np.ndarray | None = None  # sLSTM cell
    h: np.ndarray | None = None  # sLSTM hidden
    C: np.ndarray | None = None  # mLSTM matrix memory

    @classmethod
    def zeros(cls, kind: str, batch: int, d_h: int, heads: int = 1, dtype=TRAIN_DTYPE):
        if kind == SLSTM:
            z = lambda: np.zeros((batch, d_h), dtype=dtype)  # noqa: E731
            return cls(kind, m=z(), n=z(), c=z(), h=z())
        dk = d_h // heads
        return cls(kind,
                   m=np.zeros((batch, heads), dtype=dtype),
                   n=np.zeros((batch, heads, dk), dtype=dtype),
                   C=np.zeros((batch, heads, dk, dk), dtype=dtype))


# ---------------------------------------------------------------- parameters

def block_param_shapes(kind: str, d_h: int, heads: int = 1) -> dict:
    shapes = {"ln_g": (d_h,), "ln_b": (d_h,)}
    if kind == SLSTM:
        shapes.update(W=(d_h, 4 * d_h), R=(d_h, 4 * d_h), b=(4 * d_h,))
    else:
        shapes.update(Wq=(d_h, d_h), Wk=(d_h, d_h), Wv=(d_h, d_h), Wo=(d_h, d_h), bo=(d_h,),
                      wi=(d_h, heads), bi=(heads,), wf=(d_h, heads), bf=(heads,))
    return shapes


def block_param_count(kind: str, d_h: int, heads: int = 1) -> int:
    return sum(int(np.prod(s)) for s in block_param_shapes(kind, d_h, heads).values())


def init_block(kind: str, d_h: int, heads: int = 1, seed=0, dtype=TRAIN_DTYPE) -> dict:
    kind = parse_kind(kind)
    shapes = block_param_shapes(kind, d_h, heads)
    seeds = spawn_seeds(seed, len(shapes))
    params = {}
    for (name, shape), s in zip(shapes.items(), seeds):
        if name == "ln_g":
            params[name] = init_params(shape, "constant", value=1.0, dtype=dtype)
        elif len(shape) == 1:
            params[name] = init_params(shape, "zeros", dtype=dtype)
        else:
            params[name] = init_params(shape, "uniform_fan", seed=s, dtype=dtype)
    return params


def zero_block(kind: str, d_h: int, heads: int = 1, dtype=TRAIN_DTYPE) -> dict:
    return {name: np.zeros(shape, dtype=dtype)
            for name, shape in block_param_shapes(parse_kind(kind), d_h, heads).items()}


def _as_batch(x: np.ndarray):
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise DimensionError(f"expected (L, d) or (B, L, d) input, got shape {x.shape}")
    return x, False


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------- layer norm

def layernorm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layernorm_backward(dy, cache):
    xhat, rstd, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


# ---------------------------------------------------------------- sLSTM

def slstm_forward_cached(x_seq, p: dict, s0: CellState | None = None):
    x, squeeze = _as_batch(x_seq)
    B, L, d = x.shape
    if p["R"].shape[0] != d:
        raise DimensionError(f"sLSTM width {p['R'].shape[0]} does not match input width {d}")
    dtype = p["W"].dtype
    s = s0 if s0 is not None else CellState.zeros(SLSTM, B, d, dtype=dtype)
    pre = x @ p["W"] + p["b"]
    R = p["R"]
    names = ("z", "it", "ft", "o", "a", "f", "c", "n", "m", "h")
    rec = {k: np.empty((B, L, d), dtype=dtype) for k in names}
    c, n, m, h = s.c, s.n, s.m, s.h
    for t in range(L):
        g = pre[:, t] + h @ R
        z = np.tanh(g[:, :d])
        it, ft = g[:, d:2 * d], g[:, 2 * d:3 * d]
        o = _sigmoid(g[:, 3 * d:])
        m_new = np.maximum(ft + m, it)
        a = np.exp(it - m_new)
        f = np.exp(ft + m - m_new)
        c = f * c + a * z
        n = f * n + a
        h = o * c / n
        m = m_new
        for k, val in zip(names, (z, it, ft, o, a, f, c, n, m, h)):
            rec[k][:, t] = val
    rec.update(x=x, s0=s, squeeze=squeeze)
    out = rec["h"][0] if squeeze else rec["h"]
    return out, CellState(SLSTM, m=m, n=n, c=c, h=h), rec


def slstm_forward(x_seq, p: dict, s0: CellState | None = None):
    h, sL, _ = slstm_forward_cached(x_seq, p, s0)
    return h, sL


def slstm_backward(dh_seq, p: dict, rec: dict):
    """Gradients of a scalar loss w.r.t. the input sequence and ``p``."""
    dH, _ = _as_batch(dh_seq)
    x, s0 = rec["x"], rec["s0"]
    B, L, d = x.shape
    R = p["R"]
    dpre = np.empty((B, L, 4 * d), dtype=x.dtype)
    dc = np.zeros((B, d), dtype=x.dtype)
    dn = np.zeros_like(dc)
    dm = np.zeros_like(dc)
    dh_rec = np.zeros_like(dc)
    z, it, ft, o, a, f = (rec[k] for k in ("z", "it", "ft", "o", "a", "f"))
    c, n, m = rec["c"], rec["n"], rec["m"]
    for t in range(L - 1, -1, -1):
        c_prev = c[:, t - 1] if t else s0.c
        n_prev = n[:, t - 1] if t else s0.n
        m_prev = m[:, t - 1] if t else s0.m
        ct, nt, ot, at, ftt = c[:, t], n[:, t], o[:, t], a[:, t], f[:, t]
        dh = dH[:, t] + dh_rec
        do = dh * ct / nt
        dc = dc + dh * ot / nt
        dn = dn - dh * ot * ct / (nt * nt)
        df_ = dc * c_prev + dn * n_prev
        da = dc * z[:, t] + dn
        dz = dc * at
        dit = da * at
        dft = df_ * ftt
        dm_t = dm - da * at - df_ * ftt
        dm_prev = df_ * ftt
        forget_wins = (ft[:, t] + m_prev) >= it[:, t]
        dft = dft + np.where(forget_wins, dm_t, 0)
        dm_prev = dm_prev + np.where(forget_wins, dm_t, 0)
        dit = dit + np.where(forget_wins, 0, dm_t)
        g = dpre[:, t]
        g[:, :d] = dz * (1.0 - z[:, t] ** 2)
        g[:, d:2 * d] = dit
        g[:, 2 * d:3 * d] = dft
        g[:, 3 * d:] = do * ot * (1.0 - ot)
        dh_rec = g @ R.T
        dc = dc * ftt
        dn = dn * ftt
        dm = dm_prev
    h_prev = np.concatenate([s0.h[:, None], rec["h"][:, :-1]], axis=1)
    flat = dpre.reshape(-1, 4 * d)
    grads = {
        "W": x.reshape(-1, d).T @ flat,
        "R": h_prev.reshape(-1, d).T @ flat,
        "b": flat.sum(axis=0),
    }
    dx = dpre @ p["W"].T
    return (dx[0] if rec["squeeze"] else dx), grads


# ---------------------------------------------------------------- mLSTM

def mlstm_forward_cached(x_seq, p: dict, s0: CellState | None = None):
    x, squeeze = _as_batch(x_seq)
    B, L, d = x.shape
    if p["Wq"].shape[0] != d:
        raise DimensionError(f"mLSTM width {p['Wq'].shape[0]} does not match input width {d}")
    nh = p["wi"].shape[1]
    dk = d // nh
    dtype = p["Wq"].dtype
    s = s0 if s0 is not None else CellState.zeros(MLSTM, B, d, nh, dtype=dtype)
    Q = (x @ p["Wq"]).reshape(B, L, nh, dk)
    K = (x @ p["Wk"]).reshape(B, L, nh, dk) / np.sqrt(dk).astype(dtype)
    V = (x @ p["Wv"]).reshape(B, L, nh, dk)
    O = _sigmoid(x @ p["Wo"] + p["bo"])
    It = x @ p["wi"] + p["bi"]
    Ft = x @ p["wf"] + p["bf"]
    Cs = np.empty((B, L, nh, dk, dk), dtype=dtype)
    Ns = np.empty((B, L, nh, dk), dtype=dtype)
    Ms = np.empty((B, L, nh), dtype=dtype)
    A = np.empty_like(Ms)
    Fg = np.empty_like(Ms)
    U = np.empty_like(Ns)
    Dot = np.empty_like(Ms)
    C, n, m = s.C, s.n, s.m
    for t in range(L):
        m_new = np.maximum(Ft[:, t] + m, It[:, t])
        a = np.exp(It[:, t] - m_new)
        f = np.exp(Ft[:, t] + m - m_new)
        q, k, v = Q[:, t], K[:, t], V[:, t]
        C = f[..., None, None] * C + a[..., None, None] * (v[..., :, None] * k[..., None, :])
        n = f[..., None] * n + a[..., None] * k
        m = m_new
        U[:, t] = np.einsum("bhij,bhj->bhi", C, q)
        Dot[:, t] = (n * q).sum(axis=-1)
        Cs[:, t], Ns[:, t], Ms[:, t], A[:, t], Fg[:, t] = C, n, m, a, f
    den = np.maximum(np.abs(Dot), 1.0)
    Ht = (U / den[..., None]).reshape(B, L, d)
    H = O * Ht
    rec = dict(x=x, s0=s, squeeze=squeeze, Q=Q, K=K, V=V, O=O, It=It, Ft=Ft, C=Cs, N=Ns,
               M=Ms, A=A, F=Fg, U=U, Dot=Dot, den=den, Ht=Ht)
    return (H[0] if squeeze else H), CellState(MLSTM, m=m, n=n, C=C), rec


def mlstm_forward(x_seq, p: dict, s0: CellState | None = None):
    h, sL, _ = mlstm_forward_cached(x_seq, p, s0)
    return h, sL


def mlstm_backward(dh_seq, p: dict, rec: dict):
    dH, _ = _as_batch(dh_seq)
    x, s0 = rec["x"], rec["s0"]
    B, L, d = x.shape
    nh = p["wi"].shape[1]
    dk = d // nh
    Q, K, V, O, Ht = rec["Q"], rec["K"], rec["V"], rec["O"], rec["Ht"]
    dO_pre = dH * Ht * O * (1.0 - O)
    dHt = (dH * O).reshape(B, L, nh, dk)
    den, Dot, U = rec["den"], rec["Dot"], rec["U"]
    dU = dHt / den[..., None]
    dden = -(dHt * U).sum(axis=-1) / (den * den)
    dDot = np.where(np.abs(Dot) > 1.0, dden * np.sign(Dot), 0.0).astype(x.dtype)

    dQ = np.empty_like(Q)
    dK = np.empty_like(K)
    dV = np.empty_like(V)
    dIt = np.empty_like(rec["It"])
    dFt = np.empty_like(rec["Ft"])
    dC = np.zeros((B, nh, dk, dk), dtype=x.dtype)
    dn = np.zeros((B, nh, dk), dtype=x.dtype)
    dm = np.zeros((B, nh), dtype=x.dtype)
    Cs, Ns, Ms, A, Fg = rec["C"], rec["N"], rec["M"], rec["A"], rec["F"]
    It, Ft = rec["It"], rec["Ft"]
    for t in range(L - 1, -1, -1):
        C_prev = Cs[:, t - 1] if t else s0.C
        n_prev = Ns[:, t - 1] if t else s0.n
        m_prev = Ms[:, t - 1] if t else s0.m
        q, k, v = Q[:, t], K[:, t], V[:, t]
        a, f = A[:, t], Fg[:, t]
        du, dd = dU[:, t], dDot[:, t]
        dC = dC + du[..., :, None] * q[..., None, :]
        dQ[:, t] = np.einsum("bhij,bhi->bhj", Cs[:, t], du) + dd[..., None] * Ns[:, t]
        dn = dn + dd[..., None] * q
        df_ = (dC * C_prev).sum(axis=(-2, -1)) + (dn * n_prev).sum(axis=-1)
        dCk = np.einsum("bhij,bhj->bhi", dC, k)
        da = (dCk * v).sum(axis=-1) + (dn * k).sum(axis=-1)
        dV[:, t] = a[..., None] * dCk
        dK[:, t] = a[..., None] * (np.einsum("bhij,bhi->bhj", dC, v) + dn)
        dit = da * a
        dft = df_ * f
        dm_t = dm - da * a - df_ * f
        dm_prev = df_ * f
        forget_wins = (Ft[:, t] + m_prev) >= It[:, t]
        dft = dft + np.where(forget_wins, dm_t, 0)
        dm_prev = dm_prev + np.where(forget_wins, dm_t, 0)
        dit = dit + np.where(forget_wins, 0, dm_t)
        dIt[:, t], dFt[:, t] = dit, dft
        dC = f[..., None, None] * dC
        dn = f[..., None] * dn
        dm = dm_prev

    xf = x.reshape(-1, d)
    dq = dQ.reshape(B * L, d)
    dkx = dK.reshape(B * L, d) / np.sqrt(dk).astype(x.dtype)
    dv = dV.reshape(B * L, d)
    do = dO_pre.reshape(B * L, d)
    di = dIt.reshape(B * L, nh)
    dfg = dFt.reshape(B * L, nh)
    grads = {
        "Wq": xf.T @ dq, "Wk": xf.T @ dkx, "Wv": xf.T @ dv, "Wo": xf.T @ do,
        "bo": do.sum(axis=0),
        "wi": xf.T @ di, "bi": di.sum(axis=0),
        "wf": xf.T @ dfg, "bf": dfg.sum(axis=0),
    }
    dx = (dq @ p["Wq"].T + dkx @ p["Wk"].T + dv @ p["Wv"].T + do @ p["Wo"].T
          + di @ p["wi"].T + dfg @ p["wf"].T).reshape(B, L, d)
    return (dx[0] if rec["squeeze"] else dx), grads


# ---------------------------------------------------------------- blocks and stack

_CELLS = {
    SLSTM: (slstm_forward_cached, slstm_backward),
    MLSTM: (mlstm_forward_cached, mlstm_backward),
}


def block_forward_cached(x, kind: str, p: dict):
    xn, ln_cache = layernorm_forward(x, p["ln_g"], p["ln_b"])
    h, _, rec = _CELLS[kind][0](xn, p)
    return x + h, (ln_cache, rec)


def block_backward(dy, kind: str, p: dict, cache):
    ln_cache, rec = cache
    dxn, grads = _CELLS[kind][1](dy, p, rec)
    dx_ln, grads["ln_g"], grads["ln_b"] = layernorm_backward(dxn, ln_cache)
    return dy + dx_ln, grads


def _fingerprint(params: list) -> int:
    crc = 0
    for p in params:
        for name in sorted(p):
            crc = zlib.crc32(np.ascontiguousarray(p[name]).view(np.uint8), crc)
    return crc


@dataclass
class StackCache:
    kinds: tuple
    blocks: list = field(default_factory=list)
    fingerprint: int = 0
    squeeze: bool = False


def stack_forward_cached(h0, layout: BlockLayout | tuple, params: list):
    kinds = layout.kinds if isinstance(layout, BlockLayout) else tuple(parse_kind(k) for k in layout)
    if not kinds:
        raise ValueError("empty block layout")
    if len(kinds) != len(params):
        raise ValueError(f"layout has {len(kinds)} blocks but {len(params)} parameter sets given")
    h, squeeze = _as_batch(h0)
    cache = StackCache(kinds, squeeze=squeeze)
    for kind, p in zip(kinds, params):
        h, c = block_forward_cached(h, kind, p)
        cache.blocks.append(c)
    cache.fingerprint = _fingerprint(params)
    return (h[0] if squeeze else h), cache


def stack_forward(h0, layout: BlockLayout | tuple, params: list):
    """Apply blocks in order: each is ``x + cell(layernorm(x))``."""
    return stack_forward_cached(h0, layout, params)[0]


def stack_backward(grad_out, cache: StackCache | None, params: list):
    """Reverse pass through the stack; returns ``(grad_in, [per-block grads])``."""
    if cache is None or len(cache.blocks) != len(cache.kinds):
        raise RuntimeError("no activation cache; run stack_forward_cached first")
    if cache.fingerprint != _fingerprint(params):
        raise RuntimeError("stale activation cache: parameters changed since the forward pass")
    g, _ = _as_batch(grad_out)
    per_block = [None] * len(params)
    for i in range(len(params) - 1, -1, -1):
        g, per_block[i] = block_backward(g, cache.kinds[i], params[i], cache.blocks[i])
    return (g[0] if cache.squeeze else g), per_block
