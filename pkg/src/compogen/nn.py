"""Numpy neural substrate with explicit forward/backward passes.

Everything trainable lives in a ParamStore keyed by name, with deterministic
per-name initialization. Modules cache activations on forward and accumulate
parameter gradients on backward; only parameters that actually participated in
a backward pass are marked touched, and the optimizer steps touched parameters
only. That makes "unused module stays bit-identical to initialization" an
exact property rather than an approximate one.

Training math runs in float32; gradient checking builds float64 stores.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _name_seed(seed: int, name: str) -> list[int]:
    digest = hashlib.sha256(name.encode()).digest()
    return [seed & 0xFFFFFFFF, int.from_bytes(digest[:8], "little")]


class ParamStore:
    """Named parameter tensors plus gradient accumulators."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = seed
        self.dtype = dtype
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.touched: set[str] = set()

    def param(self, name: str, shape: tuple[int, ...], init: str = "fanin",
              scale: float | None = None) -> np.ndarray:
        if name in self.values:
            p = self.values[name]
            if p.shape != tuple(shape):
                raise ValueError(f"param {name!r} exists with shape {p.shape}, "
                                 f"requested {tuple(shape)}")
            return p
        rng = np.random.default_rng(_name_seed(self.seed, name))
        if init == "fanin":
            bound = 1.0 / math.sqrt(shape[-1] if len(shape) == 1 else shape[0])
            v = rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            v = np.zeros(shape)
        elif init == "ones":
            v = np.ones(shape)
        elif init == "normal":
            v = rng.normal(0.0, scale if scale is not None else 0.02, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.values[name] = v.astype(self.dtype)
        return self.values[name]

    def add_grad(self, name: str, grad: np.ndarray) -> None:
        if name not in self.values:
            raise KeyError(f"gradient for unknown param {name!r}")
        if grad.shape != self.values[name].shape:
            raise ValueError(f"grad shape {grad.shape} != param shape "
                             f"{self.values[name].shape} for {name!r}")
        if name in self.grads:
            self.grads[name] += grad
        else:
            self.grads[name] = grad.astype(self.dtype, copy=True)
        self.touched.add(name)

    def zero_grad(self) -> None:
        self.grads.clear()
        self.touched.clear()

    def param_count(self) -> int:
        return sum(v.size for v in self.values.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.values.items()}


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 bias: bool = True, zero_init: bool = False):
        self.store = store
        self.name = name
        self.d_in = d_in
        self.d_out = d_out
        init = "zeros" if zero_init else "fanin"
        self.w = store.param(f"{name}.w", (d_in, d_out), init=init)
        self.b = store.param(f"{name}.b", (d_out,), init="zeros") if bias else None
        self._x = None
        self._shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        self._x = x.reshape(-1, self.d_in)
        y = self._x @ self.w
        if self.b is not None:
            y = y + self.b
        return y.reshape(*self._shape[:-1], self.d_out)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        d2 = dout.reshape(-1, self.d_out)
        self.store.add_grad(f"{self.name}.w", self._x.T @ d2)
        if self.b is not None:
            self.store.add_grad(f"{self.name}.b", d2.sum(axis=0))
        return (d2 @ self.w.T).reshape(self._shape)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int,
                 affine: bool = True, eps: float = 1e-5):
        self.store = store
        self.name = name
        self.d = d
        self.eps = eps
        self.affine = affine
        if affine:
            self.g = store.param(f"{name}.g", (d,), init="ones")
            self.b = store.param(f"{name}.b", (d,), init="zeros")
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        if self.affine:
            return xhat * self.g + self.b
        return xhat

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv = self._cache
        if self.affine:
            flat_d = dout.reshape(-1, self.d)
            flat_x = xhat.reshape(-1, self.d)
            self.store.add_grad(f"{self.name}.g", (flat_d * flat_x).sum(axis=0))
            self.store.add_grad(f"{self.name}.b", flat_d.sum(axis=0))
            dxhat = dout * self.g
        else:
            dxhat = dout
        m = dxhat.mean(axis=-1, keepdims=True)
        mx = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return (dxhat - m - xhat * mx) * inv


class GELU:
    """Exact error-function form, smooth enough for tight gradient checks."""

    def __init__(self):
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return 0.5 * x * (1.0 + erf(x / _SQRT2))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x = self._x
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return dout * (cdf + x * pdf)


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dout, 0.0)


class Tanh:
    def __init__(self):
        self._y = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._y = np.tanh(x)
        return self._y

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * (1.0 - self._y * self._y)


class FeedForward:
    def __init__(self, store: ParamStore, name: str, d: int, ratio: int = 4):
        self.fc1 = Linear(store, f"{name}.fc1", d, ratio * d)
        self.act = GELU()
        self.fc2 = Linear(store, f"{name}.fc2", ratio * d, d)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.fc2.forward(self.act.forward(self.fc1.forward(x)))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return self.fc1.backward(self.act.backward(self.fc2.backward(dout)))


class MultiHeadSelfAttention:
    """Scaled dot-product self-attention; keeps softmax weights for analysis."""

    def __init__(self, store: ParamStore, name: str, d: int, heads: int):
        if d % heads != 0:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.h = heads
        self.dh = d // heads
        self.wq = Linear(store, f"{name}.wq", d, d)
        # a key bias shifts every score row by a constant and cancels in the
        # softmax; leaving it out avoids dead parameters
        self.wk = Linear(store, f"{name}.wk", d, d, bias=False)
        self.wv = Linear(store, f"{name}.wv", d, d)
        self.wo = Linear(store, f"{name}.wo", d, d)
        self._cache = None
        self.last_weights: np.ndarray | None = None

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, k, _ = x.shape
        return x.reshape(b, k, self.h, self.dh).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, h, k, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, k, h * dh)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite attention input")
        q = self._split(self.wq.forward(x))
        k = self._split(self.wk.forward(x))
        v = self._split(self.wv.forward(x))
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(self.dh)
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        p = e / e.sum(axis=-1, keepdims=True)
        ctx = p @ v
        self._cache = (q, k, v, p)
        self.last_weights = p
        return self.wo.forward(self._merge(ctx))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        q, k, v, p = self._cache
        dctx = self._split(self.wo.backward(dout))
        dp = dctx @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ dctx
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds = ds / math.sqrt(self.dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dx = self.wq.backward(self._merge(dq))
        dx = dx + self.wk.backward(self._merge(dk))
        dx = dx + self.wv.backward(self._merge(dv))
        return dx


def attention_forward(block: MultiHeadSelfAttention,
                      tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single-sequence attention: (K, d) in, (K, d) out plus (H, K, K) weights."""
    out = block.forward(tokens[None])
    return out[0], block.last_weights[0]


class DiTBlock:
    """Pre-norm transformer block with adaptive scale/shift/gate conditioning.

    The modulation head is zero-initialized, so a fresh block is the identity
    map regardless of the conditioning vector.
    """

    def __init__(self, store: ParamStore, name: str, d: int, heads: int,
                 ff_ratio: int = 4):
        self.d = d
        self.ln1 = LayerNorm(store, f"{name}.ln1", d, affine=False)
        self.attn = MultiHeadSelfAttention(store, f"{name}.attn", d, heads)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d, affine=False)
        self.ff = FeedForward(store, f"{name}.ff", d, ff_ratio)
        self.mod_act = GELU()
        self.mod = Linear(store, f"{name}.mod", d, 6 * d, zero_init=True)
        self._cache = None

    def forward(self, x: np.ndarray, cond: np.ndarray) -> np.ndarray:
        m = self.mod.forward(self.mod_act.forward(cond))
        shift1, scale1, gate1, shift2, scale2, gate2 = np.split(m, 6, axis=-1)
        h1 = self.ln1.forward(x)
        a_in = h1 * (1.0 + scale1[:, None, :]) + shift1[:, None, :]
        a_out = self.attn.forward(a_in)
        x1 = x + gate1[:, None, :] * a_out
        h2 = self.ln2.forward(x1)
        f_in = h2 * (1.0 + scale2[:, None, :]) + shift2[:, None, :]
        f_out = self.ff.forward(f_in)
        out = x1 + gate2[:, None, :] * f_out
        self._cache = (h1, a_out, h2, f_out, scale1, gate1, scale2, gate2)
        return out

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h1, a_out, h2, f_out, scale1, gate1, scale2, gate2 = self._cache
        dgate2 = (dout * f_out).sum(axis=1)
        df_out = dout * gate2[:, None, :]
        df_in = self.ff.backward(df_out)
        dscale2 = (df_in * h2).sum(axis=1)
        dshift2 = df_in.sum(axis=1)
        dh2 = df_in * (1.0 + scale2[:, None, :])
        dx1 = dout + self.ln2.backward(dh2)
        dgate1 = (dx1 * a_out).sum(axis=1)
        da_out = dx1 * gate1[:, None, :]
        da_in = self.attn.backward(da_out)
        dscale1 = (da_in * h1).sum(axis=1)
        dshift1 = da_in.sum(axis=1)
        dh1 = da_in * (1.0 + scale1[:, None, :])
        dx = dx1 + self.ln1.backward(dh1)
        dm = np.concatenate([dshift1, dscale1, dgate1, dshift2, dscale2, dgate2],
                            axis=-1)
        dcond = self.mod_act.backward(self.mod.backward(dm))
        return dx, dcond


def sinusoidal_features(log_sigma: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sin/cos features of the log noise level; shape (..., dim)."""
    if dim % 2 != 0:
        raise ValueError("feature dimension must be even")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(log_sigma, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    if step < 0 or total_steps < 1:
        raise ValueError("step must be >= 0 and total_steps >= 1")
    s = min(step, total_steps)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * s / total_steps))


class AdamW:
    """Decoupled weight decay plus bias-corrected adaptive moments.

    Steps only the parameters touched since the last zero_grad, with a
    per-parameter step counter so bias correction stays exact when different
    parameter subsets train at different times.
    """

    def __init__(self, store: ParamStore, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, lr: float | None = None) -> list[str]:
        lr = self.lr if lr is None else lr
        names = sorted(self.store.touched)
        for name in names:
            if not np.all(np.isfinite(self.store.grads[name])):
                raise FloatingPointError(f"non-finite gradient for {name!r}")
        for name in names:
            g = self.store.grads[name]
            p = self.store.values[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            p *= 1.0 - lr * self.weight_decay
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            mhat = self.m[name] / (1.0 - self.b1 ** t)
            vhat = self.v[name] / (1.0 - self.b2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)
        return names


class EMA:
    """Exponential moving average of parameter values."""

    def __init__(self, store: ParamStore, decay: float = 0.999):
        if not 0.0 <= decay < 1.0:
            raise ValueError("decay must be in [0, 1)")
        self.decay = decay
        self.shadow = store.snapshot()

    def update(self, store: ParamStore, names: list[str] | None = None) -> None:
        for name in (names if names is not None else store.values):
            if name not in self.shadow:
                self.shadow[name] = store.values[name].copy()
                continue
            self.shadow[name] = (self.decay * self.shadow[name]
                                 + (1.0 - self.decay) * store.values[name])

    def copy_to(self, store: ParamStore) -> None:
        # in place: live modules hold references to the value arrays
        for name, value in self.shadow.items():
            if name in store.values:
                store.values[name][...] = value
            else:
                store.values[name] = value.astype(store.dtype, copy=True)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float]

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_err < tolerance


def gradcheck(loss_fn, store: ParamStore, h: float = 1e-5,
              names: list[str] | None = None,
              floor: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    loss_fn() must run forward+backward into the store and return the scalar
    loss. The store should be float64 for the stated tolerances to hold. The
    denominator is floored so that gradients near zero are compared at the
    floor's absolute scale instead of amplifying finite-difference noise.
    """
    store.zero_grad()
    base = float(loss_fn())
    assert math.isfinite(base)
    analytic = {k: v.copy() for k, v in store.grads.items()}
    check = names if names is not None else sorted(analytic)
    per_param = {}
    worst = ("", 0.0)
    for name in check:
        p = store.values[name]
        a = analytic.get(name, np.zeros_like(p))
        num = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_n = num.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            store.zero_grad()
            up = float(loss_fn())
            flat_p[i] = orig - h
            store.zero_grad()
            down = float(loss_fn())
            flat_p[i] = orig
            flat_n[i] = (up - down) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        err = float((np.abs(a - num) / denom).max()) if flat_p.size else 0.0
        per_param[name] = err
        if err > worst[1]:
            worst = (name, err)
    store.zero_grad()
    loss_fn()
    return GradCheckReport(worst[1], worst[0], per_param)


def save_checkpoint(path: str, store: ParamStore, step: int,
                    optimizer: AdamW | None = None, ema: EMA | None = None,
                    meta: dict | None = None) -> None:
    payload = {}
    for name, value in store.values.items():
        payload["p::" + name] = value.astype(np.float32)
    if optimizer is not None:
        for name in optimizer.m:
            payload["m::" + name] = optimizer.m[name].astype(np.float32)
            payload["v::" + name] = optimizer.v[name].astype(np.float32)
        payload["opt_t::names"] = np.array(sorted(optimizer.t), dtype=object)
        payload["opt_t::steps"] = np.array(
            [optimizer.t[k] for k in sorted(optimizer.t)], dtype=np.int64)
    if ema is not None:
        for name, value in ema.shadow.items():
            payload["e::" + name] = value.astype(np.float32)
    header = dict(meta or {})
    header["step"] = step
    payload["meta"] = np.array(json.dumps(header, sort_keys=True))
    np.savez_compressed(path, **payload)


def load_checkpoint(path: str, store: ParamStore, optimizer: AdamW | None = None,
                    ema: EMA | None = None, use_ema: bool = False) -> dict:
    with np.load(path, allow_pickle=True) as z:
        meta = json.loads(str(z["meta"]))
        prefix = "e::" if use_ema else "p::"
        for key in z.files:
            if key.startswith(prefix):
                name = key[len(prefix):]
                value = z[key].astype(store.dtype)
                if name in store.values:
                    store.values[name][...] = value
                else:
                    store.values[name] = value
        if optimizer is not None:
            for key in z.files:
                if key.startswith("m::"):
                    optimizer.m[key[3:]] = z[key].astype(store.dtype)
                elif key.startswith("v::"):
                    optimizer.v[key[3:]] = z[key].astype(store.dtype)
            if "opt_t::names" in z.files:
                names = z["opt_t::names"]
                steps = z["opt_t::steps"]
                optimizer.t = {str(n): int(s) for n, s in zip(names, steps)}
        if ema is not None:
            for key in z.files:
                if key.startswith("e::"):
                    ema.shadow[key[3:]] = z[key].astype(store.dtype)
    return meta
