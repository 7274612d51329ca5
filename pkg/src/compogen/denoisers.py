"""Four denoiser architectures behind one forward/backward contract.

Every variant maps (normalized transition row, log-noise feature, task id) to
a clean-row prediction of the same width. The transformer variants tokenize
the row and condition through adaptive scale/shift/gate heads; the monolithic
variant is a residual stack on the flat row with the conditioning embedding
added to the stream before every layer.

Codec keying is what separates the token variants:
  - semantic_compositional: one encoder/decoder pair per (axis, element),
    shared between current and next state, plus one pair each for action,
    reward and terminal;
  - semantic: one pair per axis (shared across that axis's elements);
  - standard: a single patch-size pair shared by all patches.

Because a codec participates in a forward pass only when its element is part
of the batch's task, gradients on excluded codecs are exactly zero and the
optimizer (which steps touched parameters only) leaves them bit-identical to
initialization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .edm import precond_coeffs
from .env import (
    OBJECT_BLOCK,
    OBJECTIVE_BLOCK,
    OBSTACLE_BLOCK,
    ROBOT_BLOCK,
    T_ACTION,
    T_NEXT_STATE,
    T_REWARD,
    T_TERMINAL,
    TRANSITION_DIM,
    TaskSpace,
    task_indicator,
)
from .nn import DiTBlock, GELU, LayerNorm, Linear, ParamStore, sinusoidal_features

VARIANTS = ("monolithic", "standard", "semantic", "semantic_compositional")

AXIS_NAMES = ("robot", "object", "obstacle", "objective")

# spans of the four per-axis factor blocks inside a single state vector
_STATE_BLOCKS = (ROBOT_BLOCK, OBJECT_BLOCK, OBSTACLE_BLOCK, OBJECTIVE_BLOCK)


class UnsupportedVariantError(ValueError):
    """Raised when an operation does not exist for the given architecture."""


@dataclass(frozen=True)
class TokenSpec:
    """One token: a named span of the flattened transition row."""
    name: str
    start: int
    stop: int
    axis: int | None = None    # 0..3 for state-factor tokens, else None
    kind: str = "state"        # state | action | reward | terminal | patch

    @property
    def width(self) -> int:
        return self.stop - self.start


def _check_partition(layout: tuple[TokenSpec, ...], dim: int) -> None:
    spans = sorted((t.start, t.stop) for t in layout)
    cursor = 0
    for start, stop in spans:
        if start != cursor or stop <= start:
            raise ValueError(f"token spans do not partition [0, {dim})")
        cursor = stop
    if cursor != dim:
        raise ValueError(f"token spans do not partition [0, {dim})")


def semantic_layout() -> tuple[TokenSpec, ...]:
    """Factor tokens over a transition row: 8 state tokens, then action,
    reward, terminal. Current and next state produce separate tokens whose
    codecs are shared."""
    toks = []
    for axis, block in enumerate(_STATE_BLOCKS):
        toks.append(TokenSpec(f"{AXIS_NAMES[axis]}_state", block.start,
                              block.stop, axis, "state"))
    off = T_NEXT_STATE.start
    for axis, block in enumerate(_STATE_BLOCKS):
        toks.append(TokenSpec(f"{AXIS_NAMES[axis]}_next", off + block.start,
                              off + block.stop, axis, "state"))
    toks.append(TokenSpec("action", T_ACTION.start, T_ACTION.stop, None, "action"))
    toks.append(TokenSpec("reward", T_REWARD, T_REWARD + 1, None, "reward"))
    toks.append(TokenSpec("terminal", T_TERMINAL, T_TERMINAL + 1, None, "terminal"))
    layout = tuple(toks)
    _check_partition(layout, TRANSITION_DIM)
    return layout


def patch_layout(dim: int, patch_size: int) -> tuple[TokenSpec, ...]:
    """Uniform patches; the last one may be narrower and is zero-padded."""
    if dim < 1 or patch_size < 1:
        raise ValueError("dim and patch_size must be positive")
    n = -(-dim // patch_size)
    layout = tuple(TokenSpec(f"patch_{i}", i * patch_size,
                             min((i + 1) * patch_size, dim), None, "patch")
                   for i in range(n))
    _check_partition(layout, dim)
    return layout


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture sizes shared by all variants.

    mono_width/mono_layers are sized so the flat residual stack lands within
    the capacity-parity band of the transformer variants at the same config.
    """
    width: int = 128
    depth: int = 4
    heads: int = 4
    ff_ratio: int = 4
    patch_size: int = 15
    noise_feature_dim: int = 128
    mono_width: int = 376
    mono_layers: int = 8

    def __post_init__(self):
        for field in ("width", "depth", "heads", "ff_ratio", "patch_size",
                      "noise_feature_dim", "mono_width", "mono_layers"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")
        if self.noise_feature_dim % 2 != 0:
            raise ValueError("noise_feature_dim must be even")


class _Codec:
    """Encoder/decoder pair between a raw span and the model width."""

    def __init__(self, store: ParamStore, name: str, span: int, width: int):
        self.enc = Linear(store, f"{name}.enc", span, width)
        self.dec = Linear(store, f"{name}.dec", width, span)
        self.name = name
        self.span = span

    def param_names(self) -> list[str]:
        return [f"{self.name}.enc.w", f"{self.name}.enc.b",
                f"{self.name}.dec.w", f"{self.name}.dec.b"]


class ContextEmbedder:
    """u = E_t(noise features) + E_n(task indicator), one vector per sample."""

    def __init__(self, store: ParamStore, name: str, width: int,
                 indicator_dim: int, feature_dim: int):
        self.feature_dim = feature_dim
        self.dtype = store.dtype
        self.e_t = Linear(store, f"{name}.et", feature_dim, width)
        self.e_n = Linear(store, f"{name}.en", indicator_dim, width)

    def forward(self, c_noise: np.ndarray, indicator: np.ndarray) -> np.ndarray:
        feats = sinusoidal_features(c_noise, self.feature_dim).astype(self.dtype)
        ind = indicator.astype(self.dtype)[None]
        return self.e_t.forward(feats) + self.e_n.forward(ind)

    def backward(self, dcond: np.ndarray) -> None:
        self.e_t.backward(dcond)
        self.e_n.backward(dcond.sum(axis=0, keepdims=True))


class TokenDenoiser:
    """Transformer over row tokens; covers the standard, semantic and
    semantic_compositional variants (they differ only in layout and codec
    keying)."""

    def __init__(self, store: ParamStore, variant: str, cfg: DenoiserConfig,
                 space: TaskSpace, dim: int = TRANSITION_DIM, name: str = "dit"):
        if variant not in ("standard", "semantic", "semantic_compositional"):
            raise ValueError(f"unknown token variant {variant!r}")
        if variant != "standard" and dim != TRANSITION_DIM:
            raise ValueError("factor layouts are defined on transition rows")
        self.variant = variant
        self.cfg = cfg
        self.space = space
        self.store = store
        self.dim = dim
        self.layout = (patch_layout(dim, cfg.patch_size) if variant == "standard"
                       else semantic_layout())
        self.context = ContextEmbedder(store, f"{name}.ctx", cfg.width,
                                       space.indicator_dim, cfg.noise_feature_dim)
        self._pos_name = f"{name}.pos"
        self.pos = store.param(self._pos_name, (len(self.layout), cfg.width),
                               init="normal", scale=0.02)
        self.blocks = [DiTBlock(store, f"{name}.blk{i}", cfg.width, cfg.heads,
                                cfg.ff_ratio) for i in range(cfg.depth)]
        self.codecs: dict[str, _Codec] = {}
        if variant == "standard":
            self.codecs["patch"] = _Codec(store, f"{name}.codec.patch",
                                          cfg.patch_size, cfg.width)
        else:
            for axis, block in enumerate(_STATE_BLOCKS):
                span = block.stop - block.start
                if variant == "semantic":
                    key = f"ax{axis}"
                    self.codecs[key] = _Codec(store, f"{name}.codec.{key}",
                                              span, cfg.width)
                else:
                    for el in range(space.cardinalities[axis]):
                        key = f"ax{axis}.el{el}"
                        self.codecs[key] = _Codec(store, f"{name}.codec.{key}",
                                                  span, cfg.width)
            for kind, span in (("action", T_ACTION.stop - T_ACTION.start),
                               ("reward", 1), ("terminal", 1)):
                self.codecs[kind] = _Codec(store, f"{name}.codec.{kind}",
                                           span, cfg.width)
        self._cache = None

    def _token_key(self, tok: TokenSpec, task) -> str:
        if tok.kind == "patch":
            return "patch"
        if tok.kind == "state":
            if self.variant == "semantic":
                return f"ax{tok.axis}"
            return f"ax{tok.axis}.el{task[tok.axis]}"
        return tok.kind

    def _groups(self, task) -> list[tuple[str, list[int]]]:
        order: dict[str, list[int]] = {}
        for k, tok in enumerate(self.layout):
            order.setdefault(self._token_key(tok, task), []).append(k)
        return list(order.items())

    def _mask_indices(self, masked) -> frozenset[int]:
        if self.variant == "standard":
            raise UnsupportedVariantError(
                "factor masking requires a semantic layout")
        names = [masked] if isinstance(masked, str) else list(masked)
        by_name = {tok.name: k for k, tok in enumerate(self.layout)}
        out: set[int] = set()
        for nm in names:
            if nm in by_name:
                out.add(by_name[nm])
            elif nm in AXIS_NAMES:
                axis = AXIS_NAMES.index(nm)
                out.update(k for k, tok in enumerate(self.layout)
                           if tok.axis == axis)
            else:
                raise ValueError(f"factor {nm!r} not in layout")
        return frozenset(out)

    def forward(self, x: np.ndarray, c_noise, task, masked=None) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected (batch, {self.dim}) input, got {x.shape}")
        self.space.validate_task(task)
        mask_idx = self._mask_indices(masked) if masked is not None else frozenset()
        x = x.astype(self.store.dtype, copy=False)
        b = x.shape[0]
        cn = np.broadcast_to(np.asarray(c_noise, dtype=np.float64), (b,))
        groups = self._groups(task)
        patch = self.cfg.patch_size
        cols: list[np.ndarray | None] = [None] * len(self.layout)
        for key, idxs in groups:
            slabs = []
            for k in idxs:
                tok = self.layout[k]
                span = x[:, tok.start:tok.stop]
                if tok.kind == "patch" and tok.width < patch:
                    padded = np.zeros((b, patch), dtype=x.dtype)
                    padded[:, :tok.width] = span
                    span = padded
                slabs.append(span)
            enc = self.codecs[key].enc.forward(np.concatenate(slabs, axis=0))
            for j, k in enumerate(idxs):
                cols[k] = enc[j * b:(j + 1) * b]
        toks = np.stack(cols, axis=1)
        if mask_idx:
            toks[:, sorted(mask_idx), :] = 0.0
        toks = toks + self.pos[None]
        cond = self.context.forward(cn, task_indicator(self.space, task))
        h = toks
        for blk in self.blocks:
            h = blk.forward(h, cond)
        out = np.empty((b, self.dim), dtype=x.dtype)
        for key, idxs in groups:
            dec = self.codecs[key].dec.forward(
                np.concatenate([h[:, k] for k in idxs], axis=0))
            for j, k in enumerate(idxs):
                tok = self.layout[k]
                out[:, tok.start:tok.stop] = dec[j * b:(j + 1) * b, :tok.width]
        self._cache = (groups, b, x.dtype, mask_idx)
        return out

    def backward(self, dout: np.ndarray) -> None:
        groups, b, dtype, mask_idx = self._cache
        dout = np.asarray(dout).astype(dtype, copy=False)
        patch = self.cfg.patch_size
        k_total = len(self.layout)
        dtoks = np.zeros((b, k_total, self.cfg.width), dtype=dtype)
        for key, idxs in groups:
            slabs = []
            for k in idxs:
                tok = self.layout[k]
                g = dout[:, tok.start:tok.stop]
                if tok.kind == "patch" and tok.width < patch:
                    padded = np.zeros((b, patch), dtype=dtype)
                    padded[:, :tok.width] = g
                    g = padded
                slabs.append(g)
            dh = self.codecs[key].dec.backward(np.concatenate(slabs, axis=0))
            for j, k in enumerate(idxs):
                dtoks[:, k] = dh[j * b:(j + 1) * b]
        dcond = np.zeros((b, self.cfg.width), dtype=dtype)
        for blk in reversed(self.blocks):
            dtoks, dc = blk.backward(dtoks)
            dcond += dc
        self.store.add_grad(self._pos_name, dtoks.sum(axis=0))
        if mask_idx:
            dtoks[:, sorted(mask_idx), :] = 0.0
        for key, idxs in groups:
            self.codecs[key].enc.backward(
                np.concatenate([dtoks[:, k] for k in idxs], axis=0))
        self.context.backward(dcond)

    def attention_maps(self, x: np.ndarray, sigma, task,
                       sigma_data: float = 1.0) -> list[np.ndarray]:
        """Exact softmax weights of every block on the preconditioned input,
        one array per layer: (heads, K, K) for a single row, (batch, heads,
        K, K) for a batch."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None] if single else x
        s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (xb.shape[0],))
        _, _, c_in, c_noise = precond_coeffs(s, sigma_data)
        self.forward(xb * c_in[:, None], c_noise, task)
        maps = [blk.attn.last_weights.copy() for blk in self.blocks]
        return [m[0] for m in maps] if single else maps

    def codec_param_names(self, key: str) -> list[str]:
        return self.codecs[key].param_names()

    def describe(self) -> dict:
        return {"variant": self.variant, "width": self.cfg.width,
                "depth": self.cfg.depth, "heads": self.cfg.heads,
                "tokens": [t.name for t in self.layout]}


class MonolithicDenoiser:
    """Flat residual stack; conditioning added to the stream before every
    layer. space=None builds an unconditional model (task must be None), used
    by the toy generative checks."""

    def __init__(self, store: ParamStore, cfg: DenoiserConfig,
                 space: TaskSpace | None, dim: int = TRANSITION_DIM,
                 name: str = "mono"):
        self.variant = "monolithic"
        self.cfg = cfg
        self.space = space
        self.store = store
        self.dim = dim
        w = cfg.mono_width
        self.in_proj = Linear(store, f"{name}.in", dim, w)
        self.layers = [(LayerNorm(store, f"{name}.ln{i}", w, affine=False),
                        GELU(),
                        Linear(store, f"{name}.fc{i}", w, w))
                       for i in range(cfg.mono_layers)]
        self.out_proj = Linear(store, f"{name}.out", w, dim)
        self.e_t = Linear(store, f"{name}.et", cfg.noise_feature_dim, w)
        self.e_n = (Linear(store, f"{name}.en", space.indicator_dim, w)
                    if space is not None else None)
        self._cache = None

    def forward(self, x: np.ndarray, c_noise, task, masked=None) -> np.ndarray:
        if masked is not None:
            raise UnsupportedVariantError("monolithic variant has no factor tokens")
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected (batch, {self.dim}) input, got {x.shape}")
        if self.space is None:
            if task is not None:
                raise ValueError("unconditional model takes task=None")
        else:
            self.space.validate_task(task)
        x = x.astype(self.store.dtype, copy=False)
        b = x.shape[0]
        cn = np.broadcast_to(np.asarray(c_noise, dtype=np.float64), (b,))
        feats = sinusoidal_features(cn, self.cfg.noise_feature_dim)
        u = self.e_t.forward(feats.astype(self.store.dtype))
        if self.e_n is not None:
            ind = task_indicator(self.space, task).astype(self.store.dtype)
            u = u + self.e_n.forward(ind[None])
        h = self.in_proj.forward(x)
        for ln, act, fc in self.layers:
            ht = h + u
            h = ht + fc.forward(act.forward(ln.forward(ht)))
        self._cache = b
        return self.out_proj.forward(h)

    def backward(self, dout: np.ndarray) -> None:
        dh = self.out_proj.backward(np.asarray(dout).astype(self.store.dtype,
                                                            copy=False))
        du = np.zeros_like(dh)
        for ln, act, fc in reversed(self.layers):
            dht = dh + ln.backward(act.backward(fc.backward(dh)))
            du += dht
            dh = dht
        self.in_proj.backward(dh)
        self.e_t.backward(du)
        if self.e_n is not None:
            self.e_n.backward(du.sum(axis=0, keepdims=True))

    def attention_maps(self, x, sigma, task, sigma_data: float = 1.0):
        raise UnsupportedVariantError("monolithic variant has no attention")

    def describe(self) -> dict:
        return {"variant": self.variant, "width": self.cfg.mono_width,
                "depth": self.cfg.mono_layers, "heads": 0, "tokens": None}


def build(variant: str, cfg: DenoiserConfig, space: TaskSpace | None,
          seed: int = 0, dim: int = TRANSITION_DIM, dtype=np.float32):
    """Construct one denoiser with deterministic per-name initialization."""
    store = ParamStore(seed, dtype=dtype)
    if variant == "monolithic":
        return MonolithicDenoiser(store, cfg, space, dim=dim)
    if variant in ("standard", "semantic", "semantic_compositional"):
        if space is None:
            raise ValueError("token variants require a task space")
        return TokenDenoiser(store, variant, cfg, space, dim=dim)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def capacity_report(cfg: DenoiserConfig, space: TaskSpace,
                    dim: int = TRANSITION_DIM) -> dict:
    """Parameter counts of all four variants plus the parity verdict.

    A spread beyond 5% of the smallest count is recorded as a warning, not an
    error: the models stay usable, the report flags the mismatch.
    """
    counts = {v: build(v, cfg, space, seed=0, dim=dim).store.param_count()
              for v in VARIANTS}
    lo, hi = min(counts.values()), max(counts.values())
    spread = (hi - lo) / lo
    warnings = []
    if spread > 0.05:
        worst = max(counts, key=counts.get)
        warnings.append(
            f"capacity parity violated: {worst} exceeds the smallest variant "
            f"by {spread:.1%} (bound 5%)")
    return {"counts": counts, "spread": spread, "warnings": warnings}


def prediction(model, x: np.ndarray, sigma, task, masked=None,
               sigma_data: float = 1.0) -> np.ndarray:
    """Denoised estimate with input/output scaling applied around the raw
    model; masked names (token or axis) zero those encoder outputs before the
    positional embedding."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (xb.shape[0],))
    c_skip, c_out, c_in, c_noise = precond_coeffs(s, sigma_data)
    raw = model.forward(xb * c_in[:, None], c_noise, task, masked=masked)
    out = c_skip[:, None] * xb + c_out[:, None] * raw
    return out[0] if single else out
