"""Attention mechanisms over token maps.

Four mechanisms share one multi-head core:

* ``vanilla_attention`` -- global softmax attention.
* ``ssa_forward`` -- scalable self-attention: keys/values are spatially reduced
  by an ``s x s`` stride-``s`` convolution (``r_n = 1/s^2``) and the
  query/key width is rescaled to ``round(C * r_c)``.
* ``wsa_forward`` -- attention inside non-overlapping ``m x m`` windows.
* ``iwsa_forward`` -- WSA plus a depthwise convolution over the re-merged
  value map (LIM), added to the window output.  The LEM variant applies the
  same convolution inside each window instead.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from . import counters
from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import (Tensor, add, conv2d, linear, matmul, pad, reshape, scale, softmax, swap_last,
                     transpose)

MASK_VALUE = -1e30
VARIANTS = ("LIM", "LEM", "none")

AttnWeights = Mapping[str, Tensor]

_captured: contextvars.ContextVar[list | None] = contextvars.ContextVar("captured_attention", default=None)


@contextlib.contextmanager
def capture_attention():
    """Collect every attention matrix (post-softmax) computed inside the block."""
    store: list[np.ndarray] = []
    token = _captured.set(store)
    try:
        yield store
    finally:
        _captured.reset(token)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class TokenMap:
    """An ``h x w`` grid of ``c``-channel tokens stored as an ``(h*w, c)`` tensor."""

    h: int
    w: int
    c: int
    data: Tensor

    def __post_init__(self):
        if self.data.shape != (self.h * self.w, self.c):
            raise ShapeError(f"TokenMap {self.h}x{self.w}x{self.c} cannot hold data of shape {self.data.shape}")

    @property
    def n(self) -> int:
        return self.h * self.w

    @classmethod
    def from_grid(cls, grid) -> "TokenMap":
        grid = grid if isinstance(grid, Tensor) else Tensor(grid)
        if grid.ndim != 3:
            raise ShapeError(f"expected an (h, w, c) grid, got {grid.shape}")
        h, w, c = grid.shape
        return cls(h, w, c, reshape(grid, (h * w, c)))

    def grid(self) -> Tensor:
        return reshape(self.data, (self.h, self.w, self.c))

    def with_data(self, data: Tensor) -> "TokenMap":
        return TokenMap(self.h, self.w, data.shape[-1], data)

    def numpy(self) -> np.ndarray:
        return self.data.data.reshape(self.h, self.w, self.c)


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, str):
        return Fraction(x)
    return Fraction(x).limit_denominator(1 << 20)


def _isqrt_exact(n: Fraction) -> int | None:
    if n.denominator != 1 or n <= 0:
        return None
    r = math.isqrt(n.numerator)
    return r if r * r == n.numerator else None


@dataclass(frozen=True)
class SsaConfig:
    c: int
    heads: int
    r_n: Fraction = Fraction(1)
    r_c: Fraction = Fraction(1)
    s: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "r_n", _as_fraction(self.r_n))
        object.__setattr__(self, "r_c", _as_fraction(self.r_c))
        if self.c < 1 or self.heads < 1:
            raise ConfigError(f"SSA needs positive channels and heads (c={self.c}, heads={self.heads})")
        if self.r_n <= 0 or self.r_c <= 0:
            raise ConfigError("SSA scale factors must be positive")
        s = _isqrt_exact(1 / self.r_n)
        if s is None:
            raise ConfigError(f"1/r_n must be a perfect square, got r_n={self.r_n}")
        object.__setattr__(self, "s", s)
        if self.c_scaled < 1 or self.c_scaled % self.heads:
            raise ConfigError(f"scaled channels round({self.c}*{self.r_c})={self.c_scaled} "
                              f"not divisible by heads={self.heads}")
        if self.c % self.heads:
            raise ConfigError(f"channels {self.c} not divisible by heads={self.heads}")

    @property
    def c_scaled(self) -> int:
        return round(self.c * self.r_c)

    @property
    def d_k(self) -> int:
        return self.c_scaled // self.heads


@dataclass(frozen=True)
class IwsaConfig:
    c: int
    heads: int
    m: int = 7
    k: int = 3
    variant: str = "LIM"

    def __post_init__(self):
        if self.c < 1 or self.heads < 1 or self.c % self.heads:
            raise ConfigError(f"channels {self.c} not divisible by heads={self.heads}")
        if self.m < 1:
            raise ConfigError(f"window size must be >= 1, got {self.m}")
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigError(f"LIM kernel size must be odd, got {self.k}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown IWSA variant {self.variant!r}")

    @property
    def d_k(self) -> int:
        return self.c // self.heads


@dataclass
class WindowSet:
    """Windows stacked as one ``(grid_h * grid_w, m*m, c)`` tensor."""

    windows: Tensor
    grid_h: int
    grid_w: int
    m: int
    h: int
    w: int
    pad_h: int
    pad_w: int

    def __len__(self) -> int:
        return self.grid_h * self.grid_w

    def __getitem__(self, i: int) -> Tensor:
        return self.windows[i]

    @property
    def c(self) -> int:
        return self.windows.shape[-1]

    def key_mask(self, dtype=np.float64) -> np.ndarray:
        """Additive mask ``(n_windows, 1, 1, m*m)`` hiding padded tokens as keys."""
        valid = np.zeros((self.h + self.pad_h, self.w + self.pad_w), dtype=bool)
        valid[:self.h, :self.w] = True
        valid = valid.reshape(self.grid_h, self.m, self.grid_w, self.m).transpose(0, 2, 1, 3)
        valid = valid.reshape(len(self), 1, 1, self.m * self.m)
        return np.where(valid, 0.0, MASK_VALUE).astype(dtype)


# ---------------------------------------------------------------------------
# weight construction
# ---------------------------------------------------------------------------

def identity_dw_kernel(k: int, c: int, dtype=np.float64) -> np.ndarray:
    w = np.zeros((k, k, c), dtype=dtype)
    w[k // 2, k // 2, :] = 1.0
    return w


def init_ssa_weights(cfg: SsaConfig, rng: Rng, std: float = 0.02, dtype=np.float64) -> dict[str, Tensor]:
    c, cr, s = cfg.c, cfg.c_scaled, cfg.s
    return {
        "q.weight": Tensor(rng.normal((1, 1, c, cr), std, dtype)),
        "q.bias": Tensor(np.zeros(cr, dtype)),
        "k.weight": Tensor(rng.normal((s, s, c, cr), std, dtype)),
        "k.bias": Tensor(np.zeros(cr, dtype)),
        "v.weight": Tensor(rng.normal((s, s, c, c), std, dtype)),
        "v.bias": Tensor(np.zeros(c, dtype)),
        "proj.weight": Tensor(rng.normal((c, c), std, dtype)),
        "proj.bias": Tensor(np.zeros(c, dtype)),
    }


def init_iwsa_weights(cfg: IwsaConfig, rng: Rng, std: float = 0.02, dtype=np.float64) -> dict[str, Tensor]:
    c = cfg.c
    w = {}
    for name in ("q", "k", "v", "proj"):
        w[f"{name}.weight"] = Tensor(rng.normal((c, c), std, dtype))
        w[f"{name}.bias"] = Tensor(np.zeros(c, dtype))
    if cfg.variant != "none":
        key = cfg.variant.lower()
        w[f"{key}.weight"] = Tensor(identity_dw_kernel(cfg.k, c, dtype))
        w[f"{key}.bias"] = Tensor(np.zeros(c, dtype))
    return w


def identity_ssa_weights(c: int, dtype=np.float64) -> dict[str, Tensor]:
    """Weights that make SSA with ``s = 1, r_c = 1`` reduce to plain attention."""
    eye = np.eye(c, dtype=dtype)
    w = {name: Tensor(eye[None, None]) for name in ("q.weight", "k.weight", "v.weight")}
    w.update({name: Tensor(np.zeros(c, dtype)) for name in ("q.bias", "k.bias", "v.bias", "proj.bias")})
    w["proj.weight"] = Tensor(eye)
    return w


# ---------------------------------------------------------------------------
# core attention
# ---------------------------------------------------------------------------

def split_heads(t: Tensor, heads: int) -> Tensor:
    """``(..., n, c) -> (..., heads, n, c // heads)``."""
    *lead, n, c = t.shape
    t = reshape(t, (*lead, n, heads, c // heads))
    k = len(lead)
    return transpose(t, tuple(range(k)) + (k + 1, k, k + 2))


def merge_heads(t: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`."""
    *lead, heads, n, d = t.shape
    k = len(lead)
    t = transpose(t, tuple(range(k)) + (k + 1, k, k + 2))
    return reshape(t, (*lead, n, heads * d))


def attend(q: Tensor, k: Tensor, v: Tensor, d_k: int, mask: np.ndarray | None = None) -> Tensor:
    """``softmax(q k^T / sqrt(d_k) + mask) v`` over the trailing two axes."""
    with counters.tag("attn"):
        scores = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(d_k))
        if mask is not None:
            scores = add(scores, Tensor(mask.astype(scores.dtype)))
        a = softmax(scores, axis=-1)
        store = _captured.get()
        if store is not None:
            store.append(a.data)
        return matmul(a, v)


def vanilla_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("vanilla_attention expects 2-D (tokens x channels) operands")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query/key widths differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key/value token counts differ: {k.shape} vs {v.shape}")
    return attend(q, k, v, q.shape[1])


def multihead_attention(x: TokenMap, heads: int, w: AttnWeights) -> TokenMap:
    """Global multi-head attention with linear q/k/v/out projections."""
    q = linear(x.data, w["q.weight"], w["q.bias"])
    k = linear(x.data, w["k.weight"], w["k.bias"])
    v = linear(x.data, w["v.weight"], w["v.bias"])
    z = merge_heads(attend(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads), x.c // heads))
    return x.with_data(linear(z, w["proj.weight"], w["proj.bias"]))


# ---------------------------------------------------------------------------
# scalable self-attention
# ---------------------------------------------------------------------------

def _pad_to_multiple(grid: Tensor, m: int) -> tuple[Tensor, int, int]:
    h, w = grid.shape[-3], grid.shape[-2]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        grid = pad(grid, [(0, 0)] * (grid.ndim - 3) + [(0, ph), (0, pw), (0, 0)])
    return grid, ph, pw


def ssa_transforms(x: TokenMap, cfg: SsaConfig, w: AttnWeights) -> tuple[Tensor, Tensor, Tensor]:
    """Scaled query ``(N, Cr)``, reduced key ``(N r_n, Cr)`` and value ``(N r_n, C)``."""
    if x.c != cfg.c:
        raise ShapeError(f"SSA configured for {cfg.c} channels, got {x.c}")
    grid = x.grid()
    q = conv2d(grid, w["q.weight"], w["q.bias"])
    reduced, _, _ = _pad_to_multiple(grid, cfg.s)
    k = conv2d(reduced, w["k.weight"], w["k.bias"], stride=cfg.s)
    v = conv2d(reduced, w["v.weight"], w["v.bias"], stride=cfg.s)
    nr = k.shape[0] * k.shape[1]
    return (reshape(q, (x.n, cfg.c_scaled)), reshape(k, (nr, cfg.c_scaled)), reshape(v, (nr, cfg.c)))


def ssa_forward(x: TokenMap, cfg: SsaConfig, w: AttnWeights) -> TokenMap:
    q, k, v = ssa_transforms(x, cfg, w)
    h = cfg.heads
    z = merge_heads(attend(split_heads(q, h), split_heads(k, h), split_heads(v, h), cfg.d_k))
    return x.with_data(linear(z, w["proj.weight"], w["proj.bias"]))


# ---------------------------------------------------------------------------
# window attention
# ---------------------------------------------------------------------------

def window_partition(x: TokenMap, m: int) -> WindowSet:
    """Zero-pad bottom/right to multiples of ``m`` and cut into row-major windows."""
    if m < 1:
        raise ConfigError(f"window size must be >= 1, got {m}")
    grid, ph, pw = _pad_to_multiple(x.grid(), m)
    gh, gw = (x.h + ph) // m, (x.w + pw) // m
    t = reshape(grid, (gh, m, gw, m, x.c))
    t = transpose(t, (0, 2, 1, 3, 4))
    return WindowSet(reshape(t, (gh * gw, m * m, x.c)), gh, gw, m, x.h, x.w, ph, pw)


def window_merge(ws: WindowSet) -> TokenMap:
    m, gh, gw = ws.m, ws.grid_h, ws.grid_w
    if ws.windows.shape[:2] != (gh * gw, m * m):
        raise ShapeError(f"window tensor {ws.windows.shape} inconsistent with a {gh}x{gw} grid of {m}x{m}")
    if ws.h + ws.pad_h != gh * m or ws.w + ws.pad_w != gw * m:
        raise ShapeError("window grid metadata inconsistent with padded extent")
    c = ws.c
    t = reshape(ws.windows, (gh, gw, m, m, c))
    t = reshape(transpose(t, (0, 2, 1, 3, 4)), (gh * m, gw * m, c))
    if ws.pad_h or ws.pad_w:
        t = t[:ws.h, :ws.w, :]
    return TokenMap.from_grid(t)


def window_attention(x: TokenMap, cfg: IwsaConfig, w: AttnWeights) -> tuple[TokenMap, TokenMap]:
    """Merged per-window attention output ``Z`` (before the output projection)
    and the full-resolution value map ``V`` it attended over."""
    if x.c != cfg.c:
        raise ShapeError(f"window attention configured for {cfg.c} channels, got {x.c}")
    q = x.with_data(linear(x.data, w["q.weight"], w["q.bias"]))
    k = x.with_data(linear(x.data, w["k.weight"], w["k.bias"]))
    v = x.with_data(linear(x.data, w["v.weight"], w["v.bias"]))
    wq, wk, wv = (window_partition(t, cfg.m) for t in (q, k, v))
    mask = wk.key_mask(x.data.dtype) if (wk.pad_h or wk.pad_w) else None
    h = cfg.heads
    zw = merge_heads(attend(split_heads(wq.windows, h), split_heads(wk.windows, h),
                            split_heads(wv.windows, h), cfg.d_k, mask))
    return window_merge(WindowSet(zw, wq.grid_h, wq.grid_w, cfg.m, x.h, x.w, wq.pad_h, wq.pad_w)), v


def _project(z: TokenMap, w: AttnWeights) -> TokenMap:
    return z.with_data(linear(z.data, w["proj.weight"], w["proj.bias"]))


def wsa_forward(x: TokenMap, cfg: IwsaConfig, w: AttnWeights) -> TokenMap:
    return _project(window_attention(x, cfg, w)[0], w)


def lim(v_map: TokenMap, kernel: Tensor, bias: Tensor | None = None) -> TokenMap:
    """Depthwise ``k x k`` convolution with zero padding over the whole value map."""
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"LIM kernel size must be odd, got {k}")
    with counters.tag("lim"):
        return TokenMap.from_grid(conv2d(v_map.grid(), kernel, bias, stride=1, pad=k // 2, depthwise=True))


def lem(ws: WindowSet, kernel: Tensor, bias: Tensor | None = None) -> WindowSet:
    """The LIM convolution applied inside each window with per-window zero padding."""
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"LEM kernel size must be odd, got {k}")
    m, c = ws.m, ws.c
    with counters.tag("lim"):
        t = conv2d(reshape(ws.windows, (len(ws), m, m, c)), kernel, bias, stride=1, pad=k // 2, depthwise=True)
    return WindowSet(reshape(t, (len(ws), m * m, c)), ws.grid_h, ws.grid_w, m, ws.h, ws.w, ws.pad_h, ws.pad_w)


def interact(z: TokenMap, v: TokenMap, cfg: IwsaConfig, w: AttnWeights) -> TokenMap:
    """``Z' = Z + F(V)`` with ``F`` the LIM (or LEM) convolution; ``Z`` itself when disabled."""
    if cfg.variant == "none":
        return z
    if cfg.variant == "LIM":
        # v is already the merged value map: merge(partition(v)) == v.
        y = lim(v, w["lim.weight"], w["lim.bias"])
    else:
        y = window_merge(lem(window_partition(v, cfg.m), w["lem.weight"], w["lem.bias"]))
    return z.with_data(add(z.data, y.data))


def iwsa_forward(x: TokenMap, cfg: IwsaConfig, w: AttnWeights) -> TokenMap:
    """Window attention plus local interaction over values, then the output projection."""
    z, v = window_attention(x, cfg, w)
    return _project(interact(z, v, cfg, w), w)
