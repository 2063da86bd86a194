"""The four-stage ScalableViT backbone and classification head.

Parameters live in one flat, ordered ``name -> Tensor`` store.  A name's
module path (used for cost reports and MAC scopes) is everything before its
last two components, e.g. ``stage3.block2.attn.k.weight -> stage3.block2.attn``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

from . import counters
from .attention import (IwsaConfig, TokenMap, identity_dw_kernel, init_iwsa_weights, init_ssa_weights,
                        iwsa_forward, ssa_forward)
from .config import ModelSpec, variant
from .errors import ConfigError, ShapeError, WeightMismatchError
from .rng import Rng
from .tensor import Tensor, add, conv2d, gelu, layer_norm, linear, mean

INIT_STD = 0.02


def module_path(name: str) -> str:
    return name.rsplit(".", 2)[0]


class _Prefixed(Mapping):
    """Read-only view of the parameters under ``prefix.``."""

    def __init__(self, params: Mapping[str, Tensor], prefix: str):
        self._p, self._pre = params, prefix + "."

    def __getitem__(self, key):
        return self._p[self._pre + key]

    def __iter__(self):
        n = len(self._pre)
        return (k[n:] for k in self._p if k.startswith(self._pre))

    def __len__(self):
        return sum(1 for _ in self)


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, Tensor] = field(repr=False)

    def sub(self, prefix: str) -> Mapping[str, Tensor]:
        return _Prefixed(self.params, prefix)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def train(self, flag: bool = True) -> "Model":
        for name, t in self.params.items():
            t.requires_grad = flag and (self.spec.peg_trainable or ".peg." not in name)
        return self

    def astype(self, dtype) -> "Model":
        return Model(self.spec, {k: Tensor(v.data.astype(dtype)) for k, v in self.params.items()})

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> "Model":
        missing = [k for k in self.params if k not in arrays]
        extra = [k for k in arrays if k not in self.params]
        bad = [f"{k}: expected {self.params[k].shape}, got {tuple(arrays[k].shape)}"
               for k in self.params if k in arrays and tuple(arrays[k].shape) != self.params[k].shape]
        if missing or extra or bad:
            parts = []
            if missing:
                parts.append(f"missing {missing[:5]}{'...' if len(missing) > 5 else ''}")
            if extra:
                parts.append(f"unexpected {extra[:5]}{'...' if len(extra) > 5 else ''}")
            parts.extend(bad[:5])
            raise WeightMismatchError("; ".join(parts))
        for k, t in self.params.items():
            t.data = np.ascontiguousarray(arrays[k])
        return self


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _attn_config(spec: ModelSpec, stage: int, kind: str):
    st = spec.stages[stage]
    if kind == "S":
        return spec.ssa_config(stage)
    return IwsaConfig(st.channels, st.heads, spec.window_m, spec.lim_k,
                      "none" if kind == "WSA" else spec.lim_variant)


def build_model(spec: ModelSpec | str, seed: int = 42, dtype=np.float64) -> Model:
    """Instantiate a model; weights are a pure function of ``(spec, seed)``.

    Projection kernels ~ N(0, 0.02), biases 0, norms (1, 0), and LIM/PEG
    depthwise kernels start as identity (centre tap 1).
    """
    if isinstance(spec, str):
        spec = variant(spec)
    spec.validate()
    rng = Rng(seed)
    p: dict[str, Tensor] = {}

    def normal(shape):
        return Tensor(rng.normal(shape, INIT_STD, dtype))

    def zeros(n):
        return Tensor(np.zeros(n, dtype))

    def norm(prefix, c):
        p[f"{prefix}.weight"] = Tensor(np.ones(c, dtype))
        p[f"{prefix}.bias"] = zeros(c)

    c_prev = spec.in_chans
    for i, st in enumerate(spec.stages):
        k = spec.stem_kernel if i == 0 else spec.inter_kernel
        e = f"embed{i + 1}"
        p[f"{e}.proj.weight"] = normal((k, k, c_prev, st.channels))
        p[f"{e}.proj.bias"] = zeros(st.channels)
        norm(f"{e}.norm", st.channels)
        c, hidden = st.channels, spec.ffn_hidden(i)
        for j, kind in enumerate(spec.block_kinds(i)):
            b = f"stage{i + 1}.block{j + 1}"
            norm(f"{b}.ln1", c)
            cfg = _attn_config(spec, i, kind)
            init = init_ssa_weights if kind == "S" else init_iwsa_weights
            for name, t in init(cfg, rng, INIT_STD, dtype).items():
                p[f"{b}.attn.{name}"] = t
            norm(f"{b}.ln2", c)
            p[f"{b}.ffn.fc1.weight"] = normal((c, hidden))
            p[f"{b}.ffn.fc1.bias"] = zeros(hidden)
            p[f"{b}.ffn.fc2.weight"] = normal((hidden, c))
            p[f"{b}.ffn.fc2.bias"] = zeros(c)
            if j == 0 and spec.use_peg:
                p[f"stage{i + 1}.peg.conv.weight"] = Tensor(identity_dw_kernel(3, c, dtype))
                p[f"stage{i + 1}.peg.conv.bias"] = zeros(c)
        c_prev = st.channels
    norm("head.norm", c_prev)
    p["head.fc1.weight"] = normal((c_prev, spec.head_hidden))
    p["head.fc1.bias"] = zeros(spec.head_hidden)
    p["head.fc2.weight"] = normal((spec.head_hidden, spec.num_classes))
    p["head.fc2.bias"] = zeros(spec.num_classes)
    return Model(spec, p)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def conv_embed(x: TokenMap, w: Mapping[str, Tensor], stride: int, eps: float = 1e-5,
               check_size: bool = True) -> TokenMap:
    """Overlapping patch embedding: ``k x k`` conv, padding ``k // 2``, then layer norm."""
    k = w["proj.weight"].shape[0]
    if check_size and (x.h < k or x.w < k):
        raise ConfigError(f"input {x.h}x{x.w} is smaller than the {k}x{k} embedding kernel")
    y = TokenMap.from_grid(conv2d(x.grid(), w["proj.weight"], w["proj.bias"], stride=stride, pad=k // 2))
    return y.with_data(layer_norm(y.data, w["norm.weight"], w["norm.bias"], eps))


def patch_embed(model: Model, image: TokenMap) -> TokenMap:
    with counters.scope("embed1"):
        return conv_embed(image, model.sub("embed1"), model.spec.stem_stride, model.spec.norm_eps)


def downsample_embed(model: Model, x: TokenMap, stage: int) -> TokenMap:
    """Embedding in front of ``stage`` (1-based, >= 2): halves the grid, ceil-rounded."""
    if stage < 2:
        raise ConfigError("downsampling embeddings exist only in front of stages 2-4")
    name = f"embed{stage}"
    with counters.scope(name):
        return conv_embed(x, model.sub(name), model.spec.inter_stride, model.spec.norm_eps, check_size=False)


def peg(x: TokenMap, w: Mapping[str, Tensor]) -> TokenMap:
    """Positional encoding generator: ``x + dwconv3x3(x)``."""
    y = conv2d(x.grid(), w["conv.weight"], w.get("conv.bias"), stride=1, pad=1, depthwise=True)
    return x.with_data(add(x.data, y.reshape(x.n, x.c)))


def ffn(x: TokenMap, w: Mapping[str, Tensor]) -> TokenMap:
    h = gelu(linear(x.data, w["fc1.weight"], w["fc1.bias"]))
    return x.with_data(linear(h, w["fc2.weight"], w["fc2.bias"]))


def attention(x: TokenMap, kind: str, cfg, w: Mapping[str, Tensor]) -> TokenMap:
    if kind == "S":
        return ssa_forward(x, cfg, w)
    return iwsa_forward(x, cfg, w)


def transformer_block(x: TokenMap, kind: str, cfg, w: Mapping[str, Tensor], eps: float = 1e-5,
                      path: str = "") -> TokenMap:
    """Pre-norm block: ``x + Attn(LN(x))`` then ``x + FFN(LN(x))``."""
    with counters.scope(path):
        h = x.with_data(layer_norm(x.data, w["ln1.weight"], w["ln1.bias"], eps))
        with counters.scope("attn"):
            a = attention(h, kind, cfg, _Prefixed(w, "attn"))
        x = x.with_data(add(x.data, a.data))
        h = x.with_data(layer_norm(x.data, w["ln2.weight"], w["ln2.bias"], eps))
        with counters.scope("ffn"):
            f = ffn(h, _Prefixed(w, "ffn"))
        return x.with_data(add(x.data, f.data))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

BlockHook = Callable[[int, int, TokenMap], None]


def as_token_map(image) -> TokenMap:
    if isinstance(image, TokenMap):
        return image
    t = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    if t.ndim != 3:
        raise ShapeError(f"image must be (H, W, C), got shape {t.shape}")
    return TokenMap.from_grid(t)


def forward_features(model: Model, image, on_block: BlockHook | None = None,
                     stop: tuple[int, int] | None = None) -> TokenMap:
    """Run embeddings and stages; ``stop=(stage, block)`` (1-based) returns early."""
    spec = model.spec
    x = as_token_map(image)
    if x.c != spec.in_chans:
        raise ShapeError(f"expected {spec.in_chans}-channel input, got {x.c}")
    for i in range(len(spec.stages)):
        x = patch_embed(model, x) if i == 0 else downsample_embed(model, x, i + 1)
        for j, kind in enumerate(spec.block_kinds(i)):
            path = f"stage{i + 1}.block{j + 1}"
            x = transformer_block(x, kind, _attn_config(spec, i, kind), model.sub(path), spec.norm_eps, path)
            if j == 0 and spec.use_peg:
                with counters.scope(f"stage{i + 1}.peg"):
                    x = peg(x, model.sub(f"stage{i + 1}.peg"))
            if on_block is not None:
                on_block(i + 1, j + 1, x)
            if stop == (i + 1, j + 1):
                return x
    return x


def head(model: Model, x: TokenMap) -> Tensor:
    """Final norm, global average pool over tokens, two-layer classifier."""
    w = model.sub("head")
    with counters.scope("head"):
        t = layer_norm(x.data, w["norm.weight"], w["norm.bias"], model.spec.norm_eps)
        pooled = mean(t, axis=0, keepdims=True)
        h = gelu(linear(pooled, w["fc1.weight"], w["fc1.bias"]))
        return linear(h, w["fc2.weight"], w["fc2.bias"]).reshape(model.spec.num_classes)


def forward(model: Model, image, on_block: BlockHook | None = None) -> Tensor:
    """Image ``(H, W, C)`` to logits ``(num_classes,)``."""
    return head(model, forward_features(model, image, on_block))


def resolve_block(spec: ModelSpec, stage: int | None = None, block: int | None = None,
                  global_block: int | None = None) -> tuple[int, int]:
    """Map either ``(stage, block)`` or a 1-based global block index to ``(stage, block)``."""
    if global_block is not None:
        if not 1 <= global_block <= spec.total_blocks:
            raise IndexError(f"global block {global_block} out of range 1..{spec.total_blocks}")
        for i, st in enumerate(spec.stages):
            if global_block <= st.depth:
                return i + 1, global_block
            global_block -= st.depth
    if stage is None or block is None:
        raise IndexError("need stage and block, or a global block index")
    if not 1 <= stage <= len(spec.stages):
        raise IndexError(f"stage {stage} out of range 1..{len(spec.stages)}")
    if not 1 <= block <= spec.stages[stage - 1].depth:
        raise IndexError(f"block {block} out of range 1..{spec.stages[stage - 1].depth} for stage {stage}")
    return stage, block


def extract_feature_map(model: Model, image, stage: int, block: int) -> TokenMap:
    """Token map right after ``block`` of ``stage`` (1-based; PEG included after block 1)."""
    stage, block = resolve_block(model.spec, stage, block)
    return forward_features(model, image, stop=(stage, block))
