"""Model specifications: the named S/B/L variants and JSON spec files."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from pathlib import Path

from .attention import SsaConfig, _as_fraction, _isqrt_exact
from .errors import ConfigError

BLOCK_ORDERS = ("IW-first", "S-first", "WSA-only", "IWSA-only", "SSA-only", "SSA-rc1")
LIM_VARIANTS = ("LIM", "LEM", "none")


@dataclass(frozen=True)
class StageSpec:
    depth: int
    channels: int
    heads: int
    r_c: Fraction
    r_n: Fraction

    def __post_init__(self):
        object.__setattr__(self, "r_c", _as_fraction(self.r_c))
        object.__setattr__(self, "r_n", _as_fraction(self.r_n))

    @property
    def s(self) -> int:
        s = _isqrt_exact(1 / self.r_n) if self.r_n > 0 else None
        if s is None:
            raise ConfigError(f"1/r_n must be a perfect square, got r_n={self.r_n}")
        return s


@dataclass(frozen=True)
class ModelSpec:
    stages: tuple[StageSpec, ...]
    name: str = "custom"
    in_chans: int = 3
    stem_kernel: int = 7
    stem_stride: int = 4
    inter_kernel: int = 3
    inter_stride: int = 2
    window_m: int = 7
    lim_k: int = 3
    ffn_ratio: Fraction = Fraction(4)
    num_classes: int = 1000
    head_hidden: int = 1024
    block_order: str = "IW-first"
    lim_variant: str = "LIM"
    use_peg: bool = True
    peg_trainable: bool = True
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages))
        object.__setattr__(self, "ffn_ratio", _as_fraction(self.ffn_ratio))

    def block_kinds(self, stage: int) -> list[str]:
        """Attention kind of each block in ``stage`` (0-based): ``"IW"``, ``"WSA"`` or ``"S"``."""
        depth = self.stages[stage].depth
        order = self.block_order
        if order == "IW-first":
            return ["IW" if j % 2 == 0 else "S" for j in range(depth)]
        if order == "S-first":
            return ["S" if j % 2 == 0 else "IW" for j in range(depth)]
        if order == "WSA-only":
            return ["WSA"] * depth
        if order == "IWSA-only":
            return ["IW"] * depth
        return ["S"] * depth

    def ssa_config(self, stage: int) -> SsaConfig:
        st = self.stages[stage]
        r_c = Fraction(1) if self.block_order == "SSA-rc1" else st.r_c
        return SsaConfig(st.channels, st.heads, st.r_n, r_c)

    def ffn_hidden(self, stage: int) -> int:
        return round(self.stages[stage].channels * self.ffn_ratio)

    @property
    def total_blocks(self) -> int:
        return sum(s.depth for s in self.stages)

    def validate(self) -> "ModelSpec":
        if len(self.stages) != 4:
            raise ConfigError(f"expected 4 stages, got {len(self.stages)}")
        if self.block_order not in BLOCK_ORDERS:
            raise ConfigError(f"unknown block_order {self.block_order!r}; choose from {BLOCK_ORDERS}")
        if self.lim_variant not in LIM_VARIANTS:
            raise ConfigError(f"unknown lim_variant {self.lim_variant!r}")
        for name in ("in_chans", "stem_kernel", "stem_stride", "inter_kernel", "inter_stride",
                     "window_m", "num_classes", "head_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lim_k < 1 or self.lim_k % 2 == 0:
            raise ConfigError(f"lim_k must be odd, got {self.lim_k}")
        if self.ffn_ratio <= 0:
            raise ConfigError("ffn_ratio must be positive")
        for i, st in enumerate(self.stages, 1):
            where = f"stage {i}"
            if st.depth < 1:
                raise ConfigError(f"{where}: depth must be >= 1, got {st.depth}")
            if st.channels < 1 or st.heads < 1:
                raise ConfigError(f"{where}: channels and heads must be positive")
            if st.channels % st.heads:
                raise ConfigError(f"{where}: channels {st.channels} not divisible by heads {st.heads}")
            if "S" in self.block_kinds(i - 1):
                try:
                    self.ssa_config(i - 1)
                except ConfigError as exc:
                    raise ConfigError(f"{where}: {exc}") from None
            else:
                st.s  # still reject malformed r_n
        return self

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [{**asdict(s), "r_c": _frac_str(s.r_c), "r_n": _frac_str(s.r_n)} for s in self.stages]
        d["ffn_ratio"] = _frac_str(self.ffn_ratio)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown spec fields: {sorted(unknown)}")
        if "stages" not in d:
            raise ConfigError("spec is missing 'stages'")
        try:
            stages = tuple(StageSpec(**s) for s in d["stages"])
            return cls(**{**d, "stages": stages}).validate()
        except (TypeError, ValueError, ZeroDivisionError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid spec: {exc}") from None

    @classmethod
    def load(cls, path) -> "ModelSpec":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(d)


def _frac_str(f: Fraction) -> str:
    return str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"


_R_N = ("1/64", "1/16", "1/4", "1")
_TABLE = {
    "S": (64, (2, 2, 20, 2), (2, 4, 8, 16), ("5/4", "5/4", "5/4", "1")),
    "B": (96, (2, 2, 14, 6), (3, 6, 12, 24), ("2", "5/4", "5/4", "1")),
    "L": (128, (2, 6, 12, 4), (4, 8, 16, 32), ("1/4", "1/2", "1", "1")),
}


def variant(name: str, **overrides) -> ModelSpec:
    """ScalableViT-S/B/L as configured in the published variant table."""
    key = name.upper().removeprefix("SCALABLEVIT-")
    if key not in _TABLE:
        raise ConfigError(f"unknown variant {name!r}; choose S, B or L")
    c0, depths, heads, r_c = _TABLE[key]
    stages = tuple(StageSpec(d, c0 * 2 ** i, h, Fraction(rc), Fraction(rn))
                   for i, (d, h, rc, rn) in enumerate(zip(depths, heads, r_c, _R_N)))
    return replace(ModelSpec(stages, name=f"ScalableViT-{key}"), **overrides).validate()


def toy_spec(channels=(8, 16, 24, 32), depths=(2, 2, 2, 2), heads=(1, 2, 2, 4),
             r_c=("1", "1", "1", "1"), r_n=("1/4", "1/4", "1", "1"), **overrides) -> ModelSpec:
    """Small custom spec for tests and the synthetic training run."""
    stages = tuple(StageSpec(d, c, h, Fraction(rc), Fraction(rn))
                   for d, c, h, rc, rn in zip(depths, channels, heads, r_c, r_n))
    base = dict(name="toy", window_m=4, ffn_ratio=Fraction(2), num_classes=2, head_hidden=16)
    base.update(overrides)
    return ModelSpec(stages, **base).validate()
