"""Parameter and MAC accounting.

Convention: one multiply-accumulate counts as one FLOP.  Only matmul and
convolution products are counted; bias adds, softmax, norms and activations
are reported separately as auxiliary element operations.

Two independent routes produce MAC counts:

* :func:`count_flops` -- closed forms evaluated from the spec and the input
  size alone (shape arithmetic, padding included).
* :func:`instrument_forward` -- a real forward pass with the kernels' own
  counters switched on.

They must agree exactly, row by row.
"""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import counters
from .attention import (IwsaConfig, SsaConfig, TokenMap, init_iwsa_weights,
                        init_ssa_weights, iwsa_forward, ssa_forward, vanilla_attention)
from .backbone import Model, _attn_config, forward, module_path
from .config import ModelSpec
from .errors import AccountingError, ConfigError
from .rng import Rng
from .tensor import Tensor, no_grad


@dataclass
class CostRow:
    path: str
    params: int = 0
    flops_analytic: int = 0
    flops_measured: int | None = None
    aux: int = 0


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)

    def row(self, path: str) -> CostRow:
        for r in self.rows:
            if r.path == path:
                return r
        raise KeyError(path)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops_analytic for r in self.rows)

    @property
    def total_measured(self) -> int | None:
        vals = [r.flops_measured for r in self.rows]
        return None if any(v is None for v in vals) else sum(vals)

    @property
    def total_aux(self) -> int:
        return sum(r.aux for r in self.rows)

    def mismatches(self) -> list[CostRow]:
        return [r for r in self.rows if r.flops_measured is not None and r.flops_measured != r.flops_analytic]

    def group(self, depth: int) -> "CostReport":
        """Collapse rows onto their first ``depth`` path components."""
        acc: dict[str, CostRow] = {}
        for r in self.rows:
            key = ".".join(r.path.split(".")[:depth])
            g = acc.setdefault(key, CostRow(key, 0, 0, 0, 0))
            g.params += r.params
            g.flops_analytic += r.flops_analytic
            g.aux += r.aux
            g.flops_measured = None if g.flops_measured is None or r.flops_measured is None \
                else g.flops_measured + r.flops_measured
        return CostReport(list(acc.values()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "params", "flops_analytic", "flops_measured"])
        for r in self.rows:
            w.writerow([r.path, r.params, r.flops_analytic, "" if r.flops_measured is None else r.flops_measured])
        m = self.total_measured
        w.writerow(["total", self.total_params, self.total_flops, "" if m is None else m])
        return buf.getvalue()

    def to_table(self) -> str:
        head = ("path", "params", "MACs (analytic)", "MACs (measured)", "aux ops")
        body = [(r.path, f"{r.params:,}", f"{r.flops_analytic:,}",
                 "-" if r.flops_measured is None else f"{r.flops_measured:,}", f"{r.aux:,}") for r in self.rows]
        m = self.total_measured
        body.append(("TOTAL", f"{self.total_params:,}", f"{self.total_flops:,}",
                     "-" if m is None else f"{m:,}", f"{self.total_aux:,}"))
        widths = [max(len(str(x[i])) for x in [head, *body]) for i in range(5)]
        lines = ["  ".join(str(c).ljust(widths[0]) if i == 0 else str(c).rjust(widths[i])
                           for i, c in enumerate(row)) for row in [head, *body]]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------

def conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv_macs(h_out: int, w_out: int, k: int, cin: int, cout: int, depthwise: bool = False) -> int:
    return h_out * w_out * k * k * (cout if depthwise else cin * cout)


def ceil_to(n: int, m: int) -> int:
    return -(-n // m) * m


def vanilla_attention_macs(n: int, c: int) -> int:
    """``Q K^T`` plus ``A V`` for ``n`` tokens of width ``c``: ``2 n^2 c``."""
    return 2 * n * n * c


def ssa_attention_macs(h: int, w: int, cfg: SsaConfig) -> int:
    """``N * N_r * C_r + N * N_r * C`` with ``N_r`` the reduced token count."""
    n = h * w
    nr = -(-h // cfg.s) * -(-w // cfg.s)
    return n * nr * cfg.c_scaled + n * nr * cfg.c


def ssa_macs(h: int, w: int, cfg: SsaConfig) -> dict[str, int]:
    n, c, cr, s = h * w, cfg.c, cfg.c_scaled, cfg.s
    nr = -(-h // s) * -(-w // s)
    return {
        "proj": n * c * cr + nr * s * s * c * cr + nr * s * s * c * c + n * c * c,
        "attn": ssa_attention_macs(h, w, cfg),
        "lim": 0,
    }


def wsa_attention_macs(h: int, w: int, c: int, m: int) -> int:
    """``2 M^2 H W C`` on the padded extent."""
    return 2 * m * m * ceil_to(h, m) * ceil_to(w, m) * c


def iwsa_macs(h: int, w: int, cfg: IwsaConfig) -> dict[str, int]:
    n, c, m, k = h * w, cfg.c, cfg.m, cfg.k
    local = 0
    if cfg.variant == "LIM":
        local = n * k * k * c
    elif cfg.variant == "LEM":
        local = ceil_to(h, m) * ceil_to(w, m) * k * k * c
    return {"proj": 4 * n * c * c, "attn": wsa_attention_macs(h, w, c, m), "lim": local}


def _stage_grids(spec: ModelSpec, h: int, w: int) -> list[tuple[int, int]]:
    grids = []
    for i in range(len(spec.stages)):
        k, st = (spec.stem_kernel, spec.stem_stride) if i == 0 else (spec.inter_kernel, spec.inter_stride)
        h, w = conv_out(h, k, st, k // 2), conv_out(w, k, st, k // 2)
        grids.append((h, w))
    return grids


def analytic_macs(spec: ModelSpec, h: int, w: int) -> dict[str, int]:
    """MACs per module path for an ``h x w`` input, from the spec alone."""
    out: dict[str, int] = defaultdict(int)
    c_prev = spec.in_chans
    for i, ((gh, gw), st) in enumerate(zip(_stage_grids(spec, h, w), spec.stages)):
        k = spec.stem_kernel if i == 0 else spec.inter_kernel
        c = st.channels
        out[f"embed{i + 1}"] += conv_macs(gh, gw, k, c_prev, c)
        n = gh * gw
        for j, kind in enumerate(spec.block_kinds(i)):
            b = f"stage{i + 1}.block{j + 1}"
            cfg = _attn_config(spec, i, kind)
            parts = ssa_macs(gh, gw, cfg) if kind == "S" else iwsa_macs(gh, gw, cfg)
            out[f"{b}.attn"] += sum(parts.values())
            out[f"{b}.ffn"] += 2 * n * c * spec.ffn_hidden(i)
            if j == 0 and spec.use_peg:
                out[f"stage{i + 1}.peg"] += conv_macs(gh, gw, 3, c, c, depthwise=True)
        c_prev = c
    out["head"] += c_prev * spec.head_hidden + spec.head_hidden * spec.num_classes
    return dict(out)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _param_rows(model: Model) -> dict[str, CostRow]:
    rows: dict[str, CostRow] = {}
    for name, t in model.params.items():
        path = module_path(name)
        rows.setdefault(path, CostRow(path)).params += t.size
    return rows


def count_params(model: Model) -> CostReport:
    return CostReport(list(_param_rows(model).values()))


def count_flops(model: Model, h: int = 224, w: int = 224) -> CostReport:
    rows = _param_rows(model)
    for path, macs in analytic_macs(model.spec, h, w).items():
        rows.setdefault(path, CostRow(path)).flops_analytic += macs
    return CostReport(list(rows.values()))


def instrument_forward(model: Model, image, strict: bool = True) -> CostReport:
    """Forward ``image`` with counters on and compare against :func:`count_flops`.

    Raises :class:`AccountingError` naming the first disagreeing module path
    when ``strict``.
    """
    arr = image.numpy() if isinstance(image, TokenMap) else np.asarray(getattr(image, "data", image))
    h, w = arr.shape[0], arr.shape[1]
    with no_grad(), counters.counting() as ctr:
        forward(model, arr.astype(next(iter(model.params.values())).dtype))
    report = count_flops(model, h, w)
    seen = set()
    for r in report.rows:
        r.flops_measured = ctr.macs.get(r.path, 0)
        r.aux = ctr.aux.get(r.path, 0)
        seen.add(r.path)
    for path, macs in ctr.macs.items():
        if path not in seen and macs:
            report.rows.append(CostRow(path, 0, 0, macs, ctr.aux.get(path, 0)))
    bad = report.mismatches()
    if strict and bad:
        r = bad[0]
        raise AccountingError(f"{r.path}: analytic {r.flops_analytic} MACs != measured {r.flops_measured}")
    return report


# ---------------------------------------------------------------------------
# scaling probes
# ---------------------------------------------------------------------------

MECHANISMS = ("vanilla", "SSA", "SSA-fixed-tokens", "WSA", "IWSA")


@dataclass
class ScalingProbe:
    mechanism: str
    sizes: list[int]
    macs: list[int]
    fitted_exponent: float

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError("sizes must be strictly increasing")
        if any(m <= 0 for m in self.macs):
            raise ValueError("MAC counts must be positive")


def fit_exponent(sizes, macs) -> float:
    """Least-squares slope of ``log(macs)`` against ``log(size)``."""
    x, y = np.log(np.asarray(sizes, float)), np.log(np.asarray(macs, float))
    if len(x) < 2 or np.ptp(x) == 0:
        raise ValueError("degenerate fit: need at least two distinct sizes")
    return float(np.polyfit(x, y, 1)[0])


def _side(n: int) -> int:
    s = math.isqrt(n)
    if s * s != n:
        raise ConfigError(f"probe sizes must be square token counts, got {n}")
    return s


def _probe_configs(mechanism: str, side: int, c: int, heads: int, s: int, m: int, k: int, reduced_side: int):
    if mechanism == "SSA":
        return SsaConfig(c, heads, r_n=f"1/{s * s}", r_c="5/4")
    if mechanism == "SSA-fixed-tokens":
        stride = max(1, side // reduced_side)
        return SsaConfig(c, heads, r_n=f"1/{stride * stride}", r_c="5/4")
    if mechanism in ("WSA", "IWSA"):
        return IwsaConfig(c, heads, m, k, "none" if mechanism == "WSA" else "LIM")
    return None


def attention_term_macs(mechanism: str, side: int, c: int, heads: int = 1, s: int = 2, m: int = 7,
                        k: int = 3, reduced_side: int = 7) -> int:
    """Closed-form attention-term MACs on a ``side x side`` map."""
    cfg = _probe_configs(mechanism, side, c, heads, s, m, k, reduced_side)
    if mechanism == "vanilla":
        return vanilla_attention_macs(side * side, c)
    if mechanism.startswith("SSA"):
        return ssa_attention_macs(side, side, cfg)
    if mechanism in ("WSA", "IWSA"):
        return iwsa_macs(side, side, cfg)["attn"] + iwsa_macs(side, side, cfg)["lim"]
    raise ConfigError(f"unknown mechanism {mechanism!r}; choose from {MECHANISMS}")


def measure_attention_term(mechanism: str, side: int, c: int, heads: int = 1, s: int = 2, m: int = 7,
                           k: int = 3, reduced_side: int = 7, seed: int = 0) -> int:
    """Run the mechanism once with counters on; return its ``attn`` + ``lim`` MACs."""
    rng = Rng(seed)
    x = TokenMap(side, side, c, Tensor(rng.normal((side * side, c), 1.0, np.float32)))
    cfg = _probe_configs(mechanism, side, c, heads, s, m, k, reduced_side)
    with no_grad(), counters.counting() as ctr:
        if mechanism == "vanilla":
            vanilla_attention(x.data, x.data, x.data)
        elif mechanism.startswith("SSA"):
            ssa_forward(x, cfg, init_ssa_weights(cfg, rng, dtype=np.float32))
        elif mechanism in ("WSA", "IWSA"):
            iwsa_forward(x, cfg, init_iwsa_weights(cfg, rng, dtype=np.float32))
        else:
            raise ConfigError(f"unknown mechanism {mechanism!r}; choose from {MECHANISMS}")
    return ctr.by_tag("attn") + ctr.by_tag("lim")


def scaling_probe(mechanism: str, c: int = 64, sizes=(196, 784, 3136, 12544), heads: int = 1, s: int = 2,
                  m: int = 7, k: int = 3, reduced_side: int = 7, instrumented: bool = False) -> ScalingProbe:
    """Attention-term MACs against token count ``N`` on square maps, with a log-log fit.

    ``SSA`` keeps the reduction stride ``s`` fixed; ``SSA-fixed-tokens`` picks
    the stride per size so the reduced grid stays ``reduced_side^2`` tokens.
    With ``instrumented`` the counts come from running the kernels.
    """
    sizes = [int(n) for n in sizes]
    if len(sizes) < 4:
        raise ConfigError("scaling probe needs at least 4 sizes")
    if sizes[-1] < 16 * sizes[0]:
        raise ConfigError("probe sizes must span at least 16x in N")
    fn = measure_attention_term if instrumented else attention_term_macs
    macs = [fn(mechanism, _side(n), c, heads, s, m, k, reduced_side) for n in sizes]
    return ScalingProbe(mechanism, sizes, macs, fit_exponent(sizes, macs))
