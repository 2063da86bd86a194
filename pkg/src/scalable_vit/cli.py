"""``scalable-vit`` command-line interface.

Exit codes: 0 success, 1 verification failure, 2 configuration error or
missing path, 3 input-format error, 4 weight/shape mismatch.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import serialize
from .backbone import build_model, extract_feature_map, forward, resolve_block
from .config import ModelSpec, toy_spec, variant
from .cost import MECHANISMS, count_flops, scaling_probe
from .errors import ConfigError, FormatError, ShapeError, WeightMismatchError
from .imageio import read_ppm, to_uint8, write_pgm, write_ppm
from .tensor import inject_fault, no_grad

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_FORMAT, EXIT_WEIGHTS = 0, 1, 2, 3, 4
DTYPES = {"f32": np.float32, "f64": np.float64}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _require_paths(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise CliError(EXIT_CONFIG, f"no such file: {p}")


def _spec(args) -> ModelSpec:
    if getattr(args, "spec", None):
        return ModelSpec.load(args.spec)
    return variant(args.variant)


def _model(args, spec: ModelSpec):
    dtype = DTYPES[args.dtype]
    model = build_model(spec, seed=args.seed, dtype=dtype)
    if getattr(args, "weights", None):
        model.load_state_dict(serialize.load(args.weights))
        model = model.astype(dtype)
    return model


def _read_image(path, dtype):
    return read_ppm(path).astype(dtype)


def _add_model_args(p: argparse.ArgumentParser, weights: bool = True) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--variant", default="S", help="named variant: S, B or L (default S)")
    src.add_argument("--spec", help="JSON model spec file")
    if weights:
        p.add_argument("--weights", help="SVTW weights file (default: random init from --seed)")
    p.add_argument("--dtype", choices=sorted(DTYPES), default="f32")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def stage_table(spec: ModelSpec, h: int, w: int) -> str:
    from .cost import _stage_grids
    lines = [f"{spec.name}  input {h}x{w}",
             "stage  resolution  channels  heads  r_n    r_c   blocks  kinds"]
    for i, ((gh, gw), st) in enumerate(zip(_stage_grids(spec, h, w), spec.stages)):
        kinds = spec.block_kinds(i)
        r_c = spec.ssa_config(i).r_c if "S" in kinds else st.r_c
        lines.append(f"{i + 1:>5}  {gh:>4}x{gw:<5}  {st.channels:>8}  {st.heads:>5}  {str(st.r_n):<5}  "
                     f"{float(r_c):<4g}  {st.depth:>6}  {','.join(kinds)}")
    return "\n".join(lines)


def cmd_summary(args) -> int:
    _require_paths(args.spec)
    spec = _spec(args)
    model = build_model(spec, seed=args.seed)
    report = count_flops(model, args.size, args.size)
    grouped = report.group(args.depth) if args.depth else report
    print(stage_table(spec, args.size, args.size))
    print()
    print(grouped.to_table())
    print(f"\ntotal params {report.total_params / 1e6:.2f}M  MACs {report.total_flops / 1e9:.2f}G")
    if args.csv:
        Path(args.csv).write_text(grouped.to_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_init(args) -> int:
    _require_paths(args.spec)
    spec = _spec(args)
    model = build_model(spec, seed=args.seed, dtype=DTYPES[args.dtype])
    serialize.save(args.out, model.state_dict())
    print(f"wrote {model.num_params():,} parameters to {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    _require_paths(args.image, args.weights, args.spec)
    spec = _spec(args)
    image = _read_image(args.image, DTYPES[args.dtype])
    model = _model(args, spec)
    with no_grad():
        logits = forward(model, image).data.astype(np.float64)
    z = np.exp(logits - logits.max())
    probs = z / z.sum()
    order = np.argsort(-probs, kind="stable")[:args.topk]
    print("rank,class,score")
    for rank, idx in enumerate(order, 1):
        print(f"{rank},{idx},{probs[idx]:.6f}")
    return EXIT_OK


def cmd_featmap(args) -> int:
    _require_paths(args.image, args.weights, args.spec)
    spec = _spec(args)
    try:
        targets = [resolve_block(spec, global_block=g) for g in args.global_block or ()]
        if args.stage is not None or args.block is not None or not targets:
            targets.insert(0, resolve_block(spec, args.stage, args.block))
    except IndexError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    image = _read_image(args.image, DTYPES[args.dtype])
    model = _model(args, spec)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    for stage, block in dict.fromkeys(targets):  # keep order, drop repeats
        with no_grad():
            fmap = extract_feature_map(model, image, stage, block)
        mean_map = fmap.grid().data.astype(np.float64).mean(axis=-1)
        stem = out / f"stage{stage}_block{block}"
        write_pgm(stem.with_suffix(".pgm"), to_uint8(mean_map))
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(
            [[repr(float(v)) for v in row] for row in mean_map])
        stem.with_suffix(".csv").write_text(buf.getvalue(), encoding="utf-8")
        print(f"stage {stage} block {block}: {fmap.h}x{fmap.w} -> {stem}.pgm")
    return EXIT_OK


def cmd_bench(args) -> int:
    if len(args.sizes) < 4:
        raise CliError(EXIT_CONFIG, f"need at least 4 sizes, got {len(args.sizes)}")
    probes = [scaling_probe(m, c=args.channels, sizes=args.sizes, heads=args.heads, s=args.stride,
                            m=args.window, instrumented=args.instrumented) for m in args.mechanisms]
    print("mechanism,N,macs")
    for p in probes:
        for n, macs in zip(p.sizes, p.macs):
            print(f"{p.mechanism},{n},{macs}")
    print()
    print("mechanism,exponent")
    for p in probes:
        print(f"{p.mechanism},{p.fitted_exponent:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite
    fault = inject_fault("softmax_grad_scale", 1.5) if args.inject_fault == "softmax_scale" else nullcontext()
    with fault:
        results = run_suite(args.suite)
    for r in results:
        print(r.line())
    failed = [f"{r.suite}/{r.name}" for r in results if not r.passed]
    print(f"SUMMARY {len(results) - len(failed)}/{len(results)} passed"
          + (f"; failing: {', '.join(failed)}" if failed else ""))
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_train_toy(args) -> int:
    from .train import accuracy, blob_dataset, train
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    spec = toy_spec()
    images, labels = blob_dataset(args.samples, args.size, seed=args.seed)
    images = np.rint(images * 255) / 255  # train on exactly what the PPM files will hold
    model = build_model(spec, seed=args.seed)
    log = train(model, images, labels, steps=args.steps, seed=args.seed)
    serialize.save(out / "toy.svtw", model.state_dict())
    (out / "toy_spec.json").write_text(spec.to_json(), encoding="utf-8")
    for i, (img, lab) in enumerate(zip(images, labels)):
        write_ppm(out / f"blob_{i:03d}_class{lab}.ppm", img)
    print(f"params {model.num_params():,}; steps to 100%: {log.steps_to_perfect}; "
          f"final accuracy {accuracy(model, images, labels):.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalable-vit", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=42, help="seed for every random draw (default 42)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summary", help="stage table and parameter/MAC report")
    _add_model_args(p, weights=False)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--depth", type=int, default=0, help="group report rows by this many path components")
    p.add_argument("--csv", help="also write the report as CSV")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("init", help="write randomly initialised weights")
    _add_model_args(p, weights=False)
    p.add_argument("out")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("infer", help="classify a PPM image (must already be the target resolution)")
    _add_model_args(p)
    p.add_argument("image")
    p.add_argument("--topk", type=int, default=5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("featmap", help="dump channel-mean feature maps as PGM + CSV")
    _add_model_args(p)
    p.add_argument("image")
    p.add_argument("--stage", type=int)
    p.add_argument("--block", type=int)
    p.add_argument("--global-block", type=int, action="append", help="1-based block index across stages")
    p.add_argument("--random-seed", type=int, dest="seed_override", help="random weights from this seed")
    p.add_argument("--outdir", default="featmaps")
    p.set_defaults(func=cmd_featmap)

    p = sub.add_parser("bench", help="attention MACs vs token count with fitted exponents")
    p.add_argument("--mechanisms", nargs="+", default=["vanilla", "SSA", "WSA", "IWSA"], choices=MECHANISMS)
    p.add_argument("--sizes", nargs="+", type=int, default=[196, 784, 3136, 12544])
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--stride", type=int, default=2, help="SSA reduction stride s")
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--instrumented", action="store_true", help="count by running the kernels")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run the self-check suites")
    p.add_argument("--suite", choices=["all", "grad", "oracle", "cost"], default="all")
    p.add_argument("--inject-fault", choices=["softmax_scale"], help="deliberately corrupt a gradient")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train-toy", help="train the small model on synthetic blobs")
    p.add_argument("--outdir", default="toy_run")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_train_toy)
    return parser


def _thread_limit():
    n = os.environ.get("SVT_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    try:
        return threadpool_limits(limits=max(1, int(n)))
    except ValueError:
        raise CliError(EXIT_CONFIG, f"SVT_THREADS must be an integer, got {n!r}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed_override", None) is not None:
        args.seed = args.seed_override
    try:
        with _thread_limit():
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except WeightMismatchError as exc:
        print(f"error: weights do not match the model: {exc}", file=sys.stderr)
        return EXIT_WEIGHTS
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
