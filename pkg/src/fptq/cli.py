"""Command-line pipeline: ``gen -> analyze -> quantize -> eval``.

Every stage reads and writes files, prints diagnostics to stderr only and
exits with status 1 on any error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    STREAM_EVAL,
    ActivationReservoir,
    CalibSource,
    build_naive_recipe,
    build_passthrough_recipe,
    build_recipe,
    calibrate,
    histogram_export,
    random_tokens,
    read_token_file,
)
from .equalization import LaeConfig
from .formats import (
    build_report,
    read_checkpoint,
    read_quantized,
    recipe_from_text,
    recipe_to_text,
    write_checkpoint,
    write_histograms,
    write_quantized,
    write_report,
)
from .formats.container import atomic_write
from .recipe import PASS_THROUGH_BITS, PolicyThresholds, QuantConfig
from .toymodel.metrics import evaluate
from .toymodel.model import ModelConfig
from .toymodel.quantized import forward_quant, greedy_decode, quantize_model
from .toymodel.synth import PRESETS, generate_checkpoint, measure_op_ranges

log = logging.getLogger("fptq")

BITS_CHOICES = (4, 8, PASS_THROUGH_BITS)


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _add_calib(p: argparse.ArgumentParser) -> None:
    p.add_argument("--calib", default="random", help="token file path, or 'random' for data-free calibration")
    p.add_argument("--samples", type=int, default=512, help="calibration sequences (default 512)")
    p.add_argument("--seqlen", type=int, default=32, help="tokens per sequence (default 32)")
    p.add_argument("--seed", type=int, default=0, help="seed of the random calibration stream")
    p.add_argument("--batch-size", type=int, default=64)


def _add_policy(p: argparse.ArgumentParser) -> None:
    p.add_argument("--v0", type=float, default=15.0, help="static / equalization boundary (default 15)")
    p.add_argument("--v1", type=float, default=150.0, help="equalization / dynamic boundary (default 150)")
    p.add_argument("--alpha", type=float, default=1.0, help="equalization exponent (default 1)")


def _add_bits(p: argparse.ArgumentParser) -> None:
    p.add_argument("--wbits", "--weight-bits", dest="wbits", type=int, choices=BITS_CHOICES, default=4)
    p.add_argument("--abits", "--act-bits", dest="abits", type=int, choices=BITS_CHOICES, default=8)
    p.add_argument("--group-size", type=int, default=128, help="weight group size; 0 = per-channel")
    p.add_argument(
        "--kv-bits", type=int, choices=BITS_CHOICES, default=None,
        help="KV-cache width (default 8, or 16 when activations are not quantized)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fptq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fptq {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic toy checkpoint")
    g.add_argument("--preset", choices=sorted(PRESETS), default="outlier")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--norm", choices=("rmsnorm", "layernorm"), default="rmsnorm")
    g.add_argument("--out", required=True)

    a = sub.add_parser("analyze", help="calibrate, classify layers, export histograms")
    a.add_argument("--ckpt", required=True)
    _add_calib(a)
    _add_policy(a)
    _add_bits(a)
    a.add_argument("--bins", type=int, default=64)
    a.add_argument("--out", required=True, help="report.json path")
    a.add_argument("--hist-dir", default=None, help="directory for hist_<layer>.csv files")
    a.add_argument("--recipe-out", default=None, help="also write the recipe JSON")

    q = sub.add_parser("quantize", help="fuse equalization and quantize weights")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--recipe", default=None, help="recipe JSON from analyze (skips calibration)")
    q.add_argument("--naive", action="store_true", help="baseline: all static per-tensor, per-channel weights")
    _add_calib(q)
    _add_policy(q)
    _add_bits(q)
    q.add_argument("--out", required=True, help="quantized checkpoint path")

    e = sub.add_parser("eval", help="compare a quantized checkpoint with the float model")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--qckpt", default=None, help="quantized checkpoint (omit to compare the float model with itself)")
    e.add_argument("--baseline", default=None, help="second quantized checkpoint to report a margin against")
    e.add_argument("--eval-tokens", default=None, help="token file (default: seeded random stream)")
    e.add_argument("--samples", type=int, default=64, help="evaluation sequences (default 64)")
    e.add_argument("--seqlen", type=int, default=32)
    e.add_argument("--seed", type=int, default=0, help="seed of the evaluation stream")
    e.add_argument("--decode-steps", type=int, default=32)
    e.add_argument("--out", required=True, help="report.json path")
    return parser


def _kv_bits(args) -> int:
    if args.kv_bits is not None:
        return args.kv_bits
    return PASS_THROUGH_BITS if args.abits == PASS_THROUGH_BITS else 8


def _quant_config(args) -> QuantConfig:
    return QuantConfig(args.wbits, args.abits, args.group_size, _kv_bits(args))


def _source(args) -> CalibSource:
    if args.calib == "random":
        return CalibSource.random(args.samples, args.seqlen, args.seed)
    return CalibSource.token_file(args.calib, args.samples, args.seqlen)


def _recipe_with_warnings(build, *a, **kw):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        recipe = build(*a, **kw)
    msgs = [str(w.message) for w in caught]
    for m in msgs:
        _say(f"warning: {m}")
    return recipe, msgs


def cmd_gen(args) -> int:
    config = ModelConfig(norm_kind=args.norm)
    model = generate_checkpoint(config, PRESETS[args.preset], args.seed)
    write_checkpoint(args.out, model)
    probe = random_tokens(config.vocab_size, 64, 32, args.seed, STREAM_EVAL)
    ranges = measure_op_ranges(model, probe)
    _say(f"wrote {args.out} ({model.model_id})")
    for key in sorted(ranges, key=lambda k: (int(k.split(".")[0]), k)):
        _say(f"  layer {key:<12} range {ranges[key]:9.3f}")
    return 0


def cmd_analyze(args) -> int:
    model = read_checkpoint(args.ckpt)
    reservoir = ActivationReservoir(seed=args.seed) if args.hist_dir else None
    stats = calibrate(model, _source(args), batch_size=args.batch_size, reservoir=reservoir)
    recipe, msgs = _recipe_with_warnings(
        build_recipe, model, stats, PolicyThresholds(args.v0, args.v1), LaeConfig(args.alpha), _quant_config(args)
    )
    doc = build_report(recipe, stats, warnings=msgs, command="analyze", model_id=model.model_id)
    write_report(args.out, doc)
    if args.hist_dir:
        write_histograms(args.hist_dir, histogram_export(reservoir, args.bins, recipe))
    if args.recipe_out:
        atomic_write(args.recipe_out, recipe_to_text(recipe).encode())
    for row in doc["layers"]:
        _say(f"  {row['layer_id']:<22} v={row['v']:9.3f}  {row['strategy']}")
    return 0


def cmd_quantize(args) -> int:
    model = read_checkpoint(args.ckpt)
    if args.recipe and args.naive:
        raise ValueError("--recipe and --naive are mutually exclusive")
    if args.recipe:
        recipe = recipe_from_text(Path(args.recipe).read_text())
    else:
        stats = calibrate(model, _source(args), batch_size=args.batch_size)
        if args.naive:
            recipe = build_naive_recipe(model, stats, _quant_config(args))
        else:
            recipe, _ = _recipe_with_warnings(
                build_recipe, model, stats, PolicyThresholds(args.v0, args.v1), LaeConfig(args.alpha), _quant_config(args)
            )
    write_quantized(args.out, quantize_model(model, recipe))
    _say(f"wrote {args.out} (W{recipe.weight_bits}A{recipe.act_bits}, group {recipe.group_size or 'per-channel'})")
    return 0


def _eval_tokens(args, vocab: int) -> np.ndarray:
    if args.eval_tokens:
        ids = read_token_file(args.eval_tokens)
        n = ids.size // args.seqlen
        if n == 0:
            raise ValueError(f"{args.eval_tokens}: fewer than {args.seqlen} tokens")
        return ids[: min(n, args.samples) * args.seqlen].reshape(-1, args.seqlen)
    return random_tokens(vocab, args.samples, args.seqlen, args.seed, STREAM_EVAL)


def _decode_check(model, recipe, qckpt, prompt, steps: int) -> dict:
    steps = min(steps, model.config.max_seq - len(prompt))
    seq = greedy_decode(model, recipe, qckpt, prompt, steps)
    full = forward_quant(model, recipe, qckpt, seq)
    ref = full.argmax(axis=-1)[len(prompt) - 1 : -1]
    agree = float(np.mean(ref == seq[len(prompt) :])) if steps else 1.0
    return {"steps": steps, "prompt_length": len(prompt), "agreement": agree, "exact": agree == 1.0}


def cmd_eval(args) -> int:
    model = read_checkpoint(args.ckpt)
    if args.qckpt:
        qckpt = read_quantized(args.qckpt)
        recipe = qckpt.recipe
    else:
        recipe = build_passthrough_recipe(model)
        qckpt = quantize_model(model, recipe)
    tokens = _eval_tokens(args, model.config.vocab_size)
    metrics = evaluate(model, recipe, qckpt, tokens).to_dict()
    extra = {
        "command": "eval",
        "model_id": model.model_id,
        "decode": _decode_check(model, recipe, qckpt, tokens[0, :4], args.decode_steps),
    }
    if args.baseline:
        base = read_quantized(args.baseline)
        bm = evaluate(model, base.recipe, base, tokens).to_dict()
        extra["baseline"] = {"metrics": bm}
        extra["margin"] = {
            "mse": bm["mse"] - metrics["mse"],
            "cosine": metrics["cosine"] - bm["cosine"],
            "top1_agreement": metrics["top1_agreement"] - bm["top1_agreement"],
        }
    write_report(args.out, build_report(recipe, None, metrics, **extra))
    _say(
        f"mse {metrics['mse']:.6g}  cosine {metrics['cosine']:.6f}  top1 {metrics['top1_agreement']:.4f}  "
        f"xent {metrics['xent_proxy']:.4f}  decode-agreement {extra['decode']['agreement']:.4f}"
    )
    return 0


COMMANDS = {"gen": cmd_gen, "analyze": cmd_analyze, "quantize": cmd_quantize, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        _say(f"fptq {args.command}: error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
