"""Command-line entry point: ``a2f <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Any subcommand also
accepts ``--config-file`` with ``key=value`` lines (keys are flag names with
or without the leading dashes); flags given on the command line win.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

from . import data as D
from . import tensor as T
from .errors import A2FError, ConfigurationError, DatasetError
from .model import SCALES, VARIANTS, build_model, summary, variant_config
from .store import load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("a2fsr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _resolution(text: str):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 1280x720, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


def _model_flags(p, *, required=False):
    p.add_argument("--variant", choices=[*VARIANTS, "custom"], required=required,
                   help="model size: S, SD, M, L or custom (with --blocks/--channels)")
    p.add_argument("--scale", type=int, choices=SCALES, help="upscaling factor")
    p.add_argument("--blocks", type=int, help="block count for --variant custom")
    p.add_argument("--channels", type=int, help="feature width for --variant custom")
    p.add_argument("--ablation", choices=["full", "noca", "baseline"], default="full",
                   help="noca drops channel attention; baseline also drops the projection unit")


def _config_from_args(args):
    if args.variant is None or args.scale is None:
        raise UsageError("--variant and --scale are required")
    return variant_config(
        args.variant, args.scale, n_blocks=args.blocks, channels=args.channels,
        projection=args.ablation != "baseline", channel_attention=args.ablation == "full",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="a2f", description="Lightweight single-image super-resolution toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("prepare", help="build an LR/HR pair set from a directory of HR PNGs")
    p.add_argument("--hr-dir", required=True, type=Path)
    p.add_argument("--scale", required=True, type=int, choices=SCALES)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--no-antialias", action="store_true", help="plain bicubic kernel when downscaling")

    p = sub.add_parser("train", help="train a model and write checkpoints/logs under --out")
    _model_flags(p)
    p.add_argument("--data", required=True, type=Path, help="prepared directory or manifest file")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patch", type=int, default=48, help="LR patch edge")
    p.add_argument("--halving-interval", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-interval", type=int, default=0)
    p.add_argument("--eval-data", type=Path)
    p.add_argument("--eval-interval", type=int, default=0)
    p.add_argument("--resume", type=Path, help="checkpoint saved with optimizer state")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--deterministic", action="store_true", help="single-threaded numerics")

    p = sub.add_parser("eval", help="PSNR/SSIM (Y channel) and forward time on a pair set")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--shave", type=int, help="border crop, defaults to the scale")
    p.add_argument("--baseline", action="store_true", help="also report bicubic upsampling")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("sr", help="super-resolve one PNG")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--output", required=True, type=Path)

    p = sub.add_parser("info", help="parameter count, multi-adds and feature factors")
    _model_flags(p)
    p.add_argument("--model", type=Path, help="read the configuration and factors from a checkpoint")
    p.add_argument("--resolution", type=_resolution, default=(1280, 720), help="HR output WxH")
    p.add_argument("--layers", action="store_true", help="print the per-layer table")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    p.add_argument("--config", default="micro", help="'micro' or e.g. L=3,C=4,p=2")
    p.add_argument("--precision", choices=["wide", "standard"], default="wide")
    p.add_argument("--ablation", choices=["full", "noca", "baseline"], default="full")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--ops", action="store_true", help="check every kernel op as well")
    p.add_argument("--json", action="store_true")

    for action in sub.choices.values():
        action.add_argument("--config-file", type=Path, help="key=value defaults; flags take precedence")
    return parser


def _read_config_file(path: Path) -> dict[str, str]:
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    values = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        values[key.strip().lstrip("-").replace("-", "_")] = val.strip()
    return values


def _find_config_file(argv: list[str]):
    for i, tok in enumerate(argv):
        if tok == "--config-file" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if tok.startswith("--config-file="):
            return Path(tok.split("=", 1)[1])
    return None


def _apply_config_file(parser: _Parser, argv: list[str]):
    """Parse ``argv``, filling unset options from ``--config-file`` when present."""
    path = _find_config_file(argv)
    command = next((tok for tok in argv if tok in COMMANDS), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[command]
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    defaults = {}
    for key, raw in _read_config_file(path).items():
        action = actions.get(key)
        if action is None or key in ("help", "config_file"):
            raise UsageError(f"{path}: unknown option {key!r} for '{command}'")
        if action.nargs == 0:
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}: bad value for {key}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{path}: {key} must be one of {list(action.choices)}")
        defaults[key] = value
    sub.set_defaults(**defaults)
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    manifest = D.prepare_dataset(args.hr_dir, args.scale, args.out, antialias=not args.no_antialias)
    print(f"manifest: {manifest.path}")
    print(f"pairs: {len(manifest.pairs)}")
    for path, reason in manifest.skipped:
        print(f"skipped {path}: {reason}", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainConfig, train

    opt_state = None
    if args.resume is not None:
        model, opt_state, _ = load_checkpoint(args.resume)
        cfg = model.config
        mismatch = []
        if args.variant is not None and args.variant != cfg.variant:
            mismatch.append(f"variant {args.variant} vs checkpoint {cfg.variant}")
        if args.scale is not None and args.scale != cfg.scale:
            mismatch.append(f"scale {args.scale} vs checkpoint {cfg.scale}")
        if mismatch:
            raise ConfigurationError("config mismatch with --resume: " + "; ".join(mismatch))
        if opt_state is None:
            raise ConfigurationError(f"{args.resume} holds no optimizer state; cannot resume")
    else:
        model = build_model(_config_from_args(args), seed=args.seed)

    config = TrainConfig(
        lr=args.lr, lr_halving_interval=args.halving_interval, batch_size=args.batch,
        lr_patch=args.patch, total_steps=args.steps, seed=args.seed,
        checkpoint_interval=args.checkpoint_interval, eval_interval=args.eval_interval,
        log_interval=max(1, min(100, args.steps // 20 or 1)),
    )
    pairs = D.load_pairs(args.data, model.config.scale)
    eval_pairs = D.load_pairs(args.eval_data, model.config.scale) if args.eval_data else None
    print(f"training {model.config.name} on {len(pairs)} images for {args.steps} steps")
    guard = T.deterministic() if args.deterministic else contextlib.nullcontext()
    with guard:
        _, history = train(model, pairs, config, out_dir=args.out, optimizer_state=opt_state,
                           eval_pairs=eval_pairs)
    if history.records:
        last = history.records[-1]
        print(f"step {last['step']}: loss {last['loss']:.6f}")
    print(f"checkpoint: {Path(args.out) / 'last.a2f'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import bicubic_upscaler, evaluate

    model, _, _ = load_checkpoint(args.model)
    p = model.config.scale
    pairs = D.load_pairs(args.data, p)
    with T.deterministic():
        report = evaluate(model, pairs, p, args.shave)
    reports = {model.config.name: report}
    if args.baseline:
        reports["bicubic"] = evaluate(bicubic_upscaler(p), pairs, p, args.shave)
    if args.json:
        print(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2))
    else:
        for name, r in reports.items():
            print(f"== {name}")
            print(r.format_table())
    return EXIT_OK


def cmd_sr(args) -> int:
    model, _, _ = load_checkpoint(args.model)
    plane = D.load_png(args.input)
    with T.deterministic():
        out = model.forward(D.image_to_tensor(plane))
    D.save_png(D.tensor_to_image(out), args.output)
    print(f"{args.input} ({plane.width}x{plane.height}) -> {args.output} "
          f"({plane.width * model.config.scale}x{plane.height * model.config.scale})")
    return EXIT_OK


def _fmt_int(n):
    return f"{n:,}"


def cmd_info(args) -> int:
    if args.model is not None:
        model, _, meta = load_checkpoint(args.model)
    else:
        model, meta = build_model(_config_from_args(args)), {}
    info = summary(model, args.resolution)
    if args.json:
        if meta:
            info["metadata"] = meta
        print(json.dumps(info, indent=2))
        return EXIT_OK
    print(f"model:      {info['model']}")
    print(f"params:     {_fmt_int(info['params'])}")
    if info["multiadds"] is None:
        print(f"multi-adds: n/a ({info['resolution']} is not divisible by x{model.config.scale})")
    else:
        print(f"multi-adds: {info['multiadds'] / 1e9:.2f}G ({_fmt_int(info['multiadds'])} at {info['resolution']})")
    if args.layers:
        print(f"{'layer':<22}{'k':>3}{'in':>6}{'out':>6}{'params':>10}")
        for row in info["layers"]:
            print(f"{row['name']:<22}{row['kernel']:>3}{row['in']:>6}{row['out']:>6}{row['params']:>10}")
    print(f"{'block':>5}  {'lambda_res':>10}  {'lambda_att':>10}  {'lambda_x':>10}")
    for row in info["lambdas"]:
        att = "-" if row["lambda_att"] is None else f"{row['lambda_att']:.4f}"
        print(f"{row['block']:>5}  {row['lambda_res']:>10.4f}  {att:>10}  {row['lambda_x']:>10.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from dataclasses import replace

    from .verify import model_gradcheck, op_gradcheck, parse_config, precision

    prec = precision(args.precision)
    try:
        cfg = parse_config(args.config)
    except ConfigurationError as exc:
        raise UsageError(f"--config: {exc}") from None
    cfg = replace(cfg, projection=args.ablation != "baseline", channel_attention=args.ablation == "full")
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    results = {}
    for seed in range(args.seeds):
        if args.ops:
            for name, rep in op_gradcheck(seed, prec).items():
                results[f"op:{name}:seed{seed}"] = rep
        results[f"model:seed{seed}"] = model_gradcheck(cfg, seed, prec)
    worst = max(r.max_rel_error for r in results.values())
    ok = worst < prec.threshold
    if args.json:
        print(json.dumps({
            "config": cfg.name, "precision": prec.name, "threshold": prec.threshold,
            "max_rel_error": worst, "pass": ok,
            "checks": {k: {"max_rel_error": r.max_rel_error, "checked": r.checked,
                           "skipped_kinks": r.skipped_kinks, "worst_param": r.worst_param}
                       for k, r in results.items()},
        }, indent=2))
    else:
        for key, r in results.items():
            print(f"{key:<32} max rel error {r.max_rel_error:.3e}  "
                  f"({r.checked} checked, {r.skipped_kinks} kinks skipped, worst {r.worst_param})")
        print(f"{cfg.name}, {prec.name} precision: max rel error {worst:.3e} "
              f"({'<' if ok else '>='} {prec.threshold:g}) {'PASS' if ok else 'FAIL'}")
    if not ok:
        print(f"gradient check failed: {worst:.3e} exceeds {prec.threshold:g}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "sr": cmd_sr,
    "info": cmd_info,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"a2f {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"a2f {args.command}: error: {exc}", file=sys.stderr)
        for orphan in exc.orphans:
            print(f"  orphan: {orphan}", file=sys.stderr)
        return EXIT_RUNTIME
    except (A2FError, OSError) as exc:
        print(f"a2f {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
