"""Command-line entry point.

Subcommands: paramcount, gradcheck, equiv, train, eval, export-masks,
dump-scenes. Exit codes: 0 success, 1 check failure, 2 usage error.
"""

import argparse
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .config import ConfigError, load_config, parse_config
from .detector import DETECTOR_VARIANTS, FMAP_SIZE, encoder_variant
from .gradcheck import OP_NAMES, check_all
from .gridequiv import GridMaskSpec, run_equivalence_trials
from .harness import config_from_mapping, evaluate, train
from .pgmio import normalize_to_gray, write_pgm
from .roi import ImageExtent, Roi
from .scenes import dump_scenes, scene_rng
from .weights import load_weights, save_weights

EQUIV_SPECS = ((2, 4), (2, 8), (3, 9), (7, 14))


class UsageError(Exception):
    pass


@dataclass
class AuditRow:
    """One configuration's connection and parameter counts."""

    label: str
    fc_connections: int
    mwn_params: int
    total_params: int


def audit_rows(d_conv, d_fc, variant, n_prime, bias_enabled=True,
               ref_n=7, ref_channels=512, ref_d_fc=4096):
    """Exact integer audit: the mask encoder row plus a standard-FC
    reference row (n x n pooling into a wide FC)."""
    d_in = 2 * d_conv if variant == "lg" else d_conv
    branches = 2 if variant == "lg" else 1
    per_net = d_conv * n_prime * n_prime + (d_conv if bias_enabled else 0)
    mwn = branches * per_net
    fc = d_in * d_fc
    rows = [AuditRow(f"mask-encoder-{variant} (N'={n_prime})",
                     fc, mwn, mwn + fc + d_fc)]
    ref_fc = ref_n * ref_n * ref_channels * ref_d_fc
    rows.append(AuditRow(f"standard-frcn reference (N={ref_n})",
                         ref_fc, 0, ref_fc + ref_d_fc))
    return rows


def format_audit_table(rows):
    header = f"{'configuration':<34} {'fc_connections':>16} {'mwn_params':>12} {'total_params':>14}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.label:<34} {r.fc_connections:>16,} "
                     f"{r.mwn_params:>12,} {r.total_params:>14,}")
    return "\n".join(lines)


def _merged_config(args):
    values = {}
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        values.update(load_config(args.config))
    for item in getattr(args, "overrides", []) or []:
        try:
            values.update(parse_config(item))
        except ConfigError:
            raise UsageError(f"override must be key=value, got {item!r}")
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    return values


def _encoder_variant_token(raw):
    token = raw.strip().lower()
    if token in ("l", "g", "lg"):
        return token
    if token in DETECTOR_VARIANTS:
        return encoder_variant(token)
    raise UsageError(f"unknown variant {raw!r}")


def cmd_paramcount(args):
    values = _merged_config(args)
    variant = _encoder_variant_token(values.get("variant", "l"))
    try:
        d_conv = int(values.get("d_conv", 512))
        d_fc = int(values.get("d_fc", 256))
        n_prime = int(values.get("n_prime", 7))
        ref_n = int(values.get("ref_n", 7))
        ref_channels = int(values.get("ref_channels", 512))
        ref_d_fc = int(values.get("ref_d_fc", 4096))
    except ValueError as exc:
        raise UsageError(f"bad config value: {exc}")
    rows = audit_rows(d_conv, d_fc, variant, n_prime,
                      ref_n=ref_n, ref_channels=ref_channels, ref_d_fc=ref_d_fc)
    print(format_audit_table(rows))
    return 0


def cmd_gradcheck(args):
    reports = check_all(seed=args.seed or 0, corrupt=args.corrupt)
    for report in reports:
        print(report.line())
    failed = [r.op for r in reports if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print(f"all {len(reports)} gradient checks passed")
    return 0


def cmd_equiv(args):
    trials = args.trials or 100
    seed = args.seed or 0
    status = 0
    for i, (n, n_prime) in enumerate(EQUIV_SPECS):
        rng = scene_rng(seed, 20, i)
        exact = run_equivalence_trials(GridMaskSpec(n, n_prime), trials, rng)
        marker = "ok" if exact == trials else "MISMATCH"
        print(f"N={n} N'={n_prime}: {exact}/{trials} exact  {marker}")
        if exact != trials:
            status = 1
    return status


def _train_setup(args):
    values = _merged_config(args)
    variant = values.get("variant", "m-frcn-l").strip().lower()
    if variant not in DETECTOR_VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; "
                         f"choose from {DETECTOR_VARIANTS}")
    try:
        cfg = config_from_mapping(values)
    except ValueError as exc:
        raise UsageError(str(exc))
    return variant, cfg


def cmd_train(args):
    variant, cfg = _train_setup(args)
    params, losses = train(variant, cfg)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    weights_path = args.weights or os.path.join(out_dir, f"{variant}.weights")
    save_weights(weights_path, params)
    losses_path = os.path.join(out_dir, f"{variant}-losses.csv")
    with open(losses_path, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, loss in enumerate(losses):
            fh.write(f"{step},{loss:.17g}\n")
    ap = evaluate(params, variant, cfg.eval_scenes, cfg)
    print(f"variant: {variant}")
    print(f"steps: {cfg.steps}  seed: {cfg.seed}")
    print(f"loss: first={losses[0]:.6f} min={losses.min():.6f} "
          f"last={losses[-1]:.6f} last100_mean={losses[-100:].mean():.6f}")
    print(f"AP@0.5: {ap:.4f}")
    print(f"weights: {weights_path}")
    print(f"losses: {losses_path}")
    return 0


def cmd_eval(args):
    variant, cfg = _train_setup(args)
    if not args.weights:
        raise UsageError("eval requires --weights PATH")
    if not os.path.exists(args.weights):
        raise UsageError(f"weights file not found: {args.weights}")
    params = load_weights(args.weights)
    ap = evaluate(params, variant, cfg.eval_scenes, cfg)
    print(f"variant: {variant}")
    print(f"AP@0.5: {ap:.4f}")
    return 0


def _write_mask_files(out_dir, stem, mask):
    write_pgm(os.path.join(out_dir, f"{stem}.pgm"), normalize_to_gray(mask))
    with open(os.path.join(out_dir, f"{stem}.csv"), "w", encoding="utf-8") as fh:
        for row in mask:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def cmd_export_masks(args):
    if not args.weights:
        raise UsageError("export-masks requires --weights PATH")
    if not os.path.exists(args.weights):
        raise UsageError(f"weights file not found: {args.weights}")
    values = _merged_config(args)
    i_l = float(values.get("i_l", 1.0))
    i_in_g = float(values.get("i_in_g", 1.0))
    i_out_g = float(values.get("i_out_g", -1.0))
    tensors = load_weights(args.weights)
    out_dir = args.out or "masks"
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output dir: {exc}", file=sys.stderr)
        return 1
    wrote = 0
    if "mwn_l.kernels" in tensors:
        params = enc.ConvParams(tensors["mwn_l.kernels"], tensors["mwn_l.bias"])
        n = params.kernel_size
        masks = enc.mwn_forward(enc.unary_raw_mask(n, i_l), params).masks
        for k, mask in enumerate(masks):
            _write_mask_files(out_dir, f"mask_l_{k:03d}", mask)
            wrote += 1
    if "mwn_g.kernels" in tensors:
        params = enc.ConvParams(tensors["mwn_g.kernels"], tensors["mwn_g.bias"])
        n = params.kernel_size
        extent = ImageExtent(FMAP_SIZE, FMAP_SIZE)
        cells = np.linspace(0, FMAP_SIZE, 4).astype(int)  # 3x3 position grid
        from .roi import context_raw_mask

        for r in range(3):
            for c in range(3):
                roi = Roi(cells[c], cells[r], cells[c + 1], cells[r + 1])
                raw = context_raw_mask(roi, extent, n, i_in_g, i_out_g)
                masks = enc.mwn_forward(raw, params).masks
                for k, mask in enumerate(masks):
                    _write_mask_files(out_dir, f"mask_g_r{r}c{c}_{k:03d}", mask)
                    wrote += 1
    if wrote == 0:
        print("error: weights contain no mask-network tensors", file=sys.stderr)
        return 1
    print(f"wrote {wrote} masks (pgm + csv) to {out_dir}")
    return 0


def cmd_dump_scenes(args):
    out_dir = args.out or "scenes"
    count = args.count or 16
    written = dump_scenes(out_dir, args.seed or 0, count)
    print(f"wrote {written} scenes + boxes.txt to {out_dir}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="maskenc",
        description="masked ROI feature encoding: audits, oracles and the "
                    "toy detection experiment")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, overrides=False, **flags):
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int, metavar="N")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--trials", type=int, metavar="N")
        p.add_argument("--weights", metavar="PATH")
        for flag, kwargs in flags.items():
            p.add_argument(flag, **kwargs)
        if overrides:
            p.add_argument("overrides", nargs="*", metavar="key=value")
        p.set_defaults(fn=fn)
        return p

    add("paramcount", cmd_paramcount, overrides=True)
    add("gradcheck", cmd_gradcheck,
        **{"--corrupt": dict(choices=OP_NAMES, metavar="OP")})
    add("equiv", cmd_equiv)
    add("train", cmd_train, overrides=True)
    add("eval", cmd_eval, overrides=True)
    add("export-masks", cmd_export_masks, overrides=True)
    add("dump-scenes", cmd_dump_scenes,
        **{"--count": dict(type=int, metavar="N")})
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
