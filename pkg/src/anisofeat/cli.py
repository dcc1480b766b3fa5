"""``anisofeat`` command line: simmap, kernel-check, feret-bench, scale-search."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .encoding import DEFAULT_SCALE, DEFAULT_TEMPERATURE, FAMILIES
from .experiments import (
    ConfigError,
    cmd_feret_bench,
    cmd_kernel_check,
    cmd_scale_search,
    cmd_simmap,
    default_jobs,
    load_config,
    parse_grid,
    resolve_config,
    write_manifest,
)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser, out_default: str | None) -> None:
    p.add_argument("--seed", type=int, default=None, help="root seed (default 42)")
    p.add_argument("--jobs", type=int, default=None, help="parallel worker cap (fallback: $ANISOFEAT_JOBS, then 1)")
    p.add_argument("--out", default=out_default, help="run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anisofeat", description=__doc__)
    parser.add_argument("--version", action="version", version=f"anisofeat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simmap", help="dot-product similarity map to the central patch (PGM + CSV)")
    _common(p, "runs/simmap")
    p.add_argument("--grid", default="14x14")
    p.add_argument("--encoder", default="ifpe", choices=FAMILIES)
    p.add_argument("--scales", type=_floats, default=None, help="per-axis scales for afpe, e.g. 0.497,1.125")
    p.add_argument("--s", type=float, default=DEFAULT_SCALE, dest="scale", help="isotropic scale")
    p.add_argument("--t", type=float, default=DEFAULT_TEMPERATURE, dest="temperature", help="sinusoidal temperature")
    p.add_argument("--dims", "-D", type=int, default=256)

    p = sub.add_parser("kernel-check", help="Monte Carlo kernel-limit and elongation checks")
    _common(p, None)
    p.add_argument("--half-dims", type=int, default=8192)
    p.add_argument("--s", type=_floats, default=[0.5, 1.0], dest="iso", help="isotropic scales to check")
    p.add_argument("--scales", type=_floats, default=[0.497, 1.125], help="anisotropic scales to check")
    p.add_argument("--elongation-scales", type=_floats, default=[0.0497, 0.1125])
    p.add_argument("--grid", default="14x14")
    p.add_argument("--radius", type=float, default=5.0)

    for name, helptext in (
        ("feret-bench", "train every encoder on the Feret-diameter regression task"),
        ("scale-search", "random search over per-axis anisotropic scales"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p, None)
        p.add_argument("--config", type=Path, default=None, help="JSON experiment config")
        p.add_argument("--n", type=int, default=None, help="number of shapes")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--anisotropy", type=_ints, default=None)
        p.add_argument("--encoders", type=lambda s: s.split(","), default=None)
        p.add_argument("--n-boot", type=int, default=None)
        p.add_argument("--n-trials", type=int, default=None)
    return parser


def _overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    o["jobs"] = args.jobs if args.jobs is not None else default_jobs()
    if args.out is not None:
        o["out"] = args.out
    if args.encoders is not None:
        o["encoders"] = args.encoders
    ds = {k: v for k, v in (("n", args.n), ("anisotropy", args.anisotropy)) if v is not None}
    if ds:
        o["dataset"] = ds
    if args.epochs is not None:
        o["training"] = {"epochs": args.epochs}
    if args.n_boot is not None:
        o["evaluation"] = {"n_boot": args.n_boot}
    if args.n_trials is not None:
        o["search"] = {"n_trials": args.n_trials}
    if args.command == "scale-search" and args.anisotropy is not None:
        if len(args.anisotropy) != 1:
            raise ConfigError("scale-search takes a single anisotropy factor")
        o.setdefault("search", {})["anisotropy"] = args.anisotropy[0]
        del o["dataset"]["anisotropy"]
    return o


def run(args) -> int:
    seed = 42 if args.seed is None else args.seed
    if args.command == "simmap":
        res = cmd_simmap(args.out, args.grid, args.encoder, args.scales, args.temperature, args.scale, args.dims, seed)
        for p in res["pgm"] + [res["csv"]]:
            print(p)
        return 0
    if args.command == "kernel-check":
        grid = parse_grid(args.grid)
        ok, lines = cmd_kernel_check(
            args.half_dims, args.iso, args.scales, args.elongation_scales, grid, args.radius, seed
        )
        print("\n".join(lines))
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "report.txt").write_text("\n".join(lines) + "\n")
            record = {
                "half_dims": args.half_dims,
                "iso": args.iso,
                "scales": args.scales,
                "elongation_scales": args.elongation_scales,
                "grid": list(grid),
                "radius": args.radius,
                "seed": seed,
            }
            write_manifest(out, "kernel-check", record)
        return 0 if ok else 1
    user = load_config(args.config) if args.config else {}
    cfg = resolve_config(user, _overrides(args))
    if args.command == "feret-bench":
        cmd_feret_bench(cfg)
        print((Path(cfg["out"]) / "report.txt").read_text(), end="")
        return 0
    summary = cmd_scale_search(cfg)
    print(
        f"best scales {summary['best_scales']} val R2 {summary['best_val_r2']:.4f}"
        f" (isotropic baseline {summary['baseline']['val_r2']:.4f})"
    )
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"anisofeat {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
