"""Command-line interface: ``rainforge <command> [options]``.

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .factors import sample_factors
from .pipeline import (
    SWEEPABLE,
    ConfigError,
    GenerationConfig,
    Generator,
    generate_dataset,
    list_backgrounds,
    load_config,
    load_image,
    render_index,
    save_image,
    sweep_factor,
    synthetic_problem,
)
from .recovery import FREE_VARIABLES, GradCheckReport, RecoveryProblem, fit_factors, grad_check, trace_to_csv
from .rot_tv import orientation_scan, scan_to_csv

logger = logging.getLogger("rainforge")

DEFAULT_OUT = "rainforge_out"


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _assignments(text: str) -> dict[str, float]:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, sep, value = part.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected name=value, got {part!r}")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad number in {part!r}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rainforge", description="Controllable synthetic rain generation.")
    ap.add_argument("--seed", type=int, help="master seed (overrides the config)")
    ap.add_argument("--config", type=Path, help="YAML generation config")
    ap.add_argument("--out", type=Path, help="output directory (overrides the config)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render one rainy image")
    r.add_argument("--background", type=Path, help="background image (default: first in backgrounds_dir, else flat grey)")
    r.add_argument("--size", type=int, default=256, help="side of the flat background when none is given")
    r.add_argument("--index", type=int, default=0, help="image index in the seed lineage")
    r.add_argument("--theta-deg", type=float)
    r.add_argument("--sl", type=float)
    r.add_argument("--sw", type=float)
    r.add_argument("--tau", type=float)

    d = sub.add_parser("dataset", help="render a paired dataset from the config")
    d.add_argument("--count", type=int, help="override the image count")
    d.add_argument("--workers", type=int, help="worker processes (default RAINFORGE_THREADS, 0 = all CPUs)")

    s = sub.add_parser("sweep", help="vary one factor with everything else fixed")
    s.add_argument("--factor", required=True, choices=SWEEPABLE)
    s.add_argument("--values", required=True, type=_floats)
    s.add_argument("--background", type=Path)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--no-measure", action="store_true", help="skip orientation/width measurement")

    rc = sub.add_parser("recover", help="fit factors to a target rain layer")
    rc.add_argument("--target", required=True, type=Path, help="rain layer (.npy float array or image)")
    rc.add_argument("--index", type=int, default=0, help="image index whose noise and fixed factors to use")
    rc.add_argument("--free", default="theta,s_l,s_w", help="comma-separated free variables")
    rc.add_argument("--init", type=_assignments, default={}, help="e.g. theta=0,s_l=1,s_w=1")
    rc.add_argument("--lam", type=float, default=1.0)
    rc.add_argument("--step", type=float, default=1e-2)
    rc.add_argument("--max-iter", type=int, default=2000)

    g = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    g.add_argument("--samples", type=int, default=20)
    g.add_argument("--h", type=float, default=1e-4)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--margin", type=float, default=1e-3, help="kink-proximity margin (parameter units)")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--free", default="theta,s_l,s_w,alpha,tau")
    g.add_argument("--lam", type=float, default=1.0)
    g.add_argument("--alpha-entries", type=int, default=10, help="alpha entries checked per sample (0 = all)")

    t = sub.add_parser("tvscan", help="scan rotatable TV over angles")
    t.add_argument("--input", required=True, type=Path, help="rain layer (.npy or image)")
    t.add_argument("--theta-min", type=float, default=-89.0)
    t.add_argument("--theta-max", type=float, default=90.0)
    t.add_argument("--step", type=float, default=1.0)
    return ap


def _config(args) -> GenerationConfig:
    if args.config is not None:
        if not args.config.is_file():
            raise FileNotFoundError(f"config not found: {args.config}")
        cfg = load_config(args.config)
    else:
        cfg = GenerationConfig(output_dir=Path(DEFAULT_OUT))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    cfg.validate()
    return cfg


def _load_array(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"input not found: {path}")
    if path.suffix.lower() == ".npy":
        return np.load(path)
    return load_image(path)


def _background(args, cfg: GenerationConfig) -> np.ndarray:
    if args.background is not None:
        return _load_array(args.background)
    found = list_backgrounds(cfg.backgrounds_dir)
    if found:
        return load_image(found[0])
    return np.full((args.size, args.size, 3), 0.5)


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _free(text: str) -> tuple[str, ...]:
    names = tuple(n.strip() for n in text.split(",") if n.strip())
    bad = set(names) - set(FREE_VARIABLES)
    if bad or not names:
        raise ConfigError(f"free variables must be a non-empty subset of {FREE_VARIABLES}")
    return names


def cmd_render(args, cfg):
    gen = Generator.from_config(cfg)
    k = cfg.kernel
    factors = sample_factors(cfg.factors, k.M, k.K, master_seed=cfg.seed, stream_id=args.index,
                             per_atom_theta=k.per_atom_theta)
    overrides = {name: v for name, v in (("theta", args.theta_deg), ("s_l", args.sl), ("s_w", args.sw), ("tau", args.tau))
                 if v is not None}
    if "theta" in overrides and k.per_atom_theta:
        overrides["theta"] = np.full(k.M, overrides["theta"])
    factors = factors.replace(**overrides)
    res = render_index(cfg, gen, _background(args, cfg), args.index, factors)
    out = Path(cfg.output_dir)
    save_image(out / "rainy.png", res.rainy)
    save_image(out / "rain_layer.png", res.rain_layer)
    save_image(out / "rain_map.png", res.rain_map.max(axis=2))
    np.save(out / "rain_layer.npy", res.rain_layer)
    res.record.files = {"rainy": "rainy.png", "rain_layer": "rain_layer.png", "rain_map": "rain_map.png"}
    _write_json(out / "record.json", res.record.to_dict())
    print(f"rendered {res.rainy.shape[1]}x{res.rainy.shape[0]} image, sparsity {res.record.sparsity:.4f} -> {out}")


def cmd_dataset(args, cfg):
    if args.config is None:
        raise ConfigError("dataset needs --config")
    if args.count is not None:
        cfg.count = args.count
        cfg.validate()
    summary = generate_dataset(cfg, workers=args.workers)
    print(f"wrote {summary['count']} images to {cfg.output_dir} "
          f"(skipped backgrounds: {len(summary['skipped_backgrounds'])}, mean sparsity {summary['mean_sparsity']:.4f})")


def cmd_sweep(args, cfg):
    if not args.values:
        raise ConfigError("--values must list at least one value")
    grid, records = sweep_factor(cfg, args.factor, args.values, background=_background(args, cfg),
                                 index=args.index, measure=not args.no_measure)
    out = Path(cfg.output_dir)
    save_image(out / "montage.png", grid)
    _write_json(out / "sweep.json", [r.to_dict() for r in records])
    for r in records:
        extra = r.extra
        line = f"{args.factor}={extra['swept']['value']:g}: sparsity {r.sparsity:.4f}"
        if "measured_theta_deg" in extra:
            line += f", measured theta {extra['measured_theta_deg']:g} deg, width {extra['measured_width_px']:.3f} px"
        print(line)


def cmd_recover(args, cfg):
    free = _free(args.free)
    gen = Generator.from_config(cfg)
    k = cfg.kernel
    if k.per_atom_theta:
        raise ConfigError("recovery supports scalar theta only")
    target = np.asarray(_load_array(args.target), dtype=np.float64)
    if target.ndim != 3 or target.shape[2] != 3:
        raise ConfigError(f"target must be (H, W, 3), got {target.shape}")
    fixed = sample_factors(cfg.factors, k.M, k.K, master_seed=cfg.seed, stream_id=args.index)
    unknown = set(args.init) - {"theta", "s_l", "s_w", "tau"}
    if unknown:
        raise ConfigError(f"--init accepts theta, s_l, s_w, tau; got {sorted(unknown)}")
    init = fixed.replace(**args.init)
    problem = RecoveryProblem(target, gen.context, gen.noise(target.shape, cfg.seed, args.index), free=free,
                              lam=args.lam, step=args.step, max_iter=args.max_iter)
    best, trace = fit_factors(problem, init)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.csv").write_text(trace_to_csv(trace))
    result = {"status": trace.status, "iterations": len(trace.losses), "best_loss": trace.best_losses[-1] if trace.best_losses else None,
              "theta_deg": float(best.theta), "s_l": best.s_l, "s_w": best.s_w, "tau": best.tau}
    _write_json(out / "recovery.json", result)
    print(f"{trace.status} after {result['iterations']} iterations: theta {best.theta:.3f} deg, "
          f"s_l {best.s_l:.4f}, s_w {best.s_w:.4f}, tau {best.tau:.4f}")


def cmd_gradcheck(args, cfg):
    free = _free(args.free)
    gen = Generator.from_config(cfg)
    if cfg.kernel.per_atom_theta:
        raise ConfigError("gradient check supports scalar theta only")
    reports = []
    for i in range(args.samples):
        problem, _ = synthetic_problem(cfg, gen, i, args.size, free=free, lam=args.lam)
        # one random perturbation of the generating point, where the data term is not flat
        report = grad_check(problem, 1, h=args.h, tolerance=args.tol, margin=args.margin, seed=i,
                            alpha_entries=args.alpha_entries or None)
        reports.append(report)
        print(f"problem {i}: {report.summary()}")
    pooled = GradCheckReport.combine(reports)
    print(f"overall {pooled.summary()}")
    if not pooled.passed:
        raise ConfigError("gradient check failed")


def cmd_tvscan(args, cfg):
    if args.step <= 0 or args.theta_max < args.theta_min:
        raise ConfigError("need step > 0 and theta-max >= theta-min")
    layer = np.asarray(_load_array(args.input), dtype=np.float64)
    grid = np.arange(args.theta_min, args.theta_max + args.step / 2, args.step)
    best, losses = orientation_scan(layer, grid)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tvscan.csv").write_text(scan_to_csv(grid, losses))
    print(f"best theta {best:g} deg")


COMMANDS = {
    "render": cmd_render,
    "dataset": cmd_dataset,
    "sweep": cmd_sweep,
    "recover": cmd_recover,
    "gradcheck": cmd_gradcheck,
    "tvscan": cmd_tvscan,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
