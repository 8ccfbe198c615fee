"""``empp`` command line: gen-data, train, check, predict.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 data error,
4 masked atom without neighbours.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, describe_defaults, load_config
from .data import GeometryError, ParseError, gen_synthetic, load_any, save_dataset, split, write_xyz

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_ISOLATED = 0, 1, 2, 3, 4

log = logging.getLogger("empp")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="empp", description="Equivariant masked position prediction on small molecules.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--template", default="tetrahedral", choices=["tetrahedral", "planar_hex", "chain"])
    g.add_argument("--count", type=int, default=2000)
    g.add_argument("--jitter", type=float, default=0.05, help="per-coordinate std (angstrom)")
    g.add_argument("--split", type=float, nargs=3, default=(0.8, 0.1, 0.1), metavar=("TRAIN", "VAL", "TEST"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="dataset cache, or .xyz for plain coordinates")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="dataset cache or XYZ file")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", default="self_supervised", choices=["self_supervised", "auxiliary"])
    t.add_argument("--time-budget", type=float, help="stop after this many seconds")

    c = sub.add_parser("check", help="run the invariant suite")
    c.add_argument("--checkpoint")
    c.add_argument("--config", help="grid settings for the equivariance check")
    c.add_argument("--out", help="also write the JSON-lines report here")
    c.add_argument("--fault-inject", choices=["cg"], help="corrupt a component to exercise failure reporting")
    c.add_argument("--full-gradients", action="store_true", help="probe every parameter component")

    r = sub.add_parser("predict", help="predict a masked atom's position")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True, help="XYZ file (first molecule is used)")
    r.add_argument("--mask-index", type=int, required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--no-plots", action="store_true")

    sub.add_parser("defaults", help="print the configuration keys and defaults")
    return p


def cmd_gen_data(args) -> int:
    try:
        ds = split(gen_synthetic(args.template, args.count, args.jitter, seed=args.seed), args.split, seed=args.seed)
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".xyz":
        write_xyz(out, ds.molecules)
    else:
        save_dataset(out, ds)
    print(f"wrote {len(ds)} molecules to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import read_report, save_checkpoint, train

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
    except (ConfigError, OSError) as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    try:
        data = load_any(args.data)
        if not len(data):
            raise ValueError("dataset is empty")
    except (ParseError, GeometryError, CheckpointError, ValueError, OSError) as exc:
        log.error("data: %s", exc)
        return EXIT_DATA
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = out / "report.jsonl"
    report.write_text("")
    try:
        result = train(cfg, data, args.mode, report_path=report, time_budget=args.time_budget)
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    except ValueError as exc:
        log.error("data: %s", exc)
        return EXIT_DATA
    save_checkpoint(out / "model.ckpt", result.model, cfg)
    (out / "config.txt").write_text(cfg.to_text())
    history = read_report(report)
    if history:
        from .plotting import loss_curve

        loss_curve(out / "loss_curve.png", history)
    print(f"trained {result.steps} steps; checkpoint {out / 'model.ckpt'}; config hash {cfg.hash}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_checks
    from .sphere import make_grid
    from .train import grid_from_config, load_checkpoint

    model = grid = None
    try:
        if args.checkpoint:
            model, cfg = load_checkpoint(args.checkpoint)
            grid = grid_from_config(cfg)
        if args.config:
            cfg = load_config(args.config)
            grid = make_grid(cfg["grid.n_theta"], cfg["grid.n_phi"], cfg["grid.kind"], lmax=cfg["head.lmax"])
    except (ConfigError, CheckpointError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    failed = []
    lines = []
    for res in run_checks(model, grid, fault=args.fault_inject, quick_gradients=not args.full_gradients):
        line = res.to_json()
        print(line, flush=True)
        lines.append(line)
        if not res.passed:
            failed.append(res.check)
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_predict(args) -> int:
    from .position import MaskingError, mask_molecule, predict, predicted_position, write_radius_csv
    from .sphere import write_grid_csv
    from .train import grid_from_config, load_checkpoint

    try:
        model, cfg = load_checkpoint(args.checkpoint)
    except (CheckpointError, ConfigError, OSError) as exc:
        log.error("checkpoint: %s", exc)
        return EXIT_CONFIG
    try:
        mols = load_any(args.data).molecules
        if not mols:
            raise ValueError("no molecule in input")
    except (ParseError, GeometryError, CheckpointError, ValueError, OSError) as exc:
        log.error("data: %s", exc)
        return EXIT_DATA
    mol = mols[0]
    try:
        masked = mask_molecule(mol, args.mask_index, model.cfg.cutoff)
    except IndexError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except MaskingError as exc:
        log.error("%s", exc)
        return EXIT_ISOLATED
    grid = grid_from_config(cfg)
    pred = predict(model, masked, grid, cfg["head.tau"])[0]
    est, each = predicted_position(pred.radius, pred.direction, pred.neighbor_positions, grid, model.cfg.bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, nb in enumerate(masked.neighbors):
        write_radius_csv(out / f"radius_{k}.csv", pred.radius[k], model.cfg.bins)
        write_grid_csv(out / f"direction_{k}.csv", grid, pred.direction[k], header="probability")
    offsets = masked.offsets()
    if not args.no_plots:
        from .plotting import direction_map, radius_histogram

        radius_histogram(out / "radius.png", model.cfg.bins.centers, pred.radius, np.linalg.norm(offsets, axis=1))
        direction_map(out / "direction_0.png", grid, pred.direction[0], offsets[0])
    print(cfg.to_text(), end="")
    print("neighbour,atom,x,y,z")
    for k, nb in enumerate(masked.neighbors):
        print(f"{k},{nb},{each[k, 0]:.6f},{each[k, 1]:.6f},{each[k, 2]:.6f}")
    spread = float(np.sqrt(np.mean(np.sum((each - est) ** 2, axis=1))))
    print(f"estimate,{est[0]:.6f},{est[1]:.6f},{est[2]:.6f}")
    print(f"spread_rms,{spread:.6f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "defaults":
        print(describe_defaults())
        return EXIT_OK
    handler = {"gen-data": cmd_gen_data, "train": cmd_train, "check": cmd_check, "predict": cmd_predict}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
