"""Command-line pipeline: generate -> split -> train -> multitask -> eval -> report.

Every subcommand reads inputs, writes outputs to files, and logs progress
to stderr only.  Exit codes: 0 success, 1 usage/config error, 2 data or
integrity error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import os
import sys

DEFAULT_TEST_REGIONS = "USA,CHN,GBR,MWI"
DEFAULT_PAD = 20
WINDOW_CHOICES = (16, 22, 28)
_HEAD_FOR_TARGET = {"delta_urban": "urban", "delta_population": "pop"}
_BLAS_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract here is exit 1
    def error(self, message):
        raise _UsageError(message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _regions_list(text: str) -> list[str]:
    names = [part.strip() for part in text.split(",") if part.strip()]
    if not names:
        raise _UsageError("--test-regions needs at least one region name")
    return names


# ---------------------------------------------------------------------------
# shared pipeline pieces

def _load_split_normalize(grid_path, test_regions: str, pad: int):
    """Padded grid, split, and train-fitted normalized inputs."""
    from .grid import assign_split, load_grid, normalize_channels, pad_grid
    from .synth import INPUT_CHANNELS

    world = load_grid(grid_path)
    padded = pad_grid(world, pad)
    split = assign_split(padded, _regions_list(test_regions))
    norm, stats = normalize_channels(
        padded, fit_mask=split.train_mask, channels=INPUT_CHANNELS
    )
    return world, norm, split, stats


def _with_epoch_default(cfg, train_stream):
    """Default one full pass over the base tiles per epoch."""
    import dataclasses

    from .trainer import epoch_size

    if cfg.samples_per_epoch is not None:
        return cfg
    return dataclasses.replace(cfg, samples_per_epoch=epoch_size(train_stream))


def _resolve_train_config(args):
    from .trainer import TrainConfig, config_from_pairs, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = [
        (key, str(val))
        for key, val in (
            ("batch_size", args.batch_size),
            ("learning_rate", args.learning_rate),
            ("optimizer", args.optimizer),
            ("momentum", args.momentum),
            ("max_epochs", args.max_epochs),
            ("patience", args.patience),
            ("min_delta", args.min_delta),
            ("seed", args.seed),
            ("shuffle", args.shuffle),
            ("samples_per_epoch", args.samples_per_epoch),
        )
        if val is not None
    ]
    return config_from_pairs(overrides, base=cfg)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--print-config", action="store_true",
                   help="print the effective training config and exit")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--momentum", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--min-delta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--shuffle", choices=("true", "false"))
    p.add_argument("--samples-per-epoch", type=int)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid", required=True, help="input WGRD world file")
    p.add_argument("--test-regions", default=DEFAULT_TEST_REGIONS,
                   help=f"comma-separated held-out regions (default {DEFAULT_TEST_REGIONS})")
    p.add_argument("--pad", type=int, default=DEFAULT_PAD,
                   help=f"zero-padding border in pixels (default {DEFAULT_PAD})")
    p.add_argument("--window", type=int, choices=WINDOW_CHOICES, default=28,
                   help="square tile size in pixels")


# ---------------------------------------------------------------------------
# subcommands

def _cmd_synth(args) -> int:
    from .grid import save_grid
    from .synth import SynthConfig, gen_world

    cfg = SynthConfig(
        seed=args.seed, height=args.height, width=args.width,
        land_fraction=args.land_fraction, n_regions=args.regions,
        noise_std=args.noise_std,
    )
    world = gen_world(cfg)
    save_grid(world, args.out)
    _log(f"wrote {args.out}: {world.height}x{world.width}, "
         f"{int(world.mask.sum())} land px, {len(world.region_table)} regions")
    return 0


def _cmd_split(args) -> int:
    from .grid import assign_split, load_grid

    grid = load_grid(args.grid)
    split = assign_split(grid, _regions_list(args.test_regions))
    n_land = int(grid.mask.sum())
    n_train = int(split.train_mask.sum())
    n_test = int(split.test_mask.sum())
    print(f"land={n_land} train={n_train} test={n_test}")
    return 0


def _cmd_train(args) -> int:
    from pathlib import Path

    cfg = _resolve_train_config(args)
    if args.print_config:
        from .trainer import format_config

        sys.stdout.write(format_config(cfg))
        return 0

    from .synth import INPUT_CHANNELS
    from .tiler import WindowSpec
    from .trainer import build_streams, save_config, save_history, train
    from .unet import UNetSpec, init_params, save_params

    head = _HEAD_FOR_TARGET[args.target]
    _, norm, split, _ = _load_split_normalize(args.grid, args.test_regions, args.pad)
    tr, va, val_regions = build_streams(
        norm, WindowSpec(args.window), pad=args.pad, input_names=INPUT_CHANNELS,
        target_names=(args.target,), split=split, seed=cfg.seed,
    )
    cfg = _with_epoch_default(cfg, tr)
    _log(f"streams: {len(tr)} train (augmented), {len(va)} val, "
         f"val regions {sorted(val_regions)}")

    spec = UNetSpec(input_channels=len(INPUT_CHANNELS),
                    base_features=args.base_features, depth=args.depth,
                    heads=((head, 1),))
    params = init_params(spec, seed=cfg.seed)
    model, hist = train(params, tr, va, cfg)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{head}_sz{args.window}"
    save_params(model, out / f"unet_{tag}.unpk")
    save_history(hist, out / f"history_{tag}.csv")
    save_config(cfg, out / f"config_{tag}.cfg")
    _log(f"best epoch {hist.best_epoch}: val loss {hist.best_val_loss:.6e}")
    _log(f"wrote {out / f'unet_{tag}.unpk'}")
    return 0


def _cmd_multitask(args) -> int:
    import dataclasses
    from pathlib import Path

    from .synth import INPUT_CHANNELS, TARGET_POP, TARGET_URBAN
    from .tiler import WindowSpec
    from .trainer import (MultiTaskSchedule, TrainConfig, build_multitask,
                          build_streams, load_config, save_history,
                          train_multitask)
    from .unet import load_params, save_params

    pre = load_params(args.checkpoint)
    multi = build_multitask(pre, head="pop", seed=args.seed or 0)

    _, norm, split, _ = _load_split_normalize(args.grid, args.test_regions, args.pad)
    tr, va, val_regions = build_streams(
        norm, WindowSpec(args.window), pad=args.pad, input_names=INPUT_CHANNELS,
        target_names=(TARGET_URBAN, TARGET_POP), split=split,
        seed=args.seed or 0,
    )
    phase1 = load_config(args.phase1_config) if args.phase1_config else TrainConfig()
    phase2 = (load_config(args.phase2_config) if args.phase2_config
              else TrainConfig(learning_rate=1e-4))
    if args.seed is not None:
        phase1 = dataclasses.replace(phase1, seed=args.seed)
        phase2 = dataclasses.replace(phase2, seed=args.seed)
    schedule = MultiTaskSchedule(phase1=_with_epoch_default(phase1, tr),
                                 phase2=_with_epoch_default(phase2, tr))
    _log(f"streams: {len(tr)} train (augmented), {len(va)} val, "
         f"val regions {sorted(val_regions)}")

    model, hist = train_multitask(multi, tr, va, schedule)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"sz{args.window}"
    save_params(model, out / f"multitask_{tag}.unpk")
    save_history(hist, out / f"history_multitask_{tag}.csv")
    _log(f"best epoch {hist.best_epoch}: val loss {hist.best_val_loss:.6e}")
    _log(f"wrote {out / f'multitask_{tag}.unpk'}")
    return 0


def _cmd_eval(args) -> int:
    import numpy as np

    from .evaluate import (EvalReport, load_report, multitask_label,
                           predict_world, residual_metrics, save_report,
                           stratify, unet_label)
    from .grid import WorldGrid, save_grid
    from .synth import INPUT_CHANNELS, TARGET_POP, TARGET_URBAN
    from .tiler import WindowSpec
    from .unet import load_params

    params = load_params(args.checkpoint)
    world, norm, split, _ = _load_split_normalize(args.grid, args.test_regions,
                                                  args.pad)
    pred = predict_world(
        params, norm, WindowSpec(args.window), pad=args.pad,
        input_names=INPUT_CHANNELS, split=split, split_filter=args.split,
    )

    pad = args.pad
    scope_mask = {
        "train": split.train_mask, "test": split.test_mask,
        "all": np.asarray(norm.mask),
    }[args.split][pad:-pad, pad:-pad].astype(bool)
    builtup = world.channels["urban_2000"] + world.channels[TARGET_URBAN]
    strata = stratify(world.mask, builtup, select=scope_mask)

    multi = len(params.spec.heads) > 1
    label = multitask_label(args.window) if multi else unet_label(args.window)
    targets = {"urban": (TARGET_URBAN, label)}
    if multi:
        targets["pop"] = (TARGET_POP, f"{label} on {TARGET_POP}")

    report = load_report(args.report) if os.path.exists(args.report) else EvalReport()
    for head, (target, model_label) in targets.items():
        for stratum_name, stratum_mask in strata.items():
            row = residual_metrics(
                pred.planes[head], world.channels[target], stratum_mask,
                scope=args.split, stratum=stratum_name,
                model=model_label, window=args.window,
            )
            report.add(row)
            _log(f"{model_label} [{stratum_name}] n={row.n_cells} "
                 f"mean|e|={row.mean_abs} r2={row.r2}")
    save_report(report, args.report)
    _log(f"wrote {args.report}")

    if args.pred_out:
        planes = {f"pred_{h}": p for h, p in pred.planes.items()}
        planes["coverage"] = pred.count.astype(np.float64)
        save_grid(
            WorldGrid(mask=world.mask, regions=world.regions, channels=planes,
                      region_table=world.region_table),
            args.pred_out,
        )
        _log(f"wrote {args.pred_out}")
    return 0


def _cmd_report(args) -> int:
    from .evaluate import EvalReport, export_report, export_scatter, load_report

    merged = EvalReport()
    for path in args.inputs:
        for row in load_report(path).rows:
            merged.add(row)
    export_report(merged, args.out)
    _log(f"wrote {args.out} ({len(merged.rows)} model rows + baseline)")

    if args.scatter:
        if not (args.pred and args.grid):
            raise _UsageError("--scatter needs --pred and --grid")
        import numpy as np

        from .grid import load_grid

        pred_grid = load_grid(args.pred)
        world = load_grid(args.grid)
        name = f"pred_{_HEAD_FOR_TARGET[args.target]}"
        covered = (np.asarray(world.mask) == 1) & (pred_grid.channels["coverage"] > 0)
        export_scatter(
            pred_grid.channels[name], world.channels[args.target], covered,
            args.scatter_csv or str(args.scatter) + ".csv",
            svg_path=args.scatter, target_name=args.target,
        )
        _log(f"wrote {args.scatter}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .errors import NumericError
    from .unet import UNetSpec, grad_check

    spec = UNetSpec(input_channels=args.channels, base_features=args.base_features,
                    depth=args.depth)
    worst = 0.0
    for seed in range(args.seed, args.seed + args.seeds):
        report = grad_check(spec, seed=seed, tolerance=args.tolerance,
                            tile_size=args.tile_size)
        worst = max(worst, report.max_rel_err)
        _log(f"seed {seed}: max rel err {report.max_rel_err:.3e} "
             f"({report.n_checked} coords, worst {report.worst_param})")
    if worst >= args.tolerance:
        raise NumericError(
            f"gradient check failed: {worst:.3e} >= {args.tolerance:.1e}")
    _log(f"gradients ok: worst {worst:.3e} < {args.tolerance:.1e}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="urbanet",
                     description="Masked U-Net pipeline for decadal "
                                 "urban-change prediction on gridded worlds.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads (1 = bit-reproducible)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--land-fraction", type=float, default=0.7)
    p.add_argument("--regions", type=int, default=9)
    p.add_argument("--noise-std", type=float, default=0.01)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("split", help="show train/test pixel counts")
    p.add_argument("--grid", required=True)
    p.add_argument("--test-regions", default=DEFAULT_TEST_REGIONS)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train a single-task model")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--target", choices=tuple(_HEAD_FOR_TARGET),
                   default="delta_urban")
    p.add_argument("--base-features", type=int, default=8)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("multitask",
                       help="two-phase joint training from a pretrained model")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True,
                   help="pretrained single-task UNPK file")
    p.add_argument("--phase1-config", help="frozen-phase training config file")
    p.add_argument("--phase2-config", help="fine-tuning config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=_cmd_multitask)

    p = sub.add_parser("eval", help="predict a split and append metrics rows")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--report", required=True, help="metrics CSV to append to")
    p.add_argument("--pred-out", help="optional WGRD file of predicted planes")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="merge metrics CSVs into the final report")
    p.add_argument("inputs", nargs="+", help="metrics CSVs from eval runs")
    p.add_argument("--out", required=True)
    p.add_argument("--scatter", help="write an observed-vs-predicted SVG here")
    p.add_argument("--scatter-csv", help="pair CSV path (default: <svg>.csv)")
    p.add_argument("--pred", help="WGRD of predicted planes from eval --pred-out")
    p.add_argument("--grid", help="world WGRD with observed targets")
    p.add_argument("--target", choices=tuple(_HEAD_FOR_TARGET),
                   default="delta_urban")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--base-features", type=int, default=4)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--tile-size", type=int, default=8)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        _log(f"error: {err}")
        parser.print_usage(sys.stderr)
        return 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1

    if args.threads is not None:
        if args.threads < 1:
            _log("error: --threads must be >= 1")
            return 1
        # must land in the environment before numpy first loads
        for var in _BLAS_VARS:
            os.environ[var] = str(args.threads)

    from .errors import (ConfigError, DivergenceError, NumericError,
                         SpecError, UrbanetError)

    try:
        return args.func(args)
    except _UsageError as err:
        _log(f"error: {err}")
        return 1
    except (ConfigError, SpecError) as err:
        _log(f"error: {err}")
        return 1
    except (NumericError, DivergenceError) as err:
        _log(f"error: {err}")
        return 3
    except UrbanetError as err:  # format, integrity, shape, data
        _log(f"error: {err}")
        return 2
    except OSError as err:
        _log(f"error: {err}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
