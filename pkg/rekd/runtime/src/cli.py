"""rekd command line.

Machine-readable results go to the files named by --out; logs go to stderr.
Every command that writes an output also writes `<out>.config` with the fully
resolved settings. Exit codes: 0 success, 1 failed self-check, 2 usage error,
3 missing or unreadable input, 4 checkpoint mismatch, 5 non-finite numbers,
6 output that cannot be written.
"""
import argparse
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from pydantic import ValidationError
from src.checkpoint import load_checkpoint
from src.config import RekdConfig, SynthConfig, runtime_settings
from src.datagen import PairDataset, make_dataset
from src.errors import MissingFileError, RekdError
from src.evalkit import (
    SWEEP_NOISE_SIGMA,
    evaluate_matching,
    evaluate_orientation,
    evaluate_orientation_filter,
    evaluate_repeatability,
    load_pairs,
    rotation_sweep,
    write_rmse_csv,
    write_sweep_csv,
    write_table,
)
from src.imageio import load_gray
from src.inference import detect, write_keypoints
from src.matching import match_keypoints, write_matches
from src.model import RekdModel
from src.monitoring import logger
from src.selfcheck import equivariance_report, gradient_report
from src.training import fit
from src.version import __version__


def positive_int(value: str) -> int:
    number = int(value)
    if number <= 0:
        raise argparse.ArgumentTypeError(f"{value} is not a positive integer")
    return number


def non_negative_int(value: str) -> int:
    number = int(value)
    if number < 0:
        raise argparse.ArgumentTypeError(f"{value} is negative")
    return number


def non_negative_float(value: str) -> float:
    number = float(value)
    if not number >= 0:
        raise argparse.ArgumentTypeError(f"{value} is not a non-negative number")
    return number


def unit_interval(value: str) -> float:
    number = float(value)
    if not 0.0 <= number <= 1.0:
        raise argparse.ArgumentTypeError(f"{value} is not in [0, 1]")
    return number


def int_list(value: str) -> List[int]:
    try:
        return [positive_int(v) for v in value.split(",") if v]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _require(*paths: Optional[str]):
    for path in paths:
        if path is not None and not Path(path).exists():
            raise MissingFileError(f"{path} does not exist")


def write_config_echo(out: str, args: argparse.Namespace, *configs):
    """Resolved settings next to an output: `<out>.config`."""
    lines = [f"command={args.command}\n"]
    lines += [
        f"arg.{k}={v}\n"
        for k, v in sorted(vars(args).items())
        if k not in ("command", "handler")
    ]
    for config in configs:
        lines.append(config.to_text())
    lines.append(runtime_settings_text())
    Path(f"{out}.config").write_text("".join(lines))


def runtime_settings_text() -> str:
    return "".join(
        f"runtime.{k}={v}\n" for k, v in runtime_settings.model_dump().items()
    )


def _load_model(args: argparse.Namespace) -> RekdModel:
    """Checkpoint model; --group/--channels must agree with what is stored."""
    model = load_checkpoint(args.ckpt)
    overrides: Dict[str, int] = {}
    if getattr(args, "group", None) is not None:
        overrides["group_order"] = args.group
    if getattr(args, "channels", None) is not None:
        overrides["channels"] = args.channels
    if overrides:
        config = RekdConfig(**{**model.config.model_dump(), **overrides})
        model = load_checkpoint(args.ckpt, config)
    return model


def cmd_synth(args: argparse.Namespace) -> int:
    config = SynthConfig(image_size=args.size)
    manifest = make_dataset(args.pairs, args.size, args.seed, args.out, config)
    write_config_echo(args.out, args, config)
    logger.info("synth done", extra={"pairs": len(manifest)})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    _require(args.data)
    config = RekdConfig(
        group_order=args.group,
        channels=args.channels,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch,
        beta=args.beta,
        seed=args.seed,
    )
    train = PairDataset(args.data, "train")
    val = PairDataset(args.data, "val")
    write_config_echo(args.out, args, config)
    model = RekdModel.initialize(config)
    result = fit(model, train, val, args.out, args.log)
    logger.info(
        "train done",
        extra={"best_epoch": result.best_epoch, "best_repeatability": result.best_repeatability},
    )
    return 0


def cmd_detect(args: argparse.Namespace) -> int:
    _require(args.ckpt, args.image)
    model = _load_model(args)
    img = load_gray(args.image)
    keypoints = detect(model, img, args.num_kpts)
    write_keypoints(args.out, keypoints, img.shape[1], img.shape[0])
    write_config_echo(args.out, args, model.config)
    logger.info("detect done", extra={"keypoints": len(keypoints)})
    return 0


def cmd_match(args: argparse.Namespace) -> int:
    _require(args.ckpt, args.image_a, args.image_b)
    model = _load_model(args)
    img_a, img_b = load_gray(args.image_a), load_gray(args.image_b)
    kps_a = detect(model, img_a, args.num_kpts)
    kps_b = detect(model, img_b, args.num_kpts)
    matches = match_keypoints(img_a, kps_a, img_b, kps_b, args.filter_orientation, args.t)
    write_matches(args.out, matches)
    write_config_echo(args.out, args, model.config)
    logger.info(
        "match done", extra={"matches": len(matches), "inliers": matches.inlier_count}
    )
    return 0


def _eval(runner: Callable[[RekdModel, list, argparse.Namespace], list]):
    def handler(args: argparse.Namespace) -> int:
        _require(args.ckpt, args.data)
        model = _load_model(args)
        pairs = load_pairs(args.data, args.split)
        rows = runner(model, pairs, args)
        write_table(args.out, rows)
        write_config_echo(args.out, args, model.config)
        logger.info(f"{args.command} done", extra={"pairs": len(rows)})
        return 0

    return handler


def cmd_sweep(args: argparse.Namespace) -> int:
    _require(args.ckpt, args.images)
    model = _load_model(args)
    paths = sorted(Path(args.images).glob("*.pgm"))
    if not paths:
        raise MissingFileError(f"no .pgm images in {args.images}")
    images = [load_gray(p, model.config.dtype) for p in paths]
    angles = range(0, 360, args.step)
    rows = rotation_sweep(model, images, angles, args.noise_sigma, args.num_kpts, args.seed)
    write_sweep_csv(args.out, rows)
    if args.rmse_out:
        write_rmse_csv(args.rmse_out, images, angles)
    write_config_echo(args.out, args, model.config)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = gradient_report(args.seed, args.probes)
    for name, error in report.errors.items():
        logger.info("gradient", extra={"op": name, "relative_error": error})
    if args.out:
        Path(args.out).write_text(
            "".join(f"{k},{v:.3e}\n" for k, v in report.errors.items())
        )
        write_config_echo(args.out, args)
    return 0 if report.passed else 1


def cmd_equiv_check(args: argparse.Namespace) -> int:
    report = equivariance_report(args.orders, args.trials, args.size, args.seed)
    if args.out:
        Path(args.out).write_text(
            "".join(f"{k},{v:.3e}\n" for k, v in sorted(report.errors.items()))
        )
        write_config_echo(args.out, args)
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--deterministic", action="store_true", help="Single-threaded, reproducible numerics"
    )
    common.add_argument("--seed", type=non_negative_int, default=0, help="Random seed")

    checkpoint = argparse.ArgumentParser(add_help=False)
    checkpoint.add_argument("--ckpt", required=True, help="Checkpoint file")
    checkpoint.add_argument("--group", type=positive_int, help="Expected group order")
    checkpoint.add_argument("--channels", type=positive_int, help="Expected channels per group element")

    parser = argparse.ArgumentParser(
        prog="rekd", description="Rotation-equivariant oriented keypoint detection"
    )
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("synth", parents=[common], help="Write synthetic rotation pairs")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--pairs", type=positive_int, required=True, help="Number of pairs")
    p.add_argument("--size", type=positive_int, default=192, help="Image side in pixels")
    p.set_defaults(handler=cmd_synth)

    p = commands.add_parser("train", parents=[common], help="Train a detector")
    p.add_argument("--data", required=True, help="Dataset directory written by synth")
    p.add_argument("--out", required=True, help="Checkpoint to write")
    p.add_argument("--group", type=positive_int, default=36, help="Order of the rotation group")
    p.add_argument("--channels", type=positive_int, default=2, help="Channels per group element")
    p.add_argument("--epochs", type=positive_int, default=20)
    p.add_argument("--lr", type=float, default=0.001, help="Learning rate")
    p.add_argument("--batch", type=positive_int, default=16, help="Batch size")
    p.add_argument("--beta", type=non_negative_float, default=100.0, help="Orientation loss weight")
    p.add_argument("--log", help="Per-epoch CSV log (default: <out>.log.csv)")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("detect", parents=[common, checkpoint], help="Detect keypoints")
    p.add_argument("--image", required=True, help="8-bit PGM image")
    p.add_argument("--num-kpts", type=non_negative_int, default=1000)
    p.add_argument("--out", required=True, help="Keypoint file to write")
    p.set_defaults(handler=cmd_detect)

    p = commands.add_parser("match", parents=[common, checkpoint], help="Match two images")
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.add_argument("--num-kpts", type=non_negative_int, default=1000)
    p.add_argument("--out", required=True, help="Match file to write")
    p.add_argument("--filter-orientation", action="store_true", help="Flag orientation outliers")
    p.add_argument("--t", type=non_negative_float, default=30.0, help="Outlier threshold in degrees")
    p.set_defaults(handler=cmd_match)

    evaluations = {
        "eval-rep": (
            "Repeatability per pair",
            lambda model, pairs, args: evaluate_repeatability(model, pairs, args.num_kpts),
        ),
        "eval-mma": (
            "Mean matching accuracy per pair",
            lambda model, pairs, args: evaluate_matching(
                model, pairs, args.num_kpts, not args.no_filter, args.t
            ),
        ),
        "eval-ori": (
            "Orientation accuracy per pair",
            lambda model, pairs, args: evaluate_orientation(model, pairs, args.thresh),
        ),
        "eval-filter": (
            "Match precision with and without the orientation filter",
            lambda model, pairs, args: evaluate_orientation_filter(
                model, pairs, args.num_kpts, args.fraction, args.t, seed=args.seed
            ),
        ),
    }
    for name, (help_text, runner) in evaluations.items():
        p = commands.add_parser(name, parents=[common, checkpoint], help=help_text)
        p.add_argument("--data", required=True, help="Pair folder or HPatches-style folder")
        p.add_argument("--split", choices=["train", "val"], help="Manifest split to use")
        p.add_argument("--num-kpts", type=non_negative_int, default=300)
        p.add_argument("--out", required=True, help="CSV to write")
        if name == "eval-mma":
            p.add_argument("--no-filter", action="store_true", help="Skip orientation filtering")
            p.add_argument("--t", type=non_negative_float, default=30.0)
        if name == "eval-ori":
            p.add_argument("--thresh", type=non_negative_float, default=15.0)
        if name == "eval-filter":
            p.add_argument(
                "--fraction",
                type=unit_interval,
                default=0.2,
                help="Share of image-b keypoints given random orientations",
            )
            p.add_argument("--t", type=non_negative_float, default=30.0)
        p.set_defaults(handler=_eval(runner))

    p = commands.add_parser("sweep", parents=[common, checkpoint], help="Synthetic rotation sweep")
    p.add_argument("--images", required=True, help="Directory of PGM images")
    p.add_argument("--noise-sigma", type=non_negative_float, default=SWEEP_NOISE_SIGMA)
    p.add_argument("--num-kpts", type=non_negative_int, default=300)
    p.add_argument("--step", type=positive_int, default=1, help="Angle step in degrees")
    p.add_argument("--out", required=True, help="CSV to write")
    p.add_argument("--rmse-out", help="Also write interpolation RMSE per angle")
    p.set_defaults(handler=cmd_sweep)

    p = commands.add_parser("gradcheck", parents=[common], help="Check analytic gradients")
    p.add_argument("--probes", type=positive_int, default=5)
    p.add_argument("--out", help="Optional report file")
    p.set_defaults(handler=cmd_gradcheck)

    p = commands.add_parser("equiv-check", parents=[common], help="Check quarter-turn equivariance")
    p.add_argument("--orders", type=int_list, default=[4, 8, 36], help="Comma-separated group orders")
    p.add_argument("--trials", type=positive_int, default=20)
    p.add_argument("--size", type=positive_int, default=32)
    p.add_argument("--out", help="Optional report file")
    p.set_defaults(handler=cmd_equiv_check)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and return its exit code."""
    args = build_parser().parse_args(argv)
    if args.deterministic:
        runtime_settings.deterministic = True
    logger.info("command started", extra={"command": args.command})
    try:
        return args.handler(args)
    except RekdError as e:
        logger.error(str(e), extra={"code": e.code, "command": args.command})
        return e.exit_code
    except ValidationError as e:
        logger.error("invalid settings", extra={"errors": e.errors(), "command": args.command})
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
