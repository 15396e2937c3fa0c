"""Command line interface for the package."""

import argparse
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

from rich.table import Table

from slicecollab import __version__
from slicecollab.core.fusion import FusedLabels, FusionMode, fuse_mode
from slicecollab.core.metrics import MetricsReport, compare_reports, evaluate_cases
from slicecollab.core.nets import load_checkpoint, save_checkpoint
from slicecollab.core.phantom import generate_phantom_dataset
from slicecollab.core.registration import propagate_labels, train_registration
from slicecollab.core.semi import train_semi
from slicecollab.core.target import (
    annotated_slices_case,
    full_volume_case,
    infer_volume,
    target_case_from_fused,
    train_target,
)
from slicecollab.core.volume import (
    MASK_SUFFIX,
    VOLUME_SUFFIX,
    load_volume,
    normalize,
    read_mask_spacing,
)
from slicecollab.errors import SliceCollabError, StageError
from slicecollab.pipeline.artifacts import (
    LABELS_DIR,
    load_mask_dir,
    save_mask_dir,
    write_csv,
    write_dataset,
)
from slicecollab.pipeline.config import ExperimentConfig, ExperimentMode, load_config
from slicecollab.pipeline.runner import load_cases, run_pipeline, run_stage, run_sweep
from slicecollab.pipeline.splits import annotated_slice_indices

# Import utility functions
from slicecollab.utils.helpers import (
    EpochProgress,
    comparisons_table,
    console,
    display_summary,
    metrics_table,
    print_error,
    print_info,
    print_success,
    print_warning,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_STAGE_FAILED = 2


class RichLogHandler(logging.Handler):
    """Custom log handler that uses Rich for formatting."""

    def emit(self, record):
        level_styles = {
            logging.DEBUG: "[cyan]DEBUG:[/cyan]",
            logging.INFO: "[green]INFO:[/green]",
            logging.WARNING: "[yellow]WARNING:[/yellow]",
            logging.ERROR: "[red]ERROR:[/red]",
            logging.CRITICAL: "[bold red]CRITICAL:[/bold red]",
        }

        level_prefix = level_styles.get(
            record.levelno, f"[bold]LEVEL {record.levelno}:[/bold]"
        )

        # Format the message based on the log level
        if record.levelno >= logging.ERROR:
            console.print(f"{level_prefix} {record.getMessage()}", style="red")
        elif record.levelno >= logging.WARNING:
            console.print(f"{level_prefix} {record.getMessage()}", style="yellow")
        elif record.levelno >= logging.INFO:
            console.print(f"{level_prefix} {record.getMessage()}")
        else:  # DEBUG level
            module_part = f"[dim]{record.name}[/dim]"
            console.print(f"{level_prefix} {module_part} {record.getMessage()}")


def configure_logging(verbosity: int) -> None:
    """
    Configure logging based on verbosity level.

    Args:
        verbosity: Verbosity level (0=ERROR, 1=WARNING, 2=INFO, 3+=DEBUG)
    """
    log_levels = {
        0: logging.ERROR,
        1: logging.WARNING,
        2: logging.INFO,
        3: logging.DEBUG,
    }

    # Cap at level 3
    verbosity = max(0, min(verbosity, 3))

    logging.basicConfig(
        level=log_levels[verbosity],
        format="%(message)s",
        handlers=[RichLogHandler()],
        force=True,
    )

    # Hold third-party libraries at WARNING unless in debug mode
    if verbosity < 3:
        for logger_name in list(logging.root.manager.loggerDict):
            if not logger_name.startswith("slicecollab"):
                logging.getLogger(logger_name).setLevel(logging.WARNING)


def _add_data_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--data",
        metavar="DIR",
        help="Dataset directory with images/ and labels/ (default: config data_dir, "
        "or generated phantoms)",
    )


def _add_epochs_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--epochs", type=int, help="Override the stage's number of training epochs"
    )


def setup_parser() -> argparse.ArgumentParser:
    """
    Set up the command line argument parser.

    Returns:
        Configured argument parser
    """
    parser = argparse.ArgumentParser(
        prog="slicecollab",
        description=(
            "Segment 3D MR volumes from one annotated central slice per volume "
            "using fused self-training and registration pseudo labels."
        ),
    )

    info_group = parser.add_argument_group("Information")
    basic_group = parser.add_argument_group("Basic Options")

    info_group.add_argument(
        "--version",
        action="version",
        version=f"slicecollab {__version__}",
        help="Show version information and exit.",
    )

    basic_group.add_argument(
        "--config", metavar="JSON", help="Experiment configuration file"
    )
    basic_group.add_argument("--seed", type=int, help="Override the config seed")
    basic_group.add_argument(
        "--out-dir", metavar="DIR", help="Override the config output directory"
    )
    basic_group.add_argument(
        "--verbose",
        "-v",
        action="count",
        default=0,
        help="Increase verbosity (can be used multiple times)",
    )
    basic_group.add_argument(
        "--quiet", "-q", action="store_true", help="Suppress non-error output."
    )

    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    p = commands.add_parser("phantom-gen", help="Generate a synthetic phantom dataset")
    p.add_argument("--count", type=int, help="Number of cases")
    p.add_argument("--shape", type=int, nargs=3, metavar=("N", "H", "W"))
    p.add_argument(
        "--translation",
        type=float,
        nargs=2,
        metavar=("DY", "DX"),
        help="Fixed per-slice object shift instead of a random drift",
    )
    p.add_argument("--out", metavar="DIR", help="Output dataset directory")

    p = commands.add_parser(
        "train-semi", help="Train the self-training network and write pseudo labels"
    )
    _add_data_argument(p)
    _add_epochs_argument(p)
    p.add_argument("--out", metavar="DIR", required=True)

    p = commands.add_parser("train-reg", help="Train the slice registration network")
    _add_data_argument(p)
    _add_epochs_argument(p)
    p.add_argument("--out", metavar="DIR", required=True)

    p = commands.add_parser(
        "propagate", help="Propagate central labels with a registration checkpoint"
    )
    _add_data_argument(p)
    p.add_argument(
        "--checkpoint",
        "--reg",
        dest="checkpoint",
        required=True,
        metavar="FILE",
        help="Registration network checkpoint (net.pt of 'train-reg')",
    )
    p.add_argument("--out", metavar="DIR", required=True)

    p = commands.add_parser("fuse", help="Fuse two pseudo-label sets")
    p.add_argument("--semi", required=True, metavar="DIR")
    p.add_argument("--ssl", required=True, metavar="DIR")
    p.add_argument(
        "--mode",
        choices=[m.value for m in FusionMode],
        default=FusionMode.CONSISTENCY.value,
    )
    p.add_argument("--out", metavar="DIR", required=True)

    p = commands.add_parser(
        "train-target", help="Train the target network on manual + fused labels"
    )
    _add_data_argument(p)
    _add_epochs_argument(p)
    p.add_argument(
        "--fused",
        required=True,
        metavar="DIR",
        help="Output of 'fuse' (consistent/ and inconsistent/ subdirectories)",
    )
    p.add_argument(
        "--no-uncertain",
        action="store_true",
        help="Ignore inconsistent labels (intersection / union fusion)",
    )
    p.add_argument("--out", metavar="DIR", required=True)

    p = commands.add_parser("train-baseline", help="Train a fully supervised baseline")
    _add_data_argument(p)
    _add_epochs_argument(p)
    p.add_argument("--kind", choices=["fs_lcs", "fs"], default="fs_lcs")
    p.add_argument(
        "--slices", type=int, default=1, help="Annotated slices per volume (fs_lcs)"
    )
    p.add_argument("--out", metavar="DIR", required=True)

    p = commands.add_parser("infer", help="Segment volumes with a trained network")
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument(
        "--images", required=True, metavar="DIR", help="Directory of .vol files"
    )
    p.add_argument("--out", metavar="DIR", required=True)

    p = commands.add_parser(
        "evaluate", help="Score predicted masks against ground truth"
    )
    p.add_argument("--pred", required=True, metavar="DIR")
    p.add_argument("--gt", required=True, metavar="DIR")
    p.add_argument("--method", default="method", help="Method name for the report")
    p.add_argument(
        "--spacing-from-sidecar",
        action="store_true",
        help="Use the voxel spacing recorded in ground-truth sidecars",
    )
    p.add_argument("--band-px", type=int, help="Boundary band radius for B-IoU")
    p.add_argument("--out", metavar="FILE", default="report.json")

    p = commands.add_parser("compare", help="Paired t-tests between method reports")
    p.add_argument("--reports", nargs="+", required=True, metavar="JSON")
    p.add_argument("--out", metavar="FILE", help="Write the comparisons as JSON")

    p = commands.add_parser("pipeline", help="Run an experiment mode end to end")
    p.add_argument(
        "--mode",
        choices=[m.value for m in ExperimentMode if not m.is_sweep],
        help="Override the config mode",
    )

    p = commands.add_parser("sweep", help="Run a feature-importance sweep")
    p.add_argument(
        "--mode",
        choices=[m.value for m in ExperimentMode if m.is_sweep],
        help="Override the config mode",
    )

    return parser


def display_welcome_banner() -> None:
    """Display a welcome banner when the application starts."""
    table = Table(show_header=False, box=None, padding=(0, 1))
    table.add_column(justify="left", width=max(20, console.width - 4))

    table.add_row(f"[bold cyan]{'=' * 30}[/bold cyan]")
    table.add_row("[bold cyan]SLICECOLLAB[/bold cyan]")
    table.add_row(f"[cyan]{'-' * 30}[/cyan]")
    table.add_row("[dim]Volumetric segmentation from one annotated slice[/dim]")
    table.add_row(f"[dim]Version {__version__}[/dim]")
    table.add_row(f"[bold cyan]{'=' * 30}[/bold cyan]")

    console.print()
    console.print(table)
    console.print()


def resolve_config(parsed_args) -> ExperimentConfig:
    """Load the config file (or defaults) and apply global overrides."""
    cfg = load_config(parsed_args.config) if parsed_args.config else ExperimentConfig()
    changes = {}
    if parsed_args.seed is not None:
        changes["seed"] = parsed_args.seed
    if parsed_args.out_dir is not None:
        changes["out_dir"] = parsed_args.out_dir
    if getattr(parsed_args, "data", None) is not None:
        changes["data_dir"] = parsed_args.data
    mode = getattr(parsed_args, "mode", None)
    if mode is not None and parsed_args.command in ("pipeline", "sweep"):
        changes["mode"] = mode
    return cfg.replace(**changes) if changes else cfg


def _with_epochs(opt, epochs: Optional[int]):
    if epochs is None:
        return opt
    return type(opt)(**{**opt.to_dict(), "epochs": epochs})


def _sparse_items(cfg: ExperimentConfig):
    cases = load_cases(cfg)
    return cases, [cases[c].sparse for c in sorted(cases)]


def cmd_phantom_gen(args, cfg: ExperimentConfig, progress: EpochProgress) -> int:
    phantom = cfg.phantom
    if args.translation is not None:
        phantom = type(phantom)(
            **{**phantom.to_dict(), "translation_px": tuple(args.translation)}
        )
    count = args.count or phantom.count
    shape = tuple(args.shape) if args.shape else phantom.shape
    out = Path(args.out) if args.out else Path(cfg.out_dir) / "data"
    with run_stage("phantom-gen"):
        cases = generate_phantom_dataset(count, shape, phantom.seed, phantom)
        write_dataset(cases, out)
    print_success(f"Wrote {count} phantom cases to {out}")
    return EXIT_OK


def cmd_train_semi(args, cfg: ExperimentConfig, progress: EpochProgress) -> int:
    out = Path(args.out)
    opt = _with_epochs(cfg.semi, args.epochs)
    with run_stage("semi"):
        cases, items = _sparse_items(cfg)
        state = train_semi(
            items,
            cfg.semi_loss,
            opt,
            total_epochs=opt.epochs,
            net_config=cfg.network,
            seed=cfg.seed,
            callback=progress.for_stage("semi"),
        )
        save_checkpoint(state.checkpoint(), out / "net.pt")
        save_checkpoint(state.k1_checkpoint(), out / "net_k1.pt")
        write_csv(state.history, out / "history.csv")
        spacings = {c: cases[c].volume.spacing_mm for c in cases}
        save_mask_dir(state.pseudo_labels, out / LABELS_DIR, spacings)
    print_success(f"Semi-supervised pseudo labels written to {out / LABELS_DIR}")
    return EXIT_OK


def cmd_train_reg(args, cfg: ExperimentConfig, progress: EpochProgress) -> int:
    out = Path(args.out)
    with run_stage("registration"):
        cases = load_cases(cfg)
        checkpoint = train_registration(
            [cases[c].volume for c in sorted(cases)],
            _with_epochs(cfg.registration, args.epochs),
            net_config=cfg.network,
            cfg=cfg.registration_loss,
            seed=cfg.seed,
            callback=progress.for_stage("registration"),
        )
        save_checkpoint(checkpoint, out / "net.pt")
    print_success(f"Registration checkpoint written to {out / 'net.pt'}")
    return EXIT_OK


def cmd_propagate(args, cfg: ExperimentConfig, progress: EpochProgress) -> int:
    out = Path(args.out)
    with run_stage("propagate"):
        cases, items = _sparse_items(cfg)
        net = load_checkpoint(args.checkpoint).net
        labels = {
            item.case_id: propagate_labels(
                net, item, cfg.registration_loss, cfg.registration.device
            )
            for item in items
        }
        save_mask_dir(labels, out, {c: cases[c].volume.spacing_mm for c in cases})
    print_success(f"Propagated labels for {len(labels)} cases to {out}")
    return EXIT_OK


def cmd_fuse(args, cfg: ExperimentConfig, progress: EpochProgress) -> int:
    out = Path(args.out)
    with run_stage("fusion"):
        semi = load_mask_dir(args.semi)
        ssl = load_mask_dir(args.ssl)
        missing = sorted(set(semi) ^ set(ssl))
        if missing:
            raise ValueError(f"pseudo-label sets differ in cases: {missing}")
        fused = {c: fuse_mode(semi[c], ssl[c], args.mode) for c in sorted(semi)}
        spacings = {}
        for case_id in fused:
            spacing = read_mask_spacing(Path(args.semi) / f"{case_id}{MASK_SUFFIX}")
            if spacing is None:
                spacing = read_mask_spacing(Path(args.ssl) / f"{case_id}{MASK_SUFFIX}")
            if spacing is not None:
                spacings[case_id] = spacing
        save_mask_dir(
            {c: f.consistent for c, f in fused.items()}, out / "consistent", spacings
        )
        save_mask_dir(
            {c: f.inconsistent for c, f in fused.items()},
            out / "inconsistent",
            spacings,
        )
    print_success(f"Fused {len(fused)} cases ({args.mode}) into {out}")
    return EXIT_OK


def cmd_train_target(args, cfg: ExperimentConfig, progress: EpochProgress) -> int:
    out = Path(args.out)
    fused_dir = Path(args.fused)
    with run_stage("target"):
        _, items = _sparse_items(cfg)
        consistent = load_mask_dir(fused_dir / "consistent")
        inconsistent = load_mask_dir(fused_dir / "inconsistent")
        cases = []
        for item in items:
            if item.case_id not in consistent or item.case_id not in inconsistent:
                raise ValueError(f"missing fused labels for {item.case_id}")
            fused = FusedLabels(consistent[item.case_id], inconsistent[item.case_id])
            cases.append(target_case_from_fused(item, fused, not args.no_uncertain))
        checkpoint = train_target(
            cases,
            cfg.target_loss,
            _with_epochs(cfg.target, args.epochs),
            net_config=cfg.network,
            seed=cfg.seed,
            callback=progress.for_stage("target"),
        )
        save_checkpoint(checkpoint, out / "net.pt")
    print_success(f"Target network written to {out / 'net.pt'}")
    return EXIT_OK


def cmd_train_baseline(args, cfg: ExperimentConfig, progress: EpochProgress) -> int:
    out = Path(args.out)
    with run_stage("target"):
        data = load_cases(cfg)
        cases = []
        for case_id in sorted(data):
            volume, labels = data[case_id].volume, data[case_id].labels
            if args.kind == "fs":
                cases.append(full_volume_case(volume, labels))
            else:
                indices = annotated_slice_indices(volume.num_slices, args.slices)
                cases.append(annotated_slices_case(volume, labels, indices))
        checkpoint = train_target(
            cases,
            cfg.target_loss,
            _with_epochs(cfg.target, args.epochs),
            net_config=cfg.network,
            seed=cfg.seed,
            callback=progress.for_stage(args.kind),
        )
        save_checkpoint(checkpoint, out / "net.pt")
    print_success(f"{args.kind} baseline written to {out / 'net.pt'}")
    return EXIT_OK


def cmd_infer(args, cfg: ExperimentConfig, progress: EpochProgress) -> int:
    out = Path(args.out)
    with run_stage("inference"):
        net = load_checkpoint(args.checkpoint).net
        paths = sorted(Path(args.images).glob(f"*{VOLUME_SUFFIX}"))
        if not paths:
            raise ValueError(f"no {VOLUME_SUFFIX} files in {args.images}")
        predictions, spacings = {}, {}
        for path in paths:
            volume = normalize(load_volume(path))
            predictions[volume.case_id] = infer_volume(net, volume, cfg.target.device)
            spacings[volume.case_id] = volume.spacing_mm
        save_mask_dir(predictions, out, spacings)
    print_success(f"Wrote {len(predictions)} predictions to {out}")
    return EXIT_OK


def cmd_evaluate(args, cfg: ExperimentConfig, progress: EpochProgress) -> int:
    out = Path(args.out)
    with run_stage("evaluation"):
        predictions = load_mask_dir(args.pred)
        ground_truth = load_mask_dir(args.gt)
        spacings = None
        if args.spacing_from_sidecar:
            spacings = {}
            for case_id in ground_truth:
                spacing = read_mask_spacing(Path(args.gt) / f"{case_id}{MASK_SUFFIX}")
                if spacing is None:
                    print_warning(f"{case_id}: no spacing in sidecar, using 1 mm")
                    spacing = (1.0, 1.0, 1.0)
                spacings[case_id] = spacing
        report = evaluate_cases(
            args.method, predictions, ground_truth, spacings, args.band_px
        )
        report.save(out)
        report.write_csv(out.with_name("per_case.csv"))
    if not args.quiet:
        console.print(metrics_table([report]))
    print_success(f"Report written to {out}")
    return EXIT_OK


def cmd_compare(args, cfg: ExperimentConfig, progress: EpochProgress) -> int:
    reports = [MetricsReport.load(path) for path in args.reports]
    comparisons = compare_reports(reports)
    if args.out:
        merged = MetricsReport(method="comparison", comparisons=comparisons)
        merged.save(args.out)
    if not args.quiet:
        console.print(metrics_table(reports))
        console.print(comparisons_table(comparisons))
    return EXIT_OK


def cmd_pipeline(args, cfg: ExperimentConfig, progress: EpochProgress) -> int:
    if not args.quiet:
        print_info(f"Running {cfg.mode.value} with seed {cfg.seed}")
    report = run_pipeline(cfg, progress)
    if not args.quiet:
        console.print(metrics_table([report]))
        display_summary(
            "Pipeline finished",
            [
                ("Mode", cfg.mode.value),
                ("Seed", cfg.seed),
                ("Cases evaluated", len(report.per_case)),
                ("Output", Path(cfg.out_dir) / report.method),
            ],
            style="green",
        )
    return EXIT_OK


def cmd_sweep(args, cfg: ExperimentConfig, progress: EpochProgress) -> int:
    if not args.quiet:
        print_info(f"Running {cfg.mode.value} with seed {cfg.seed}")
    sweep = run_sweep(cfg, progress)
    if not args.quiet:
        console.print(metrics_table(list(sweep.reports.values()), title=sweep.mode))
        if sweep.comparisons:
            console.print(comparisons_table(sweep.comparisons))
        print_success(f"Sweep written to {Path(cfg.out_dir) / sweep.mode}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[..., int]] = {
    "phantom-gen": cmd_phantom_gen,
    "train-semi": cmd_train_semi,
    "train-reg": cmd_train_reg,
    "propagate": cmd_propagate,
    "fuse": cmd_fuse,
    "train-target": cmd_train_target,
    "train-baseline": cmd_train_baseline,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "pipeline": cmd_pipeline,
    "sweep": cmd_sweep,
}


def main(args: Optional[List[str]] = None) -> int:
    """
    Main entry point for the CLI.

    Args:
        args: Command line arguments (if None, sys.argv is used)

    Returns:
        Exit code: 0 on success, 2 when a stage failed, 1 otherwise
    """
    try:
        parser = setup_parser()
        parsed_args = parser.parse_args(args)

        # Setup logging first
        configure_logging(0 if parsed_args.quiet else parsed_args.verbose + 1)

        if not parsed_args.quiet:
            display_welcome_banner()

        cfg = resolve_config(parsed_args)
        handler = COMMANDS[parsed_args.command]
        with EpochProgress(enabled=not parsed_args.quiet) as progress:
            return handler(parsed_args, cfg, progress)

    except StageError as e:
        print_error(str(e))
        logger.debug("Detailed error:", exc_info=True)
        return EXIT_STAGE_FAILED
    except SliceCollabError as e:
        print_error(str(e))
        logger.debug("Detailed error:", exc_info=True)
        return EXIT_ERROR
    except KeyboardInterrupt:
        console.print("\n[bold red]Operation canceled by user.[/bold red]")
        return EXIT_ERROR
    except Exception as e:
        print_error(f"Unexpected error: {e}")
        logger.debug("Detailed error:", exc_info=True)
        return EXIT_ERROR
