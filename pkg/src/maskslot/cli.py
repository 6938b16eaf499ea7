"""CLI entry point: maskslot <gen-data|train|eval|infer|gradcheck|preliminary|config|events>."""

import argparse
import sys
from pathlib import Path
from typing import Callable, NoReturn, Optional, Sequence, Tuple

import yaml
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from .checkpoint import CheckpointError, load_checkpoint, model_from_checkpoint
from .config import DATA_DIR, RUNS_DIR, ConfigError, RunConfig, apply_overrides, list_keys, load_config
from .dataset import DatasetError, load_external_dataset, read_dataset, read_video, write_dataset
from .evaluation import EvaluationError, evaluate_dataset, export_masks, infer, report_table, write_report
from .eventlog import log_event, read_events
from .gradcheck import run_gradcheck
from .model import SlotModel
from .numerics import ContractError, NumericsError, set_precision
from .objectives import ObjectiveError
from .preliminary import preliminary_table, run_preliminary
from .rundir import RunDirError, create_run_dir, write_run_manifest
from .synthetic import generate_suite
from .trainer import TrainingError, restore_state, train
from .transport import TransportError

console = Console()
err_console = Console(stderr=True)

USAGE_EXIT = 1
RUNTIME_EXIT = 2
RUNTIME_ERRORS = (
    CheckpointError,
    DatasetError,
    EvaluationError,
    NumericsError,
    ObjectiveError,
    RunDirError,
    TrainingError,
    TransportError,
    OSError,
)


class UsageError(Exception):
    """Bad command line."""

    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors as exceptions instead of exiting with 2."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{message}\n{self.format_usage()}")


def resolve_config(args: argparse.Namespace, base: Optional[RunConfig] = None) -> RunConfig:
    """Config file (or base) plus --set overrides."""
    cfg = base if base is not None else load_config(args.config)
    return apply_overrides(cfg, args.set or [])


def clip_length(cfg: RunConfig) -> int:
    return (cfg.train.frames - 1) * cfg.train.stride + 1


def cmd_gen_data(args: argparse.Namespace) -> None:
    """Write the synthetic suite to <out>/train and <out>/eval."""
    cfg = resolve_config(args)
    out = Path(args.out) if args.out else DATA_DIR
    train_set, eval_set = generate_suite(cfg.data, cfg.model.image_size, clip_length(cfg))
    write_dataset(train_set, out / "train")
    write_dataset(eval_set, out / "eval")
    log_event("GEN_DATA", {"out": out, "train": len(train_set), "eval": len(eval_set), "seed": cfg.data.seed})
    console.print(f"[green]Wrote {len(train_set)} training and {len(eval_set)} eval videos to {out}[/green]")


def cmd_train(args: argparse.Namespace) -> None:
    """Train from scratch or resume, writing checkpoints and a loss log into a run directory."""
    checkpoint = load_checkpoint(Path(args.resume)) if args.resume else None
    cfg = resolve_config(args, checkpoint.config if checkpoint else None)
    if args.steps is not None:
        cfg = apply_overrides(cfg, [f"train.steps={args.steps}"])
    set_precision(cfg.train.precision)
    data = Path(args.data) if args.data else DATA_DIR
    train_set = read_dataset(data / "train")
    eval_dir = data / "eval"
    eval_set = read_dataset(eval_dir) if eval_dir.is_dir() else []
    if not train_set:
        raise DatasetError(f"No training videos in {data / 'train'}")
    run_dir = create_run_dir(args.name, Path(args.out) if args.out else RUNS_DIR)
    write_run_manifest(run_dir, cfg, [data])
    state = restore_state(checkpoint) if checkpoint else None
    console.print(f"Run directory: {run_dir}")
    state = train(cfg, train_set, eval_set, run_dir, console, state)
    console.print(f"[green]Finished {state.step} steps.[/green]")


def _model_and_config(args: argparse.Namespace) -> Tuple[SlotModel, RunConfig]:
    checkpoint = load_checkpoint(Path(args.checkpoint))
    cfg = resolve_config(args, checkpoint.config)
    if getattr(args, "mode", None):
        cfg = apply_overrides(cfg, [f"eval.mode={args.mode}"])
    if getattr(args, "student", False):
        cfg = apply_overrides(cfg, ["eval.use_teacher=false"])
    set_precision(cfg.train.precision)
    return model_from_checkpoint(checkpoint, cfg.eval.use_teacher), cfg


def cmd_eval(args: argparse.Namespace) -> None:
    """Score a checkpoint on a dataset and write report.yaml."""
    model, cfg = _model_and_config(args)
    data = Path(args.data)
    if args.external:
        samples = load_external_dataset(data, cfg.model.image_size)
    else:
        samples = read_dataset(data)
    report = evaluate_dataset(model, samples, cfg)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.yaml")
    log_event("EVAL", {"checkpoint": args.checkpoint, "videos": len(samples), **report.aggregate})
    console.print(report_table(report, per_video=args.per_video))
    console.print(f"Report written to {out / 'report.yaml'}")


def cmd_infer(args: argparse.Namespace) -> None:
    """Export semantic and instance maps of one video as indexed PNGs."""
    model, cfg = _model_and_config(args)
    video = read_video(
        Path(args.video), require_manifest=False, image_size=cfg.model.image_size, require_masks=False
    )
    result = infer(video, model, cfg)
    out = Path(args.out)
    export_masks(result, out, cfg.model.num_semantics, cfg.model.num_instances)
    candidates = sum(len(c) for c in result.candidates)
    log_event("INFER", {"video": video.name, "frames": video.num_frames, "candidates": candidates, "out": out})
    console.print(f"[green]Exported {video.num_frames} frames ({candidates} candidates) to {out}[/green]")


def cmd_gradcheck(args: argparse.Namespace) -> None:
    """Finite-difference table; exits 2 if any loss fails."""
    results = run_gradcheck(seed=args.seed, step=args.step, tol=args.tol)
    table = Table(title="Gradient check (central differences, float64)")
    table.add_column("Loss")
    table.add_column("Max rel. error", justify="right")
    table.add_column("Tolerance", justify="right")
    table.add_column("Result")
    for r in results:
        verdict = "[green]pass[/green]" if r.passed else "[red]FAIL[/red]"
        table.add_row(r.name, f"{r.max_relative_error:.2e}", f"{r.tolerance:.0e}", verdict)
    console.print(table)
    log_event("GRADCHECK", {r.name: r.max_relative_error for r in results})
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericsError(f"gradient check failed for {', '.join(failed)}")


def cmd_preliminary(args: argparse.Namespace) -> None:
    """The 2x2 feature/initialization study; writes preliminary.yaml."""
    cfg = resolve_config(args)
    if args.steps is not None:
        cfg = apply_overrides(cfg, [f"train.steps={args.steps}"])
    set_precision(cfg.train.precision)
    data = Path(args.data) if args.data else DATA_DIR
    train_set, eval_set = read_dataset(data / "train"), read_dataset(data / "eval")
    run_dir = create_run_dir("preliminary", Path(args.out) if args.out else RUNS_DIR)
    write_run_manifest(run_dir, cfg, [data])
    result = run_preliminary(cfg, train_set, eval_set, args.seeds, run_dir, console)
    (run_dir / "preliminary.yaml").write_text(yaml.safe_dump(result.to_dict(), sort_keys=True))
    log_event("PRELIMINARY", {"seeds": args.seeds, "ordering_holds": result.ordering_holds()}, run_dir / "events.log")
    console.print(preliminary_table(result))
    if result.ordering_holds():
        console.print("[green]Ordering: query > random on RGB, random > query on correlation[/green]")
    else:
        console.print("[yellow]Warning: expected ordering not observed[/yellow]")


def cmd_config(args: argparse.Namespace) -> None:
    """Print every resolved config key with its value."""
    cfg = resolve_config(args)
    table = Table(title="Resolved configuration")
    table.add_column("Key")
    table.add_column("Value")
    for key in list_keys(cfg):
        section, _, name = key.partition(".")
        value = getattr(getattr(cfg, section), name) if name else getattr(cfg, section)
        table.add_row(key, escape(str(value)))
    console.print(table)


def cmd_events(args: argparse.Namespace) -> None:
    """Show the event log, optionally one kind only."""
    lines = read_events(Path(args.log) if args.log else None, args.kind)
    table = Table(title="Events")
    table.add_column("Time")
    table.add_column("Kind")
    table.add_column("Fields")
    for line in lines:
        parts = line.split("; ")
        table.add_row(parts[0], parts[1] if len(parts) > 1 else "", escape("; ".join(parts[2:])))
    console.print(table)
    console.print(f"{len(lines)} event(s)")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="maskslot", description="Semantic-aware masked slot attention")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic moving-shape suite")
    _common(p)
    p.add_argument("--out", help="dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="teacher-student training")
    _common(p)
    p.add_argument("--data", help="dataset directory holding train/ and eval/")
    p.add_argument("--out", help="base directory for runs")
    p.add_argument("--name", default="train", help="run name")
    p.add_argument("--steps", type=int, help="shorthand for --set train.steps=N")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory of videos")
    p.add_argument("--mode", choices=("single", "multi"))
    p.add_argument("--external", action="store_true", help="image-sequence dataset without manifests")
    p.add_argument("--student", action="store_true", help="use student instead of teacher weights")
    p.add_argument("--per-video", action="store_true")
    p.add_argument("--out", help="report directory (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="export semantic and instance maps")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True, help="one video folder")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("single", "multi"))
    p.add_argument("--student", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("preliminary", help="query vs random initialization study")
    _common(p)
    p.add_argument("--data", help="dataset directory holding train/ and eval/")
    p.add_argument("--out", help="base directory for runs")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_preliminary)

    p = sub.add_parser("config", help="show the resolved configuration")
    _common(p)
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("events", help="show the event log")
    p.add_argument("--log", help="event log file (default: the global log)")
    p.add_argument("--kind", help="only events of this kind, e.g. EVAL")
    p.set_defaults(func=cmd_events)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> None:
    """Entry point for the maskslot command."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        command: Callable[[argparse.Namespace], None] = args.func
        command(args)
    except UsageError as e:
        err_console.print(f"[red]Error: {escape(str(e))}[/red]", highlight=False)
        sys.exit(USAGE_EXIT)
    except (ConfigError, ContractError) as e:
        err_console.print(f"[red]Error: {escape(str(e))}[/red]")
        sys.exit(USAGE_EXIT)
    except KeyboardInterrupt:
        err_console.print("\n[yellow]Cancelled[/yellow]")
        sys.exit(RUNTIME_EXIT)
    except RUNTIME_ERRORS as e:
        err_console.print(f"[red]Error: {escape(str(e))}[/red]")
        dump = getattr(e, "dump_path", None)
        if dump:
            err_console.print(f"Reproduction dump: {dump}")
        sys.exit(RUNTIME_EXIT)


if __name__ == "__main__":
    main()
