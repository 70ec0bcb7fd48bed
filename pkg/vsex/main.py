#!/usr/bin/env python3
"""
Main entry point for vsex.
Generates Lorenz/camera datasets, trains the VSE prior and posterior
networks, runs sampling-free inference and the particle-filter baseline,
and evaluates NMSE against SMNR.

Every subcommand writes its resolved configuration to
``<out>.config.json``; passing that file back through ``--config``
repeats the run. Exit codes: 0 success, 2 usage, 3 data error,
4 numerical failure.
"""

import argparse
import logging
import os
import sys
import time

import numpy as np
import torch
from rich.console import Console
from rich.progress import Progress

from vsex import datasets, evalkit
from vsex.camera import CameraConfig
from vsex.config import COMMAND_DEFAULTS, Config
from vsex.errors import EXIT_DATA, EXIT_OK, DataError, VsexError
from vsex.logger_setup import setup_logger
from vsex.lorenz import LorenzConfig
from vsex.particle_filter import pf_run_batch
from vsex.utils import resolved_config_path, write_csv, write_json
from vsex.vse import infer, load_model, train

console = Console()

LOG_COLUMNS = (
    "epoch", "train_elbo", "val_elbo", "lr", "grad_norm", "wall_time_s"
)


def _checkpoint_arg(text: str):
    smnr, sep, path = text.partition("=")
    if not sep or not path:
        raise argparse.ArgumentTypeError(
            f"expected SMNR=PATH, got {text!r}"
        )
    try:
        return str(float(smnr)), path
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad SMNR value {smnr!r}")


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps flags that were not given out of the namespace, so
    # only explicit flags override the JSON config.
    common = argparse.ArgumentParser(
        add_help=False, argument_default=argparse.SUPPRESS
    )
    common.add_argument("--config", help="JSON config file to start from")
    common.add_argument("--out", help="Output path")
    common.add_argument("--seed", type=int, help="Root seed")
    common.add_argument(
        "--threads", type=int, help="Torch threads and worker processes"
    )
    common.add_argument(
        "--verbose", action="store_true", help="Enable verbose logging"
    )

    system = argparse.ArgumentParser(
        add_help=False, argument_default=argparse.SUPPRESS
    )
    system.add_argument("--delta", type=float, help="Lorenz step size")
    system.add_argument(
        "--sigma-e2", dest="sigma_e2", type=float,
        help="Process-noise variance",
    )
    system.add_argument(
        "--taylor-order", dest="taylor_order", type=int,
        help="Order of the truncated matrix exponential",
    )
    system.add_argument(
        "--res-x", dest="res_x", type=int, help="Camera pixels along x1"
    )
    system.add_argument(
        "--res-y", dest="res_y", type=int, help="Camera pixels along x2"
    )

    parser = argparse.ArgumentParser(
        prog="vsex",
        description="Variational state estimation on a stochastic Lorenz "
        "system seen through a low-resolution camera",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser(
        "generate", parents=[common, system],
        argument_default=argparse.SUPPRESS,
        help="Simulate a dataset at a target SMNR",
    )
    gen.add_argument("--n", dest="n_seq", type=int, help="Sequences")
    gen.add_argument("--t", dest="T", type=int, help="Sequence length")
    gen.add_argument(
        "--smnr", dest="smnr_db", type=float, help="Target SMNR in dB"
    )

    tr = sub.add_parser(
        "train", parents=[common], argument_default=argparse.SUPPRESS,
        help="Train the VSE networks on a dataset's measurements",
    )
    tr.add_argument("--data", help="Training dataset")
    tr.add_argument("--log", help="Training log CSV")
    tr.add_argument(
        "--n-limit", dest="n_limit", type=int,
        help="Use only the first N sequences",
    )
    tr.add_argument("--epochs", type=int, help="Training epochs")
    tr.add_argument(
        "--batch-size", dest="batch_size", type=int, help="Batch size"
    )
    tr.add_argument("--lr", type=float, help="Initial Adam learning rate")
    tr.add_argument(
        "--samples", type=int, help="Monte-Carlo samples L per time step"
    )
    tr.add_argument(
        "--hidden", dest="hidden_dim", type=int, help="GRU units per layer"
    )
    tr.add_argument(
        "--layers", dest="num_layers", type=int, help="GRU layers"
    )
    tr.add_argument("--head", dest="head_dim", type=int, help="Head units")
    tr.add_argument(
        "--val-fraction", dest="val_fraction", type=float,
        help="Share of sequences held out for validation",
    )
    tr.add_argument(
        "--patience", dest="early_stop_patience", type=int,
        help="Early-stopping patience in epochs (0 disables)",
    )
    tr.add_argument("--resume", help="Checkpoint to continue from")

    inf = sub.add_parser(
        "infer", parents=[common], argument_default=argparse.SUPPRESS,
        help="Posterior-mean estimates from a trained checkpoint",
    )
    inf.add_argument("--data", help="Measurement dataset")
    inf.add_argument("--checkpoint", help="VSE checkpoint")

    pf = sub.add_parser(
        "pf", parents=[common, system], argument_default=argparse.SUPPRESS,
        help="Bootstrap particle-filter estimates",
    )
    pf.add_argument("--data", help="Measurement dataset")
    pf.add_argument("--particles", type=int, help="Particles per sequence")

    ev = sub.add_parser(
        "evaluate", parents=[common], argument_default=argparse.SUPPRESS,
        help="NMSE of estimates against ground truth",
    )
    ev.add_argument("--truth", help="Dataset with ground-truth states")
    ev.add_argument("--estimates", help="Estimates dataset")
    ev.add_argument(
        "--smnr-only", dest="smnr_only", action="store_true",
        help="Only report the measured SMNR of --truth",
    )

    sw = sub.add_parser(
        "sweep", parents=[common, system],
        argument_default=argparse.SUPPRESS,
        help="NMSE-versus-SMNR table over fresh test sets",
    )
    sw.add_argument(
        "--smnr", dest="smnr_list", type=float, nargs="+",
        help="SMNR values in dB",
    )
    sw.add_argument(
        "--methods", nargs="+", choices=["vse", "pf", "zero"],
        help="Methods to compare",
    )
    sw.add_argument(
        "--vse-checkpoint", dest="vse_checkpoints", type=_checkpoint_arg,
        action="append", help="SMNR=PATH, once per SMNR",
    )
    sw.add_argument("--n", dest="n_seq", type=int, help="Test sequences")
    sw.add_argument("--t", dest="T", type=int, help="Test length")
    sw.add_argument("--particles", type=int, help="Particles per sequence")
    return parser


def resolve_config(args: argparse.Namespace) -> Config:
    flags = vars(args).copy()
    json_path = flags.pop("config", None)
    if "vse_checkpoints" in flags:
        flags["vse_checkpoints"] = dict(flags["vse_checkpoints"])
    defaults = dict(COMMAND_DEFAULTS.get(args.command, {}))
    return Config.from_sources(defaults, json_path, flags)


def _require(parser, config: Config, *names) -> None:
    for name in names:
        if getattr(config, name) is None:
            parser.error(
                f"{config.command} requires --{name.replace('_', '-')}"
            )


def _save_resolved(config: Config, path: str) -> None:
    write_json(config.to_dict(), resolved_config_path(path))


def _model_configs(meta: dict, config: Config):
    """System and camera of a dataset, falling back to the run config."""
    lorenz = (
        LorenzConfig(**meta["lorenz"]) if "lorenz" in meta
        else config.lorenz()
    )
    camera = (
        CameraConfig(**meta["camera"]) if "camera" in meta
        else config.camera()
    )
    return lorenz, camera


def cmd_generate(config: Config) -> int:
    data = datasets.generate(
        config.n_seq,
        config.T,
        config.smnr_db,
        config.lorenz(),
        config.camera(),
        config.seed,
        max_workers=config.threads,
    )
    datasets.save(data, config.out)
    _save_resolved(config, config.out)
    console.print(
        f"[green]Generated[/green] [bold]{config.n_seq}[/bold] x "
        f"[bold]{config.T}[/bold] sequences -> [magenta]{config.out}"
        f"[/magenta], measured SMNR "
        f"[bold]{data.meta['measured_smnr_db']:.6f}[/bold] dB"
    )
    return EXIT_OK


def cmd_train(config: Config) -> int:
    data = datasets.load(config.data, audit=True)
    if config.n_limit is not None:
        data = data.head(config.n_limit)
    console.print(
        f"[cyan]Training on[/cyan] [bold]{len(data.measurements)}[/bold] "
        f"sequences for [bold]{config.epochs}[/bold] epochs"
    )
    result = train(
        data,
        config.training(show_progress=not config.verbose),
        resume=config.resume,
        checkpoint_path=config.out,
    )
    log_path = config.log or config.out + ".log.csv"
    write_csv((r.as_row() for r in result.history), log_path, LOG_COLUMNS)
    _save_resolved(config, config.out)
    if result.state_reads:
        console.print(
            f"[yellow]Training read ground-truth states "
            f"{result.state_reads} times[/yellow]"
        )
    console.print(
        f"[green]Checkpoint at epoch {result.epoch}[/green] -> "
        f"[magenta]{config.out}[/magenta], log [magenta]{log_path}"
        f"[/magenta]"
    )
    return EXIT_OK


def cmd_infer(config: Config) -> int:
    data = datasets.load(config.data)
    model, _, _ = load_model(config.checkpoint)
    estimates = []
    seconds = 0.0
    with Progress(console=console) as progress:
        task = progress.add_task(
            "[green]Inferring...", total=len(data.measurements)
        )
        for y in data.measurements:
            started = time.perf_counter()
            _, xh = infer(model, y)
            seconds += time.perf_counter() - started
            estimates.append(xh)
            progress.advance(task)
    out = datasets.estimates_dataset(np.stack(estimates), "vse", data.meta)
    out.meta["inference_seconds"] = seconds
    datasets.save(out, config.out)
    _save_resolved(config, config.out)
    console.print(
        f"[green]VSE estimates[/green] -> [magenta]{config.out}[/magenta] "
        f"in [bold]{seconds:.3f}[/bold] s"
    )
    return EXIT_OK


def cmd_pf(config: Config) -> int:
    data = datasets.load(config.data)
    lorenz, camera = _model_configs(data.meta, config)
    if "sigma_w2" not in data.meta:
        raise DataError(f"{config.data} records no sigma_w2")
    started = time.perf_counter()
    estimates = pf_run_batch(
        data.measurements,
        lorenz,
        camera,
        data.meta["sigma_w2"],
        config.pf(),
        max_workers=config.threads,
        show_progress=not config.verbose,
    )
    seconds = time.perf_counter() - started
    out = datasets.estimates_dataset(np.stack(estimates), "pf", data.meta)
    out.meta["inference_seconds"] = seconds
    out.meta["particles"] = config.particles
    datasets.save(out, config.out)
    _save_resolved(config, config.out)
    console.print(
        f"[green]PF estimates[/green] -> [magenta]{config.out}[/magenta] "
        f"in [bold]{seconds:.3f}[/bold] s"
    )
    return EXIT_OK


def cmd_evaluate(config: Config) -> int:
    truth = datasets.load(config.truth)
    if not truth.has_states:
        raise DataError(f"{config.truth} holds no ground-truth states")
    if config.smnr_only:
        value = evalkit.measured_smnr_db(
            truth.clean_measurements(), truth.meta["sigma_w2"]
        )
        console.print(f"SMNR [bold]{value:.6f}[/bold] dB")
        return EXIT_OK
    est = datasets.load(config.estimates)
    result = evalkit.evaluate_dataset(truth, est.measurements)
    result.inference_seconds = est.meta.get("inference_seconds", 0.0)
    method = est.meta.get("method", "?")
    console.print(
        f"[cyan]{method}[/cyan] NMSE [bold]{result.label}[/bold]"
        f"{'' if result.exact else ' dB'} at SMNR "
        f"{result.smnr_db:.3f} dB"
    )
    if config.out:
        write_csv(
            (
                {"sequence": i, "nmse_db": evalkit.format_nmse(v)}
                for i, v in enumerate(result.per_sequence_nmse_db)
            ),
            config.out,
            ("sequence", "nmse_db"),
        )
        _save_resolved(config, config.out)
    return EXIT_OK


def cmd_sweep(config: Config) -> int:
    methods = {}
    for method in config.methods:
        if method == "vse":
            methods["vse"] = config.vse_checkpoints
        else:
            methods[method] = None
    rows = evalkit.sweep(
        methods, config.smnr_list, config.sweep(), output_csv=config.out
    )
    _save_resolved(config, config.out)
    for row in rows:
        console.print(
            f"{row.smnr_db:>6g} dB  [cyan]{row.method:<5}[/cyan] "
            f"{evalkit.format_nmse(row.nmse_db):>12}  {row.seconds:.3f} s"
        )
    console.print(f"[green]Sweep table[/green] -> [magenta]{config.out}")
    return EXIT_OK


COMMANDS = {
    "generate": (cmd_generate, ("out",)),
    "train": (cmd_train, ("data", "out")),
    "infer": (cmd_infer, ("data", "checkpoint", "out")),
    "pf": (cmd_pf, ("data", "out")),
    "evaluate": (cmd_evaluate, ("truth",)),
    "sweep": (cmd_sweep, ("out",)),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
    except VsexError as e:
        parser.error(str(e))
    handler, required = COMMANDS[config.command]
    _require(parser, config, *required)
    if config.command == "evaluate" and not config.smnr_only:
        _require(parser, config, "estimates")
    if config.command == "sweep" and "vse" in config.methods:
        if not config.vse_checkpoints:
            parser.error("sweep with vse requires --vse-checkpoint")

    setup_logger(verbose=config.verbose)
    torch.set_num_threads(config.threads)
    out_dir = os.path.dirname(os.path.abspath(config.out or "."))
    if not os.path.exists(out_dir):
        os.makedirs(out_dir)

    try:
        return handler(config)
    except VsexError as e:
        console.print(f"[red]{type(e).__name__}: {e}[/red]")
        logging.debug("Failure details", exc_info=True)
        return e.exit_code
    except (OSError, RuntimeError) as e:
        console.print(f"[red]Error: {e}[/red]")
        logging.debug("Failure details", exc_info=True)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
