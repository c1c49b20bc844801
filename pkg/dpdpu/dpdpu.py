#!/usr/bin/env python3
"""
Main module for DPDPU package.
"""

import logging
import traceback
from typing import Callable, Optional

import typer
from dotenv import load_dotenv

from .profiles import (
    builtin_profiles,
    calibrate as calibrate_page_cycles,
    dump_profile,
    resolve_defaults,
    resolve_profile,
    write_calibration,
)
from .report import Report
from .scenarios import ScenarioContext, run_scenario
from .utils import parse_list, parse_size, setup_logging, validate_file_path

# Load environment variables
load_dotenv()

# Create Typer app
app = typer.Typer(help="Discrete-event simulator for host + DPU data paths.")
profiles_app = typer.Typer(help="Inspect hardware profiles.")
app.add_typer(profiles_app, name="profiles")

logger = logging.getLogger(__name__)

MODES = {"both": ("host", "offload"), "host": ("host",), "offload": ("offload",)}

ProfileOption = typer.Option("bf2", "--profile", "-p", envvar="DPDPU_PROFILE", help="Built-in profile name or profile file")
DefaultsOption = typer.Option(None, "--defaults", envvar="DPDPU_DEFAULTS", help="Kernel-cost defaults file")
SeedOption = typer.Option(0, "--seed", envvar="DPDPU_SEED", help="Seed for generated inputs")
OutOption = typer.Option(None, "--out", "-o", help="CSV output file (default: stdout)")
VerboseOption = typer.Option(False, "--verbose", "-v", help="Enable verbose output")


def build_context(profile: str, defaults: Optional[str], seed: int) -> ScenarioContext:
    """
    Load the profile and defaults a scenario runs with.

    Args:
        profile: Built-in name or path
        defaults: Defaults file, or None for the built-in one
        seed: Scenario seed

    Returns:
        The scenario context
    """
    return ScenarioContext(resolve_profile(profile), resolve_defaults(defaults), seed)


def _modes(mode: str) -> tuple:
    try:
        return MODES[mode]
    except KeyError:
        raise ValueError(f"Invalid mode {mode!r}. Must be one of {', '.join(MODES)}") from None


def _execute(verbose: bool, out: Optional[str], produce: Callable[[], Report]) -> None:
    setup_logging(verbose)
    try:
        if out and not validate_file_path(out, must_exist=False):
            logger.error("Cannot write to output file: %s", out)
            raise typer.Exit(1)
        report = produce()
        report.write(out)
    except typer.Exit:
        raise
    except Exception as e:
        logger.error("Error: %s", str(e))
        if verbose:
            logger.debug(traceback.format_exc())
        raise typer.Exit(1)


@app.command("bench-compress")
def bench_compress(
    sizes: str = typer.Option("64KiB,1MiB,16MiB", "--sizes", help="Comma-separated input sizes"),
    profile: str = ProfileOption,
    defaults: Optional[str] = DefaultsOption,
    seed: int = SeedOption,
    out: Optional[str] = OutOption,
    verbose: bool = VerboseOption,
) -> None:
    """
    Compression latency on a host core, a DPU core and the DPU accelerator.
    """
    _execute(verbose, out, lambda: run_scenario(
        "bench-compress", build_context(profile, defaults, seed), sizes=parse_list(sizes, parse_size),
    ))


@app.command("bench-storage-io")
def bench_storage_io(
    rate: int = typer.Option(450000, "--rate", help="Pages per second"),
    mode: str = typer.Option("both", "--mode", help="host, offload or both"),
    duration_ms: int = typer.Option(100, "--duration-ms", help="Simulated duration"),
    profile: str = ProfileOption,
    defaults: Optional[str] = DefaultsOption,
    seed: int = SeedOption,
    out: Optional[str] = OutOption,
    verbose: bool = VerboseOption,
) -> None:
    """
    Host CPU consumed by 8 KiB page reads, host storage stack vs. DPU file service.
    """
    _execute(verbose, out, lambda: run_scenario(
        "bench-storage-io", build_context(profile, defaults, seed),
        rate=rate, modes=_modes(mode), duration_ms=duration_ms,
    ))


@app.command("bench-network")
def bench_network(
    rates: str = typer.Option("150000,300000,600000,1200000", "--rates", help="Comma-separated message rates"),
    size: str = typer.Option("8KiB", "--size", help="Message size"),
    mode: str = typer.Option("both", "--mode", help="host, offload or both"),
    duration_ms: int = typer.Option(10, "--duration-ms", help="Simulated duration"),
    profile: str = ProfileOption,
    defaults: Optional[str] = DefaultsOption,
    seed: int = SeedOption,
    out: Optional[str] = OutOption,
    verbose: bool = VerboseOption,
) -> None:
    """
    Host CPU consumed by streaming messages, host network stack vs. offloaded transport.
    """
    _execute(verbose, out, lambda: run_scenario(
        "bench-network", build_context(profile, defaults, seed),
        rates=parse_list(rates, int), size=parse_size(size), modes=_modes(mode), duration_ms=duration_ms,
    ))


@app.command("read-compress-send")
def read_compress_send(
    pages: int = typer.Option(64, "--pages", help="Pages to read"),
    page_size: str = typer.Option("8KiB", "--page-size", help="Page size"),
    pipeline: bool = typer.Option(True, "--pipeline/--no-pipeline", help="Also run the pipelined variants"),
    window: int = typer.Option(8, "--window", help="In-flight items per pipeline stage"),
    profile: str = ProfileOption,
    defaults: Optional[str] = DefaultsOption,
    seed: int = SeedOption,
    out: Optional[str] = OutOption,
    verbose: bool = VerboseOption,
) -> None:
    """
    Read pages on the DPU, compress each, send each to a client.
    """
    _execute(verbose, out, lambda: run_scenario(
        "read-compress-send", build_context(profile, defaults, seed),
        pages=pages, page_size=parse_size(page_size), pipeline=pipeline, window=window,
    ))


@app.command("pushdown")
def pushdown(
    rows: int = typer.Option(100000, "--rows", help="Table rows"),
    selectivity: float = typer.Option(0.1, "--selectivity", help="Fraction of rows the predicate keeps"),
    profile: str = ProfileOption,
    defaults: Optional[str] = DefaultsOption,
    seed: int = SeedOption,
    out: Optional[str] = OutOption,
    verbose: bool = VerboseOption,
) -> None:
    """
    Filter + aggregate next to the data on the DPU vs. on the host.
    """
    _execute(verbose, out, lambda: run_scenario(
        "pushdown", build_context(profile, defaults, seed), rows=rows, selectivity=selectivity,
    ))


@app.command("dds")
def dds(
    requests: int = typer.Option(10000, "--requests", help="Requests in the trace"),
    offload_fraction: str = typer.Option("0,0.25,0.5,0.75,1", "--offload-fraction", help="Comma-separated fractions of DPU-resident files"),
    sizes: str = typer.Option("8KiB", "--sizes", help="Comma-separated request sizes"),
    rate: int = typer.Option(20000, "--rate", help="Requests per second"),
    connections: int = typer.Option(4, "--connections", help="Client connections"),
    write_fraction: float = typer.Option(0.0, "--write-fraction", help="Fraction of write requests"),
    files: int = typer.Option(64, "--files", help="Files on the server"),
    backing: Optional[str] = typer.Option(None, "--backing", help="Persist the emulated SSD to this file"),
    profile: str = ProfileOption,
    defaults: Optional[str] = DefaultsOption,
    seed: int = SeedOption,
    out: Optional[str] = OutOption,
    verbose: bool = VerboseOption,
) -> None:
    """
    Remote storage requests against a DDS server with partial offloading.
    """
    if backing and not validate_file_path(backing, must_exist=False):
        setup_logging(verbose)
        logger.error("Cannot write to backing file: %s", backing)
        raise typer.Exit(1)
    _execute(verbose, out, lambda: run_scenario(
        "dds", build_context(profile, defaults, seed),
        requests=requests, fractions=parse_list(offload_fraction, float), sizes=parse_list(sizes, parse_size),
        rate=rate, connections=connections, write_fraction=write_fraction, files=files, backing=backing,
    ))


@app.command()
def calibrate(
    rate: float = typer.Option(..., "--rate", help="Measured pages per second"),
    cores: float = typer.Option(..., "--cores", help="Host cores consumed at that rate"),
    clock: Optional[float] = typer.Option(None, "--clock", help="Host clock in Hz (default: the profile's)"),
    profile: str = ProfileOption,
    defaults: str = typer.Option("dpdpu_defaults.env", "--defaults", envvar="DPDPU_DEFAULTS", help="Defaults file to update"),
    verbose: bool = VerboseOption,
) -> None:
    """
    Derive storage.page_cycles from one measured point and store it in a defaults file.
    """
    setup_logging(verbose)
    try:
        clock_hz = clock if clock is not None else resolve_profile(profile).host_clock_hz
        if not validate_file_path(defaults, must_exist=False):
            logger.error("Cannot write to defaults file: %s", defaults)
            raise typer.Exit(1)
        page_cycles = calibrate_page_cycles(rate, cores, clock_hz)
        write_calibration(defaults, page_cycles)
        logger.info("Wrote storage.page_cycles to %s", defaults)
        typer.echo(f"storage.page_cycles={page_cycles:g}")
    except typer.Exit:
        raise
    except Exception as e:
        logger.error("Error: %s", str(e))
        if verbose:
            logger.debug(traceback.format_exc())
        raise typer.Exit(1)


@profiles_app.command("list")
def profiles_list() -> None:
    """
    List the built-in profiles.
    """
    for name in builtin_profiles():
        typer.echo(name)


@profiles_app.command("show")
def profiles_show(
    name: str = typer.Argument(..., help="Built-in profile name or profile file"),
    verbose: bool = VerboseOption,
) -> None:
    """
    Print a profile in file format.
    """
    setup_logging(verbose)
    try:
        typer.echo(dump_profile(resolve_profile(name)), nl=False)
    except Exception as e:
        logger.error("Error: %s", str(e))
        if verbose:
            logger.debug(traceback.format_exc())
        raise typer.Exit(1)


if __name__ == "__main__":
    app()
