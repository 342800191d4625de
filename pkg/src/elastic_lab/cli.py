"""Command-line entry point: train, profile, importance, solve, compare, sweep."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import click
import numpy as np

from . import harness
from . import importance as imp_mod
from .config import ConfigError, TrainConfig, load_config
from .data import DatasetError
from .importance import ImportanceVector
from .profiler import TensorProfile, profile as run_profile
from .selector import DPConfig, InfeasibleBudget, Strategy, solve_dp

_USER_ERRORS = (ConfigError, DatasetError, InfeasibleBudget, harness.ConfigMismatch,
                FileNotFoundError)


def _parse_sets(pairs: tuple[str, ...]) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise click.BadParameter(f"expected KEY=VALUE, got {pair!r}", param_hint="--set")
        out[key.strip()] = value.strip()
    return out


def _config(path, sets=(), **flags) -> TrainConfig:
    """File values, then ``--set`` overrides, then dedicated flags."""
    overrides = _parse_sets(sets)
    overrides.update({k: v for k, v in flags.items() if v is not None})
    try:
        return load_config(path, **overrides)
    except (ConfigError, ValueError) as exc:
        raise click.ClickException(str(exc)) from None


def _echo_json(obj) -> None:
    click.echo(json.dumps(obj, indent=2))


def _tq(value: str | None):
    if value is None or value.lower() in ("exact", "none"):
        return None
    return int(value)


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="Flat YAML file of TrainConfig fields.")
set_option = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                          help="Override any config field; repeatable.")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress to stderr.")
def main(verbose: bool):
    """Elastic trainable-tensor selection lab."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@config_option
@click.option("--strategy", type=click.Choice([s.value for s in Strategy]))
@click.option("--rho", type=float)
@click.option("--seed", type=int)
@click.option("--out", type=click.Path(dir_okay=False), help="Write the run report here (JSON).")
@click.option("--log", "log_path", type=click.Path(dir_okay=False),
              help="Run log (JSON lines); defaults to the report path with .jsonl.")
@click.option("--reference", type=click.Path(exists=True, dir_okay=False),
              help="Full-training report used to compute the speedup.")
@set_option
def train(config_path, strategy, rho, seed, out, log_path, reference, sets):
    """Train once and print a summary."""
    cfg = _config(config_path, sets, strategy=strategy, rho=rho, seed=seed)
    if log_path is None and out is not None:
        log_path = str(Path(out).with_suffix(".jsonl"))
    ref = harness.RunReport.load(reference) if reference else None
    try:
        report = harness.run(cfg, log_path, reference=ref)
    except _USER_ERRORS as exc:
        raise click.ClickException(str(exc)) from None
    if out is not None:
        report.dump(out)
    summary = {"strategy": cfg.strategy, "rho": cfg.rho, "seed": cfg.seed,
               "final_accuracy": report.final_accuracy, "total_time_ns": report.total_time_ns,
               "overhead_time_ns": report.overhead_time_ns, "total_flops": report.total_flops,
               "final_mask": report.epochs[-1].mask}
    if report.speedup is not None:
        summary["speedup"] = report.speedup
    _echo_json(summary)


@main.command()
@config_option
@click.option("--out", type=click.Path(dir_okay=False), help="Write the profile here (JSON).")
@set_option
def profile(config_path, out, sets):
    """Profile the configured model on its first training batch."""
    cfg = _config(config_path, sets)
    try:
        net, train_split, _ = harness.build(cfg)
    except _USER_ERRORS as exc:
        raise click.ClickException(str(exc)) from None
    batch = train_split.batch(np.arange(cfg.batch_size), net.input_shape)
    prof = run_profile(net, batch, cfg.clock())
    if out is not None:
        prof.dump(out)
    _echo_json(prof.to_dict())


@main.command()
@config_option
@click.option("--epoch", type=int, default=0, show_default=True,
              help="Epoch stamp; also selects the probe batch seed.")
@click.option("--out", type=click.Path(dir_okay=False), help="Write the vector here (JSON).")
@set_option
def importance(config_path, epoch, out, sets):
    """Probe tensor importance on the freshly built model."""
    cfg = _config(config_path, sets)
    try:
        net, train_split, _ = harness.build(cfg)
    except _USER_ERRORS as exc:
        raise click.ClickException(str(exc)) from None
    seed = harness.probe_seed(cfg.seed, epoch)
    idx = np.random.default_rng(seed).choice(len(train_split), cfg.probe_batch_size,
                                             replace=False)
    pr = imp_mod.probe(net, train_split.batch(idx, net.input_shape), cfg.lr, cfg.momentum,
                       cfg.weight_decay, cfg.clock(), epoch, seed)
    if out is not None:
        pr.importance.dump(out)
    _echo_json(pr.importance.to_dict())


@main.command()
@click.argument("profile_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("importance_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--rho", type=float, default=0.5, show_default=True)
@click.option("--tq", default="1000", show_default=True,
              help="Downscaled time resolution, or 'exact'.")
@click.option("--reserve", type=int, default=0, show_default=True,
              help="Nanoseconds withheld from the per-iteration budget.")
def solve(profile_path, importance_path, rho, tq, reserve):
    """One-shot selection on a dumped profile and importance vector."""
    prof = TensorProfile.load(profile_path)
    iv = ImportanceVector.load(importance_path)
    try:
        sol = solve_dp(prof, iv, DPConfig(rho, _tq(tq), reserve))
    except (InfeasibleBudget, ValueError) as exc:
        raise click.ClickException(str(exc)) from None
    _echo_json(sol.to_dict())


@main.command()
@click.argument("report_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("report_b", type=click.Path(exists=True, dir_okay=False))
def compare(report_a, report_b):
    """Accuracy delta and time / FLOPs ratios of report A against report B."""
    try:
        row = harness.compare(harness.RunReport.load(report_a), harness.RunReport.load(report_b))
    except harness.ConfigMismatch as exc:
        raise click.ClickException(str(exc)) from None
    _echo_json(row)


@main.command()
@config_option
@click.option("--rho", "rhos", type=float, multiple=True, help="Repeatable.")
@click.option("--tq", "tqs", multiple=True, help="Repeatable; integer or 'exact'.")
@click.option("--out-dir", type=click.Path(file_okay=False),
              help="Directory for per-value reports and logs.")
@set_option
def sweep(config_path, rhos, tqs, out_dir, sets):
    """Run the configured experiment once per rho or T_q value."""
    if bool(rhos) == bool(tqs):
        raise click.UsageError("give exactly one of --rho or --tq (repeatable)")
    cfg = _config(config_path, sets)
    key, values = ("rho", list(rhos)) if rhos else ("t_q", [_tq(v) for v in tqs])
    try:
        reports = harness.sweep(cfg, key, values, out_dir)
    except _USER_ERRORS as exc:
        raise click.ClickException(str(exc)) from None
    _echo_json([{key: v, "final_accuracy": r.final_accuracy, "total_time_ns": r.total_time_ns,
                 "overhead_time_ns": r.overhead_time_ns, "total_flops": r.total_flops}
                for v, r in zip(values, reports)])


if __name__ == "__main__":  # pragma: no cover
    main()
