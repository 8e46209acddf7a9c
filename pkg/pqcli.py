import csv
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click

import config
from logic.bank import load_bank, save_bank
from logic.errors import ConfigError, DataIOError, NumericalFailure, PQError
from logic.evaluation import (
    NcmPredictor,
    grid_table,
    session_accuracy,
    sessions_table,
    write_accuracy_csv,
    write_table,
)
from logic.extractor import load_checkpoint, save_checkpoint
from logic.linalg import make_rng
from logic.logs import init_logging, log_event
from logic.models import RunConfig, RunReport, apply_overrides, load_run_config
from logic.presets import get_preset, preset_names
from logic.sampler import SessionStream, load_feature_stream, make_session_stream, write_stream
from logic.trainer import RunResult, run_stream

DATA_STREAM = 0

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DATA_IO = 3
EXIT_NUMERICAL = 4


class PqGroup(click.Group):
    """Turns domain errors into exit codes after logging them."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise
        except ConfigError as e:
            log_event("config_invalid", err=e)
            click.echo(f"config error: {e}", err=True)
            raise click.exceptions.Exit(EXIT_CONFIG)
        except DataIOError as e:
            log_event("data_io_error", err=e)
            click.echo(f"data error: {e}", err=True)
            raise click.exceptions.Exit(EXIT_DATA_IO)
        except NumericalFailure as e:
            log_event("numerical_failure", session=e.session, epoch=e.epoch, episode=e.episode, err=e)
            click.echo(f"numerical failure: {e}", err=True)
            raise click.exceptions.Exit(EXIT_NUMERICAL)
        except PQError as e:
            # a broken internal contract mid-run is reported like a numerical failure
            log_event("contract_violation", err=e)
            click.echo(f"internal check failed: {e}", err=True)
            raise click.exceptions.Exit(EXIT_NUMERICAL)


def _parse_extra(args: Sequence[str]) -> Dict[str, str]:
    """`--key value`, `--key=value` and bare `--flag` (read as true)."""
    out: Dict[str, str] = {}
    i = 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise click.UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(args) and not args[i + 1].startswith("--"):
            value = args[i + 1]
            i += 2
        else:
            value = "true"
            i += 1
        out[key] = value
    return out


def _read_config_file(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise DataIOError(f"cannot read config {path}: {e}")
    except ValueError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    return data


def _toggle_overrides(opts: Dict[str, Any]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    if opts.get("no_hinge"):
        out["plan.hinge"] = False
    if opts.get("calibrate_per_query"):
        out["plan.calibrate_per_query"] = True
    if opts.get("classify_avg_copies"):
        out["eval.classify_avg_copies"] = True
    if opts.get("anchor_sign") is not None:
        out["bank.anchor_sign"] = int(opts["anchor_sign"])
    if opts.get("baseline") is not None:
        out["plan.baseline"] = opts["baseline"]
    if opts.get("data") is not None:
        out["data"] = opts["data"]
    if opts.get("out") is not None:
        out["out_dir"] = opts["out"]
    return out


def build_run_config(ctx: click.Context, opts: Dict[str, Any],
                     extra: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults < config file or preset < PQ_SEED < flags."""
    base: Dict[str, Any] = {}
    if opts.get("preset"):
        base = get_preset(opts["preset"])
    if opts.get("config_path"):
        base = _deep_merge(base, _read_config_file(opts["config_path"]))
    if config.PQ_SEED is not None:
        base = apply_overrides(base, {"plan.seed": config.PQ_SEED})
    overrides: Dict[str, Any] = dict(_parse_extra(ctx.args))
    overrides.update(_toggle_overrides(opts))
    if opts.get("seed") is not None:
        overrides["plan.seed"] = opts["seed"]
    overrides.update(extra or {})
    return load_run_config(apply_overrides(base, overrides))


def _deep_merge(low: Dict[str, Any], high: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(low)
    for key, value in high.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_stream(cfg: RunConfig, data_seed: Optional[int] = None) -> SessionStream:
    if cfg.data:
        return load_feature_stream(cfg.data)
    seed = cfg.plan.seed if data_seed is None else data_seed
    return make_session_stream(cfg.stream, make_rng(seed, DATA_STREAM))


def eval_threads(cfg: Optional[RunConfig] = None) -> int:
    cap = config.PQ_THREADS
    wanted = cfg.eval.threads if cfg is not None else None
    return min(wanted, cap) if wanted else cap


def train_once(cfg: RunConfig, data_seed: Optional[int] = None) -> RunResult:
    stream = load_stream(cfg, data_seed)
    return run_stream(
        stream,
        cfg.plan,
        cfg.network,
        classify_avg_copies=cfg.eval.classify_avg_copies,
        threads=eval_threads(cfg),
        config_echo=cfg.echo(),
    )


def write_text(path: str, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}")


def _make_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"cannot create {path}: {e}")


def source_options(f):
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON run config.")(f)
    f = click.option("--preset", help=f"Named config from data/presets.json: {', '.join(preset_names())}.")(f)
    f = click.option("--seed", type=int, help="Overrides PQ_SEED and the config seed.")(f)
    f = click.option("--out", help="Output directory.")(f)
    return f


def plan_options(f):
    f = click.option("--data", help="Feature manifest JSON to train on instead of a synthetic stream.")(f)
    f = click.option("--no-hinge", is_flag=True, help="Unclamped quadruplet terms.")(f)
    f = click.option("--calibrate-per-query", is_flag=True, help="Calibrate the bank after every query.")(f)
    f = click.option("--classify-avg-copies", is_flag=True, help="Classify against the mean of stored copies.")(f)
    f = click.option("--anchor-sign", type=click.Choice(["1", "-1"]), help="Sign of the cosine-anchor step.")(f)
    f = click.option("--baseline", type=click.Choice(["none", "finetune"]), help="Run the fine-tuning baseline.")(f)
    return f


EXTRA_ARGS = dict(ignore_unknown_options=True, allow_extra_args=True)


@click.group(cls=PqGroup)
def cli():
    """Few-shot class-incremental training with a prototype memory bank."""
    init_logging()


@cli.command("gen-data", context_settings=EXTRA_ARGS)
@source_options
@click.pass_context
def gen_data(ctx: click.Context, **opts):
    """Write a synthetic session stream as feature CSVs plus a manifest."""
    out = opts.pop("out") or "data/stream"
    cfg = build_run_config(ctx, opts)
    stream = make_session_stream(cfg.stream, make_rng(cfg.plan.seed, DATA_STREAM))
    path = write_stream(stream, out)
    log_event("data_written", sessions=len(stream.sessions), classes=stream.total_classes, path=path)
    click.echo(path)


def _write_run(result: RunResult, out_dir: str) -> str:
    _make_dir(out_dir)
    report_path = os.path.join(out_dir, "report.json")
    write_text(report_path, result.report.to_json())
    write_accuracy_csv(result.report, os.path.join(out_dir, "accuracy.csv"))
    save_checkpoint(os.path.join(out_dir, "net.bin"), result.params, result.head, result.mask)
    if result.bank is not None:
        save_bank(os.path.join(out_dir, "bank.bin"), result.bank)
    return report_path


@cli.command(context_settings=EXTRA_ARGS)
@source_options
@plan_options
@click.pass_context
def train(ctx: click.Context, **opts):
    """Run every session of a stream and write report, accuracy table and checkpoints."""
    cfg = build_run_config(ctx, opts)
    result = train_once(cfg)
    report_path = _write_run(result, cfg.out_dir)
    click.echo(json.dumps({
        "report": report_path,
        "final_accuracy": result.report.cumulative[-1],
        "bwt": result.report.bwt,
    }))


@cli.command("eval")
@click.option("--net", "net_path", required=True, type=click.Path(dir_okay=False), help="PQNET1 checkpoint.")
@click.option("--bank", "bank_path", required=True, type=click.Path(dir_okay=False), help="PQBANK1 snapshot.")
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False), help="Feature manifest JSON.")
@click.option("--session", type=int, help="Score test splits 1..session (default: all).")
@click.option("--classify-avg-copies", is_flag=True)
def eval_cmd(net_path: str, bank_path: str, data_path: str, session: Optional[int], classify_avg_copies: bool):
    """Score stored checkpoints on a feature stream's test splits."""
    params, _, _ = load_checkpoint(net_path)
    bank = load_bank(bank_path)
    stream = load_feature_stream(data_path)
    t = session or len(stream.tests)
    if not 1 <= t <= len(stream.tests):
        raise ConfigError(f"--session must be in [1, {len(stream.tests)}], got {t}")
    if params.input_dim != stream.input_dim:
        raise ConfigError(f"checkpoint expects {params.input_dim}-dim features, data has {stream.input_dim}")
    if params.embedding_dim != bank.dim:
        raise ConfigError(f"checkpoint embeds into {params.embedding_dim} dims, bank stores {bank.dim}")
    acc = session_accuracy(NcmPredictor(bank, classify_avg_copies), params, stream.tests[:t], threads=eval_threads())
    log_event("eval_done", session=t, mode="ncm", accuracy=acc.pooled)
    click.echo(json.dumps({
        "session": t,
        "pooled": acc.pooled,
        "per_split": acc.per_split,
        "correct": acc.correct,
        "total": acc.total,
    }, sort_keys=True))


def sweep_cells(params: Sequence[str], values: Sequence[str]) -> List[Dict[str, str]]:
    if not params:
        raise click.UsageError("sweep needs at least one --param/--values pair")
    if len(params) != len(values):
        raise click.UsageError(f"{len(params)} --param given with {len(values)} --values")
    axes = [[v.strip() for v in vs.split(",") if v.strip()] for vs in values]
    for name, axis in zip(params, axes):
        if not axis:
            raise click.UsageError(f"--values for {name} is empty")
    return [dict(zip(params, combo)) for combo in itertools.product(*axes)]


@cli.command(context_settings=EXTRA_ARGS)
@source_options
@plan_options
@click.option("--param", "params", multiple=True, help="Config key to sweep (repeatable).")
@click.option("--values", "values", multiple=True, help="Comma-separated values for the matching --param.")
@click.pass_context
def sweep(ctx: click.Context, params: Tuple[str, ...], values: Tuple[str, ...], **opts):
    """Train one run per grid cell and tabulate final accuracy, BWT and memory."""
    cells = sweep_cells(params, values)
    base = build_run_config(ctx, opts)
    base_seed = base.plan.seed
    # validate every cell before spending time on any of them
    configs = [
        build_run_config(ctx, opts, extra={**cell, "plan.seed": base_seed ^ i})
        for i, cell in enumerate(cells)
    ]
    _make_dir(base.out_dir)

    def run_cell(i: int) -> RunReport:
        result = train_once(configs[i], data_seed=base_seed)
        write_text(os.path.join(base.out_dir, f"report_{i}.json"), result.report.to_json())
        log_event("sweep_cell_done", mode=result.report.method, cell=i,
                  accuracy=result.report.cumulative[-1], **cells[i])
        return result.report

    with ThreadPoolExecutor(max_workers=config.PQ_THREADS) as pool:
        reports = list(pool.map(run_cell, range(len(cells))))

    rows: List[List[Any]] = [["cell"] + list(params) + ["final_accuracy", "bwt", "K"]]
    for i, (cell, r) in enumerate(zip(cells, reports)):
        rows.append([i] + [cell[p] for p in params] + [
            repr(r.cumulative[-1]),
            "" if r.bwt is None else repr(r.bwt),
            r.memory.prototype_vectors,
        ])
    sweep_path = os.path.join(base.out_dir, "sweep.csv")
    write_table(rows, sweep_path)
    click.echo(sweep_path)


def _read_report(path: str) -> RunReport:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return RunReport.from_json(f.read())
    except OSError as e:
        raise DataIOError(f"cannot read report {path}: {e}")


@cli.command()
@click.argument("reports", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--layout", type=click.Choice(["sessions", "grid"]), default="sessions", show_default=True)
@click.option("--row", "row_key", help="Config key for grid rows.")
@click.option("--col", "col_key", help="Config key for grid columns.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="CSV file (default: stdout).")
def report(reports: Tuple[str, ...], layout: str, row_key: Optional[str], col_key: Optional[str],
           out_path: Optional[str]):
    """Merge report files into a CSV table."""
    if layout == "grid" and not (row_key and col_key):
        raise click.UsageError("--layout grid needs --row and --col")
    loaded = [(os.path.splitext(os.path.basename(p))[0], _read_report(p)) for p in reports]
    if layout == "grid":
        rows = grid_table(loaded, row_key, col_key)
    else:
        rows = sessions_table(loaded)
    if out_path:
        write_table(rows, out_path)
        click.echo(out_path)
    else:
        csv.writer(sys.stdout, lineterminator="\n").writerows(rows)


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        rv = cli.main(args=list(argv) if argv is not None else None, prog_name="pqcli", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        return EXIT_USAGE
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(cli_main())
