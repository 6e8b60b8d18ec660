"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration, 3 numeric failure, 4 contract
violation (e.g. comparing runs on different datasets).  Errors are printed to
stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import diagnostics as diag
from .adapter import count_trainable, per_group_count
from .checkpoint import load_into, read_checkpoint
from .config import from_dict
from .data import atomic_write_text
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .experiment import Runner, _seeded, compare, compare_csv, output_dir
from .fit import FitSpec, fit_rational, rate_study
from .models import (
    AdaptationPlan,
    ModelConfig,
    apply_plan,
    build,
    default_base_coeffs,
    head_parameter_count,
    swap_activations,
)
from .nn import GELU

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CONTRACT = 4


def _emit(obj, out: str | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=diag_json)
    if out:
        atomic_write_text(out, text + "\n")
    print(text)


def diag_json(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def model_from_checkpoint(path):
    header, _ = read_checkpoint(path)
    meta = header.get("meta", {})
    if "model" not in meta:
        raise ContractError(f"{path}: checkpoint carries no model config")
    model = build(from_dict(ModelConfig, meta["model"]))
    if meta.get("plan"):
        model = apply_plan(model, from_dict(AdaptationPlan, meta["plan"]))
    load_into(model, path)
    return model


def _probes(args, dim: int) -> np.ndarray:
    rng = np.random.default_rng(args.seed)
    return rng.normal(size=(args.probes, dim)) * args.scale


# -- subcommands ------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = cfgmod.load(args.config)
    out = Path(args.out) if args.out else output_dir(cfg)
    runner = Runner(cfg, out)
    report = runner.run()
    summary = {"output": str(out), "config_hash": report["config_hash"], "runs": [
        {"run_id": r["run_id"], "acc": r["final"]["eval_acc"], "trainable_params": r["trainable_params"]}
        for r in report["runs"]
    ]}
    if "fit" in report:
        summary["fit"] = {"sup_error": report["fit"]["sup_error"], "converged": report["fit"]["converged"]}
    _emit(summary)
    return 0


def cmd_fit(args) -> int:
    spec = FitSpec(
        target=args.target,
        interval=tuple(args.interval),
        grid_points=args.grid_points,
        degrees=tuple(args.degrees),
        loss=args.loss,
        seed=args.seed,
    )
    _emit(fit_rational(spec).to_dict(), args.out)
    return 0


def cmd_rate_study(args) -> int:
    study = rate_study(args.target, tuple(args.interval), args.degrees, loss=args.loss, grid_points=args.grid_points)
    if args.csv:
        atomic_write_text(args.csv, study.to_csv())
    _emit(study.to_dict(), args.out)
    return 0


def _model_for_diagnostics(args):
    if args.checkpoint:
        return model_from_checkpoint(args.checkpoint)
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    model = build(_seeded(cfg).model)
    if any(isinstance(m, GELU) for _, m in model.named_modules()) and args.rational:
        model = swap_activations(model, default_base_coeffs(cfg.model.m, cfg.model.n))
    return model


def cmd_lipschitz(args) -> int:
    model = _model_for_diagnostics(args)
    interval = tuple(args.interval) if args.interval else diag.preactivation_range(model, _probes(args, model.config.input_dim))
    _emit(diag.lipschitz_bound(model, interval, args.grid_points).to_dict(), args.out)
    return 0


def cmd_deviation(args) -> int:
    base = model_from_checkpoint(args.base)
    adapted = model_from_checkpoint(args.adapted)
    rep = diag.deviation_check(base, adapted, _probes(args, base.config.input_dim), args.grid_points)
    _emit(rep.to_dict(), args.out)
    return 0


def cmd_adaptability(args) -> int:
    before = model_from_checkpoint(args.before)
    after = model_from_checkpoint(args.after)
    rep = diag.adaptability_score(before, after, _probes(args, before.config.input_dim))
    _emit(rep.to_dict(), args.out)
    return 0


def cmd_compare(args) -> int:
    table = compare(args.runs)
    text = compare_csv(table)
    if args.out:
        atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return 0


def cmd_count_params(args) -> int:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    rows = []
    for cell_id, cell in cfgmod.expand(cfg):
        cell = _seeded(cell)
        model = build(cell.model)
        if any(isinstance(m, GELU) for _, m in model.named_modules()):
            model = swap_activations(model, default_base_coeffs(cell.model.m, cell.model.n), groups=cell.model.groups)
        adapted = apply_plan(model, cell.adaptation.plan)
        plan = cell.adaptation.plan
        row = {
            "run_id": cell_id,
            "mode": plan.mode,
            "trainable": count_trainable(adapted),
            "trainable_without_head": count_trainable(adapted, include_head=False),
            "head": head_parameter_count(adapted),
            "total": sum(p.size for p in adapted.parameters()),
        }
        if plan.mode in ("nora", "nora++"):
            row["per_group"] = per_group_count(cell.model.m, cell.model.n, plan.nora.rank, plan.nora.mode)
        rows.append(row)
    _emit(rows, args.out)
    return 0


# -- parser -------------------------------------------------------------------------


def _probe_args(p) -> None:
    p.add_argument("--probes", type=int, default=256)
    p.add_argument("--scale", type=float, default=1.0, help="std of the Gaussian probe inputs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-points", type=int, default=diag.GRID_POINTS)
    p.add_argument("--out", help="also write the JSON report here")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nora", description="Grouped rational activations with low-rank coefficient adapters.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute the stages of an experiment config")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default: <root>/<name>-<hash>)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("fit", help="fit a safe rational to a target function")
    p.add_argument("--target", default="gelu")
    p.add_argument("--interval", type=float, nargs=2, default=(-3.0, 3.0))
    p.add_argument("--degrees", type=int, nargs=2, default=(5, 4))
    p.add_argument("--loss", default="sup-norm")
    p.add_argument("--grid-points", type=int, default=201)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("rate-study", help="fit error against total degree")
    p.add_argument("--target", default="abs")
    p.add_argument("--interval", type=float, nargs=2, default=(-1.0, 1.0))
    p.add_argument("--degrees", type=int, nargs="+", default=list(range(2, 11)))
    p.add_argument("--loss", default="sup-norm")
    p.add_argument("--grid-points", type=int, default=401)
    p.add_argument("--csv", help="write the per-degree table as CSV")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rate_study)

    p = sub.add_parser("lipschitz", help="product Lipschitz bound of an MLP")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--config")
    p.add_argument("--rational", action="store_true", help="swap fixed GELU for its fitted rational first")
    p.add_argument("--interval", type=float, nargs=2, help="probe interval (default: pre-activation range of the probes)")
    _probe_args(p)
    p.set_defaults(func=cmd_lipschitz)

    p = sub.add_parser("deviation", help="check the activation-deviation bound between two checkpoints")
    p.add_argument("--base", required=True)
    p.add_argument("--adapted", required=True)
    _probe_args(p)
    p.set_defaults(func=cmd_deviation)

    p = sub.add_parser("adaptability", help="per-site adaptability scores between two checkpoints")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    _probe_args(p)
    p.set_defaults(func=cmd_adaptability)

    p = sub.add_parser("compare", help="delta table across completed run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", help="write the table as CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("count-params", help="trainable parameter counts for each cell of a config")
    p.add_argument("config", nargs="?")
    p.add_argument("--out")
    p.set_defaults(func=cmd_count_params)
    return ap


def _fail(code: int, kind: str, exc: Exception, **extra) -> int:
    payload = {"error": kind, "message": str(exc), **extra}
    print(json.dumps(payload, sort_keys=True, default=diag_json), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc, field=exc.field)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc, index=exc.index, info=exc.info)
    except (ContractError, DimensionError) as exc:
        return _fail(EXIT_CONTRACT, "contract", exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_CONFIG, "config", exc, field=None)


if __name__ == "__main__":
    sys.exit(main())
