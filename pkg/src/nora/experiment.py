"""Pipeline behind ``nora run``: fit, pretrain, adapt, diagnose, write artifacts.

Artifacts land in ``<root>/<name>-<config hash>``:

- ``metrics.csv``: one row per (run, epoch, split); columns in :data:`CSV_COLUMNS`
- ``metrics.jsonl``: the same rows as JSON lines
- ``summary.csv``: final row per run
- ``report.json``: fit report, per-run summaries, diagnostics, wall times
- ``checkpoints/*.ckpt`` when enabled

``seconds`` in the CSV files is blank unless ``output.record_time`` is set, so
that reruns of one config produce byte-identical metrics.  Wall times are
always in ``report.json``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import time
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .adapter import strip_deltas
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, dump, expand, to_dict
from .data import Dataset, atomic_write_text, load_task
from .errors import ContractError
from .fit import FitReport, fit_rational
from .models import (
    AdaptationPlan,
    MLPClassifier,
    apply_plan,
    build,
    default_base_coeffs,
    swap_activations,
)
from .nn import GELU
from .rational import RationalCoeffs
from .train import RunMetrics, TrainingDiverged, train

CSV_COLUMNS = ("run_id", "stage", "epoch", "split", "loss", "acc", "trainable_params", "seconds")
SUMMARY_COLUMNS = ("run_id", "stage", "acc", "loss", "trainable_params", "seconds", "dataset")
OUTPUT_ENV = "NORA_OUTPUT_ROOT"


def output_dir(cfg: ExperimentConfig) -> Path:
    root = cfg.output.root or os.environ.get(OUTPUT_ENV) or "runs"
    return Path(root) / f"{cfg.output.name}-{cfg.hash()}"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def metric_rows(m: RunMetrics, record_time: bool) -> list[dict]:
    """Flatten one training run into CSV rows."""
    seconds = m.seconds if record_time else None
    base = {"run_id": m.run_id, "stage": m.stage, "trainable_params": m.trainable_params, "seconds": seconds}
    rows = [dict(base, epoch=0, split="eval", loss=m.initial["eval_loss"], acc=m.initial["eval_acc"])]
    for r in m.rows:
        rows.append(dict(base, epoch=r["epoch"], split="train", loss=r["train_loss"], acc=r["train_acc"]))
        if r["eval_acc"] is not None:
            rows.append(dict(base, epoch=r["epoch"], split="eval", loss=r["eval_loss"], acc=r["eval_acc"]))
    return rows


def dataset_fingerprint(data: dict[str, Dataset]) -> str:
    return "-".join(data[k].fingerprint()[:8] for k in ("target_train", "target_test"))


def _seeded(cfg: ExperimentConfig) -> ExperimentConfig:
    """Route the top-level seed into every section that draws randomness."""
    s = cfg.seed
    return dataclasses.replace(
        cfg,
        model=dataclasses.replace(cfg.model, seed=s),
        pretrain=dataclasses.replace(cfg.pretrain, seed=s),
        train=dataclasses.replace(cfg.train, seed=s),
        adaptation=dataclasses.replace(cfg.adaptation, plan=dataclasses.replace(cfg.adaptation.plan, seed=s)),
    )


def _data(cfg: ExperimentConfig) -> dict[str, Dataset]:
    d = cfg.data
    kw = {"shift": d.shift} if d.task == "gaussian-shift" else {}
    seed = cfg.seed if d.seed is None else d.seed
    return load_task(d.task, cfg.model.input_dim, d.n_train, d.n_test, seed, path=d.path, **kw)


def _model_meta(model, plan: AdaptationPlan | None) -> dict:
    return {"model": to_dict(model.config), "plan": to_dict(plan) if plan is not None else None}


class Runner:
    def __init__(self, cfg: ExperimentConfig, out: Path | None = None, time_fn=time.perf_counter):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(out) if out is not None else output_dir(cfg)
        self.time_fn = time_fn
        self.rows: list[dict] = []
        self.summary: list[dict] = []
        self.report: dict = {"config_hash": cfg.hash(), "stages": list(cfg.stages), "runs": [], "pretrain": []}
        self._backbones: dict[str, tuple] = {}
        self.models: dict[str, tuple] = {}  # run_id -> (before, after)

    # -- stages --------------------------------------------------------------

    def fit(self) -> FitReport:
        rep = fit_rational(self.cfg.fit)
        atomic_write_text(self.out / "fit_report.json", rep.to_json())
        self.report["fit"] = rep.to_dict()
        return rep

    def _base_coeffs(self, cfg: ExperimentConfig) -> RationalCoeffs:
        if "fit" in self.report:
            return RationalCoeffs.from_dict(self.report["fit"]["coeffs"])
        return default_base_coeffs(cfg.model.m, cfg.model.n)

    def _backbone(self, cfg: ExperimentConfig):
        """Pretrained (or freshly built) model plus data, cached per distinct pretrain setup."""
        key_cfg = dataclasses.replace(cfg.model, groups=0, m=0, n=0)
        key = json.dumps([to_dict(key_cfg), to_dict(cfg.data), to_dict(cfg.pretrain), cfg.seed, "pretrain" in cfg.stages])
        if key in self._backbones:
            return self._backbones[key]
        data = _data(cfg)
        if "pretrain" in cfg.stages:
            model = build(dataclasses.replace(cfg.model, activation="fixed-gelu"))
            run_id = f"pretrain-seed{cfg.seed}"
            m = train(model, data["source_train"], cfg.pretrain, data["source_test"], run_id=run_id, stage="pretrain", time_fn=self.time_fn)
            self._record(m, data, "pretrain")
            self.report["pretrain"].append({"run_id": run_id, "final": m.final, "seconds": m.seconds})
            if cfg.output.checkpoints:
                save_checkpoint(self.out / "checkpoints" / f"{run_id}.ckpt", model, meta=_model_meta(model, None))
        else:
            model = build(cfg.model, self._base_coeffs(cfg) if cfg.model.activation == "grouped-rational" else None)
        self._backbones[key] = (model, data)
        return model, data

    def adapt(self) -> None:
        for cell_id, cell in expand(self.cfg):
            cell = _seeded(cell)
            cell.validate()
            backbone, data = self._backbone(cell)
            model = backbone
            if any(isinstance(mod, GELU) for _, mod in model.named_modules()):
                model = swap_activations(model, self._base_coeffs(cell), groups=cell.model.groups)
            plan = cell.adaptation.plan
            adapted = apply_plan(model, plan)
            try:
                m = train(adapted, data["target_train"], cell.train, data["target_test"], run_id=cell_id, stage="adapt", time_fn=self.time_fn)
            except TrainingDiverged as exc:
                # parameters were rolled back to the last finite step
                path = self.out / "checkpoints" / f"{_safe(cell_id)}-last-good.ckpt"
                save_checkpoint(path, adapted, meta=_model_meta(adapted, plan))
                exc.info["checkpoint"] = str(path)
                exc.info["run_id"] = cell_id
                raise
            self._record(m, data, "adapt")
            entry = {
                "run_id": cell_id,
                "plan": to_dict(plan),
                "final": m.final,
                "trainable_params": m.trainable_params,
                "seconds": m.seconds,
                "dataset": dataset_fingerprint(data),
                "config_hash": cell.hash(),
            }
            self.report["runs"].append(entry)
            self.models[cell_id] = (model, adapted)
            if self.cfg.output.checkpoints:
                save_checkpoint(self.out / "checkpoints" / f"{_safe(cell_id)}.ckpt", adapted, meta=_model_meta(adapted, plan))
            if "diagnostics" in self.cfg.stages:
                entry["diagnostics"] = self.diagnose(model, adapted, data["target_test"].x, cell)

    def diagnose(self, before, after, probe_pool: np.ndarray, cfg: ExperimentConfig) -> dict:
        d = cfg.diagnostics
        probes = probe_pool[: d.probes]
        out: dict = {}
        if d.adaptability:
            out["adaptability"] = diag.adaptability_score(before, after, probes).to_dict()
        if d.lipschitz or d.deviation:
            if not isinstance(after, MLPClassifier):
                out["notes"] = ["lipschitz/deviation analyses need arch 'mlp'; skipped"]
                return out
            if d.lipschitz:
                out["lipschitz"] = diag.lipschitz_bound(after, diag.preactivation_range(after, probes), d.grid_points).to_dict()
            if d.deviation:
                # the bound covers activation changes only, so compare against the
                # adapted model itself with its deltas removed (same trained head)
                ref = strip_deltas(after)
                out["deviation"] = diag.deviation_check(ref, after, probes, d.grid_points).to_dict()
        return out

    # -- bookkeeping -----------------------------------------------------------

    def _record(self, m: RunMetrics, data: dict, stage: str) -> None:
        rec = self.cfg.output.record_time
        self.rows.extend(metric_rows(m, rec))
        self.summary.append(
            {
                "run_id": m.run_id,
                "stage": stage,
                "acc": m.final["eval_acc"],
                "loss": m.final["eval_loss"],
                "trainable_params": m.trainable_params,
                "seconds": m.seconds if rec else None,
                "dataset": dataset_fingerprint(data),
            }
        )

    def write(self) -> None:
        atomic_write_text(self.out / "metrics.csv", _csv(self.rows, CSV_COLUMNS))
        atomic_write_text(self.out / "summary.csv", _csv(self.summary, SUMMARY_COLUMNS))
        atomic_write_text(
            self.out / "metrics.jsonl",
            "".join(json.dumps({c: r.get(c) for c in CSV_COLUMNS}) + "\n" for r in self.rows),
        )
        atomic_write_text(self.out / "report.json", json.dumps(self.report, indent=2, sort_keys=True, default=_jsonable))

    def run(self) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.out / "config.yaml", dump(self.cfg))
        start = self.time_fn()
        if "fit" in self.cfg.stages:
            self.fit()
        if "adapt" in self.cfg.stages:
            self.adapt()
        elif "pretrain" in self.cfg.stages:
            self._backbone(_seeded(self.cfg))
        self.report["seconds"] = self.time_fn() - start
        self.write()
        return self.report


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in name)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def run_experiment(cfg: ExperimentConfig, out=None) -> Runner:
    runner = Runner(cfg, out)
    runner.run()
    return runner


# -- compare -------------------------------------------------------------------------


def compare(run_dirs) -> list[dict]:
    """Aligned table of final accuracy, trainable params and wall time across runs.

    Deltas are taken against the matching ``run_id`` of the first directory,
    or against its first run when no match exists.  Refuses runs on different
    target datasets.
    """
    run_dirs = [Path(p) for p in run_dirs]
    if len(run_dirs) < 2:
        raise ContractError("compare needs at least two run directories")
    reports = []
    for d in run_dirs:
        path = d / "report.json"
        if not path.exists():
            raise ContractError(f"{d}: no report.json; is this a completed run?")
        rep = json.loads(path.read_text())
        if not rep.get("runs"):
            raise ContractError(f"{d}: report has no adaptation runs")
        reports.append(rep)
    prints = {r["dataset"] for rep in reports for r in rep["runs"]}
    if len(prints) > 1:
        raise ContractError(f"runs use different target datasets (fingerprints {sorted(prints)}); refusing to compare")
    first = {r["run_id"]: r for r in reports[0]["runs"]}
    default = reports[0]["runs"][0]
    table = []
    for d, rep in zip(run_dirs, reports):
        for r in rep["runs"]:
            ref = first.get(r["run_id"], default)
            acc, ref_acc = r["final"]["eval_acc"], ref["final"]["eval_acc"]
            table.append(
                {
                    "dir": d.name,
                    "run_id": r["run_id"],
                    "acc": acc,
                    "trainable_params": r["trainable_params"],
                    "seconds": r["seconds"],
                    "delta_acc": acc - ref_acc,
                    "delta_params": r["trainable_params"] - ref["trainable_params"],
                    "delta_seconds": r["seconds"] - ref["seconds"],
                }
            )
    return table


COMPARE_COLUMNS = ("dir", "run_id", "acc", "trainable_params", "seconds", "delta_acc", "delta_params", "delta_seconds")


def compare_csv(table: list[dict]) -> str:
    return _csv(table, COMPARE_COLUMNS)
