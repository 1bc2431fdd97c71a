"""Batch study harness: run fitting configurations, tabulate DOFs vs error.

A study config is a JSON document with a shared level set, optional defaults,
and a list of runs.  Each run either fits a mesh at its generated order or,
when a ``plan`` block is present, drives the full order-adaptive loop.  Runs
that raise are recorded as failed rows and the study continues.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field as dfield

from .adapt import AdaptivityPlan, compute_face_errors, run_rp_adaptivity
from .levelset import make_levelset
from .mesh_io import generate_cartesian, read_mesh
from .tmop import (FitConfig, QualityMetric, SolverControls, TargetSpec,
                   mark_interface_faces, solve_r_adaptivity)

CSV_COLUMNS = ["label", "status", "dofs", "e_F", "sigma_max", "orders",
               "wall_time"]


@dataclass
class StudyRecord:
    label: str
    status: str
    dofs: int | None = None
    total_error: float | None = None
    sigma_max: float | None = None
    histogram: dict[int, int] = dfield(default_factory=dict)
    wall_time: float | None = None

    def row(self, include_timing: bool = True) -> list[str]:
        def num(v, fmt="%.17g"):
            return "" if v is None else fmt % v
        orders = ";".join(f"{p}:{c}" for p, c in sorted(self.histogram.items()))
        wall = num(self.wall_time, "%.3f") if include_timing else ""
        return [self.label, self.status, num(self.dofs, "%d"),
                num(self.total_error), num(self.sigma_max), orders, wall]


def _metric_from(spec, gamma):
    names = {2: "mu2", 77: "mu77", 80: "mu80",
             "2": "mu2", "77": "mu77", "80": "mu80"}
    return QualityMetric(names.get(spec, spec), gamma=gamma)


def _plan_from(cfg: dict) -> AdaptivityPlan:
    kw = dict(cfg)
    refine = kw.pop("refine", None)
    if refine is not None:
        kind, _, val = str(refine).partition(":")
        kw["refine_kind"] = {"abs": "absolute", "rel": "relative"}[kind]
        kw["refine_threshold"] = float(val)
    deref = kw.pop("deref", None)
    if deref is not None and deref != "none":
        kind, _, val = str(deref).partition(":")
        kw["deref_kind"] = {"b1": "ref", "b2": "change", "size": "size"}[kind]
        kw["deref_threshold"] = float(val)
    return AdaptivityPlan(**kw)


def _build_mesh(run: dict):
    if "mesh" in run:
        return read_mesh(run["mesh"])
    nx, ny, p = run["generate"]
    return generate_cartesian(nx, ny, p,
                              box=tuple(run.get("box", (0.0, 0.0, 1.0, 1.0))),
                              split_triangles=bool(run.get("split", False)))


def run_one(run: dict, field) -> StudyRecord:
    """Execute a single study run and measure its final state."""
    label = run.get("label", "run")
    t0 = time.perf_counter()
    mesh = _build_mesh(run)
    metric = _metric_from(run.get("metric", 2), run.get("metric_gamma", 0.5))
    controls = SolverControls(
        max_iterations=int(run.get("max_outer", 200)),
        fit_tol=float(run.get("fit_tol", 1e-8)))
    fit = FitConfig(metric=metric, target=TargetSpec(run.get("target", "ideal")),
                    fit_weight=float(run.get("fit_weight", 1.0)),
                    controls=controls, boundary=run.get("boundary", "slide"))
    boundary_fit = bool(run.get("boundary_fit", False))
    if "plan" in run:
        plan_cfg = dict(run["plan"])
        plan_cfg.setdefault("fit_tol", controls.fit_tol)
        result = run_rp_adaptivity(mesh, field, fit, _plan_from(plan_cfg),
                                   boundary_fit=boundary_fit)
        mesh = result.mesh
        status = next((r.solver_status for r in reversed(result.records)
                       if r.solver_status), "ok")
    else:
        mark_interface_faces(mesh, field, boundary_mode=boundary_fit)
        _, report = solve_r_adaptivity(fit.problem(mesh, field))
        status = report.status
    total_error = sigma_max = None
    if field is not None and mesh.marked_faces:
        errors = compute_face_errors(mesh, field)
        total_error = errors.total_error
        sigma_max = errors.node_sigma_max
    return StudyRecord(label=label, status=status,
                       dofs=mesh.num_position_dofs,
                       total_error=total_error,
                       sigma_max=sigma_max,
                       histogram=mesh.order_histogram(),
                       wall_time=time.perf_counter() - t0)


def expand_runs(config: dict) -> list[dict]:
    """Flatten sweep blocks and merge per-run settings over the defaults."""
    defaults = config.get("defaults", {})
    out = []
    for entry in config.get("runs", []):
        if "sweep" in entry:
            sw = entry["sweep"]
            base = {k: v for k, v in entry.items() if k != "sweep"}
            prefix = base.pop("label", None)
            for p in sw.get("orders", [1]):
                for n in sw.get("sizes", [4]):
                    run = {**defaults, **base, "generate": [n, n, p]}
                    run["label"] = f"{prefix}_p{p}_n{n}" if prefix \
                        else f"p{p}_n{n}"
                    out.append(run)
        else:
            out.append({**defaults, **entry})
    for i, run in enumerate(out):
        run.setdefault("label", f"run{i}")
    return out


def run_study(config, out_path=None, include_timing: bool = True):
    """Run every configured case and return (records, csv_text).

    ``config`` is a dict or a path to a JSON file.  A run that raises is
    recorded with status ``failed:<ExceptionName>`` and empty measurements.
    With ``include_timing`` off the wall-time column is left blank so that
    repeated runs produce byte-identical output.
    """
    if not isinstance(config, dict):
        with open(config, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    field = make_levelset(config["levelset"]) if "levelset" in config else None
    records = []
    for run in expand_runs(config):
        try:
            records.append(run_one(run, field))
        except Exception as exc:
            records.append(StudyRecord(label=run.get("label", "run"),
                                       status=f"failed:{type(exc).__name__}"))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        writer.writerow(rec.row(include_timing))
    text = buf.getvalue()
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return records, text
