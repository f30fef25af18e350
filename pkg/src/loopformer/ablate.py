"""Ablation suites: matched-budget grids of desk-scale trainings emitting a
machine-readable results table (JSON + CSV) and a summary figure.

Suite files are shipped as package data so budgets and settings stay fixed
across machines; a wall-clock budget marks unfinished cells instead of
blocking the table.
"""

from __future__ import annotations

import copy
import csv
import json
import os
import time
from importlib import resources

import numpy as np

from loopformer.config import RunConfig
from loopformer.tensor import NumericError
from loopformer.train import read_metrics, run_training

SUITE_NAMES = ("loops-vs-vanilla", "truncation-sweep", "conv-position",
               "nonlinearity", "optimizer")


def deep_merge(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_suite(name_or_path: str) -> dict:
    if os.path.exists(name_or_path):
        with open(name_or_path) as fh:
            return json.load(fh)
    if name_or_path in SUITE_NAMES:
        ref = resources.files("loopformer").joinpath(f"suites/{name_or_path}.json")
        return json.loads(ref.read_text())
    raise ValueError(f"unknown suite {name_or_path!r} (want one of {SUITE_NAMES} or a path)")


def _flops_factor(model_cfg: dict, base_cfg: dict) -> float:
    def cost(m):
        return m.get("depth", 4) * m.get("loops", 8) * m.get("hidden", 512) ** 2
    return cost(model_cfg) / cost(base_cfg.get("model", {}))


def steps_to_loss(records: list[dict], threshold: float) -> int | None:
    for r in records:
        if r["loss"] <= threshold:
            return r["step"]
    return None


def run_suite(suite: dict, out_dir: str, budget_seconds: float | None = None,
              render_figures: bool = True) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    budget = suite.get("budget_seconds", 0) if budget_seconds is None else budget_seconds
    seeds = suite.get("seeds", [0, 1, 2])
    threshold = suite.get("loss_threshold")
    t0 = time.time()

    rows = []
    curves = {}
    for cell in suite["cells"]:
        label = cell["label"]
        merged = deep_merge(suite["base"], cell.get("overrides", {}))
        row = {"label": label, "status": "done", "seeds": [], "pass1": [],
               "cell_accuracy": [], "final_loss": [], "steps_to_threshold": []}
        for seed in seeds:
            if budget and time.time() - t0 > budget:
                row["status"] = "partial" if row["seeds"] else "skipped"
                break
            cfg = RunConfig.from_dict(deep_merge(merged, {"seed": seed}))
            run_dir = os.path.join(out_dir, f"{_slug(label)}_s{seed}")
            try:
                summary = run_training(cfg, run_dir, render_figures=False)
            except NumericError:
                # a cell that diverges to NaN still fills its table slot: zero
                # accuracy, flagged status
                row["status"] = "diverged"
                row["seeds"].append(seed)
                row["pass1"].append(0.0)
                row["cell_accuracy"].append(0.0)
                row["final_loss"].append(float("inf"))
                if threshold is not None:
                    row["steps_to_threshold"].append(None)
                continue
            records = read_metrics(run_dir)
            row["seeds"].append(seed)
            row["pass1"].append(summary["eval"]["pass@1"])
            row["cell_accuracy"].append(summary["eval"]["cell_accuracy"])
            row["final_loss"].append(summary["final_loss"])
            if threshold is not None:
                row["steps_to_threshold"].append(steps_to_loss(records, threshold))
            row["parameter_count"] = summary["parameter_count"]
            if seed == seeds[0]:
                curves[label] = [(r["step"], r["loss"]) for r in records]
        for metric in ("pass1", "cell_accuracy", "final_loss"):
            values = row[metric]
            row[f"{metric}_mean"] = float(np.mean(values)) if values else None
            row[f"{metric}_std"] = float(np.std(values)) if values else None
        row["flops_factor"] = _flops_factor(merged.get("model", {}), suite["base"])
        rows.append(row)

    results = {
        "suite": suite["suite"],
        "description": suite.get("description", ""),
        "seeds": seeds,
        "loss_threshold": threshold,
        "rows": rows,
        "elapsed_seconds": round(time.time() - t0, 2),
    }
    write_results(results, out_dir, curves, render_figures=render_figures)
    return results


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() else "-" for c in label.lower()).strip("-")


def write_results(results: dict, out_dir: str, curves: dict | None = None,
                  render_figures: bool = True) -> None:
    with open(os.path.join(out_dir, "results.json"), "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    columns = ["label", "status", "seeds", "pass1_per_seed", "pass1_mean", "pass1_std",
               "cell_accuracy_mean", "final_loss_mean", "parameter_count", "flops_factor"]
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in results["rows"]:
            writer.writerow([
                row["label"], row["status"], ";".join(map(str, row["seeds"])),
                ";".join(repr(v) for v in row["pass1"]),
                _fmt(row.get("pass1_mean")), _fmt(row.get("pass1_std")),
                _fmt(row.get("cell_accuracy_mean")), _fmt(row.get("final_loss_mean")),
                row.get("parameter_count", ""), _fmt(row.get("flops_factor")),
            ])
    if render_figures:
        from loopformer import report
        done_rows = [r for r in results["rows"] if r.get("pass1_mean") is not None]
        if done_rows:
            report.render_suite(
                [{"label": r["label"], "status": "done", "pass@1": r["pass1_mean"]}
                 for r in done_rows],
                "pass@1", os.path.join(out_dir, "results.png"),
                title=results["suite"])
        if curves:
            from loopformer.report import render_loss_curves
            render_loss_curves(curves, os.path.join(out_dir, "loss_curves.png"),
                               title=results["suite"])


def _fmt(value) -> str:
    return "" if value is None else repr(value)


def read_results_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            rows.append({
                "label": raw["label"],
                "status": raw["status"],
                "seeds": [int(s) for s in raw["seeds"].split(";") if s],
                "pass1": [float(v) for v in raw["pass1_per_seed"].split(";") if v],
                "pass1_mean": float(raw["pass1_mean"]) if raw["pass1_mean"] else None,
                "pass1_std": float(raw["pass1_std"]) if raw["pass1_std"] else None,
                "cell_accuracy_mean": (float(raw["cell_accuracy_mean"])
                                       if raw["cell_accuracy_mean"] else None),
                "final_loss_mean": (float(raw["final_loss_mean"])
                                    if raw["final_loss_mean"] else None),
                "parameter_count": (int(raw["parameter_count"])
                                    if raw["parameter_count"] else None),
                "flops_factor": float(raw["flops_factor"]) if raw["flops_factor"] else None,
            })
    return rows
