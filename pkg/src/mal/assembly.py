"""Iterative model assembly over a zoo.

One step aligns a candidate to the current base, sweeps lambda, and takes the
merge if the merging-factor threshold clears ``min_lambda``. The search policy
is greedy. Candidates are ranked by three heuristics: same dataset as the base,
base at least as wide as the candidate everywhere, and higher candidate
accuracy. Each is tried once, in that order, until the budget runs out.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from mal.align import match
from mal.errors import ContractError, MalError
from mal.lmc import DEFAULT_EPSILON, DEFAULT_GRID, curve_report, make_grid, merging_threshold, naive_plan, sweep
from mal.merge import MergePlan, merge_convex, parse_mask
from mal.nn import ModelCheckpoint, loss_and_accuracy

log = logging.getLogger(__name__)

POLICY = "greedy-threshold-gated"
CSV_FIELDS = ("candidate_id", "engine", "objective", "lambda_star", "aulc", "aulc_ratio", "accepted", "chosen_lambda")


@dataclass(frozen=True)
class AssemblyConfig:
    engine: str = "auto"
    grid: int = DEFAULT_GRID
    epsilon: float = DEFAULT_EPSILON
    min_lambda: float = 0.1
    max_lambda: float = 0.5
    layer_mask: object = None
    seed: int = 0
    workers: int = 1

    def to_dict(self) -> dict:
        mask = self.layer_mask
        if mask is not None and not isinstance(mask, str):
            mask = [bool(m) for m in mask]
        return {"engine": self.engine, "grid": self.grid, "epsilon": self.epsilon, "min_lambda": self.min_lambda,
                "max_lambda": self.max_lambda, "layer_mask": mask, "seed": self.seed}


@dataclass(frozen=True)
class AssemblyState:
    current: ModelCheckpoint
    base_dataset_id: str
    base_id: str = "base"
    history: tuple = ()
    current_loss: float = float("nan")

    @classmethod
    def start(cls, model: ModelCheckpoint, eval_data, base_id="base") -> "AssemblyState":
        return cls(model, eval_data.name, base_id, (), loss_and_accuracy(model, eval_data)[0])


@dataclass
class StepReport:
    candidate_id: str
    status: str                  # accepted | rejected | failed
    reason: str = ""
    engine: str = ""
    objective: float = float("nan")
    iterations: int = 0
    lambda_star: float = float("nan")
    aulc: float = float("nan")
    aulc_ratio: float = float("nan")
    barrier: float = float("nan")
    chosen_lambda: float | None = None
    loss_before: float = float("nan")
    loss_after: float | None = None
    curve: object = None
    naive: object = None
    lmc: dict = field(default_factory=dict)

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"

    def to_dict(self) -> dict:
        d = {
            "candidate_id": self.candidate_id, "status": self.status, "reason": self.reason,
            "engine": self.engine, "objective": self.objective, "iterations": self.iterations,
            "lambda_star": self.lambda_star, "aulc": self.aulc, "aulc_ratio": self.aulc_ratio,
            "barrier": self.barrier, "accepted": self.accepted, "chosen_lambda": self.chosen_lambda,
            "loss_before": self.loss_before, "loss_after": self.loss_after,
        }
        if self.curve is not None:
            d["curve"] = {"lambda": self.curve.lambdas.tolist(), "loss": self.curve.losses.tolist(),
                          "accuracy": self.curve.accuracies.tolist()}
            d["naive_curve"] = {"lambda": self.naive.lambdas.tolist(), "loss": self.naive.losses.tolist(),
                                "accuracy": self.naive.accuracies.tolist()}
        return _nan_to_none(d)

    def csv_row(self) -> dict:
        return {"candidate_id": self.candidate_id, "engine": self.engine, "objective": _fmt(self.objective),
                "lambda_star": _fmt(self.lambda_star), "aulc": _fmt(self.aulc), "aulc_ratio": _fmt(self.aulc_ratio),
                "accepted": "true" if self.accepted else "false", "chosen_lambda": _fmt(self.chosen_lambda)}


def _fmt(x):
    if x is None:
        return ""
    return f"{x:.9g}"


def _nan_to_none(obj):
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def incompatibility(base: ModelCheckpoint, candidate: ModelCheckpoint) -> str:
    if candidate.arch.widths[0] != base.arch.widths[0]:
        return f"input dimension {candidate.arch.widths[0]} != base {base.arch.widths[0]}"
    if candidate.num_layers != base.num_layers:
        return f"depth {candidate.num_layers} != base {base.num_layers}"
    return ""


def assemble_step(state: AssemblyState, candidate: ModelCheckpoint, eval_data, config: AssemblyConfig,
                  candidate_id: str = "candidate") -> tuple[AssemblyState, StepReport]:
    """Try to merge one candidate into the current base; returns the new state and a report."""
    base = state.current
    report = StepReport(candidate_id, "rejected", loss_before=state.current_loss)
    reason = incompatibility(base, candidate)
    if reason:
        report.reason = reason
        return state, report
    try:
        mask = parse_mask(config.layer_mask, base.num_layers, base.arch.widths[-1] != candidate.arch.widths[-1])
        aligned = match(base, candidate, engine=config.engine, seed=config.seed)
        grid = make_grid(config.grid)
        curve = sweep(base, candidate, aligned.plan, mask, eval_data, grid, split="heldout", workers=config.workers)
        naive = sweep(base, candidate, naive_plan(base, candidate), mask, eval_data, grid, split="heldout",
                      workers=config.workers)
        lmc = curve_report(curve, naive, config.epsilon)
    except ContractError as exc:
        report.reason = str(exc)
        return state, report
    except MalError as exc:
        report.status, report.reason = "failed", str(exc)
        return state, report

    report.engine, report.objective, report.iterations = aligned.engine, aligned.objective, aligned.iterations
    report.lambda_star = lmc["lambda_star"]
    report.aulc, report.aulc_ratio, report.barrier = lmc["aulc"], lmc["aulc_ratio"], lmc["barrier"]
    report.curve, report.naive, report.lmc = curve, naive, lmc

    star = merging_threshold(curve, config.epsilon)
    if star < config.min_lambda:
        report.reason = f"lambda* {star:.3g} below min_lambda {config.min_lambda:.3g}"
        return state, report
    # largest grid point not beyond min(lambda*, max_lambda), so the loss bound holds there
    cap = min(star, config.max_lambda)
    k = int(np.searchsorted(curve.lambdas, cap, side="right")) - 1
    chosen = float(curve.lambdas[k])
    merged = merge_convex(base, candidate, aligned.plan, chosen, mask)
    report.status, report.chosen_lambda, report.loss_after = "accepted", chosen, float(curve.losses[k])
    record = MergePlan(state.base_id, candidate_id, aligned.plan, chosen, mask).to_dict()
    record.update(engine=aligned.engine, objective=aligned.objective, lambda_star=star,
                  aulc_ratio=lmc["aulc_ratio"], loss_after=report.loss_after)
    new_state = replace(state, current=merged, history=state.history + (record,),
                        current_loss=report.loss_after)
    return new_state, report


def rank_candidates(state: AssemblyState, entries) -> list:
    """Order zoo entries: same dataset, then base-at-least-as-wide, then accuracy, then id."""
    base = state.current.arch

    def key(e):
        same_ds = e.dataset_id == state.base_dataset_id
        wider = (len(e.arch.widths) == len(base.widths)
                 and all(a >= b for a, b in zip(base.hidden, e.arch.hidden)))
        acc = e.final_accuracy if e.final_accuracy == e.final_accuracy else -1.0
        return (not same_ds, not wider, -acc, e.id)

    return sorted(entries, key=key)


@dataclass
class AssemblyReport:
    base_id: str
    base_dataset_id: str
    config: dict
    steps: list = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    final_widths: list = field(default_factory=list)
    runtime_seconds: float = 0.0

    def to_dict(self, include_runtime: bool = True) -> dict:
        d = _nan_to_none({
            "policy": POLICY,
            "base_id": self.base_id,
            "base_dataset_id": self.base_dataset_id,
            "config": self.config,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "final_widths": list(self.final_widths),
            "accepted_count": sum(s.accepted for s in self.steps),
            "steps": [s.to_dict() for s in self.steps],
        })
        if include_runtime:
            # wall-clock time is the one field that differs between identical runs
            d["runtime_seconds"] = self.runtime_seconds
        return d

    def to_json(self, include_runtime: bool = True) -> str:
        return json.dumps(self.to_dict(include_runtime), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for s in self.steps:
            writer.writerow(s.csv_row())
        return buf.getvalue()


def assemble(state: AssemblyState, zoo, eval_data, budget: int, config: AssemblyConfig,
             exclude=()) -> tuple[AssemblyState, AssemblyReport]:
    """Run up to ``budget`` assembly steps over the ranked zoo entries."""
    t0 = time.perf_counter()
    report = AssemblyReport(state.base_id, state.base_dataset_id, config.to_dict(), initial_loss=state.current_loss)
    entries = [e for e in zoo.entries if e.status == "ok" and e.id not in set(exclude)]
    for entry in rank_candidates(state, entries)[:max(0, budget)]:
        candidate = zoo.load(entry)
        state, step = assemble_step(state, candidate, eval_data, config, candidate_id=entry.id)
        log.info("candidate %s: %s %s", entry.id, step.status, step.reason)
        report.steps.append(step)
    report.final_loss = state.current_loss
    report.final_widths = list(state.current.arch.widths)
    report.runtime_seconds = round(time.perf_counter() - t0, 3)
    return state, report


def report_schema() -> dict:
    """JSON schema (version 1) that every assembly report validates against."""
    from importlib.resources import files

    return json.loads(files("mal").joinpath("schemas/assembly_report.schema.json").read_text())
