"""Linear mode connectivity along the merge path.

A sweep evaluates the merged model at each lambda of a grid. From the curve we
compute the loss barrier, the area under the loss curve (AULC), its ratio to the
unaligned ("naive") merge, and the merging-factor threshold lambda*.
"""
from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from mal.align import InterfacePlan
from mal.errors import ContractError, MalError, NumericError
from mal.merge import merge_convex, parse_mask
from mal.nn import loss_and_accuracy

DEFAULT_GRID = 21
DEFAULT_EPSILON = 0.1


@dataclass(frozen=True, eq=False)
class BarrierCurve:
    lambdas: np.ndarray
    losses: np.ndarray
    accuracies: np.ndarray
    loss_A: float
    loss_B: float
    dataset_id: str = ""
    split: str = ""

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=np.float64)
        check_grid(lam)
        for name in ("losses", "accuracies"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != lam.shape:
                raise ContractError(f"{name} has {arr.shape[0]} samples for {lam.shape[0]} lambdas")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "lambdas", lam)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("lambda,loss,accuracy\n")
        for row in zip(self.lambdas, self.losses, self.accuracies):
            buf.write(",".join(f"{v:.9g}" for v in row) + "\n")
        return buf.getvalue()


def check_grid(lambdas):
    lam = np.asarray(lambdas, dtype=np.float64)
    if lam.ndim != 1 or len(lam) < 2:
        raise ContractError("lambda grid needs at least the two endpoints")
    if lam[0] != 0.0 or lam[-1] != 1.0:
        raise ContractError(f"lambda grid must start at 0 and end at 1, got {lam[0]} .. {lam[-1]}")
    if np.any(np.diff(lam) <= 0):
        raise ContractError("lambda grid must be strictly ascending")


def make_grid(grid=DEFAULT_GRID) -> np.ndarray:
    """``grid`` uniform points on [0, 1] if an int, else the given values (validated)."""
    if isinstance(grid, (int, np.integer)):
        if grid < 2:
            raise ContractError(f"grid size must be >= 2, got {grid}")
        lam = np.linspace(0.0, 1.0, int(grid))
    else:
        lam = np.asarray(grid, dtype=np.float64)
    check_grid(lam)
    return lam


def sweep(base, target, plan: InterfacePlan, layer_mask, data, grid=DEFAULT_GRID, split="",
          workers: int = 1) -> BarrierCurve:
    """Loss and accuracy of ``merge_convex(base, target, plan, lam, layer_mask)`` over the grid."""
    lambdas = make_grid(grid)
    mask = parse_mask(layer_mask, base.num_layers, base.arch.widths[-1] != target.arch.widths[-1])

    def evaluate(lam):
        try:
            return loss_and_accuracy(merge_convex(base, target, plan, float(lam), mask), data)
        except MalError as exc:
            raise type(exc)(f"at lambda={lam:.9g}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate, lambdas))
    else:
        results = [evaluate(lam) for lam in lambdas]
    losses = np.array([r[0] for r in results])
    accs = np.array([r[1] for r in results])
    if not np.isfinite(losses).all():
        raise NumericError("non-finite loss on the merge path")
    loss_a = loss_and_accuracy(base, data)[0]
    if target.arch.widths[-1] == data.num_classes and target.arch.widths[0] == data.d_in:
        loss_b = loss_and_accuracy(target, data)[0]
    else:
        loss_b = float(losses[-1])
    return BarrierCurve(lambdas, losses, accs, loss_a, loss_b, data.name, split)


def naive_plan(base, target) -> InterfacePlan:
    """Index-order alignment with zero-padding: the no-matching baseline."""
    return InterfacePlan.canonical(base.arch.widths, target.arch.widths)


def loss_barrier(curve: BarrierCurve) -> float:
    """Highest loss on the path minus the mean endpoint loss. Can be negative."""
    return float(np.max(curve.losses) - 0.5 * (curve.loss_A + curve.loss_B))


def loss_barrier_clamped(curve: BarrierCurve) -> float:
    return max(0.0, loss_barrier(curve))


def aulc(curve: BarrierCurve) -> float:
    """Trapezoidal area under loss(lambda) on [0, 1]."""
    return float(np.trapezoid(curve.losses, curve.lambdas))


def aulc_ratio(curve: BarrierCurve, naive: BarrierCurve) -> float:
    if not np.array_equal(curve.lambdas, naive.lambdas):
        raise ContractError("aulc_ratio needs both curves on the same lambda grid")
    denom = aulc(naive)
    if denom == 0.0:
        raise NumericError("naive AULC is zero; ratio undefined")
    return aulc(curve) / denom


def merging_threshold(curve: BarrierCurve, epsilon_rel: float = DEFAULT_EPSILON) -> float:
    """Largest grid lambda up to which every loss stays within (1 + eps) of the lambda=0 loss."""
    if not epsilon_rel > 0:
        raise ContractError(f"epsilon_rel must be positive, got {epsilon_rel}")
    limit = curve.losses[0] * (1.0 + epsilon_rel)
    star = 0.0
    for lam, loss in zip(curve.lambdas, curve.losses):
        if loss > limit:
            break
        star = float(lam)
    return star


def curve_report(curve: BarrierCurve, naive: BarrierCurve | None = None,
                 epsilon_rel: float = DEFAULT_EPSILON) -> dict:
    """Summary numbers for one merge path; ratio fields are null without a naive curve."""
    ratio = diff = None
    if naive is not None:
        ratio = aulc_ratio(curve, naive)
        diff = aulc(curve) - aulc(naive)
    return {
        "dataset_id": curve.dataset_id,
        "split": curve.split,
        "grid_size": len(curve.lambdas),
        "epsilon_rel": epsilon_rel,
        "loss_A": curve.loss_A,
        "loss_B": curve.loss_B,
        "barrier": loss_barrier(curve),
        "barrier_clamped": loss_barrier_clamped(curve),
        "aulc": aulc(curve),
        "naive_aulc": aulc(naive) if naive is not None else None,
        "naive_barrier": loss_barrier(naive) if naive is not None else None,
        "aulc_ratio": ratio,
        "aulc_diff": diff,
        "lambda_star": merging_threshold(curve, epsilon_rel),
    }
