"""Layer-selective convex combination of two aligned checkpoints."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from mal.align import InterfacePlan, lifted_params
from mal.errors import ContractError
from mal.nn import ArchSpec, ModelCheckpoint


@dataclass(frozen=True)
class MergePlan:
    base_id: str
    target_id: str
    plan: InterfacePlan
    lam: float
    layer_mask: tuple[bool, ...]

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lambda must lie in [0, 1], got {self.lam}")
        if len(self.layer_mask) != self.plan.num_layers:
            raise ContractError(f"mask has {len(self.layer_mask)} entries for {self.plan.num_layers} layers")
        if self.plan.widths_a[-1] != self.plan.widths_b[-1] and self.layer_mask[-1]:
            raise ContractError("final layer must stay unmerged when class counts differ")

    def to_dict(self) -> dict:
        return {"base_id": self.base_id, "target_id": self.target_id, "lambda": self.lam,
                "layer_mask": [bool(m) for m in self.layer_mask], "plan": self.plan.to_dict()}


def parse_mask(spec, num_layers: int, class_mismatch: bool = False) -> tuple[bool, ...]:
    """Normalize a layer mask.

    Accepts ``None``/``"full"`` (every layer), ``"shallow:k"`` (first k layers),
    a ``"1,1,0"`` string or a sequence of bools. Class-count mismatch forces the
    final layer off when the mask was not given explicitly.
    """
    if spec is None or spec == "full":
        mask = [True] * num_layers
        if class_mismatch:
            mask[-1] = False
    elif isinstance(spec, str) and spec.startswith("shallow:"):
        k = int(spec.split(":", 1)[1])
        if not 0 <= k <= num_layers:
            raise ContractError(f"shallow mask depth {k} outside [0, {num_layers}]")
        mask = [l < k for l in range(num_layers)]
    elif isinstance(spec, str):
        try:
            mask = [bool(int(tok)) for tok in spec.split(",")]
        except ValueError:
            raise ContractError(f"cannot parse layer mask {spec!r}") from None
    else:
        mask = [bool(m) for m in spec]
    if len(mask) != num_layers:
        raise ContractError(f"mask has {len(mask)} entries for {num_layers} layers")
    return tuple(mask)


def _check(base, target, plan, lam, mask):
    if tuple(base.arch.widths) != tuple(plan.widths_a) or tuple(target.arch.widths) != tuple(plan.widths_b):
        raise ContractError("plan widths do not match the base/target architectures")
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    L = base.num_layers
    mask = parse_mask(mask, L, base.arch.widths[-1] != target.arch.widths[-1])
    if base.arch.widths[-1] != target.arch.widths[-1] and mask[-1]:
        raise ContractError(f"class counts differ ({base.arch.widths[-1]} vs {target.arch.widths[-1]}); "
                            "the final layer must be masked off")
    return mask


def merged_parameters(base, target, plan: InterfacePlan, lam: float, layer_mask=None):
    """Float64 merged weights and biases plus the merged widths.

    Merged layers are ``Q W^A Q^T + lam * (P W^B P^T - Q W^A Q^T)``; unmerged layers
    keep the lifted base. The output interface keeps the base class count.
    """
    mask = _check(base, target, plan, lam, layer_mask)
    wa, ba = lifted_params(base, plan.Q)
    wb, bb = lifted_params(target, plan.P)
    ws, bs = [], []
    for l in range(len(wa)):
        if mask[l]:
            ws.append(wa[l] + lam * (wb[l] - wa[l]))
            bs.append(ba[l] + lam * (bb[l] - ba[l]))
        else:
            ws.append(wa[l])
            bs.append(ba[l])
    widths = list(plan.merged_widths)
    classes = base.arch.widths[-1]
    if widths[-1] != classes:
        # canonical output injection: the base's logits occupy the first rows
        ws[-1] = ws[-1][:classes]
        bs[-1] = bs[-1][:classes]
        widths[-1] = classes
    return ws, bs, tuple(widths)


def merge_convex(base: ModelCheckpoint, target: ModelCheckpoint, plan: InterfacePlan, lam: float,
                 layer_mask=None) -> ModelCheckpoint:
    ws, bs, widths = merged_parameters(base, target, plan, lam, layer_mask)
    return ModelCheckpoint(ArchSpec(widths), tuple(ws), tuple(bs), replace(base.meta))
