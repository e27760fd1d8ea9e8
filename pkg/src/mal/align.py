"""Generalized permutations and weight matching between two MLPs.

An interface is a layer boundary ``l = 0..L`` (0 = inputs, L = logits). Model A
has width ``a_l`` there and model B has ``b_l``; both are embedded into the
merged width ``d_l = max(a_l, b_l)`` by injections ``Q_l`` (for A) and ``P_l``
(for B). Lifting a weight is ``Q_l W_l Q_{l-1}^T``; rows and columns outside the
injection image stay zero, which keeps a ReLU network's function unchanged.

Matching maximizes the summed Frobenius inner product of the lifted weights
and biases. It goes one hidden interface at a time: with every other injection
held fixed, the objective is linear in the free injection, so each step is an
exact LAP.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from mal import rng
from mal.errors import ContractError, ShapeError
from mal.lap import assignment_value, solve_lap_max
from mal.nn import ArchSpec, ModelCheckpoint

log = logging.getLogger(__name__)

ENGINES = ("square", "compatible", "bidirectional")
DEFAULT_TOL = 1e-9
DEFAULT_MAX_PASSES = 100
DEFAULT_MAX_ROUNDS = 50


@dataclass(frozen=True, eq=False)
class Injection:
    """Index map ``[n] -> [m]``; as a matrix, ``P[map[j], j] = 1``."""

    target_dim: int
    map: np.ndarray

    def __post_init__(self):
        m = np.array(self.map, dtype=np.int64)
        if m.ndim != 1 or len(m) > self.target_dim:
            raise ShapeError(f"injection of {m.shape} into {self.target_dim} is impossible")
        if len(m) and (m.min() < 0 or m.max() >= self.target_dim or len(np.unique(m)) != len(m)):
            raise ShapeError(f"map is not injective into [0, {self.target_dim})")
        m.setflags(write=False)
        object.__setattr__(self, "map", m)

    @property
    def source_dim(self) -> int:
        return len(self.map)

    @classmethod
    def canonical(cls, n: int, m: int | None = None) -> "Injection":
        """``j -> j`` from ``[n]`` into ``[m]`` (identity when ``m == n``)."""
        return cls(n if m is None else m, np.arange(n))

    @property
    def is_identity(self) -> bool:
        return self.source_dim == self.target_dim and np.array_equal(self.map, np.arange(self.target_dim))

    @property
    def is_canonical(self) -> bool:
        return np.array_equal(self.map, np.arange(self.source_dim))

    def to_matrix(self) -> np.ndarray:
        mat = np.zeros((self.target_dim, self.source_dim))
        mat[self.map, np.arange(self.source_dim)] = 1.0
        return mat

    def compose(self, inner: "Injection") -> "Injection":
        """``self ∘ inner``: apply ``inner`` first."""
        if inner.target_dim != self.source_dim:
            raise ShapeError(f"cannot compose: inner lands in {inner.target_dim}, outer expects {self.source_dim}")
        return Injection(self.target_dim, self.map[inner.map])

    def inverse(self) -> "Injection":
        if self.source_dim != self.target_dim:
            raise ShapeError("only square permutations have an inverse")
        inv = np.empty_like(self.map)
        inv[self.map] = np.arange(self.source_dim)
        return Injection(self.target_dim, inv)

    def scatter(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.source_dim,):
            raise ShapeError(f"vector of length {vec.shape} does not match injection source {self.source_dim}")
        out = np.zeros(self.target_dim)
        out[self.map] = vec
        return out

    def __eq__(self, other):
        return (isinstance(other, Injection) and self.target_dim == other.target_dim
                and np.array_equal(self.map, other.map))

    def __hash__(self):
        return hash((self.target_dim, self.map.tobytes()))

    def __repr__(self):
        return f"Injection({self.source_dim}->{self.target_dim}, {self.map.tolist()})"


def random_permutation(n: int, g: np.random.Generator) -> Injection:
    return Injection(n, g.permutation(n))


def apply_injection_pair(W, p_out: Injection, p_in: Injection) -> np.ndarray:
    """``p_out · W · p_in^T`` by scattering ``W`` into a zero matrix."""
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (p_out.source_dim, p_in.source_dim):
        raise ShapeError(f"weight {W.shape} does not match injections {p_out.source_dim}x{p_in.source_dim}")
    out = np.zeros((p_out.target_dim, p_in.target_dim))
    out[np.ix_(p_out.map, p_in.map)] = W
    return out


def lifted_params(model: ModelCheckpoint, injections) -> tuple[list, list]:
    """Float64 weights and biases of ``model`` lifted by per-interface injections."""
    if len(injections) != model.num_layers + 1:
        raise ShapeError(f"need {model.num_layers + 1} injections, got {len(injections)}")
    ws = [apply_injection_pair(w, injections[l + 1], injections[l]) for l, w in enumerate(model.weights)]
    bs = [injections[l + 1].scatter(b) for l, b in enumerate(model.biases)]
    return ws, bs


def lift_model(model: ModelCheckpoint, injections) -> ModelCheckpoint:
    """Embed ``model`` into wider hidden layers; the network function is unchanged."""
    L = model.num_layers
    for l in (0, L):
        if not injections[l].is_identity:
            raise ContractError(f"boundary interface {l} must use the identity injection")
    ws, bs = lifted_params(model, injections)
    arch = ArchSpec(tuple(inj.target_dim for inj in injections))
    return ModelCheckpoint(arch, tuple(ws), tuple(bs), model.meta)


@dataclass(frozen=True, eq=False)
class InterfacePlan:
    widths_a: tuple[int, ...]
    widths_b: tuple[int, ...]
    Q: tuple[Injection, ...]
    P: tuple[Injection, ...]

    def __post_init__(self):
        if len(self.widths_a) != len(self.widths_b):
            raise ContractError(f"depth mismatch: {len(self.widths_a) - 1} vs {len(self.widths_b) - 1} layers")
        if self.widths_a[0] != self.widths_b[0]:
            raise ContractError(f"input dims differ: {self.widths_a[0]} vs {self.widths_b[0]}")
        n = len(self.widths_a)
        if len(self.Q) != n or len(self.P) != n:
            raise ShapeError(f"plan needs {n} injections per side")
        for l in range(n):
            d = max(self.widths_a[l], self.widths_b[l])
            q, p = self.Q[l], self.P[l]
            if (q.source_dim, q.target_dim) != (self.widths_a[l], d) or (p.source_dim, p.target_dim) != (self.widths_b[l], d):
                raise ShapeError(f"interface {l}: injections do not map {self.widths_a[l]}/{self.widths_b[l]} into {d}")
            if l in (0, n - 1) and not (q.is_canonical and p.is_canonical):
                raise ContractError(f"boundary interface {l} must keep canonical injections")

    @classmethod
    def canonical(cls, widths_a, widths_b) -> "InterfacePlan":
        """Index-aligned plan with zero-padding and no reordering (naive merge)."""
        wa, wb = tuple(widths_a), tuple(widths_b)
        if len(wa) != len(wb):
            raise ContractError(f"depth mismatch: {len(wa) - 1} vs {len(wb) - 1} layers")
        d = [max(x, y) for x, y in zip(wa, wb)]
        return cls(wa, wb, tuple(Injection.canonical(x, m) for x, m in zip(wa, d)),
                   tuple(Injection.canonical(y, m) for y, m in zip(wb, d)))

    @property
    def merged_widths(self) -> tuple[int, ...]:
        return tuple(q.target_dim for q in self.Q)

    @property
    def num_layers(self) -> int:
        return len(self.widths_a) - 1

    def is_boundary(self, l: int) -> bool:
        return l in (0, self.num_layers)

    def with_injection(self, side: str, l: int, inj: Injection) -> "InterfacePlan":
        seq = list(self.P if side == "P" else self.Q)
        seq[l] = inj
        return replace(self, **{side: tuple(seq)})

    def swapped(self) -> "InterfacePlan":
        return InterfacePlan(self.widths_b, self.widths_a, self.P, self.Q)

    def to_dict(self) -> dict:
        return {
            "widths_a": list(self.widths_a),
            "widths_b": list(self.widths_b),
            "merged_widths": list(self.merged_widths),
            "Q": [q.map.tolist() for q in self.Q],
            "P": [p.map.tolist() for p in self.P],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InterfacePlan":
        merged = d.get("merged_widths") or [max(x, y) for x, y in zip(d["widths_a"], d["widths_b"])]
        return cls(tuple(d["widths_a"]), tuple(d["widths_b"]),
                   tuple(Injection(m, q) for m, q in zip(merged, d["Q"])),
                   tuple(Injection(m, p) for m, p in zip(merged, d["P"])))


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    plan: InterfacePlan
    objective: float
    iterations: int
    converged: bool
    engine: str
    seed: int
    # objective after every LAP solve, starting with the initial plan
    history: list = field(default_factory=list)
    # objective after each full pass over one side (bidirectional only)
    half_pass_objectives: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"engine": self.engine, "seed": self.seed}
        d.update(self.plan.to_dict())
        d.update(objective=self.objective, iterations=self.iterations, converged=self.converged,
                 half_pass_objectives=list(self.half_pass_objectives))
        return d

    def to_json(self, **extra) -> str:
        d = self.to_dict()
        d.update(extra)
        return json.dumps(d) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "AlignmentResult":
        return cls(InterfacePlan.from_dict(d), float(d["objective"]), int(d["iterations"]),
                   bool(d["converged"]), d["engine"], int(d["seed"]),
                   half_pass_objectives=list(d.get("half_pass_objectives", [])))


def compose_cost(a_next, b_next, a_prev, b_prev, bias_a, bias_b, interface=None) -> np.ndarray:
    """Cost of pairing unit i of A's interface with unit j of B's.

    ``a_prev`` (rows = A's units) and ``b_prev`` (rows = B's units) are the
    incoming weights with the neighbouring column injections already applied, so
    their columns live in the same space; likewise ``a_next``/``b_next`` are the
    outgoing weights (columns = units) with row injections applied. Returns
    ``a_prev b_prev^T + a_next^T b_next + bias_a bias_b^T``.
    """
    where = f"interface {interface}: " if interface is not None else ""
    a_prev, b_prev = np.asarray(a_prev, np.float64), np.asarray(b_prev, np.float64)
    a_next, b_next = np.asarray(a_next, np.float64), np.asarray(b_next, np.float64)
    bias_a, bias_b = np.asarray(bias_a, np.float64), np.asarray(bias_b, np.float64)
    if a_prev.shape[1] != b_prev.shape[1]:
        raise ShapeError(f"{where}incoming weights have {a_prev.shape[1]} vs {b_prev.shape[1]} columns")
    if a_next.shape[0] != b_next.shape[0]:
        raise ShapeError(f"{where}outgoing weights have {a_next.shape[0]} vs {b_next.shape[0]} rows")
    if not (a_prev.shape[0] == a_next.shape[1] == len(bias_a)):
        raise ShapeError(f"{where}A-side unit counts disagree: {a_prev.shape[0]}, {a_next.shape[1]}, {len(bias_a)}")
    if not (b_prev.shape[0] == b_next.shape[1] == len(bias_b)):
        raise ShapeError(f"{where}B-side unit counts disagree: {b_prev.shape[0]}, {b_next.shape[1]}, {len(bias_b)}")
    return a_prev @ b_prev.T + a_next.T @ b_next + np.outer(bias_a, bias_b)


def matching_objective(A: ModelCheckpoint, B: ModelCheckpoint, plan: InterfacePlan) -> float:
    """Summed inner products of the lifted weights and biases of A and B."""
    wa, ba = lifted_params(A, plan.Q)
    wb, bb = lifted_params(B, plan.P)
    total = 0.0
    for l in range(len(wa)):
        total += float(np.sum(wa[l] * wb[l])) + float(np.dot(ba[l], bb[l]))
    return total


def _interface_cost(fixed, fixed_inj, moving, moving_inj, l):
    """LAP cost (d_l x moving width) for the moving side's injection at interface ``l``."""
    w_in, w_out = fixed.weights[l - 1], fixed.weights[l]
    m_in, m_out = moving.weights[l - 1], moving.weights[l]
    ident = Injection.canonical
    return compose_cost(
        a_next=apply_injection_pair(w_out, fixed_inj[l + 1], fixed_inj[l]),
        b_next=apply_injection_pair(m_out, moving_inj[l + 1], ident(m_out.shape[1])),
        a_prev=apply_injection_pair(w_in, fixed_inj[l], fixed_inj[l - 1]),
        b_prev=apply_injection_pair(m_in, ident(m_in.shape[0]), moving_inj[l - 1]),
        bias_a=fixed_inj[l].scatter(fixed.biases[l - 1]),
        bias_b=moving.biases[l - 1],
        interface=l,
    )


class _Search:
    """Shared state of one matching run: the current plan and its objective trace."""

    def __init__(self, A, B, plan, seed, tol):
        self.A, self.B, self.plan, self.seed, self.tol = A, B, plan, seed, tol
        self.objective = matching_objective(A, B, plan)
        self.history = [self.objective]
        self.passes = 0

    def solve(self, side: str, l: int) -> bool:
        """Re-solve one injection exactly; adopt it only on a strict improvement."""
        if side == "P":
            fixed, fixed_inj, moving, cur = self.A, self.plan.Q, self.B, self.plan.P
        else:
            fixed, fixed_inj, moving, cur = self.B, self.plan.P, self.A, self.plan.Q
        cost = _interface_cost(fixed, fixed_inj, moving, cur, l)
        assignment, best = solve_lap_max(cost)
        gain = best - assignment_value(cost, cur[l].map)
        if gain <= self.tol * max(1.0, abs(self.objective)):
            self.history.append(self.objective)
            return False
        self.plan = self.plan.with_injection(side, l, Injection(cost.shape[0], assignment.map))
        self.objective = matching_objective(self.A, self.B, self.plan)
        self.history.append(self.objective)
        return True

    def sweep(self, side: str) -> bool:
        """One pass over all hidden interfaces in a seeded random order."""
        order = rng.stream(self.seed, "interface-order", self.passes).permutation(np.arange(1, self.plan.num_layers))
        self.passes += 1
        changed = False
        for l in order:
            changed |= self.solve(side, int(l))
        return changed


def _check_pair(A, B):
    if A.num_layers != B.num_layers:
        raise ContractError(f"depth mismatch: {A.num_layers} vs {B.num_layers} layers")
    if A.arch.widths[0] != B.arch.widths[0]:
        raise ContractError(f"input dims differ: {A.arch.widths[0]} vs {B.arch.widths[0]}")


def select_engine(A: ModelCheckpoint, B: ModelCheckpoint) -> str:
    """Pick the engine from the hidden widths: square, compatible (either direction) or bidirectional."""
    _check_pair(A, B)
    ha, hb = A.arch.hidden, B.arch.hidden
    if ha == hb:
        return "square"
    if all(x >= y for x, y in zip(ha, hb)) or all(x <= y for x, y in zip(ha, hb)):
        return "compatible"
    return "bidirectional"


def _one_sided(A, B, seed, max_passes, tol, engine):
    search = _Search(A, B, InterfacePlan.canonical(A.arch.widths, B.arch.widths), seed, tol)
    converged = False
    while search.passes < max_passes:
        if not search.sweep("P"):
            converged = True
            break
    return AlignmentResult(search.plan, search.objective, search.passes, converged, engine, seed,
                           history=search.history)


def weight_matching_square(A, B, seed=0, max_passes=DEFAULT_MAX_PASSES, tol=DEFAULT_TOL) -> AlignmentResult:
    """Permute B's hidden units to match A (identical architectures)."""
    _check_pair(A, B)
    if A.arch.widths != B.arch.widths:
        raise ContractError(f"square matching needs identical widths, got {list(A.arch.widths)} vs {list(B.arch.widths)}")
    return _one_sided(A, B, seed, max_passes, tol, "square")


def weight_matching_compatible(A, B, seed=0, max_passes=DEFAULT_MAX_PASSES, tol=DEFAULT_TOL,
                               fallback=True) -> AlignmentResult:
    """Embed the narrower model into the wider one.

    If B is at least as narrow as A at every hidden interface, B is injected into
    A. If A is the narrower one everywhere, the roles are swapped and A is moved.
    Mixed widths go to :func:`weight_matching_bidirectional` unless
    ``fallback`` is false.
    """
    _check_pair(A, B)
    ha, hb = A.arch.hidden, B.arch.hidden
    if all(x >= y for x, y in zip(ha, hb)):
        return _one_sided(A, B, seed, max_passes, tol, "compatible")
    if all(x <= y for x, y in zip(ha, hb)):
        res = _one_sided(B, A, seed, max_passes, tol, "compatible")
        return replace(res, plan=res.plan.swapped())
    if not fallback:
        raise ContractError(f"hidden widths {list(ha)} and {list(hb)} are size-incompatible")
    return weight_matching_bidirectional(A, B, seed=seed, max_rounds=DEFAULT_MAX_ROUNDS, tol=tol)


def weight_matching_bidirectional(A, B, seed=0, max_rounds=DEFAULT_MAX_ROUNDS, tol=DEFAULT_TOL) -> AlignmentResult:
    """Alternate between moving B (all P, Q fixed) and moving A (all Q, P fixed).

    Starts from canonical injections; the first P pass is the one-sided
    alignment of B, after which A starts moving too. Stops once a whole round
    changes nothing.
    """
    _check_pair(A, B)
    search = _Search(A, B, InterfacePlan.canonical(A.arch.widths, B.arch.widths), seed, tol)
    halves = [search.objective]
    converged = False
    rounds = 0
    while rounds < max_rounds:
        rounds += 1
        changed_p = search.sweep("P")
        halves.append(search.objective)
        changed_q = search.sweep("Q")
        halves.append(search.objective)
        log.debug("round %d objective %.9g", rounds, search.objective)
        if not (changed_p or changed_q):
            converged = True
            break
    return AlignmentResult(search.plan, search.objective, rounds, converged, "bidirectional", seed,
                           history=search.history, half_pass_objectives=halves)


def match(A, B, engine="auto", seed=0, max_passes=DEFAULT_MAX_PASSES, max_rounds=DEFAULT_MAX_ROUNDS,
          tol=DEFAULT_TOL) -> AlignmentResult:
    if engine == "auto":
        engine = select_engine(A, B)
    if engine == "square":
        return weight_matching_square(A, B, seed, max_passes, tol)
    if engine == "compatible":
        return weight_matching_compatible(A, B, seed, max_passes, tol)
    if engine == "bidirectional":
        return weight_matching_bidirectional(A, B, seed, max_rounds, tol)
    raise ContractError(f"unknown engine {engine!r}; choose auto or one of {ENGINES}")
