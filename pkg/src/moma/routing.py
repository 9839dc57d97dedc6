"""Expert-choice selection machinery shared by width and depth sparsity.

A router scores its token pool with a sigmoid so every token's affinity is
computed independently of the others; each routing target (an expert, or a
layer) then takes the top-k scorers from the pool. Capacity is exact by
construction, so no load-balancing loss exists anywhere in this package.
Batch-level top-k breaks causality; that is deliberate, and the auxiliary
routers exist to restore it at inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass
class RouterParams:
    """A single projection: hidden dim d -> one column per routing target."""

    weight: Tensor  # [d, num_targets]

    @property
    def num_targets(self) -> int:
        return self.weight.data.shape[1]


@dataclass(frozen=True)
class CapacitySpec:
    capacity_factor: float  # c in (0, 1]
    pool_size: int          # b, tokens eligible for this router

    def __post_init__(self):
        if not 0.0 < self.capacity_factor <= 1.0:
            raise ContractError(f"capacity factor must be in (0,1], got {self.capacity_factor}")

    @property
    def k(self) -> int:
        """Tokens each target processes: max(1, floor(c*b)), clamped to b."""
        if self.pool_size < 1:
            return 0
        return min(self.pool_size, max(1, int(np.floor(self.capacity_factor * self.pool_size))))


@dataclass
class RoutingAssignment:
    """Audit trail of one expert-choice decision.

    indices[j] holds exactly k ascending-score-ranked token indices chosen
    by target j; gates[j] holds the matching sigmoid scores. `scores` keeps
    the full pool-by-target sigmoid matrix so gates stay reconstructible
    after perturbation.
    """

    indices: np.ndarray  # [num_targets, k] int
    gates: np.ndarray    # [num_targets, k] float
    k: int
    scores: np.ndarray   # [pool, num_targets] sigmoid scores (detached)

    @property
    def num_targets(self) -> int:
        return self.indices.shape[0]

    def selected_mask(self) -> np.ndarray:
        """Boolean [pool, num_targets] membership matrix."""
        mask = np.zeros(self.scores.shape, dtype=bool)
        for j in range(self.num_targets):
            mask[self.indices[j], j] = True
        return mask

    def debug_lines(self) -> list[str]:
        """One line per target: `target j: idx=[...] gate=[...]` (test fixtures)."""
        lines = []
        for j in range(self.num_targets):
            idx = " ".join(str(int(i)) for i in self.indices[j])
            gate = " ".join(f"{g:.6f}" for g in self.gates[j])
            lines.append(f"target {j}: idx=[{idx}] gate=[{gate}]")
        return lines


def affinity_scores(hidden: Tensor, router: RouterParams) -> Tensor:
    """sigmoid(hidden @ W_g): per-token, per-target affinities in (0,1)."""
    if hidden.data.ndim != 2 or hidden.data.shape[1] != router.weight.data.shape[0]:
        raise ShapeError(
            f"affinity_scores: hidden {hidden.data.shape} incompatible with router "
            f"{router.weight.data.shape}"
        )
    return T.sigmoid(T.matmul(hidden, router.weight))


def gumbel_sigmoid_scores(
    hidden: Tensor,
    router: RouterParams,
    rng: np.random.Generator | None,
) -> Tensor:
    """sigmoid(logits + G' - G'') with i.i.d. standard Gumbel noise.

    With rng=None this is exactly affinity_scores. The noise difference is
    symmetric about zero, so expected scores are unchanged; individual
    selections become stochastic, which breaks post-upcycle expert symmetry.
    """
    logits = T.matmul(hidden, router.weight)
    if rng is None:
        return T.sigmoid(logits)
    shape = logits.data.shape
    g1 = -np.log(-np.log(rng.random(shape)))
    g2 = -np.log(-np.log(rng.random(shape)))
    noisy = T.add(logits, (g1 - g2).astype(logits.data.dtype))
    return T.sigmoid(noisy)


def expert_choice_select(scores: np.ndarray, cap: CapacitySpec) -> RoutingAssignment:
    """Per column independently, take the k highest-scoring token indices.

    Ties break by ascending token index. Gates are the corresponding
    scores. `scores` is the detached sigmoid matrix [pool, num_targets].
    """
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ShapeError(f"expert_choice_select expects [pool, targets], got {scores.shape}")
    pool, num_targets = scores.shape
    if pool < 1:
        raise ContractError("empty token pool")
    if cap.pool_size != pool:
        raise ContractError(f"capacity pool_size {cap.pool_size} != scores pool {pool}")
    k = cap.k
    indices = np.empty((num_targets, k), dtype=np.int64)
    gates = np.empty((num_targets, k), dtype=scores.dtype)
    for j in range(num_targets):
        idx = T.top_k_indices(scores[:, j], k)
        indices[j] = idx
        gates[j] = scores[idx, j]
    return RoutingAssignment(indices=indices, gates=gates, k=k, scores=scores)


def perturb_selection(
    assign: RoutingAssignment, sigma: float, rng: np.random.Generator
) -> RoutingAssignment:
    """Swap a floor(sigma*k) subset of each target's selection with uniform
    random non-selected tokens; capacity is preserved exactly."""
    if not 0.0 <= sigma <= 1.0:
        raise ContractError(f"sigma must be in [0,1], got {sigma}")
    pool = assign.scores.shape[0]
    k = assign.k
    n_swap = int(np.floor(sigma * k))
    n_swap = min(n_swap, pool - k)
    if n_swap <= 0:
        return RoutingAssignment(
            indices=assign.indices.copy(), gates=assign.gates.copy(), k=k, scores=assign.scores
        )
    new_indices = assign.indices.copy()
    all_idx = np.arange(pool)
    for j in range(assign.num_targets):
        selected = new_indices[j]
        in_sel = np.zeros(pool, dtype=bool)
        in_sel[selected] = True
        outside = all_idx[~in_sel]
        drop_pos = rng.choice(k, size=n_swap, replace=False)
        bring_in = rng.choice(outside.shape[0], size=n_swap, replace=False)
        selected[drop_pos] = outside[bring_in]
    gates = np.take_along_axis(assign.scores, new_indices.T, axis=0).T
    # Keep slot order aligned with indices; scores matrix stays authoritative.
    gates = np.ascontiguousarray(gates, dtype=assign.gates.dtype)
    return RoutingAssignment(indices=new_indices, gates=gates, k=k, scores=assign.scores)
