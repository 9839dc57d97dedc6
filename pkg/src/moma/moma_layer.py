"""Modality-grouped expert feed-forward layer.

Tokens are first split by modality (hard routing), then expert-choice
routed within their group: every expert picks its top-k_e tokens, gates
them with its sigmoid affinity, and the gate-weighted expert outputs are
scattered back and summed. Tokens no expert picked contribute zero on the
FFN path. A residual with post-normalization wraps the whole block:
out = hidden + layer_norm(y).

Groups execute sequentially as separate batched computations; a joint
all-experts-masked reference implementation lives here too and must agree
bit-for-bit (the scatter/gather path is pure bookkeeping).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import IMAGE, TEXT
from .errors import ContractError
from .routing import (
    CapacitySpec,
    RouterParams,
    RoutingAssignment,
    affinity_scores,
    expert_choice_select,
    gumbel_sigmoid_scores,
)
from .tensor import Tensor

TRAIN = "train"
INFER = "infer"

MIXED = 2  # group tag for the modality-tied configuration (all tokens)


@dataclass
class SwiGluExpert:
    w_in: Tensor    # [d, ffn]
    w_gate: Tensor  # [d, ffn]
    w_out: Tensor   # [ffn, d]


def swiglu_ffn(x: Tensor, expert: SwiGluExpert) -> Tensor:
    """(silu(x @ w_gate) * (x @ w_in)) @ w_out."""
    gate = T.silu(T.matmul(x, expert.w_gate))
    lin = T.matmul(x, expert.w_in)
    return T.matmul(T.mul(gate, lin), expert.w_out)


@dataclass
class ExpertGroup:
    modality: int                 # TEXT, IMAGE, or MIXED
    experts: list[SwiGluExpert]
    router: RouterParams          # [d, len(experts)]
    capacity_factor: float        # defaults to 1/len(experts)

    def __post_init__(self):
        if len(self.experts) < 1:
            raise ContractError("expert group must hold at least one expert")


@dataclass
class MoMaLayerParams:
    groups: list[ExpertGroup]
    post_norm_scale: Tensor  # [d]


@dataclass
class GroupStats:
    modality: int
    pool_size: int
    tokens_per_expert: list[int]
    mean_gate: float
    dropped_fraction: float
    assignment: Optional[RoutingAssignment] = None
    pool_indices: Optional[np.ndarray] = None
    pooled_hidden: Optional[np.ndarray] = None  # filled for aux-router labels


@dataclass
class MoMaStats:
    groups: list[GroupStats] = field(default_factory=list)


def _group_pool_indices(group: ExpertGroup, mask: np.ndarray) -> np.ndarray:
    if group.modality == MIXED:
        return np.arange(mask.shape[0])
    return np.nonzero(mask == group.modality)[0]


def _gate_columns(scores: Tensor, num_experts: int) -> list[Tensor]:
    if num_experts == 1:
        return [T.reshape(scores, (scores.data.shape[0],))]
    cols = T.split(scores, num_experts, axis=1)
    return [T.reshape(c, (c.data.shape[0],)) for c in cols]


def sequential_group_execute(
    params: MoMaLayerParams,
    hidden: Tensor,
    mask: np.ndarray,
    mode: str = TRAIN,
    aux_scores_fn=None,
    gumbel_rng: np.random.Generator | None = None,
    force_gate_one: bool = False,
    collect: MoMaStats | None = None,
    keep_hidden: bool = False,
) -> Tensor:
    """Pre-residual expert mixture y for a flat token block [N, d].

    Groups run one after another over gathered indices; the result is
    independent of group order because groups write to disjoint positions.
    In INFER mode, `aux_scores_fn(group_index, pooled_hidden)` must return
    per-token membership scores and selection is score > 0.5 per token.
    With keep_hidden=True the stats retain each group's pooled hidden
    states (the aux-router training inputs).
    """
    n = hidden.data.shape[0]
    y = T.zeros_like_rows(n, hidden)
    for gi, group in enumerate(params.groups):
        pool_idx = _group_pool_indices(group, mask)
        b_m = int(pool_idx.shape[0])
        num_experts = len(group.experts)
        if b_m == 0:
            if collect is not None:
                collect.groups.append(
                    GroupStats(group.modality, 0, [0] * num_experts, float("nan"), 0.0)
                )
            continue
        pooled = T.gather_rows(hidden, pool_idx, unique=True)

        if mode == TRAIN:
            if gumbel_rng is not None:
                scores = gumbel_sigmoid_scores(pooled, group.router, gumbel_rng)
            else:
                scores = affinity_scores(pooled, group.router)
            cap = CapacitySpec(group.capacity_factor, b_m)
            assign = expert_choice_select(scores.data, cap)
            selections = [assign.indices[j] for j in range(num_experts)]
        elif mode == INFER:
            if aux_scores_fn is None:
                raise ContractError("INFER mode requires auxiliary routers")
            scores = affinity_scores(pooled, group.router)
            member = aux_scores_fn(gi, pooled) > 0.5
            selections = [np.nonzero(member[:, j])[0] for j in range(num_experts)]
            assign = None
        else:
            raise ContractError(f"unknown mode {mode!r}")

        gate_cols = _gate_columns(scores, num_experts)
        y_pool = T.zeros_like_rows(b_m, hidden)
        counts = []
        for j, expert in enumerate(group.experts):
            sel = selections[j]
            counts.append(int(sel.shape[0]))
            if sel.shape[0] == 0:
                continue
            x_j = T.gather_rows(pooled, sel, unique=True)
            out_j = swiglu_ffn(x_j, expert)
            if not force_gate_one:
                g_j = T.gather_rows(gate_cols[j], sel, unique=True)
                out_j = T.scale_rows(out_j, g_j)
            y_pool = T.scatter_add_rows(y_pool, sel, out_j, unique=True)
        y = T.scatter_add_rows(y, pool_idx, y_pool, unique=True)

        if collect is not None:
            picked = np.zeros(b_m, dtype=bool)
            for sel in selections:
                picked[sel] = True
            gates = (
                assign.gates.reshape(-1)
                if assign is not None
                else scores.data[picked].reshape(-1)
            )
            collect.groups.append(
                GroupStats(
                    modality=group.modality,
                    pool_size=b_m,
                    tokens_per_expert=counts,
                    mean_gate=float(gates.mean()) if gates.size else float("nan"),
                    dropped_fraction=float(1.0 - picked.mean()),
                    assignment=assign,
                    pool_indices=pool_idx,
                    pooled_hidden=pooled.data.copy() if keep_hidden else None,
                )
            )
    return y


def joint_masked_execute(
    params: MoMaLayerParams,
    hidden: Tensor,
    mask: np.ndarray,
    force_gate_one: bool = False,
) -> Tensor:
    """Oracle path: every expert processes every pooled token; a selection
    mask zeroes the non-selected slots before summing. Train-mode only."""
    n = hidden.data.shape[0]
    y = T.zeros_like_rows(n, hidden)
    for group in params.groups:
        pool_idx = _group_pool_indices(group, mask)
        b_m = int(pool_idx.shape[0])
        if b_m == 0:
            continue
        pooled = T.gather_rows(hidden, pool_idx)
        scores = affinity_scores(pooled, group.router)
        cap = CapacitySpec(group.capacity_factor, b_m)
        assign = expert_choice_select(scores.data, cap)
        member = assign.selected_mask()
        gate_cols = _gate_columns(scores, len(group.experts))
        y_pool = T.zeros_like_rows(b_m, hidden)
        for j, expert in enumerate(group.experts):
            full = swiglu_ffn(pooled, expert)
            weight = member[:, j].astype(scores.data.dtype)
            if not force_gate_one:
                w = T.mul(gate_cols[j], Tensor(weight))
            else:
                w = Tensor(weight)
            y_pool = T.add(y_pool, T.scale_rows(full, w))
        y = T.scatter_add_rows(y, pool_idx, y_pool, unique=True)
    return y


def moma_forward(
    hidden: Tensor,
    mask: np.ndarray,
    params: MoMaLayerParams,
    mode: str = TRAIN,
    aux_scores_fn=None,
    gumbel_rng: np.random.Generator | None = None,
    force_gate_one: bool = False,
    collect: MoMaStats | None = None,
    keep_hidden: bool = False,
    reference: bool = False,
) -> Tensor:
    """Full block: expert mixture + residual with post-normalization."""
    if mask.shape[0] != hidden.data.shape[0]:
        raise ContractError(
            f"modality mask length {mask.shape[0]} != token count {hidden.data.shape[0]}"
        )
    if reference:
        y = joint_masked_execute(params, hidden, mask, force_gate_one=force_gate_one)
    else:
        y = sequential_group_execute(
            params,
            hidden,
            mask,
            mode=mode,
            aux_scores_fn=aux_scores_fn,
            gumbel_rng=gumbel_rng,
            force_gate_one=force_gate_one,
            collect=collect,
            keep_hidden=keep_hidden,
        )
    return T.add(hidden, T.layer_norm(y, params.post_norm_scale))
