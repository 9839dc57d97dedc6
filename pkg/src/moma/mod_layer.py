"""Mixture-of-depths wrapper: a learned depth router picks which tokens take
a transformer layer's compute path; the rest bypass via exact identity.

Selection pools all batch*seq positions of both modalities (depth routing
happens before any modality split). The router score multiplies the
wrapped layer's residual contribution, which keeps the depth router on the
differentiable path: out = hidden + g(x) * (layer(x) - x). Selected tokens
attend only among selected tokens of their own sequence, so depth sparsity
sparsifies attention too.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

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
    perturb_selection,
)
from .tensor import Tensor

TRAIN = "train"
INFER = "infer"


@dataclass(frozen=True)
class TokenLayout:
    """Flat token block structure: original position of each row plus the
    contiguous [start, end) row range of every sequence."""

    positions: np.ndarray          # [k] original sequence positions
    seq_bounds: tuple[tuple[int, int], ...]

    @staticmethod
    def full(batch: int, seq_len: int) -> "TokenLayout":
        pos = np.tile(np.arange(seq_len), batch)
        bounds = tuple((i * seq_len, (i + 1) * seq_len) for i in range(batch))
        return TokenLayout(pos, bounds)

    @property
    def is_uniform(self) -> bool:
        sizes = {e - s for s, e in self.seq_bounds}
        if len(sizes) != 1:
            return False
        n = sizes.pop()
        base = np.arange(n)
        return all(
            np.array_equal(self.positions[s:e], base) for s, e in self.seq_bounds
        )


@dataclass
class MoDLayerParams:
    router: RouterParams      # [d, 1]
    capacity_factor: float    # c_d in (0, 1]

    def __post_init__(self):
        if not 0.0 < self.capacity_factor <= 1.0:
            raise ContractError(f"c_d must be in (0,1], got {self.capacity_factor}")


@dataclass
class MoDStats:
    pool_size: int = 0
    selected: int = 0
    selected_fraction_text: float = float("nan")
    selected_fraction_image: float = float("nan")
    assignment: Optional[RoutingAssignment] = None
    input_hidden: Optional[np.ndarray] = None  # filled for aux-router labels


def build_mod_schedule(total_layers: int, interval: int) -> list[bool]:
    """Layer j hosts depth routing iff j % interval == 0."""
    if interval < 1:
        raise ContractError(f"mod interval must be >= 1, got {interval}")
    return [j % interval == 0 for j in range(total_layers)]


def _gathered_layout(sel: np.ndarray, batch: int, seq_len: int) -> TokenLayout:
    positions = sel % seq_len
    seq_ids = sel // seq_len
    bounds = []
    start = 0
    for i in range(batch):
        cnt = int((seq_ids == i).sum())
        bounds.append((start, start + cnt))
        start += cnt
    return TokenLayout(positions, tuple(bounds))


def mod_forward(
    hidden: Tensor,
    mask: np.ndarray,
    params: MoDLayerParams,
    layer_delta_fn: Callable[[Tensor, TokenLayout, np.ndarray], Tensor],
    batch: int,
    seq_len: int,
    mode: str = TRAIN,
    aux_scores_fn: Callable[[Tensor], np.ndarray] | None = None,
    perturb: tuple[float, np.random.Generator] | None = None,
    force_gate_one: bool = False,
    collect: MoDStats | None = None,
    keep_hidden: bool = False,
) -> Tensor:
    """Depth-routed layer application over a flat [batch*seq, d] block.

    `layer_delta_fn(sub_hidden, layout, sub_mask)` must return the wrapped
    layer's residual contribution for the gathered rows.
    """
    n = hidden.data.shape[0]
    if n != batch * seq_len:
        raise ContractError(f"hidden rows {n} != batch*seq {batch * seq_len}")
    scores = affinity_scores(hidden, params.router)  # [n, 1]

    if mode == TRAIN:
        cap = CapacitySpec(params.capacity_factor, n)
        assign = expert_choice_select(scores.data, cap)
        if perturb is not None:
            sigma, rng = perturb
            assign = perturb_selection(assign, sigma, rng)
        sel = np.sort(assign.indices[0])
    elif mode == INFER:
        if aux_scores_fn is None:
            raise ContractError("INFER mode requires an auxiliary depth router")
        member = aux_scores_fn(hidden) > 0.5
        sel = np.nonzero(member.reshape(-1))[0]
        assign = None
    else:
        raise ContractError(f"unknown mode {mode!r}")

    if collect is not None:
        sel_mask = np.zeros(n, dtype=bool)
        sel_mask[sel] = True
        text = mask == TEXT
        image = mask == IMAGE
        collect.pool_size = n
        collect.selected = int(sel.shape[0])
        collect.selected_fraction_text = (
            float(sel_mask[text].mean()) if text.any() else float("nan")
        )
        collect.selected_fraction_image = (
            float(sel_mask[image].mean()) if image.any() else float("nan")
        )
        collect.assignment = assign
        collect.input_hidden = hidden.data.copy() if keep_hidden else None

    if sel.shape[0] == 0:
        return hidden

    layout = _gathered_layout(sel, batch, seq_len)
    gathered = T.gather_rows(hidden, sel, unique=True)
    delta = layer_delta_fn(gathered, layout, mask[sel])
    if not force_gate_one:
        gate = T.reshape(T.gather_rows(scores, sel, unique=True), (sel.shape[0],))
        delta = T.scale_rows(delta, gate)
    return T.scatter_add_rows(hidden, sel, delta, unique=True)
