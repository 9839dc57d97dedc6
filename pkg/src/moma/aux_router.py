"""Auxiliary routers: small two-matrix predictors trained after the main
model to guess batch top-k membership from a single token's hidden state.

They make inference causal: selection at test time is `score > 0.5` per
token (strict), while the main router still supplies the gate value. They
train with binary cross-entropy against the 0/1 membership labels the
training-time expert-choice selection produced, with the main model frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import TokenBatch
from .compute import single_thread_blas
from .errors import ConfigError, ContractError
from .model import GROUP_NAMES, StepStats, TransformerModel
from .moma_layer import TRAIN
from .optim import AdamW, AdamWConfig, Schedule
from .tensor import Tensor, no_grad


@dataclass
class AuxRouterParams:
    w1: Tensor  # [d, d/2]
    w2: Tensor  # [d/2, num_targets]


def aux_logits(hidden: Tensor, params: AuxRouterParams) -> Tensor:
    return T.matmul(T.silu(T.matmul(hidden, params.w1)), params.w2)


def aux_score(hidden: Tensor, params: AuxRouterParams) -> Tensor:
    """sigmoid(silu(x @ W1) @ W2): per-token membership scores in (0,1)."""
    return T.sigmoid(aux_logits(hidden, params))


def aux_score_np(hidden: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    z = hidden @ w1
    z = z * T._stable_sigmoid(z)
    return T._stable_sigmoid(z @ w2)


def causal_select(scores: np.ndarray) -> np.ndarray:
    """Membership by strict thresholding: selected iff score > 0.5."""
    return np.asarray(scores) > 0.5


class AuxRouterSet:
    """All auxiliary routers of a model, keyed by canonical path.

    moma routers: one per (layer, group) with one output per expert.
    mod routers: one per depth-routed layer with a single output.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._moma: dict[tuple[int, str], AuxRouterParams] = {}
        self._mod: dict[int, AuxRouterParams] = {}

    @staticmethod
    def build_for(model: TransformerModel, seed: int = 0) -> "AuxRouterSet":
        cfg = model.cfg
        if cfg.hidden_dim % 2:
            raise ConfigError(f"auxiliary routers need an even hidden dim, got {cfg.hidden_dim}")
        d = cfg.hidden_dim
        half = d // 2
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA0]))
        out = AuxRouterSet()

        def normal(shape):
            return Tensor(
                (rng.standard_normal(shape) * 0.02).astype(cfg.dtype), requires_grad=True
            )

        mod_flags = cfg.mod_layers()
        for j in range(cfg.layers):
            if not cfg.dense:
                for tag, size in cfg.group_sizes:
                    gname = GROUP_NAMES[tag]
                    p = AuxRouterParams(normal((d, half)), normal((half, size)))
                    out._moma[(j, gname)] = p
                    out.params[f"aux.layer.{j}.moma.{gname}.w1"] = p.w1
                    out.params[f"aux.layer.{j}.moma.{gname}.w2"] = p.w2
            if cfg.mod_enabled and mod_flags[j]:
                p = AuxRouterParams(normal((d, half)), normal((half, 1)))
                out._mod[j] = p
                out.params[f"aux.layer.{j}.mod.w1"] = p.w1
                out.params[f"aux.layer.{j}.mod.w2"] = p.w2
        if not out.params:
            raise ConfigError("model has no routed modules; nothing to build")
        return out

    @staticmethod
    def from_tensors(tensors: dict[str, np.ndarray]) -> "AuxRouterSet":
        out = AuxRouterSet()
        names = sorted(n for n in tensors if n.startswith("aux."))
        if not names:
            raise ContractError("checkpoint holds no auxiliary routers")
        seen = {}
        for n in names:
            head, leaf = n.rsplit(".", 1)
            seen.setdefault(head, {})[leaf] = Tensor(tensors[n].copy(), requires_grad=True)
        for head, leaves in seen.items():
            p = AuxRouterParams(leaves["w1"], leaves["w2"])
            parts = head.split(".")  # aux.layer.{j}.moma.{g} | aux.layer.{j}.mod
            j = int(parts[2])
            if parts[3] == "moma":
                out._moma[(j, parts[4])] = p
            else:
                out._mod[j] = p
            out.params[f"{head}.w1"] = p.w1
            out.params[f"{head}.w2"] = p.w2
        return out

    # -- scoring ---------------------------------------------------------------

    def moma_scores_np(self, layer: int, group: str, hidden: np.ndarray) -> np.ndarray:
        p = self._moma[(layer, group)]
        return aux_score_np(hidden, p.w1.data, p.w2.data)

    def mod_scores_np(self, layer: int, hidden: np.ndarray) -> np.ndarray:
        p = self._mod[layer]
        return aux_score_np(hidden, p.w1.data, p.w2.data)

    def routers(self) -> list[tuple[str, AuxRouterParams]]:
        items = [(f"layer.{j}.moma.{g}", p) for (j, g), p in sorted(self._moma.items())]
        items += [(f"layer.{j}.mod", p) for j, p in sorted(self._mod.items())]
        return items


@dataclass(frozen=True)
class AuxTrainConfig:
    # desk-scale defaults: 2k steps, linear warmup then linear decay; peak
    # lr runs hotter than the large-scale recipe because these tiny routers
    # barely move at 1e-4
    steps: int = 2000
    schedule: Schedule = field(
        default_factory=lambda: Schedule(peak_lr=1e-3, warmup_steps=200, total_steps=2000)
    )
    batch_size: int = 8
    eval_batches: int = 4


def _collect_labels(model: TransformerModel, batch: TokenBatch) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Frozen train-mode forward; returns (router key, pooled hidden,
    0/1 membership labels) per routed module."""
    stats = StepStats()
    with no_grad():
        model.forward(batch, mode=TRAIN, collect=stats, collect_routing=True)
    records = []
    for j, ms in enumerate(stats.moma):
        if ms is None:
            continue
        for gs in ms.groups:
            if gs.assignment is None or gs.pooled_hidden is None:
                continue
            labels = gs.assignment.selected_mask().astype(np.float64)
            records.append((f"moma.{j}.{GROUP_NAMES[gs.modality]}", gs.pooled_hidden, labels))
    for j, ds in enumerate(stats.mod):
        if ds is None or ds.assignment is None or ds.input_hidden is None:
            continue
        labels = ds.assignment.selected_mask().astype(np.float64)
        records.append((f"mod.{j}", ds.input_hidden, labels))
    return records


def _router_for_key(aux: AuxRouterSet, key: str) -> AuxRouterParams:
    kind, rest = key.split(".", 1)
    if kind == "moma":
        j, g = rest.split(".")
        return aux._moma[(int(j), g)]
    return aux._mod[int(rest)]


def train_aux_routers(
    model: TransformerModel,
    generator,
    cfg: AuxTrainConfig | None = None,
    seed: int = 0,
    data_start_index: int = 0,
) -> tuple["AuxRouterSet", dict]:
    """Second-stage training: BCE between aux scores and the batch top-k
    membership labels of the frozen main model.

    Only aux parameters receive gradients; a checksum over the main
    parameters guards the freeze. Returns the trained set plus a history
    dict with the loss curve and final per-router agreement rates.
    """
    cfg = cfg or AuxTrainConfig()
    aux = AuxRouterSet.build_for(model, seed=seed)
    opt = AdamW(aux.params, AdamWConfig(weight_decay=0.0))
    before = parameter_checksum(model)
    losses = []
    with single_thread_blas():
        for step in range(1, cfg.steps + 1):
            batch = generator.generate_batch(
                cfg.batch_size, model.cfg.seq_len, batch_index=data_start_index + step
            )
            records = _collect_labels(model, batch)
            total = None
            count = 0
            for key, hidden, labels in records:
                p = _router_for_key(aux, key)
                z = aux_logits(Tensor(hidden.astype(model.cfg.dtype)), p)
                bce = T.tsum(T.bce_with_logits(z, labels.astype(model.cfg.dtype)))
                total = bce if total is None else T.add(total, bce)
                count += labels.size
            loss = T.mul(total, 1.0 / count)
            opt.zero_grad()
            loss.backward()
            opt.step(cfg.schedule.lr_at(step))
            losses.append(float(loss.data))
    if parameter_checksum(model) != before:
        raise ContractError("main model parameters changed during aux training")
    agreement = evaluate_agreement(
        model, aux, generator, cfg.eval_batches, cfg.batch_size,
        start_index=data_start_index + cfg.steps + 1,
    )
    return aux, {"loss_curve": losses, "agreement": agreement}


def evaluate_agreement(
    model: TransformerModel,
    aux: AuxRouterSet,
    generator,
    n_batches: int,
    batch_size: int,
    start_index: int = 0,
) -> dict[str, float]:
    """Fraction of (token, target) membership decisions that match the
    batch top-k labels, per router, on held-out batches."""
    hits: dict[str, int] = {}
    totals: dict[str, int] = {}
    for i in range(n_batches):
        batch = generator.generate_batch(batch_size, model.cfg.seq_len, batch_index=start_index + i)
        for key, hidden, labels in _collect_labels(model, batch):
            p = _router_for_key(aux, key)
            pred = causal_select(aux_score_np(hidden, p.w1.data, p.w2.data))
            hits[key] = hits.get(key, 0) + int((pred == (labels > 0.5)).sum())
            totals[key] = totals.get(key, 0) + labels.size
    return {k: hits[k] / totals[k] for k in hits}


def parameter_checksum(model: TransformerModel) -> int:
    import zlib

    crc = 0
    for name in sorted(model.params):
        crc = zlib.crc32(model.params[name].data.tobytes(), crc)
    return crc
