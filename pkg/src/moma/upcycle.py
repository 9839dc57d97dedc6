"""Modality-untied upcycling: convert a trained one-expert-per-modality
checkpoint into a multi-expert checkpoint and restart the schedule.

Every target expert starts as an exact copy of its modality's seed expert;
group routers are re-initialized at the expanded width (copied columns
would leave experts permanently indistinguishable under deterministic
routing, so fresh columns plus stage-two Gumbel noise break the symmetry).
Attention, embeddings, and norms copy verbatim. The learning-rate schedule
and optimizer moments reset; the data cursor carries over so stage two
sees refreshed data.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .analysis import LossCurve
from .checkpoint import Checkpoint
from .errors import ConfigError
from .model import ModelConfig
from .train import RunConfig


@dataclass(frozen=True)
class UpcyclePlan:
    text_experts: int
    image_experts: int
    gumbel_stage_two: bool = True
    router_init: str = "fresh"  # or "replicate" (symmetry experiments)
    router_seed: int = 0

    def __post_init__(self):
        if self.text_experts < 1 or self.image_experts < 1:
            raise ConfigError("target expert counts must be >= 1")
        if self.router_init not in ("fresh", "replicate"):
            raise ConfigError(f"unknown router_init {self.router_init!r}")


def upcycle_checkpoint(seed: Checkpoint, plan: UpcyclePlan) -> tuple[Checkpoint, list[str]]:
    """Seed checkpoint -> stage-two checkpoint, plus a path-by-path copy
    manifest. Raises ConfigError listing offending paths on any mismatch."""
    run_cfg = RunConfig.from_dict(seed.manifest["run_config"])
    mcfg = run_cfg.model
    if mcfg.dense or mcfg.mixed_experts:
        raise ConfigError("upcycling needs a modality-grouped seed model")
    if mcfg.text_experts != 1 or mcfg.image_experts != 1:
        raise ConfigError(
            f"seed must have exactly 1 expert per modality, found "
            f"{mcfg.text_experts} text / {mcfg.image_experts} image"
        )
    target_cfg = dataclasses.replace(
        mcfg, text_experts=plan.text_experts, image_experts=plan.image_experts
    )
    new_run = dataclasses.replace(run_cfg, model=target_cfg, gumbel_routing=plan.gumbel_stage_two)

    rng = np.random.default_rng(np.random.SeedSequence([plan.router_seed, 0x0C]))
    sizes = {"text": plan.text_experts, "image": plan.image_experts}
    tensors: dict[str, np.ndarray] = {}
    manifest_lines: list[str] = []
    bad: list[str] = []
    for name in sorted(seed.tensors):
        if name.startswith(("opt.", "aux.")):
            manifest_lines.append(f"drop   {name}")
            continue
        arr = seed.tensors[name]
        parts = name.split(".")
        if ".moma." in name and ".router." in name:
            # layer.{j}.moma.{group}.router.w -> expanded width
            group = parts[3]
            size = sizes.get(group)
            if size is None:
                bad.append(name)
                continue
            d = arr.shape[0]
            if plan.router_init == "fresh":
                new = (rng.standard_normal((d, size)) * 0.02).astype(arr.dtype)
                manifest_lines.append(f"fresh  {name} -> width {size}")
            else:
                new = np.tile(arr[:, :1], (1, size)).astype(arr.dtype)
                manifest_lines.append(f"tile   {name} -> width {size}")
            tensors[name] = new
        elif ".moma." in name and ".expert_0." in name:
            group = parts[3]
            size = sizes.get(group)
            if size is None:
                bad.append(name)
                continue
            for e in range(size):
                new_name = name.replace(".expert_0.", f".expert_{e}.")
                tensors[new_name] = arr.copy()
            manifest_lines.append(f"copy   {name} -> expert_0..{size - 1}")
        elif ".moma." in name and ".expert_" in name:
            bad.append(name)  # seed had more than one expert somewhere
        else:
            tensors[name] = arr.copy()
            manifest_lines.append(f"copy   {name}")
    if bad:
        raise ConfigError("unconvertible parameter paths:\n  " + "\n  ".join(sorted(bad)))

    manifest = {
        "run_config": new_run.to_dict(),
        "step": 0,  # schedule reset
        "data_cursor": int(seed.manifest["data_cursor"]),  # data continues
        "cum_flops": 0.0,
        "optimizer_step": 0,  # moments reset
        "gumbel_rng_state": None,
        "upcycled_from_step": int(seed.manifest["step"]),
    }
    return Checkpoint(manifest=manifest, tensors=tensors), manifest_lines


def flops_adjusted_curve(
    stage1: LossCurve | None, stage2: LossCurve, stage1_flops: float
) -> LossCurve:
    """Shift the stage-two curve right by the stage-one cost and merge onto
    one monotone cumulative-FLOPs axis."""
    shifted_flops = stage2.flops + stage1_flops
    if stage1 is None or stage1.flops.size == 0:
        return LossCurve(shifted_flops, stage2.loss.copy(), label=stage2.label)
    flops = np.concatenate([stage1.flops, shifted_flops])
    loss = np.concatenate([stage1.loss, stage2.loss])
    order = np.argsort(flops, kind="stable")
    flops, loss = flops[order], loss[order]
    keep = np.concatenate([[True], np.diff(flops) > 0])
    return LossCurve(flops[keep], loss[keep], label=stage2.label)
