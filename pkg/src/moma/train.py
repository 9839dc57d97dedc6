"""Training loop, evaluation, and run configuration.

One process owns one run. Every step appends a metrics record (loss split,
learning rate, routing stats, cumulative FLOPs, balance audit) to a JSONL
stream, and checkpoints carry everything needed to resume bit-exactly:
parameters, optimizer moments, data cursor, and the routing-noise RNG
state. Evaluation reads a held-out slice of the batch-index space.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .analysis import train_step_flops
from .balance import BatchComposer, MixPolicy
from .checkpoint import Checkpoint, config_diff
from .compute import single_thread_blas
from .data import CorpusConfig, CorpusGenerator, TokenBatch, VocabSpec
from .errors import CheckpointError, ConfigError
from .metrics import MetricsWriter
from .model import INFER, TRAIN, LossBreakdown, ModelConfig, StepStats, TransformerModel
from .moma_layer import MIXED
from .optim import AdamW, AdamWConfig, Schedule
from .tensor import Tensor, no_grad

EVAL_INDEX_OFFSET = 1 << 20  # held-out batch-index space


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    schedule: Schedule = field(default_factory=Schedule)
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    batch_size: int = 8
    seed: int = 0
    log_interval: int = 1
    checkpoint_interval: int = 1000
    out_dir: str = "runs/default"
    gumbel_routing: bool = False  # stage-two (post-upcycle) routing noise
    balance_tolerance: Optional[float] = 0.05  # None disables the composer

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.log_interval < 1 or self.checkpoint_interval < 1:
            raise ConfigError("intervals must be >= 1")

    def to_dict(self) -> dict:
        d = {
            "model": self.model.to_dict(),
            "corpus": dataclasses.asdict(self.corpus),
            "schedule": dataclasses.asdict(self.schedule),
            "optimizer": dataclasses.asdict(self.optimizer),
        }
        for k in (
            "batch_size",
            "seed",
            "log_interval",
            "checkpoint_interval",
            "out_dir",
            "gumbel_routing",
            "balance_tolerance",
        ):
            d[k] = getattr(self, k)
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        corpus = dict(d.get("corpus", {}))
        if "vocab" in corpus:
            corpus["vocab"] = VocabSpec(**corpus["vocab"])
        return RunConfig(
            model=ModelConfig.from_dict(d["model"]) if "model" in d else ModelConfig(),
            corpus=CorpusConfig(**corpus),
            schedule=Schedule(**d.get("schedule", {})),
            optimizer=AdamWConfig(**d.get("optimizer", {})),
            **{
                k: d[k]
                for k in (
                    "batch_size",
                    "seed",
                    "log_interval",
                    "checkpoint_interval",
                    "out_dir",
                    "gumbel_routing",
                    "balance_tolerance",
                )
                if k in d
            },
        )


def _routing_summary(stats: StepStats) -> list[dict]:
    out = []
    for j, ms in enumerate(stats.moma):
        if ms is None:
            continue
        for gs in ms.groups:
            out.append(
                {
                    "layer": j,
                    "kind": "moe",
                    "group": {0: "text", 1: "image", MIXED: "mixed"}[gs.modality],
                    "tokens_per_expert": gs.tokens_per_expert,
                    "mean_gate": gs.mean_gate,
                    "dropped_fraction": gs.dropped_fraction,
                }
            )
    for j, ds in enumerate(stats.mod):
        if ds is None:
            continue
        out.append(
            {
                "layer": j,
                "kind": "mod",
                "selected": ds.selected,
                "pool": ds.pool_size,
                "selected_fraction_text": ds.selected_fraction_text,
                "selected_fraction_image": ds.selected_fraction_image,
            }
        )
    return out


class Trainer:
    def __init__(self, cfg: RunConfig, _from_checkpoint: Checkpoint | None = None):
        self.cfg = cfg
        self.generator = CorpusGenerator(cfg.corpus)
        self.composer = None
        if cfg.balance_tolerance is not None and cfg.corpus.text_image_ratio > 0:
            policy = MixPolicy(
                target_image_fraction=cfg.corpus.text_image_ratio,
                tolerance=cfg.balance_tolerance,
            )
            self.composer = BatchComposer(policy, self.generator)
        self.model = TransformerModel(cfg.model, seed=cfg.seed)
        self.optimizer = AdamW(self.model.params, cfg.optimizer)
        self.gumbel_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x6B]))
        self.step = 0
        self.data_cursor = 0
        self.flops_per_step = train_step_flops(
            cfg.model,
            cfg.batch_size * cfg.model.seq_len,
            image_fraction=cfg.corpus.text_image_ratio,
        )
        self.cum_flops = 0.0
        if _from_checkpoint is not None:
            self._restore(_from_checkpoint)

    # -- checkpointing -----------------------------------------------------------

    def make_checkpoint(self, aux_tensors: dict[str, np.ndarray] | None = None) -> Checkpoint:
        tensors = {name: t.data.copy() for name, t in self.model.params.items()}
        tensors.update({k: v.copy() for k, v in self.optimizer.state_tensors().items()})
        if aux_tensors:
            tensors.update(aux_tensors)
        manifest = {
            "run_config": self.cfg.to_dict(),
            "step": self.step,
            "data_cursor": self.data_cursor,
            "cum_flops": self.cum_flops,
            "optimizer_step": self.optimizer.step_count,
            "gumbel_rng_state": self.gumbel_rng.bit_generator.state,
        }
        return Checkpoint(manifest=manifest, tensors=tensors)

    def _restore(self, ckpt: Checkpoint):
        for name, t in self.model.params.items():
            if name not in ckpt.tensors:
                raise CheckpointError(f"checkpoint missing parameter {name!r}")
            arr = ckpt.tensors[name]
            if arr.shape != t.data.shape:
                raise CheckpointError(
                    f"parameter {name!r} shape {arr.shape} != expected {t.data.shape}"
                )
            t.data = arr.astype(t.data.dtype, copy=True)
        if any(k.startswith("opt.") for k in ckpt.tensors):
            self.optimizer.load_state(ckpt.tensors, int(ckpt.manifest["optimizer_step"]))
        self.step = int(ckpt.manifest["step"])
        self.data_cursor = int(ckpt.manifest["data_cursor"])
        self.cum_flops = float(ckpt.manifest.get("cum_flops", 0.0))
        state = ckpt.manifest.get("gumbel_rng_state")
        if state is not None:
            self.gumbel_rng.bit_generator.state = state

    @staticmethod
    def from_checkpoint(path: str, cfg: RunConfig | None = None) -> "Trainer":
        ckpt = Checkpoint.load(path)
        stored = ckpt.manifest.get("run_config")
        if stored is None:
            raise CheckpointError(f"{path!r} carries no run configuration")
        if cfg is not None:
            diff = config_diff(cfg.to_dict(), stored)
            diff = [d for d in diff if not d.startswith("out_dir:")]
            if diff:
                raise ConfigError(
                    "resume refused, config mismatch:\n  " + "\n  ".join(diff)
                )
            run_cfg = cfg
        else:
            run_cfg = RunConfig.from_dict(stored)
        return Trainer(run_cfg, _from_checkpoint=ckpt)

    # -- training ----------------------------------------------------------------

    def next_batch(self) -> TokenBatch:
        idx = self.data_cursor
        self.data_cursor += 1
        if self.composer is not None:
            return self.composer.compose_batch(
                self.cfg.batch_size, self.cfg.model.seq_len, batch_index=idx
            )
        return self.generator.generate_batch(
            self.cfg.batch_size, self.cfg.model.seq_len, batch_index=idx
        )

    def train_step(self) -> tuple[LossBreakdown, StepStats, float]:
        batch = self.next_batch()
        stats = StepStats()
        gumbel = self.gumbel_rng if self.cfg.gumbel_routing else None
        loss, breakdown = self.model.loss(batch, mode=TRAIN, gumbel_rng=gumbel, collect=stats)
        self.optimizer.zero_grad()
        loss.backward()
        grad_norm = self.optimizer.clip_gradients()
        self.step += 1
        self.optimizer.step(self.cfg.schedule.lr_at(self.step))
        self.cum_flops += self.flops_per_step
        return breakdown, stats, grad_norm

    def train(self, steps: int | None = None, writer: MetricsWriter | None = None) -> Checkpoint:
        """Run up to the schedule's total step count (or `steps` more if
        given), checkpointing periodically; returns the final checkpoint."""
        os.makedirs(self.cfg.out_dir, exist_ok=True)
        own_writer = writer is None
        if writer is None:
            writer = MetricsWriter(os.path.join(self.cfg.out_dir, "metrics.jsonl"))
        target = self.cfg.schedule.total_steps if steps is None else self.step + steps
        try:
            with single_thread_blas():
                self._train_loop(target, writer)
            final = self.make_checkpoint()
            final.save(os.path.join(self.cfg.out_dir, "ckpt_final.bin"))
            return final
        finally:
            if own_writer:
                writer.close()

    def _train_loop(self, target: int, writer: MetricsWriter) -> None:
        while self.step < target:
                breakdown, stats, grad_norm = self.train_step()
                if self.step % self.cfg.log_interval == 0:
                    record = {
                        "step": self.step,
                        "lr": self.cfg.schedule.lr_at(self.step),
                        "loss": {
                            "total": breakdown.total,
                            "text": breakdown.text_loss,
                            "image": breakdown.image_loss,
                        },
                        "tokens": {
                            "text": breakdown.text_count,
                            "image": breakdown.image_count,
                        },
                        "grad_norm": grad_norm,
                        "cum_flops": self.cum_flops,
                        "routing": _routing_summary(stats),
                    }
                    if self.composer is not None and self.composer.deviations:
                        record["balance"] = {
                            "deviation": self.composer.deviations[-1],
                        }
                    writer.write("step", record)
                if self.step % self.cfg.checkpoint_interval == 0 and self.step < target:
                    self.make_checkpoint().save(
                        os.path.join(self.cfg.out_dir, f"ckpt_{self.step:07d}.bin")
                    )


def evaluate(
    model: TransformerModel,
    corpus: CorpusConfig,
    mode: str = TRAIN,
    aux=None,
    n_batches: int = 10,
    batch_size: int = 8,
    start_index: int = EVAL_INDEX_OFFSET,
    mod_perturb=None,
) -> LossBreakdown:
    """Mean per-modality loss over a held-out deterministic corpus slice.

    TRAIN mode uses batch-level expert choice (the training estimate);
    INFER mode uses auxiliary-router thresholding, which is the causal
    deployment behavior. The two are reported separately on purpose.
    """
    if mode == INFER and model.cfg.has_routers and aux is None:
        raise ConfigError("INFER-mode evaluation requires auxiliary routers")
    gen = CorpusGenerator(corpus)
    tot_nll = {"text": 0.0, "image": 0.0}
    tot_cnt = {"text": 0, "image": 0}
    for i in range(n_batches):
        batch = gen.generate_batch(batch_size, model.cfg.seq_len, batch_index=start_index + i)
        with no_grad():
            _, b = model.loss(batch, mode=mode, aux=aux, mod_perturb=mod_perturb)
        if b.text_loss is not None:
            tot_nll["text"] += b.text_loss * b.text_count
            tot_cnt["text"] += b.text_count
        if b.image_loss is not None:
            tot_nll["image"] += b.image_loss * b.image_count
            tot_cnt["image"] += b.image_count
    n = tot_cnt["text"] + tot_cnt["image"]
    total = (tot_nll["text"] + tot_nll["image"]) / n
    return LossBreakdown(
        total=float(total),
        text_loss=tot_nll["text"] / tot_cnt["text"] if tot_cnt["text"] else None,
        image_loss=tot_nll["image"] / tot_cnt["image"] if tot_cnt["image"] else None,
        text_count=tot_cnt["text"],
        image_count=tot_cnt["image"],
    )


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[TransformerModel, RunConfig]:
    run_cfg = RunConfig.from_dict(ckpt.manifest["run_config"])
    model = TransformerModel(run_cfg.model, seed=run_cfg.seed)
    for name, t in model.params.items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        t.data = ckpt.tensors[name].astype(t.data.dtype, copy=True)
    return model, run_cfg
