"""Micro-sweep harness: the desk-scale comparison recipe and a runner that
executes independent training runs as parallel worker processes.

Each run writes to its own directory; a finished run (final checkpoint
whose stored config matches the request) is reused, and a partial run is
resumed from its newest checkpoint, so long sweeps survive interruption.
"""

from __future__ import annotations

import dataclasses
import glob
import os
from concurrent.futures import ProcessPoolExecutor

from .checkpoint import Checkpoint, config_diff
from .data import CorpusConfig, VocabSpec
from .errors import CheckpointError
from .model import named_config
from .optim import Schedule
from .train import RunConfig, Trainer

# Figure-3-style comparison set at runnable scale.
MICRO_SWEEP_ARCHS = ("dense", "moe_1t1i", "moe_4t4i", "moe_8x", "mod_moe_4t4i")
MICRO_SWEEP_STEPS = 5000


def micro_sweep_config(arch: str, seed: int, root: str, steps: int = MICRO_SWEEP_STEPS) -> RunConfig:
    """The pinned micro-sweep recipe: d=64, l=4 (depth-routed variants l=6,
    interval 2, c_d=0.25), ffn=256, h=4, batches of 8x256 tokens."""
    return RunConfig(
        model=named_config(arch),
        corpus=CorpusConfig(seed=1234),
        schedule=Schedule(peak_lr=3e-3, warmup_steps=250, total_steps=steps),
        batch_size=8,
        seed=seed,
        out_dir=os.path.join(root, f"{arch}_seed{seed}"),
        checkpoint_interval=1000,
        log_interval=1,
    )


def _config_matches(cfg: RunConfig, ckpt_path: str) -> bool:
    try:
        stored = Checkpoint.load(ckpt_path).manifest.get("run_config")
    except CheckpointError:
        return False
    if stored is None:
        return False
    diff = config_diff(cfg.to_dict(), stored)
    return not [d for d in diff if not d.startswith("out_dir:")]


def _truncate_metrics(path: str, upto_step: int) -> None:
    """Drop stream records past the resume point so steps stay unique."""
    if not os.path.exists(path):
        return
    import json

    kept = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if json.loads(line).get("step", 0) <= upto_step:
                kept.append(line)
    with open(path, "w") as f:
        f.write("\n".join(kept) + ("\n" if kept else ""))


def ensure_run(cfg: RunConfig) -> str:
    """Train (or reuse/resume) one run; returns its output directory."""
    final = os.path.join(cfg.out_dir, "ckpt_final.bin")
    if os.path.exists(final) and _config_matches(cfg, final):
        return cfg.out_dir
    partials = sorted(glob.glob(os.path.join(cfg.out_dir, "ckpt_0*.bin")))
    if partials and _config_matches(cfg, partials[-1]):
        trainer = Trainer.from_checkpoint(partials[-1], cfg)
        _truncate_metrics(os.path.join(cfg.out_dir, "metrics.jsonl"), trainer.step)
    else:
        if os.path.isdir(cfg.out_dir):
            for stale in glob.glob(os.path.join(cfg.out_dir, "*")):
                os.remove(stale)
        trainer = Trainer(cfg)
    trainer.train()
    return cfg.out_dir


def _worker(cfg_dict: dict) -> str:
    cfg = RunConfig.from_dict(cfg_dict)
    return ensure_run(cfg)


def run_parallel(configs: list[RunConfig], workers: int = 2) -> list[str]:
    """Execute runs in separate processes (one BLAS thread each)."""
    pending = [c for c in configs]
    if workers <= 1 or len(pending) <= 1:
        return [ensure_run(c) for c in pending]
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    import multiprocessing as mp

    ctx = mp.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(_worker, [c.to_dict() for c in pending]))


def micro_sweep(
    root: str,
    seeds: tuple[int, ...] = (0, 1, 2),
    archs: tuple[str, ...] = MICRO_SWEEP_ARCHS,
    steps: int = MICRO_SWEEP_STEPS,
    workers: int = 2,
) -> dict[tuple[str, int], str]:
    """Run the full comparison grid; returns {(arch, seed): run_dir}."""
    configs = [micro_sweep_config(a, s, root, steps) for a in archs for s in seeds]
    dirs = run_parallel(configs, workers=workers)
    return {(a, s): d for (a, s), d in zip([(a, s) for a in archs for s in seeds], dirs)}
