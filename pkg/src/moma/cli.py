"""Command-line entry points.

Subcommands: train, eval, train-aux, upcycle, flops, eta, noise-sweep,
latency-sim, gen-corpus. Configuration comes from an optional JSON file
(--config); individual flags override file values. Exit codes: 0 success,
2 config error, 3 data error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import analysis
from .aux_router import AuxRouterSet, AuxTrainConfig, train_aux_routers
from .checkpoint import Checkpoint
from .data import CorpusConfig, CorpusGenerator, VocabSpec, export_corpus
from .errors import CheckpointError, ConfigError, DataError
from .metrics import read_metrics
from .model import INFER, TRAIN, NAMED_ARCHS, ModelConfig, named_config
from .optim import Schedule
from .train import EVAL_INDEX_OFFSET, RunConfig, Trainer, evaluate, model_from_checkpoint
from .upcycle import UpcyclePlan, upcycle_checkpoint


def _load_run_config(args) -> RunConfig:
    base: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            base = json.load(f)
    if getattr(args, "arch", None):
        model_overrides = base.get("model", {})
        model_overrides.pop("dense", None)
        for key in ("text_experts", "image_experts", "mixed_experts", "mod_enabled"):
            model_overrides.pop(key, None)
        cfg = named_config(args.arch, **_model_kwargs(model_overrides))
        base["model"] = cfg.to_dict()
    elif "model" not in base:
        base["model"] = named_config("dense").to_dict()
    base.setdefault("corpus", dataclasses.asdict(CorpusConfig()))
    base["corpus"].setdefault("vocab", dataclasses.asdict(VocabSpec()))
    base.setdefault("schedule", dataclasses.asdict(Schedule()))
    if getattr(args, "seed", None) is not None:
        base["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        base["schedule"]["total_steps"] = args.steps
    if getattr(args, "out", None):
        base["out_dir"] = args.out
    return RunConfig.from_dict(base)


def _model_kwargs(d: dict) -> dict:
    d = dict(d)
    if "vocab" in d:
        d["vocab"] = VocabSpec(**d["vocab"])
    return d


def cmd_train(args) -> int:
    if args.resume:
        cfg = _load_run_config(args) if args.config else None
        trainer = Trainer.from_checkpoint(args.resume, cfg)
        if args.out:
            trainer.cfg = dataclasses.replace(trainer.cfg, out_dir=args.out)
        if args.steps is not None:
            trainer.cfg = dataclasses.replace(
                trainer.cfg,
                schedule=dataclasses.replace(trainer.cfg.schedule, total_steps=args.steps),
            )
    else:
        trainer = Trainer(_load_run_config(args))
    final = trainer.train()
    print(f"trained to step {trainer.step}; checkpoint at {trainer.cfg.out_dir}/ckpt_final.bin")
    print(f"cumulative FLOPs: {trainer.cum_flops:.3e}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    model, run_cfg = model_from_checkpoint(ckpt)
    mode = INFER if args.mode == "infer" else TRAIN
    aux = None
    if mode == INFER and model.cfg.has_routers:
        if not ckpt.has_aux:
            raise CheckpointError(
                "checkpoint holds no auxiliary routers; INFER mode refused "
                "(run train-aux first)"
            )
        aux = AuxRouterSet.from_tensors(ckpt.tensors)
    b = evaluate(
        model, run_cfg.corpus, mode=mode, aux=aux,
        n_batches=args.batches, batch_size=run_cfg.batch_size,
    )
    print(f"mode={args.mode} total={b.total:.4f}", end=" ")
    print(f"text={b.text_loss:.4f}" if b.text_loss is not None else "text=n/a", end=" ")
    print(f"image={b.image_loss:.4f}" if b.image_loss is not None else "image=n/a")
    return 0


def cmd_train_aux(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    model, run_cfg = model_from_checkpoint(ckpt)
    if not model.cfg.has_routers:
        raise ConfigError("model has no routed modules; nothing to distill")
    gen = CorpusGenerator(run_cfg.corpus)
    cfg = AuxTrainConfig(
        steps=args.steps,
        schedule=Schedule(
            peak_lr=args.lr, warmup_steps=max(1, args.steps // 10), total_steps=args.steps
        ),
        batch_size=run_cfg.batch_size,
    )
    aux, history = train_aux_routers(
        model, gen, cfg, seed=run_cfg.seed, data_start_index=int(ckpt.manifest["data_cursor"])
    )
    ckpt.tensors.update({k: v.data.copy() for k, v in aux.params.items()})
    out = args.out or args.ckpt
    ckpt.save(out)
    print(f"aux routers trained for {cfg.steps} steps -> {out}")
    for key, rate in sorted(history["agreement"].items()):
        print(f"  agreement {key}: {rate:.4f}")
    return 0


def cmd_upcycle(args) -> int:
    seed = Checkpoint.load(args.seed_ckpt)
    plan = UpcyclePlan(
        text_experts=args.text_experts,
        image_experts=args.image_experts,
        gumbel_stage_two=not args.no_gumbel,
    )
    out_ckpt, manifest = upcycle_checkpoint(seed, plan)
    out_ckpt.save(args.out)
    for line in manifest:
        print(line)
    print(f"upcycled checkpoint -> {args.out}")
    return 0


def cmd_flops(args) -> int:
    if args.arch:
        cfg = named_config(args.arch)
    elif args.config:
        with open(args.config) as f:
            cfg = ModelConfig.from_dict(json.load(f)["model"])
    else:
        raise ConfigError("flops needs --arch or --config")
    report = analysis.count_flops(cfg, image_fraction=args.image_fraction)
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return 0


def cmd_eta(args) -> int:
    sparse = analysis.curve_from_metrics(
        read_metrics(args.sparse), label=os.path.basename(args.sparse)
    )
    dense = analysis.curve_from_metrics(
        read_metrics(args.dense), label=os.path.basename(args.dense)
    )
    result = analysis.speedup_eta(sparse, dense)
    print(result)
    if args.out:
        analysis.write_eta_csv(args.out, [(sparse.label, dense.label, result)])
    return 0


def cmd_noise_sweep(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    model, run_cfg = model_from_checkpoint(ckpt)
    gen = CorpusGenerator(run_cfg.corpus)
    sigmas = [float(s) for s in args.sigmas.split(",")]
    result = analysis.noise_sensitivity_sweep(
        model, sigmas, gen, n_batches=args.batches, batch_size=run_cfg.batch_size
    )
    for sigma, loss in result["table"]:
        print(f"sigma={sigma:g} loss={loss:.4f}")
    print(f"monotone non-decreasing: {result['monotone_nondecreasing']}")
    if args.out:
        analysis.write_sensitivity_csv(args.out, result["table"])
    return 0


def cmd_latency_sim(args) -> int:
    rows = []
    for devices in (int(x) for x in args.devices.split(",")):
        aligned = analysis.simulate_step_latency(
            devices,
            analysis.aligned_mix_sampler(args.ratio),
            cost_text=args.cost_text,
            cost_image=args.cost_image,
            steps=args.steps,
            seed=args.seed,
        )
        skewed = analysis.simulate_step_latency(
            devices,
            analysis.skewed_mix_sampler(args.ratio),
            cost_text=args.cost_text,
            cost_image=args.cost_image,
            steps=args.steps,
            seed=args.seed,
        )
        rows += [(devices, "aligned", aligned), (devices, "skewed", skewed)]
        print(
            f"devices={devices}: aligned mean={aligned.mean:.1f} "
            f"skewed mean={skewed.mean:.1f}"
        )
    if args.out:
        analysis.write_latency_csv(args.out, rows)
    return 0


def cmd_gen_corpus(args) -> int:
    cfg = CorpusConfig(
        seed=args.seed,
        text_image_ratio=args.ratio,
        image_span_length=args.span,
        vocab=VocabSpec(args.text_vocab, args.image_vocab),
    )
    gen = CorpusGenerator(cfg)
    batches = [
        gen.generate_batch(args.batch_size, args.seq_len, batch_index=i)
        for i in range(args.batches)
    ]
    export_corpus(args.out, cfg, batches)
    print(f"wrote {args.batches} batches of {args.batch_size}x{args.seq_len} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moma", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--arch", choices=sorted(NAMED_ARCHS))
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--out", help="output directory")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--mode", choices=["train", "infer"], default="train")
    e.add_argument("--batches", type=int, default=10)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("train-aux", help="train auxiliary routers on a frozen model")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--out", help="output checkpoint (default: in place)")
    a.add_argument("--steps", type=int, default=2000)
    a.add_argument("--lr", type=float, default=1e-3)
    a.set_defaults(fn=cmd_train_aux)

    u = sub.add_parser("upcycle", help="expand a 1-expert-per-modality checkpoint")
    u.add_argument("--seed-ckpt", required=True)
    u.add_argument("--text-experts", type=int, required=True)
    u.add_argument("--image-experts", type=int, required=True)
    u.add_argument("--out", required=True)
    u.add_argument("--no-gumbel", action="store_true")
    u.set_defaults(fn=cmd_upcycle)

    f = sub.add_parser("flops", help="analytic per-token FLOPs report")
    f.add_argument("--arch", choices=sorted(NAMED_ARCHS))
    f.add_argument("--config")
    f.add_argument("--image-fraction", type=float, default=0.5)
    f.set_defaults(fn=cmd_flops)

    g = sub.add_parser("eta", help="speed-up factor between two metric streams")
    g.add_argument("--sparse", required=True, help="sparse run metrics.jsonl")
    g.add_argument("--dense", required=True, help="dense run metrics.jsonl")
    g.add_argument("--out", help="CSV output")
    g.set_defaults(fn=cmd_eta)

    n = sub.add_parser("noise-sweep", help="depth-router noise sensitivity")
    n.add_argument("--ckpt", required=True)
    n.add_argument("--sigmas", default="0,0.005,0.02,0.1,0.5")
    n.add_argument("--batches", type=int, default=10)
    n.add_argument("--out", help="CSV output")
    n.set_defaults(fn=cmd_noise_sweep)

    l = sub.add_parser("latency-sim", help="load-balance step latency simulation")
    l.add_argument("--devices", default="8")
    l.add_argument("--ratio", type=float, default=0.5)
    l.add_argument("--cost-text", type=float, default=1.0)
    l.add_argument("--cost-image", type=float, default=1.3)
    l.add_argument("--steps", type=int, default=10000)
    l.add_argument("--seed", type=int, default=0)
    l.add_argument("--out", help="CSV output")
    l.set_defaults(fn=cmd_latency_sim)

    c = sub.add_parser("gen-corpus", help="export a synthetic corpus file")
    c.add_argument("--out", required=True)
    c.add_argument("--batches", type=int, default=16)
    c.add_argument("--batch-size", type=int, default=8)
    c.add_argument("--seq-len", type=int, default=256)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--ratio", type=float, default=0.5)
    c.add_argument("--span", type=int, default=16)
    c.add_argument("--text-vocab", type=int, default=512)
    c.add_argument("--image-vocab", type=int, default=64)
    c.set_defaults(fn=cmd_gen_corpus)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
