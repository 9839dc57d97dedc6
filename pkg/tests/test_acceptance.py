"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL
line. The training-heavy criteria (6, 7, 8) share a cached run directory
(MOMA_ACCEPTANCE_DIR, default .acceptance/ in the repo root) and resume
interrupted runs, so a cold full pass costs a few hours on two cores while
re-runs are cheap.

Run with:  pytest tests/test_acceptance.py -s
"""

import dataclasses
import glob
import os
import sys

import numpy as np
import pytest

import moma.tensor as T
from moma.analysis import (
    LossCurve,
    aligned_mix_sampler,
    count_flops,
    curve_from_metrics,
    noise_sensitivity_sweep,
    simulate_step_latency,
    skewed_mix_sampler,
    speedup_eta,
)
from moma.aux_router import AuxRouterSet, AuxTrainConfig, train_aux_routers
from moma.checkpoint import Checkpoint
from moma.data import IMAGE, TEXT, CorpusConfig, CorpusGenerator, VocabSpec
from moma.metrics import read_metrics
from moma.model import (
    INFER,
    TRAIN,
    NAMED_ARCHS,
    StepStats,
    TransformerModel,
    named_config,
)
from moma.moma_layer import MIXED, moma_forward
from moma.optim import Schedule
from moma.routing import CapacitySpec, expert_choice_select
from moma.sweep import MICRO_SWEEP_STEPS, ensure_run, micro_sweep, micro_sweep_config
from moma.tensor import Tensor, no_grad
from moma.train import RunConfig, Trainer, evaluate, model_from_checkpoint
from moma.upcycle import UpcyclePlan, flops_adjusted_curve, upcycle_checkpoint

pytestmark = pytest.mark.acceptance

ACCEPT_ROOT = os.environ.get(
    "MOMA_ACCEPTANCE_DIR",
    os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), ".acceptance"),
)
SEEDS = (0, 1, 2)
SMOOTH_HALF_LIFE = 100


def report(number: int, name: str, ok: bool, detail: str = ""):
    line = f"[ACCEPTANCE] criterion {number:2d} ({name}): {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  -- {detail}"
    print(line, file=sys.__stdout__, flush=True)
    os.makedirs(ACCEPT_ROOT, exist_ok=True)
    with open(os.path.join(ACCEPT_ROOT, "report.txt"), "a") as f:
        f.write(line + "\n")


class _Criterion:
    def __init__(self, number, name):
        self.number, self.name = number, name
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        report(self.number, self.name, exc_type is None, self.detail)
        return False


MICRO = dict(
    layers=2, hidden_dim=16, ffn_dim=32, heads=2, seq_len=16,
    vocab=VocabSpec(64, 16), precision="f64",
)


def micro_corpus(seed=5):
    return CorpusConfig(seed=seed, vocab=VocabSpec(64, 16), image_span_length=4)


# -- shared heavy fixtures ----------------------------------------------------


@pytest.fixture(scope="session")
def sweep_dirs():
    """The full micro-sweep grid (reused by criteria 6 and 7)."""
    return micro_sweep(os.path.join(ACCEPT_ROOT, "sweep"), seeds=SEEDS, workers=2)


def final_smoothed_loss(run_dir: str) -> float:
    records = read_metrics(os.path.join(run_dir, "metrics.jsonl"), kind="step")
    curve = curve_from_metrics(records, smooth_half_life=SMOOTH_HALF_LIFE)
    return curve.final_loss


# -- criteria -----------------------------------------------------------------


def test_criterion_1_routing_exactness():
    """Every expert processes exactly k_e tokens, every depth layer exactly
    k_d, zero modality-isolation violations; 1k batches across all configs."""
    with _Criterion(1, "routing exactness") as c:
        rng = np.random.default_rng(0)
        corpus = CorpusConfig(seed=3)
        gen = CorpusGenerator(corpus)
        batches_per_config = 125
        checked = 0
        for arch in sorted(NAMED_ARCHS):
            cfg = named_config(arch)
            model = TransformerModel(
                dataclasses.replace(cfg, layers=min(cfg.layers, 2)), seed=0
            )
            for b in range(batches_per_config):
                batch = gen.generate_batch(2, 256, batch_index=rng.integers(1 << 20))
                stats = StepStats()
                with no_grad():
                    model.forward(batch, collect=stats)
                full_mask = batch.modality_mask.reshape(-1)
                for ms, ds in zip(stats.moma, stats.mod):
                    if ds is not None:
                        k_d = max(1, int(0.25 * ds.pool_size))
                        assert ds.selected == k_d, arch
                        # inside a depth-routed layer the expert pool indexes
                        # the gathered sub-block
                        layer_mask = full_mask[np.sort(ds.assignment.indices[0])]
                    else:
                        layer_mask = full_mask
                    if ms is None:
                        continue
                    for gs in ms.groups:
                        if gs.pool_size == 0:
                            continue
                        groups = len(gs.tokens_per_expert)
                        k_e = max(1, gs.pool_size // groups)
                        assert all(cnt == k_e for cnt in gs.tokens_per_expert), arch
                        pool_mask = layer_mask[gs.pool_indices]
                        if gs.modality != MIXED:
                            assert (pool_mask == gs.modality).all(), "isolation violated"
                checked += 1
        c.detail = f"{checked} batches over {len(NAMED_ARCHS)} configs"


def test_criterion_2_expert_mixture_oracle_equivalence():
    """Gate-weighted expert mixture equals the dense all-experts-masked
    reference within 1e-6 at 64-bit on 100 random micro-batches."""
    with _Criterion(2, "expert mixture vs dense reference") as c:
        from test_moma_layer import make_layer

        worst = 0.0
        for i in range(100):
            rng = np.random.default_rng(1000 + i)
            params = make_layer(d=16, ffn=32, text=3, image=2, seed=1000 + i)
            hidden = Tensor(rng.standard_normal((48, 16)))
            mask = (rng.random(48) < 0.5).astype(np.uint8)
            fast = moma_forward(hidden, mask, params)
            ref = moma_forward(hidden, mask, params, reference=True)
            worst = max(worst, float(np.abs(fast.data - ref.data).max()))
        assert worst < 1e-6
        c.detail = f"max abs deviation {worst:.2e} over 100 batches"


def test_criterion_3_gradient_integrity():
    """End-to-end finite differences at 64-bit on the micro config: max
    relative error < 1e-3; the depth router weight gets nonzero gradient."""
    with _Criterion(3, "gradient integrity") as c:
        cfg = named_config(
            "mod_moe_1t1i", layers=2, hidden_dim=16, ffn_dim=32, heads=2,
            seq_len=16, vocab=VocabSpec(64, 16), precision="f64",
            text_experts=2, image_experts=2,
        )
        model = TransformerModel(cfg, seed=14)
        gen = CorpusGenerator(micro_corpus())
        batch = gen.generate_batch(2, 16, batch_index=0)
        model.zero_grad()
        loss, _ = model.loss(batch)
        loss.backward()
        mod_grad = model.params["layer.0.mod_router.w"].grad
        assert mod_grad is not None and np.abs(mod_grad).sum() > 0
        grads = {n: t.grad.copy() for n, t in model.params.items() if t.grad is not None}
        rng = np.random.default_rng(15)
        worst = 0.0
        for name in [
            "embed.tokens", "head.w", "layer.0.mod_router.w", "layer.0.attn.wq",
            "layer.1.attn.wo", "layer.0.attn_norm.scale", "layer.1.moma_norm.scale",
            "layer.0.moma.text.router.w", "layer.1.moma.image.router.w",
            "layer.0.moma.text.expert_1.w_gate", "layer.1.moma.image.expert_0.w_out",
        ]:
            p = model.params[name]
            base = p.data.copy()
            for i in rng.choice(base.size, size=min(4, base.size), replace=False):
                orig = base.reshape(-1)[i]

                def at(v):
                    p.data = base.copy()
                    p.data.reshape(-1)[i] = v
                    with T.ComputationTape(), no_grad():
                        val, _ = model.loss(batch)
                    return float(val.data)

                fd = (at(orig + 1e-6) - at(orig - 1e-6)) / 2e-6
                p.data = base
                ad = grads[name].reshape(-1)[i]
                if abs(ad - fd) < 1e-8:
                    continue
                worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd)))
        assert worst < 1e-3
        c.detail = f"max relative error {worst:.2e}"


def _prefix_pair(seq=16, t=8, index=0):
    gen = CorpusGenerator(micro_corpus())
    b1 = gen.generate_batch(1, seq, batch_index=index)
    b2 = gen.generate_batch(1, seq, batch_index=index + 1)
    b2.tokens[:, :t] = b1.tokens[:, :t]
    b2.modality_mask[:, :t] = b1.modality_mask[:, :t]
    return b1, b2, t


def test_criterion_4_causality():
    """With trained aux routers, prefix logits are bitwise equal in INFER
    mode for every sparse config; TRAIN mode breaks the same test."""
    with _Criterion(4, "causality (aux inference vs batch top-k)") as c:
        sparse = [a for a in sorted(NAMED_ARCHS) if a != "dense"]
        gen = CorpusGenerator(micro_corpus())
        for arch in sparse:
            kw = dict(MICRO)
            cfg = named_config(arch, **kw) if not arch.startswith("mod") else named_config(
                arch, **{**kw, "layers": 2}
            )
            run = RunConfig(
                model=cfg, corpus=micro_corpus(),
                schedule=Schedule(peak_lr=3e-3, warmup_steps=20, total_steps=200),
                batch_size=2, seed=3, out_dir="/tmp/accept_causality",
            )
            trainer = Trainer(run)
            for _ in range(200):
                trainer.train_step()
            tcfg = AuxTrainConfig(
                steps=200, schedule=Schedule(peak_lr=3e-3, warmup_steps=20, total_steps=200),
                batch_size=2, eval_batches=1,
            )
            aux, _ = train_aux_routers(trainer.model, gen, tcfg, seed=4, data_start_index=300)
            b1, b2, t = _prefix_pair()
            l1 = trainer.model.incremental_logits(b1.tokens, b1.modality_mask, aux)
            l2 = trainer.model.incremental_logits(b2.tokens, b2.modality_mask, aux)
            assert np.array_equal(l1[:, :t], l2[:, :t]), f"{arch}: prefix differs in INFER"
        # negative direction: batch top-k violates the prefix test
        model = TransformerModel(named_config("moe_4t4i", **MICRO), seed=8)
        b1, b2, t = _prefix_pair()
        with no_grad():
            l1 = model.forward(b1).data
            l2 = model.forward(b2).data
        assert not np.array_equal(l1[:, :t], l2[:, :t]), "TRAIN mode unexpectedly causal"
        c.detail = f"{len(sparse)} sparse configs bitwise causal; TRAIN-mode break shown"


def test_criterion_5_flops_matching():
    """FFN-path parity exact for capacity-matched configs, depth-adjusted
    totals within 10%, instrumented counter within 1% of analytic."""
    with _Criterion(5, "FLOPs matching") as c:
        dense = count_flops(named_config("dense"))
        for arch in ("moe_1t1i", "moe_4t4i", "moe_8x", "moe_7t1i", "moe_6t2i"):
            assert count_flops(named_config(arch)).ffn == dense.ffn
        paper_common = dict(
            hidden_dim=512, ffn_dim=2048, heads=8, seq_len=4096,
            vocab=VocabSpec(65536, 8192),
        )
        d90 = count_flops(named_config("dense", layers=8, **paper_common))
        mod = count_flops(
            named_config("mod_moe_1t1i", layers=14, mixed_experts=1,
                         text_experts=0, image_experts=0, **paper_common)
        )
        depth_ratio = mod.total / d90.total
        assert abs(depth_ratio - 1.0) < 0.10
        cfg = named_config(
            "moe_4t4i", layers=2, hidden_dim=16, ffn_dim=32, heads=2, seq_len=16,
            vocab=VocabSpec(64, 16), text_experts=2, image_experts=2,
        )
        model = TransformerModel(cfg, seed=0)
        batch = CorpusGenerator(micro_corpus(seed=1)).generate_batch(4, 16, batch_index=0)
        with T.mac_counter.counting(), no_grad():
            model.forward(batch)
            measured = T.mac_counter.flops
        analytic = count_flops(cfg).total * batch.tokens.size
        counter_err = abs(measured / analytic - 1.0)
        assert counter_err < 0.01
        c.detail = (
            f"FFN parity exact; depth-adjusted ratio {depth_ratio:.3f}; "
            f"counter vs analytic {counter_err:.2%}"
        )


@pytest.mark.slow
def test_criterion_6_desk_scale_scaling_direction(sweep_dirs):
    """Final smoothed training loss: moe_4t4i < moe_1t1i < dense with gaps
    exceeding 3x the cross-seed spread; depth-routed variant at least
    matches moe_4t4i."""
    with _Criterion(6, "desk-scale scaling direction") as c:
        losses = {
            arch: np.array([final_smoothed_loss(sweep_dirs[(arch, s)]) for s in SEEDS])
            for arch in ("dense", "moe_1t1i", "moe_4t4i", "moe_8x", "mod_moe_4t4i")
        }
        mean = {a: v.mean() for a, v in losses.items()}
        std = {a: v.std(ddof=1) for a, v in losses.items()}
        gap1 = mean["dense"] - mean["moe_1t1i"]
        spread1 = max(std["dense"], std["moe_1t1i"])
        gap2 = mean["moe_1t1i"] - mean["moe_4t4i"]
        spread2 = max(std["moe_1t1i"], std["moe_4t4i"])
        assert gap1 > 0 and gap1 > 3 * spread1, (mean, std)
        assert gap2 > 0 and gap2 > 3 * spread2, (mean, std)
        assert mean["mod_moe_4t4i"] <= mean["moe_4t4i"], (mean, std)
        c.detail = (
            f"dense {mean['dense']:.4f} > moe_1t1i {mean['moe_1t1i']:.4f} > "
            f"moe_4t4i {mean['moe_4t4i']:.4f} >= mod {mean['mod_moe_4t4i']:.4f}; "
            f"gaps {gap1:.4f}/{gap2:.4f} vs spreads {spread1:.4f}/{spread2:.4f}"
        )


@pytest.fixture(scope="session")
def upcycle_runs(sweep_dirs):
    """Seed-stage (8%) + stage-two runs for each seed, cached like the sweep."""
    root = os.path.join(ACCEPT_ROOT, "upcycle")
    seed_steps = int(0.08 * MICRO_SWEEP_STEPS)
    out = {}
    for s in SEEDS:
        stage1_cfg = dataclasses.replace(
            micro_sweep_config("moe_1t1i", s, root),
            out_dir=os.path.join(root, f"stage1_seed{s}"),
            schedule=Schedule(peak_lr=3e-3, warmup_steps=250, total_steps=MICRO_SWEEP_STEPS),
        )
        stage1_dir = _ensure_partial_run(stage1_cfg, seed_steps)
        stage2_dir = os.path.join(root, f"stage2_seed{s}")
        final = os.path.join(stage2_dir, "ckpt_final.bin")
        if not os.path.exists(final):
            seed_ckpt = Checkpoint.load(os.path.join(stage1_dir, f"ckpt_{seed_steps:07d}.bin"))
            up_ckpt, _ = upcycle_checkpoint(
                seed_ckpt, UpcyclePlan(4, 4, gumbel_stage_two=True, router_seed=s)
            )
            stage2_steps = MICRO_SWEEP_STEPS - seed_steps
            run_cfg = RunConfig.from_dict(up_ckpt.manifest["run_config"])
            run_cfg = dataclasses.replace(
                run_cfg,
                out_dir=stage2_dir,
                schedule=dataclasses.replace(run_cfg.schedule, total_steps=stage2_steps),
            )
            up_ckpt.manifest["run_config"] = run_cfg.to_dict()
            os.makedirs(stage2_dir, exist_ok=True)
            up_path = os.path.join(stage2_dir, "upcycled_init.bin")
            up_ckpt.save(up_path)
            trainer = Trainer.from_checkpoint(up_path)
            trainer.train()
        out[s] = (stage1_dir, stage2_dir, seed_steps)
    return out


def _ensure_partial_run(cfg: RunConfig, upto: int) -> str:
    marker = os.path.join(cfg.out_dir, f"ckpt_{upto:07d}.bin")
    if not os.path.exists(marker):
        if os.path.isdir(cfg.out_dir):
            for stale in glob.glob(os.path.join(cfg.out_dir, "*")):
                os.remove(stale)
        trainer = Trainer(cfg)
        os.makedirs(cfg.out_dir, exist_ok=True)
        from moma.metrics import MetricsWriter

        with MetricsWriter(os.path.join(cfg.out_dir, "metrics.jsonl")) as w:
            trainer.train(steps=upto, writer=w)
            trainer.make_checkpoint().save(marker)
    return cfg.out_dir


@pytest.mark.slow
def test_criterion_7_upcycling_identity_and_benefit(sweep_dirs, upcycle_runs):
    """Identity upcycle is bitwise; expert copies checksum-equal; the
    FLOPs-adjusted upcycled curve reaches the from-scratch final loss with
    fewer cumulative FLOPs in at least 2 of 3 seeds."""
    with _Criterion(7, "upcycling identity and benefit") as c:
        # identity + replication checks on a freshly trained tiny seed
        run = RunConfig(
            model=named_config("moe_1t1i", **{**MICRO, "precision": "f32"}),
            corpus=micro_corpus(),
            schedule=Schedule(peak_lr=3e-3, warmup_steps=2, total_steps=10),
            batch_size=2, seed=0, out_dir="/tmp/accept_upcycle",
        )
        tr = Trainer(run)
        for _ in range(10):
            tr.train_step()
        seed_ckpt = tr.make_checkpoint()
        ident, _ = upcycle_checkpoint(seed_ckpt, UpcyclePlan(1, 1))
        for name, arr in seed_ckpt.tensors.items():
            if name.startswith("opt.") or ".router." in name:
                continue
            assert np.array_equal(ident.tensors[name], arr)
        expanded, _ = upcycle_checkpoint(seed_ckpt, UpcyclePlan(4, 4))
        for layer in range(2):
            for group in ("text", "image"):
                for mat in ("w_in", "w_gate", "w_out"):
                    src = seed_ckpt.tensors[f"layer.{layer}.moma.{group}.expert_0.{mat}"]
                    for e in range(4):
                        assert np.array_equal(
                            expanded.tensors[f"layer.{layer}.moma.{group}.expert_{e}.{mat}"], src
                        )
        # benefit: merged upcycled curve beats from-scratch in >= 2 of 3 seeds
        wins = 0
        details = []
        for s in SEEDS:
            stage1_dir, stage2_dir, seed_steps = upcycle_runs[s]
            scratch = curve_from_metrics(
                read_metrics(os.path.join(sweep_dirs[("moe_4t4i", s)], "metrics.jsonl"), "step"),
                smooth_half_life=SMOOTH_HALF_LIFE,
            )
            s1_records = read_metrics(os.path.join(stage1_dir, "metrics.jsonl"), "step")
            s1_records = [r for r in s1_records if r["step"] <= seed_steps]
            stage1 = curve_from_metrics(s1_records, smooth_half_life=SMOOTH_HALF_LIFE)
            stage2 = curve_from_metrics(
                read_metrics(os.path.join(stage2_dir, "metrics.jsonl"), "step"),
                smooth_half_life=SMOOTH_HALF_LIFE,
            )
            merged = flops_adjusted_curve(stage1, stage2, stage1.total_flops)
            result = speedup_eta(merged, scratch)
            if result.reached and result.eta > 1.0:
                wins += 1
            details.append(f"seed{s}: eta {result.eta:.3f}" if result.reached else f"seed{s}: not reached")
        assert wins >= 2, details
        c.detail = "identity/checksums ok; " + ", ".join(details)


@pytest.mark.slow
def test_criterion_8_depth_noise_sensitivity(sweep_dirs):
    """Eval loss non-decreasing in sigma (averaged over seeds and >=10
    batches) and inference-mode loss exceeding train-mode loss for the
    depth-routed config."""
    with _Criterion(8, "depth-router noise sensitivity") as c:
        sigmas = [0.0, 0.005, 0.02, 0.1, 0.5]
        per_seed = []
        for s in SEEDS:
            ckpt = Checkpoint.load(os.path.join(sweep_dirs[("mod_moe_4t4i", s)], "ckpt_final.bin"))
            model, run_cfg = model_from_checkpoint(ckpt)
            gen = CorpusGenerator(run_cfg.corpus)
            out = noise_sensitivity_sweep(
                model, sigmas, gen, n_batches=10, batch_size=run_cfg.batch_size, noise_seed=s
            )
            per_seed.append([loss for _, loss in out["table"]])
        mean_curve = np.mean(per_seed, axis=0)
        assert all(b >= a - 1e-9 for a, b in zip(mean_curve, mean_curve[1:])), mean_curve
        assert mean_curve[-1] >= mean_curve[2]  # sigma=1.0-style extreme vs small

        # INFER vs TRAIN gap on seed 0 with trained aux routers
        ckpt = Checkpoint.load(os.path.join(sweep_dirs[("mod_moe_4t4i", 0)], "ckpt_final.bin"))
        model, run_cfg = model_from_checkpoint(ckpt)
        gen = CorpusGenerator(run_cfg.corpus)
        aux_cache = os.path.join(ACCEPT_ROOT, "aux_mod_seed0.bin")
        if os.path.exists(aux_cache):
            aux = AuxRouterSet.from_tensors(Checkpoint.load(aux_cache).tensors)
        else:
            aux, _ = train_aux_routers(
                model, gen, AuxTrainConfig(), seed=0,
                data_start_index=int(ckpt.manifest["data_cursor"]),
            )
            Checkpoint(
                manifest={"kind": "aux-only"},
                tensors={k: v.data.copy() for k, v in aux.params.items()},
            ).save(aux_cache)
        train_eval = evaluate(model, run_cfg.corpus, mode=TRAIN, n_batches=10, batch_size=8)
        infer_eval = evaluate(
            model, run_cfg.corpus, mode=INFER, aux=aux, n_batches=10, batch_size=8
        )
        assert infer_eval.total > train_eval.total
        c.detail = (
            f"sigma curve {np.round(mean_curve, 4).tolist()}; "
            f"INFER {infer_eval.total:.4f} > TRAIN {train_eval.total:.4f}"
        )


def test_criterion_9_speedup_factor():
    """Analytic power-law fixture reproduces the closed-form speed-up
    within 1%; identical curves give exactly 1."""
    with _Criterion(9, "speed-up factor computation") as c:
        flops = np.linspace(1.0, 1000.0, 5000)
        a_d, b_d, a_s, b_s = 10.0, 0.20, 9.0, 0.25
        dense = LossCurve(flops, a_d * flops ** (-b_d))
        sparse = LossCurve(flops, a_s * flops ** (-b_s))
        target = a_d * 1000.0 ** (-b_d)
        expect = 1000.0 / (target / a_s) ** (-1.0 / b_s)
        got = speedup_eta(sparse, dense)
        assert got.reached and abs(got.eta / expect - 1.0) < 0.01
        same = LossCurve(flops, dense.loss)
        assert speedup_eta(same, dense).eta == 1.0
        c.detail = f"closed form {expect:.4f} vs computed {got.eta:.4f}; identical-curve eta exactly 1"


def test_criterion_10_load_balance_simulation():
    """Aligned token mix beats a skewed mix on simulated step latency at 8
    devices, and the gap widens from 2 to 32 devices."""
    with _Criterion(10, "load-balance latency simulation") as c:
        gaps = {}
        for devices in (2, 8, 32):
            a = simulate_step_latency(
                devices, aligned_mix_sampler(0.5), steps=10_000, seed=11
            )
            k = simulate_step_latency(
                devices, skewed_mix_sampler(0.5), steps=10_000, seed=11
            )
            gaps[devices] = k.mean - a.mean
        assert gaps[8] > 0
        assert gaps[2] < gaps[8] < gaps[32]
        c.detail = f"gaps by device count: {{2: {gaps[2]:.1f}, 8: {gaps[8]:.1f}, 32: {gaps[32]:.1f}}}"


def test_criterion_11_reproducibility_plumbing(tmp_path):
    """Kill-and-resume equality, fixed-seed metric-stream equality, and
    byte-identical checkpoint round-trips."""
    with _Criterion(11, "reproducibility plumbing") as c:
        def cfg(out, steps=16):
            return RunConfig(
                model=named_config("moe_1t1i", **{**MICRO, "precision": "f32"}),
                corpus=micro_corpus(seed=9),
                schedule=Schedule(peak_lr=3e-3, warmup_steps=4, total_steps=steps),
                batch_size=2, seed=2, out_dir=str(tmp_path / out),
            )

        full = Trainer(cfg("full"))
        full_losses = [full.train_step()[0].total for _ in range(16)]
        part = Trainer(cfg("part"))
        for _ in range(8):
            part.train_step()
        mid = str(tmp_path / "mid.bin")
        part.make_checkpoint().save(mid)
        resumed = Trainer.from_checkpoint(mid)
        resumed_losses = [resumed.train_step()[0].total for _ in range(8)]
        assert resumed_losses == full_losses[8:]

        streams = []
        for name in ("s1", "s2"):
            Trainer(cfg(name, steps=8)).train()
            streams.append(open(str(tmp_path / name / "metrics.jsonl")).read())
        assert streams[0] == streams[1]

        p1, p2 = str(tmp_path / "r1.bin"), str(tmp_path / "r2.bin")
        full.make_checkpoint().save(p1)
        Checkpoint.load(p1).save(p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()
        c.detail = "resume equality, stream equality, byte-identical round trip"
