"""FLOPs accounting, compute matching, speed-up factor, router-noise
sensitivity, and the load-balance step-latency simulator.

Counting convention (pinned so compute matching is reproducible): one
multiply-accumulate = 2 FLOPs; attention score and value mixing matmuls
count, softmax/normalization/router nonlinearities do not (sub-1% at these
shapes); embedding lookups are excluded. Expert paths count only the
capacity-selected slots; depth-routed layers count only their selected
fraction, with attention shrinking quadratically.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import IMAGE, TEXT
from .errors import ConfigError, ContractError
from .model import ModelConfig

EMA_HALF_LIFE = 100  # steps; smoothing applied before curve intersection


# ---------------------------------------------------------------------------
# FLOPs


@dataclass
class FlopsReport:
    """Per-token forward FLOPs split by component and by token modality."""

    attention: float
    ffn: float
    router: float
    head: float
    per_modality: dict[str, float]

    @property
    def total(self) -> float:
        return self.attention + self.ffn + self.router + self.head

    def as_dict(self) -> dict:
        return {
            "attention": self.attention,
            "ffn": self.ffn,
            "router": self.router,
            "head": self.head,
            "total": self.total,
            "per_modality": dict(self.per_modality),
        }


def count_flops(cfg: ModelConfig, image_fraction: float = 0.5) -> FlopsReport:
    """Analytic per-token forward FLOPs for a configuration.

    `image_fraction` weights the modality-dependent router cost into the
    overall figure; every other component is mix-independent because
    capacity-selected expert slots always sum to the token count.
    """
    d, ffn, s = cfg.hidden_dim, cfg.ffn_dim, cfg.seq_len
    mac = 2.0  # FLOPs per multiply-accumulate

    def group_router_macs(modality: int) -> float:
        if cfg.dense:
            return 0.0
        total = 0.0
        for tag, size in cfg.group_sizes:
            from .moma_layer import MIXED

            if tag == MIXED or tag == modality:
                total += d * size
        return total

    def layer_macs(modality: int, mod_layer: bool) -> float:
        qkvo = 4 * d * d
        scores_mix = 2 * s * d
        expert = 3 * d * ffn
        router = group_router_macs(modality)
        if not mod_layer:
            return qkvo + scores_mix + expert + router
        c = cfg.mod_capacity
        # selected tokens attend over the selected fraction of the context
        inner = qkvo + 2 * (c * s) * d + expert + router
        return c * inner + d * 1  # depth router scores every token

    flags = cfg.mod_layers()
    per_modality: dict[str, float] = {}
    comp = {"attention": 0.0, "ffn": 0.0, "router": 0.0}
    for modality, name in ((TEXT, "text"), (IMAGE, "image")):
        total = sum(layer_macs(modality, f) for f in flags)
        per_modality[name] = mac * (total + d * cfg.vocab.unified_size)
    weight = {"text": 1.0 - image_fraction, "image": image_fraction}
    for f in flags:
        c = cfg.mod_capacity if f else 1.0
        s_ctx = cfg.mod_capacity * s if f else s
        comp["attention"] += c * (4 * d * d + 2 * s_ctx * d)
        comp["ffn"] += c * 3 * d * ffn
        router_avg = sum(
            weight[name] * group_router_macs(m) for m, name in ((TEXT, "text"), (IMAGE, "image"))
        )
        comp["router"] += c * router_avg + (d if f else 0)
    return FlopsReport(
        attention=mac * comp["attention"],
        ffn=mac * comp["ffn"],
        router=mac * comp["router"],
        head=mac * d * cfg.vocab.unified_size,
        per_modality=per_modality,
    )


def train_step_flops(cfg: ModelConfig, tokens_per_step: int, image_fraction: float = 0.5) -> float:
    """Forward+backward cost of one optimizer step (backward ~ 2x forward)."""
    return 3.0 * count_flops(cfg, image_fraction).total * tokens_per_step


# ---------------------------------------------------------------------------
# loss curves and the speed-up factor


@dataclass
class LossCurve:
    flops: np.ndarray
    loss: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.flops = np.asarray(self.flops, dtype=np.float64)
        self.loss = np.asarray(self.loss, dtype=np.float64)
        if self.flops.shape != self.loss.shape or self.flops.ndim != 1:
            raise ContractError("curve arrays must be equal-length 1-d")
        if self.flops.size and np.any(np.diff(self.flops) <= 0):
            raise ContractError("cumulative FLOPs must be strictly increasing")

    @property
    def final_loss(self) -> float:
        return float(self.loss[-1])

    @property
    def total_flops(self) -> float:
        return float(self.flops[-1])


def ema_smooth(values: np.ndarray, half_life: float = EMA_HALF_LIFE) -> np.ndarray:
    """Exponential moving average with the given half-life in samples."""
    values = np.asarray(values, dtype=np.float64)
    if half_life <= 0 or values.size == 0:
        return values.copy()
    alpha = 1.0 - 0.5 ** (1.0 / half_life)
    out = np.empty_like(values)
    acc = values[0]
    for i, x in enumerate(values):
        acc += alpha * (x - acc)
        out[i] = acc
    return out


def curve_from_metrics(
    records: list[dict],
    loss_key: str = "total",
    smooth_half_life: float | None = EMA_HALF_LIFE,
    label: str = "",
) -> LossCurve:
    """Build a (cumulative FLOPs, loss) curve from step metric records."""
    pairs = [
        (r["cum_flops"], r["loss"][loss_key])
        for r in records
        if r.get("kind") == "step" and r["loss"].get(loss_key) is not None
    ]
    if not pairs:
        raise ContractError(f"no step records with loss {loss_key!r}")
    flops = np.asarray([p[0] for p in pairs])
    loss = np.asarray([p[1] for p in pairs])
    if smooth_half_life:
        loss = ema_smooth(loss, smooth_half_life)
    return LossCurve(flops, loss, label=label)


@dataclass
class EtaResult:
    reached: bool
    eta: Optional[float]
    target_loss: float
    dense_total_flops: float
    sparse_flops_at_target: Optional[float]

    def __str__(self):
        if not self.reached:
            return f"eta: not reached (target loss {self.target_loss:.4f})"
        return f"eta = {self.eta:.3f} (target loss {self.target_loss:.4f})"


def speedup_eta(sparse: LossCurve, dense: LossCurve) -> EtaResult:
    """dense total FLOPs divided by the FLOPs at which the sparse curve
    first reaches the dense curve's final loss (linear interpolation).
    Returns a not-reached result instead of a number when it never does."""
    target = dense.final_loss
    below = np.nonzero(sparse.loss <= target)[0]
    if below.size == 0:
        return EtaResult(False, None, target, dense.total_flops, None)
    i = int(below[0])
    if i == 0 or sparse.loss[i] == target:
        f_at = float(sparse.flops[i])
    else:
        l0, l1 = sparse.loss[i - 1], sparse.loss[i]
        f0, f1 = sparse.flops[i - 1], sparse.flops[i]
        t = (l0 - target) / (l0 - l1)
        f_at = float(f0 + t * (f1 - f0))
    return EtaResult(True, dense.total_flops / f_at, target, dense.total_flops, f_at)


# ---------------------------------------------------------------------------
# router-noise sensitivity (depth routers)


def noise_sensitivity_sweep(
    model,
    sigmas: list[float],
    generator,
    n_batches: int = 10,
    batch_size: int = 8,
    noise_seed: int = 0,
    start_index: int = 1 << 21,
) -> dict:
    """Evaluate train-mode loss with each depth layer's selection perturbed
    at noise ratio sigma; the same eval batches are reused across sigmas.
    Returns the (sigma, loss) table and a monotonicity verdict."""
    from .model import TransformerModel
    from .tensor import no_grad

    assert isinstance(model, TransformerModel)
    if not model.cfg.mod_enabled:
        raise ConfigError("noise sweep requires a depth-routed model")
    table = []
    for si, sigma in enumerate(sigmas):
        if not 0.0 <= sigma <= 1.0:
            raise ConfigError(f"sigma must be in [0,1], got {sigma}")
        rng = np.random.default_rng(np.random.SeedSequence([noise_seed, 7, si]))
        losses = []
        weights = []
        for b in range(n_batches):
            batch = generator.generate_batch(
                batch_size, model.cfg.seq_len, batch_index=start_index + b
            )
            with no_grad():
                perturb = (sigma, rng) if sigma > 0 else None
                _, breakdown = model.loss(batch, mod_perturb=perturb)
            losses.append(breakdown.total)
            weights.append(batch.tokens.size)
        table.append((float(sigma), float(np.average(losses, weights=weights))))
    loss_vals = [loss for _, loss in table]
    return {
        "table": table,
        "monotone_nondecreasing": all(
            b >= a - 1e-12 for a, b in zip(loss_vals, loss_vals[1:])
        ),
    }


# ---------------------------------------------------------------------------
# step-latency simulation (sequential-by-modality expert execution)


@dataclass
class LatencyStats:
    mean: float
    p50: float
    p90: float
    p99: float
    variance: float
    samples: np.ndarray

    @staticmethod
    def from_samples(samples: np.ndarray) -> "LatencyStats":
        return LatencyStats(
            mean=float(samples.mean()),
            p50=float(np.percentile(samples, 50)),
            p90=float(np.percentile(samples, 90)),
            p99=float(np.percentile(samples, 99)),
            variance=float(samples.var()),
            samples=samples,
        )


def aligned_mix_sampler(target_fraction: float, spans_per_batch: int = 64) -> Callable:
    """Per-device image fraction concentrated at the target (batch composed
    of whole spans, so the realized mix is a binomial around the target)."""

    def sample(rng: np.random.Generator, devices: int) -> np.ndarray:
        return rng.binomial(spans_per_batch, target_fraction, size=devices) / spans_per_batch

    return sample


def skewed_mix_sampler(mean_fraction: float, concentration: float = 2.0) -> Callable:
    """High-variance per-device mix with the same mean: Beta-distributed."""
    a = mean_fraction * concentration
    b = (1.0 - mean_fraction) * concentration

    def sample(rng: np.random.Generator, devices: int) -> np.ndarray:
        return rng.beta(a, b, size=devices)

    return sample


def constant_mix_sampler(fraction: float) -> Callable:
    def sample(rng: np.random.Generator, devices: int) -> np.ndarray:
        return np.full(devices, fraction)

    return sample


def simulate_step_latency(
    devices: int,
    mix_sampler: Callable | None = None,
    expert_allocation: tuple[int, int] = (4, 4),
    cost_text: float = 1.0,
    cost_image: float = 1.3,
    tokens_per_device: int = 2048,
    steps: int = 10000,
    seed: int = 0,
) -> LatencyStats:
    """Each device's step cost is text_tokens*cost_text + image_tokens*cost_image;
    step latency is the slowest device. With no sampler given, the mix is
    aligned to the expert allocation ratio."""
    if cost_text <= 0 or cost_image <= 0:
        raise ConfigError("per-token costs must be positive")
    if devices < 1:
        raise ConfigError("need at least one device")
    if mix_sampler is None:
        m, n = expert_allocation
        mix_sampler = aligned_mix_sampler(n / (m + n))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
    lat = np.empty(steps)
    for t in range(steps):
        f = np.clip(mix_sampler(rng, devices), 0.0, 1.0)
        image = np.round(f * tokens_per_device)
        text = tokens_per_device - image
        cost = text * cost_text + image * cost_image
        lat[t] = cost.max()
    return LatencyStats.from_samples(lat)


# ---------------------------------------------------------------------------
# CSV emission


_SCHEMA_DOC = """CSV column reference

loss_curve.csv: step, cum_flops, loss_total, loss_text, loss_image
  One row per logged training step; losses in nats/token; cum_flops uses
  the 2-FLOPs-per-MAC convention with backward counted as 2x forward.

eta.csv: sparse_label, dense_label, reached, eta, target_loss, dense_total_flops, sparse_flops_at_target
  Speed-up factor per sparse/dense curve pair; eta empty when not reached.

sensitivity.csv: sigma, eval_loss
  Train-mode eval loss with depth-router selections perturbed at ratio sigma.

latency.csv: devices, sampler, mean, p50, p90, p99, variance
  Simulated step-latency statistics (cost units, max over devices).
"""


def write_schema_file(out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "SCHEMA.txt")
    with open(path, "w") as f:
        f.write(_SCHEMA_DOC)
    return path


def write_loss_curve_csv(path: str, records: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "cum_flops", "loss_total", "loss_text", "loss_image"])
        for r in records:
            if r.get("kind") != "step":
                continue
            w.writerow(
                [
                    r["step"],
                    r["cum_flops"],
                    r["loss"]["total"],
                    r["loss"].get("text"),
                    r["loss"].get("image"),
                ]
            )


def write_eta_csv(path: str, rows: list[tuple[str, str, EtaResult]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            [
                "sparse_label",
                "dense_label",
                "reached",
                "eta",
                "target_loss",
                "dense_total_flops",
                "sparse_flops_at_target",
            ]
        )
        for sparse_label, dense_label, r in rows:
            w.writerow(
                [
                    sparse_label,
                    dense_label,
                    int(r.reached),
                    r.eta if r.reached else "",
                    r.target_loss,
                    r.dense_total_flops,
                    r.sparse_flops_at_target if r.reached else "",
                ]
            )


def write_sensitivity_csv(path: str, table: list[tuple[float, float]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sigma", "eval_loss"])
        w.writerows(table)


def write_latency_csv(path: str, rows: list[tuple[int, str, LatencyStats]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["devices", "sampler", "mean", "p50", "p90", "p99", "variance"])
        for devices, sampler, st in rows:
            w.writerow([devices, sampler, st.mean, st.p50, st.p90, st.p99, st.variance])
