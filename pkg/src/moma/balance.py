"""Batch-composition policy: keep the realized token modality mix aligned
with the expert allocation, and audit the deviation over a running window.

Enforcement operates on whole image spans (spans are atomic): each batch
row gets the span count whose image fraction lands nearest the target.
Composition is demand-driven, so no generated token is ever dropped; the
audit keeps per-batch deviations and flags tolerance violations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import IMAGE, CorpusGenerator, TokenBatch
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class MixPolicy:
    target_image_fraction: float
    tolerance: float = 0.05
    window: int = 100

    def __post_init__(self):
        if not 0.0 < self.target_image_fraction < 1.0:
            raise ConfigError(
                f"target fraction must be in (0,1), got {self.target_image_fraction}"
            )
        if self.tolerance <= 0:
            raise ConfigError("tolerance must be positive")


@dataclass
class AuditReport:
    batches: int
    min_deviation: float
    mean_deviation: float
    max_deviation: float
    flagged: int  # batches whose deviation met or exceeded tolerance


class BatchComposer:
    def __init__(self, policy: MixPolicy, generator: CorpusGenerator):
        self.policy = policy
        self.generator = generator
        self.deviations: list[float] = []
        self.tokens_generated = 0
        self.tokens_delivered = 0

    def _span_count(self, seq_len: int) -> int | None:
        """None means pass-through (generator's natural mix already matches
        the target exactly); otherwise the forced per-row span count."""
        cfg = self.generator.cfg
        span = cfg.image_span_length
        target_expect = self.policy.target_image_fraction * seq_len / span
        natural_expect = cfg.text_image_ratio * seq_len / span
        if (
            abs(cfg.text_image_ratio - self.policy.target_image_fraction) < 1e-12
            and abs(natural_expect - round(natural_expect)) < 1e-12
        ):
            return None
        n = int(round(target_expect))
        n = max(0, min(n, seq_len // span))
        realized = n * span / seq_len
        if abs(realized - self.policy.target_image_fraction) >= self.policy.tolerance:
            raise ConfigError(
                f"span quantization ({span}/{seq_len}) cannot hit target "
                f"{self.policy.target_image_fraction} within tolerance {self.policy.tolerance}"
            )
        return n

    def compose_batch(self, batch: int, seq_len: int, batch_index: int = 0) -> TokenBatch:
        forced = self._span_count(seq_len)
        try:
            tb = self.generator.generate_batch(
                batch, seq_len, batch_index=batch_index, spans_per_row=forced
            )
        except StopIteration as e:
            raise DataError("token generator exhausted") from e
        realized = float((tb.modality_mask == IMAGE).mean())
        deviation = abs(realized - self.policy.target_image_fraction)
        self.deviations.append(deviation)
        n = tb.tokens.size
        self.tokens_generated += n
        self.tokens_delivered += n
        if deviation >= self.policy.tolerance:
            raise DataError(
                f"composed batch missed target: realized {realized:.4f} vs "
                f"{self.policy.target_image_fraction:.4f} (tolerance {self.policy.tolerance})"
            )
        return tb

    def audit_report(self, window: int | None = None) -> AuditReport:
        window = window if window is not None else self.policy.window
        if not self.deviations:
            raise DataError("audit window is empty: no batches observed")
        devs = np.asarray(self.deviations[-window:])
        return AuditReport(
            batches=int(devs.size),
            min_deviation=float(devs.min()),
            mean_deviation=float(devs.mean()),
            max_deviation=float(devs.max()),
            flagged=int((devs >= self.policy.tolerance).sum()),
        )

    def observe(self, image_fraction: float) -> None:
        """Feed an externally produced batch fraction into the audit (used
        for constructed-stream tests and pass-through pipelines)."""
        self.deviations.append(abs(image_fraction - self.policy.target_image_fraction))
