"""Deterministic synthetic interleaved text/image token corpora.

A unified id space holds both modalities: image ids occupy the top
`image_vocab_size` slots of the vocabulary. Each row interleaves text
tokens with fixed-length image spans; the two sub-streams come from
distinct first-order Markov chains (different transition sharpness) so
that modality-specialized experts have real structure to learn. The text
chain continues across image spans, which gives attention a long-range
job at span boundaries.

Batches are pure functions of (corpus seed, batch index): random access
by index is what makes kill-and-resume training bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

TEXT = 0
IMAGE = 1

_MAGIC = b"MOMACORP"
_CORPUS_VERSION = 1


@dataclass(frozen=True)
class VocabSpec:
    """Unified token id space; image ids sit at the top of the range."""

    text_vocab_size: int = 512
    image_vocab_size: int = 64

    def __post_init__(self):
        if self.image_vocab_size > self.text_vocab_size:
            raise ConfigError(
                f"image vocab {self.image_vocab_size} exceeds unified vocab {self.text_vocab_size}"
            )
        if self.image_vocab_size < 1 or self.text_vocab_size < 2:
            raise ConfigError("vocab sizes must be positive")

    @property
    def unified_size(self) -> int:
        return self.text_vocab_size

    @property
    def image_id_start(self) -> int:
        return self.text_vocab_size - self.image_vocab_size

    @property
    def num_text_ids(self) -> int:
        return self.text_vocab_size - self.image_vocab_size


@dataclass
class TokenBatch:
    tokens: np.ndarray        # [batch, seq] int32 ids
    modality_mask: np.ndarray  # [batch, seq] uint8, TEXT / IMAGE
    targets: np.ndarray        # [batch, seq] int32 next-token ids
    target_mask: np.ndarray    # [batch, seq] uint8 modality of each target

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    vocab: VocabSpec = field(default_factory=VocabSpec)
    text_image_ratio: float = 0.5
    image_span_length: int = 16
    text_sharpness: float = 3.0
    image_sharpness: float = 1.5

    def __post_init__(self):
        if not 0.0 <= self.text_image_ratio < 1.0:
            raise ConfigError(f"text_image_ratio must be in [0, 1), got {self.text_image_ratio}")
        if self.image_span_length < 1:
            raise ConfigError("image_span_length must be >= 1")


class _MarkovChain:
    """First-order chain with per-row cumulative transition tables."""

    def __init__(self, n_states: int, sharpness: float, rng: np.random.Generator):
        logits = sharpness * rng.standard_normal((n_states, n_states))
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        self.probs = probs
        self.cum = np.cumsum(probs, axis=1)
        start_logits = sharpness * rng.standard_normal(n_states)
        start = np.exp(start_logits - start_logits.max())
        self.start = start / start.sum()
        self.start_cum = np.cumsum(self.start)
        self.n_states = n_states

    def sample_start(self, rng: np.random.Generator, count: int) -> np.ndarray:
        u = rng.random(count)
        return np.searchsorted(self.start_cum, u).clip(max=self.n_states - 1)

    def step(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(states.shape[0])
        rows = self.cum[states]
        # Row-wise searchsorted: first index whose cumulative mass exceeds u.
        nxt = (rows < u[:, None]).sum(axis=1)
        return nxt.clip(max=self.n_states - 1)

    def run(self, start_states: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((start_states.shape[0], length), dtype=np.int64)
        cur = start_states
        for t in range(length):
            cur = self.step(cur, rng)
            out[:, t] = cur
        return out


class CorpusGenerator:
    """Stateless batch factory; chains are fixed by the corpus seed."""

    def __init__(self, cfg: CorpusConfig):
        self.cfg = cfg
        chain_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0FFEE]))
        self.text_chain = _MarkovChain(cfg.vocab.num_text_ids, cfg.text_sharpness, chain_rng)
        self.image_chain = _MarkovChain(cfg.vocab.image_vocab_size, cfg.image_sharpness, chain_rng)

    def _batch_rng(self, batch_index: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 1, int(batch_index)]))

    def generate_batch(
        self,
        batch: int,
        seq_len: int,
        batch_index: int = 0,
        spans_per_row: int | None = None,
    ) -> TokenBatch:
        """Build a [batch, seq_len] TokenBatch, deterministic for
        (corpus seed, batch_index).

        `spans_per_row` overrides the stochastic image-span count; the
        batch-composition policy uses it to pin the realized modality mix.
        """
        cfg = self.cfg
        span = cfg.image_span_length
        if seq_len < span and cfg.text_image_ratio > 0:
            raise ConfigError(f"seq_len {seq_len} shorter than image span {span}")
        rng = self._batch_rng(batch_index)

        if cfg.text_image_ratio <= 0.0:
            counts = np.zeros(batch, dtype=np.int64)
        elif spans_per_row is not None:
            counts = np.full(batch, int(spans_per_row), dtype=np.int64)
        else:
            expect = cfg.text_image_ratio * seq_len / span
            base = int(np.floor(expect))
            frac = expect - base
            counts = base + (rng.random(batch) < frac).astype(np.int64)
        if counts.max(initial=0) * span > seq_len:
            raise ConfigError(
                f"{counts.max()} spans of length {span} do not fit in seq_len {seq_len}"
            )

        # Per row: arrange n span-units and (seq - n*span) text-units uniformly,
        # expand to a modality mask of exactly seq_len positions, then one extra
        # position continues the process so targets exist for every input.
        mask = np.zeros((batch, seq_len + 1), dtype=np.uint8)
        span_starts: list[np.ndarray] = []
        for i in range(batch):
            n = int(counts[i])
            t_units = seq_len - n * span
            units = np.zeros(t_units + n, dtype=np.uint8)
            if n:
                pos = rng.choice(t_units + n, size=n, replace=False)
                units[pos] = 1
            row = np.zeros(seq_len, dtype=np.uint8)
            starts = []
            p = 0
            for u in units:
                if u:
                    row[p : p + span] = IMAGE
                    starts.append(p)
                    p += span
                else:
                    p += 1
            mask[i, :seq_len] = row
            # Extra target position: continue with the natural span odds.
            if n and rng.random() < n / (t_units + n):
                mask[i, seq_len] = IMAGE
            span_starts.append(np.asarray(starts, dtype=np.int64))

        tokens = np.zeros((batch, seq_len + 1), dtype=np.int64)

        # Text sub-stream: one chain per row, threaded across image spans.
        text_counts = (mask == TEXT).sum(axis=1)
        max_text = int(text_counts.max(initial=0))
        if max_text:
            t0 = self.text_chain.sample_start(rng, batch)
            text_stream = np.concatenate(
                [t0[:, None], self.text_chain.run(t0, max_text - 1, rng) if max_text > 1 else
                 np.empty((batch, 0), dtype=np.int64)],
                axis=1,
            )
            for i in range(batch):
                sel = mask[i] == TEXT
                tokens[i, sel] = text_stream[i, : int(text_counts[i])]

        # Image spans: each span is an independent chain run from the start
        # distribution (includes partial span at the extra target slot).
        total_spans = int(sum(len(s) for s in span_starts)) + int(
            (mask[:, seq_len] == IMAGE).sum()
        )
        if total_spans:
            s0 = self.image_chain.sample_start(rng, total_spans)
            body = self.image_chain.run(s0, span - 1, rng) if span > 1 else np.empty(
                (total_spans, 0), dtype=np.int64
            )
            spans = np.concatenate([s0[:, None], body], axis=1)
            j = 0
            offset = self.cfg.vocab.image_id_start
            for i in range(batch):
                for st in span_starts[i]:
                    tokens[i, st : st + span] = spans[j, :span] + offset
                    j += 1
                if mask[i, seq_len] == IMAGE:
                    tokens[i, seq_len] = spans[j, 0] + offset
                    j += 1

        return TokenBatch(
            tokens=tokens[:, :seq_len].astype(np.int32),
            modality_mask=mask[:, :seq_len].copy(),
            targets=tokens[:, 1:].astype(np.int32),
            target_mask=mask[:, 1:].copy(),
        )


def generate_batch(cfg: CorpusConfig, batch: int, seq_len: int, batch_index: int = 0) -> TokenBatch:
    return CorpusGenerator(cfg).generate_batch(batch, seq_len, batch_index)


def modality_partition(batch: TokenBatch) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, exhaustive split of flattened (batch*seq) positions by
    modality, each in stable ascending order."""
    flat = batch.modality_mask.reshape(-1)
    text_idx = np.nonzero(flat == TEXT)[0]
    image_idx = np.nonzero(flat == IMAGE)[0]
    return text_idx, image_idx


def validate_batch(batch: TokenBatch, vocab: VocabSpec) -> None:
    """Raise DataError if ids stray outside their modality's range."""
    t = batch.tokens
    if t.min(initial=0) < 0 or t.max(initial=0) >= vocab.unified_size:
        raise DataError(f"token ids outside [0, {vocab.unified_size})")
    img = batch.modality_mask == IMAGE
    if img.any() and t[img].min() < vocab.image_id_start:
        raise DataError("IMAGE-masked id below the image id range")
    if (~img).any() and t[~img].max(initial=0) >= vocab.image_id_start:
        raise DataError("TEXT-masked id inside the image id range")


def unigram_entropy(tokens: np.ndarray) -> float:
    """Empirical unigram entropy (nats) of an id array."""
    _, counts = np.unique(tokens, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# binary corpus export (little-endian, versioned)


def export_corpus(path: str, cfg: CorpusConfig, batches: list[TokenBatch]) -> None:
    if not batches:
        raise DataError("refusing to export an empty corpus")
    b, s = batches[0].batch_size, batches[0].seq_len
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(
            struct.pack(
                "<IIIdIIII",
                _CORPUS_VERSION,
                cfg.vocab.text_vocab_size,
                cfg.vocab.image_vocab_size,
                cfg.text_image_ratio,
                cfg.image_span_length,
                b,
                s,
                len(batches),
            )
        )
        for tb in batches:
            f.write(tb.tokens.astype("<i4").tobytes())
            f.write(tb.modality_mask.astype("u1").tobytes())
            f.write(tb.targets.astype("<i4").tobytes())
            f.write(tb.target_mask.astype("u1").tobytes())


def import_corpus(path: str) -> tuple[dict, list[TokenBatch]]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise DataError(f"bad corpus magic {magic!r}")
        version, tv, iv, ratio, span, b, s, count = struct.unpack("<IIIdIIII", f.read(36))
        if version != _CORPUS_VERSION:
            raise DataError(f"unsupported corpus version {version}")
        header = {
            "version": version,
            "text_vocab_size": tv,
            "image_vocab_size": iv,
            "text_image_ratio": ratio,
            "image_span_length": span,
            "batch": b,
            "seq_len": s,
        }
        batches = []
        n = b * s
        for _ in range(count):
            tokens = np.frombuffer(f.read(4 * n), dtype="<i4").reshape(b, s)
            mask = np.frombuffer(f.read(n), dtype="u1").reshape(b, s)
            targets = np.frombuffer(f.read(4 * n), dtype="<i4").reshape(b, s)
            tmask = np.frombuffer(f.read(n), dtype="u1").reshape(b, s)
            batches.append(
                TokenBatch(tokens.copy(), mask.copy(), targets.copy(), tmask.copy())
            )
    return header, batches
