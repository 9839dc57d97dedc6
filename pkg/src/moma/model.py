"""Causal decoder assembly: embeddings, rotary multi-head attention,
modality-grouped expert FFN layers, optional depth routing, unified
vocabulary head, and per-modality loss accounting.

All named configurations share the attention stack; only the FFN/depth
sparsity pattern varies, so architecture comparisons stay controlled.
Training-mode forward uses batch-level expert choice (fast, not causal);
inference-mode forward for routed configs decodes incrementally with
auxiliary-router thresholding so a position's logits depend only on its
prefix, bit for bit.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import IMAGE, TEXT, TokenBatch, VocabSpec
from .errors import ConfigError, ContractError, DataError
from .mod_layer import (
    MoDLayerParams,
    MoDStats,
    TokenLayout,
    build_mod_schedule,
    mod_forward,
)
from .moma_layer import (
    INFER,
    MIXED,
    TRAIN,
    ExpertGroup,
    MoMaLayerParams,
    MoMaStats,
    SwiGluExpert,
    sequential_group_execute,
    swiglu_ffn,
)
from .routing import RouterParams
from .tensor import Tensor

_MASK_NEG = -1e30

GROUP_NAMES = {TEXT: "text", IMAGE: "image", MIXED: "mixed"}


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    hidden_dim: int = 64
    ffn_dim: int = 256
    heads: int = 4
    text_experts: int = 0
    image_experts: int = 0
    mixed_experts: int = 0   # single group over all tokens (modality routing off)
    dense: bool = False      # plain FFN, no routers, no gates
    capacity_factor: Optional[float] = None  # default 1/|group|
    mod_enabled: bool = False
    mod_interval: int = 2
    mod_capacity: float = 0.25
    vocab: VocabSpec = field(default_factory=VocabSpec)
    seq_len: int = 256
    precision: str = "f32"
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.dense:
            if self.text_experts or self.image_experts or self.mixed_experts > 1:
                raise ConfigError("dense config cannot carry expert groups")
        else:
            modality = self.text_experts > 0 or self.image_experts > 0
            if modality and self.mixed_experts:
                raise ConfigError("choose modality groups or a mixed group, not both")
            if modality and (self.text_experts < 1 or self.image_experts < 1):
                raise ConfigError("both modality groups need at least one expert")
            if not modality and self.mixed_experts < 1:
                raise ConfigError("non-dense config needs experts")
        if self.mod_enabled and not 0.0 < self.mod_capacity <= 1.0:
            raise ConfigError(f"mod_capacity must be in (0,1], got {self.mod_capacity}")
        if self.mod_enabled and self.mod_interval < 1:
            raise ConfigError("mod_interval must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    @property
    def group_sizes(self) -> list[tuple[int, int]]:
        """(modality tag, expert count) per group."""
        if self.dense:
            return [(MIXED, 1)]
        if self.mixed_experts:
            return [(MIXED, self.mixed_experts)]
        return [(TEXT, self.text_experts), (IMAGE, self.image_experts)]

    def group_capacity(self, size: int) -> float:
        return self.capacity_factor if self.capacity_factor is not None else 1.0 / size

    @property
    def has_routers(self) -> bool:
        return not self.dense or self.mod_enabled

    def mod_layers(self) -> list[bool]:
        if not self.mod_enabled:
            return [False] * self.layers
        return build_mod_schedule(self.layers, self.mod_interval)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["vocab"] = dataclasses.asdict(self.vocab)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["vocab"] = VocabSpec(**d["vocab"])
        return ModelConfig(**d)


# Architecture overlays; dimensions come from the base keyword arguments.
NAMED_ARCHS: dict[str, dict] = {
    "dense": dict(dense=True),
    "moe_1t1i": dict(text_experts=1, image_experts=1),
    "moe_4t4i": dict(text_experts=4, image_experts=4),
    "moe_7t1i": dict(text_experts=7, image_experts=1),
    "moe_6t2i": dict(text_experts=6, image_experts=2),
    "moe_8x": dict(mixed_experts=8),
    "mod_moe_1t1i": dict(text_experts=1, image_experts=1, mod_enabled=True, layers=6),
    "mod_moe_4t4i": dict(text_experts=4, image_experts=4, mod_enabled=True, layers=6),
}


def named_config(name: str, **overrides) -> ModelConfig:
    """Resolve a named architecture over the desk-scale base dimensions.

    The depth-routed variants carry extra layers (6 vs 4 by default) so
    their per-token compute matches the base within the layer-count
    rounding tolerance, mirroring how compute-matched depth variants are
    usually specified.
    """
    if name not in NAMED_ARCHS:
        raise ConfigError(f"unknown architecture {name!r}; choose from {sorted(NAMED_ARCHS)}")
    kw = dict(NAMED_ARCHS[name])
    kw.update(overrides)
    return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# loss bookkeeping


@dataclass
class LossBreakdown:
    total: float
    text_loss: Optional[float]
    image_loss: Optional[float]
    text_count: int
    image_count: int

    @staticmethod
    def from_token_losses(nll: np.ndarray, target_mask: np.ndarray) -> "LossBreakdown":
        flat = target_mask.reshape(-1)
        text = flat == TEXT
        image = flat == IMAGE
        tc, ic = int(text.sum()), int(image.sum())
        return LossBreakdown(
            total=float(nll.mean()),
            text_loss=float(nll[text].mean()) if tc else None,
            image_loss=float(nll[image].mean()) if ic else None,
            text_count=tc,
            image_count=ic,
        )


# ---------------------------------------------------------------------------
# fused causal attention core (one tape entry instead of dozens)


def _rot_half(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rot_half_adjoint(g: np.ndarray) -> np.ndarray:
    h = g.shape[-1] // 2
    return np.concatenate([g[..., h:], -g[..., :h]], axis=-1)


_MASK_CACHE: dict[tuple, np.ndarray] = {}


def _causal_mask(pos: np.ndarray, dtype) -> np.ndarray:
    key = (pos.tobytes(), np.dtype(dtype).str)
    m = _MASK_CACHE.get(key)
    if m is None:
        if len(_MASK_CACHE) > 256:
            _MASK_CACHE.clear()
        m = np.where(pos[None, :] > pos[:, None], dtype.type(_MASK_NEG), dtype.type(0))
        _MASK_CACHE[key] = m
    return m


def causal_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    layout: TokenLayout,
    cos_table: np.ndarray,
    sin_table: np.ndarray,
) -> Tensor:
    """Rotary + per-sequence causal softmax attention over a flat token
    block [tokens, heads, head_dim]. Sequences are the contiguous row
    ranges of `layout`; positions index the rotary tables and define the
    causal order, so gathered (depth-routed) subsequences attend correctly
    among themselves only."""
    qd, kd, vd = q.data, k.data, v.data
    n, h, hd = qd.shape
    scale = qd.dtype.type(1.0 / np.sqrt(hd))
    cos = cos_table[layout.positions][:, None, :]
    sin = sin_table[layout.positions][:, None, :]
    qr = qd * cos + _rot_half(qd) * sin
    qr *= scale  # fold the score scale into q (cheaper than scaling scores)
    kr = kd * cos + _rot_half(kd) * sin

    out = np.empty_like(qd)
    probs: list[np.ndarray] = []
    for s, e in layout.seq_bounds:
        if e == s:
            probs.append(np.empty((h, 0, 0), dtype=qd.dtype))
            continue
        T.mac_counter.add(2 * h * (e - s) * (e - s) * hd)  # scores + value mixing
        pos = layout.positions[s:e]
        qs = np.ascontiguousarray(qr[s:e].transpose(1, 0, 2))  # [h, m, hd]
        ks = np.ascontiguousarray(kr[s:e].transpose(1, 2, 0))  # [h, hd, m]
        scores = np.matmul(qs, ks)
        scores += _causal_mask(pos, qd.dtype)
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        probs.append(scores)
        vs = np.ascontiguousarray(vd[s:e].transpose(1, 0, 2))  # [h, m, hd]
        mixed = np.matmul(scores, vs)                          # [h, m, hd]
        out[s:e] = mixed.transpose(1, 0, 2)

    def bwd(g):
        dq = np.empty_like(qd)
        dk = np.empty_like(kd)
        dv = np.empty_like(vd)
        for (s, e), p in zip(layout.seq_bounds, probs):
            if e == s:
                continue
            gs = np.ascontiguousarray(g[s:e].transpose(1, 0, 2))   # [h, m, hd]
            vs = np.ascontiguousarray(vd[s:e].transpose(1, 0, 2))
            qs = np.ascontiguousarray(qr[s:e].transpose(1, 0, 2))  # scaled
            ks = np.ascontiguousarray(kr[s:e].transpose(1, 0, 2))
            dvs = np.matmul(p.transpose(0, 2, 1), gs)
            dp = np.matmul(gs, vs.transpose(0, 2, 1))
            ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
            dqs = np.matmul(ds, ks) * scale      # d(roped q), scale chain rule
            dks = np.matmul(ds.transpose(0, 2, 1), qs)  # qs already carries scale
            dq[s:e] = dqs.transpose(1, 0, 2)
            dk[s:e] = dks.transpose(1, 0, 2)
            dv[s:e] = dvs.transpose(1, 0, 2)
        # un-rotate
        dq = dq * cos + _rot_half_adjoint(dq * sin)
        dk = dk * cos + _rot_half_adjoint(dk * sin)
        return dq, dk, dv

    return T.custom_op(out, (q, k, v), bwd, "causal_attention")


# ---------------------------------------------------------------------------
# layer


class TransformerLayer:
    """Pre-norm attention sublayer plus an expert FFN sublayer with
    residual-post-normalization. `residual_delta` returns layer(x) - x so
    depth wrappers can gate the whole contribution."""

    def __init__(self, cfg: ModelConfig, index: int, params: dict[str, Tensor]):
        self.cfg = cfg
        self.index = index
        p = f"layer.{index}"
        self.wq = params[f"{p}.attn.wq"]
        self.wk = params[f"{p}.attn.wk"]
        self.wv = params[f"{p}.attn.wv"]
        self.wo = params[f"{p}.attn.wo"]
        self.attn_scale = params[f"{p}.attn_norm.scale"]
        self.post_scale = params[f"{p}.moma_norm.scale"]
        groups = []
        for tag, size in cfg.group_sizes:
            gname = GROUP_NAMES[tag]
            experts = [
                SwiGluExpert(
                    w_in=params[f"{p}.moma.{gname}.expert_{e}.w_in"],
                    w_gate=params[f"{p}.moma.{gname}.expert_{e}.w_gate"],
                    w_out=params[f"{p}.moma.{gname}.expert_{e}.w_out"],
                )
                for e in range(size)
            ]
            router = None
            if not cfg.dense:
                router = RouterParams(params[f"{p}.moma.{gname}.router.w"])
            groups.append(
                ExpertGroup(
                    modality=tag,
                    experts=experts,
                    router=router,
                    capacity_factor=cfg.group_capacity(size),
                )
            )
        self.moma = MoMaLayerParams(groups=groups, post_norm_scale=self.post_scale)
        self.mod: Optional[MoDLayerParams] = None
        if cfg.mod_enabled and cfg.mod_layers()[index]:
            self.mod = MoDLayerParams(
                router=RouterParams(params[f"{p}.mod_router.w"]),
                capacity_factor=cfg.mod_capacity,
            )

    def attention_delta(self, hidden: Tensor, layout: TokenLayout, rope) -> Tensor:
        cfg = self.cfg
        xn = T.layer_norm(hidden, self.attn_scale)
        n = hidden.data.shape[0]
        shape3 = (n, cfg.heads, cfg.head_dim)
        q = T.reshape(T.matmul(xn, self.wq), shape3)
        k = T.reshape(T.matmul(xn, self.wk), shape3)
        v = T.reshape(T.matmul(xn, self.wv), shape3)
        mixed = causal_attention(q, k, v, layout, rope[0], rope[1])
        return T.matmul(T.reshape(mixed, (n, cfg.hidden_dim)), self.wo)

    def residual_delta(
        self,
        hidden: Tensor,
        layout: TokenLayout,
        mask_rows: np.ndarray,
        rope,
        mode: str = TRAIN,
        moma_aux_fn=None,
        gumbel_rng=None,
        force_gate_one: bool = False,
        collect: MoMaStats | None = None,
        keep_hidden: bool = False,
    ) -> Tensor:
        attn_delta = self.attention_delta(hidden, layout, rope)
        h2 = T.add(hidden, attn_delta)
        if self.cfg.dense:
            y = swiglu_ffn(h2, self.moma.groups[0].experts[0])
        else:
            y = sequential_group_execute(
                self.moma,
                h2,
                mask_rows,
                mode=mode,
                aux_scores_fn=moma_aux_fn,
                gumbel_rng=gumbel_rng,
                force_gate_one=force_gate_one,
                collect=collect,
                keep_hidden=keep_hidden,
            )
        return T.add(attn_delta, T.layer_norm(y, self.post_scale))


# ---------------------------------------------------------------------------
# model


@dataclass
class StepStats:
    """Per-layer routing statistics for one forward pass."""

    moma: list[MoMaStats] = field(default_factory=list)
    mod: list[Optional[MoDStats]] = field(default_factory=list)


class TransformerModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self._init_params(seed)
        self.layers = [TransformerLayer(cfg, j, self.params) for j in range(cfg.layers)]
        self._rope = self._build_rope(cfg.seq_len)

    # -- parameter construction ------------------------------------------------

    def _init_params(self, seed: int):
        cfg = self.cfg
        dt = cfg.dtype
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11]))
        d, ffn, v = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab.unified_size
        out_scale = 1.0 / np.sqrt(2.0 * cfg.layers)

        def normal(shape, std=0.02):
            return Tensor((rng.standard_normal(shape) * std).astype(dt), requires_grad=True)

        def ones(shape):
            return Tensor(np.ones(shape, dtype=dt), requires_grad=True)

        self.params["embed.tokens"] = normal((v, d))
        mod_flags = cfg.mod_layers()
        for j in range(cfg.layers):
            p = f"layer.{j}"
            self.params[f"{p}.attn.wq"] = normal((d, d))
            self.params[f"{p}.attn.wk"] = normal((d, d))
            self.params[f"{p}.attn.wv"] = normal((d, d))
            self.params[f"{p}.attn.wo"] = normal((d, d), std=0.02 * out_scale)
            self.params[f"{p}.attn_norm.scale"] = ones((d,))
            self.params[f"{p}.moma_norm.scale"] = ones((d,))
            for tag, size in cfg.group_sizes:
                gname = GROUP_NAMES[tag]
                for e in range(size):
                    self.params[f"{p}.moma.{gname}.expert_{e}.w_in"] = normal((d, ffn))
                    self.params[f"{p}.moma.{gname}.expert_{e}.w_gate"] = normal((d, ffn))
                    self.params[f"{p}.moma.{gname}.expert_{e}.w_out"] = normal(
                        (ffn, d), std=0.02 * out_scale
                    )
                if not cfg.dense:
                    self.params[f"{p}.moma.{gname}.router.w"] = normal((d, size))
            if cfg.mod_enabled and mod_flags[j]:
                self.params[f"{p}.mod_router.w"] = normal((d, 1))
        self.params["final_norm.scale"] = ones((d,))
        self.params["head.w"] = normal((d, v))

    def _build_rope(self, max_len: int):
        cfg = self.cfg
        hd = cfg.head_dim
        half = hd // 2
        freqs = cfg.rope_base ** (-np.arange(half) / half)
        angles = np.outer(np.arange(max_len), freqs)
        cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=1).astype(cfg.dtype)
        sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=1).astype(cfg.dtype)
        return cos, sin

    def parameter_count(self) -> int:
        return sum(int(t.data.size) for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # -- forward ----------------------------------------------------------------

    def _moma_aux_fn(self, aux, layer_idx: int):
        if aux is None:
            return None

        def fn(group_index: int, pooled: Tensor) -> np.ndarray:
            tag = self.cfg.group_sizes[group_index][0]
            return aux.moma_scores_np(layer_idx, GROUP_NAMES[tag], pooled.data)

        return fn

    def forward(
        self,
        batch: TokenBatch,
        mode: str = TRAIN,
        aux=None,
        gumbel_rng: np.random.Generator | None = None,
        mod_perturb: tuple[float, np.random.Generator] | None = None,
        force_gate_one: bool = False,
        collect: StepStats | None = None,
        collect_routing: bool = False,
        flat: bool = False,
    ) -> Tensor:
        """Logits [b, seq, vocab] (or flat [b*seq, vocab] when flat=True).

        TRAIN mode routes with batch-level expert choice. INFER mode on a
        routed config decodes incrementally through the auxiliary routers;
        a dense config has no routers, so both modes share the training
        path and agree exactly.
        """
        cfg = self.cfg
        b, s = batch.tokens.shape
        if batch.tokens.max(initial=0) >= cfg.vocab.unified_size or batch.tokens.min(initial=0) < 0:
            raise DataError(f"token id out of range [0, {cfg.vocab.unified_size})")
        if mode == INFER and cfg.has_routers:
            if aux is None:
                raise ContractError("INFER mode on a routed config requires auxiliary routers")
            logits = self.incremental_logits(batch.tokens, batch.modality_mask, aux)
            out = Tensor(logits)
            return T.reshape(out, (b * s, -1)) if flat else out
        if s > self._rope[0].shape[0]:
            self._rope = self._build_rope(s)

        mask_flat = batch.modality_mask.reshape(-1)
        x = T.embedding_lookup(self.params["embed.tokens"], batch.tokens.reshape(-1))
        layout = TokenLayout.full(b, s)
        mod_flags = cfg.mod_layers()
        for j, layer in enumerate(self.layers):
            stats = MoMaStats() if collect is not None else None
            if layer.mod is not None and mod_flags[j]:
                mstats = MoDStats() if collect is not None else None

                def delta_fn(sub, sub_layout, sub_mask, _layer=layer, _stats=stats):
                    return _layer.residual_delta(
                        sub,
                        sub_layout,
                        sub_mask,
                        self._rope,
                        mode=mode,
                        moma_aux_fn=self._moma_aux_fn(aux, _layer.index),
                        gumbel_rng=gumbel_rng,
                        force_gate_one=force_gate_one,
                        collect=_stats,
                        keep_hidden=collect_routing,
                    )

                aux_fn = None
                if aux is not None:
                    aux_fn = lambda hid, _j=j: aux.mod_scores_np(_j, hid.data)
                x = mod_forward(
                    x,
                    mask_flat,
                    layer.mod,
                    delta_fn,
                    b,
                    s,
                    mode=mode,
                    aux_scores_fn=aux_fn,
                    perturb=mod_perturb,
                    force_gate_one=force_gate_one,
                    collect=mstats,
                    keep_hidden=collect_routing,
                )
                if collect is not None:
                    collect.mod.append(mstats)
            else:
                delta = layer.residual_delta(
                    x,
                    layout,
                    mask_flat,
                    self._rope,
                    mode=mode,
                    moma_aux_fn=self._moma_aux_fn(aux, layer.index),
                    gumbel_rng=gumbel_rng,
                    force_gate_one=force_gate_one,
                    collect=stats,
                    keep_hidden=collect_routing,
                )
                x = T.add(x, delta)
                if collect is not None:
                    collect.mod.append(None)
            if collect is not None:
                collect.moma.append(stats)
        x = T.layer_norm(x, self.params["final_norm.scale"])
        logits = T.matmul(x, self.params["head.w"])
        return logits if flat else T.reshape(logits, (b, s, cfg.vocab.unified_size))

    def loss(
        self,
        batch: TokenBatch,
        mode: str = TRAIN,
        aux=None,
        gumbel_rng=None,
        mod_perturb=None,
        collect: StepStats | None = None,
    ) -> tuple[Tensor, LossBreakdown]:
        """Mean next-token cross-entropy plus the per-modality split, keyed
        by the target token's modality."""
        if batch.targets is None:
            raise DataError("batch has no targets")
        logits = self.forward(
            batch, mode=mode, aux=aux, gumbel_rng=gumbel_rng,
            mod_perturb=mod_perturb, collect=collect, flat=True,
        )
        nll = T.cross_entropy(logits, batch.targets.reshape(-1))
        loss = T.tmean(nll)
        breakdown = LossBreakdown.from_token_losses(nll.data, batch.target_mask)
        return loss, breakdown

    # -- incremental (causal) inference ------------------------------------------

    def incremental_logits(self, tokens: np.ndarray, mask: np.ndarray, aux) -> np.ndarray:
        """Decode-style forward: one position at a time with per-layer KV
        caches. Depth-skipped tokens write no key/value at that layer.
        Position t's logits are a function of positions <= t only, so two
        inputs sharing a prefix produce bitwise-identical prefix logits."""
        cfg = self.cfg
        b, s = tokens.shape
        v = cfg.vocab.unified_size
        dt = cfg.dtype
        if s > self._rope[0].shape[0]:
            self._rope = self._build_rope(s)
        cos_t, sin_t = self._rope
        w = {name: t.data for name, t in self.params.items()}
        mod_flags = cfg.mod_layers()
        logits = np.empty((b, s, v), dtype=dt)
        eps = np.asarray(1e-5, dtype=dt)

        def ln(x, scale):
            mu = x.mean()
            xc = x - mu
            var = (xc * xc).mean()
            return xc / np.sqrt(var + eps) * scale

        def swiglu_np(x, prefix):
            g = x @ w[f"{prefix}.w_gate"]
            g = g * T._stable_sigmoid(g)
            return (g * (x @ w[f"{prefix}.w_in"])) @ w[f"{prefix}.w_out"]

        h, hd = cfg.heads, cfg.head_dim
        for i in range(b):
            kcache = [np.empty((s, h, hd), dtype=dt) for _ in range(cfg.layers)]
            vcache = [np.empty((s, h, hd), dtype=dt) for _ in range(cfg.layers)]
            counts = [0] * cfg.layers
            for t in range(s):
                x = w["embed.tokens"][tokens[i, t]].copy()
                modality = int(mask[i, t])
                for j in range(cfg.layers):
                    p = f"layer.{j}"
                    process = True
                    gate = None
                    if cfg.mod_enabled and mod_flags[j]:
                        score = float(
                            T._stable_sigmoid(x @ w[f"{p}.mod_router.w"])[0]
                        )
                        amember = aux.mod_scores_np(j, x[None, :])[0, 0] > 0.5
                        process = bool(amember)
                        gate = score
                    if not process:
                        continue
                    # attention
                    xn = ln(x, w[f"{p}.attn_norm.scale"])
                    q = (xn @ w[f"{p}.attn.wq"]).reshape(h, hd)
                    kk = (xn @ w[f"{p}.attn.wk"]).reshape(h, hd)
                    vv = (xn @ w[f"{p}.attn.wv"]).reshape(h, hd)
                    c, si = cos_t[t], sin_t[t]
                    q = q * c + _rot_half(q) * si
                    kk = kk * c + _rot_half(kk) * si
                    n = counts[j]
                    kcache[j][n] = kk
                    vcache[j][n] = vv
                    counts[j] = n + 1
                    keys = kcache[j][: n + 1]   # [n+1, h, hd]
                    vals = vcache[j][: n + 1]
                    scores = np.einsum("thd,hd->ht", keys, q) / np.sqrt(hd).astype(dt)
                    scores -= scores.max(axis=1, keepdims=True)
                    np.exp(scores, out=scores)
                    scores /= scores.sum(axis=1, keepdims=True)
                    mix = np.einsum("ht,thd->hd", scores, vals)
                    attn_delta = mix.reshape(cfg.hidden_dim) @ w[f"{p}.attn.wo"]
                    h2 = x + attn_delta
                    # expert FFN
                    if cfg.dense:
                        y = swiglu_np(h2, f"{p}.moma.mixed.expert_0")
                    else:
                        y = np.zeros(cfg.hidden_dim, dtype=dt)
                        for gi, (tag, size) in enumerate(cfg.group_sizes):
                            if tag != MIXED and tag != modality:
                                continue
                            gname = GROUP_NAMES[tag]
                            gates = T._stable_sigmoid(
                                h2 @ w[f"{p}.moma.{gname}.router.w"]
                            )
                            members = (
                                aux.moma_scores_np(j, gname, h2[None, :])[0] > 0.5
                            )
                            for e in range(size):
                                if members[e]:
                                    y = y + gates[e] * swiglu_np(
                                        h2, f"{p}.moma.{gname}.expert_{e}"
                                    )
                    moma_delta = ln(y, w[f"{p}.moma_norm.scale"])
                    delta = attn_delta + moma_delta
                    x = x + gate * delta if gate is not None else x + delta
                logits[i, t] = ln(x, w["final_norm.scale"]) @ w["head.w"]
        return logits
