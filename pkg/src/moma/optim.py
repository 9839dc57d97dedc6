"""AdamW with decoupled weight decay, global-norm gradient clipping, and
the linear warmup / linear decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class Schedule:
    """Linear ramp to peak over `warmup_steps`, then linear decay to
    `end_lr` at `total_steps`. Steps are 1-indexed updates."""

    peak_lr: float = 3e-3
    end_lr: float | None = None  # default: 1% of peak
    warmup_steps: int = 250
    total_steps: int = 5000

    def __post_init__(self):
        if self.warmup_steps >= self.total_steps:
            raise ConfigError("warmup must be shorter than the run")
        if self.final_lr >= self.peak_lr:
            raise ConfigError("end lr must be below peak lr")

    @property
    def final_lr(self) -> float:
        return self.end_lr if self.end_lr is not None else 0.01 * self.peak_lr

    def lr_at(self, step: int) -> float:
        if step <= 0:
            return 0.0
        if step <= self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        frac = (step - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        frac = min(frac, 1.0)
        return self.peak_lr + (self.final_lr - self.peak_lr) * frac


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0


class AdamW:
    def __init__(self, params: dict[str, Tensor], cfg: AdamWConfig | None = None):
        self.params = params
        self.cfg = cfg or AdamWConfig()
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def clip_gradients(self) -> float:
        """Scale all grads so their global L2 norm is at most clip_norm."""
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad.astype(np.float64) ** 2))
        norm = float(np.sqrt(total))
        limit = self.cfg.clip_norm
        if limit > 0 and norm > limit:
            scale = limit / (norm + 1e-12)
            for t in self.params.values():
                if t.grad is not None:
                    t.grad *= np.asarray(scale, dtype=t.grad.dtype)
        return norm

    def step(self, lr: float):
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - c.beta1**t
        bc2 = 1.0 - c.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            upd = mhat / (np.sqrt(vhat) + c.eps)
            if c.weight_decay:
                upd = upd + c.weight_decay * p.data
            p.data -= np.asarray(lr, dtype=p.data.dtype) * upd.astype(p.data.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step_count: int):
        for k in self.params:
            mk, vk = f"opt.m.{k}", f"opt.v.{k}"
            if mk not in tensors or vk not in tensors:
                raise ConfigError(f"optimizer state missing for parameter {k!r}")
            self.m[k] = tensors[mk].copy()
            self.v[k] = tensors[vk].copy()
        self.step_count = step_count
