"""Shared helpers: finite-difference gradient checking and micro configs."""

from __future__ import annotations

import numpy as np
import pytest

import moma.tensor as T
from moma.data import CorpusConfig, VocabSpec
from moma.model import ModelConfig, named_config


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5, indices=None) -> dict:
    """Central finite differences of scalar f(x) at selected flat indices.

    `f` must be a pure function of the array value. Returns {flat_index: grad}.
    """
    x = np.array(x, dtype=np.float64)  # private copy; perturbed in place
    if indices is None:
        indices = range(x.size)
    out = {}
    flat = x.reshape(-1)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return out


def check_grad(f_tensor, value: np.ndarray, rtol: float = 1e-4, n_probe: int = 12, seed: int = 0):
    """Compare autodiff grads of scalar f_tensor(Tensor) against central
    differences at float64 on a random sample of entries."""
    value = np.array(value, dtype=np.float64)
    x = T.Tensor(value.copy(), requires_grad=True)
    with T.ComputationTape():
        loss = f_tensor(x)
        loss.backward()
    assert x.grad is not None, "no gradient reached the input"

    def f_plain(arr):
        with T.ComputationTape(), T.no_grad():
            return float(f_tensor(T.Tensor(arr.copy())).data)

    rng = np.random.default_rng(seed)
    probe = rng.choice(value.size, size=min(n_probe, value.size), replace=False)
    num = numeric_grad(f_plain, value, indices=probe)
    for i, g_num in num.items():
        g_ad = x.grad.reshape(-1)[i]
        diff = abs(g_ad - g_num)
        if diff < 1e-7:  # both effectively zero; FD noise dominates
            continue
        denom = max(abs(g_num), abs(g_ad))
        assert diff / denom < rtol, (
            f"grad mismatch at flat index {i}: autodiff {g_ad}, numeric {g_num}"
        )


@pytest.fixture
def micro_model_config() -> ModelConfig:
    """The gradient-check scale: 2 layers, d=16, 2+2 experts, tiny vocab."""
    return named_config(
        "moe_4t4i",
        layers=2,
        hidden_dim=16,
        ffn_dim=32,
        heads=2,
        text_experts=2,
        image_experts=2,
        seq_len=16,
        precision="f64",
        vocab=VocabSpec(64, 16),
    )


@pytest.fixture
def micro_corpus_config() -> CorpusConfig:
    return CorpusConfig(seed=7, vocab=VocabSpec(64, 16), image_span_length=4)
