"""Shared test helpers: finite-difference oracles and instance generators.

Finite differences are only a valid oracle where the function is smooth, so
the random-instance generators reject draws that land too close to a relu
kink, a gate argmax boundary or a vanishing pool norm.
"""

from __future__ import annotations

import numpy as np
import pytest

from retrieval_lab.encoder import EncoderConfig, MoEConfig, encode, init_params, tokenize
from retrieval_lab.numerics import make_rng

FD_STEP = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative disagreement between two gradient arrays."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def finite_diff(f, x: np.ndarray, eps: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f at x, per coordinate."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def finite_diff_params(params, config, text: str, upstream: np.ndarray,
                       eps: float = FD_STEP) -> dict[str, np.ndarray]:
    """Central differences of upstream . encode(text) over every parameter entry."""
    grads = {}
    for name, tensor in params.named_tensors().items():
        g = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(upstream @ encode(params, config, text))
            flat[i] = orig - eps
            fm = float(upstream @ encode(params, config, text))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads[name] = g
    return grads


def random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


_WORDS = [f"tok{i}" for i in range(64)]


def random_text(rng: np.random.Generator, n_tokens: int) -> str:
    return " ".join(_WORDS[int(i)] for i in rng.integers(0, len(_WORDS), size=n_tokens))


def smooth_at(params, config, text: str, margin: float = 1e-4) -> bool:
    """True when the forward pass stays clear of relu kinks, argmax ties and
    vanishing pool norms, so central differences are trustworthy."""
    ids = tokenize(text, config)
    x = params.embedding[ids]
    h = []
    for xi in x:
        if params.is_moe:
            logits = xi @ params.gate
            top2 = np.sort(logits)[-2:]
            if len(logits) > 1 and abs(top2[1] - top2[0]) < margin:
                return False
            p = np.exp(logits - np.max(logits))
            p /= p.sum()
            e = int(np.argmax(logits))
            u = xi @ params.w_up[e] + params.b_up[e]
            scale = p[e]
        else:
            u = xi @ params.w_up + params.b_up
            scale = 1.0
        if np.min(np.abs(u)) < margin:
            return False
        h.append(scale * np.maximum(u, 0.0))
    y = np.array([hi @ params.w_down + params.b_down + xi for hi, xi in zip(h, x)])
    return float(np.linalg.norm(y.mean(axis=0))) > 1e-3


def encoder_instance(seed: int, moe: bool, n_tokens: int = 3,
                     d_model: int = 8, d_intermediate: int = 16,
                     vocab_size: int = 32):
    """Deterministic smooth random instance; bumps the seed until the
    finite-difference validity filter passes."""
    moe_cfg = MoEConfig(num_experts=2, experts_per_token=1) if moe else None
    config = EncoderConfig(vocab_size=vocab_size, d_model=d_model,
                           d_intermediate=d_intermediate, moe=moe_cfg)
    attempt = seed
    while True:
        params = init_params(config, attempt)
        rng = make_rng(attempt + 10_000)
        text = random_text(rng, n_tokens)
        upstream = rng.standard_normal(d_model)
        if smooth_at(params, config, text):
            return params, config, text, upstream
        attempt += 50_000


@pytest.fixture
def rng():
    return make_rng(0)
