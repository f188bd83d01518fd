"""Toy deterministic text encoder with an explicit intermediate up-projection.

The encoder embeds hashed tokens, pushes each token through a
relu(x W_up + b_up) W_down + b_down feed-forward block with a residual
connection, mean-pools over tokens and L2-normalizes the result. The
up-projection ("intermediate layer") can be swapped for a top-1 routed
mixture of experts; backprop is hand-derived for both variants.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .numerics import as_matrix, as_vector, l2_normalize, make_rng, seeded_init, softmax_temperature

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)

CHECKPOINT_FORMAT = "retrieval-lab-checkpoint-v1"


class FreezeMode(str, Enum):
    """Which parameter subset stays trainable during fine-tuning."""

    FULL = "full"                           # every tensor trainable
    INTERMEDIATE_ONLY = "intermediate_only"  # only w_up / b_up (or expert copies)
    MOE_ONLY = "moe_only"                    # only expert tensors and the gate


@dataclass(frozen=True)
class MoEConfig:
    num_experts: int = 2
    experts_per_token: int = 1

    def __post_init__(self):
        if self.num_experts < 1:
            raise ValueError("num_experts must be positive")
        if self.experts_per_token < 1 or self.experts_per_token > self.num_experts:
            raise ValueError("experts_per_token must be in [1, num_experts]")
        if self.experts_per_token != 1:
            raise ValueError("only experts_per_token == 1 is supported")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 4096
    d_model: int = 64
    d_intermediate: int = 256
    moe: MoEConfig | None = None

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.d_model < 1:
            raise ValueError("d_model must be positive")
        if self.d_intermediate < self.d_model:
            raise ValueError("d_intermediate must be >= d_model")

    def to_dict(self) -> dict:
        moe = None
        if self.moe is not None:
            moe = {"num_experts": self.moe.num_experts,
                   "experts_per_token": self.moe.experts_per_token}
        return {"vocab_size": self.vocab_size, "d_model": self.d_model,
                "d_intermediate": self.d_intermediate, "moe": moe}

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        moe = d.get("moe")
        return EncoderConfig(
            vocab_size=d["vocab_size"],
            d_model=d["d_model"],
            d_intermediate=d["d_intermediate"],
            moe=None if moe is None else MoEConfig(**moe),
        )


@dataclass
class EncoderParams:
    """All encoder weights.

    With MoE enabled, ``w_up``/``b_up`` hold one copy per expert and ``gate``
    is the (d_model x num_experts) routing matrix; otherwise they are single
    tensors and ``gate`` is None.
    """

    embedding: np.ndarray                 # (vocab_size, d_model)
    w_up: np.ndarray | list[np.ndarray]   # (d_model, d_intermediate), per expert when MoE
    b_up: np.ndarray | list[np.ndarray]   # (d_intermediate,), per expert when MoE
    w_down: np.ndarray                    # (d_intermediate, d_model)
    b_down: np.ndarray                    # (d_model,)
    gate: np.ndarray | None = None        # (d_model, num_experts) iff MoE

    @property
    def is_moe(self) -> bool:
        return self.gate is not None

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Canonical name -> tensor mapping (stable order)."""
        out: dict[str, np.ndarray] = {"embedding": self.embedding}
        if self.is_moe:
            for e, (w, b) in enumerate(zip(self.w_up, self.b_up)):
                out[f"w_up.{e}"] = w
                out[f"b_up.{e}"] = b
        else:
            out["w_up"] = self.w_up
            out["b_up"] = self.b_up
        out["w_down"] = self.w_down
        out["b_down"] = self.b_down
        if self.is_moe:
            out["gate"] = self.gate
        return out

    def copy(self) -> "EncoderParams":
        if self.is_moe:
            w_up = [w.copy() for w in self.w_up]
            b_up = [b.copy() for b in self.b_up]
        else:
            w_up = self.w_up.copy()
            b_up = self.b_up.copy()
        return EncoderParams(
            embedding=self.embedding.copy(),
            w_up=w_up,
            b_up=b_up,
            w_down=self.w_down.copy(),
            b_down=self.b_down.copy(),
            gate=None if self.gate is None else self.gate.copy(),
        )

    def check_shapes(self, config: EncoderConfig) -> None:
        v, d, di = config.vocab_size, config.d_model, config.d_intermediate
        as_matrix(self.embedding, "embedding")
        if self.embedding.shape != (v, d):
            raise ValueError(f"embedding shape {self.embedding.shape} != {(v, d)}")
        ups = self.w_up if self.is_moe else [self.w_up]
        bs = self.b_up if self.is_moe else [self.b_up]
        if config.moe is not None:
            if not self.is_moe or len(ups) != config.moe.num_experts:
                raise ValueError("params do not match MoE config")
        elif self.is_moe:
            raise ValueError("params carry a gate but config has no MoE")
        for w, b in zip(ups, bs):
            if w.shape != (d, di) or b.shape != (di,):
                raise ValueError("intermediate layer shape mismatch")
        if self.w_down.shape != (di, d) or self.b_down.shape != (d,):
            raise ValueError("down projection shape mismatch")
        if self.gate is not None and self.gate.shape != (d, config.moe.num_experts):
            raise ValueError("gate shape mismatch")


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Seeded uniform init; biases start at zero.

    Draw order is fixed (embedding, expert up-projections, down projection,
    gate) so a seed fully determines every tensor.
    """
    rng = make_rng(seed)
    d, di = config.d_model, config.d_intermediate
    embedding = seeded_init(rng, config.vocab_size, d, 0.1)
    up_scale = 1.0 / np.sqrt(d)
    down_scale = 1.0 / np.sqrt(di)
    if config.moe is not None:
        w_up = [seeded_init(rng, d, di, up_scale) for _ in range(config.moe.num_experts)]
        b_up = [np.zeros(di) for _ in range(config.moe.num_experts)]
    else:
        w_up = seeded_init(rng, d, di, up_scale)
        b_up = np.zeros(di)
    w_down = seeded_init(rng, di, d, down_scale)
    b_down = np.zeros(d)
    gate = seeded_init(rng, d, config.moe.num_experts, up_scale) if config.moe else None
    return EncoderParams(embedding, w_up, b_up, w_down, b_down, gate)


def zero_grads(params: EncoderParams) -> dict[str, np.ndarray]:
    """Zero-filled gradient dict shaped like ``params.named_tensors()``."""
    return {name: np.zeros_like(t) for name, t in params.named_tensors().items()}


def stable_token_id(token: str, vocab_size: int) -> int:
    """Map a token to a hash bucket via blake2b-64 (stable across runs/platforms)."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_size


def tokenize(text: str, config: EncoderConfig) -> list[int]:
    """Lowercase, split into maximal runs of word characters, hash to ids."""
    return [stable_token_id(tok, config.vocab_size)
            for tok in _TOKEN_RE.findall(text.lower())]


def moe_intermediate_forward(
    x: np.ndarray, params: EncoderParams, config: EncoderConfig
) -> tuple[np.ndarray, int, float]:
    """Route one token vector through its top-1 expert.

    Returns (gated expert output, selected expert index, gate probability).
    Only the selected expert is evaluated; argmax ties go to the lowest index.
    """
    if config.moe is None or not params.is_moe:
        raise ValueError("MoE is not enabled for this encoder")
    x = as_vector(x, "x")
    if x.shape[0] != config.d_model:
        raise ValueError(f"x has dimension {x.shape[0]}, expected {config.d_model}")
    logits = x @ params.gate
    p = softmax_temperature(logits, 1.0)
    e = int(np.argmax(p))
    r = np.maximum(x @ params.w_up[e] + params.b_up[e], 0.0)
    return p[e] * r, e, float(p[e])


def _forward(params: EncoderParams, config: EncoderConfig, text: str) -> dict:
    """Full forward pass keeping the intermediates backprop needs."""
    ids = tokenize(text, config)
    if not ids:
        raise ValueError("empty input")
    x = params.embedding[ids]  # (n, d_model)
    if params.is_moe:
        n = len(ids)
        h = np.empty((n, config.d_intermediate))
        moe_cache = []
        for i in range(n):
            xi = x[i]
            logits = xi @ params.gate
            p = softmax_temperature(logits, 1.0)
            e = int(np.argmax(p))
            u = xi @ params.w_up[e] + params.b_up[e]
            r = np.maximum(u, 0.0)
            h[i] = p[e] * r
            moe_cache.append((p, e, u, r))
        u = None
    else:
        u = x @ params.w_up + params.b_up  # (n, d_intermediate)
        h = np.maximum(u, 0.0)
        moe_cache = None
    y = h @ params.w_down + params.b_down + x
    pool = y.mean(axis=0)
    out = l2_normalize(pool)
    return {"ids": ids, "x": x, "u": u, "h": h, "moe": moe_cache,
            "pool": pool, "out": out}


def encode(params: EncoderParams, config: EncoderConfig, text: str) -> np.ndarray:
    """Encode text to a unit-norm vector of dimension d_model."""
    return _forward(params, config, text)["out"]


def encode_with_grad(
    params: EncoderParams, config: EncoderConfig, text: str, upstream
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Forward pass plus gradients of upstream . encode(text) w.r.t. every tensor.

    Returns (encoded vector, gradient dict keyed like ``named_tensors``).
    Experts no token routed to receive exactly zero gradient.
    """
    upstream = as_vector(upstream, "upstream")
    if upstream.shape[0] != config.d_model:
        raise ValueError(f"upstream has dimension {upstream.shape[0]}, expected {config.d_model}")
    cache = _forward(params, config, text)
    ids, x, h = cache["ids"], cache["x"], cache["h"]
    pool, out = cache["pool"], cache["out"]
    n = len(ids)
    grads = zero_grads(params)

    # out = pool / |pool|; d(upstream . out)/dpool = (upstream - out (out . upstream)) / |pool|
    pool_norm = float(np.linalg.norm(pool))
    dpool = (upstream - out * float(out @ upstream)) / pool_norm
    dy = dpool / n  # identical for every token (mean pooling)

    grads["b_down"][:] = dpool  # n tokens x dpool/n
    grads["w_down"][:] = np.outer(h.sum(axis=0), dy)
    dh = params.w_down @ dy  # (d_intermediate,), same for every token
    dx = np.tile(dy, (n, 1))  # residual path

    if params.is_moe:
        num_experts = len(params.w_up)
        for i in range(n):
            p, e, u, r = cache["moe"][i]
            xi = x[i]
            dr = p[e] * dh
            dpe = float(r @ dh)
            du = dr * (u > 0)
            grads[f"b_up.{e}"] += du
            grads[f"w_up.{e}"] += np.outer(xi, du)
            # softmax jacobian row e: dp_e/dlogit_j = p_e (1[e==j] - p_j)
            dlogits = dpe * p[e] * (np.eye(num_experts)[e] - p)
            grads["gate"] += np.outer(xi, dlogits)
            dx[i] += params.w_up[e] @ du + params.gate @ dlogits
    else:
        mask = cache["u"] > 0
        du = mask * dh  # (n, d_intermediate), broadcast over tokens
        grads["b_up"][:] = du.sum(axis=0)
        grads["w_up"][:] = x.T @ du
        dx += du @ params.w_up.T

    np.add.at(grads["embedding"], ids, dx)
    return out, grads


def save_checkpoint(params: EncoderParams, config: EncoderConfig, path: str | Path) -> None:
    """Write config plus all tensors to one JSON document.

    Tensor payloads are base64 of raw little-endian float64 bytes, so
    load(save(p)) round-trips bit-exactly and the file bytes are
    deterministic for identical params.
    """
    params.check_shapes(config)
    tensors = {}
    for name, t in params.named_tensors().items():
        raw = np.ascontiguousarray(t, dtype="<f8").tobytes()
        tensors[name] = {"shape": list(t.shape),
                         "dtype": "<f8",
                         "data": base64.b64encode(raw).decode("ascii")}
    doc = {"format": CHECKPOINT_FORMAT, "config": config.to_dict(), "tensors": tensors}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, EncoderConfig]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    config = EncoderConfig.from_dict(doc["config"])

    def tensor(name: str) -> np.ndarray:
        entry = doc["tensors"][name]
        raw = base64.b64decode(entry["data"])
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])

    if config.moe is not None:
        w_up = [tensor(f"w_up.{e}") for e in range(config.moe.num_experts)]
        b_up = [tensor(f"b_up.{e}") for e in range(config.moe.num_experts)]
        gate = tensor("gate")
    else:
        w_up = tensor("w_up")
        b_up = tensor("b_up")
        gate = None
    params = EncoderParams(tensor("embedding"), w_up, b_up,
                           tensor("w_down"), tensor("b_down"), gate)
    params.check_shapes(config)
    return params, config
