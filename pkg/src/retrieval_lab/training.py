"""Fine-tuning loop: encode, loss gradients, backprop, Adam, freeze masks.

Examples are processed one at a time (no batching); gradients are averaged
over ``grad_accum_steps`` examples before each optimizer step, so the
learning-rate scale does not change with the accumulation count. A partial
group left over at the end of an epoch still steps, averaged over its
actual size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import TrainingExample
from .encoder import (
    EncoderConfig,
    EncoderParams,
    FreezeMode,
    encode,
    encode_with_grad,
    zero_grads,
)
from .losses import BatchGrads, ContrastiveBatch, LossConfig, cl_loss, cl_loss_grad, clp_loss, clp_loss_grad
from .numerics import make_rng

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 1
    grad_accum_steps: int = 4
    loss: str = "cl"  # "cl" or "clp"
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    freeze: FreezeMode = FreezeMode.FULL
    seed: int = 0
    # The negatives' own queries are re-encoded through the live model and
    # receive gradients by default; set True to treat them as constants.
    stop_grad_neg_queries: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.grad_accum_steps < 1:
            raise ValueError("grad_accum_steps must be >= 1")
        if self.loss not in ("cl", "clp"):
            raise ValueError(f"loss must be 'cl' or 'clp', got {self.loss!r}")


@dataclass
class OptimizerState:
    """Adam first/second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @staticmethod
    def init(params: EncoderParams) -> "OptimizerState":
        return OptimizerState(m=zero_grads(params), v=zero_grads(params))


@dataclass
class TrainResult:
    params: EncoderParams
    loss_trace: list[float]


def adam_step(params: EncoderParams, grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float) -> tuple[EncoderParams, OptimizerState]:
    """One bias-corrected Adam update, applied to the tensors in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, tensor in params.named_tensors().items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        tensor -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return params, state


def apply_freeze(grads: dict[str, np.ndarray], mode: FreezeMode) -> dict[str, np.ndarray]:
    """Zero the gradients of every tensor outside the trainable set."""
    if mode == FreezeMode.FULL:
        return grads
    if mode == FreezeMode.MOE_ONLY and "gate" not in grads:
        raise ValueError("freeze mode moe_only requires MoE parameters")

    def trainable(name: str) -> bool:
        if mode == FreezeMode.INTERMEDIATE_ONLY:
            return name.startswith("w_up") or name.startswith("b_up")
        return name.startswith(("w_up", "b_up")) or name == "gate"

    return {name: (g if trainable(name) else np.zeros_like(g))
            for name, g in grads.items()}


def _example_grads(params: EncoderParams, config: EncoderConfig,
                   example: TrainingExample, cfg: TrainConfig) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and parameter gradients for a single training example."""
    loss_cfg = cfg.loss_cfg
    query_emb = encode(params, config, example.query)
    pos_emb = encode(params, config, example.pos[0])
    neg_embs = [encode(params, config, text) for text in example.neg]

    use_penalty = cfg.loss == "clp" and loss_cfg.lam != 0.0
    neg_query_embs = None
    if use_penalty:
        neg_query_embs = [[encode(params, config, q) for q in qs]
                          for qs in example.neg_queries]
    elif cfg.loss == "clp":
        # lam == 0: penalty path contributes nothing; placeholder embeddings
        # keep batch validation satisfied without extra encoder passes.
        neg_query_embs = [[neg] for neg in neg_embs] if example.neg else []

    batch = ContrastiveBatch(query_emb, pos_emb, neg_embs, neg_query_embs)
    if cfg.loss == "cl":
        loss = cl_loss(batch, loss_cfg)
        bgrads: BatchGrads = cl_loss_grad(batch, loss_cfg)
    else:
        loss = clp_loss(batch, loss_cfg)
        bgrads = clp_loss_grad(batch, loss_cfg)

    grads = zero_grads(params)

    def backprop(text: str, upstream: np.ndarray) -> None:
        _, g = encode_with_grad(params, config, text, upstream)
        for name in grads:
            grads[name] += g[name]

    backprop(example.query, bgrads.query_emb)
    backprop(example.pos[0], bgrads.pos_emb)
    for text, upstream in zip(example.neg, bgrads.neg_embs):
        backprop(text, upstream)
    if use_penalty and not cfg.stop_grad_neg_queries:
        for texts, upstreams in zip(example.neg_queries, bgrads.neg_query_embs):
            for text, upstream in zip(texts, upstreams):
                backprop(text, upstream)
    return loss, grads


def train(params: EncoderParams, config: EncoderConfig,
          dataset: list[TrainingExample], cfg: TrainConfig,
          refresh_fn: Callable[[EncoderParams], list[TrainingExample]] | None = None,
          ) -> TrainResult:
    """Run the fine-tuning loop and return trained params plus the loss trace.

    Examples are visited in seeded-shuffled order each epoch. ``refresh_fn``,
    when given, re-builds the dataset from the current parameters at the
    start of every epoch (explicit re-mining); optimizer state persists
    across the refresh.
    """
    if not dataset and refresh_fn is None:
        raise ValueError("dataset must be nonempty")
    if cfg.loss == "clp":
        _require_neg_queries(dataset)

    params = params.copy()
    params.check_shapes(config)
    state = OptimizerState.init(params)
    rng = make_rng(cfg.seed)
    trace: list[float] = []
    example_index = 0

    for _ in range(cfg.epochs):
        if refresh_fn is not None:
            dataset = refresh_fn(params)
            if not dataset:
                raise ValueError("refresh_fn returned an empty dataset")
            if cfg.loss == "clp":
                _require_neg_queries(dataset)
        order = rng.permutation(len(dataset))
        accum = zero_grads(params)
        accum_count = 0
        for idx in order:
            loss, grads = _example_grads(params, config, dataset[int(idx)], cfg)
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite loss at example step {example_index}")
            trace.append(loss)
            example_index += 1
            for name in accum:
                accum[name] += grads[name]
            accum_count += 1
            if accum_count == cfg.grad_accum_steps:
                _optimizer_step(params, accum, accum_count, state, cfg)
                accum = zero_grads(params)
                accum_count = 0
        if accum_count > 0:
            _optimizer_step(params, accum, accum_count, state, cfg)
    return TrainResult(params=params, loss_trace=trace)


def _optimizer_step(params: EncoderParams, accum: dict[str, np.ndarray],
                    count: int, state: OptimizerState, cfg: TrainConfig) -> None:
    mean_grads = {name: g / count for name, g in accum.items()}
    masked = apply_freeze(mean_grads, cfg.freeze)
    adam_step(params, masked, state, cfg.learning_rate)


def _require_neg_queries(dataset: list[TrainingExample]) -> None:
    for i, ex in enumerate(dataset):
        if ex.neg and ex.neg_queries is None:
            raise ValueError(
                f"loss 'clp' needs neg_queries on every example; missing at index {i}")
