"""Contrastive objectives over embedding vectors, with analytic gradients.

Two losses: the standard softmax cross-entropy contrastive loss over
(query, positive, hard negatives), and a penalty-augmented variant that
additionally keeps each hard negative close to its own positive queries.
Both operate purely on embeddings; encoding happens elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import as_vector, cosine_similarity, cosine_similarity_grad

_UNIT_TOL = 1e-9


@dataclass(frozen=True)
class LossConfig:
    """tau: softmax temperature; lam: penalty interpolation weight in [0, 1]."""

    tau: float = 0.05
    lam: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")


@dataclass
class ContrastiveBatch:
    """One training example: query/positive/negative embeddings, all unit norm.

    ``neg_query_embs`` (one list per negative) holds the embeddings of each
    negative document's own positive queries; it is only required by the
    penalty-augmented loss.
    """

    query_emb: np.ndarray
    pos_emb: np.ndarray
    neg_embs: list[np.ndarray] = field(default_factory=list)
    neg_query_embs: list[list[np.ndarray]] | None = None

    def __post_init__(self):
        self.query_emb = _unit_vector(self.query_emb, "query_emb")
        dim = self.query_emb.shape[0]
        self.pos_emb = _unit_vector(self.pos_emb, "pos_emb", dim)
        self.neg_embs = [_unit_vector(v, f"neg_embs[{j}]", dim)
                         for j, v in enumerate(self.neg_embs)]
        if self.neg_query_embs is not None:
            if len(self.neg_query_embs) != len(self.neg_embs):
                raise ValueError("neg_query_embs must have one entry list per negative")
            self.neg_query_embs = [
                [_unit_vector(v, f"neg_query_embs[{j}][{m}]", dim) for m, v in enumerate(qs)]
                for j, qs in enumerate(self.neg_query_embs)
            ]


@dataclass
class BatchGrads:
    """Gradients aligned with ContrastiveBatch fields."""

    query_emb: np.ndarray
    pos_emb: np.ndarray
    neg_embs: list[np.ndarray]
    neg_query_embs: list[list[np.ndarray]] | None = None


def _unit_vector(v, name: str, dim: int | None = None) -> np.ndarray:
    v = as_vector(v, name)
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"{name} has dimension {v.shape[0]}, expected {dim}")
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > _UNIT_TOL:
        raise ValueError(f"{name} must be unit norm, got |v| = {norm}")
    return v


def _scores(batch: ContrastiveBatch) -> np.ndarray:
    """Similarity of the query to [positive, negatives...], positive first."""
    sims = [cosine_similarity(batch.query_emb, batch.pos_emb)]
    sims.extend(cosine_similarity(batch.query_emb, neg) for neg in batch.neg_embs)
    return np.array(sims)


def _log_softmax_first(scores: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """-log softmax(scores/tau)[0] and the softmax probabilities.

    Evaluated through a max-subtracted log-sum-exp so extreme temperatures
    stay finite.
    """
    z = scores / tau
    m = float(np.max(z))
    e = np.exp(z - m)
    lse = m + float(np.log(np.sum(e)))
    probs = e / np.sum(e)
    return lse - float(z[0]), probs


def cl_loss(batch: ContrastiveBatch, cfg: LossConfig) -> float:
    """Softmax cross-entropy pulling the query to the positive, away from negatives."""
    loss, _ = _log_softmax_first(_scores(batch), cfg.tau)
    return loss


def _penalty(batch: ContrastiveBatch) -> float:
    """Mean over negatives of (1 - mean similarity to their own positive queries).

    Bounded in [0, 2]; defined as 0 when there are no negatives.
    """
    if not batch.neg_embs:
        return 0.0
    terms = []
    for neg, queries in zip(batch.neg_embs, batch.neg_query_embs):
        sims = [cosine_similarity(neg, q) for q in queries]
        terms.append(1.0 - sum(sims) / len(sims))
    return sum(terms) / len(terms)


def _require_neg_queries(batch: ContrastiveBatch) -> None:
    if batch.neg_query_embs is None or any(len(qs) == 0 for qs in batch.neg_query_embs):
        raise ValueError("CLP requires negative-query embeddings")


def clp_loss(batch: ContrastiveBatch, cfg: LossConfig) -> float:
    """(1 - lam) * contrastive loss + lam * negative-query penalty."""
    _require_neg_queries(batch)
    base = cl_loss(batch, cfg)
    if cfg.lam == 0.0:
        return base
    return (1.0 - cfg.lam) * base + cfg.lam * _penalty(batch)


def cl_loss_grad(batch: ContrastiveBatch, cfg: LossConfig) -> BatchGrads:
    """Analytic gradients of cl_loss w.r.t. query, positive and negatives."""
    scores = _scores(batch)
    _, probs = _log_softmax_first(scores, cfg.tau)
    # d loss / d score_i = (p_i - 1[i == 0]) / tau
    dscores = probs.copy()
    dscores[0] -= 1.0
    dscores /= cfg.tau

    d_query = np.zeros_like(batch.query_emb)
    da, db = cosine_similarity_grad(batch.query_emb, batch.pos_emb)
    d_query += dscores[0] * da
    d_pos = dscores[0] * db
    d_negs = []
    for j, neg in enumerate(batch.neg_embs):
        da, db = cosine_similarity_grad(batch.query_emb, neg)
        d_query += dscores[j + 1] * da
        d_negs.append(dscores[j + 1] * db)
    return BatchGrads(d_query, d_pos, d_negs)


def _zero_neg_query_grads(batch: ContrastiveBatch) -> list[list[np.ndarray]]:
    return [[np.zeros_like(q) for q in qs] for qs in batch.neg_query_embs]


def clp_loss_grad(batch: ContrastiveBatch, cfg: LossConfig) -> BatchGrads:
    """Analytic gradients of clp_loss; negatives receive contributions from
    both the contrastive term and the penalty term.

    With lam == 0 the contrastive gradient path is returned untouched
    (bit-identical to cl_loss_grad) and all negative-query gradients are zero.
    """
    _require_neg_queries(batch)
    grads = cl_loss_grad(batch, cfg)
    if cfg.lam == 0.0:
        grads.neg_query_embs = _zero_neg_query_grads(batch)
        return grads

    keep = 1.0 - cfg.lam
    grads.query_emb *= keep
    grads.pos_emb *= keep
    for g in grads.neg_embs:
        g *= keep

    grads.neg_query_embs = _zero_neg_query_grads(batch)
    if batch.neg_embs:
        num_negs = len(batch.neg_embs)
        for j, (neg, queries) in enumerate(zip(batch.neg_embs, batch.neg_query_embs)):
            coeff = -cfg.lam / (num_negs * len(queries))
            for m, q in enumerate(queries):
                da, db = cosine_similarity_grad(neg, q)
                grads.neg_embs[j] += coeff * da
                grads.neg_query_embs[j][m] = coeff * db
    return grads
