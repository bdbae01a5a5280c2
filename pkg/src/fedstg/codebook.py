"""Shared prototype codebook: scoring, pair selection, contrastive alignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError

DEFAULT_PROTOTYPES = 32
DEFAULT_CODE_DIM = 64
DEFAULT_TEMPERATURE = 0.5


@dataclass
class Codebook:
    delta: np.ndarray  # (prototypes, code_dim)
    trainable: bool = True

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.delta.ndim != 2 or self.delta.shape[0] < 2:
            raise ValueError(f"codebook needs shape (prototypes >= 2, dim), got {self.delta.shape}")
        if not np.all(np.isfinite(self.delta)):
            raise ValueError("codebook contains non-finite entries")

    @property
    def prototypes(self) -> int:
        return self.delta.shape[0]

    @property
    def dim(self) -> int:
        return self.delta.shape[1]


@dataclass
class QueryResult:
    alpha: Node  # (..., prototypes), softmax scores
    anchor: Node  # (..., code_dim), projected features


@dataclass
class PairSelection:
    pos_index: np.ndarray
    neg_index: np.ndarray
    pos: Node | None = None  # (..., code_dim) = alpha[j*] * delta[j*]
    neg: Node | None = None


def init_codebook(prototypes: int = DEFAULT_PROTOTYPES, dim: int = DEFAULT_CODE_DIM, seed: int = 0) -> Codebook:
    """Entries i.i.d. uniform in [-1/sqrt(dim), 1/sqrt(dim)]."""
    bound = 1.0 / np.sqrt(dim)
    rng = np.random.default_rng(seed)
    return Codebook(rng.uniform(-bound, bound, size=(prototypes, dim)))


def query(features: Node, w_q: Node, b: Node, delta: Node) -> QueryResult:
    """Softmax over prototypes of ``(features @ w_q + b) . delta_j``."""
    if features.shape[-1] != w_q.shape[0]:
        raise ShapeError("query", [features.shape, w_q.shape], "feature dim vs projection rows")
    if w_q.shape[-1] != delta.shape[-1] or b.shape[-1] != delta.shape[-1]:
        raise ShapeError("query", [w_q.shape, b.shape, delta.shape], "projected dim vs codebook dim")
    anchor = features @ w_q + b
    scores = anchor @ ad.transpose(delta, (1, 0))
    return QueryResult(ad.softmax(scores, axis=-1), anchor)


def top_two(alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best and second-best prototype indices; ties go to the lower index."""
    if alpha.shape[-1] < 2:
        raise ValueError("pair selection needs at least two prototypes")
    best = np.argmax(alpha, axis=-1)
    rest = alpha.copy()
    np.put_along_axis(rest, best[..., None], -np.inf, axis=-1)
    return best, np.argmax(rest, axis=-1)


def select_pairs(alpha: Node, delta: Node) -> PairSelection:
    pos_idx, neg_idx = top_two(alpha.value)
    pos = ad.take_along(alpha, pos_idx[..., None], axis=-1) * ad.take(delta, pos_idx, axis=0)
    neg = ad.take_along(alpha, neg_idx[..., None], axis=-1) * ad.take(delta, neg_idx, axis=0)
    return PairSelection(pos_idx, neg_idx, pos, neg)


def branch_loss(anchor: Node, pos: Node, neg: Node, tau: float = DEFAULT_TEMPERATURE) -> Node:
    """Mean over elements of ``-log(e^{s+/tau} / (e^{s+/tau} + e^{s-/tau}))``."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    s_pos = ad.cosine(anchor, pos) * (1.0 / tau)
    s_neg = ad.cosine(anchor, neg) * (1.0 / tau)
    per = ad.log(ad.exp(s_pos) + ad.exp(s_neg)) - s_pos
    return ad.mean(per)


def contrastive_loss(anchor_s, pos_s, neg_s, anchor_t, pos_t, neg_t, tau: float = DEFAULT_TEMPERATURE) -> Node:
    """Spatial plus temporal alignment loss."""
    return branch_loss(anchor_s, pos_s, neg_s, tau) + branch_loss(anchor_t, pos_t, neg_t, tau)


def similarity_table(anchor: Node, delta: Node) -> Node:
    """Cosine of every anchor with every prototype, shape ``(..., prototypes)``."""
    return ad.normalize(anchor) @ ad.transpose(ad.normalize(delta), (1, 0))


def branch_loss_indexed(anchor: Node, delta: Node, pos_index: np.ndarray, neg_index: np.ndarray,
                        tau: float = DEFAULT_TEMPERATURE) -> Node:
    """:func:`branch_loss` evaluated from one anchor-by-prototype similarity table.

    Cosine ignores positive scaling, so the alpha factors on the pair only
    enter through the 1e-12 norm guard; dropping them avoids gathering a
    prototype row per anchor.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    sims = similarity_table(anchor, delta) * (1.0 / tau)
    s_pos = ad.take_along(sims, pos_index[..., None], axis=-1)
    s_neg = ad.take_along(sims, neg_index[..., None], axis=-1)
    per = ad.log(ad.exp(s_pos) + ad.exp(s_neg)) - s_pos
    return ad.mean(per)


def align(features: Node, w_q: Node, b: Node, delta: Node, tau: float = DEFAULT_TEMPERATURE):
    """Query, select pairs and score one branch; returns ``(loss, QueryResult, PairSelection)``."""
    q = query(features, w_q, b, delta)
    pos_idx, neg_idx = top_two(q.alpha.value)
    return branch_loss_indexed(q.anchor, delta, pos_idx, neg_idx, tau), q, PairSelection(pos_idx, neg_idx)
